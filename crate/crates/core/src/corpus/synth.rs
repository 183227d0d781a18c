//! Synthetic corpora whose span labels are recoverable from lexicon
//! membership combined with cue-word context.
//!
//! Each span event emits a cue word, a short run of filler tokens, then a
//! lexicon phrase labeled with the cue's label. Bare mentions (a phrase with
//! no cue) are labeled background, so neither lexicon lookup nor word
//! identity alone determines the label.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelScheme, LabeledSequence, SchemeKind, Split, Token};
use crate::error::{Error, Result};
use crate::lexicon::{CueLexicon, Lexicon};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthProfile {
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProfile {
    pub name: String,
    /// Relative frequency of span events carrying this label.
    pub weight: f64,
    /// Key into [`SyntheticConfig::lexicons`].
    pub lexicon: String,
    pub cues: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub name: String,
    #[serde(default = "default_other")]
    pub other: String,
    pub num_sequences: usize,
    pub length: LengthProfile,
    /// Optional second length mode, drawn with probability `long_fraction`.
    #[serde(default)]
    pub long_length: Option<LengthProfile>,
    #[serde(default)]
    pub long_fraction: f64,
    pub filler: Vec<String>,
    /// Chance of starting a span event at each free position.
    pub span_rate: f64,
    /// Filler tokens between cue and phrase are drawn from `min_cue_gap..=max_cue_gap`.
    #[serde(default)]
    pub min_cue_gap: usize,
    #[serde(default)]
    pub max_cue_gap: usize,
    /// Fraction of span events emitted as bare background mentions.
    #[serde(default)]
    pub bare_mention_rate: f64,
    /// Fraction of cued span events whose cue follows the phrase instead of
    /// preceding it.
    #[serde(default)]
    pub trailing_cue_rate: f64,
    pub labels: Vec<LabelProfile>,
    pub lexicons: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_cue_window")]
    pub cue_window: usize,
    /// Trailing share of documents placed in a test split (0 disables the split).
    #[serde(default)]
    pub test_fraction: f64,
    /// Share of each lexicon's phrases reserved for test documents.
    #[serde(default)]
    pub holdout_phrase_fraction: f64,
    /// Probability that a training span's label is replaced by another label.
    #[serde(default)]
    pub label_noise: f64,
}

fn default_other() -> String {
    "Other".into()
}

fn default_cue_window() -> usize {
    4
}

pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub span_lexicons: Vec<Lexicon>,
    pub cue_lexicons: Vec<CueLexicon>,
}

const FILLER_TAGS: [&str; 6] = ["DT", "NN", "VB", "IN", "JJ", "RB"];

fn filler_tag(word: &str) -> &'static str {
    let h = word.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    FILLER_TAGS[(h % FILLER_TAGS.len() as u64) as usize]
}

struct PhrasePools {
    train: Vec<Vec<String>>,
    test: Vec<Vec<String>>,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidArgument("no labels declared".into()));
        }
        if self.filler.is_empty() {
            return Err(Error::InvalidArgument("filler vocabulary is empty".into()));
        }
        for l in &self.labels {
            match self.lexicons.get(&l.lexicon) {
                Some(p) if p.iter().any(|s| !s.trim().is_empty()) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "label `{}` has an empty lexicon `{}`",
                        l.name, l.lexicon
                    )))
                }
            }
            if l.cues.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "label `{}` has no cues",
                    l.name
                )));
            }
            if !(l.weight > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "label `{}` needs a positive weight",
                    l.name
                )));
            }
        }
        if self.min_cue_gap > self.max_cue_gap {
            return Err(Error::InvalidArgument(
                "min_cue_gap exceeds max_cue_gap".into(),
            ));
        }
        for p in std::iter::once(&self.length).chain(self.long_length.as_ref()) {
            if p.min == 0 || p.min > p.max {
                return Err(Error::InvalidArgument(
                    "length bounds must satisfy 1 <= min <= max".into(),
                ));
            }
        }
        Ok(())
    }
}

fn sample_length(p: &LengthProfile, rng: &mut ChaCha8Rng) -> usize {
    let x = if p.std > 0.0 {
        Normal::new(p.mean, p.std).expect("finite std").sample(rng)
    } else {
        p.mean
    };
    (x.round().max(0.0) as usize).clamp(p.min, p.max)
}

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pools: BTreeMap<&str, PhrasePools> = BTreeMap::new();
    for (name, phrases) in &cfg.lexicons {
        let mut phrases: Vec<Vec<String>> = phrases
            .iter()
            .map(|p| p.split_whitespace().map(String::from).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        phrases.shuffle(&mut rng);
        let held = if cfg.test_fraction > 0.0 {
            ((phrases.len() as f64) * cfg.holdout_phrase_fraction).floor() as usize
        } else {
            0
        };
        let held = held.min(phrases.len().saturating_sub(1));
        let train = phrases[..phrases.len() - held].to_vec();
        pools.insert(
            name.as_str(),
            PhrasePools {
                train,
                test: phrases,
            },
        );
    }

    let mut labels = vec![cfg.other.clone()];
    labels.extend(cfg.labels.iter().map(|l| l.name.clone()));
    let scheme = LabelScheme::new(labels, SchemeKind::Flat, &cfg.other)?;
    let total_weight: f64 = cfg.labels.iter().map(|l| l.weight).sum();
    let n_test = ((cfg.num_sequences as f64) * cfg.test_fraction).round() as usize;
    let first_test = cfg.num_sequences - n_test.min(cfg.num_sequences);

    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    for n in 0..cfg.num_sequences {
        let is_test = n >= first_test && n_test > 0;
        let profile = match &cfg.long_length {
            Some(long) if rng.random::<f64>() < cfg.long_fraction => long,
            _ => &cfg.length,
        };
        let target = sample_length(profile, &mut rng);
        let mut tokens: Vec<Token> = Vec::with_capacity(target);
        let mut tags: Vec<usize> = Vec::with_capacity(target);

        let push =
            |tokens: &mut Vec<Token>, tags: &mut Vec<usize>, word: &str, pos: &str, label| {
                tokens.push(Token {
                    text: word.to_string(),
                    pos: Some(pos.to_string()),
                });
                tags.push(label);
            };

        while tokens.len() < target {
            let remaining = target - tokens.len();
            if rng.random::<f64>() < cfg.span_rate {
                let mut pick = rng.random::<f64>() * total_weight;
                let mut label_idx = cfg.labels.len() - 1;
                for (i, l) in cfg.labels.iter().enumerate() {
                    if pick < l.weight {
                        label_idx = i;
                        break;
                    }
                    pick -= l.weight;
                }
                let profile = &cfg.labels[label_idx];
                let pool = &pools[profile.lexicon.as_str()];
                let pool = if is_test { &pool.test } else { &pool.train };
                let phrase = pool.choose(&mut rng).expect("validated non-empty");
                let bare = rng.random::<f64>() < cfg.bare_mention_rate;
                let gap = rng.random_range(cfg.min_cue_gap..=cfg.max_cue_gap);
                let needed = phrase.len() + if bare { 0 } else { 1 + gap };
                if needed <= remaining {
                    let mut label = scheme.other_id();
                    let trailing = !bare && rng.random::<f64>() < cfg.trailing_cue_rate;
                    let cue = profile.cues.choose(&mut rng).expect("validated cues");
                    let gap_words: Vec<&String> = (0..gap)
                        .map(|_| cfg.filler.choose(&mut rng).expect("validated filler"))
                        .collect();
                    if !bare {
                        if !trailing {
                            push(&mut tokens, &mut tags, cue, "VB", scheme.other_id());
                            for w in &gap_words {
                                push(&mut tokens, &mut tags, w, filler_tag(w), scheme.other_id());
                            }
                        }
                        label = label_idx + 1;
                        if !is_test && cfg.labels.len() > 1 && rng.random::<f64>() < cfg.label_noise
                        {
                            let mut alt = rng.random_range(0..cfg.labels.len() - 1);
                            if alt >= label_idx {
                                alt += 1;
                            }
                            label = alt + 1;
                        }
                    }
                    for w in phrase {
                        push(&mut tokens, &mut tags, w, "NN", label);
                    }
                    if trailing {
                        for w in &gap_words {
                            push(&mut tokens, &mut tags, w, filler_tag(w), scheme.other_id());
                        }
                        push(&mut tokens, &mut tags, cue, "VB", scheme.other_id());
                    }
                    continue;
                }
            }
            let w = cfg.filler.choose(&mut rng).expect("validated filler");
            push(&mut tokens, &mut tags, w, filler_tag(w), scheme.other_id());
        }
        sequences.push(LabeledSequence {
            doc_id: format!("{}-{n:05}", cfg.name),
            tokens,
            labels: tags,
        });
    }

    let split = (n_test > 0).then(|| Split {
        train: sequences[..first_test]
            .iter()
            .map(|s| s.doc_id.clone())
            .collect(),
        test: sequences[first_test..]
            .iter()
            .map(|s| s.doc_id.clone())
            .collect(),
    });
    let dataset = Dataset::new(scheme, sequences, split)?;

    let span_lexicons = cfg
        .lexicons
        .iter()
        .map(|(name, phrases)| Lexicon::from_phrases(format!("lex_{name}"), phrases))
        .collect::<Result<Vec<_>>>()?;
    let cue_lexicons = cfg
        .labels
        .iter()
        .map(|l| {
            CueLexicon::new(
                format!("cue_{}", l.name),
                l.cues.iter().cloned(),
                cfg.cue_window,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticCorpus {
        dataset,
        span_lexicons,
        cue_lexicons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SyntheticConfig {
        SyntheticConfig {
            name: "t".into(),
            other: "Other".into(),
            num_sequences: 50,
            length: LengthProfile {
                mean: 12.0,
                std: 3.0,
                min: 4,
                max: 30,
            },
            long_length: None,
            long_fraction: 0.0,
            filler: vec!["the".into(), "patient".into(), "was".into()],
            span_rate: 0.2,
            min_cue_gap: 0,
            max_cue_gap: 1,
            bare_mention_rate: 0.0,
            trailing_cue_rate: 0.0,
            labels: vec![LabelProfile {
                name: "Positive".into(),
                weight: 1.0,
                lexicon: "disease".into(),
                cues: vec!["has".into()],
            }],
            lexicons: [(
                "disease".to_string(),
                vec!["asthma".to_string(), "heart failure".to_string()],
            )]
            .into_iter()
            .collect(),
            cue_window: 4,
            test_fraction: 0.0,
            holdout_phrase_fraction: 0.0,
            label_noise: 0.0,
        }
    }

    #[test]
    fn empty_lexicon_rejected() {
        let mut cfg = config();
        cfg.lexicons.insert("disease".into(), vec![]);
        let err = generate_synthetic(&cfg, 1).err().unwrap().to_string();
        assert!(err.contains("Positive"), "{err}");
    }

    #[test]
    fn spans_follow_cues() {
        let corpus = generate_synthetic(&config(), 3).unwrap();
        let d = &corpus.dataset;
        for s in d.sequences() {
            for (t, &l) in s.labels.iter().enumerate() {
                if l != 0 && (t == 0 || s.labels[t - 1] == 0) {
                    let window = &s.tokens[t.saturating_sub(2)..t];
                    assert!(window.iter().any(|tok| tok.text == "has"));
                }
            }
        }
        assert!(d.sequences().iter().any(|s| s.labels.contains(&1)));
    }

    #[test]
    fn holdout_phrases_stay_out_of_training() {
        let mut cfg = config();
        cfg.num_sequences = 200;
        cfg.test_fraction = 0.5;
        cfg.holdout_phrase_fraction = 0.5;
        let corpus = generate_synthetic(&cfg, 11).unwrap();
        let (train, _) = corpus.dataset.split_parts().unwrap();
        let words: Vec<String> = train
            .sequences()
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.text.clone()))
            .collect();
        let has_asthma = words.iter().any(|w| w == "asthma");
        let has_heart = words.iter().any(|w| w == "heart");
        assert!(has_asthma ^ has_heart);
    }
}
