//! Dataset model: tokens, label schemes, labeled sequences, folds and chunks.
//!
//! Datasets are immutable once constructed; [`Dataset::new`] checks every
//! invariant so downstream code can index labels without re-validating.

mod io;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, parse_dataset, render_dataset, write_dataset, Format};
pub use synth::{
    generate_synthetic, LabelProfile, LengthProfile, SyntheticConfig, SyntheticCorpus,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub pos: Option<String>,
}

impl Token {
    pub fn new(text: impl Into<String>, pos: Option<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "token text must be non-empty without whitespace, got {text:?}"
            )));
        }
        Ok(Token { text, pos })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Flat,
    Iob,
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::Flat => "flat",
            SchemeKind::Iob => "iob",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(SchemeKind::Flat),
            "iob" => Ok(SchemeKind::Iob),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Ordered label inventory with a designated background label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelScheme {
    labels: Vec<String>,
    kind: SchemeKind,
    other: usize,
    index: HashMap<String, usize>,
}

impl LabelScheme {
    pub fn new(labels: Vec<String>, kind: SchemeKind, other: &str) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate label `{label}`")));
            }
        }
        let other_id = *index.get(other).ok_or_else(|| {
            Error::InvalidArgument(format!("background label `{other}` not in label set"))
        })?;
        if kind == SchemeKind::Iob {
            for label in labels.iter().filter(|l| l.as_str() != other) {
                let base = iob_base(label).ok_or_else(|| {
                    Error::InvalidArgument(format!("iob label `{label}` lacks a B-/I- prefix"))
                })?;
                for prefix in ["B-", "I-"] {
                    let needed = format!("{prefix}{base}");
                    if !index.contains_key(&needed) {
                        return Err(Error::InvalidArgument(format!(
                            "iob scheme has `{label}` but not `{needed}`"
                        )));
                    }
                }
            }
        }
        Ok(LabelScheme {
            labels,
            kind,
            other: other_id,
            index,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn other_id(&self) -> usize {
        self.other
    }

    pub fn other_label(&self) -> &str {
        &self.labels[self.other]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }
}

fn iob_base(label: &str) -> Option<&str> {
    label
        .strip_prefix("B-")
        .or_else(|| label.strip_prefix("I-"))
        .filter(|base| !base.is_empty())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub doc_id: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<usize>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    scheme: LabelScheme,
    sequences: Vec<LabeledSequence>,
    split: Option<Split>,
}

impl Dataset {
    pub fn new(
        scheme: LabelScheme,
        sequences: Vec<LabeledSequence>,
        split: Option<Split>,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(sequences.len());
        for seq in &sequences {
            if !ids.insert(seq.doc_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate doc_id `{}`",
                    seq.doc_id
                )));
            }
            if seq.labels.len() != seq.tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "doc `{}`: {} tokens but {} labels",
                    seq.doc_id,
                    seq.tokens.len(),
                    seq.labels.len()
                )));
            }
            if let Some(&bad) = seq.labels.iter().find(|&&l| l >= scheme.len()) {
                return Err(Error::InvalidArgument(format!(
                    "doc `{}`: label id {bad} outside scheme",
                    seq.doc_id
                )));
            }
        }
        if let Some(split) = &split {
            let train: HashSet<&str> = split.train.iter().map(String::as_str).collect();
            for id in split.train.iter().chain(&split.test) {
                if !ids.contains(id.as_str()) {
                    return Err(Error::InvalidArgument(format!(
                        "split references unknown doc_id `{id}`"
                    )));
                }
            }
            if let Some(id) = split.test.iter().find(|id| train.contains(id.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "doc_id `{id}` is in both train and test splits"
                )));
            }
        }
        Ok(Dataset {
            scheme,
            sequences,
            split,
        })
    }

    pub fn scheme(&self) -> &LabelScheme {
        &self.scheme
    }

    pub fn sequences(&self) -> &[LabeledSequence] {
        &self.sequences
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.sequences.iter().map(|s| s.doc_id.as_str()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(LabeledSequence::len).sum()
    }

    pub fn max_len(&self) -> usize {
        self.sequences
            .iter()
            .map(LabeledSequence::len)
            .max()
            .unwrap_or(0)
    }

    /// Sequences whose doc_id is in `ids`, in dataset order. The split is dropped.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Dataset {
        let keep: HashSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        Dataset {
            scheme: self.scheme.clone(),
            sequences: self
                .sequences
                .iter()
                .filter(|s| keep.contains(s.doc_id.as_str()))
                .cloned()
                .collect(),
            split: None,
        }
    }

    pub fn with_split(mut self, split: Option<Split>) -> Result<Self> {
        let sequences = std::mem::take(&mut self.sequences);
        Dataset::new(self.scheme, sequences, split)
    }

    /// The train and test portions of a predefined split.
    pub fn split_parts(&self) -> Option<(Dataset, Dataset)> {
        let split = self.split.as_ref()?;
        Some((self.subset(&split.train), self.subset(&split.test)))
    }

    pub fn label_names(&self, seq: &LabeledSequence) -> Vec<&str> {
        seq.labels.iter().map(|&l| self.scheme.name(l)).collect()
    }
}

/// Collapse `B-X` / `I-X` labels into `X`, producing a flat scheme.
pub fn iob_collapse(d: &Dataset) -> Result<Dataset> {
    if d.scheme.kind != SchemeKind::Iob {
        return Err(Error::InvalidArgument(
            "iob_collapse requires an iob-scheme dataset".into(),
        ));
    }
    let other = d.scheme.other_label().to_string();
    let mut flat_labels = vec![other.clone()];
    let mut mapping = Vec::with_capacity(d.scheme.len());
    for label in &d.scheme.labels {
        let base = if *label == other {
            other.as_str()
        } else {
            iob_base(label).expect("validated iob label")
        };
        let id = match flat_labels.iter().position(|l| l == base) {
            Some(id) => id,
            None => {
                flat_labels.push(base.to_string());
                flat_labels.len() - 1
            }
        };
        mapping.push(id);
    }
    let scheme = LabelScheme::new(flat_labels, SchemeKind::Flat, &other)?;
    let sequences = d
        .sequences
        .iter()
        .map(|s| LabeledSequence {
            doc_id: s.doc_id.clone(),
            tokens: s.tokens.clone(),
            labels: s.labels.iter().map(|&l| mapping[l]).collect(),
        })
        .collect();
    Dataset::new(scheme, sequences, d.split.clone())
}

/// Mark chunk-initial tokens `B-X` and continuation tokens `I-X`.
pub fn iob_expand(d: &Dataset) -> Result<Dataset> {
    if d.scheme.kind != SchemeKind::Flat {
        return Err(Error::InvalidArgument(
            "iob_expand requires a flat-scheme dataset".into(),
        ));
    }
    let other = d.scheme.other;
    let mut labels = vec![d.scheme.other_label().to_string()];
    let mut begin = vec![0; d.scheme.len()];
    let mut inside = vec![0; d.scheme.len()];
    for (id, name) in d.scheme.labels.iter().enumerate() {
        if id == other {
            continue;
        }
        begin[id] = labels.len();
        labels.push(format!("B-{name}"));
        inside[id] = labels.len();
        labels.push(format!("I-{name}"));
    }
    let scheme = LabelScheme::new(labels, SchemeKind::Iob, d.scheme.other_label())?;
    let sequences = d
        .sequences
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .iter()
                .enumerate()
                .map(|(t, &l)| {
                    if l == other {
                        0
                    } else if t > 0 && s.labels[t - 1] == l {
                        inside[l]
                    } else {
                        begin[l]
                    }
                })
                .collect();
            LabeledSequence {
                doc_id: s.doc_id.clone(),
                tokens: s.tokens.clone(),
                labels,
            }
        })
        .collect();
    Dataset::new(scheme, sequences, d.split.clone())
}

/// Assignment of every doc_id to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl SplitPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// (train ids, held-out ids) for fold `fold`, each in sorted order.
    pub fn fold(&self, fold: usize) -> (Vec<String>, Vec<String>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (id, &f) in &self.assignments {
            if f == fold {
                held.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
        (train, held)
    }
}

/// Seeded shuffle of doc_ids followed by a round-robin deal into `k` folds.
pub fn make_folds(d: &Dataset, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "k must be at least 2, got {k}"
        )));
    }
    if d.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot make {k} folds from {} sequences",
            d.len()
        )));
    }
    let mut ids: Vec<&str> = d.doc_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(SplitPlan {
        k,
        seed,
        assignments,
    })
}

/// A maximal run of one non-background label, `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

pub fn chunks_from_labels(labels: &[usize], other: usize) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let label = labels[t];
        let start = t;
        while t < labels.len() && labels[t] == label {
            t += 1;
        }
        if label != other {
            chunks.push(Chunk {
                start,
                end: t,
                label,
            });
        }
    }
    chunks
}

/// Chunks of a flat-scheme sequence, with the background label given by name.
pub fn sequence_chunks(
    seq: &LabeledSequence,
    scheme: &LabelScheme,
    other_label: &str,
) -> Result<Vec<Chunk>> {
    if scheme.kind() != SchemeKind::Flat {
        return Err(Error::InvalidArgument(
            "chunk extraction requires a flat scheme".into(),
        ));
    }
    let other = scheme
        .id(other_label)
        .ok_or_else(|| Error::UnknownLabel(other_label.to_string()))?;
    Ok(chunks_from_labels(&seq.labels, other))
}

pub fn labels_from_chunks(len: usize, chunks: &[Chunk], other: usize) -> Vec<usize> {
    let mut labels = vec![other; len];
    for c in chunks {
        labels[c.start..c.end].fill(c.label);
    }
    labels
}
