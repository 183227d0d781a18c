//! Hand-built sparse token features and the frozen feature vocabulary.
//!
//! Feature strings follow the `word-4:antiseptic`, `tag+1:IN`, `bias:1`
//! convention. Only active indicators are emitted; a context flag with value
//! zero produces no feature.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, Token};
use crate::error::{Error, Result};
use crate::lexicon::{
    cue_context_flags, load_cue_lexicon, load_lexicon, match_spans, CueLexicon, Lexicon,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturizerConfig {
    pub word_window: usize,
    pub pos_window: usize,
    pub cue_lexicons: Vec<CueLexicon>,
    pub span_lexicons: Vec<Lexicon>,
    pub enable_orthography: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            word_window: 4,
            pos_window: 4,
            cue_lexicons: Vec::new(),
            span_lexicons: Vec::new(),
            enable_orthography: true,
        }
    }
}

/// On-disk form of [`FeaturizerConfig`]; lexicons are referenced by path,
/// relative paths resolving against the config file's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfigFile {
    #[serde(default = "four")]
    pub word_window: usize,
    #[serde(default = "four")]
    pub pos_window: usize,
    #[serde(default = "yes")]
    pub orthography: bool,
    #[serde(default)]
    pub cue_lexicons: Vec<PathBuf>,
    #[serde(default)]
    pub span_lexicons: Vec<PathBuf>,
}

fn four() -> usize {
    4
}

fn yes() -> bool {
    true
}

impl FeaturizerConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rewrite lexicon paths so they no longer depend on `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        for p in self
            .cue_lexicons
            .iter_mut()
            .chain(self.span_lexicons.iter_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn load(&self) -> Result<FeaturizerConfig> {
        Ok(FeaturizerConfig {
            word_window: self.word_window,
            pos_window: self.pos_window,
            enable_orthography: self.orthography,
            cue_lexicons: self
                .cue_lexicons
                .iter()
                .map(|p| load_cue_lexicon(p))
                .collect::<Result<_>>()?,
            span_lexicons: self
                .span_lexicons
                .iter()
                .map(|p| load_lexicon(p))
                .collect::<Result<_>>()?,
        })
    }
}

/// Read a featurizer config file and load every lexicon it references.
pub fn load_featurizer_config(path: &Path) -> Result<(FeaturizerConfigFile, FeaturizerConfig)> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = FeaturizerConfigFile::read(path)?.resolved(base);
    let cfg = file.load()?;
    Ok((file, cfg))
}

fn offset_key(prefix: &str, k: isize) -> String {
    match k {
        0 => prefix.to_string(),
        k if k < 0 => format!("{prefix}{k}"),
        k => format!("{prefix}+{k}"),
    }
}

fn is_upper(s: &str) -> bool {
    s.chars().any(char::is_alphabetic) && !s.chars().any(char::is_lowercase)
}

fn is_title(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_uppercase() => chars.all(|c| !c.is_alphabetic() || c.is_lowercase()),
        _ => false,
    }
}

fn is_punctuation(s: &str) -> bool {
    s.chars().all(|c| !c.is_alphanumeric())
}

/// Per-sequence lexicon lookups shared by every position.
struct SequenceContext {
    cue_flags: Vec<Vec<crate::lexicon::ContextFlags>>,
    in_span: Vec<Vec<bool>>,
}

impl SequenceContext {
    fn new(tokens: &[Token], cfg: &FeaturizerConfig) -> Self {
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let cue_flags = cfg
            .cue_lexicons
            .iter()
            .map(|c| cue_context_flags(&texts, c))
            .collect();
        let in_span = cfg
            .span_lexicons
            .iter()
            .map(|lex| {
                let mut covered = vec![false; texts.len()];
                for (s, e) in match_spans(&texts, lex) {
                    covered[s..e].fill(true);
                }
                covered
            })
            .collect();
        SequenceContext { cue_flags, in_span }
    }
}

fn token_features(
    tokens: &[Token],
    i: usize,
    cfg: &FeaturizerConfig,
    ctx: &SequenceContext,
) -> Vec<String> {
    let n = tokens.len() as isize;
    let i_s = i as isize;
    let mut out = Vec::new();
    // a zero window switches the family off, centre token included
    let w = cfg.word_window as isize;
    for k in (-w..=w).filter(|_| w > 0) {
        let j = i_s + k;
        if (0..n).contains(&j) {
            out.push(format!(
                "{}:{}",
                offset_key("word", k),
                tokens[j as usize].text
            ));
        }
    }
    let p = cfg.pos_window as isize;
    for k in (-p..=p).filter(|_| p > 0) {
        let j = i_s + k;
        if (0..n).contains(&j) {
            if let Some(tag) = &tokens[j as usize].pos {
                out.push(format!("{}:{tag}", offset_key("tag", k)));
            }
        }
    }
    out.push("bias:1".to_string());
    if cfg.enable_orthography {
        let text = &tokens[i].text;
        if is_upper(text) {
            out.push("is_upper:1".into());
        }
        if is_title(text) {
            out.push("is_title:1".into());
        }
        if is_punctuation(text) {
            out.push("is_punctuation:1".into());
        }
    }
    for (cue, flags) in cfg.cue_lexicons.iter().zip(&ctx.cue_flags) {
        if flags[i].in_left_context {
            out.push(format!("{}:in_left_context", cue.name()));
        }
        if flags[i].in_right_context {
            out.push(format!("{}:in_right_context", cue.name()));
        }
    }
    for (lex, covered) in cfg.span_lexicons.iter().zip(&ctx.in_span) {
        if covered[i] {
            out.push(format!("{}:in_span", lex.name()));
        }
    }
    out
}

/// Feature strings for position `i`. Depends only on tokens, POS tags and config.
pub fn featurize_token(tokens: &[Token], i: usize, cfg: &FeaturizerConfig) -> Result<Vec<String>> {
    if i >= tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "position {i} out of range for a sequence of {} tokens",
            tokens.len()
        )));
    }
    Ok(token_features(
        tokens,
        i,
        cfg,
        &SequenceContext::new(tokens, cfg),
    ))
}

/// Feature strings for every position, sharing lexicon lookups across positions.
pub fn featurize_sequence(tokens: &[Token], cfg: &FeaturizerConfig) -> Vec<Vec<String>> {
    let ctx = SequenceContext::new(tokens, cfg);
    (0..tokens.len())
        .map(|i| token_features(tokens, i, cfg, &ctx))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureVocabulary {
    strings: Vec<String>,
    index: HashMap<String, u32>,
    frozen: bool,
}

impl FeatureVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, feature: &str) -> Result<u32> {
        if let Some(&id) = self.index.get(feature) {
            return Ok(id);
        }
        if self.frozen {
            return Err(Error::InvalidState(
                "insert into a frozen vocabulary".into(),
            ));
        }
        let id = self.strings.len() as u32;
        self.strings.push(feature.to_string());
        self.index.insert(feature.to_string(), id);
        Ok(id)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn id(&self, feature: &str) -> Option<u32> {
        self.index.get(feature).copied()
    }

    pub fn feature(&self, id: u32) -> &str {
        &self.strings[id as usize]
    }

    /// `feature-string<TAB>id` per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, s) in self.strings.iter().enumerate() {
            out.push_str(s);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the TSV serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut vocab = FeatureVocabulary::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (feature, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::record(origin, n + 1, "expected `feature<TAB>id`"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::record(origin, n + 1, format!("bad id `{id}`")))?;
            if id != vocab.len() {
                return Err(Error::record(
                    origin,
                    n + 1,
                    format!("ids must be contiguous, got {id}"),
                ));
            }
            if vocab.index.contains_key(feature) {
                return Err(Error::record(
                    origin,
                    n + 1,
                    format!("duplicate feature `{feature}`"),
                ));
            }
            vocab.insert(feature)?;
        }
        vocab.freeze();
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Vocabulary over every feature string emitted on `d`, ids in first-occurrence order.
pub fn build_vocabulary(d: &Dataset, cfg: &FeaturizerConfig) -> Result<FeatureVocabulary> {
    if d.token_count() == 0 {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from an empty dataset".into(),
        ));
    }
    let mut vocab = FeatureVocabulary::new();
    for seq in d.sequences() {
        for feats in featurize_sequence(&seq.tokens, cfg) {
            for f in &feats {
                vocab.insert(f)?;
            }
        }
    }
    vocab.freeze();
    Ok(vocab)
}

/// Binary indicator vector: sorted, strictly increasing feature ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseFeatureVector {
    indices: Vec<u32>,
    dimension: usize,
}

impl SparseFeatureVector {
    pub fn new(mut indices: Vec<u32>, dimension: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last as usize >= dimension {
                return Err(Error::Dimension(format!(
                    "feature id {last} outside dimension {dimension}"
                )));
            }
        }
        Ok(SparseFeatureVector { indices, dimension })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for &i in &self.indices {
            v[i as usize] = 1.0;
        }
        v
    }
}

/// Map known feature strings to ids; unknown strings are dropped.
pub fn vectorize<S: AsRef<str>>(
    features: &[S],
    vocab: &FeatureVocabulary,
) -> Result<SparseFeatureVector> {
    if !vocab.is_frozen() {
        return Err(Error::InvalidState(
            "vectorize requires a frozen vocabulary".into(),
        ));
    }
    let ids = features
        .iter()
        .filter_map(|f| vocab.id(f.as_ref()))
        .collect();
    SparseFeatureVector::new(ids, vocab.len())
}

/// Featurize and vectorize a whole sequence.
pub fn sequence_vectors(
    tokens: &[Token],
    cfg: &FeaturizerConfig,
    vocab: &FeatureVocabulary,
) -> Result<Vec<SparseFeatureVector>> {
    featurize_sequence(tokens, cfg)
        .iter()
        .map(|f| vectorize(f, vocab))
        .collect()
}
