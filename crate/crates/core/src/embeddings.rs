//! Dense inputs for the LSTM branch: Glorot initialization, static word
//! tables, and precomputed contextual per-token vectors.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, LabeledSequence};
use crate::error::{Error, Result};

/// Entries i.i.d. uniform on `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`,
/// shaped `fan_out x fan_in`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, seed: u64) -> Result<Array2<f64>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "glorot_uniform needs non-zero dimensions, got {fan_in}x{fan_out}"
        )));
    }
    Ok(glorot_uniform_with(
        fan_in,
        fan_out,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
}

pub fn glorot_uniform_with<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Array2<f64> {
    let bound = glorot_bound(fan_in, fan_out);
    Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    None,
    RandomStatic,
    PretrainedStatic,
    PrecomputedContextual,
}

/// Word vectors with a trailing out-of-vocabulary row.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticEmbeddingTable {
    words: Vec<String>,
    vocab: HashMap<String, usize>,
    /// `(V + 1) x d`; the last row is the OOV vector.
    matrix: Array2<f64>,
    trainable: bool,
}

impl StaticEmbeddingTable {
    /// Build from known rows; the OOV row is set to the mean of `rows`.
    pub fn new(words: Vec<String>, rows: Array2<f64>, trainable: bool) -> Result<Self> {
        if rows.nrows() != words.len() {
            return Err(Error::Dimension(format!(
                "{} words but {} rows",
                words.len(),
                rows.nrows()
            )));
        }
        if rows.ncols() == 0 {
            return Err(Error::Dimension("embedding dimension must be >= 1".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "embedding table contains non-finite values".into(),
            ));
        }
        let mut vocab = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            vocab.entry(w.to_lowercase()).or_insert(i);
        }
        let d = rows.ncols();
        let mean = rows
            .mean_axis(ndarray::Axis(0))
            .unwrap_or_else(|| Array1::zeros(d));
        let mut matrix = Array2::zeros((words.len() + 1, d));
        matrix
            .slice_mut(ndarray::s![..words.len(), ..])
            .assign(&rows);
        matrix.row_mut(words.len()).assign(&mean);
        Ok(StaticEmbeddingTable {
            words,
            vocab,
            matrix,
            trainable,
        })
    }

    /// Glorot-initialized trainable table over `words`.
    pub fn random(words: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let v = words.len().max(1);
        let rows = glorot_uniform(dim, v, seed)?;
        let rows = rows.slice(ndarray::s![..words.len(), ..]).to_owned();
        Self::new(words, rows, true)
    }

    /// Trainable random table over the case-folded vocabulary of `d`.
    pub fn random_for(d: &Dataset, dim: usize, seed: u64) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in d.sequences() {
            for t in &s.tokens {
                let w = t.text.to_lowercase();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
        }
        Self::random(words, dim, seed)
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn oov_row(&self) -> usize {
        self.words.len()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.matrix
    }

    /// Row for `word` after lowercasing, or the OOV row.
    pub fn row_index(&self, word: &str) -> usize {
        self.vocab
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(self.words.len())
    }

    /// SHA-256 over the matrix bytes, for detecting mutation.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.matrix.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `word v1 ... vd` per line for the known rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in self.matrix.row(i) {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Text table, `word v1 ... vd` per line. Loaded tables are frozen.
pub fn load_static_embeddings(path: &Path) -> Result<StaticEmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut words = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::record(path, n + 1, format!("non-numeric field `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None if row.is_empty() => return Err(Error::record(path, n + 1, "no vector values")),
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::record(
                    path,
                    n + 1,
                    format!("expected {d} values, found {}", row.len()),
                ))
            }
            _ => {}
        }
        words.push(word.to_string());
        values.extend(row);
    }
    let dim = dim.ok_or_else(|| Error::record(path, 1, "empty embedding file"))?;
    let rows = Array2::from_shape_vec((words.len(), dim), values).expect("shape checked");
    StaticEmbeddingTable::new(words, rows, false).map_err(|e| Error::record(path, 1, e.to_string()))
}

const CTX_MAGIC: &[u8; 7] = b"CTXEMB1";

/// Per-token vectors keyed by `(doc_id, token index)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextualEmbeddingStore {
    dim: usize,
    vectors: HashMap<(String, usize), Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct ContextRecord {
    doc_id: String,
    index: usize,
    vec: Vec<f32>,
}

impl ContextualEmbeddingStore {
    pub fn new(dim: usize) -> Self {
        ContextualEmbeddingStore {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, doc_id: &str, index: usize, vec: Vec<f32>) -> Result<()> {
        if vec.len() != self.dim {
            return Err(Error::Dimension(format!(
                "vector for ({doc_id}, {index}) has length {}, store dimension is {}",
                vec.len(),
                self.dim
            )));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector for ({doc_id}, {index})")));
        }
        match self.vectors.entry((doc_id.to_string(), index)) {
            std::collections::hash_map::Entry::Occupied(_) => Err(Error::InvalidArgument(format!(
                "duplicate key ({doc_id}, {index})"
            ))),
            std::collections::hash_map::Entry::Vacant(slot) => {
                slot.insert(vec);
                Ok(())
            }
        }
    }

    pub fn get(&self, doc_id: &str, index: usize) -> Result<&[f32]> {
        self.vectors
            .get(&(doc_id.to_string(), index))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingVector {
                doc_id: doc_id.to_string(),
                index,
            })
    }

    fn sorted_keys(&self) -> Vec<&(String, usize)> {
        let mut keys: Vec<_> = self.vectors.keys().collect();
        keys.sort();
        keys
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for key in self.sorted_keys() {
            let rec = ContextRecord {
                doc_id: key.0.clone(),
                index: key.1,
                vec: self.vectors[key].clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// `CTXEMB1`, u32 dim, u64 count, then per record: u32 id length, id
    /// bytes, u64 index, `dim` little-endian f32 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CTX_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.vectors.len() as u64).to_le_bytes())?;
        for key in self.sorted_keys() {
            w.write_all(&(key.0.len() as u32).to_le_bytes())?;
            w.write_all(key.0.as_bytes())?;
            w.write_all(&(key.1 as u64).to_le_bytes())?;
            for v in &self.vectors[key] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let w = std::io::BufWriter::new(file);
        let res = if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(w)
        } else {
            self.write_jsonl(w)
        };
        res.map_err(|e| Error::io(path, e))
    }
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Load a store from JSONL or from the `CTXEMB1` binary layout (detected by magic).
pub fn load_contextual_store(path: &Path) -> Result<ContextualEmbeddingStore> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let is_binary = reader
        .fill_buf()
        .map_err(|e| Error::io(path, e))?
        .starts_with(CTX_MAGIC);
    if is_binary {
        let _magic: [u8; 7] = read_exact(&mut reader, path)?;
        let dim = u32::from_le_bytes(read_exact(&mut reader, path)?) as usize;
        let count = u64::from_le_bytes(read_exact(&mut reader, path)?);
        let mut store = ContextualEmbeddingStore::new(dim);
        for n in 0..count {
            let len = u32::from_le_bytes(read_exact(&mut reader, path)?) as usize;
            let mut id = vec![0u8; len];
            reader.read_exact(&mut id).map_err(|e| Error::io(path, e))?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::record(path, n as usize + 1, "doc_id is not UTF-8"))?;
            let index = u64::from_le_bytes(read_exact(&mut reader, path)?) as usize;
            let mut vec = Vec::with_capacity(dim);
            for _ in 0..dim {
                vec.push(f32::from_le_bytes(read_exact(&mut reader, path)?));
            }
            store
                .insert(&id, index, vec)
                .map_err(|e| Error::record(path, n as usize + 1, e.to_string()))?;
        }
        return Ok(store);
    }
    let mut store: Option<ContextualEmbeddingStore> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContextRecord = serde_json::from_str(&line)
            .map_err(|e| Error::record(path, n + 1, format!("malformed record: {e}")))?;
        let s = store.get_or_insert_with(|| ContextualEmbeddingStore::new(rec.vec.len()));
        s.insert(&rec.doc_id, rec.index, rec.vec)
            .map_err(|e| Error::record(path, n + 1, e.to_string()))?;
    }
    store.ok_or_else(|| Error::record(path, 1, "empty contextual store"))
}

pub enum EmbeddingSource {
    None,
    RandomStatic(StaticEmbeddingTable),
    PretrainedStatic(StaticEmbeddingTable),
    Contextual(ContextualEmbeddingStore),
}

impl EmbeddingSource {
    pub fn kind(&self) -> EmbeddingKind {
        match self {
            EmbeddingSource::None => EmbeddingKind::None,
            EmbeddingSource::RandomStatic(_) => EmbeddingKind::RandomStatic,
            EmbeddingSource::PretrainedStatic(_) => EmbeddingKind::PretrainedStatic,
            EmbeddingSource::Contextual(_) => EmbeddingKind::PrecomputedContextual,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::None => 0,
            EmbeddingSource::RandomStatic(t) | EmbeddingSource::PretrainedStatic(t) => t.dim(),
            EmbeddingSource::Contextual(s) => s.dim(),
        }
    }

    pub fn table(&self) -> Option<&StaticEmbeddingTable> {
        match self {
            EmbeddingSource::RandomStatic(t) | EmbeddingSource::PretrainedStatic(t) => Some(t),
            _ => None,
        }
    }
}

/// Row `i` is the vector for token `i`.
pub fn embed_sequence(seq: &LabeledSequence, src: &EmbeddingSource) -> Result<Array2<f64>> {
    match src {
        EmbeddingSource::None => Err(Error::InvalidArgument(
            "embed_sequence called without an embedding source".into(),
        )),
        EmbeddingSource::RandomStatic(t) | EmbeddingSource::PretrainedStatic(t) => {
            let mut out = Array2::zeros((seq.len(), t.dim()));
            for (i, tok) in seq.tokens.iter().enumerate() {
                out.row_mut(i).assign(&t.matrix.row(t.row_index(&tok.text)));
            }
            Ok(out)
        }
        EmbeddingSource::Contextual(store) => {
            let mut out = Array2::zeros((seq.len(), store.dim()));
            for i in 0..seq.len() {
                let v = store.get(&seq.doc_id, i)?;
                for (o, &x) in out.row_mut(i).iter_mut().zip(v) {
                    *o = x as f64;
                }
            }
            Ok(out)
        }
    }
}

/// Settings for [`pseudo_contextual_store`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoContextConfig {
    pub dim: usize,
    pub seed: u64,
    /// Per-step decay of the running left-context sum.
    #[serde(default = "half")]
    pub decay: f64,
    #[serde(default = "half")]
    pub context_weight: f64,
    /// Positions at or beyond this index receive Gaussian noise.
    #[serde(default)]
    pub noise_after: Option<usize>,
    #[serde(default)]
    pub noise_std: f64,
}

fn half() -> f64 {
    0.5
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn word_vector(word: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.to_lowercase().as_bytes()) ^ seed);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            scale * {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            }
        })
        .collect()
}

/// Deterministic stand-in producer for contextual vectors: a hashed word
/// vector plus a decaying sum of the hashed vectors to its left, with
/// optional position-dependent noise.
pub fn pseudo_contextual_store(
    d: &Dataset,
    cfg: &PseudoContextConfig,
) -> Result<ContextualEmbeddingStore> {
    if cfg.dim == 0 {
        return Err(Error::InvalidArgument(
            "pseudo-contextual dimension must be >= 1".into(),
        ));
    }
    let mut store = ContextualEmbeddingStore::new(cfg.dim);
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    for seq in d.sequences() {
        let mut context = vec![0.0; cfg.dim];
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(fnv1a(seq.doc_id.as_bytes()) ^ cfg.seed.rotate_left(17));
        for (i, tok) in seq.tokens.iter().enumerate() {
            let base = cache
                .entry(tok.text.to_lowercase())
                .or_insert_with(|| word_vector(&tok.text, cfg.seed, cfg.dim))
                .clone();
            let noisy = cfg.noise_after.is_some_and(|p| i >= p) && cfg.noise_std > 0.0;
            let vec: Vec<f32> = base
                .iter()
                .zip(&context)
                .map(|(b, c)| {
                    let mut v = b + cfg.context_weight * c;
                    if noisy {
                        v += cfg.noise_std * {
                            let z: f64 = StandardNormal.sample(&mut noise_rng);
                            z
                        };
                    }
                    v as f32
                })
                .collect();
            store.insert(&seq.doc_id, i, vec)?;
            for (c, b) in context.iter_mut().zip(&base) {
                *c = cfg.decay * *c + b;
            }
        }
    }
    Ok(store)
}
