//! The full tagger: optional LSTM branch over embeddings, optional hand-built
//! branch, projection to potentials and a CRF or softmax decoder. Also the
//! binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, LabeledSequence, SchemeKind};
use crate::crf::{self, PotentialMatrix, ProjectionParams, TransitionParams};
use crate::embeddings::{ContextualEmbeddingStore, EmbeddingKind, StaticEmbeddingTable};
use crate::error::{Error, Result};
use crate::featurizer::{
    sequence_vectors, FeatureVocabulary, FeaturizerConfig, SparseFeatureVector,
};
use crate::neural::{
    dense_backward, dense_forward, dropout_matrix, fuse, lstm_backward, lstm_forward, Activation,
    DenseCache, DenseLayerParams, DropoutSpec, EncoderOutput, LstmCache, LstmParams,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    #[default]
    Crf,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding width `d`.
    pub embedding: usize,
    /// LSTM hidden width `H`.
    pub hidden: usize,
    /// Compressed hand-built width `D`.
    pub dense: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embedding: 50,
            hidden: 64,
            dense: 64,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub embedding: EmbeddingKind,
    pub use_lstm: bool,
    pub use_hb: bool,
    #[serde(default)]
    pub decoder: Decoder,
    #[serde(default)]
    pub dims: ModelDims,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "one")]
    pub forget_bias: f64,
    /// Also apply dropout to the LSTM outputs.
    #[serde(default)]
    pub lstm_dropout: bool,
}

/// Names of the built-in variant profiles.
pub const PROFILE_NAMES: [&str; 4] = [
    "rand-LSTM-CRF",
    "HB-CRF",
    "ELMo-LSTM-CRF",
    "ELMo-LSTM-CRF-HB",
];

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.use_lstm != (self.embedding != EmbeddingKind::None) {
            return Err(Error::InvalidArgument(
                "an embedding source is used exactly when the LSTM branch is enabled".into(),
            ));
        }
        if !self.use_lstm && !self.use_hb {
            return Err(Error::InvalidArgument(
                "model needs the LSTM branch, the hand-built branch, or both".into(),
            ));
        }
        if self.use_lstm && (self.dims.embedding == 0 || self.dims.hidden == 0) {
            return Err(Error::InvalidArgument(
                "embedding and hidden widths must be >= 1".into(),
            ));
        }
        if self.use_lstm && self.use_hb && self.dims.dense == 0 {
            return Err(Error::InvalidArgument("dense width must be >= 1".into()));
        }
        Ok(())
    }

    /// The hand-built branch goes through the dense layer only alongside an LSTM.
    pub fn uses_dense_layer(&self) -> bool {
        self.use_hb && self.use_lstm
    }

    pub fn profile(name: &str) -> Option<ModelSpec> {
        let base = ModelSpec {
            embedding: EmbeddingKind::None,
            use_lstm: false,
            use_hb: false,
            decoder: Decoder::Crf,
            dims: ModelDims::default(),
            activation: Activation::Relu,
            forget_bias: 1.0,
            lstm_dropout: false,
        };
        let spec = match name {
            "rand-LSTM-CRF" => ModelSpec {
                embedding: EmbeddingKind::RandomStatic,
                use_lstm: true,
                ..base
            },
            "HB-CRF" => ModelSpec {
                use_hb: true,
                ..base
            },
            "ELMo-LSTM-CRF" => ModelSpec {
                embedding: EmbeddingKind::PrecomputedContextual,
                use_lstm: true,
                dims: ModelDims {
                    embedding: 1024,
                    ..ModelDims::default()
                },
                ..base
            },
            "ELMo-LSTM-CRF-HB" => ModelSpec {
                embedding: EmbeddingKind::PrecomputedContextual,
                use_lstm: true,
                use_hb: true,
                dims: ModelDims {
                    embedding: 1024,
                    ..ModelDims::default()
                },
                ..base
            },
            _ => return None,
        };
        Some(spec)
    }
}

/// All learnable arrays. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Static embedding rows including the trailing OOV row.
    pub embedding: Option<Array2<f64>>,
    pub embedding_trainable: bool,
    pub lstm: Option<LstmParams>,
    pub dense: Option<DenseLayerParams>,
    pub proj: ProjectionParams,
    /// Present only with the CRF decoder.
    pub trans: Option<TransitionParams>,
}

pub struct Block<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Subject to L1/L2 penalties.
    pub is_weight: bool,
    pub trainable: bool,
}

pub struct BlockMut<'a> {
    pub name: &'static str,
    pub data: &'a mut [f64],
    pub is_weight: bool,
    pub trainable: bool,
}

fn block<'a>(
    name: &'static str,
    (shape, data): (Vec<usize>, &'a [f64]),
    is_weight: bool,
    trainable: bool,
) -> Block<'a> {
    Block {
        name,
        shape,
        data,
        is_weight,
        trainable,
    }
}

fn block_mut<'a>(
    name: &'static str,
    data: &'a mut [f64],
    is_weight: bool,
    trainable: bool,
) -> BlockMut<'a> {
    BlockMut {
        name,
        data,
        is_weight,
        trainable,
    }
}

fn mat(a: &Array2<f64>) -> (Vec<usize>, &[f64]) {
    (
        vec![a.nrows(), a.ncols()],
        a.as_slice().expect("standard layout"),
    )
}

fn vector(a: &Array1<f64>) -> (Vec<usize>, &[f64]) {
    (vec![a.len()], a.as_slice().expect("standard layout"))
}

fn mat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn vector_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

impl ModelParams {
    /// Blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(block("embedding", mat(e), true, self.embedding_trainable));
        }
        if let Some(l) = &self.lstm {
            out.push(block("lstm.w", mat(&l.w), true, true));
            out.push(block("lstm.u", mat(&l.u), true, true));
            out.push(block("lstm.b", vector(&l.b), false, true));
        }
        if let Some(d) = &self.dense {
            out.push(block("dense.w", mat(&d.w), true, true));
            out.push(block("dense.b", vector(&d.b), false, true));
        }
        out.push(block("proj.w", mat(&self.proj.w), true, true));
        out.push(block("proj.b", vector(&self.proj.b), false, true));
        if let Some(t) = &self.trans {
            out.push(block("crf.transitions", mat(&t.a), true, true));
            out.push(block("crf.start", vector(&t.start), false, true));
            out.push(block("crf.stop", vector(&t.stop), false, true));
        }
        out
    }

    /// Same order as [`ModelParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let ModelParams {
            embedding,
            embedding_trainable,
            lstm,
            dense,
            proj,
            trans,
        } = self;
        let mut out = Vec::new();
        if let Some(e) = embedding {
            out.push(block_mut(
                "embedding",
                mat_mut(e),
                true,
                *embedding_trainable,
            ));
        }
        if let Some(LstmParams { w, u, b }) = lstm {
            out.push(block_mut("lstm.w", mat_mut(w), true, true));
            out.push(block_mut("lstm.u", mat_mut(u), true, true));
            out.push(block_mut("lstm.b", vector_mut(b), false, true));
        }
        if let Some(DenseLayerParams { w, b, .. }) = dense {
            out.push(block_mut("dense.w", mat_mut(w), true, true));
            out.push(block_mut("dense.b", vector_mut(b), false, true));
        }
        out.push(block_mut("proj.w", mat_mut(&mut proj.w), true, true));
        out.push(block_mut("proj.b", vector_mut(&mut proj.b), false, true));
        if let Some(TransitionParams { a, start, stop }) = trans {
            out.push(block_mut("crf.transitions", mat_mut(a), true, true));
            out.push(block_mut("crf.start", vector_mut(start), false, true));
            out.push(block_mut("crf.stop", vector_mut(stop), false, true));
        }
        out
    }

    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.data.fill(0.0);
        }
        z
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    /// `self += other * scale`, block by block.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.blocks();
        for (dst, src) in self.blocks_mut().into_iter().zip(src) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }
}

/// Dense input for the LSTM branch.
#[derive(Clone, Debug, PartialEq)]
pub enum DenseInput {
    /// Row indices into the static embedding table.
    Rows(Vec<usize>),
    Vectors(Array2<f64>),
}

/// A sequence converted to model inputs once, reused across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSequence {
    pub doc_id: String,
    pub dense: Option<DenseInput>,
    pub sparse: Vec<SparseFeatureVector>,
    pub gold: Vec<usize>,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub spec: ModelSpec,
    pub labels: LabelScheme,
    pub params: ModelParams,
    /// Words of the static embedding table, row order.
    pub embedding_words: Vec<String>,
    pub feature_dim: usize,
    pub vocab_hash: Option<String>,
    /// Free-form data carried through checkpoints.
    pub metadata: serde_json::Value,
    word_index: HashMap<String, usize>,
}

struct Encoded {
    x: Option<Array2<f64>>,
    lstm_cache: Option<LstmCache>,
    lstm_mask: Option<Array2<f64>>,
    dense_caches: Vec<DenseCache>,
    /// `None` for the raw sparse projection.
    fused: Option<EncoderOutput>,
    phi: PotentialMatrix,
}

fn word_index(words: &[String]) -> HashMap<String, usize> {
    let mut m = HashMap::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        m.entry(w.to_lowercase()).or_insert(i);
    }
    m
}

impl HybridModel {
    /// Fresh parameters. `table` is required for static embedding kinds and
    /// `vocab` when the hand-built branch is on.
    pub fn init(
        spec: ModelSpec,
        labels: LabelScheme,
        table: Option<&StaticEmbeddingTable>,
        vocab: Option<&FeatureVocabulary>,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num_labels = labels.len();
        let (embedding, embedding_trainable, embedding_words) = match spec.embedding {
            EmbeddingKind::RandomStatic | EmbeddingKind::PretrainedStatic => {
                let t = table.ok_or_else(|| {
                    Error::InvalidArgument("static embedding kind needs a table".into())
                })?;
                if t.dim() != spec.dims.embedding {
                    return Err(Error::Dimension(format!(
                        "embedding table width {} but model expects {}",
                        t.dim(),
                        spec.dims.embedding
                    )));
                }
                (
                    Some(t.matrix().clone()),
                    t.is_trainable(),
                    t.words().to_vec(),
                )
            }
            _ => (None, false, Vec::new()),
        };
        let lstm = spec.use_lstm.then(|| {
            LstmParams::init(
                spec.dims.embedding,
                spec.dims.hidden,
                spec.forget_bias,
                &mut rng,
            )
        });
        let (feature_dim, vocab_hash) = if spec.use_hb {
            let v = vocab.ok_or_else(|| {
                Error::InvalidArgument("hand-built branch needs a feature vocabulary".into())
            })?;
            if !v.is_frozen() {
                return Err(Error::InvalidState(
                    "feature vocabulary must be frozen".into(),
                ));
            }
            (v.len(), Some(v.content_hash()))
        } else {
            (0, None)
        };
        let dense = spec.uses_dense_layer().then(|| {
            DenseLayerParams::init(feature_dim, spec.dims.dense, spec.activation, &mut rng)
        });
        let lstm_width = if spec.use_lstm { spec.dims.hidden } else { 0 };
        let hb_width = match (spec.use_hb, spec.use_lstm) {
            (false, _) => 0,
            (true, true) => spec.dims.dense,
            (true, false) => feature_dim,
        };
        let proj = ProjectionParams::init(lstm_width + hb_width, num_labels, lstm_width, &mut rng)?;
        let trans = (spec.decoder == Decoder::Crf).then(|| TransitionParams::zeros(num_labels));
        Ok(HybridModel {
            word_index: word_index(&embedding_words),
            spec,
            labels,
            params: ModelParams {
                embedding,
                embedding_trainable,
                lstm,
                dense,
                proj,
                trans,
            },
            embedding_words,
            feature_dim,
            vocab_hash,
            metadata: serde_json::Value::Null,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    fn row_index(&self, word: &str) -> usize {
        self.word_index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(self.embedding_words.len())
    }

    /// Convert a sequence into model inputs. Gold labels must come from the
    /// model's label set (matched by name).
    pub fn prepare(
        &self,
        seq: &LabeledSequence,
        scheme: &LabelScheme,
        featurizer: Option<(&FeaturizerConfig, &FeatureVocabulary)>,
        store: Option<&ContextualEmbeddingStore>,
    ) -> Result<PreparedSequence> {
        let gold = seq
            .labels
            .iter()
            .map(|&l| {
                let name = scheme.name(l);
                self.labels
                    .id(name)
                    .ok_or_else(|| Error::UnknownLabel(name.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let dense = match self.spec.embedding {
            EmbeddingKind::None => None,
            EmbeddingKind::RandomStatic | EmbeddingKind::PretrainedStatic => Some(
                DenseInput::Rows(seq.tokens.iter().map(|t| self.row_index(&t.text)).collect()),
            ),
            EmbeddingKind::PrecomputedContextual => {
                let store = store.ok_or_else(|| {
                    Error::InvalidArgument("contextual model needs a vector store".into())
                })?;
                if store.dim() != self.spec.dims.embedding {
                    return Err(Error::Dimension(format!(
                        "contextual vectors have width {} but model expects {}",
                        store.dim(),
                        self.spec.dims.embedding
                    )));
                }
                let mut x = Array2::zeros((seq.len(), store.dim()));
                for i in 0..seq.len() {
                    for (o, &v) in x.row_mut(i).iter_mut().zip(store.get(&seq.doc_id, i)?) {
                        *o = v as f64;
                    }
                }
                Some(DenseInput::Vectors(x))
            }
        };
        let sparse = if self.spec.use_hb {
            let (cfg, vocab) = featurizer.ok_or_else(|| {
                Error::InvalidArgument("hand-built model needs featurizer artifacts".into())
            })?;
            let found = vocab.content_hash();
            let expected = self.vocab_hash.clone().unwrap_or_default();
            if found != expected {
                return Err(Error::VocabMismatch { expected, found });
            }
            sequence_vectors(&seq.tokens, cfg, vocab)?
        } else {
            Vec::new()
        };
        Ok(PreparedSequence {
            doc_id: seq.doc_id.clone(),
            dense,
            sparse,
            gold,
        })
    }

    fn encode<R: Rng + ?Sized>(
        &self,
        s: &PreparedSequence,
        drop: &DropoutSpec,
        rng: &mut R,
    ) -> Result<Encoded> {
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sequence {} is empty",
                s.doc_id
            )));
        }
        let steps = s.len();
        let p = &self.params;
        let mut x = None;
        let mut lstm_cache = None;
        let mut lstm_mask = None;
        let mut h = None;
        if let Some(lp) = &p.lstm {
            let input = match s.dense.as_ref() {
                Some(DenseInput::Rows(rows)) => {
                    let table = p
                        .embedding
                        .as_ref()
                        .ok_or_else(|| Error::InvalidState("missing embedding table".into()))?;
                    let mut m = Array2::zeros((rows.len(), table.ncols()));
                    for (i, &r) in rows.iter().enumerate() {
                        m.row_mut(i).assign(&table.row(r));
                    }
                    m
                }
                Some(DenseInput::Vectors(v)) => v.clone(),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "sequence {} lacks dense inputs",
                        s.doc_id
                    )))
                }
            };
            if input.nrows() != steps {
                return Err(Error::Dimension(format!(
                    "sequence {}: dense input length mismatch",
                    s.doc_id
                )));
            }
            let (mut hs, cache) = lstm_forward(&input, lp)?;
            if self.spec.lstm_dropout {
                lstm_mask = dropout_matrix(&mut hs, drop, rng);
            }
            x = Some(input);
            lstm_cache = Some(cache);
            h = Some(hs);
        }
        if self.spec.use_hb && s.sparse.len() != steps {
            return Err(Error::Dimension(format!(
                "sequence {}: sparse input length mismatch",
                s.doc_id
            )));
        }
        let mut dense_caches = Vec::new();
        let (fused, phi) = if let Some(dp) = &p.dense {
            let mut z = Array2::zeros((steps, dp.out_dim()));
            for (t, v) in s.sparse.iter().enumerate() {
                let (out, cache) = dense_forward(v, dp, drop, rng)?;
                z.row_mut(t).assign(&out);
                dense_caches.push(cache);
            }
            let enc = fuse(h.as_ref(), Some(&z))?;
            let phi = crf::potentials(&enc.fused, &p.proj)?;
            (Some(enc), phi)
        } else if self.spec.use_lstm {
            let enc = fuse(h.as_ref(), None)?;
            let phi = crf::potentials(&enc.fused, &p.proj)?;
            (Some(enc), phi)
        } else {
            let mut scores = Array2::zeros((steps, self.num_labels()));
            for (t, v) in s.sparse.iter().enumerate() {
                if v.dimension() != p.proj.width() {
                    return Err(Error::Dimension(format!(
                        "sparse dimension {} but projection expects {}",
                        v.dimension(),
                        p.proj.width()
                    )));
                }
                let mut row = scores.row_mut(t);
                row += &p.proj.b;
                for &j in v.indices() {
                    row += &p.proj.w.column(j as usize);
                }
            }
            (None, PotentialMatrix::new(scores)?)
        };
        Ok(Encoded {
            x,
            lstm_cache,
            lstm_mask,
            dense_caches,
            fused,
            phi,
        })
    }

    pub fn potentials(&self, s: &PreparedSequence) -> Result<PotentialMatrix> {
        Ok(self
            .encode(
                s,
                &DropoutSpec::inference(),
                &mut ChaCha8Rng::seed_from_u64(0),
            )?
            .phi)
    }

    /// Inference-mode fused representation; `None` for the raw sparse variant.
    pub fn fused(&self, s: &PreparedSequence) -> Result<Option<EncoderOutput>> {
        Ok(self
            .encode(
                s,
                &DropoutSpec::inference(),
                &mut ChaCha8Rng::seed_from_u64(0),
            )?
            .fused)
    }

    /// Inference-mode potentials split by source. A single-branch model puts
    /// everything but the bias on its own branch.
    pub fn potential_rows(&self, s: &PreparedSequence) -> Result<Vec<crf::PotentialRow>> {
        let enc = self.encode(
            s,
            &DropoutSpec::inference(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let names = self.labels.labels();
        if let (Some(f), true) = (&enc.fused, self.spec.use_lstm && self.spec.use_hb) {
            return crf::potential_rows(&s.doc_id, &f.fused, &self.params.proj, names);
        }
        let scores = enc.phi.scores();
        let b = &self.params.proj.b;
        let mut rows = Vec::with_capacity(scores.len());
        for t in 0..scores.nrows() {
            for (y, name) in names.iter().enumerate() {
                let total = scores[[t, y]];
                let own = total - b[y];
                let (phi_lstm, phi_hb) = if self.spec.use_lstm {
                    (own, 0.0)
                } else {
                    (0.0, own)
                };
                rows.push(crf::PotentialRow {
                    doc_id: s.doc_id.clone(),
                    token_index: t,
                    label: name.clone(),
                    phi_total: total,
                    phi_lstm,
                    phi_hb,
                });
            }
        }
        Ok(rows)
    }

    pub fn predict(&self, s: &PreparedSequence) -> Result<Vec<usize>> {
        let phi = self.potentials(s)?;
        match &self.params.trans {
            Some(t) => Ok(crf::viterbi(&phi, t)?.0),
            None => Ok(crf::softmax_decode(&phi)),
        }
    }

    fn decoder_loss(
        &self,
        phi: &PotentialMatrix,
        gold: &[usize],
    ) -> Result<(f64, Array2<f64>, Option<TransitionParams>)> {
        match &self.params.trans {
            Some(t) => {
                let g = crf::nll_and_grad(phi, t, gold)?;
                Ok((g.loss, g.grad_phi, Some(g.grad_tau)))
            }
            None => {
                let (loss, grad) = crf::softmax_nll_and_grad(phi, gold)?;
                Ok((loss, grad, None))
            }
        }
    }

    /// Inference-mode loss of one sequence.
    pub fn loss(&self, s: &PreparedSequence) -> Result<f64> {
        let phi = self.potentials(s)?;
        Ok(self.decoder_loss(&phi, &s.gold)?.0)
    }

    /// Loss and exact gradient for one sequence; dropout follows `drop`.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        s: &PreparedSequence,
        drop: &DropoutSpec,
        rng: &mut R,
    ) -> Result<(f64, ModelParams)> {
        let enc = self.encode(s, drop, rng)?;
        let (loss, grad_phi, grad_tau) = self.decoder_loss(&enc.phi, &s.gold)?;
        let p = &self.params;
        let mut g = p.zeros_like();
        g.trans = grad_tau;
        g.proj.b = grad_phi.sum_axis(ndarray::Axis(0));

        let Some(fused) = &enc.fused else {
            for (t, v) in s.sparse.iter().enumerate() {
                for &j in v.indices() {
                    let mut col = g.proj.w.column_mut(j as usize);
                    col += &grad_phi.row(t);
                }
            }
            return Ok((loss, g));
        };
        g.proj.w.assign(&grad_phi.t().dot(&fused.fused));
        let grad_fused = grad_phi.dot(&p.proj.w);
        let split = fused.split;

        if let (Some(dp), Some(gd)) = (&p.dense, g.dense.as_mut()) {
            let grad_z = grad_fused.slice(s![.., split..]);
            for (t, cache) in enc.dense_caches.iter().enumerate() {
                let dg = dense_backward(cache, grad_z.row(t))?;
                dg.accumulate(&mut gd.w, &mut gd.b);
            }
            debug_assert_eq!(gd.w.dim(), dp.w.dim());
        }
        if let (Some(lp), Some(cache)) = (&p.lstm, &enc.lstm_cache) {
            let mut grad_h = grad_fused.slice(s![.., ..split]).to_owned();
            if let Some(mask) = &enc.lstm_mask {
                grad_h *= mask;
            }
            let (lg, grad_x) = lstm_backward(cache, &grad_h, lp)?;
            if let Some(gl) = g.lstm.as_mut() {
                gl.w.assign(&lg.w);
                gl.u.assign(&lg.u);
                gl.b.assign(&lg.b);
            }
            if let (Some(ge), Some(DenseInput::Rows(rows))) =
                (g.embedding.as_mut(), s.dense.as_ref())
            {
                if p.embedding_trainable {
                    for (t, &r) in rows.iter().enumerate() {
                        let mut row = ge.row_mut(r);
                        row += &grad_x.row(t);
                    }
                }
            }
            debug_assert!(enc.x.is_some());
        }
        Ok((loss, g))
    }

    /// Largest relative error between the analytic gradient and central
    /// differences of [`HybridModel::loss`] over every trainable coordinate,
    /// with dropout off. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
    pub fn gradient_check(&self, s: &PreparedSequence, eps: f64) -> Result<f64> {
        let (_, g) = self.loss_and_grad(
            s,
            &DropoutSpec::inference(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for (bi, gb) in g.blocks().iter().enumerate() {
            if !gb.trainable {
                if gb.data.iter().any(|&v| v != 0.0) {
                    return Err(Error::InvalidState(format!(
                        "frozen block {} received a gradient",
                        gb.name
                    )));
                }
                continue;
            }
            for (k, &analytic) in gb.data.iter().enumerate() {
                let orig = self.params.blocks()[bi].data[k];
                probe.params.blocks_mut()[bi].data[k] = orig + eps;
                let plus = probe.loss(s)?;
                probe.params.blocks_mut()[bi].data[k] = orig - eps;
                let minus = probe.loss(s)?;
                probe.params.blocks_mut()[bi].data[k] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_checkpoint(self, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_checkpoint(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const MAGIC: &[u8; 7] = b"HYBSEQ1";

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    labels: Vec<String>,
    scheme: SchemeKind,
    other: String,
    feature_dim: usize,
    vocab_hash: Option<String>,
    embedding_words: Vec<String>,
    embedding_trainable: bool,
    metadata: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

fn write_checkpoint<W: Write>(m: &HybridModel, w: &mut W) -> Result<()> {
    let blocks = m.params.blocks();
    let header = CheckpointHeader {
        spec: m.spec.clone(),
        labels: m.labels.labels().to_vec(),
        scheme: m.labels.kind(),
        other: m.labels.other_label().to_string(),
        feature_dim: m.feature_dim,
        vocab_hash: m.vocab_hash.clone(),
        embedding_words: m.embedding_words.clone(),
        embedding_trainable: m.params.embedding_trainable,
        metadata: m.metadata.clone(),
        blocks: blocks
            .iter()
            .map(|b| BlockHeader {
                name: b.name.to_string(),
                shape: b.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for b in &blocks {
        for v in b.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn read_checkpoint<R: Read>(r: &mut R) -> Result<HybridModel> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {len}"
        )));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let labels = LabelScheme::new(header.labels, header.scheme, &header.other)?;
    let trainable = header.embedding_trainable;
    let words = header.embedding_words;

    // Build a model of the declared shape, then overwrite every block.
    let spec = header.spec;
    spec.validate()?;
    let table = match spec.embedding {
        EmbeddingKind::RandomStatic | EmbeddingKind::PretrainedStatic => {
            Some(StaticEmbeddingTable::new(
                words.clone(),
                Array2::zeros((words.len(), spec.dims.embedding)),
                trainable,
            )?)
        }
        _ => None,
    };
    let mut model = HybridModel::init_shapes(spec, labels, table.as_ref(), header.feature_dim)?;
    model.vocab_hash = header.vocab_hash;
    model.metadata = header.metadata;
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .blocks()
        .iter()
        .map(|b| (b.name.to_string(), b.shape.clone()))
        .collect();
    let declared: Vec<(String, Vec<usize>)> = header
        .blocks
        .into_iter()
        .map(|b| (b.name, b.shape))
        .collect();
    if expected != declared {
        return Err(Error::Checkpoint(format!(
            "declared blocks {declared:?} do not match the model spec {expected:?}"
        )));
    }
    for b in model.params.blocks_mut() {
        let mut buf = vec![0u8; b.data.len() * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated block {}", b.name)))?;
        for (v, chunk) in b.data.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if b.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "non-finite values in block {}",
                b.name
            )));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}

impl HybridModel {
    /// Zero-initialized model with the shapes implied by `spec`.
    fn init_shapes(
        spec: ModelSpec,
        labels: LabelScheme,
        table: Option<&StaticEmbeddingTable>,
        feature_dim: usize,
    ) -> Result<Self> {
        let mut vocab = FeatureVocabulary::new();
        for i in 0..feature_dim {
            vocab.insert(&format!("f{i}"))?;
        }
        vocab.freeze();
        let mut m = HybridModel::init(spec, labels, table, Some(&vocab), 0)?;
        let zero = m.params.zeros_like();
        m.params = zero;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Token;
    use crate::featurizer::SparseFeatureVector;
    use crate::neural::DropoutMode;

    fn scheme(n: usize) -> LabelScheme {
        let mut labels = vec!["Other".to_string()];
        labels.extend((1..n).map(|i| format!("L{i}")));
        LabelScheme::new(labels, SchemeKind::Flat, "Other").unwrap()
    }

    fn spec(embedding: EmbeddingKind, use_hb: bool, decoder: Decoder) -> ModelSpec {
        ModelSpec {
            embedding,
            use_lstm: embedding != EmbeddingKind::None,
            use_hb,
            decoder,
            dims: ModelDims {
                embedding: 3,
                hidden: 3,
                dense: 4,
            },
            activation: Activation::Tanh,
            forget_bias: 1.0,
            lstm_dropout: false,
        }
    }

    fn vocab(n: usize) -> FeatureVocabulary {
        let mut v = FeatureVocabulary::new();
        for i in 0..n {
            v.insert(&format!("f{i}")).unwrap();
        }
        v.freeze();
        v
    }

    fn table(words: usize, dim: usize, seed: u64) -> StaticEmbeddingTable {
        StaticEmbeddingTable::random((0..words).map(|i| format!("w{i}")).collect(), dim, seed)
            .unwrap()
    }

    fn random_sequence(rng: &mut ChaCha8Rng, m: &HybridModel, steps: usize) -> PreparedSequence {
        let dense = match m.spec.embedding {
            EmbeddingKind::None => None,
            EmbeddingKind::PrecomputedContextual => Some(DenseInput::Vectors(
                Array2::from_shape_simple_fn((steps, m.spec.dims.embedding), || {
                    rng.random_range(-1.0..1.0)
                }),
            )),
            _ => Some(DenseInput::Rows(
                (0..steps)
                    .map(|_| rng.random_range(0..=m.embedding_words.len()))
                    .collect(),
            )),
        };
        let sparse = if m.spec.use_hb {
            (0..steps)
                .map(|_| {
                    let idx = (0..m.feature_dim as u32)
                        .filter(|_| rng.random_bool(0.4))
                        .collect();
                    SparseFeatureVector::new(idx, m.feature_dim).unwrap()
                })
                .collect()
        } else {
            Vec::new()
        };
        PreparedSequence {
            doc_id: "s".into(),
            dense,
            sparse,
            gold: (0..steps)
                .map(|_| rng.random_range(0..m.num_labels()))
                .collect(),
        }
    }

    fn perturb_params(m: &mut HybridModel, rng: &mut ChaCha8Rng) {
        for b in m.params.blocks_mut() {
            for v in b.data.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }

    fn has_relu_kink(m: &HybridModel, s: &PreparedSequence) -> bool {
        let Some(dp) = &m.params.dense else {
            return false;
        };
        s.sparse.iter().any(|v| {
            let mut pre = dp.b.clone();
            for &j in v.indices() {
                pre += &dp.w.column(j as usize);
            }
            pre.iter().any(|x| x.abs() < 1e-3)
        })
    }

    #[test]
    fn full_model_gradients_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let variants = [
            spec(EmbeddingKind::RandomStatic, false, Decoder::Crf),
            spec(EmbeddingKind::None, true, Decoder::Crf),
            spec(EmbeddingKind::PrecomputedContextual, false, Decoder::Crf),
            spec(EmbeddingKind::PrecomputedContextual, true, Decoder::Crf),
            spec(EmbeddingKind::RandomStatic, true, Decoder::Softmax),
            ModelSpec {
                activation: Activation::Relu,
                lstm_dropout: true,
                ..spec(EmbeddingKind::PrecomputedContextual, true, Decoder::Crf)
            },
        ];
        for (vi, sp) in variants.iter().enumerate() {
            let mut checked = 0;
            while checked < 4 {
                let t = table(4, 3, rng.random());
                let v = vocab(6);
                let mut m =
                    HybridModel::init(sp.clone(), scheme(3), Some(&t), Some(&v), rng.random())
                        .unwrap();
                perturb_params(&mut m, &mut rng);
                let steps = rng.random_range(1..5);
                let s = random_sequence(&mut rng, &m, steps);
                if has_relu_kink(&m, &s) {
                    continue;
                }
                let worst = m.gradient_check(&s, 1e-4).unwrap();
                assert!(worst <= 1e-5, "variant {vi}: relative error {worst}");
                checked += 1;
            }
        }
    }

    #[test]
    fn frozen_embeddings_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut t = table(4, 3, 1);
        t.set_trainable(false);
        let sp = ModelSpec {
            embedding: EmbeddingKind::PretrainedStatic,
            ..spec(EmbeddingKind::RandomStatic, false, Decoder::Crf)
        };
        let m = HybridModel::init(sp, scheme(2), Some(&t), None, 3).unwrap();
        let s = random_sequence(&mut rng, &m, 3);
        let (_, g) = m
            .loss_and_grad(&s, &DropoutSpec::inference(), &mut rng)
            .unwrap();
        assert!(g.embedding.unwrap().iter().all(|&v| v == 0.0));
        assert!(!m.params.blocks()[0].trainable);
    }

    #[test]
    fn raw_sparse_variant_is_linear_crf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = vocab(5);
        let m = HybridModel::init(
            spec(EmbeddingKind::None, true, Decoder::Crf),
            scheme(3),
            None,
            Some(&v),
            4,
        )
        .unwrap();
        assert!(m.params.dense.is_none());
        assert_eq!(m.params.proj.width(), 5);
        let s = random_sequence(&mut rng, &m, 4);
        let dense_rows = Array2::from_shape_fn((4, 5), |(t, j)| s.sparse[t].to_dense()[j]);
        let expected = crf::potentials(&dense_rows, &m.params.proj).unwrap();
        let got = m.potentials(&s).unwrap();
        assert!((got.scores() - expected.scores())
            .iter()
            .all(|d| d.abs() < 1e-12));
        assert!(m.fused(&s).unwrap().is_none());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = vocab(6);
        let m = HybridModel::init(
            spec(EmbeddingKind::PrecomputedContextual, true, Decoder::Crf),
            scheme(3),
            None,
            Some(&v),
            5,
        )
        .unwrap();
        let s = random_sequence(&mut rng, &m, 5);
        assert_eq!(m.potentials(&s).unwrap(), m.potentials(&s).unwrap());
        let train = DropoutSpec::new(0.5, DropoutMode::Train).unwrap();
        let a = m
            .loss_and_grad(&s, &train, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap()
            .0;
        let b = m
            .loss_and_grad(&s, &train, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation_and_profiles() {
        assert!(spec(EmbeddingKind::None, false, Decoder::Crf)
            .validate()
            .is_err());
        let bad = ModelSpec {
            use_lstm: false,
            ..spec(EmbeddingKind::RandomStatic, true, Decoder::Crf)
        };
        assert!(bad.validate().is_err());
        for name in PROFILE_NAMES {
            ModelSpec::profile(name).unwrap().validate().unwrap();
        }
        assert!(ModelSpec::profile("BiLSTM").is_none());
        let hb = ModelSpec::profile("HB-CRF").unwrap();
        assert_eq!(
            (hb.embedding, hb.use_lstm, hb.use_hb),
            (EmbeddingKind::None, false, true)
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = table(5, 3, 2);
        let v = vocab(7);
        for sp in [
            spec(EmbeddingKind::RandomStatic, true, Decoder::Crf),
            spec(EmbeddingKind::None, true, Decoder::Softmax),
            spec(EmbeddingKind::PrecomputedContextual, false, Decoder::Crf),
        ] {
            let mut m = HybridModel::init(sp, scheme(3), Some(&t), Some(&v), 7).unwrap();
            perturb_params(&mut m, &mut rng);
            m.metadata = serde_json::json!({"note": "x"});
            let bytes = m.to_bytes().unwrap();
            assert_eq!(&bytes[..7], b"HYBSEQ1");
            let back = HybridModel::from_bytes(&bytes).unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!(back.spec, m.spec);
            assert_eq!(back.vocab_hash, m.vocab_hash);
            assert_eq!(back.metadata, m.metadata);
            assert_eq!(back.embedding_words, m.embedding_words);
            let s = random_sequence(&mut rng, &m, 4);
            assert_eq!(back.predict(&s).unwrap(), m.predict(&s).unwrap());

            assert!(HybridModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
            let mut extra = bytes.clone();
            extra.push(0);
            assert!(HybridModel::from_bytes(&extra).is_err());
            assert!(HybridModel::from_bytes(b"NOTACKPT").is_err());
        }
    }

    #[test]
    fn prepare_checks_vocabulary_hash() {
        let v = vocab(3);
        let m = HybridModel::init(
            spec(EmbeddingKind::None, true, Decoder::Crf),
            scheme(2),
            None,
            Some(&v),
            1,
        )
        .unwrap();
        let seq = LabeledSequence {
            doc_id: "d".into(),
            tokens: vec![Token::new("a", None).unwrap()],
            labels: vec![1],
        };
        let cfg = FeaturizerConfig::default();
        assert!(m.prepare(&seq, &m.labels, Some((&cfg, &v)), None).is_ok());
        let other = vocab(4);
        match m.prepare(&seq, &m.labels, Some((&cfg, &other)), None) {
            Err(Error::VocabMismatch { expected, found }) => {
                assert_eq!(expected, v.content_hash());
                assert_eq!(found, other.content_hash());
            }
            other => panic!("expected a vocabulary mismatch, got {other:?}"),
        }
    }
    #[test]
    fn potential_rows_sum_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = table(5, 3, 2);
        let v = vocab(6);
        for (emb, hb) in [
            (EmbeddingKind::RandomStatic, true),
            (EmbeddingKind::RandomStatic, false),
            (EmbeddingKind::None, true),
        ] {
            let mut m = HybridModel::init(
                spec(emb, hb, Decoder::Crf),
                scheme(3),
                Some(&t),
                Some(&v),
                3,
            )
            .unwrap();
            perturb_params(&mut m, &mut rng);
            let s = random_sequence(&mut rng, &m, 4);
            let rows = m.potential_rows(&s).unwrap();
            let phi = m.potentials(&s).unwrap();
            assert_eq!(rows.len(), 4 * 3);
            for r in &rows {
                let y = m.labels.id(&r.label).unwrap();
                assert_eq!(r.phi_total, phi.scores()[[r.token_index, y]]);
                let rebuilt = r.phi_lstm + r.phi_hb + m.params.proj.b[y];
                assert!((rebuilt - r.phi_total).abs() < 1e-12);
                if !hb {
                    assert_eq!(r.phi_hb, 0.0);
                }
                if emb == EmbeddingKind::None {
                    assert_eq!(r.phi_lstm, 0.0);
                }
            }
        }
    }
}
