//! Mini-batch Adam training with L1/L2 penalties, random search over the
//! penalty coefficients by cross-validation, and the repeated-runs protocol.

use std::collections::HashSet;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_folds, Dataset, SplitPlan};
use crate::embeddings::{ContextualEmbeddingStore, EmbeddingKind, StaticEmbeddingTable};
use crate::error::{Error, Result};
use crate::evaluation::token_macro_f1;
use crate::featurizer::{build_vocabulary, FeatureVocabulary, FeaturizerConfig};
use crate::model::{HybridModel, ModelParams, ModelSpec, PreparedSequence};
use crate::neural::{DropoutMode, DropoutSpec};

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    16
}
fn d_dropout() -> f64 {
    0.5
}
fn d_epochs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub step_size: f64,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Epochs per training during hyperparameter search; defaults to `epochs`.
    #[serde(default)]
    pub tune_epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Rescale the batch gradient to at most this L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainingConfig {
    pub fn new(step_size: f64, epochs: usize) -> Self {
        TrainingConfig {
            step_size,
            l1: 0.0,
            l2: 0.0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            batch_size: d_batch(),
            dropout: d_dropout(),
            epochs,
            tune_epochs: None,
            seed: 0,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!(
                "step_size must be positive, got {}",
                self.step_size
            ));
        }
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return bad("regularization coefficients must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn tuning_epochs(&self) -> usize {
        self.tune_epochs.unwrap_or(self.epochs)
    }
}

/// Per-variant step size, epochs and coefficient grids for the built-in profiles.
pub fn profile_defaults(name: &str) -> Option<(TrainingConfig, SearchSpace)> {
    let space = |c1: [f64; 5], c2: [f64; 5]| SearchSpace {
        range_c1: c1.to_vec(),
        range_c2: c2.to_vec(),
        n_settings: 10,
    };
    let with = |eta: f64, tune: usize, train: usize| TrainingConfig {
        tune_epochs: Some(tune),
        ..TrainingConfig::new(eta, train)
    };
    let dense_space = space([0.0, 3e-5, 1e-4, 3e-4, 1e-3], [0.0, 3e-4, 1e-3, 3e-3, 1e-2]);
    Some(match name {
        "rand-LSTM-CRF" => (with(1e-4, 3, 34), dense_space),
        "HB-CRF" => (
            with(1e-2, 1, 3),
            space([0.0, 3e-6, 1e-5, 3e-5, 1e-4], [0.0, 3e-5, 1e-4, 3e-4, 1e-3]),
        ),
        "ELMo-LSTM-CRF" => (with(1e-3, 1, 3), dense_space),
        "ELMo-LSTM-CRF-HB" => (
            with(1e-3, 1, 3),
            space([0.0, 3e-7, 1e-6, 3e-6, 1e-5], [0.0, 3e-6, 1e-5, 3e-5, 1e-4]),
        ),
        _ => return None,
    })
}

/// First and second moment estimates, one vector per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .blocks()
            .iter()
            .map(|b| vec![0.0; b.data.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place; `t` is the step count
/// after incrementing.
pub fn adam_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainingConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.step_size * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Apply one Adam step to every trainable block.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &TrainingConfig,
) -> Result<()> {
    let gblocks = grads.blocks();
    if gblocks.len() != state.m.len() {
        return Err(Error::Dimension(
            "optimizer state does not match the parameter blocks".into(),
        ));
    }
    for b in &gblocks {
        if let Some(i) = b.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}[{i}] is {}",
                b.name, b.data[i]
            )));
        }
    }
    state.t += 1;
    for (i, (pb, gb)) in params.blocks_mut().into_iter().zip(&gblocks).enumerate() {
        if pb.data.len() != gb.data.len() || state.m[i].len() != gb.data.len() {
            return Err(Error::Dimension(format!(
                "shape mismatch in block {}",
                pb.name
            )));
        }
        if !pb.trainable {
            continue;
        }
        adam_update(
            pb.data,
            gb.data,
            &mut state.m[i],
            &mut state.v[i],
            state.t,
            cfg,
        );
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `g += c1 sign(theta) + 2 c2 theta` on trainable weight blocks; biases untouched.
pub fn apply_regularization(grads: &mut ModelParams, params: &ModelParams, c1: f64, c2: f64) {
    if c1 == 0.0 && c2 == 0.0 {
        return;
    }
    let pblocks = params.blocks();
    for (gb, pb) in grads.blocks_mut().into_iter().zip(&pblocks) {
        if !gb.is_weight || !gb.trainable {
            continue;
        }
        for (g, &theta) in gb.data.iter_mut().zip(pb.data) {
            *g += c1 * sign(theta) + 2.0 * c2 * theta;
        }
    }
}

/// `c1 |theta|_1 + c2 |theta|_2^2` over the same blocks [`apply_regularization`] touches.
pub fn regularization_penalty(params: &ModelParams, c1: f64, c2: f64) -> f64 {
    params
        .blocks()
        .iter()
        .filter(|b| b.is_weight && b.trainable)
        .flat_map(|b| b.data.iter())
        .map(|&t| c1 * t.abs() + c2 * t * t)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_nll: f64,
}

pub type LossTrace = Vec<EpochLoss>;

/// `epoch,mean_nll` lines with a header.
pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mean_nll\n");
    for e in trace {
        out.push_str(&format!("{},{}\n", e.epoch, e.mean_nll));
    }
    out
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Gradient descent over `data` for `cfg.epochs` epochs. The mean NLL of each
/// epoch is the average training-mode loss of its sequences.
pub fn train_model(
    model: &mut HybridModel,
    data: &[PreparedSequence],
    cfg: &TrainingConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    if data.is_empty() || cfg.epochs == 0 {
        return Ok(trace);
    }
    let drop = DropoutSpec::new(cfg.dropout, DropoutMode::Train)?;
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m: &HybridModel = model;
            let results: Vec<Result<(f64, ModelParams)>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                        cfg.seed,
                        epoch as u64,
                        bi as u64,
                        i as u64,
                    ]));
                    m.loss_and_grad(&data[idx], &drop, &mut rng)
                })
                .collect();
            let mut grad = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for (r, &idx) in results.into_iter().zip(batch) {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {}, batch {}, sequence {}",
                        epoch + 1,
                        bi + 1,
                        data[idx].doc_id
                    )));
                }
                total += loss;
                grad.add_scaled(&g, scale);
            }
            apply_regularization(&mut grad, &model.params, cfg.l1, cfg.l2);
            if let Some(limit) = cfg.clip_norm {
                let norm = grad
                    .blocks()
                    .iter()
                    .flat_map(|b| b.data.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > limit {
                    for b in grad.blocks_mut() {
                        b.data.iter_mut().for_each(|v| *v *= limit / norm);
                    }
                }
            }
            adam_step(&mut model.params, &grad, &mut state, cfg).map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{m} at epoch {}, batch {}", epoch + 1, bi + 1))
                }
                other => other,
            })?;
        }
        let mean_nll = total / data.len() as f64;
        debug!("epoch {}: mean NLL {mean_nll:.6}", epoch + 1);
        trace.push(EpochLoss {
            epoch: epoch + 1,
            mean_nll,
        });
    }
    Ok(trace)
}

/// External inputs shared by every training run on one task.
#[derive(Clone, Default)]
pub struct Resources {
    pub featurizer: Option<FeaturizerConfig>,
    pub pretrained: Option<Arc<StaticEmbeddingTable>>,
    pub contextual: Option<Arc<ContextualEmbeddingStore>>,
}

/// A trained model plus the vocabulary it was built with.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub model: HybridModel,
    pub vocab: Option<FeatureVocabulary>,
    pub trace: LossTrace,
}

impl Fitted {
    pub fn prepare(&self, data: &Dataset, res: &Resources) -> Result<Vec<PreparedSequence>> {
        prepare_all(&self.model, data, self.vocab.as_ref(), res)
    }

    pub fn predict(&self, data: &Dataset, res: &Resources) -> Result<Vec<Vec<usize>>> {
        self.prepare(data, res)?
            .iter()
            .map(|s| self.model.predict(s))
            .collect()
    }
}

fn prepare_all(
    model: &HybridModel,
    data: &Dataset,
    vocab: Option<&FeatureVocabulary>,
    res: &Resources,
) -> Result<Vec<PreparedSequence>> {
    let featurizer = match (res.featurizer.as_ref(), vocab) {
        (Some(c), Some(v)) => Some((c, v)),
        _ => None,
    };
    data.sequences()
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| model.prepare(s, data.scheme(), featurizer, res.contextual.as_deref()))
        .collect()
}

/// Build train-only artifacts, initialize, and train.
pub fn train(
    train_data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainingConfig,
    res: &Resources,
) -> Result<Fitted> {
    spec.validate()?;
    cfg.validate()?;
    let vocab = if spec.use_hb {
        let fc = res.featurizer.as_ref().ok_or_else(|| {
            Error::InvalidArgument("hand-built branch needs a featurizer configuration".into())
        })?;
        Some(build_vocabulary(train_data, fc)?)
    } else {
        None
    };
    let table = match spec.embedding {
        EmbeddingKind::RandomStatic => Some(StaticEmbeddingTable::random_for(
            train_data,
            spec.dims.embedding,
            mix_seed(&[cfg.seed, 0xe3b0]),
        )?),
        EmbeddingKind::PretrainedStatic => Some(
            res.pretrained
                .as_deref()
                .ok_or_else(|| {
                    Error::InvalidArgument("pretrained embedding kind needs a table".into())
                })?
                .clone(),
        ),
        _ => None,
    };
    let mut model = HybridModel::init(
        spec.clone(),
        train_data.scheme().clone(),
        table.as_ref(),
        vocab.as_ref(),
        cfg.seed,
    )?;
    let prepared = prepare_all(&model, train_data, vocab.as_ref(), res)?;
    let trace = train_model(&mut model, &prepared, cfg)?;
    Ok(Fitted {
        model,
        vocab,
        trace,
    })
}

/// Macro-F1 of `fitted` on `data` with the background label included.
pub fn evaluate(fitted: &Fitted, data: &Dataset, res: &Resources) -> Result<f64> {
    let pred = fitted.predict(data, res)?;
    let gold: Vec<Vec<usize>> = data
        .sequences()
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.labels.clone())
        .collect();
    Ok(token_macro_f1(&gold, &pred, data.scheme().labels(), None)?.macro_f1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub range_c1: Vec<f64>,
    pub range_c2: Vec<f64>,
    #[serde(default = "ten")]
    pub n_settings: usize,
}

fn ten() -> usize {
    10
}

impl SearchSpace {
    pub fn singleton(c1: f64, c2: f64) -> Self {
        SearchSpace {
            range_c1: vec![c1],
            range_c2: vec![c2],
            n_settings: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.range_c1.is_empty() || self.range_c2.is_empty() {
            return Err(Error::InvalidArgument("search space is empty".into()));
        }
        if self.n_settings == 0 {
            return Err(Error::InvalidArgument("n_settings must be >= 1".into()));
        }
        if self
            .range_c1
            .iter()
            .chain(&self.range_c2)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "coefficients must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Distinct `(c1, c2)` pairs drawn without replacement.
    pub fn sample(&self, seed: u64) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let mut grid: Vec<(f64, f64)> = Vec::new();
        for &c1 in &self.range_c1 {
            for &c2 in &self.range_c2 {
                if !grid.contains(&(c1, c2)) {
                    grid.push((c1, c2));
                }
            }
        }
        grid.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        grid.truncate(self.n_settings);
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub c1: f64,
    pub c2: f64,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub settings: Vec<SettingResult>,
    pub best: (f64, f64),
    pub trainings: usize,
}

/// Pick the highest mean; ties go to the smaller `(c2, c1)`.
fn select_best(settings: &[SettingResult]) -> (f64, f64) {
    let mut best = &settings[0];
    for s in &settings[1..] {
        let better = s.mean_f1 > best.mean_f1
            || (s.mean_f1 == best.mean_f1 && (s.c2, s.c1) < (best.c2, best.c1));
        if better {
            best = s;
        }
    }
    (best.c1, best.c2)
}

/// Cross-validated random search over the penalty coefficients. Every
/// setting trains on each fold's training part for `cfg.tuning_epochs()`.
/// Fails if a fold touches one of `forbidden` (held-out test documents).
pub fn random_search(
    train_data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainingConfig,
    space: &SearchSpace,
    folds: &SplitPlan,
    seed: u64,
    res: &Resources,
    forbidden: &[String],
) -> Result<SearchResult> {
    let settings = space.sample(seed)?;
    let forbidden: HashSet<&str> = forbidden.iter().map(String::as_str).collect();
    if let Some(id) = folds
        .assignments
        .keys()
        .find(|id| forbidden.contains(id.as_str()))
    {
        return Err(Error::InvalidState(format!(
            "test document {id} appears in the tuning folds"
        )));
    }
    let train_ids: HashSet<&str> = train_data.doc_ids().into_iter().collect();
    if let Some(id) = folds
        .assignments
        .keys()
        .find(|id| !train_ids.contains(id.as_str()))
    {
        return Err(Error::InvalidState(format!(
            "fold document {id} is not in the tuning data"
        )));
    }
    let fold_data: Vec<(Dataset, Dataset)> = (0..folds.k)
        .map(|f| {
            let (tr, held) = folds.fold(f);
            (train_data.subset(&tr), train_data.subset(&held))
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..folds.k).map(move |f| (s, f)))
        .collect();
    let scores: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(s, f)| {
            let (c1, c2) = settings[s];
            let run_cfg = TrainingConfig {
                l1: c1,
                l2: c2,
                epochs: cfg.tuning_epochs(),
                seed: mix_seed(&[cfg.seed, f as u64]),
                ..cfg.clone()
            };
            let (tr, held) = &fold_data[f];
            let fitted = train(tr, spec, &run_cfg, res)?;
            evaluate(&fitted, held, res)
        })
        .collect();
    let mut table: Vec<SettingResult> = settings
        .iter()
        .map(|&(c1, c2)| SettingResult {
            c1,
            c2,
            fold_f1: Vec::with_capacity(folds.k),
            mean_f1: 0.0,
        })
        .collect();
    for (&(s, _), score) in jobs.iter().zip(scores) {
        table[s].fold_f1.push(score?);
    }
    for row in &mut table {
        row.mean_f1 = row.fold_f1.iter().sum::<f64>() / row.fold_f1.len() as f64;
        debug!(
            "search c1={} c2={}: mean F1 {:.4}",
            row.c1, row.c2, row.mean_f1
        );
    }
    let best = select_best(&table);
    Ok(SearchResult {
        settings: table,
        best,
        trainings: jobs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    #[serde(default = "five")]
    pub folds: usize,
    #[serde(default = "three")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn five() -> usize {
    5
}

fn three() -> usize {
    3
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            folds: 5,
            repetitions: 3,
            seed: 0,
        }
    }
}

/// Counts of the work a protocol run performed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolTrace {
    pub searches: usize,
    pub settings_evaluated: usize,
    pub tuning_trainings: usize,
    pub tuning_folds: Vec<usize>,
    pub final_trainings: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    /// Outer fold, absent with a predefined split.
    pub fold: Option<usize>,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub f1: f64,
    pub hyperparameters: Vec<Choice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub runs: Vec<RunRecord>,
    pub mean_f1: f64,
    /// Sample standard deviation over runs (0 for a single run).
    pub std_f1: f64,
    pub searches: Vec<SearchResult>,
    pub trace: ProtocolTrace,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Tune, train and evaluate `repetitions` times. With a predefined split the
/// coefficients are tuned once by k-fold CV on the training part and each run
/// retrains on it. Otherwise k outer folds are used; the first run tunes
/// within each outer training part and later runs reuse those choices. A run's
/// score pools the predictions of all its outer folds.
pub fn run_protocol(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainingConfig,
    space: &SearchSpace,
    proto: &ProtocolConfig,
    res: &Resources,
) -> Result<ProtocolReport> {
    if proto.repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    let mut trace = ProtocolTrace::default();
    let mut searches = Vec::new();
    let mut runs = Vec::new();
    let record_search = |s: &SearchResult, k: usize, trace: &mut ProtocolTrace| {
        trace.searches += 1;
        trace.settings_evaluated += s.settings.len();
        trace.tuning_trainings += s.trainings;
        trace.tuning_folds.push(k);
    };
    let run_seed = |r: usize| mix_seed(&[cfg.seed, 0x5eed, r as u64]);

    if let Some((train_part, test_part)) = data.split_parts() {
        let folds = make_folds(&train_part, proto.folds, proto.seed)?;
        let test_ids: Vec<String> = test_part.doc_ids().iter().map(|s| s.to_string()).collect();
        let search = random_search(
            &train_part,
            spec,
            cfg,
            space,
            &folds,
            proto.seed,
            res,
            &test_ids,
        )?;
        record_search(&search, folds.k, &mut trace);
        let (c1, c2) = search.best;
        info!("selected c1={c1} c2={c2}");
        searches.push(search);
        for r in 0..proto.repetitions {
            let run_cfg = TrainingConfig {
                l1: c1,
                l2: c2,
                seed: run_seed(r),
                ..cfg.clone()
            };
            let fitted = train(&train_part, spec, &run_cfg, res)?;
            trace.final_trainings += 1;
            let f1 = evaluate(&fitted, &test_part, res)?;
            info!("run {}: test macro-F1 {f1:.4}", r + 1);
            runs.push(RunRecord {
                run: r + 1,
                f1,
                hyperparameters: vec![Choice { fold: None, c1, c2 }],
            });
        }
    } else {
        let outer = make_folds(data, proto.folds, proto.seed)?;
        let mut chosen: Vec<(f64, f64)> = Vec::new();
        for r in 0..proto.repetitions {
            let mut gold = Vec::new();
            let mut pred = Vec::new();
            for f in 0..outer.k {
                let (tr_ids, te_ids) = outer.fold(f);
                let tr = data.subset(&tr_ids);
                let te = data.subset(&te_ids);
                if r == 0 {
                    let inner =
                        make_folds(&tr, proto.folds, mix_seed(&[proto.seed, f as u64 + 1]))?;
                    let search =
                        random_search(&tr, spec, cfg, space, &inner, proto.seed, res, &te_ids)?;
                    record_search(&search, inner.k, &mut trace);
                    chosen.push(search.best);
                    searches.push(search);
                }
                let (c1, c2) = chosen[f];
                let run_cfg = TrainingConfig {
                    l1: c1,
                    l2: c2,
                    seed: mix_seed(&[run_seed(r), f as u64]),
                    ..cfg.clone()
                };
                let fitted = train(&tr, spec, &run_cfg, res)?;
                trace.final_trainings += 1;
                pred.extend(fitted.predict(&te, res)?);
                gold.extend(
                    te.sequences()
                        .iter()
                        .filter(|s| !s.is_empty())
                        .map(|s| s.labels.clone()),
                );
            }
            let f1 = token_macro_f1(&gold, &pred, data.scheme().labels(), None)?.macro_f1;
            info!("run {}: cross-validated macro-F1 {f1:.4}", r + 1);
            runs.push(RunRecord {
                run: r + 1,
                f1,
                hyperparameters: chosen
                    .iter()
                    .enumerate()
                    .map(|(f, &(c1, c2))| Choice {
                        fold: Some(f),
                        c1,
                        c2,
                    })
                    .collect(),
            });
        }
    }
    trace.runs = runs.len();
    let f1s: Vec<f64> = runs.iter().map(|r| r.f1).collect();
    let (mean_f1, std_f1) = mean_std(&f1s);
    Ok(ProtocolReport {
        runs,
        mean_f1,
        std_f1,
        searches,
        trace,
    })
}
