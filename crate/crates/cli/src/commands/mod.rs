mod aggregate;
mod evaluate;
mod featurize;
mod potentials;
mod predict;
mod search;
mod synth;
mod train;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hybridseq::corpus::{load_dataset, Dataset, Format, Split};
use hybridseq::embeddings::{load_contextual_store, load_static_embeddings};
use hybridseq::featurizer::{
    load_featurizer_config, FeatureVocabulary, FeaturizerConfig, FeaturizerConfigFile,
};
use hybridseq::model::HybridModel;
use hybridseq::training::Resources;

use crate::cli::{Cli, Command};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

pub use aggregate::aggregate;
pub use evaluate::evaluate;
pub use featurize::featurize;
pub use potentials::analyze_potentials;
pub use predict::predict;
pub use search::search;
pub use synth::synth;
pub use train::train;

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be >= 1"));
        }
        // a second initialization (tests calling `run` repeatedly) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth(a) => synth(a, out, cli.seed),
        Command::Featurize(a) => featurize(a, out),
        Command::Train(a) => train(a, out, cli.seed),
        Command::Predict(a) => predict(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Aggregate(a) => aggregate(a, out),
        Command::Search(a) => search(a, out, cli.seed),
        Command::AnalyzePotentials(a) => analyze_potentials(a, out),
    }
}

pub(crate) fn read_dataset(path: &Path, format: Option<Format>) -> CliResult<Dataset> {
    let format = format.unwrap_or_else(|| Format::from_path(path));
    Ok(load_dataset(path, format)?)
}

/// A run config with every referenced artifact loaded.
pub(crate) struct Loaded {
    pub cfg: RunConfig,
    pub featurizer_file: Option<FeaturizerConfigFile>,
    pub res: Resources,
    /// Train and test documents together, carrying the split if one exists.
    pub data: Dataset,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub(crate) fn load_run(path: &Path, seed: Option<u64>, rec: &mut Recorder) -> CliResult<Loaded> {
    let mut cfg = RunConfig::load(path)?;
    let seed = cfg.apply_seed(seed);
    let featurizer_file = cfg.validate()?;
    rec.set_config(path)?;
    rec.set_seed(seed);

    rec.input(&cfg.data.train)?;
    let first = read_dataset(&cfg.data.train, cfg.data.format)?;
    let data = match &cfg.data.test {
        Some(test_path) => {
            rec.input(test_path)?;
            let test = read_dataset(test_path, cfg.data.format)?;
            if test.scheme() != first.scheme() {
                return Err(CliError::data(format!(
                    "{} and {} use different label sets",
                    cfg.data.train.display(),
                    test_path.display()
                )));
            }
            let split = Split {
                train: first.doc_ids().iter().map(|s| s.to_string()).collect(),
                test: test.doc_ids().iter().map(|s| s.to_string()).collect(),
            };
            let mut seqs = first.sequences().to_vec();
            seqs.extend(test.sequences().iter().cloned());
            Dataset::new(first.scheme().clone(), seqs, Some(split))?
        }
        None => first,
    };
    let (train, test) = match data.split_parts() {
        Some((a, b)) => (a, Some(b)),
        None => (data.clone(), None),
    };

    let mut res = Resources::default();
    if let Some(file) = &featurizer_file {
        rec.input(cfg.featurizer.as_ref().expect("validated"))?;
        for p in file.cue_lexicons.iter().chain(&file.span_lexicons) {
            rec.input(p)?;
        }
        res.featurizer = Some(file.load().map_err(|e| CliError::from(e).as_config())?);
    }
    if let Some(p) = &cfg.embeddings.static_table {
        rec.input(p)?;
        let mut t = load_static_embeddings(p)?;
        t.set_trainable(cfg.embeddings.trainable.unwrap_or(false));
        res.pretrained = Some(Arc::new(t));
    }
    if let Some(p) = &cfg.embeddings.contextual {
        rec.input(p)?;
        res.contextual = Some(Arc::new(load_contextual_store(p)?));
    }
    Ok(Loaded {
        cfg,
        featurizer_file,
        res,
        data,
        train,
        test,
    })
}

/// Artifacts needed to run a saved model on new data.
pub(crate) struct Inference {
    pub model: HybridModel,
    pub featurizer: Option<(FeaturizerConfig, FeatureVocabulary)>,
    pub res: Resources,
}

pub(crate) fn load_inference(
    checkpoint: &Path,
    featurizer: Option<&PathBuf>,
    vocab: Option<&PathBuf>,
    contextual: Option<&PathBuf>,
    rec: &mut Recorder,
) -> CliResult<Inference> {
    rec.input(checkpoint)?;
    let model = HybridModel::load(checkpoint)?;
    let meta = &model.metadata;
    let mut res = Resources::default();
    let featurizer = if model.spec.use_hb {
        let cfg = match featurizer {
            Some(p) => {
                rec.input(p)?;
                load_featurizer_config(p)
                    .map_err(|e| CliError::from(e).as_config())?
                    .1
            }
            None => {
                let file: FeaturizerConfigFile = meta
                    .get("featurizer")
                    .cloned()
                    .and_then(|v| serde_json::from_value(v).ok())
                    .ok_or_else(|| {
                        CliError::config("checkpoint records no featurizer; pass --featurizer")
                    })?;
                file.load().map_err(|e| CliError::from(e).as_config())?
            }
        };
        let vocab_path = match vocab {
            Some(p) => p.clone(),
            None => checkpoint.with_file_name("vocab.tsv"),
        };
        rec.input(&vocab_path)?;
        let vocab = FeatureVocabulary::load(&vocab_path)?;
        res.featurizer = Some(cfg.clone());
        Some((cfg, vocab))
    } else {
        None
    };
    if model.spec.embedding == hybridseq::embeddings::EmbeddingKind::PrecomputedContextual {
        let path = match contextual {
            Some(p) => p.clone(),
            None => meta
                .get("contextual")
                .and_then(|v| v.as_str())
                .map(PathBuf::from)
                .ok_or_else(|| {
                    CliError::config("checkpoint records no contextual store; pass --contextual")
                })?,
        };
        rec.input(&path)?;
        res.contextual = Some(Arc::new(load_contextual_store(&path)?));
    }
    Ok(Inference {
        model,
        featurizer,
        res,
    })
}

/// Render CSV rows written through `f`.
pub(crate) fn csv_bytes<F>(f: F) -> CliResult<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> CliResult<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w)?;
    w.into_inner()
        .map_err(|e| CliError::new(crate::error::Kind::Internal, e.to_string()))
}
