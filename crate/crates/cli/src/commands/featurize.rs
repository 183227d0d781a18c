use std::path::Path;

use hybridseq::featurizer::{
    build_vocabulary, load_featurizer_config, sequence_vectors, FeatureVocabulary,
};
use serde::Serialize;

use super::read_dataset;
use crate::cli::FeaturizeArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Serialize)]
struct FeatureRecord<'a> {
    doc_id: &'a str,
    features: Vec<&'a [u32]>,
}

pub fn featurize(a: &FeaturizeArgs, out: &Path) -> CliResult<()> {
    let mut rec = Recorder::new("featurize", out)?;
    rec.input(&a.dataset)?;
    rec.input(&a.featurizer)?;
    let (file, cfg) =
        load_featurizer_config(&a.featurizer).map_err(|e| CliError::from(e).as_config())?;
    for p in file.cue_lexicons.iter().chain(&file.span_lexicons) {
        rec.input(p)?;
    }
    let data = read_dataset(&a.dataset, None)?;
    let vocab = match &a.vocab {
        Some(p) => {
            rec.input(p)?;
            FeatureVocabulary::load(p)?
        }
        None => {
            // the vocabulary never sees test documents
            let train = data
                .split_parts()
                .map(|(t, _)| t)
                .unwrap_or_else(|| data.clone());
            build_vocabulary(&train, &cfg)?
        }
    };
    rec.output("vocab.tsv", vocab.to_tsv().as_bytes())?;

    let mut text = String::new();
    for seq in data.sequences() {
        let vectors = sequence_vectors(&seq.tokens, &cfg, &vocab)?;
        let line = FeatureRecord {
            doc_id: &seq.doc_id,
            features: vectors.iter().map(|v| v.indices()).collect(),
        };
        text.push_str(&serde_json::to_string(&line).expect("serializable"));
        text.push('\n');
    }
    rec.output("features.jsonl", text.as_bytes())?;
    log::info!(
        "{} features, vocabulary hash {}",
        vocab.len(),
        vocab.content_hash()
    );
    rec.finish()?;
    Ok(())
}
