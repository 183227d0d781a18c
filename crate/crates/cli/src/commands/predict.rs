use std::path::Path;

use hybridseq::corpus::{Dataset, LabeledSequence, SchemeKind};
use serde::{Deserialize, Serialize};

use super::{load_inference, read_dataset, Inference};
use crate::cli::PredictArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Serialize, Deserialize)]
pub(crate) struct PredHeader {
    pub labels: Vec<String>,
    pub scheme: SchemeKind,
    pub other: String,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct PredRecord {
    pub doc_id: String,
    #[serde(default)]
    pub tokens: Vec<String>,
    /// Also accepted under `labels`, so a gold file can stand in for predictions.
    #[serde(alias = "labels")]
    pub pred: Vec<String>,
}

/// Decode one sequence; empty sequences decode to nothing.
pub(crate) fn decode(
    inf: &Inference,
    seq: &LabeledSequence,
    data: &Dataset,
) -> CliResult<Vec<usize>> {
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let prepared = inf.model.prepare(
        seq,
        data.scheme(),
        inf.featurizer.as_ref().map(|(c, v)| (c, v)),
        inf.res.contextual.as_deref(),
    )?;
    Ok(inf.model.predict(&prepared)?)
}

pub fn predict(a: &PredictArgs, out: &Path) -> CliResult<()> {
    if a.name.contains('/') || a.name.contains('\\') || a.name == "manifest.json" {
        return Err(CliError::config("--name must be a plain file name"));
    }
    let mut rec = Recorder::new("predict", out)?;
    let inf = load_inference(
        &a.checkpoint,
        a.featurizer.as_ref(),
        a.vocab.as_ref(),
        a.contextual.as_ref(),
        &mut rec,
    )?;
    rec.input(&a.dataset)?;
    let data = read_dataset(&a.dataset, None)?;

    let labels = inf.model.labels.clone();
    let header = PredHeader {
        labels: labels.labels().to_vec(),
        scheme: labels.kind(),
        other: labels.other_label().to_string(),
    };
    let mut text = serde_json::to_string(&header).expect("serializable");
    text.push('\n');
    for seq in data.sequences() {
        let pred = decode(&inf, seq, &data)?;
        let rec_line = PredRecord {
            doc_id: seq.doc_id.clone(),
            tokens: seq.texts().iter().map(|s| s.to_string()).collect(),
            pred: pred.iter().map(|&y| labels.name(y).to_string()).collect(),
        };
        text.push_str(&serde_json::to_string(&rec_line).expect("serializable"));
        text.push('\n');
    }
    rec.output(&a.name, text.as_bytes())?;
    rec.finish()?;
    Ok(())
}
