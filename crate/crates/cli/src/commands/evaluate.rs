use std::collections::{HashMap, HashSet};
use std::path::Path;

use hybridseq::corpus::{
    chunks_from_labels, iob_collapse, Dataset, Format, LabeledSequence, SchemeKind,
};
use hybridseq::evaluation::{
    approx_chunk_f1, default_bin_edges, label_improvement, position_bucket_f1, token_macro_f1,
    ChunkReport, LabelImprovement, PositionBucketReport, TokenReport,
};
use serde::Serialize;

use super::predict::{PredHeader, PredRecord};
use super::{csv_bytes, read_dataset};
use crate::cli::{EvaluateArgs, Part};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;
use crate::plot::{line_chart, Series};

/// Prediction records from a predict output, a JSONL dataset or a CoNLL file.
pub(crate) fn read_predictions(path: &Path) -> CliResult<Vec<PredRecord>> {
    if Format::from_path(path) == Format::Conll {
        let d = read_dataset(path, Some(Format::Conll))?;
        return Ok(d
            .sequences()
            .iter()
            .map(|s| PredRecord {
                doc_id: s.doc_id.clone(),
                tokens: s.texts().iter().map(|t| t.to_string()).collect(),
                pred: d.label_names(s).iter().map(|l| l.to_string()).collect(),
            })
            .collect());
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((n, header)) = lines.next() else {
        return Err(CliError::data(format!(
            "{}: missing header line",
            path.display()
        )));
    };
    serde_json::from_str::<PredHeader>(header)
        .map_err(|e| CliError::data(format!("{}:{}: bad header: {e}", path.display(), n + 1)))?;
    lines
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::data(format!(
                    "{}:{}: malformed record: {e}",
                    path.display(),
                    n + 1
                ))
            })
        })
        .collect()
}

/// Label ids of `records` in the order of `gold`, failing on the first
/// document that is missing, extra, or differs in length.
pub(crate) fn align(
    gold: &Dataset,
    records: &[PredRecord],
    strict: bool,
) -> CliResult<Vec<Vec<usize>>> {
    let mut by_id: HashMap<&str, &PredRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.doc_id.as_str(), r).is_some() {
            return Err(CliError::data(format!(
                "alignment failure at doc_id `{}`: duplicate prediction",
                r.doc_id
            )));
        }
    }
    if strict {
        let gold_ids: HashSet<&str> = gold.doc_ids().into_iter().collect();
        if let Some(r) = records
            .iter()
            .find(|r| !gold_ids.contains(r.doc_id.as_str()))
        {
            return Err(CliError::data(format!(
                "alignment failure at doc_id `{}`: not in the gold file",
                r.doc_id
            )));
        }
    }
    let scheme = gold.scheme();
    gold.sequences()
        .iter()
        .map(|seq| {
            let r = by_id.get(seq.doc_id.as_str()).ok_or_else(|| {
                CliError::data(format!(
                    "alignment failure at doc_id `{}`: no prediction",
                    seq.doc_id
                ))
            })?;
            if r.pred.len() != seq.len() {
                return Err(CliError::data(format!(
                    "alignment failure at doc_id `{}`: {} gold tokens, {} predicted",
                    seq.doc_id,
                    seq.len(),
                    r.pred.len()
                )));
            }
            r.pred
                .iter()
                .map(|l| {
                    scheme.id(l).ok_or_else(|| {
                        CliError::data(format!(
                            "doc_id `{}`: predicted label `{l}` is not in the gold label set",
                            seq.doc_id
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

fn chunk_lists(
    gold: &Dataset,
    labels: &[Vec<usize>],
) -> CliResult<Vec<Vec<hybridseq::corpus::Chunk>>> {
    let seqs: Vec<LabeledSequence> = gold
        .sequences()
        .iter()
        .zip(labels)
        .map(|(s, l)| LabeledSequence {
            doc_id: s.doc_id.clone(),
            tokens: s.tokens.clone(),
            labels: l.clone(),
        })
        .collect();
    let d = Dataset::new(gold.scheme().clone(), seqs, None)?;
    let flat = if d.scheme().kind() == SchemeKind::Iob {
        iob_collapse(&d)?
    } else {
        d
    };
    let other = flat.scheme().other_id();
    Ok(flat
        .sequences()
        .iter()
        .map(|s| chunks_from_labels(&s.labels, other))
        .collect())
}

#[derive(Serialize)]
struct Comparison {
    base: TokenReport,
    improvements: Vec<LabelImprovement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_buckets: Option<PositionBucketReport>,
}

#[derive(Serialize)]
struct Report {
    documents: usize,
    token: TokenReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    chunk: Option<ChunkReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    buckets: Option<PositionBucketReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compare: Option<Comparison>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn evaluate(a: &EvaluateArgs, out: &Path) -> CliResult<()> {
    let mut rec = Recorder::new("evaluate", out)?;
    rec.input(&a.gold)?;
    rec.input(&a.pred)?;
    let full = read_dataset(&a.gold, None)?;
    let gold = match (a.part, full.split_parts()) {
        (Part::All, _) => full.clone(),
        (Part::Train, Some((t, _))) => t,
        (Part::Test, Some((_, t))) => t,
        (_, None) => {
            return Err(CliError::config(format!(
                "--part needs a gold file with a train/test split; {} has none",
                a.gold.display()
            )))
        }
    };
    let strict = a.part == Part::All;
    let names = gold.scheme().labels().to_vec();
    let exclude = a.exclude_other.then(|| gold.scheme().other_id());
    let gold_labels: Vec<Vec<usize>> = gold.sequences().iter().map(|s| s.labels.clone()).collect();
    let pred = align(&gold, &read_predictions(&a.pred)?, strict)?;
    let token = token_macro_f1(&gold_labels, &pred, &names, exclude)?;

    let chunk = if a.chunks {
        Some(approx_chunk_f1(
            &chunk_lists(&gold, &gold_labels)?,
            &chunk_lists(&gold, &pred)?,
        )?)
    } else {
        None
    };
    let edges = match a.bins {
        Some(w) => Some(default_bin_edges(gold.max_len(), w)?),
        None => None,
    };
    let buckets = match &edges {
        Some(e) => Some(position_bucket_f1(&gold_labels, &pred, &names, e, exclude)?),
        None => None,
    };
    let compare = match &a.compare {
        Some(p) => {
            rec.input(p)?;
            let base = align(&gold, &read_predictions(p)?, strict)?;
            let base_token = token_macro_f1(&gold_labels, &base, &names, exclude)?;
            let improvements = label_improvement(&token, &base_token)?;
            let base_buckets = match &edges {
                Some(e) => Some(position_bucket_f1(&gold_labels, &base, &names, e, exclude)?),
                None => None,
            };
            Some(Comparison {
                base: base_token,
                improvements,
                base_buckets,
            })
        }
        None => None,
    };

    let token_csv = csv_bytes(|w| {
        w.write_record(["label", "precision", "recall", "f1", "support", "predicted"])?;
        for m in &token.labels {
            w.write_record([
                m.label.clone(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.support.to_string(),
                m.predicted.to_string(),
            ])?;
        }
        Ok(())
    })?;
    rec.output("token_f1.csv", &token_csv)?;

    if let Some(b) = &buckets {
        let base = compare.as_ref().and_then(|c| c.base_buckets.as_ref());
        let bytes = csv_bytes(|w| {
            let mut head = vec!["start", "end", "tokens", "macro_f1"];
            if base.is_some() {
                head.push("base_macro_f1");
            }
            w.write_record(&head)?;
            for (i, bin) in b.bins.iter().enumerate() {
                let mut row = vec![
                    bin.start.to_string(),
                    bin.end.to_string(),
                    bin.tokens.to_string(),
                    opt(bin.macro_f1),
                ];
                if let Some(bb) = base {
                    row.push(opt(bb.bins[i].macro_f1));
                }
                w.write_record(&row)?;
            }
            Ok(())
        })?;
        rec.output("buckets.csv", &bytes)?;
        if a.svg {
            let mid = |s: usize, e: usize| (s + e) as f64 / 2.0;
            let mut series = vec![Series {
                name: "predictions".into(),
                points: b
                    .bins
                    .iter()
                    .map(|x| (mid(x.start, x.end), x.macro_f1))
                    .collect(),
            }];
            if let Some(bb) = base {
                series.push(Series {
                    name: "baseline".into(),
                    points: bb
                        .bins
                        .iter()
                        .map(|x| (mid(x.start, x.end), x.macro_f1))
                        .collect(),
                });
            }
            let svg = line_chart(
                "Macro-F1 by token position",
                "position",
                "macro-F1",
                &series,
            );
            rec.output("buckets.svg", svg.as_bytes())?;
        }
    }
    if let Some(c) = &compare {
        let bytes = csv_bytes(|w| {
            w.write_record(["label", "f1", "base_f1", "relative_improvement"])?;
            for imp in &c.improvements {
                w.write_record([
                    imp.label.clone(),
                    imp.f1.to_string(),
                    imp.base_f1.to_string(),
                    imp.display(),
                ])?;
            }
            Ok(())
        })?;
        rec.output("improvements.csv", &bytes)?;
    }
    log::info!(
        "macro-F1 {:.4} over {} documents",
        token.macro_f1,
        gold.len()
    );
    let report = Report {
        documents: gold.len(),
        token,
        chunk,
        buckets,
        compare,
    };
    rec.output_json("report.json", &report)?;
    rec.finish()?;
    Ok(())
}
