use std::path::Path;

use hybridseq::crf::PotentialRow;
use hybridseq::evaluation::potential_summary;
use serde_json::json;

use super::{csv_bytes, load_inference, read_dataset};
use crate::cli::PotentialArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;
use crate::plot::heatmap;

const SOURCES: [(&str, fn(&PotentialRow) -> f64); 3] = [
    ("lstm", |r| r.phi_lstm),
    ("hb", |r| r.phi_hb),
    ("total", |r| r.phi_total),
];

fn mean_max<'a>(
    rows: impl Iterator<Item = &'a PotentialRow>,
    f: fn(&PotentialRow) -> f64,
) -> (f64, f64, usize) {
    let (mut sum, mut max, mut n) = (0.0, f64::NEG_INFINITY, 0usize);
    for r in rows {
        let v = f(r);
        sum += v;
        max = max.max(v);
        n += 1;
    }
    (sum / n as f64, max, n)
}

pub fn analyze_potentials(a: &PotentialArgs, out: &Path) -> CliResult<()> {
    let mut rec = Recorder::new("analyze-potentials", out)?;
    let inf = load_inference(
        &a.checkpoint,
        a.featurizer.as_ref(),
        a.vocab.as_ref(),
        a.contextual.as_ref(),
        &mut rec,
    )?;
    rec.input(&a.dataset)?;
    let data = read_dataset(&a.dataset, None)?;
    let model = &inf.model;
    let bias = &model.params.proj.b;
    let names = model.labels.labels().to_vec();

    let mut rows = Vec::new();
    let mut tokens = Vec::new();
    for seq in data.sequences().iter().filter(|s| !s.is_empty()) {
        let prepared = model.prepare(
            seq,
            data.scheme(),
            inf.featurizer.as_ref().map(|(c, v)| (c, v)),
            inf.res.contextual.as_deref(),
        )?;
        for r in model.potential_rows(&prepared)? {
            tokens.push(seq.tokens[r.token_index].text.clone());
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err(CliError::data(format!(
            "{} has no tokens to analyze",
            a.dataset.display()
        )));
    }
    let label_id = |r: &PotentialRow| {
        names
            .iter()
            .position(|n| *n == r.label)
            .expect("model label")
    };

    let dump = csv_bytes(|w| {
        w.write_record([
            "doc_id",
            "token_index",
            "token",
            "label",
            "phi_total",
            "phi_lstm",
            "phi_hb",
            "bias",
        ])?;
        for (r, tok) in rows.iter().zip(&tokens) {
            w.write_record([
                r.doc_id.clone(),
                r.token_index.to_string(),
                tok.clone(),
                r.label.clone(),
                r.phi_total.to_string(),
                r.phi_lstm.to_string(),
                r.phi_hb.to_string(),
                bias[label_id(r)].to_string(),
            ])?;
        }
        Ok(())
    })?;
    rec.output("potentials.csv", &dump)?;

    let mut grid = vec![vec![0.0; names.len()]; 2];
    let table = csv_bytes(|w| {
        w.write_record(["source", "label", "cells", "mean", "max"])?;
        for (si, (source, f)) in SOURCES.iter().enumerate() {
            for (y, name) in names.iter().enumerate() {
                let (mean, max, n) = mean_max(rows.iter().filter(|r| r.label == *name), *f);
                if si < 2 {
                    grid[si][y] = mean;
                }
                w.write_record([
                    source.to_string(),
                    name.clone(),
                    n.to_string(),
                    mean.to_string(),
                    max.to_string(),
                ])?;
            }
            let (mean, max, n) = mean_max(rows.iter(), *f);
            w.write_record([
                source.to_string(),
                "overall".into(),
                n.to_string(),
                mean.to_string(),
                max.to_string(),
            ])?;
        }
        Ok(())
    })?;
    rec.output("heatmap.csv", &table)?;

    let max_residual = rows
        .iter()
        .map(|r| (r.phi_lstm + r.phi_hb + bias[label_id(r)] - r.phi_total).abs())
        .fold(0.0, f64::max);
    rec.output_json(
        "summary.json",
        &json!({
            "summary": potential_summary(&rows)?,
            "max_reconstruction_error": max_residual,
            "lstm_branch": model.spec.use_lstm,
            "hb_branch": model.spec.use_hb,
        }),
    )?;
    if a.svg {
        let svg = heatmap(
            "Mean potential by source",
            &["lstm".into(), "hb".into()],
            &names,
            &grid,
        );
        rec.output("heatmap.svg", svg.as_bytes())?;
    }
    rec.finish()?;
    Ok(())
}
