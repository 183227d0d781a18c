use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use hybridseq::crowd::{agreement, dawid_skene_em_smoothed, infer_hard_labels, AnnotationMatrix};
use serde::Deserialize;
use serde_json::json;

use super::csv_bytes;
use crate::cli::AggregateArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Deserialize)]
struct Response {
    item_id: String,
    annotator_id: String,
    label: String,
}

#[derive(Deserialize)]
struct GoldRow {
    item_id: String,
    label: String,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn aggregate(a: &AggregateArgs, out: &Path) -> CliResult<()> {
    let mut rec = Recorder::new("aggregate", out)?;
    rec.input(&a.annotations)?;
    let rows: Vec<Response> = read_rows(&a.annotations)?;
    let labels = match &a.labels {
        Some(l) => l.clone(),
        None => rows
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let m = AnnotationMatrix::from_triples(
        rows.iter().map(|r| {
            (
                r.item_id.as_str(),
                r.annotator_id.as_str(),
                r.label.as_str(),
            )
        }),
        &labels,
    )
    .map_err(|e| CliError::data(format!("{}: {e}", a.annotations.display())))?;
    let result = dawid_skene_em_smoothed(&m, a.max_iters, a.tol, a.pseudo_count)?;
    let hard = infer_hard_labels(&result);

    let posteriors = csv_bytes(|w| {
        let mut head = vec!["item_id".to_string()];
        head.extend(labels.iter().cloned());
        w.write_record(&head)?;
        for (item, p) in result.items.iter().zip(&result.posteriors) {
            let mut row = vec![item.clone()];
            row.extend(p.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        Ok(())
    })?;
    rec.output("posteriors.csv", &posteriors)?;
    let hard_csv = csv_bytes(|w| {
        w.write_record(["item_id", "label"])?;
        for (item, &y) in result.items.iter().zip(&hard) {
            w.write_record([item.as_str(), labels[y].as_str()])?;
        }
        Ok(())
    })?;
    rec.output("hard_labels.csv", &hard_csv)?;

    let confusions: BTreeMap<&str, &Vec<Vec<f64>>> = result
        .annotators
        .iter()
        .map(String::as_str)
        .zip(&result.confusions)
        .collect();
    rec.output_json(
        "confusions.json",
        &json!({
            "labels": labels,
            "class_priors": result.class_priors,
            "confusions": confusions,
        }),
    )?;

    let agreement_block = match &a.gold {
        Some(p) => {
            rec.input(p)?;
            let gold: BTreeMap<String, String> = read_rows::<GoldRow>(p)?
                .into_iter()
                .map(|r| (r.item_id, r.label))
                .collect();
            let inferred: BTreeMap<String, String> = result
                .items
                .iter()
                .zip(&hard)
                .map(|(i, &y)| (i.clone(), labels[y].clone()))
                .collect();
            let mut mine = BTreeMap::new();
            for id in gold.keys() {
                let l = inferred.get(id).ok_or_else(|| {
                    CliError::data(format!("gold item `{id}` has no annotations"))
                })?;
                mine.insert(id.clone(), l.clone());
            }
            Some(agreement(&mine, &gold)?)
        }
        None => None,
    };
    rec.output_json(
        "diagnostics.json",
        &json!({
            "items": result.items.len(),
            "annotators": result.annotators.len(),
            "responses": m.num_responses(),
            "iterations": result.iterations,
            "converged": result.converged,
            "pseudo_count": a.pseudo_count,
            "log_likelihood": result.log_likelihood,
            "objective": result.objective,
            "agreement": agreement_block,
        }),
    )?;
    if !result.converged {
        log::warn!(
            "EM stopped after {} iterations without converging",
            result.iterations
        );
    }
    rec.finish()?;
    Ok(())
}
