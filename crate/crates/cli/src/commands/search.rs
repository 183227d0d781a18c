use std::path::Path;

use hybridseq::corpus::make_folds;
use hybridseq::training::random_search;
use serde_json::json;

use super::{csv_bytes, load_run};
use crate::cli::SearchArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

pub fn search(a: &SearchArgs, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut rec = Recorder::new("search", out)?;
    let l = load_run(&a.config, seed, &mut rec)?;
    let space = l
        .cfg
        .search
        .clone()
        .ok_or_else(|| CliError::config("config key `search` is required"))?;
    let proto = &l.cfg.protocol;
    let folds = make_folds(&l.train, proto.folds, proto.seed)?;
    let forbidden: Vec<String> = l
        .test
        .as_ref()
        .map(|t| t.doc_ids().iter().map(|s| s.to_string()).collect())
        .unwrap_or_default();
    let result = random_search(
        &l.train,
        &l.cfg.model,
        &l.cfg.training,
        &space,
        &folds,
        proto.seed,
        &l.res,
        &forbidden,
    )?;

    let table = csv_bytes(|w| {
        let mut head = vec!["c1".to_string(), "c2".to_string()];
        head.extend((0..folds.k).map(|f| format!("fold{f}_f1")));
        head.push("mean_f1".into());
        w.write_record(&head)?;
        for s in &result.settings {
            let mut row = vec![s.c1.to_string(), s.c2.to_string()];
            row.extend(s.fold_f1.iter().map(f64::to_string));
            row.push(s.mean_f1.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })?;
    rec.output("search.csv", &table)?;
    let (c1, c2) = result.best;
    println!("best c1={c1} c2={c2}");
    rec.output_json(
        "best.json",
        &json!({"c1": c1, "c2": c2, "trainings": result.trainings}),
    )?;

    // fully expanded config with the chosen coefficients, ready for `train`
    let mut derived = l.cfg.clone();
    derived.inherit = None;
    derived.training.l1 = c1;
    derived.training.l2 = c2;
    rec.output_json("train_config.json", &derived)?;
    rec.finish()?;
    Ok(())
}
