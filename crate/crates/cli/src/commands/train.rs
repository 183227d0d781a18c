use std::path::{Path, PathBuf};

use hybridseq::training::{self, loss_trace_csv, run_protocol};
use serde_json::json;

use super::{csv_bytes, load_run};
use crate::cli::TrainArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn train(a: &TrainArgs, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let command = if a.protocol {
        "train --protocol"
    } else {
        "train"
    };
    let mut rec = Recorder::new(command, out)?;
    let l = load_run(&a.config, seed, &mut rec)?;

    if a.protocol {
        let space =
            l.cfg.search.clone().ok_or_else(|| {
                CliError::config("config key `search` is required with --protocol")
            })?;
        let report = run_protocol(
            &l.data,
            &l.cfg.model,
            &l.cfg.training,
            &space,
            &l.cfg.protocol,
            &l.res,
        )?;
        rec.output_json("protocol.json", &report)?;
        let runs = csv_bytes(|w| {
            w.write_record(["run", "macro_f1"])?;
            for r in &report.runs {
                w.write_record([r.run.to_string(), r.f1.to_string()])?;
            }
            Ok(())
        })?;
        rec.output("runs.csv", &runs)?;
        log::info!("macro-F1 {:.4} +/- {:.4}", report.mean_f1, report.std_f1);
        rec.finish()?;
        return Ok(());
    }

    let fitted = training::train(&l.train, &l.cfg.model, &l.cfg.training, &l.res)?;
    if let Some(test) = &l.test {
        let f1 = training::evaluate(&fitted, test, &l.res)?;
        log::info!("test macro-F1 {f1:.4}");
        rec.output_json(
            "metrics.json",
            &json!({"test_documents": test.len(), "test_macro_f1": f1}),
        )?;
    }
    let mut model = fitted.model;
    let featurizer = l.featurizer_file.map(|mut f| {
        for p in f.cue_lexicons.iter_mut().chain(f.span_lexicons.iter_mut()) {
            *p = absolute(p);
        }
        f
    });
    model.metadata = json!({
        "featurizer": featurizer,
        "contextual": l.cfg.embeddings.contextual.as_deref().map(absolute),
        "training": l.cfg.training,
    });
    rec.output("model.ckpt", &model.to_bytes()?)?;
    rec.output("loss_trace.csv", loss_trace_csv(&fitted.trace).as_bytes())?;
    if let Some(v) = &fitted.vocab {
        rec.output("vocab.tsv", v.to_tsv().as_bytes())?;
    }
    rec.finish()?;
    Ok(())
}
