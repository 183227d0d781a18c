use std::path::{Path, PathBuf};

use hybridseq::corpus::{generate_synthetic, render_dataset, Format};
use hybridseq::embeddings::pseudo_contextual_store;
use hybridseq::featurizer::FeaturizerConfigFile;

use crate::cli::SynthArgs;
use crate::config::SynthTask;
use crate::error::CliResult;
use crate::manifest::Recorder;

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn synth(a: &SynthArgs, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let task = SynthTask::load(&a.task)?;
    let seed = seed.unwrap_or(task.seed);
    let mut rec = Recorder::new("synth", out)?;
    rec.set_config(&a.task)?;
    rec.set_seed(seed);

    let corpus = generate_synthetic(&task.corpus, seed)?;
    rec.output(
        "dataset.jsonl",
        render_dataset(&corpus.dataset, Format::Jsonl).as_bytes(),
    )?;
    let mut span_paths = Vec::new();
    for lex in &corpus.span_lexicons {
        let rel = format!("lexicons/{}.txt", file_stem(lex.name()));
        rec.output(&rel, lex.to_file_string().as_bytes())?;
        span_paths.push(PathBuf::from(rel));
    }
    let mut cue_paths = Vec::new();
    for cue in &corpus.cue_lexicons {
        let rel = format!("cues/{}.txt", file_stem(cue.name()));
        rec.output(&rel, cue.to_file_string().as_bytes())?;
        cue_paths.push(PathBuf::from(rel));
    }
    let featurizer = FeaturizerConfigFile {
        word_window: task.featurizer.word_window,
        pos_window: task.featurizer.pos_window,
        orthography: task.featurizer.orthography,
        cue_lexicons: cue_paths,
        span_lexicons: span_paths,
    };
    rec.output_json("featurizer.json", &featurizer)?;
    if let Some(pc) = &task.contextual {
        let store = pseudo_contextual_store(&corpus.dataset, pc)?;
        let mut bytes = Vec::new();
        store.write_jsonl(&mut bytes)?;
        rec.output("contextual.jsonl", &bytes)?;
    }
    log::info!(
        "generated {} sequences, {} tokens",
        corpus.dataset.len(),
        corpus.dataset.token_count()
    );
    rec.finish()?;
    Ok(())
}
