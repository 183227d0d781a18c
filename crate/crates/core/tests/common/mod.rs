#![allow(dead_code)]

use hybridseq::corpus::{
    generate_synthetic, LabelProfile, LengthProfile, SyntheticConfig, SyntheticCorpus,
};
use hybridseq::featurizer::FeaturizerConfig;
use hybridseq::model::{ModelDims, ModelSpec};
use hybridseq::training::{Resources, TrainingConfig};

pub fn mini_config(num_sequences: usize, test_fraction: f64) -> SyntheticConfig {
    SyntheticConfig {
        name: "mini".into(),
        other: "Other".into(),
        num_sequences,
        length: LengthProfile {
            mean: 10.0,
            std: 3.0,
            min: 4,
            max: 18,
        },
        long_length: None,
        long_fraction: 0.0,
        filler: "the patient was seen today for and with no visit"
            .split_whitespace()
            .map(String::from)
            .collect(),
        span_rate: 0.2,
        min_cue_gap: 0,
        max_cue_gap: 2,
        bare_mention_rate: 0.2,
        trailing_cue_rate: 0.0,
        labels: vec![
            LabelProfile {
                name: "Diagnosis".into(),
                weight: 1.0,
                lexicon: "disease".into(),
                cues: vec!["diagnosed".into(), "has".into()],
            },
            LabelProfile {
                name: "History".into(),
                weight: 1.0,
                lexicon: "disease".into(),
                cues: vec!["history".into(), "prior".into()],
            },
        ],
        lexicons: [(
            "disease".to_string(),
            (0..20).map(|i| format!("stem{i} disease")).collect(),
        )]
        .into_iter()
        .collect(),
        cue_window: 3,
        test_fraction,
        holdout_phrase_fraction: 0.0,
        label_noise: 0.0,
    }
}

pub fn mini_corpus(num_sequences: usize, test_fraction: f64, seed: u64) -> SyntheticCorpus {
    generate_synthetic(&mini_config(num_sequences, test_fraction), seed).unwrap()
}

pub fn hb_resources(corpus: &SyntheticCorpus) -> Resources {
    Resources {
        featurizer: Some(FeaturizerConfig {
            word_window: 1,
            pos_window: 0,
            cue_lexicons: corpus.cue_lexicons.clone(),
            span_lexicons: corpus.span_lexicons.clone(),
            enable_orthography: false,
        }),
        pretrained: None,
        contextual: None,
    }
}

pub fn hb_spec() -> ModelSpec {
    ModelSpec::profile("HB-CRF").unwrap()
}

pub fn small_dims(mut spec: ModelSpec) -> ModelSpec {
    spec.dims = ModelDims {
        embedding: 8,
        hidden: 6,
        dense: 6,
    };
    spec
}

pub fn quick_training(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        tune_epochs: Some(1),
        ..TrainingConfig::new(1e-2, epochs)
    }
}
