//! Synthetic corpus generation and the clean/reverberant verification
//! experiment.

mod config;
mod corpus;
mod experiment;
mod synth;

pub use config::KeyValues;
pub use corpus::{
    build_corpus, load_record, render_utterance, CorpusConfig, ExperimentManifest, UtteranceRecord, MANIFEST_FILE,
    MANIFEST_SCHEMA_VERSION,
};
pub use experiment::{
    assemble_report, relative_reduction, run_experiment, run_seed, EerRow, ExperimentConfig, LossSummary, MseSummary,
    NetworkSettings, Reduction, ReferenceResults, Report, SeedRun, System, TrialCounts, REPORT_SCHEMA_VERSION,
};
pub use synth::{synth_utterance, SyntheticSpeakerProfile, VOWELS};
