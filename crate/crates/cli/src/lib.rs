//! Command-line driver for the dual-expert adaptation engine.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{cmd_ablate, cmd_adapt, cmd_eval, cmd_generate, cmd_pretrain};
pub use config::{parse_config, ConfigError, RunConfig};

/// Default file names inside the output directory.
pub mod files {
    pub const SOURCE_DATA: &str = "source.csv";
    pub const TARGET_DATA: &str = "target.csv";
    pub const PROMPT_CHECKPOINT: &str = "prompt_expert.json";
    pub const GENERATE_MANIFEST: &str = "generate_manifest.json";
    pub const SOURCE_CHECKPOINT: &str = "source_expert.json";
    pub const ADAPT_REPORT: &str = "adapt_report.json";
    pub const ADAPT_EPOCHS: &str = "adapt_epochs.csv";
    pub const ADAPTED_SOURCE: &str = "adapted_source_expert.json";
    pub const ADAPTED_PROMPT: &str = "adapted_prompt_expert.json";
    pub const EVAL_METRICS: &str = "eval_metrics.json";
    pub const ABLATION: &str = "ablation.csv";
}
