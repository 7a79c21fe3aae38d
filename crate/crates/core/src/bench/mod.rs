//! Synthetic domain-shift benchmark: data generation, source pretraining,
//! prompt-expert construction, evaluation and the loss ablation runner.

pub mod ablation;
pub mod dataset;
pub mod generate;
pub mod metrics;
pub mod pretrain;
pub mod prompt_builder;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationRow, AblationTable, ABLATION_ROWS};
pub use dataset::{format_real, Dataset, Domain, UnlabeledView};
pub use generate::{generate_domains, DomainConfig, DomainShift, GeneratedDomains};
pub use metrics::{consensus_prediction, evaluate, metrics_from_outputs, Metrics};
pub use pretrain::{pretrain_source, PretrainConfig};
pub use prompt_builder::{build_prompt_expert, zero_shot_accuracy, PromptBuild, PromptConfig};

use crate::error::Result;
use crate::experts::{PromptExpert, SourceExpert};

/// Stream identifiers for seeds derived from one master seed.
pub mod streams {
    pub const MEANS: u64 = 1;
    pub const SHIFT: u64 = 2;
    pub const SOURCE_SAMPLES: u64 = 3;
    pub const TARGET_SAMPLES: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const ADAPTER_INIT: u64 = 6;
    pub const PROMPT: u64 = 7;
    pub const CALIBRATION: u64 = 8;
    pub const ADAPTATION: u64 = 9;
}

/// Everything needed to construct one benchmark instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub domains: DomainConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
}

/// A generated benchmark with its pretrained source expert and zero-shot prompt expert.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub domains: GeneratedDomains,
    pub source_expert: SourceExpert,
    pub prompt: PromptBuild,
}

impl Benchmark {
    pub fn build(cfg: &BenchConfig, seed: u64) -> Result<Self> {
        let domains = generate_domains(&cfg.domains, seed)?;
        let source_expert = pretrain_source(&domains.source, &cfg.pretrain, seed)?;
        let prompt = build_prompt_expert(&domains, &cfg.domains, &cfg.prompt, seed)?;
        Ok(Self {
            domains,
            source_expert,
            prompt,
        })
    }

    pub fn prompt_expert(&self) -> &PromptExpert {
        &self.prompt.expert
    }
}
