//! Flat TOML run configuration with defaults, range checks and a digest.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use excl_core::bench::{BenchConfig, DomainConfig, PretrainConfig, PromptConfig};
use excl_core::losses::LossToggles;
use excl_core::rain::AdaptConfig;

/// Every key accepted in a config file. Absent keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub epochs: usize,
    pub init_epochs: usize,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_prompt: f64,
    pub momentum: f64,
    pub loss_weisz: bool,
    pub loss_psc: bool,
    pub loss_mi: bool,

    pub num_categories: usize,
    pub d_in: usize,
    pub samples_per_domain: usize,
    pub mean_radius: f64,
    pub source_noise: f64,
    pub gamma: f64,
    pub shift_scale: f64,
    pub target_noise_scale: f64,

    pub d_hidden: usize,
    pub adapter_rank: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_target_accuracy: f64,
    pub pretrain_min_accuracy: f64,

    pub d_embed: usize,
    pub temperature: f64,
    pub zero_shot_band_low: f64,
    pub zero_shot_band_high: f64,
    pub max_anchor_noise: f64,
    pub bisection_steps: usize,

    pub ablation_seeds: Vec<u64>,

    pub out_dir: PathBuf,
    /// Input overrides; when unset the files are looked up in `out_dir`.
    pub source_data: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub source_checkpoint: Option<PathBuf>,
    pub prompt_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adapt = AdaptConfig::default();
        let domains = DomainConfig::default();
        let pretrain = PretrainConfig::default();
        let prompt = PromptConfig::default();
        Self {
            seed: adapt.seed,
            epochs: adapt.epochs,
            init_epochs: adapt.init_epochs,
            batch_size: adapt.batch_size,
            lr_adapter: adapt.lr_adapter,
            lr_prompt: adapt.lr_prompt,
            momentum: adapt.momentum,
            loss_weisz: adapt.toggles.weisz,
            loss_psc: adapt.toggles.psc,
            loss_mi: adapt.toggles.mi,
            num_categories: domains.num_categories,
            d_in: domains.d_in,
            samples_per_domain: domains.samples_per_domain,
            mean_radius: domains.mean_radius,
            source_noise: domains.source_noise,
            gamma: domains.gamma,
            shift_scale: domains.shift_scale,
            target_noise_scale: domains.target_noise_scale,
            d_hidden: pretrain.d_hidden,
            adapter_rank: pretrain.adapter_rank,
            pretrain_max_epochs: pretrain.max_epochs,
            pretrain_lr: pretrain.learning_rate,
            pretrain_momentum: pretrain.momentum,
            pretrain_batch_size: pretrain.batch_size,
            pretrain_target_accuracy: pretrain.target_accuracy,
            pretrain_min_accuracy: pretrain.min_accuracy,
            d_embed: prompt.d_embed,
            temperature: prompt.temperature,
            zero_shot_band_low: prompt.band_low,
            zero_shot_band_high: prompt.band_high,
            max_anchor_noise: prompt.max_anchor_noise,
            bisection_steps: prompt.bisection_steps,
            ablation_seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("out"),
            source_data: None,
            target_data: None,
            source_checkpoint: None,
            prompt_checkpoint: None,
        }
    }
}

/// A config problem, located by key and 1-based line where possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        if let Some(line) = self.line {
            write!(f, " at line {line}")?;
        }
        if let Some(key) = &self.key {
            write!(f, " for key `{key}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn key_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line.checked_sub(1)?)?;
    let key = l.split('=').next()?.trim();
    (!key.is_empty() && !key.starts_with('#')).then(|| key.to_string())
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == key))
        .map(|i| i + 1)
}

/// Name inside the first pair of backticks, as used in serde's unknown-field messages.
fn quoted_name(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

impl RunConfig {
    /// Parses config text: defaults for absent keys, then range validation.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().trim().to_string();
            let line = e.span().map(|s| line_of_offset(text, s.start));
            let key = if message.starts_with("unknown field") {
                quoted_name(&message)
            } else {
                line.and_then(|l| key_on_line(text, l))
            };
            ConfigError { key, line, message }
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            line: line_of_key(text, key),
            key: Some(key.to_string()),
            message,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Checks every field range; reports the first offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        fn positive(v: f64) -> bool {
            v > 0.0 && v.is_finite()
        }
        fn non_negative(v: f64) -> bool {
            v >= 0.0 && v.is_finite()
        }
        fn unit(v: f64) -> bool {
            (0.0..=1.0).contains(&v)
        }
        let checks: [(&'static str, bool, &str); 28] = [
            (
                "init_epochs",
                self.init_epochs <= self.epochs,
                "must not exceed epochs",
            ),
            ("batch_size", self.batch_size >= 1, "must be at least 1"),
            (
                "lr_adapter",
                positive(self.lr_adapter),
                "must be positive and finite",
            ),
            (
                "lr_prompt",
                positive(self.lr_prompt),
                "must be positive and finite",
            ),
            (
                "momentum",
                (0.0..1.0).contains(&self.momentum),
                "must lie in [0, 1)",
            ),
            (
                "num_categories",
                self.num_categories >= 2,
                "must be at least 2",
            ),
            ("d_in", self.d_in >= 2, "must be at least 2"),
            (
                "samples_per_domain",
                self.samples_per_domain >= self.num_categories,
                "must be at least num_categories",
            ),
            (
                "mean_radius",
                positive(self.mean_radius),
                "must be positive and finite",
            ),
            (
                "source_noise",
                non_negative(self.source_noise),
                "must be non-negative",
            ),
            ("gamma", non_negative(self.gamma), "must be non-negative"),
            (
                "shift_scale",
                non_negative(self.shift_scale),
                "must be non-negative",
            ),
            (
                "target_noise_scale",
                non_negative(self.target_noise_scale),
                "must be non-negative",
            ),
            ("d_hidden", self.d_hidden >= 1, "must be at least 1"),
            ("adapter_rank", self.adapter_rank >= 1, "must be at least 1"),
            (
                "pretrain_lr",
                positive(self.pretrain_lr),
                "must be positive and finite",
            ),
            (
                "pretrain_momentum",
                (0.0..1.0).contains(&self.pretrain_momentum),
                "must lie in [0, 1)",
            ),
            (
                "pretrain_batch_size",
                self.pretrain_batch_size >= 1,
                "must be at least 1",
            ),
            (
                "pretrain_target_accuracy",
                unit(self.pretrain_target_accuracy),
                "must lie in [0, 1]",
            ),
            (
                "pretrain_min_accuracy",
                unit(self.pretrain_min_accuracy),
                "must lie in [0, 1]",
            ),
            ("d_embed", self.d_embed >= 1, "must be at least 1"),
            (
                "temperature",
                positive(self.temperature),
                "must be positive and finite",
            ),
            (
                "zero_shot_band_low",
                unit(self.zero_shot_band_low),
                "must lie in [0, 1]",
            ),
            (
                "zero_shot_band_high",
                unit(self.zero_shot_band_high),
                "must lie in [0, 1]",
            ),
            (
                "zero_shot_band_high",
                self.zero_shot_band_low <= self.zero_shot_band_high,
                "must not be below zero_shot_band_low",
            ),
            (
                "max_anchor_noise",
                non_negative(self.max_anchor_noise),
                "must be non-negative",
            ),
            (
                "bisection_steps",
                self.bisection_steps >= 1,
                "must be at least 1",
            ),
            (
                "ablation_seeds",
                !self.ablation_seeds.is_empty(),
                "must list at least one seed",
            ),
        ];
        match checks.iter().find(|(_, ok, _)| !ok) {
            Some(&(key, _, msg)) => Err((key, msg.to_string())),
            None => Ok(()),
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            epochs: self.epochs,
            init_epochs: self.init_epochs,
            batch_size: self.batch_size,
            lr_adapter: self.lr_adapter,
            lr_prompt: self.lr_prompt,
            momentum: self.momentum,
            toggles: LossToggles::new(self.loss_weisz, self.loss_psc, self.loss_mi),
            seed: self.seed,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            domains: DomainConfig {
                num_categories: self.num_categories,
                d_in: self.d_in,
                samples_per_domain: self.samples_per_domain,
                mean_radius: self.mean_radius,
                source_noise: self.source_noise,
                gamma: self.gamma,
                shift_scale: self.shift_scale,
                target_noise_scale: self.target_noise_scale,
            },
            pretrain: PretrainConfig {
                d_hidden: self.d_hidden,
                adapter_rank: self.adapter_rank,
                max_epochs: self.pretrain_max_epochs,
                learning_rate: self.pretrain_lr,
                momentum: self.pretrain_momentum,
                batch_size: self.pretrain_batch_size,
                target_accuracy: self.pretrain_target_accuracy,
                min_accuracy: self.pretrain_min_accuracy,
            },
            prompt: PromptConfig {
                d_embed: self.d_embed,
                temperature: self.temperature,
                band_low: self.zero_shot_band_low,
                band_high: self.zero_shot_band_high,
                max_anchor_noise: self.max_anchor_noise,
                bisection_steps: self.bisection_steps,
            },
        }
    }

    /// First 16 hex digits of SHA-256 over the experiment parameters.
    ///
    /// File locations are left out so that the same experiment written to a
    /// different directory carries the same digest.
    pub fn digest(&self) -> String {
        let experiment = RunConfig {
            out_dir: PathBuf::new(),
            source_data: None,
            target_data: None,
            source_checkpoint: None,
            prompt_checkpoint: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&experiment).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn input(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_path(name))
    }

    pub fn source_data_path(&self) -> PathBuf {
        self.input(&self.source_data, crate::files::SOURCE_DATA)
    }

    pub fn target_data_path(&self) -> PathBuf {
        self.input(&self.target_data, crate::files::TARGET_DATA)
    }

    pub fn source_checkpoint_path(&self) -> PathBuf {
        self.input(&self.source_checkpoint, crate::files::SOURCE_CHECKPOINT)
    }

    pub fn prompt_checkpoint_path(&self) -> PathBuf {
        self.input(&self.prompt_checkpoint, crate::files::PROMPT_CHECKPOINT)
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    RunConfig::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
