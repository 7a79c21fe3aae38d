//! On-disk formats: checkpoints, JSON documents and CSV tables.
//!
//! Every document carries the seed and the config digest. JSON reals use the
//! shortest representation that parses back to the same bits; CSV reals use
//! 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use excl_core::bench::{format_real, AblationTable, Dataset, Metrics};
use excl_core::experts::{ParamBlock, PromptExpert, SourceExpert};
use excl_core::rain::{EpochRow, RunReport};

use crate::config::RunConfig;

/// Column order of the per-epoch CSV.
pub const EPOCH_COLUMNS: [&str; 11] = [
    "epoch",
    "n_pseudo",
    "n_complex",
    "loss_weisz",
    "loss_psc",
    "loss_mi_adapter_side",
    "loss_mi_prompt_side",
    "loss_ce_warmup",
    "acc_source_expert",
    "acc_prompt_expert",
    "acc_consensus",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Source,
    Prompt,
}

/// Parameter blocks of one expert plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_digest: String,
    pub expert: ExpertKind,
    pub blocks: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn source(cfg: &RunConfig, e: &SourceExpert) -> Self {
        Self {
            seed: cfg.seed,
            config_digest: cfg.digest(),
            expert: ExpertKind::Source,
            blocks: e.to_blocks(),
        }
    }

    pub fn prompt(cfg: &RunConfig, e: &PromptExpert) -> Self {
        Self {
            seed: cfg.seed,
            config_digest: cfg.digest(),
            expert: ExpertKind::Prompt,
            blocks: e.to_blocks(),
        }
    }

    fn expect(&self, kind: ExpertKind, path: &Path) -> Result<()> {
        if self.expert != kind {
            bail!(
                "{} holds a {:?} expert, expected {:?}",
                path.display(),
                self.expert,
                kind
            );
        }
        Ok(())
    }
}

/// Output of `generate` that is not a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub seed: u64,
    pub config_digest: String,
    pub anchor_noise: f64,
    pub calibration_accuracy: f64,
    pub files: Vec<String>,
}

/// Structured adaptation report with the full config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptDocument {
    pub seed: u64,
    pub config_digest: String,
    pub config: RunConfig,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub seed: u64,
    pub config_digest: String,
    pub source_checkpoint: String,
    pub prompt_checkpoint: String,
    pub metrics: Metrics,
}

fn read_prerequisite(path: &Path, what: &str) -> Result<String> {
    if !path.exists() {
        bail!("missing {what}: expected file at {}", path.display());
    }
    fs::read_to_string(path).with_context(|| format!("cannot read {what} at {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = read_prerequisite(path, what)?;
    serde_json::from_str(&text).with_context(|| format!("malformed {what} at {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_dataset(path: &Path, what: &str) -> Result<Dataset> {
    let text = read_prerequisite(path, what)?;
    Dataset::from_text(&text).with_context(|| format!("malformed {what} at {}", path.display()))
}

pub fn read_source_expert(path: &Path) -> Result<(Checkpoint, SourceExpert)> {
    let ckpt: Checkpoint = read_json(path, "source expert checkpoint")?;
    ckpt.expect(ExpertKind::Source, path)?;
    let e = SourceExpert::from_blocks(&ckpt.blocks)
        .with_context(|| format!("invalid source checkpoint {}", path.display()))?;
    Ok((ckpt, e))
}

pub fn read_prompt_expert(path: &Path) -> Result<(Checkpoint, PromptExpert)> {
    let ckpt: Checkpoint = read_json(path, "prompt expert checkpoint")?;
    ckpt.expect(ExpertKind::Prompt, path)?;
    let e = PromptExpert::from_blocks(&ckpt.blocks)
        .with_context(|| format!("invalid prompt checkpoint {}", path.display()))?;
    Ok((ckpt, e))
}

fn provenance_line(out: &mut String, seed_field: &str, digest: &str) {
    writeln!(out, "# {seed_field} config_digest={digest}").unwrap();
}

fn epoch_line(r: &EpochRow) -> String {
    let reals = [
        r.loss_weisz,
        r.loss_psc,
        r.loss_mi_adapter_side,
        r.loss_mi_prompt_side,
        r.loss_ce_warmup,
        r.acc_source_expert,
        r.acc_prompt_expert,
        r.acc_consensus,
    ];
    let mut line = format!("{},{},{}", r.epoch, r.n_pseudo, r.n_complex);
    for v in reals {
        line.push(',');
        line.push_str(&format_real(v));
    }
    line
}

pub fn epochs_csv(seed: u64, digest: &str, rows: &[EpochRow]) -> String {
    let mut out = String::new();
    provenance_line(&mut out, &format!("seed={seed}"), digest);
    out.push_str(&EPOCH_COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&epoch_line(r));
        out.push('\n');
    }
    out
}

/// One line per ablation row; per-seed consensus accuracies follow the summary columns.
pub fn ablation_csv(seeds: &[u64], digest: &str, table: &AblationTable) -> String {
    let mut out = String::new();
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    provenance_line(&mut out, &format!("seeds={}", seed_list.join(";")), digest);
    out.push_str("row,loss_weisz,loss_psc,loss_mi,mean_consensus,std_consensus");
    for s in seeds {
        write!(out, ",consensus_seed_{s}").unwrap();
    }
    out.push('\n');
    for row in &table.rows {
        let t = row.toggles;
        write!(
            out,
            "{},{},{},{},{},{}",
            row.name,
            t.weisz,
            t.psc,
            t.mi,
            format_real(row.mean_consensus),
            format_real(row.std_consensus)
        )
        .unwrap();
        for (_, m) in &row.per_seed {
            write!(out, ",{}", format_real(m.acc_consensus)).unwrap();
        }
        out.push('\n');
    }
    out
}
