use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BenchConfig, Benchmark, Metrics};
use crate::error::{invalid, Result};
use crate::losses::LossToggles;
use crate::rain::{run_adaptation, AdaptConfig};

/// The seven loss configurations, from no adaptation loss to the full objective.
pub const ABLATION_ROWS: [(&str, LossToggles); 7] = [
    ("none", LossToggles::new(false, false, false)),
    ("mi", LossToggles::new(false, false, true)),
    ("psc", LossToggles::new(false, true, false)),
    ("weisz", LossToggles::new(true, false, false)),
    ("psc+mi", LossToggles::new(false, true, true)),
    ("weisz+mi", LossToggles::new(true, false, true)),
    ("all", LossToggles::new(true, true, true)),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: LossToggles,
    /// `(seed, final metrics)` in the order the seeds were given.
    pub per_seed: Vec<(u64, Metrics)>,
    pub mean_consensus: f64,
    /// Sample standard deviation of consensus accuracy (0 for a single seed).
    pub std_consensus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every toggle row on every seed.
///
/// Each seed builds its own benchmark and adapts a fresh copy of the experts
/// per row, with `adapt.seed` replaced by the benchmark seed. Seeds run in
/// parallel; results are merged in seed order so the table is deterministic.
pub fn run_ablation(
    bench: &BenchConfig,
    adapt: &AdaptConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(invalid("ablation needs at least one seed"));
    }
    let per_seed: Vec<Vec<Metrics>> = seeds
        .par_iter()
        .map(|&seed| {
            let b = Benchmark::build(bench, seed)?;
            ABLATION_ROWS
                .iter()
                .map(|&(_, toggles)| {
                    let mut source = b.source_expert.clone();
                    let mut prompt = b.prompt_expert().clone();
                    let cfg = AdaptConfig {
                        toggles,
                        seed,
                        ..adapt.clone()
                    };
                    Ok(
                        run_adaptation(&mut source, &mut prompt, &b.domains.target, &cfg)?
                            .final_metrics,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(r, &(name, toggles))| {
            let metrics: Vec<(u64, Metrics)> = seeds
                .iter()
                .zip(&per_seed)
                .map(|(&s, m)| (s, m[r].clone()))
                .collect();
            let acc: Vec<f64> = metrics.iter().map(|(_, m)| m.acc_consensus).collect();
            let (mean_consensus, std_consensus) = mean_std(&acc);
            AblationRow {
                name: name.to_string(),
                toggles,
                per_seed: metrics,
                mean_consensus,
                std_consensus,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
