use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{ensure_same_len, Result};
use crate::experts::{PromptExpert, SourceExpert};
use crate::numerics::{argmax, ProbVec};

/// Classification accuracies of each expert and of their consensus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_source_expert: f64,
    pub acc_prompt_expert: f64,
    pub acc_consensus: f64,
    /// Consensus accuracy per category; `None` when the category has no samples.
    pub per_category_acc: Vec<Option<f64>>,
}

/// Argmax of the averaged distributions (ties toward the lower category).
pub fn consensus_prediction(os: &[f64], ov: &[f64]) -> usize {
    let avg: Vec<f64> = os.iter().zip(ov).map(|(a, b)| 0.5 * (a + b)).collect();
    argmax(&avg)
}

pub fn metrics_from_outputs(
    os: &[ProbVec],
    ov: &[ProbVec],
    labels: &[usize],
    categories: usize,
) -> Result<Metrics> {
    ensure_same_len("metrics source outputs", os.len(), labels.len())?;
    ensure_same_len("metrics prompt outputs", ov.len(), labels.len())?;
    let (mut src, mut vlm, mut cons) = (0usize, 0usize, 0usize);
    let mut bucket_total = vec![0usize; categories];
    let mut bucket_hit = vec![0usize; categories];
    for ((s, v), &l) in os.iter().zip(ov).zip(labels) {
        src += usize::from(s.argmax() == l);
        vlm += usize::from(v.argmax() == l);
        let hit = consensus_prediction(s, v) == l;
        cons += usize::from(hit);
        bucket_total[l] += 1;
        bucket_hit[l] += usize::from(hit);
    }
    let n = labels.len().max(1) as f64;
    Ok(Metrics {
        acc_source_expert: src as f64 / n,
        acc_prompt_expert: vlm as f64 / n,
        acc_consensus: cons as f64 / n,
        per_category_acc: bucket_total
            .iter()
            .zip(&bucket_hit)
            .map(|(&t, &h)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    })
}

/// Accuracies of the adapted source expert, the prompted embedding expert
/// and their consensus on a labeled dataset.
pub fn evaluate(
    source: &SourceExpert,
    prompt: &PromptExpert,
    dataset: &Dataset,
) -> Result<Metrics> {
    let mut os = Vec::with_capacity(dataset.len());
    let mut ov = Vec::with_capacity(dataset.len());
    for x in dataset.features() {
        os.push(source.forward(x, true)?.1);
        ov.push(prompt.forward(x, true)?);
    }
    metrics_from_outputs(&os, &ov, dataset.labels(), dataset.categories())
}
