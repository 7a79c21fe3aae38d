//! Construction of the frozen embedding expert used as the zero-shot partner.
//!
//! Anchors are the projected target-law category means perturbed by Gaussian noise of
//! relative size `σ_t`. The noise draw is fixed per seed and `σ_t` is found
//! by bisection so that zero-shot accuracy on a calibration sample from the
//! target law lands inside a configured band.

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::generate::{DomainConfig, GeneratedDomains};
use super::streams;
use crate::error::{invalid, ExclError, Result};
use crate::experts::PromptExpert;
use crate::numerics::{normalize, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub d_embed: usize,
    pub temperature: f64,
    pub band_low: f64,
    pub band_high: f64,
    /// Upper end of the anchor-noise search interval.
    pub max_anchor_noise: f64,
    pub bisection_steps: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            d_embed: 16,
            temperature: crate::experts::DEFAULT_TEMPERATURE,
            band_low: 0.70,
            band_high: 0.85,
            max_anchor_noise: 8.0,
            bisection_steps: 60,
        }
    }
}

/// The built expert together with the calibration outcome.
#[derive(Debug, Clone)]
pub struct PromptBuild {
    pub expert: PromptExpert,
    pub anchor_noise: f64,
    pub calibration_accuracy: f64,
}

/// Zero-shot (unprompted) accuracy of `e` on `data`.
pub fn zero_shot_accuracy(e: &PromptExpert, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &l) in data.features().iter().zip(data.labels()) {
        if e.forward(x, false)?.argmax() == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn anchors_for(projected: &[Vec<f64>], noise: &[Vec<f64>], sigma: f64) -> Vec<Vec<f64>> {
    projected
        .iter()
        .zip(noise)
        .map(|(p, n)| {
            let noisy: Vec<f64> = p.iter().zip(n).map(|(a, b)| a + sigma * b).collect();
            normalize(&noisy)
        })
        .collect()
}

/// Expert with anchors perturbed at a fixed noise level (no calibration).
pub fn prompt_expert_with_noise(
    category_means: &[Vec<f64>],
    cfg: &PromptConfig,
    seed: u64,
    sigma: f64,
) -> Result<PromptExpert> {
    let parts = PromptParts::draw(category_means, cfg, seed)?;
    PromptExpert::new(
        parts.encoder.clone(),
        anchors_for(&parts.projected, &parts.noise, sigma),
        cfg.temperature,
    )
}

struct PromptParts {
    encoder: Matrix,
    projected: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

impl PromptParts {
    fn draw(means: &[Vec<f64>], cfg: &PromptConfig, seed: u64) -> Result<Self> {
        let d_in = means
            .first()
            .ok_or_else(|| invalid("no category means"))?
            .len();
        if cfg.d_embed == 0 {
            return Err(invalid("d_embed must be positive"));
        }
        let mut rng = Rng::derived(seed, streams::PROMPT);
        let encoder =
            Matrix::random_normal(cfg.d_embed, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
        let projected = means
            .iter()
            .map(|m| Ok(normalize(&encoder.matvec(m)?)))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / (cfg.d_embed as f64).sqrt();
        let noise = means
            .iter()
            .map(|_| (0..cfg.d_embed).map(|_| scale * rng.normal()).collect())
            .collect();
        Ok(Self {
            encoder,
            projected,
            noise,
        })
    }
}

/// Builds the prompt expert, calibrating anchor noise on fresh target-law draws.
pub fn build_prompt_expert(
    domains: &GeneratedDomains,
    domain_cfg: &DomainConfig,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<PromptBuild> {
    if !(0.0..=1.0).contains(&cfg.band_low) || cfg.band_low > cfg.band_high || cfg.band_high > 1.0 {
        return Err(invalid(format!(
            "zero-shot band [{}, {}] is not a valid accuracy interval",
            cfg.band_low, cfg.band_high
        )));
    }
    let parts = PromptParts::draw(&domains.target_means(), cfg, seed)?;
    let calibration = domains.draw_target(
        domain_cfg,
        domain_cfg.samples_per_domain,
        &mut Rng::derived(seed, streams::CALIBRATION),
    )?;
    let accuracy_at = |sigma: f64| -> Result<(PromptExpert, f64)> {
        let e = PromptExpert::new(
            parts.encoder.clone(),
            anchors_for(&parts.projected, &parts.noise, sigma),
            cfg.temperature,
        )?;
        let acc = zero_shot_accuracy(&e, &calibration)?;
        Ok((e, acc))
    };
    let in_band = |acc: f64| acc >= cfg.band_low && acc <= cfg.band_high;
    // Aim for the central half of the band so that sampling noise between the
    // calibration draw and any other target sample keeps accuracy in band.
    let goal = 0.5 * (cfg.band_low + cfg.band_high);
    let slack = 0.25 * (cfg.band_high - cfg.band_low);
    let centered = |acc: f64| (acc - goal).abs() <= slack;

    let (clean, clean_acc) = accuracy_at(0.0)?;
    if clean_acc < cfg.band_low {
        return Err(ExclError::BenchmarkConstruction(format!(
            "noise-free anchors only reach {clean_acc:.3} zero-shot accuracy (band starts at {})",
            cfg.band_low
        )));
    }
    // Noise only lowers accuracy, so a clean expert below the window is kept.
    if clean_acc <= goal + slack {
        return Ok(PromptBuild {
            expert: clean,
            anchor_noise: 0.0,
            calibration_accuracy: clean_acc,
        });
    }
    let (mut lo, mut hi) = (0.0, cfg.max_anchor_noise);
    for _ in 0..cfg.bisection_steps {
        let mid = 0.5 * (lo + hi);
        let (e, acc) = accuracy_at(mid)?;
        if centered(acc) {
            return Ok(PromptBuild {
                expert: e,
                anchor_noise: mid,
                calibration_accuracy: acc,
            });
        }
        if acc > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // settle for any in-band point on the final bracket
    for sigma in [lo, hi] {
        let (e, acc) = accuracy_at(sigma)?;
        if in_band(acc) {
            return Ok(PromptBuild {
                expert: e,
                anchor_noise: sigma,
                calibration_accuracy: acc,
            });
        }
    }
    Err(ExclError::BenchmarkConstruction(format!(
        "no anchor noise in [0, {}] puts zero-shot accuracy inside [{}, {}]",
        cfg.max_anchor_noise, cfg.band_low, cfg.band_high
    )))
}
