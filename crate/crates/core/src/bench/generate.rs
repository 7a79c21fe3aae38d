//! Synthetic two-domain benchmark: Gaussian category clouds on a sphere for
//! the source domain, and the same law pushed through a linear mix, an
//! offset and extra noise for the target domain.

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Domain};
use super::streams;
use crate::error::{invalid, Result};
use crate::numerics::{normalize, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub num_categories: usize,
    pub d_in: usize,
    pub samples_per_domain: usize,
    /// Radius of the sphere the category means are drawn on.
    pub mean_radius: f64,
    pub source_noise: f64,
    /// Strength of the random linear mix `I + γ·G/√d_in`.
    pub gamma: f64,
    /// Norm of the target offset per unit of `gamma`.
    pub shift_scale: f64,
    /// Extra isotropic target noise per unit of `gamma`.
    pub target_noise_scale: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            num_categories: 6,
            d_in: 16,
            samples_per_domain: 1200,
            mean_radius: 4.0,
            source_noise: 0.5,
            gamma: 0.6,
            shift_scale: 9.0,
            target_noise_scale: 5.0 / 3.0,
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(invalid("need at least 2 categories"));
        }
        if self.d_in < 2 {
            return Err(invalid("need at least 2 input dimensions"));
        }
        if self.samples_per_domain < self.num_categories {
            return Err(invalid(format!(
                "samples_per_domain ({}) must be at least the category count ({})",
                self.samples_per_domain, self.num_categories
            )));
        }
        for (name, v) in [
            ("mean_radius", self.mean_radius),
            ("source_noise", self.source_noise),
            ("gamma", self.gamma),
            ("shift_scale", self.shift_scale),
            ("target_noise_scale", self.target_noise_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Affine map plus noise taking source-law draws to the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub mix_matrix: Matrix,
    pub shift: Vec<f64>,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub fn sample(cfg: &DomainConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_in;
        let mut mix = Matrix::identity(d);
        let scale = cfg.gamma / (d as f64).sqrt();
        for i in 0..d {
            for j in 0..d {
                let g = rng.normal();
                mix.set(i, j, mix.get(i, j) + scale * g);
            }
        }
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let shift = normalize(&dir)
            .iter()
            .map(|v| v * cfg.gamma * cfg.shift_scale)
            .collect();
        Self {
            mix_matrix: mix,
            shift,
            gamma: cfg.gamma,
            noise_sigma: cfg.gamma * cfg.target_noise_scale,
        }
    }

    pub fn apply(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mixed = self.mix_matrix.matvec(x).expect("shift matches d_in");
        mixed
            .iter()
            .zip(&self.shift)
            .map(|(m, b)| {
                let noise = if self.noise_sigma > 0.0 {
                    self.noise_sigma * rng.normal()
                } else {
                    0.0
                };
                m + b + noise
            })
            .collect()
    }
}

/// Both domains plus the generating law (a side channel for building the
/// prompt expert; never handed to the adaptation path).
#[derive(Debug, Clone)]
pub struct GeneratedDomains {
    pub source: Dataset,
    pub target: Dataset,
    pub category_means: Vec<Vec<f64>>,
    pub shift: DomainShift,
}

impl GeneratedDomains {
    /// Noise-free images of the category means under the target shift.
    pub fn target_means(&self) -> Vec<Vec<f64>> {
        self.category_means
            .iter()
            .map(|m| {
                let mixed = self.shift.mix_matrix.matvec(m).expect("means match d_in");
                mixed
                    .iter()
                    .zip(&self.shift.shift)
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect()
    }

    /// Fresh labeled draws from the target law, independent of `self.target`.
    pub fn draw_target(&self, cfg: &DomainConfig, count: usize, rng: &mut Rng) -> Result<Dataset> {
        draw_domain(cfg, &self.category_means, Some(&self.shift), count, rng)
    }
}

fn draw_domain(
    cfg: &DomainConfig,
    means: &[Vec<f64>],
    shift: Option<&DomainShift>,
    count: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let c = means.len();
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % c;
        let x: Vec<f64> = means[label]
            .iter()
            .map(|m| m + cfg.source_noise * rng.normal())
            .collect();
        features.push(match shift {
            Some(s) => s.apply(&x, rng),
            None => x,
        });
        labels.push(label);
    }
    let domain = if shift.is_some() {
        Domain::Target
    } else {
        Domain::Source
    };
    Dataset::new(cfg.d_in, c, domain, features, labels)
}

pub fn generate_domains(cfg: &DomainConfig, seed: u64) -> Result<GeneratedDomains> {
    cfg.validate()?;
    let mut mean_rng = Rng::derived(seed, streams::MEANS);
    let category_means: Vec<Vec<f64>> = (0..cfg.num_categories)
        .map(|_| {
            let dir: Vec<f64> = (0..cfg.d_in).map(|_| mean_rng.normal()).collect();
            normalize(&dir)
                .iter()
                .map(|v| v * cfg.mean_radius)
                .collect()
        })
        .collect();
    let shift = DomainShift::sample(cfg, &mut Rng::derived(seed, streams::SHIFT));
    let source = draw_domain(
        cfg,
        &category_means,
        None,
        cfg.samples_per_domain,
        &mut Rng::derived(seed, streams::SOURCE_SAMPLES),
    )?;
    let target = draw_domain(
        cfg,
        &category_means,
        Some(&shift),
        cfg.samples_per_domain,
        &mut Rng::derived(seed, streams::TARGET_SAMPLES),
    )?;
    Ok(GeneratedDomains {
        source,
        target,
        category_means,
        shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_domains() {
        let cfg = DomainConfig {
            samples_per_domain: 60,
            ..Default::default()
        };
        let a = generate_domains(&cfg, 9).unwrap();
        let b = generate_domains(&cfg, 9).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        let c = generate_domains(&cfg, 10).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn zero_shift_gives_identical_laws() {
        let cfg = DomainConfig {
            samples_per_domain: 30,
            gamma: 0.0,
            shift_scale: 0.0,
            target_noise_scale: 0.0,
            ..Default::default()
        };
        let g = generate_domains(&cfg, 4).unwrap();
        assert_eq!(g.shift.mix_matrix, Matrix::identity(cfg.d_in));
        let mut rng = Rng::new(1);
        let x = vec![0.5; cfg.d_in];
        assert_eq!(g.shift.apply(&x, &mut rng), x);
        // Same draws through the identity map reproduce the source sample law.
        let mut r1 = Rng::new(77);
        let mut r2 = Rng::new(77);
        let s = draw_domain(&cfg, &g.category_means, None, 12, &mut r1).unwrap();
        let t = draw_domain(&cfg, &g.category_means, Some(&g.shift), 12, &mut r2).unwrap();
        assert_eq!(s.features(), t.features());
    }

    #[test]
    fn balanced_categories_and_domain_tags() {
        let cfg = DomainConfig {
            samples_per_domain: 36,
            ..Default::default()
        };
        let g = generate_domains(&cfg, 1).unwrap();
        assert_eq!(g.source.domain(), Domain::Source);
        assert_eq!(g.target.domain(), Domain::Target);
        for c in 0..6 {
            assert_eq!(g.target.labels().iter().filter(|&&l| l == c).count(), 6);
        }
        for m in &g.category_means {
            let r: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            DomainConfig {
                num_categories: 1,
                ..Default::default()
            },
            DomainConfig {
                d_in: 1,
                ..Default::default()
            },
            DomainConfig {
                samples_per_domain: 3,
                ..Default::default()
            },
            DomainConfig {
                gamma: -0.1,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(generate_domains(&cfg, 0).is_err());
        }
    }
}
