//! Supervised training of the source expert's backbone and head.

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::streams;
use crate::error::{invalid, ExclError, Result};
use crate::experts::SourceExpert;
use crate::numerics::{argmax, sgd_momentum_step, softmax, Matrix, OptimizerState, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub d_hidden: usize,
    pub adapter_rank: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Training stops once source accuracy reaches this value.
    pub target_accuracy: f64,
    /// Below this final accuracy the benchmark is rejected as too hard.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            d_hidden: 32,
            adapter_rank: crate::experts::DEFAULT_ADAPTER_RANK,
            max_epochs: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            target_accuracy: 0.99,
            min_accuracy: 0.90,
        }
    }
}

struct Mlp {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl Mlp {
    fn sizes(&self) -> [usize; 4] {
        [
            self.w1.as_slice().len(),
            self.b1.len(),
            self.w2.as_slice().len(),
            self.b2.len(),
        ]
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.as_slice().to_vec();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }

    fn load(&mut self, flat: &[f64]) {
        let [a, b, c, _] = self.sizes();
        self.w1.as_mut_slice().copy_from_slice(&flat[..a]);
        self.b1.copy_from_slice(&flat[a..a + b]);
        self.w2
            .as_mut_slice()
            .copy_from_slice(&flat[a + b..a + b + c]);
        self.b2.copy_from_slice(&flat[a + b + c..]);
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.w1.matvec(x).expect("input width checked");
        for (v, b) in h.iter_mut().zip(&self.b1) {
            *v = (*v + b).tanh();
        }
        h
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut l = self.w2.matvec(h).expect("hidden width");
        for (v, b) in l.iter_mut().zip(&self.b2) {
            *v += b;
        }
        l
    }

    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(&self.hidden(x)))
    }

    fn accuracy(&self, data: &Dataset) -> f64 {
        let correct = data
            .features()
            .iter()
            .zip(data.labels())
            .filter(|(x, &l)| self.predict(x) == l)
            .count();
        correct as f64 / data.len() as f64
    }

    /// Mean cross-entropy gradient over `batch`, laid out like `flat()`.
    fn gradient(&self, data: &Dataset, batch: &[usize]) -> Result<Vec<f64>> {
        let [a, b, c, _] = self.sizes();
        let mut g = vec![0.0; self.flat().len()];
        let scale = 1.0 / batch.len() as f64;
        let d_in = self.w1.cols();
        let d_hidden = self.w1.rows();
        for &i in batch {
            let x = &data.features()[i];
            let h = self.hidden(x);
            let p = softmax(&self.logits(&h), 1.0)?;
            let mut gl = p.to_vec();
            gl[data.labels()[i]] -= 1.0;
            let gh = self.w2.matvec_t(&gl)?;
            for (k, &glk) in gl.iter().enumerate() {
                for (j, &hj) in h.iter().enumerate() {
                    g[a + b + k * d_hidden + j] += scale * glk * hj;
                }
                g[a + b + c + k] += scale * glk;
            }
            for j in 0..d_hidden {
                let gz = gh[j] * (1.0 - h[j] * h[j]);
                for (m, &xm) in x.iter().enumerate() {
                    g[j * d_in + m] += scale * gz * xm;
                }
                g[a + j] += scale * gz;
            }
        }
        Ok(g)
    }
}

/// Trains backbone and head on labeled source data, then attaches a fresh adapter.
pub fn pretrain_source(source: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<SourceExpert> {
    if source.is_empty() {
        return Err(invalid("cannot pretrain on an empty dataset"));
    }
    if cfg.batch_size == 0 || cfg.d_hidden == 0 {
        return Err(invalid("batch_size and d_hidden must be positive"));
    }
    let mut rng = Rng::derived(seed, streams::PRETRAIN);
    let (d_in, c, h) = (source.d_in(), source.categories(), cfg.d_hidden);
    let mut mlp = Mlp {
        w1: Matrix::random_normal(h, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng),
        b1: vec![0.0; h],
        w2: Matrix::random_normal(c, h, 1.0 / (h as f64).sqrt(), &mut rng),
        b2: vec![0.0; c],
    };
    let mut params = mlp.flat();
    let mut opt = OptimizerState::new(params.len(), cfg.learning_rate, cfg.momentum)?;
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut accuracy = mlp.accuracy(source);
    for _ in 0..cfg.max_epochs {
        if accuracy >= cfg.target_accuracy {
            break;
        }
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let g = mlp.gradient(source, batch)?;
            sgd_momentum_step(&mut params, &g, &mut opt)?;
            mlp.load(&params);
        }
        accuracy = mlp.accuracy(source);
    }
    if accuracy < cfg.min_accuracy {
        return Err(ExclError::BenchmarkConstruction(format!(
            "source pretraining reached only {accuracy:.3} accuracy (need {})",
            cfg.min_accuracy
        )));
    }
    let mut adapter_rng = Rng::derived(seed, streams::ADAPTER_INIT);
    SourceExpert::new(
        mlp.w1,
        mlp.b1,
        mlp.w2,
        mlp.b2,
        cfg.adapter_rank,
        &mut adapter_rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::dataset::Domain;

    fn separable_toy() -> Dataset {
        let mut rng = Rng::new(3);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let label = i % 2;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            features.push(vec![sign * (1.0 + rng.uniform()), rng.normal()]);
            labels.push(label);
        }
        Dataset::new(2, 2, Domain::Source, features, labels).unwrap()
    }

    #[test]
    fn separable_toy_reaches_target_accuracy() {
        let data = separable_toy();
        let cfg = PretrainConfig {
            d_hidden: 8,
            adapter_rank: 2,
            ..Default::default()
        };
        let e = pretrain_source(&data, &cfg, 1).unwrap();
        let correct = data
            .features()
            .iter()
            .zip(data.labels())
            .filter(|(x, &l)| e.forward(x, true).unwrap().1.argmax() == l)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
        // fresh adapter is a no-op
        assert!(e.adapter_up().as_slice().iter().all(|&v| v == 0.0));
        let x = &data.features()[0];
        assert_eq!(e.forward(x, true).unwrap(), e.forward(x, false).unwrap());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let data = separable_toy();
        let cfg = PretrainConfig {
            d_hidden: 8,
            adapter_rank: 2,
            ..Default::default()
        };
        let a = pretrain_source(&data, &cfg, 5).unwrap();
        let b = pretrain_source(&data, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_labels_fail_construction() {
        let mut rng = Rng::new(4);
        let features: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let labels: Vec<usize> = (0..100).map(|_| rng.below(2)).collect();
        // identical inputs with conflicting labels cap accuracy at 50%
        let mut dup_f = features.clone();
        dup_f.extend(features.iter().cloned());
        let mut dup_l = labels.clone();
        dup_l.extend(labels.iter().map(|l| 1 - l));
        let data = Dataset::new(2, 2, Domain::Source, dup_f, dup_l).unwrap();
        let cfg = PretrainConfig {
            d_hidden: 4,
            adapter_rank: 1,
            max_epochs: 5,
            ..Default::default()
        };
        assert!(matches!(
            pretrain_source(&data, &cfg, 0),
            Err(ExclError::BenchmarkConstruction(_))
        ));
    }
}
