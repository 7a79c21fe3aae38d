#![allow(dead_code)]

use excl_core::experts::{ParamView, PromptExpert, SourceExpert};
use excl_core::numerics::{softmax, Matrix, ProbVec, Rng};

/// Source expert with random frozen blocks and a random (non-zero) adapter.
pub fn random_source(
    rng: &mut Rng,
    d_in: usize,
    hidden: usize,
    c: usize,
    rank: usize,
) -> SourceExpert {
    let w1 = Matrix::random_normal(hidden, d_in, 1.0 / (d_in as f64).sqrt(), rng);
    let b1 = (0..hidden).map(|_| 0.1 * rng.normal()).collect();
    let w2 = Matrix::random_normal(c, hidden, 1.5 / (hidden as f64).sqrt(), rng);
    let b2 = (0..c).map(|_| 0.1 * rng.normal()).collect();
    let mut e = SourceExpert::new(w1, b1, w2, b2, rank, rng).unwrap();
    let adapter = (0..e.num_trainable()).map(|_| 0.3 * rng.normal()).collect();
    e.write_params(&ParamView(adapter)).unwrap();
    e
}

/// Prompt expert with random encoder and anchors and a random prompt.
pub fn random_prompt(
    rng: &mut Rng,
    d_in: usize,
    d_embed: usize,
    c: usize,
    temperature: f64,
) -> PromptExpert {
    let encoder = Matrix::random_normal(d_embed, d_in, 1.0 / (d_in as f64).sqrt(), rng);
    let anchors = (0..c)
        .map(|_| (0..d_embed).map(|_| rng.normal()).collect())
        .collect();
    let mut e = PromptExpert::new(encoder, anchors, temperature).unwrap();
    let psi = (0..d_embed).map(|_| 0.2 * rng.normal()).collect();
    e.write_params(&ParamView(psi)).unwrap();
    e
}

pub fn random_inputs(rng: &mut Rng, n: usize, d_in: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d_in).map(|_| 2.0 * rng.normal()).collect())
        .collect()
}

pub fn random_probvec(rng: &mut Rng, c: usize) -> ProbVec {
    let logits: Vec<f64> = (0..c).map(|_| 1.5 * rng.normal()).collect();
    softmax(&logits, 1.0).unwrap()
}

pub fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(|r| r.as_slice()).collect()
}

/// Largest relative error `|a − n| / |a|` over coordinates with `|a| > floor`.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, _)| a.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs())
        .fold(0.0, f64::max)
}
