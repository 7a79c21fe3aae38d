//! Dense vector math, probability functions, the momentum optimizer, the
//! project-wide random stream and the central-difference gradient oracle.
//!
//! Every reduction runs left to right in index order so results are
//! reproducible bit-for-bit across platforms.

use std::ops::Deref;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, invalid, ExclError, Result};

/// Lower clamp applied to every argument of a logarithm.
pub const EPS_LOG: f64 = 1e-12;
/// Norm below which a vector is treated as zero by [`cosine_similarity`].
pub const EPS_NORM: f64 = 1e-12;
/// Default probe step for [`finite_diff_gradient`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Matrix with entries drawn from N(0, scale^2), filled row by row.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_same_len("matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        ensure_same_len("matvec_t", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, &bj) in row.iter_mut().zip(b) {
                *w += scale * ai * bj;
            }
        }
    }
}

/// A probability distribution over categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    /// Wraps `values` after checking they form a distribution (sum within 1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("probability vector must be non-empty"));
        }
        if values
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(invalid("probability entries must lie in [0, 1]"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; ties resolve toward the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Unit vector along `a`; a zero vector stays zero.
pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n < EPS_NORM {
        return vec![0.0; a.len()];
    }
    a.iter().map(|x| x / n).collect()
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!(
            "softmax temperature must be > 0, got {temperature}"
        )));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(ExclError::NumericFault(format!(
            "non-finite logit {} at index {i}",
            logits[i]
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVec(exps.into_iter().map(|e| e / total).collect()))
}

/// Pulls a gradient w.r.t. softmax outputs (temperature 1) back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_probs);
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

pub(crate) fn clamped_ln(x: f64) -> f64 {
    x.max(EPS_LOG).ln()
}

/// Derivative of [`clamped_ln`]; zero inside the clamped region.
pub(crate) fn clamped_ln_grad(x: f64) -> f64 {
    if x > EPS_LOG {
        1.0 / x
    } else {
        0.0
    }
}

/// `-Σ p_i log q_i`, with `q` clamped at [`EPS_LOG`] and `0·log 0 = 0`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_same_len("cross_entropy", p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi != 0.0)
        .fold(0.0, |acc, (&pi, &qi)| acc - pi * clamped_ln(qi)))
}

/// `Σ p_i log(p_i / q_i)`, both arguments clamped at [`EPS_LOG`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure_same_len("kl_divergence", p.len(), q.len())?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi != 0.0)
        .fold(0.0, |acc, (&pi, &qi)| {
            acc + pi * (clamped_ln(pi) - clamped_ln(qi))
        }))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&pi| pi != 0.0)
        .fold(0.0, |acc, &pi| acc - pi * clamped_ln(pi))
}

/// Cosine of the angle between `a` and `b`; zero when either is (near) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_same_len("cosine_similarity", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na < EPS_NORM || nb < EPS_NORM {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_similarity(a, b)` with respect to `b`.
pub(crate) fn cosine_grad_wrt_second(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < EPS_NORM || nb < EPS_NORM {
        return vec![0.0; b.len()];
    }
    let cos = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| (ai / na - cos * bi / nb) / nb)
        .collect()
}

/// Heavy-ball SGD state for one flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    learning_rate: f64,
    momentum: f64,
}

impl OptimizerState {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(invalid(format!(
                "learning rate must be > 0, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            velocity: vec![0.0; len],
            learning_rate,
            momentum,
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// `v ← m·v + g; θ ← θ − lr·v`, applied in place.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
) -> Result<()> {
    ensure_same_len("sgd params/grads", params.len(), grads.len())?;
    ensure_same_len("sgd params/velocity", params.len(), state.velocity.len())?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(ExclError::NumericFault(format!(
            "non-finite gradient at parameter index {i}"
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = state.momentum * *v + g;
        *p -= state.learning_rate * *v;
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(ExclError::NumericFault(format!(
            "parameter index {i} became non-finite"
        )));
    }
    Ok(())
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(invalid(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(ExclError::NumericFault(format!(
                "non-finite probe value at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// The project's single random stream: ChaCha8 keyed by a 64-bit seed.
///
/// Integer ranges are sampled through `u64` and normals through the
/// ziggurat sampler so the stream does not depend on the target's word size.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named purpose, derived from a master seed.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct items of `pool` in random order (all of them when `k ≥ len`).
    pub fn sample_without_replacement<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        let mut items = pool.to_vec();
        let k = k.min(items.len());
        for i in 0..k {
            let j = i + self.below(items.len() - i);
            items.swap(i, j);
        }
        items.truncate(k);
        items
    }
}

/// SplitMix64 finalizer over `seed` and `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
