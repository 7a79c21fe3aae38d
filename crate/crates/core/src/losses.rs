//! Adaptation objectives and their analytic gradients.
//!
//! Each expert's objective treats the partner expert's cached outputs as
//! constants, so gradients only ever flow into the owning expert's
//! trainable block.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, invalid, Result};
use crate::experts::{PromptExpert, SourceExpert};
use crate::geometry::CenterBank;
use crate::numerics::{
    clamped_ln, clamped_ln_grad, cosine_grad_wrt_second, cosine_similarity, cross_entropy,
    kl_divergence, softmax_backward, ProbVec, EPS_LOG,
};

/// How per-sample terms are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Which loss families are active; mirrors the rows of a loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub weisz: bool,
    pub psc: bool,
    pub mi: bool,
}

impl LossToggles {
    pub const fn new(weisz: bool, psc: bool, mi: bool) -> Self {
        Self { weisz, psc, mi }
    }

    pub const ALL: Self = Self {
        weisz: true,
        psc: true,
        mi: true,
    };
    pub const NONE: Self = Self {
        weisz: false,
        psc: false,
        mi: false,
    };

    pub fn any(&self) -> bool {
        self.weisz || self.psc || self.mi
    }
}

impl Default for LossToggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// Named sub-losses; inactive terms stay at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub weisz_cosine: f64,
    pub ce: f64,
    pub psc: f64,
    pub mi: f64,
}

impl LossComponents {
    pub fn sum(&self) -> f64 {
        self.weisz_cosine + self.ce + self.psc + self.mi
    }
}

/// Objective value, its parts, and the gradient over the owner's `ParamView`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: LossComponents,
    pub grad: Vec<f64>,
}

impl LossReport {
    fn new(components: LossComponents, grad: Vec<f64>) -> Self {
        Self {
            total: components.sum(),
            components,
            grad,
        }
    }
}

/// `Σ_n CE(ps[n], pv[n])`, the sum convention used during warm-up.
pub fn consensus_ce_loss(ps_outputs: &[ProbVec], pv_outputs: &[ProbVec]) -> Result<f64> {
    ensure_same_len(
        "consensus_ce_loss batch",
        ps_outputs.len(),
        pv_outputs.len(),
    )?;
    ps_outputs
        .iter()
        .zip(pv_outputs)
        .try_fold(0.0, |acc, (p, q)| Ok(acc + cross_entropy(p, q)?))
}

/// Batch joint distribution of the two experts' predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    categories: usize,
    table: Vec<f64>,
    row_marginals: Vec<f64>,
    col_marginals: Vec<f64>,
}

impl JointDist {
    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.table[i * self.categories + j]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row_marginals(&self) -> &[f64] {
        &self.row_marginals
    }

    pub fn col_marginals(&self) -> &[f64] {
        &self.col_marginals
    }

    pub fn transpose(&self) -> Self {
        let c = self.categories;
        let mut table = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                table[j * c + i] = self.table[i * c + j];
            }
        }
        Self {
            categories: c,
            table,
            row_marginals: self.col_marginals.clone(),
            col_marginals: self.row_marginals.clone(),
        }
    }
}

/// `O_ij = (1/N) Σ_n os[n]_i · ov[n]_j` with row and column marginals.
pub fn joint_distribution(os_batch: &[ProbVec], ov_batch: &[ProbVec]) -> Result<JointDist> {
    ensure_same_len("joint_distribution batch", os_batch.len(), ov_batch.len())?;
    let first = os_batch
        .first()
        .ok_or_else(|| invalid("joint distribution of an empty batch"))?;
    let c = first.len();
    let mut table = vec![0.0; c * c];
    for (s, v) in os_batch.iter().zip(ov_batch) {
        ensure_same_len("joint_distribution source width", s.len(), c)?;
        ensure_same_len("joint_distribution partner width", v.len(), c)?;
        for (i, &si) in s.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                table[i * c + j] += si * vj;
            }
        }
    }
    let n = os_batch.len() as f64;
    table.iter_mut().for_each(|o| *o /= n);
    let row_marginals = (0..c)
        .map(|i| table[i * c..(i + 1) * c].iter().sum())
        .collect();
    let col_marginals = (0..c)
        .map(|j| (0..c).fold(0.0, |acc, i| acc + table[i * c + j]))
        .collect();
    Ok(JointDist {
        categories: c,
        table,
        row_marginals,
        col_marginals,
    })
}

/// Negative mutual information of the joint table (never above zero).
pub fn mutual_information_loss(j: &JointDist) -> f64 {
    let c = j.categories;
    let mut mi = 0.0;
    for a in 0..c {
        for b in 0..c {
            let o = j.table[a * c + b];
            if o == 0.0 {
                continue;
            }
            mi += o
                * (clamped_ln(o) - clamped_ln(j.row_marginals[a]) - clamped_ln(j.col_marginals[b]));
        }
    }
    -mi
}

/// `∂L_mi/∂O_ij`, with the marginals' dependence on the table included.
fn mutual_information_table_grad(j: &JointDist) -> Vec<f64> {
    let c = j.categories;
    let live = |x: f64| if x > EPS_LOG { 1.0 } else { 0.0 };
    let mut grad = vec![0.0; c * c];
    for a in 0..c {
        let r = j.row_marginals[a];
        for b in 0..c {
            let o = j.table[a * c + b];
            let col = j.col_marginals[b];
            grad[a * c + b] =
                -(clamped_ln(o) - clamped_ln(r) - clamped_ln(col)) - live(o) + live(r) + live(col);
        }
    }
    grad
}

/// Outcome of the style loss over a set of complex samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeiszfeldLoss {
    /// Mean cosine distance plus the supplied cross-entropy term.
    pub value: f64,
    /// Mean of `1 − cos(center, feature)` over samples with a center.
    pub cosine_term: f64,
    pub used: usize,
    /// Samples whose assigned category has no center.
    pub skipped: usize,
}

impl WeiszfeldLoss {
    pub fn skipped_all(&self) -> bool {
        self.used == 0
    }
}

/// Mean cosine distance of complex features to their category centers, plus `ce_term`.
pub fn weiszfeld_style_loss<F: AsRef<[f64]>>(
    centers: &CenterBank,
    complex_features: &[F],
    complex_categories: &[usize],
    ce_term: f64,
) -> Result<WeiszfeldLoss> {
    ensure_same_len(
        "weiszfeld_style_loss batch",
        complex_features.len(),
        complex_categories.len(),
    )?;
    let mut total = 0.0;
    let mut used = 0;
    for (f, &c) in complex_features.iter().zip(complex_categories) {
        let Some(center) = centers.get(c) else {
            continue;
        };
        total += 1.0 - cosine_similarity(center, f.as_ref())?;
        used += 1;
    }
    let cosine_term = if used == 0 { 0.0 } else { total / used as f64 };
    Ok(WeiszfeldLoss {
        value: cosine_term + ce_term,
        cosine_term,
        used,
        skipped: complex_features.len() - used,
    })
}

/// Mean `KL(P_v(x) ‖ P_v(x; prompt))` over `complex_inputs`.
pub fn prompt_consistency_loss<X: AsRef<[f64]>>(
    e: &PromptExpert,
    complex_inputs: &[X],
) -> Result<f64> {
    if complex_inputs.is_empty() {
        return Err(invalid("prompt consistency loss of an empty sample set"));
    }
    let mut total = 0.0;
    for x in complex_inputs {
        let v = e.embed(x.as_ref())?;
        let plain = e.classify_embedding(&v, false)?;
        let prompted = e.classify_embedding(&v, true)?;
        total += kl_divergence(&plain, &prompted)?;
    }
    Ok(total / complex_inputs.len() as f64)
}

/// Inputs for one adapter update. Partner outputs are cached constants.
#[derive(Debug, Clone, Copy)]
pub struct AdapterBatch<'a> {
    /// Pseudo-source inputs for the embedded cross-entropy term.
    pub pseudo: &'a [&'a [f64]],
    pub pseudo_partner: &'a [ProbVec],
    /// Complex inputs and their assigned categories for the cosine term.
    pub complex: &'a [&'a [f64]],
    pub complex_categories: &'a [usize],
    /// Interaction minibatch and the prompt expert's cached outputs for it.
    pub mi: &'a [&'a [f64]],
    pub mi_partner: &'a [ProbVec],
}

/// Inputs for one prompt update. Partner outputs are cached constants.
#[derive(Debug, Clone, Copy)]
pub struct PromptBatch<'a> {
    pub complex: &'a [&'a [f64]],
    pub mi: &'a [&'a [f64]],
    /// The source expert's cached outputs for the interaction minibatch.
    pub mi_partner: &'a [ProbVec],
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Cross-entropy with the source outputs carrying the gradient:
/// `CE(ps, pv)` is linear in `ps`, so `∂/∂ps_i = −log pv_i`.
pub fn ce_adapter_objective(
    e: &SourceExpert,
    inputs: &[&[f64]],
    partner: &[ProbVec],
    reduction: Reduction,
) -> Result<LossReport> {
    ensure_same_len("ce_adapter_objective batch", inputs.len(), partner.len())?;
    let mut grad = vec![0.0; e.num_trainable()];
    let mut total = 0.0;
    if inputs.is_empty() {
        return Ok(LossReport::new(LossComponents::default(), grad));
    }
    let scale = reduction.scale(inputs.len());
    for (x, pv) in inputs.iter().zip(partner) {
        let t = e.trace(x)?;
        total += cross_entropy(&t.probs, pv)?;
        let grad_probs: Vec<f64> = pv.iter().map(|&q| -clamped_ln(q) * scale).collect();
        let gl = softmax_backward(&t.probs, &grad_probs);
        let gh = e.logit_grad_to_feature(&gl)?;
        e.accumulate_adapter_grad(&t, &gh, &mut grad)?;
    }
    let components = LossComponents {
        ce: total * scale,
        ..Default::default()
    };
    Ok(LossReport::new(components, grad))
}

/// Cross-entropy with the prompted outputs carrying the gradient.
pub fn ce_prompt_objective(
    e: &PromptExpert,
    inputs: &[&[f64]],
    partner: &[ProbVec],
    reduction: Reduction,
) -> Result<LossReport> {
    ensure_same_len("ce_prompt_objective batch", inputs.len(), partner.len())?;
    let mut grad = vec![0.0; e.num_trainable()];
    let mut total = 0.0;
    if inputs.is_empty() {
        return Ok(LossReport::new(LossComponents::default(), grad));
    }
    let scale = reduction.scale(inputs.len());
    for (x, ps) in inputs.iter().zip(partner) {
        let v = e.embed(x)?;
        let q = e.classify_embedding(&v, true)?;
        total += cross_entropy(ps, &q)?;
        let grad_probs: Vec<f64> = ps
            .iter()
            .zip(q.iter())
            .map(|(&p, &qi)| -p * clamped_ln_grad(qi) * scale)
            .collect();
        let gl = softmax_backward(&q, &grad_probs);
        e.accumulate_prompt_grad(&v, &gl, &mut grad)?;
    }
    let components = LossComponents {
        ce: total * scale,
        ..Default::default()
    };
    Ok(LossReport::new(components, grad))
}

/// Style loss (cosine term plus mean consensus cross-entropy) and mutual
/// information loss for the adapter, gated by `toggles.weisz` / `toggles.mi`.
pub fn adapter_objective(
    e: &SourceExpert,
    batch: &AdapterBatch<'_>,
    centers: &CenterBank,
    toggles: LossToggles,
) -> Result<LossReport> {
    ensure_same_len(
        "adapter complex batch",
        batch.complex.len(),
        batch.complex_categories.len(),
    )?;
    ensure_same_len("adapter mi batch", batch.mi.len(), batch.mi_partner.len())?;
    let mut components = LossComponents::default();
    let mut grad = vec![0.0; e.num_trainable()];

    if toggles.weisz {
        let ce = ce_adapter_objective(e, batch.pseudo, batch.pseudo_partner, Reduction::Mean)?;
        components.ce = ce.components.ce;
        add_scaled(&mut grad, &ce.grad, 1.0);

        let mut traces = Vec::new();
        for (x, &c) in batch.complex.iter().zip(batch.complex_categories) {
            if let Some(center) = centers.get(c) {
                traces.push((e.trace(x)?, center));
            }
        }
        if !traces.is_empty() {
            let scale = 1.0 / traces.len() as f64;
            let mut total = 0.0;
            for (t, center) in &traces {
                total += 1.0 - cosine_similarity(center, &t.adapted)?;
                let dcos = cosine_grad_wrt_second(center, &t.adapted);
                let gh: Vec<f64> = dcos.iter().map(|d| -d * scale).collect();
                e.accumulate_adapter_grad(t, &gh, &mut grad)?;
            }
            components.weisz_cosine = total * scale;
        }
    }

    if toggles.mi && !batch.mi.is_empty() {
        let traces = batch
            .mi
            .iter()
            .map(|x| e.trace(x))
            .collect::<Result<Vec<_>>>()?;
        let live: Vec<ProbVec> = traces.iter().map(|t| t.probs.clone()).collect();
        let joint = joint_distribution(&live, batch.mi_partner)?;
        components.mi = mutual_information_loss(&joint);
        let table_grad = mutual_information_table_grad(&joint);
        let c = joint.categories();
        let n = traces.len() as f64;
        for (t, partner) in traces.iter().zip(batch.mi_partner) {
            let grad_probs: Vec<f64> = (0..c)
                .map(|i| (0..c).fold(0.0, |acc, j| acc + table_grad[i * c + j] * partner[j]) / n)
                .collect();
            let gl = softmax_backward(&t.probs, &grad_probs);
            let gh = e.logit_grad_to_feature(&gl)?;
            e.accumulate_adapter_grad(t, &gh, &mut grad)?;
        }
    }

    Ok(LossReport::new(components, grad))
}

/// Prompt consistency loss and mutual information loss for the prompt,
/// gated by `toggles.psc` / `toggles.mi`.
pub fn prompt_objective(
    e: &PromptExpert,
    batch: &PromptBatch<'_>,
    toggles: LossToggles,
) -> Result<LossReport> {
    ensure_same_len("prompt mi batch", batch.mi.len(), batch.mi_partner.len())?;
    let mut components = LossComponents::default();
    let mut grad = vec![0.0; e.num_trainable()];

    if toggles.psc && !batch.complex.is_empty() {
        let scale = 1.0 / batch.complex.len() as f64;
        let mut total = 0.0;
        for x in batch.complex {
            let v = e.embed(x)?;
            let plain = e.classify_embedding(&v, false)?;
            let prompted = e.classify_embedding(&v, true)?;
            total += kl_divergence(&plain, &prompted)?;
            let grad_probs: Vec<f64> = plain
                .iter()
                .zip(prompted.iter())
                .map(|(&p, &q)| -p * clamped_ln_grad(q) * scale)
                .collect();
            let gl = softmax_backward(&prompted, &grad_probs);
            e.accumulate_prompt_grad(&v, &gl, &mut grad)?;
        }
        components.psc = total * scale;
    }

    if toggles.mi && !batch.mi.is_empty() {
        let embeddings = batch
            .mi
            .iter()
            .map(|x| e.embed(x))
            .collect::<Result<Vec<_>>>()?;
        let live = embeddings
            .iter()
            .map(|v| e.classify_embedding(v, true))
            .collect::<Result<Vec<_>>>()?;
        let joint = joint_distribution(batch.mi_partner, &live)?;
        components.mi = mutual_information_loss(&joint);
        let table_grad = mutual_information_table_grad(&joint);
        let c = joint.categories();
        let n = live.len() as f64;
        for ((v, q), partner) in embeddings.iter().zip(&live).zip(batch.mi_partner) {
            let grad_probs: Vec<f64> = (0..c)
                .map(|j| (0..c).fold(0.0, |acc, i| acc + table_grad[i * c + j] * partner[i]) / n)
                .collect();
            let gl = softmax_backward(q, &grad_probs);
            e.accumulate_prompt_grad(v, &gl, &mut grad)?;
        }
    }

    Ok(LossReport::new(components, grad))
}
