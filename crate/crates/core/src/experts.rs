//! The two experts: a frozen source classifier carrying a trainable residual
//! bottleneck adapter, and a frozen embedding classifier steered by a single
//! trainable prompt vector shared by all category anchors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_same_len, invalid, Result};
use crate::numerics::{
    cosine_grad_wrt_second, cosine_similarity, normalize, softmax, Matrix, ProbVec, Rng,
};

pub const DEFAULT_ADAPTER_RANK: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Flat copy of one expert's trainable parameters.
///
/// Source experts lay out `adapter_down` then `adapter_up`, each row-major.
/// Prompt experts hold the prompt vector alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamView(pub Vec<f64>);

/// One named parameter block, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub data: Vec<f64>,
}

impl ParamBlock {
    fn from_matrix(name: &str, m: &Matrix, trainable: bool) -> Self {
        Self {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            trainable,
            data: m.as_slice().to_vec(),
        }
    }

    fn from_vector(name: &str, v: &[f64], trainable: bool) -> Self {
        Self {
            name: name.to_string(),
            rows: v.len(),
            cols: 1,
            trainable,
            data: v.to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.data.clone())
    }
}

fn take_block<'a>(blocks: &'a [ParamBlock], name: &str) -> Result<&'a ParamBlock> {
    blocks
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| invalid(format!("checkpoint is missing block `{name}`")))
}

fn checksum<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        for v in part {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Intermediate values of an adapted source forward pass.
#[derive(Debug, Clone)]
pub struct SourceTrace {
    /// Frozen backbone feature `tanh(W1·x + b1)`.
    pub hidden: Vec<f64>,
    /// Adapter pre-activation `down · hidden`.
    pub bottleneck: Vec<f64>,
    /// `relu(bottleneck)`
    pub activation: Vec<f64>,
    /// `hidden + up · activation`
    pub adapted: Vec<f64>,
    pub probs: ProbVec,
}

/// Source-domain classifier: frozen tanh backbone and linear head, with a
/// zero-initialized rank-`r` residual adapter on the hidden feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceExpert {
    backbone_w1: Matrix,
    backbone_b1: Vec<f64>,
    head_w2: Matrix,
    head_b2: Vec<f64>,
    adapter_down: Matrix,
    adapter_up: Matrix,
}

impl SourceExpert {
    /// Assembles an expert from trained frozen blocks and a fresh adapter.
    ///
    /// The down-projection is drawn from N(0, 1/d_hidden); the up-projection
    /// is zero so the adapter starts as an exact no-op.
    pub fn new(
        backbone_w1: Matrix,
        backbone_b1: Vec<f64>,
        head_w2: Matrix,
        head_b2: Vec<f64>,
        rank: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d_hidden = backbone_w1.rows();
        ensure_same_len("backbone bias", d_hidden, backbone_b1.len())?;
        ensure_same_len("head input", d_hidden, head_w2.cols())?;
        ensure_same_len("head bias", head_w2.rows(), head_b2.len())?;
        if rank == 0 {
            return Err(invalid("adapter rank must be at least 1"));
        }
        if head_w2.rows() < 2 {
            return Err(invalid("need at least two categories"));
        }
        let adapter_down =
            Matrix::random_normal(rank, d_hidden, 1.0 / (d_hidden as f64).sqrt(), rng);
        Ok(Self {
            backbone_w1,
            backbone_b1,
            head_w2,
            head_b2,
            adapter_down,
            adapter_up: Matrix::zeros(d_hidden, rank),
        })
    }

    pub fn d_in(&self) -> usize {
        self.backbone_w1.cols()
    }

    pub fn d_hidden(&self) -> usize {
        self.backbone_w1.rows()
    }

    pub fn num_categories(&self) -> usize {
        self.head_w2.rows()
    }

    pub fn rank(&self) -> usize {
        self.adapter_down.rows()
    }

    pub fn adapter_down(&self) -> &Matrix {
        &self.adapter_down
    }

    pub fn adapter_up(&self) -> &Matrix {
        &self.adapter_up
    }

    pub fn head(&self) -> (&Matrix, &[f64]) {
        (&self.head_w2, &self.head_b2)
    }

    pub fn backbone(&self) -> (&Matrix, &[f64]) {
        (&self.backbone_w1, &self.backbone_b1)
    }

    /// Frozen backbone feature `tanh(W1·x + b1)`.
    pub fn backbone_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(invalid(format!(
                "source expert expects {} inputs, got {}",
                self.d_in(),
                x.len()
            )));
        }
        let mut h = self.backbone_w1.matvec(x)?;
        for (v, b) in h.iter_mut().zip(&self.backbone_b1) {
            *v = (*v + b).tanh();
        }
        Ok(h)
    }

    fn classify(&self, feature: &[f64]) -> Result<ProbVec> {
        let mut logits = self.head_w2.matvec(feature)?;
        for (l, b) in logits.iter_mut().zip(&self.head_b2) {
            *l += b;
        }
        softmax(&logits, 1.0)
    }

    /// Returns the (possibly adapted) hidden feature and the class distribution.
    pub fn forward(&self, x: &[f64], use_adapter: bool) -> Result<(Vec<f64>, ProbVec)> {
        if use_adapter {
            let t = self.trace(x)?;
            return Ok((t.adapted, t.probs));
        }
        let h = self.backbone_feature(x)?;
        let probs = self.classify(&h)?;
        Ok((h, probs))
    }

    /// Adapted forward pass keeping every intermediate for back-propagation.
    pub fn trace(&self, x: &[f64]) -> Result<SourceTrace> {
        let hidden = self.backbone_feature(x)?;
        let bottleneck = self.adapter_down.matvec(&hidden)?;
        let activation: Vec<f64> = bottleneck.iter().map(|&z| z.max(0.0)).collect();
        let residual = self.adapter_up.matvec(&activation)?;
        let adapted: Vec<f64> = hidden.iter().zip(&residual).map(|(h, r)| h + r).collect();
        let probs = self.classify(&adapted)?;
        Ok(SourceTrace {
            hidden,
            bottleneck,
            activation,
            adapted,
            probs,
        })
    }

    /// Maps a logit gradient to the adapted-feature gradient through the frozen head.
    pub fn logit_grad_to_feature(&self, grad_logits: &[f64]) -> Result<Vec<f64>> {
        self.head_w2.matvec_t(grad_logits)
    }

    /// Adds the adapter-parameter gradient implied by `grad_adapted = dL/dh'`
    /// into `grad` (laid out like [`SourceExpert::flatten_params`]).
    pub fn accumulate_adapter_grad(
        &self,
        trace: &SourceTrace,
        grad_adapted: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        ensure_same_len("adapter gradient", grad.len(), self.num_trainable())?;
        ensure_same_len("feature gradient", grad_adapted.len(), self.d_hidden())?;
        let (r, h) = (self.rank(), self.d_hidden());
        let (grad_down, grad_up) = grad.split_at_mut(r * h);
        // d/d up = g ⊗ a
        for (i, &g) in grad_adapted.iter().enumerate() {
            let row = &mut grad_up[i * r..(i + 1) * r];
            for (w, &a) in row.iter_mut().zip(&trace.activation) {
                *w += g * a;
            }
        }
        // d/d down = (upᵀ g ⊙ relu') ⊗ hidden
        let back = self.adapter_up.matvec_t(grad_adapted)?;
        for (k, (&b, &z)) in back.iter().zip(&trace.bottleneck).enumerate() {
            if z <= 0.0 {
                continue;
            }
            let row = &mut grad_down[k * h..(k + 1) * h];
            for (w, &hv) in row.iter_mut().zip(&trace.hidden) {
                *w += b * hv;
            }
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        2 * self.rank() * self.d_hidden()
    }

    pub fn flatten_params(&self) -> ParamView {
        let mut flat = self.adapter_down.as_slice().to_vec();
        flat.extend_from_slice(self.adapter_up.as_slice());
        ParamView(flat)
    }

    pub fn write_params(&mut self, view: &ParamView) -> Result<()> {
        ensure_same_len(
            "source expert parameters",
            view.0.len(),
            self.num_trainable(),
        )?;
        let split = self.adapter_down.as_slice().len();
        self.adapter_down
            .as_mut_slice()
            .copy_from_slice(&view.0[..split]);
        self.adapter_up
            .as_mut_slice()
            .copy_from_slice(&view.0[split..]);
        Ok(())
    }

    /// SHA-256 over the frozen backbone and head blocks.
    pub fn frozen_checksum(&self) -> String {
        checksum([
            self.backbone_w1.as_slice(),
            self.backbone_b1.as_slice(),
            self.head_w2.as_slice(),
            self.head_b2.as_slice(),
        ])
    }

    pub fn to_blocks(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::from_matrix("backbone_w1", &self.backbone_w1, false),
            ParamBlock::from_vector("backbone_b1", &self.backbone_b1, false),
            ParamBlock::from_matrix("head_w2", &self.head_w2, false),
            ParamBlock::from_vector("head_b2", &self.head_b2, false),
            ParamBlock::from_matrix("adapter_down", &self.adapter_down, true),
            ParamBlock::from_matrix("adapter_up", &self.adapter_up, true),
        ]
    }

    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        let w1 = take_block(blocks, "backbone_w1")?.to_matrix()?;
        let b1 = take_block(blocks, "backbone_b1")?.data.clone();
        let w2 = take_block(blocks, "head_w2")?.to_matrix()?;
        let b2 = take_block(blocks, "head_b2")?.data.clone();
        let down = take_block(blocks, "adapter_down")?.to_matrix()?;
        let up = take_block(blocks, "adapter_up")?.to_matrix()?;
        ensure_same_len("backbone bias", w1.rows(), b1.len())?;
        ensure_same_len("head input", w1.rows(), w2.cols())?;
        ensure_same_len("head bias", w2.rows(), b2.len())?;
        ensure_same_len("adapter_down cols", w1.rows(), down.cols())?;
        ensure_same_len("adapter_up rows", w1.rows(), up.rows())?;
        ensure_same_len("adapter rank", down.rows(), up.cols())?;
        Ok(Self {
            backbone_w1: w1,
            backbone_b1: b1,
            head_w2: w2,
            head_b2: b2,
            adapter_down: down,
            adapter_up: up,
        })
    }
}

/// Embedding classifier scoring inputs by cosine similarity against
/// category anchors, optionally shifted by the shared prompt vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptExpert {
    encoder: Matrix,
    anchors: Vec<Vec<f64>>,
    prompt: Vec<f64>,
    temperature: f64,
}

impl PromptExpert {
    /// Anchors are normalized on construction; the prompt starts at zero.
    pub fn new(encoder: Matrix, anchors: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(invalid("need at least two category anchors"));
        }
        if !(temperature > 0.0) {
            return Err(invalid(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let d_embed = encoder.rows();
        let mut unit = Vec::with_capacity(anchors.len());
        for (c, a) in anchors.iter().enumerate() {
            ensure_same_len(&format!("anchor {c}"), a.len(), d_embed)?;
            let n = normalize(a);
            if n.iter().all(|&v| v == 0.0) {
                return Err(invalid(format!("anchor {c} has zero norm")));
            }
            unit.push(n);
        }
        Ok(Self {
            encoder,
            anchors: unit,
            prompt: vec![0.0; d_embed],
            temperature,
        })
    }

    pub fn d_in(&self) -> usize {
        self.encoder.cols()
    }

    pub fn d_embed(&self) -> usize {
        self.encoder.rows()
    }

    pub fn num_categories(&self) -> usize {
        self.anchors.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prompt(&self) -> &[f64] {
        &self.prompt
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn encoder(&self) -> &Matrix {
        &self.encoder
    }

    /// Unit-norm embedding of `x`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(invalid(format!(
                "prompt expert expects {} inputs, got {}",
                self.d_in(),
                x.len()
            )));
        }
        Ok(normalize(&self.encoder.matvec(x)?))
    }

    // Both branches renormalize so that a zero prompt reproduces the
    // unprompted anchors bit for bit.
    fn anchor(&self, c: usize, use_prompt: bool) -> Vec<f64> {
        if use_prompt {
            let shifted: Vec<f64> = self.anchors[c]
                .iter()
                .zip(&self.prompt)
                .map(|(t, p)| t + p)
                .collect();
            normalize(&shifted)
        } else {
            normalize(&self.anchors[c])
        }
    }

    /// Class distribution from an already computed embedding.
    pub fn classify_embedding(&self, v: &[f64], use_prompt: bool) -> Result<ProbVec> {
        let logits = (0..self.num_categories())
            .map(|c| Ok(cosine_similarity(v, &self.anchor(c, use_prompt))? / self.temperature))
            .collect::<Result<Vec<f64>>>()?;
        softmax(&logits, 1.0)
    }

    pub fn forward(&self, x: &[f64], use_prompt: bool) -> Result<ProbVec> {
        self.classify_embedding(&self.embed(x)?, use_prompt)
    }

    /// Adds the prompt gradient implied by `grad_logits` (prompted pass) into `grad`.
    pub fn accumulate_prompt_grad(
        &self,
        v: &[f64],
        grad_logits: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        ensure_same_len("prompt gradient", grad.len(), self.d_embed())?;
        ensure_same_len("logit gradient", grad_logits.len(), self.num_categories())?;
        for (c, &gl) in grad_logits.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            let shifted: Vec<f64> = self.anchors[c]
                .iter()
                .zip(&self.prompt)
                .map(|(t, p)| t + p)
                .collect();
            // cosine is scale-free in its second argument, so the gradient
            // through normalize(t_c + ψ) equals the gradient w.r.t. t_c + ψ.
            let dcos = cosine_grad_wrt_second(v, &shifted);
            for (g, d) in grad.iter_mut().zip(&dcos) {
                *g += gl / self.temperature * d;
            }
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.d_embed()
    }

    pub fn flatten_params(&self) -> ParamView {
        ParamView(self.prompt.clone())
    }

    pub fn write_params(&mut self, view: &ParamView) -> Result<()> {
        ensure_same_len(
            "prompt expert parameters",
            view.0.len(),
            self.num_trainable(),
        )?;
        self.prompt.copy_from_slice(&view.0);
        Ok(())
    }

    /// SHA-256 over the encoder, anchors and temperature.
    pub fn frozen_checksum(&self) -> String {
        let temp = [self.temperature];
        checksum(
            std::iter::once(self.encoder.as_slice())
                .chain(self.anchors.iter().map(Vec::as_slice))
                .chain(std::iter::once(&temp[..])),
        )
    }

    pub fn to_blocks(&self) -> Vec<ParamBlock> {
        let c = self.num_categories();
        let flat: Vec<f64> = self.anchors.iter().flatten().copied().collect();
        vec![
            ParamBlock::from_matrix("encoder_u", &self.encoder, false),
            ParamBlock {
                name: "anchors".into(),
                rows: c,
                cols: self.d_embed(),
                trainable: false,
                data: flat,
            },
            ParamBlock::from_vector("temperature", &[self.temperature], false),
            ParamBlock::from_vector("prompt", &self.prompt, true),
        ]
    }

    /// Restores an expert bit-exactly (anchors are taken as stored).
    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        let encoder = take_block(blocks, "encoder_u")?.to_matrix()?;
        let anchors = take_block(blocks, "anchors")?.to_matrix()?;
        let temperature = *take_block(blocks, "temperature")?
            .data
            .first()
            .ok_or_else(|| invalid("empty temperature block"))?;
        let prompt = take_block(blocks, "prompt")?.data.clone();
        ensure_same_len("anchor width", anchors.cols(), encoder.rows())?;
        ensure_same_len("prompt length", prompt.len(), encoder.rows())?;
        if !(temperature > 0.0) {
            return Err(invalid("temperature must be > 0"));
        }
        Ok(Self {
            encoder,
            anchors: (0..anchors.rows())
                .map(|c| anchors.row(c).to_vec())
                .collect(),
            prompt,
            temperature,
        })
    }
}

#[cfg(test)]
// The reference forward passes below are written as explicit index loops.
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, finite_diff_gradient};
    use approx::assert_abs_diff_eq;

    fn random_source(seed: u64, d_in: usize, d_hidden: usize, c: usize) -> SourceExpert {
        let mut rng = Rng::new(seed);
        let w1 = Matrix::random_normal(d_hidden, d_in, 0.5, &mut rng);
        let b1 = (0..d_hidden).map(|_| 0.1 * rng.normal()).collect();
        let w2 = Matrix::random_normal(c, d_hidden, 0.5, &mut rng);
        let b2 = (0..c).map(|_| 0.1 * rng.normal()).collect();
        SourceExpert::new(w1, b1, w2, b2, 3, &mut rng).unwrap()
    }

    fn random_prompt(seed: u64, d_in: usize, d_embed: usize, c: usize) -> PromptExpert {
        let mut rng = Rng::new(seed);
        let u = Matrix::random_normal(d_embed, d_in, 1.0, &mut rng);
        let anchors = (0..c)
            .map(|_| (0..d_embed).map(|_| rng.normal()).collect())
            .collect();
        PromptExpert::new(u, anchors, DEFAULT_TEMPERATURE).unwrap()
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let e = random_source(1, 4, 6, 3);
        let x = [0.3, -0.2, 1.0, 0.5];
        let (h_on, p_on) = e.forward(&x, true).unwrap();
        let (h_off, p_off) = e.forward(&x, false).unwrap();
        assert_eq!(h_on, h_off);
        assert_eq!(p_on, p_off);
    }

    #[test]
    fn zero_input_yields_head_bias_softmax() {
        let mut rng = Rng::new(2);
        let w1 = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let w2 = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let b2 = vec![0.2, -0.4, 1.0];
        let e = SourceExpert::new(w1, vec![0.0; 5], w2, b2.clone(), 2, &mut rng).unwrap();
        let (h, p) = e.forward(&[0.0; 3], false).unwrap();
        assert_eq!(h, vec![0.0; 5]);
        assert_eq!(p, softmax(&b2, 1.0).unwrap());
    }

    #[test]
    fn adapted_forward_matches_straight_line_reevaluation() {
        let mut e = random_source(3, 4, 6, 3);
        let mut rng = Rng::new(30);
        let flat: Vec<f64> = (0..e.num_trainable()).map(|_| 0.4 * rng.normal()).collect();
        e.write_params(&ParamView(flat)).unwrap();
        let x = [0.7, -1.1, 0.2, 0.9];

        // independent re-evaluation with explicit index loops
        let (w1, b1) = e.backbone();
        let (w2, b2) = e.head();
        let mut h = vec![0.0; 6];
        for i in 0..6 {
            let mut s = b1[i];
            for j in 0..4 {
                s += w1.get(i, j) * x[j];
            }
            h[i] = s.tanh();
        }
        let mut a = [0.0; 3];
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..6 {
                s += e.adapter_down().get(k, i) * h[i];
            }
            a[k] = if s > 0.0 { s } else { 0.0 };
        }
        let mut hp = h.clone();
        for i in 0..6 {
            for k in 0..3 {
                hp[i] += e.adapter_up().get(i, k) * a[k];
            }
        }
        let logits: Vec<f64> = (0..3)
            .map(|c| b2[c] + (0..6).map(|i| w2.get(c, i) * hp[i]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();

        let (feat, p) = e.forward(&x, true).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(feat[i], hp[i], epsilon = 1e-12);
        }
        for c in 0..3 {
            assert_abs_diff_eq!(p[c], logits[c].exp() / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut e = random_source(4, 4, 6, 3);
        let mut rng = Rng::new(40);
        let flat: Vec<f64> = (0..e.num_trainable()).map(|_| 0.3 * rng.normal()).collect();
        e.write_params(&ParamView(flat.clone())).unwrap();
        let x = [0.2, 0.4, -0.8, 1.3];
        let target = 1;
        // L = -log p_target
        let loss = |params: &[f64]| {
            let mut probe = e.clone();
            probe.write_params(&ParamView(params.to_vec())).unwrap();
            -probe.forward(&x, true).unwrap().1[target].ln()
        };
        let t = e.trace(&x).unwrap();
        let mut gl: Vec<f64> = t.probs.to_vec();
        gl[target] -= 1.0;
        let gh = e.logit_grad_to_feature(&gl).unwrap();
        let mut grad = vec![0.0; e.num_trainable()];
        e.accumulate_adapter_grad(&t, &gh, &mut grad).unwrap();
        let fd = finite_diff_gradient(loss, &flat, 1e-6).unwrap();
        for (a, b) in grad.iter().zip(&fd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let e = random_source(5, 4, 6, 3);
        assert!(e.forward(&[1.0; 3], true).is_err());
        let p = random_prompt(5, 4, 5, 3);
        assert!(p.forward(&[1.0; 5], true).is_err());
    }

    #[test]
    fn zero_prompt_matches_unprompted() {
        let p = random_prompt(6, 4, 5, 3);
        let x = [0.1, 0.2, -0.3, 0.4];
        assert_eq!(p.forward(&x, true).unwrap(), p.forward(&x, false).unwrap());
    }

    #[test]
    fn aligned_anchor_gives_near_one_hot() {
        let u = Matrix::identity(3);
        let anchors = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let p = PromptExpert::new(u, anchors, 0.1).unwrap();
        let probs = p.forward(&[2.0, 0.0, 0.0], false).unwrap();
        let z = 10f64.exp() + 2.0;
        assert_abs_diff_eq!(probs[0], 10f64.exp() / z, epsilon = 1e-12);
        assert!(probs[0] > 0.999);
    }

    #[test]
    fn prompted_logits_match_hand_computation() {
        let mut p = random_prompt(7, 3, 4, 3);
        p.write_params(&ParamView(vec![0.3, -0.2, 0.1, 0.5]))
            .unwrap();
        let x = [0.5, -1.0, 2.0];
        let u = p.encoder();
        let raw: Vec<f64> = (0..4)
            .map(|i| (0..3).map(|j| u.get(i, j) * x[j]).sum())
            .collect();
        let rn = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..3)
            .map(|c| {
                let s: Vec<f64> = (0..4).map(|i| p.anchors()[c][i] + p.prompt()[i]).collect();
                let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                (0..4).map(|i| raw[i] * s[i]).sum::<f64>() / (rn * sn) / 0.1
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let probs = p.forward(&x, true).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(probs[c], logits[c].exp() / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let mut p = random_prompt(8, 4, 5, 3);
        p.write_params(&ParamView(vec![0.2, -0.1, 0.3, 0.0, 0.1]))
            .unwrap();
        let x = [1.0, -0.5, 0.3, 0.8];
        let loss = |params: &[f64]| {
            let mut probe = p.clone();
            probe.write_params(&ParamView(params.to_vec())).unwrap();
            -probe.forward(&x, true).unwrap()[2].ln()
        };
        let v = p.embed(&x).unwrap();
        let probs = p.classify_embedding(&v, true).unwrap();
        let mut gl = probs.to_vec();
        gl[2] -= 1.0;
        let mut grad = vec![0.0; 5];
        p.accumulate_prompt_grad(&v, &gl, &mut grad).unwrap();
        let fd = finite_diff_gradient(loss, p.prompt(), 1e-6).unwrap();
        for (a, b) in grad.iter().zip(&fd) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn param_views_round_trip() {
        let mut e = random_source(9, 4, 6, 3);
        let before = e.clone();
        let view = e.flatten_params();
        assert_eq!(view.0.len(), 3 * 6 + 6 * 3);
        e.write_params(&view).unwrap();
        assert_eq!(e, before);
        let fresh = ParamView((0..36).map(f64::from).collect());
        e.write_params(&fresh).unwrap();
        assert_eq!(e.flatten_params(), fresh);
        assert!(e.write_params(&ParamView(vec![0.0; 35])).is_err());

        let mut p = random_prompt(9, 4, 5, 3);
        assert_eq!(p.flatten_params().0.len(), 5);
        assert!(p.write_params(&ParamView(vec![0.0; 4])).is_err());
    }

    #[test]
    fn checkpoint_blocks_round_trip() {
        let mut e = random_source(10, 4, 6, 3);
        e.write_params(&ParamView(vec![0.25; 36])).unwrap();
        assert_eq!(SourceExpert::from_blocks(&e.to_blocks()).unwrap(), e);
        let mut p = random_prompt(10, 4, 5, 3);
        p.write_params(&ParamView(vec![0.1; 5])).unwrap();
        assert_eq!(PromptExpert::from_blocks(&p.to_blocks()).unwrap(), p);
        assert!(SourceExpert::from_blocks(&p.to_blocks()).is_err());
    }

    #[test]
    fn writing_adapter_leaves_frozen_checksum() {
        let mut e = random_source(11, 4, 6, 3);
        let sum = e.frozen_checksum();
        e.write_params(&ParamView(vec![1.0; 36])).unwrap();
        assert_eq!(e.frozen_checksum(), sum);
        let mut p = random_prompt(11, 4, 5, 3);
        let sum = p.frozen_checksum();
        p.write_params(&ParamView(vec![1.0; 5])).unwrap();
        assert_eq!(p.frozen_checksum(), sum);
    }

    #[test]
    fn prompt_argmax_is_scale_invariant() {
        let mut p = random_prompt(12, 6, 5, 4);
        p.write_params(&ParamView(vec![0.1, 0.0, -0.2, 0.3, 0.05]))
            .unwrap();
        let mut rng = Rng::new(120);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let scale = 0.01 + 100.0 * rng.uniform();
            let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
            assert_eq!(
                argmax(&p.forward(&x, true).unwrap()),
                argmax(&p.forward(&scaled, true).unwrap())
            );
        }
    }

    /// Orthogonal matrix via Gram-Schmidt on a random square matrix.
    fn random_rotation(n: usize, rng: &mut Rng) -> Matrix {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            rows.push(normalize(&v));
        }
        Matrix::from_vec(n, n, rows.concat()).unwrap()
    }

    #[test]
    fn prompt_probs_invariant_under_joint_rotation() {
        let mut p = random_prompt(13, 4, 5, 3);
        p.write_params(&ParamView(vec![0.3, -0.1, 0.2, 0.4, -0.3]))
            .unwrap();
        let mut rng = Rng::new(130);
        let q = random_rotation(5, &mut rng);
        let mut rotated_u = Matrix::zeros(5, 4);
        for j in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| p.encoder().get(i, j)).collect();
            let rc = q.matvec(&col).unwrap();
            for i in 0..5 {
                rotated_u.set(i, j, rc[i]);
            }
        }
        let anchors = p.anchors().iter().map(|a| q.matvec(a).unwrap()).collect();
        let mut r = PromptExpert::new(rotated_u, anchors, p.temperature()).unwrap();
        r.write_params(&ParamView(q.matvec(p.prompt()).unwrap()))
            .unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let a = p.forward(&x, true).unwrap();
            let b = r.forward(&x, true).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-9);
            }
        }
    }
}
