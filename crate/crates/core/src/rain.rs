//! Retrieval, augmentation and interaction: the adaptation schedule that
//! drives both experts over an unlabeled target set.
//!
//! Every epoch starts by caching both experts' outputs on the whole target
//! set. Samples on which the two experts agree form the pseudo-source set,
//! the rest the complex set. Within the epoch each expert is updated against
//! the other's cached outputs, which stay constant until the next refresh.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::consensus_prediction;
use crate::bench::{evaluate, streams, Dataset, Metrics, UnlabeledView};
use crate::error::{invalid, ExclError, Result};
use crate::experts::{PromptExpert, SourceExpert};
use crate::geometry::{class_centers, CenterBank, WeiszfeldOptions};
use crate::losses::{
    adapter_objective, ce_adapter_objective, ce_prompt_objective, prompt_objective, AdapterBatch,
    LossReport, LossToggles, PromptBatch, Reduction,
};
use crate::numerics::{sgd_momentum_step, OptimizerState, ProbVec, Rng};

/// Batch reduction of the warm-up cross-entropy. A summed loss scales the
/// step with the batch size; at the default learning rates and batch size
/// that throws the source expert far off its pretrained solution within a
/// single warm-up epoch, so the warm-up averages like every other term.
pub const WARMUP_REDUCTION: Reduction = Reduction::Mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    /// Cross-entropy warm-up epochs on the initial pseudo-source set.
    pub init_epochs: usize,
    pub batch_size: usize,
    pub lr_adapter: f64,
    pub lr_prompt: f64,
    pub momentum: f64,
    pub toggles: LossToggles,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            init_epochs: 3,
            batch_size: 64,
            lr_adapter: 0.1,
            lr_prompt: 0.01,
            momentum: 0.9,
            toggles: LossToggles::ALL,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_epochs > self.epochs {
            return Err(invalid(format!(
                "init_epochs ({}) must not exceed epochs ({})",
                self.init_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.lr_adapter > 0.0) || !(self.lr_prompt > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Split of the target indices into pseudo-source and complex samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub pseudo_indices: Vec<usize>,
    /// Shared prediction for each pseudo-source index.
    pub pseudo_labels: Vec<usize>,
    pub complex_indices: Vec<usize>,
}

/// Index `n` is pseudo-source iff both experts' argmax predictions agree.
pub fn retrieve(cached_os: &[ProbVec], cached_ov: &[ProbVec]) -> Result<Partition> {
    if cached_os.len() != cached_ov.len() {
        return Err(invalid(format!(
            "misaligned caches: {} source outputs vs {} prompt outputs",
            cached_os.len(),
            cached_ov.len()
        )));
    }
    let mut p = Partition::default();
    for (n, (s, v)) in cached_os.iter().zip(cached_ov).enumerate() {
        let label = s.argmax();
        if label == v.argmax() {
            p.pseudo_indices.push(n);
            p.pseudo_labels.push(label);
        } else {
            p.complex_indices.push(n);
        }
    }
    Ok(p)
}

/// Whole-dataset outputs of both experts (adapter on, prompt on), in dataset order.
pub fn refresh_caches(
    source: &SourceExpert,
    prompt: &PromptExpert,
    data: UnlabeledView<'_>,
) -> Result<(Vec<ProbVec>, Vec<ProbVec>)> {
    let os = data
        .features()
        .iter()
        .map(|x| Ok(source.forward(x, true)?.1))
        .collect::<Result<Vec<_>>>()?;
    let ov = data
        .features()
        .iter()
        .map(|x| prompt.forward(x, true))
        .collect::<Result<Vec<_>>>()?;
    Ok((os, ov))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainState {
    pub partition: Partition,
    pub centers: CenterBank,
    pub cached_os: Vec<ProbVec>,
    pub cached_ov: Vec<ProbVec>,
    pub epoch: usize,
}

impl RainState {
    /// Caches and partition for the experts' current parameters.
    pub fn observe(
        source: &SourceExpert,
        prompt: &PromptExpert,
        data: UnlabeledView<'_>,
        epoch: usize,
    ) -> Result<Self> {
        let (cached_os, cached_ov) = refresh_caches(source, prompt, data)?;
        let partition = retrieve(&cached_os, &cached_ov)?;
        Ok(Self {
            partition,
            centers: CenterBank::default(),
            cached_os,
            cached_ov,
            epoch,
        })
    }

    fn assigned_category(&self, n: usize) -> usize {
        consensus_prediction(&self.cached_os[n], &self.cached_ov[n])
    }
}

/// One row of the per-epoch log. Row 0 is the pre-training baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub n_pseudo: usize,
    pub n_complex: usize,
    /// Cosine style term plus the embedded cross-entropy term.
    pub loss_weisz: f64,
    pub loss_psc: f64,
    pub loss_mi_adapter_side: f64,
    pub loss_mi_prompt_side: f64,
    /// Mean warm-up cross-entropy (baseline row only).
    pub loss_ce_warmup: f64,
    pub acc_source_expert: f64,
    pub acc_prompt_expert: f64,
    pub acc_consensus: f64,
}

impl EpochRow {
    fn with_metrics(mut self, m: &Metrics) -> Self {
        self.acc_source_expert = m.acc_source_expert;
        self.acc_prompt_expert = m.acc_prompt_expert;
        self.acc_consensus = m.acc_consensus;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: AdaptConfig,
    pub rows: Vec<EpochRow>,
    pub baseline_metrics: Metrics,
    pub final_metrics: Metrics,
    pub source_frozen_checksum: String,
    pub prompt_frozen_checksum: String,
    pub label_guard_trips: usize,
}

/// Optimizer pair for one stage of the schedule.
struct Optimizers {
    adapter: OptimizerState,
    prompt: OptimizerState,
}

impl Optimizers {
    fn new(source: &SourceExpert, prompt: &PromptExpert, cfg: &AdaptConfig) -> Result<Self> {
        Ok(Self {
            adapter: OptimizerState::new(source.num_trainable(), cfg.lr_adapter, cfg.momentum)?,
            prompt: OptimizerState::new(prompt.num_trainable(), cfg.lr_prompt, cfg.momentum)?,
        })
    }

    fn step_adapter(&mut self, e: &mut SourceExpert, report: &LossReport, ctx: &str) -> Result<()> {
        check_finite(report, ctx)?;
        let mut params = e.flatten_params();
        sgd_momentum_step(&mut params.0, &report.grad, &mut self.adapter)
            .map_err(|err| with_context(err, ctx))?;
        e.write_params(&params)
    }

    fn step_prompt(&mut self, e: &mut PromptExpert, report: &LossReport, ctx: &str) -> Result<()> {
        check_finite(report, ctx)?;
        let mut params = e.flatten_params();
        sgd_momentum_step(&mut params.0, &report.grad, &mut self.prompt)
            .map_err(|err| with_context(err, ctx))?;
        e.write_params(&params)
    }
}

fn check_finite(report: &LossReport, ctx: &str) -> Result<()> {
    if !report.total.is_finite() {
        return Err(ExclError::NumericFault(format!(
            "{ctx}: non-finite loss {}",
            report.total
        )));
    }
    Ok(())
}

fn with_context(err: ExclError, ctx: &str) -> ExclError {
    match err {
        ExclError::NumericFault(msg) => ExclError::NumericFault(format!("{ctx}: {msg}")),
        other => other,
    }
}

fn gather<'a>(data: UnlabeledView<'a>, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| data.get(i)).collect()
}

fn pick(cache: &[ProbVec], idx: &[usize]) -> Vec<ProbVec> {
    idx.iter().map(|&i| cache[i].clone()).collect()
}

/// Cross-entropy warm-up of both experts on the current pseudo-source set.
///
/// Returns the mean per-batch loss over both experts, or `None` when the
/// stage was skipped.
pub fn warmup_stage(
    source: &mut SourceExpert,
    prompt: &mut PromptExpert,
    data: UnlabeledView<'_>,
    state: &RainState,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    if cfg.init_epochs == 0 {
        return Ok(None);
    }
    if state.partition.pseudo_indices.is_empty() {
        warn!("warm-up skipped: the experts agree on no target sample");
        return Ok(None);
    }
    let mut opt = Optimizers::new(source, prompt, cfg)?;
    let mut order = state.partition.pseudo_indices.clone();
    let (mut total, mut batches) = (0.0, 0usize);
    for epoch in 0..cfg.init_epochs {
        rng.shuffle(&mut order);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = format!("warm-up epoch {epoch} batch {b}");
            let inputs = gather(data, idx);
            let adapter = ce_adapter_objective(
                source,
                &inputs,
                &pick(&state.cached_ov, idx),
                WARMUP_REDUCTION,
            )
            .map_err(|err| with_context(err, &ctx))?;
            opt.step_adapter(source, &adapter, &ctx)?;
            let prompted = ce_prompt_objective(
                prompt,
                &inputs,
                &pick(&state.cached_os, idx),
                WARMUP_REDUCTION,
            )
            .map_err(|err| with_context(err, &ctx))?;
            opt.step_prompt(prompt, &prompted, &ctx)?;
            total += 0.5 * (adapter.total + prompted.total);
            batches += 1;
        }
    }
    Ok(Some(total / batches as f64))
}

/// Style centers from the pseudo-source samples' adapted hidden features.
pub fn pseudo_source_centers(
    source: &SourceExpert,
    data: UnlabeledView<'_>,
    partition: &Partition,
) -> Result<CenterBank> {
    let feats = partition
        .pseudo_indices
        .iter()
        .map(|&i| Ok(source.forward(data.get(i), true)?.0))
        .collect::<Result<Vec<_>>>()?;
    class_centers(
        &feats,
        &partition.pseudo_labels,
        data.categories(),
        WeiszfeldOptions::default(),
    )
}

/// Refresh, retrieve, recompute centers, then one pass of minibatch updates.
///
/// Accuracies in the returned row are measured on `target`'s labels after
/// the updates; labels are never read while the experts are being trained.
pub fn epoch_step(
    source: &mut SourceExpert,
    prompt: &mut PromptExpert,
    target: &Dataset,
    state: &mut RainState,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<EpochRow> {
    let epoch = state.epoch + 1;
    let data = target.unlabeled();
    let mut row = EpochRow {
        epoch,
        ..Default::default()
    };
    {
        let _armed = target.arm_label_guard();
        *state = RainState::observe(source, prompt, data, epoch)
            .map_err(|err| with_context(err, &format!("epoch {epoch} refresh")))?;
        state.centers = pseudo_source_centers(source, data, &state.partition)?;
        row.n_pseudo = state.partition.pseudo_indices.len();
        row.n_complex = state.partition.complex_indices.len();
        if state.partition.pseudo_indices.is_empty() && cfg.toggles.weisz {
            warn!("epoch {epoch}: empty pseudo-source set, style term skipped");
        }

        let update_adapter = cfg.toggles.weisz || cfg.toggles.mi;
        let update_prompt = cfg.toggles.psc || cfg.toggles.mi;
        let mut opt = Optimizers::new(source, prompt, cfg)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut steps = 0usize;
        for (b, mi_idx) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = format!("epoch {epoch} batch {b}");
            let complex_idx =
                rng.sample_without_replacement(&state.partition.complex_indices, cfg.batch_size);
            let pseudo_pos: Vec<usize> = (0..state.partition.pseudo_indices.len()).collect();
            let pseudo_pos = rng.sample_without_replacement(&pseudo_pos, cfg.batch_size);
            let pseudo_idx: Vec<usize> = pseudo_pos
                .iter()
                .map(|&p| state.partition.pseudo_indices[p])
                .collect();

            let mi_inputs = gather(data, mi_idx);
            let complex_inputs = gather(data, &complex_idx);
            let complex_categories: Vec<usize> = complex_idx
                .iter()
                .map(|&i| state.assigned_category(i))
                .collect();

            if update_adapter {
                let pseudo_inputs = gather(data, &pseudo_idx);
                let pseudo_partner = pick(&state.cached_ov, &pseudo_idx);
                let mi_partner = pick(&state.cached_ov, mi_idx);
                let batch = AdapterBatch {
                    pseudo: &pseudo_inputs,
                    pseudo_partner: &pseudo_partner,
                    complex: &complex_inputs,
                    complex_categories: &complex_categories,
                    mi: &mi_inputs,
                    mi_partner: &mi_partner,
                };
                let report = adapter_objective(source, &batch, &state.centers, cfg.toggles)
                    .map_err(|err| with_context(err, &ctx))?;
                opt.step_adapter(source, &report, &ctx)?;
                row.loss_weisz += report.components.weisz_cosine + report.components.ce;
                row.loss_mi_adapter_side += report.components.mi;
            }
            if update_prompt {
                let mi_partner = pick(&state.cached_os, mi_idx);
                let batch = PromptBatch {
                    complex: &complex_inputs,
                    mi: &mi_inputs,
                    mi_partner: &mi_partner,
                };
                let report = prompt_objective(prompt, &batch, cfg.toggles)
                    .map_err(|err| with_context(err, &ctx))?;
                opt.step_prompt(prompt, &report, &ctx)?;
                row.loss_psc += report.components.psc;
                row.loss_mi_prompt_side += report.components.mi;
            }
            steps += 1;
        }
        if steps > 0 {
            let n = steps as f64;
            row.loss_weisz /= n;
            row.loss_psc /= n;
            row.loss_mi_adapter_side /= n;
            row.loss_mi_prompt_side /= n;
        }
    }
    let metrics = evaluate(source, prompt, target)
        .map_err(|err| with_context(err, &format!("epoch {epoch} evaluation")))?;
    Ok(row.with_metrics(&metrics))
}

/// Full schedule: retrieve, warm up, then `cfg.epochs` interaction epochs.
pub fn run_adaptation(
    source: &mut SourceExpert,
    prompt: &mut PromptExpert,
    target: &Dataset,
    cfg: &AdaptConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    if source.d_in() != target.d_in() || prompt.d_in() != target.d_in() {
        return Err(invalid(
            "expert input widths do not match the target dataset",
        ));
    }
    if source.num_categories() != target.categories()
        || prompt.num_categories() != target.categories()
    {
        return Err(invalid(
            "expert category counts do not match the target dataset",
        ));
    }
    let source_sum = source.frozen_checksum();
    let prompt_sum = prompt.frozen_checksum();
    let trips_before = target.label_guard_trips();
    let mut rng = Rng::derived(cfg.seed, streams::ADAPTATION);
    let data = target.unlabeled();

    let mut state = {
        let _armed = target.arm_label_guard();
        RainState::observe(source, prompt, data, 0)?
    };
    let baseline = evaluate(source, prompt, target)?;
    let mut baseline_row = EpochRow {
        epoch: 0,
        n_pseudo: state.partition.pseudo_indices.len(),
        n_complex: state.partition.complex_indices.len(),
        ..Default::default()
    }
    .with_metrics(&baseline);

    if cfg.toggles.any() {
        let _armed = target.arm_label_guard();
        if let Some(ce) = warmup_stage(source, prompt, data, &state, cfg, &mut rng)? {
            baseline_row.loss_ce_warmup = ce;
        }
    }
    let mut rows = vec![baseline_row];
    for _ in 0..cfg.epochs {
        rows.push(epoch_step(
            source, prompt, target, &mut state, cfg, &mut rng,
        )?);
    }
    let final_metrics = evaluate(source, prompt, target)?;

    if source.frozen_checksum() != source_sum || prompt.frozen_checksum() != prompt_sum {
        return Err(ExclError::NumericFault(
            "frozen expert parameters changed during adaptation".into(),
        ));
    }
    let label_guard_trips = target.label_guard_trips() - trips_before;
    if label_guard_trips > 0 {
        return Err(invalid(format!(
            "target labels were read {label_guard_trips} time(s) during adaptation"
        )));
    }
    Ok(RunReport {
        seed: cfg.seed,
        config: cfg.clone(),
        rows,
        baseline_metrics: baseline,
        final_metrics,
        source_frozen_checksum: source_sum,
        prompt_frozen_checksum: prompt_sum,
        label_guard_trips,
    })
}
