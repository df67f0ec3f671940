//! Training loops and their supporting contracts: step-granular learning-rate
//! schedules, a sparsity-aware AdamW for entangled weights and expert factors,
//! momentum SGD for the router, and JSONL-friendly step records.
//!
//! Three regimes share one inner loop:
//! * supernet pre-training (one sampled subnet per step, no expert terms),
//! * expert/router fitting on a frozen supernet (warm-up freezes the router),
//! * a full-finetune baseline that updates every supernet weight instead of
//!   attaching experts.

use crate::data::{epoch_batches, Dataset};
use crate::mole::{ExpertBank, MoleCtx, MoleError, MolePath};
use crate::router::{Router, RouterError};
use crate::space::{sample_subnet, Grouping, SearchSpace, SubnetConfig};
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;
use crate::vit::{patchify, build_forward, Role, SupernetWeights};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("warm-up ({warmup} epochs) must be shorter than the run ({total} epochs)")]
    WarmupTooLong { warmup: usize, total: usize },
    #[error("{name} must be positive")]
    NonPositive { name: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("gradient for unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Mole(#[from] MoleError),
    #[error(transparent)]
    Router(#[from] RouterError),
}

/// Hyperparameters shared by all training regimes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub supernet_epochs: usize,
    pub mole_epochs: usize,
    pub warmup_epochs: usize,
    pub lora_lr_start: f64,
    pub lora_lr_peak: f64,
    pub router_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            supernet_epochs: 20,
            mole_epochs: 50,
            warmup_epochs: 5,
            lora_lr_start: 1e-5,
            lora_lr_peak: 5e-4,
            router_lr: 1e-1,
            batch_size: 64,
            weight_decay: 5e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_epochs >= self.mole_epochs {
            return Err(TrainError::WarmupTooLong {
                warmup: self.warmup_epochs,
                total: self.mole_epochs,
            });
        }
        for (name, v) in [
            ("lora_lr_start", self.lora_lr_start),
            ("lora_lr_peak", self.lora_lr_peak),
            ("router_lr", self.router_lr),
        ] {
            if v <= 0.0 {
                return Err(TrainError::NonPositive { name });
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::NonPositive { name: "batch_size" });
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::NonPositive {
                name: "weight_decay",
            });
        }
        Ok(())
    }
}

/// Which half of the expert/router run a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        }
    }
}

/// Step geometry of an expert/router run over a concrete dataset.
#[derive(Debug, Clone, Copy)]
pub struct StepPlan {
    pub steps_per_epoch: usize,
    pub warmup_steps: usize,
    pub main_steps: usize,
}

impl StepPlan {
    pub fn new(samples: usize, cfg: &TrainConfig) -> StepPlan {
        let steps_per_epoch = samples.div_ceil(cfg.batch_size);
        StepPlan {
            steps_per_epoch,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            main_steps: (cfg.mole_epochs - cfg.warmup_epochs) * steps_per_epoch,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.main_steps
    }

    pub fn phase(&self, step: usize) -> Phase {
        if step < self.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Joint
        }
    }
}

/// Linear interpolation from `start` (step 0) to `peak` (step `total`−1),
/// written as a convex combination so both endpoints and the halfway step
/// are exact in f64.
pub fn linear_ramp(start: f64, peak: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let tau = step as f64 / (total - 1) as f64;
    (1.0 - tau) * start + tau * peak
}

/// Half-cosine decay from `peak` (t = 0) to exactly 0 (t = `total`); the
/// halfway point evaluates to exactly peak/2.
pub fn cosine_decay(peak: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let angle = std::f64::consts::PI * t as f64 / total as f64;
    peak * 0.5 * (1.0 + angle.cos())
}

/// (expert lr, router lr) at a global step of an expert/router run. The
/// expert group ramps linearly across warm-up, then both groups cosine-decay
/// to zero over the joint phase; the router rate is 0 while frozen.
pub fn lr_at(step: usize, phase: Phase, plan: &StepPlan, cfg: &TrainConfig) -> (f64, f64) {
    match phase {
        Phase::Warmup => (
            linear_ramp(cfg.lora_lr_start, cfg.lora_lr_peak, step, plan.warmup_steps),
            0.0,
        ),
        Phase::Joint => {
            let t = step - plan.warmup_steps;
            (
                cosine_decay(cfg.lora_lr_peak, t, plan.main_steps),
                cosine_decay(cfg.router_lr, t, plan.main_steps),
            )
        }
    }
}

/// One training-step record; serialized as one JSONL line per step.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub step: usize,
    pub loss: f64,
    pub lr_expert: f64,
    pub lr_router: f64,
}

/// Per-epoch mean losses of a finished run (sample-weighted, f64 accumulated).
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: Vec<u32>,
}

/// AdamW that only touches entries whose gradient is nonzero, with one step
/// counter per entry so bias correction matches each entry's own history.
/// Entangled supernet weights and per-expert factors receive exact-zero
/// gradients outside the region a step actually exercised; skipping those
/// entries keeps them bit-identical to their prior state.
pub struct MaskedAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    states: IndexMap<String, AdamState>,
}

impl MaskedAdam {
    pub fn new(weight_decay: f64) -> Self {
        MaskedAdam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            states: IndexMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.numel(), grad.numel(), "parameter/gradient mismatch");
        let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
            t: vec![0; param.numel()],
        });
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (&g, p)) in grad.iter().zip(param.data_mut()).enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = g as f64;
            state.t[i] += 1;
            let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
            state.m[i] = m as f32;
            state.v[i] = v as f32;
            let t = state.t[i] as i32;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p as f64;
            *p = (*p as f64 - lr * update) as f32;
        }
    }

    /// Serialize state as flat tensors for checkpointing.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, s) in &self.states {
            let n = s.m.len();
            out.push((format!("optim.adam.{name}.m"), Tensor::new(vec![n], s.m.clone())));
            out.push((format!("optim.adam.{name}.v"), Tensor::new(vec![n], s.v.clone())));
            out.push((
                format!("optim.adam.{name}.t"),
                Tensor::new(vec![n], s.t.iter().map(|&t| t as f32).collect()),
            ));
        }
        out
    }

    /// Restore state from checkpoint tensors; non-matching names are ignored.
    pub fn load_tensors(&mut self, tensors: &IndexMap<String, Tensor>) {
        for (name, t) in tensors {
            let Some(rest) = name.strip_prefix("optim.adam.") else {
                continue;
            };
            let (param, field) = match rest.rfind('.') {
                Some(i) => (&rest[..i], &rest[i + 1..]),
                None => continue,
            };
            let state = self.states.entry(param.to_string()).or_insert_with(|| AdamState {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                t: vec![0; t.numel()],
            });
            match field {
                "m" => state.m = t.data().to_vec(),
                "v" => state.v = t.data().to_vec(),
                "t" => state.t = t.iter().map(|&x| x as u32).collect(),
                _ => {}
            }
        }
    }
}

/// Standard dense momentum SGD (velocity update v ← μv + g).
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    states: IndexMap<String, Vec<f32>>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            momentum,
            weight_decay,
            states: IndexMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.numel(), grad.numel(), "parameter/gradient mismatch");
        let vel = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.numel()]);
        for (i, (&g, p)) in grad.iter().zip(param.data_mut()).enumerate() {
            let v = self.momentum * vel[i] as f64 + g as f64;
            vel[i] = v as f32;
            *p = (*p as f64 - lr * (v + self.weight_decay * *p as f64)) as f32;
        }
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.states
            .iter()
            .map(|(name, v)| {
                (
                    format!("optim.sgd.{name}.v"),
                    Tensor::new(vec![v.len()], v.clone()),
                )
            })
            .collect()
    }

    pub fn load_tensors(&mut self, tensors: &IndexMap<String, Tensor>) {
        for (name, t) in tensors {
            let Some(rest) = name.strip_prefix("optim.sgd.") else {
                continue;
            };
            let Some(param) = rest.strip_suffix(".v") else {
                continue;
            };
            self.states.insert(param.to_string(), t.data().to_vec());
        }
    }
}

/// Per-sample mean cross-entropy (f64 log-sum-exp) and top-1 correct count.
pub fn softmax_ce_acc(logits: &Tensor, labels: &[usize]) -> (f64, usize) {
    assert_eq!(logits.rows(), labels.len(), "one label per logits row");
    let mut total = 0.0f64;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row_slice(i);
        let mut max = f32::NEG_INFINITY;
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - max) as f64).exp();
        }
        total += denom.ln() - (row[label] - max) as f64;
    }
    (total / labels.len().max(1) as f64, correct)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

fn eval_batches(len: usize, batch: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..len.div_ceil(batch)).map(move |i| (i * batch..((i + 1) * batch).min(len)).collect())
}

/// Evaluate the plain model (no expert terms) on a dataset.
pub fn evaluate(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    data: &Dataset,
    batch: usize,
) -> Result<EvalMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for idx in eval_batches(data.len(), batch) {
        let (images, labels) = data.gather(&idx);
        let (_, logits) = crate::vit::forward_eval(weights, subnet, space, &images)?;
        let (ce, c) = softmax_ce_acc(&logits, &labels);
        loss_sum += ce * labels.len() as f64;
        correct += c;
    }
    Ok(EvalMetrics {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
    })
}

/// Evaluate with expert terms: route once for the subnet, then reuse the
/// mixture across all batches.
pub fn evaluate_mole(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    bank: &ExpertBank,
    router: &Router,
    grouping: &Grouping,
    data: &Dataset,
    batch: usize,
    path: MolePath,
) -> Result<EvalMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mixture = router.mixture_for(subnet, space, grouping)?;
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for idx in eval_batches(data.len(), batch) {
        let (images, labels) = data.gather(&idx);
        let (_, logits) =
            crate::vit::forward_eval_mole(weights, subnet, space, bank, &mixture, path, &images)?;
        let (ce, c) = softmax_ce_acc(&logits, &labels);
        loss_sum += ce * labels.len() as f64;
        correct += c;
    }
    Ok(EvalMetrics {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
    })
}

/// Per-sample argmax predictions over a dataset, batched. Includes expert
/// terms (factored path) when `mole` is given; ties resolve to the lowest
/// class index, matching the accuracy metric.
pub fn predict(
    weights: &SupernetWeights,
    subnet: &SubnetConfig,
    space: &SearchSpace,
    mole: Option<(&ExpertBank, &Router, &Grouping)>,
    data: &Dataset,
    batch: usize,
) -> Result<Vec<usize>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mixture = match mole {
        Some((_, router, grouping)) => Some(router.mixture_for(subnet, space, grouping)?),
        None => None,
    };
    let mut preds = Vec::with_capacity(data.len());
    for idx in eval_batches(data.len(), batch) {
        let (images, _) = data.gather(&idx);
        let (_, logits) = match (&mole, &mixture) {
            (Some((bank, _, _)), Some(mix)) => crate::vit::forward_eval_mole(
                weights,
                subnet,
                space,
                bank,
                mix,
                MolePath::Factored,
                &images,
            )?,
            _ => crate::vit::forward_eval(weights, subnet, space, &images)?,
        };
        let classes = logits.cols();
        for row in 0..logits.rows() {
            let r = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

/// Inner loop shared by pre-training, the full-finetune baseline, and
/// standalone single-architecture training: every step samples a subnet via
/// `sampler`, forwards it without expert terms, and applies masked AdamW to
/// the supernet weights touched by that subnet.
#[allow(clippy::too_many_arguments)]
pub fn train_supernet_with(
    weights: &mut SupernetWeights,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    phase: &'static str,
    lr_fn: &dyn Fn(usize) -> f64,
    adam: &mut MaskedAdam,
    rng: &mut ChaCha8Rng,
    sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> SubnetConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainStats, TrainError> {
    train_supernet_hooked(
        weights,
        space,
        data,
        cfg,
        epochs,
        phase,
        lr_fn,
        adam,
        rng,
        sampler,
        log,
        &mut |_, _, _| {},
    )
}

/// `train_supernet_with` plus an epoch-end hook (0-based finished epoch,
/// weights, optimizer state) for periodic checkpointing.
#[allow(clippy::too_many_arguments)]
pub fn train_supernet_hooked(
    weights: &mut SupernetWeights,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    phase: &'static str,
    lr_fn: &dyn Fn(usize) -> f64,
    adam: &mut MaskedAdam,
    rng: &mut ChaCha8Rng,
    sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> SubnetConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
    on_epoch: &mut dyn FnMut(usize, &SupernetWeights, &MaskedAdam),
) -> Result<TrainStats, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut stats = TrainStats::default();
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut loss_sum = 0.0f64;
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let subnet = sampler(rng);
            let (images, labels) = data.gather(&idx);
            let patches = patchify(&images, space.image_size, space.patch_size);
            let mut tape = Tape::new();
            let pid = tape.input(patches);
            let out = build_forward(
                &mut tape, weights, &subnet, space, pid, idx.len(), Role::Leaf, None,
            )?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_value = tape.value(loss).scalar_value() as f64;
            let grads = tape.backward(loss)?;
            let named = tape.leaf_grads(&grads);
            let lr = lr_fn(step);
            for (name, grad) in &named {
                let param = weights
                    .param_mut(name)
                    .ok_or_else(|| TrainError::UnknownParam(name.clone()))?;
                adam.step(name, param, grad, lr);
            }
            log(&TrainLogRecord {
                epoch,
                phase,
                step,
                loss: loss_value,
                lr_expert: lr,
                lr_router: 0.0,
            });
            loss_sum += loss_value * labels.len() as f64;
            step += 1;
        }
        stats.epoch_losses.push(loss_sum / data.len() as f64);
        on_epoch(epoch, weights, adam);
    }
    Ok(stats)
}

/// Peak learning rate of the pre-training recipe (cosine-decayed to zero).
pub const PRETRAIN_LR: f64 = 3e-3;

/// Pre-train entangled supernet weights: each step samples one subnet
/// uniformly and updates only the slices that subnet exercises.
pub fn pretrain_supernet(
    weights: &mut SupernetWeights,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainStats, TrainError> {
    pretrain_supernet_hooked(weights, space, data, cfg, log, &mut |_, _, _| {})
}

/// `pretrain_supernet` plus an epoch-end hook for periodic checkpointing.
pub fn pretrain_supernet_hooked(
    weights: &mut SupernetWeights,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
    on_epoch: &mut dyn FnMut(usize, &SupernetWeights, &MaskedAdam),
) -> Result<TrainStats, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = data.len().div_ceil(cfg.batch_size) * cfg.supernet_epochs;
    let mut adam = MaskedAdam::new(cfg.weight_decay);
    train_supernet_hooked(
        weights,
        space,
        data,
        cfg,
        cfg.supernet_epochs,
        "pretrain",
        &|step| cosine_decay(PRETRAIN_LR, step, steps),
        &mut adam,
        &mut rng,
        &mut |r| sample_subnet(space, r),
        log,
        on_epoch,
    )
}

/// Baseline that spends the expert-phase budget updating *all* supernet
/// weights directly (no expert terms), with the same subnet sampler and
/// expert learning-rate schedule.
pub fn full_finetune_baseline(
    weights: &mut SupernetWeights,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainStats, TrainError> {
    full_finetune_hooked(weights, space, data, cfg, log, &mut |_, _, _| {})
}

/// `full_finetune_baseline` plus an epoch-end hook for periodic
/// checkpointing.
pub fn full_finetune_hooked(
    weights: &mut SupernetWeights,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
    on_epoch: &mut dyn FnMut(usize, &SupernetWeights, &MaskedAdam),
) -> Result<TrainStats, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = StepPlan::new(data.len(), cfg);
    let mut adam = MaskedAdam::new(cfg.weight_decay);
    train_supernet_hooked(
        weights,
        space,
        data,
        cfg,
        cfg.mole_epochs,
        "finetune",
        &|step| lr_at(step, plan.phase(step), &plan, cfg).0,
        &mut adam,
        &mut rng,
        &mut |r| sample_subnet(space, r),
        log,
        on_epoch,
    )
}

/// Train a standalone model of one fixed architecture from scratch with the
/// pre-training recipe, restricted to that architecture, for the same total
/// epoch budget as the two-stage pipeline.
pub fn train_independent(
    subnet: &SubnetConfig,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<(SupernetWeights, TrainStats), TrainError> {
    let restricted = space.restricted_to(subnet);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = SupernetWeights::init(&restricted, &mut rng);
    let epochs = cfg.supernet_epochs + cfg.mole_epochs;
    let steps = data.len().div_ceil(cfg.batch_size) * epochs;
    let mut adam = MaskedAdam::new(cfg.weight_decay);
    let fixed = subnet.clone();
    let stats = train_supernet_with(
        &mut weights,
        &restricted,
        data,
        cfg,
        epochs,
        "independent",
        &|step| cosine_decay(PRETRAIN_LR, step, steps),
        &mut adam,
        &mut rng,
        &mut |_| fixed.clone(),
        log,
    )?;
    Ok((weights, stats))
}

/// Optimizer pair produced by an expert/router run, for checkpointing.
pub struct MoleOptimizers {
    pub adam: MaskedAdam,
    pub sgd: MomentumSgd,
}

/// Fit experts and router on a frozen supernet. Each step samples a subnet,
/// routes it once, forwards with merged expert deltas, and steps masked
/// AdamW on the expert factors; the router joins in after warm-up via dense
/// momentum SGD. Supernet weights are never updated.
#[allow(clippy::too_many_arguments)]
pub fn train_mole(
    weights: &SupernetWeights,
    bank: &mut ExpertBank,
    router: &mut Router,
    grouping: &Grouping,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
) -> Result<(TrainStats, MoleOptimizers), TrainError> {
    train_mole_hooked(
        weights,
        bank,
        router,
        grouping,
        space,
        data,
        cfg,
        log,
        &mut |_, _, _, _| {},
    )
}

/// `train_mole` plus an epoch-end hook (0-based finished epoch, bank,
/// router, optimizers) for periodic checkpointing.
#[allow(clippy::too_many_arguments)]
pub fn train_mole_hooked(
    weights: &SupernetWeights,
    bank: &mut ExpertBank,
    router: &mut Router,
    grouping: &Grouping,
    space: &SearchSpace,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainLogRecord),
    on_epoch: &mut dyn FnMut(usize, &ExpertBank, &Router, &MoleOptimizers),
) -> Result<(TrainStats, MoleOptimizers), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = StepPlan::new(data.len(), cfg);
    let mut opt = MoleOptimizers {
        adam: MaskedAdam::new(cfg.weight_decay),
        sgd: MomentumSgd::new(0.9, 0.0),
    };
    let mut stats = TrainStats::default();
    let mut step = 0usize;
    for epoch in 0..cfg.mole_epochs {
        let mut loss_sum = 0.0f64;
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let subnet = sample_subnet(space, &mut rng);
            let (images, labels) = data.gather(&idx);
            let patches = patchify(&images, space.image_size, space.patch_size);
            let mut tape = Tape::new();
            let routed = router.route_on_tape(&mut tape, &subnet, space, grouping)?;
            let pid = tape.input(patches);
            let ctx = MoleCtx {
                bank,
                mixture: &routed.mixture,
                path: MolePath::Merged,
                train_bank: true,
            };
            let out = build_forward(
                &mut tape,
                weights,
                &subnet,
                space,
                pid,
                idx.len(),
                Role::Input,
                Some(&ctx),
            )?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_value = tape.value(loss).scalar_value() as f64;
            let grads = tape.backward(loss)?;
            let named = tape.leaf_grads(&grads);
            let phase = plan.phase(step);
            let (lr_expert, lr_router) = lr_at(step, phase, &plan, cfg);
            for (name, grad) in &named {
                if name.starts_with("lora.") {
                    let param = bank
                        .param_mut(name)
                        .ok_or_else(|| TrainError::UnknownParam(name.clone()))?;
                    opt.adam.step(name, param, grad, lr_expert);
                } else if name.starts_with("router.") {
                    if phase == Phase::Joint {
                        let param = router
                            .param_mut(name)
                            .ok_or_else(|| TrainError::UnknownParam(name.clone()))?;
                        opt.sgd.step(name, param, grad, lr_router);
                    }
                } else {
                    return Err(TrainError::UnknownParam(name.clone()));
                }
            }
            log(&TrainLogRecord {
                epoch,
                phase: phase.name(),
                step,
                loss: loss_value,
                lr_expert,
                lr_router,
            });
            loss_sum += loss_value * labels.len() as f64;
            step += 1;
        }
        stats.epoch_losses.push(loss_sum / data.len() as f64);
        on_epoch(epoch, bank, router, &opt);
    }
    Ok((stats, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_data;
    use crate::router::RouterConfig;
    use crate::space::GroupingStrategy;

    fn desk() -> SearchSpace {
        SearchSpace::tiny(2)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            supernet_epochs: 4,
            mole_epochs: 6,
            warmup_epochs: 2,
            batch_size: 16,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn blob_data(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_data(2, 64, 16, 0.1, &mut rng)
    }

    #[test]
    fn config_invariants_are_enforced() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 50,
            mole_epochs: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::WarmupTooLong { warmup: 50, total: 50 })
        ));
        let bad = TrainConfig {
            router_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::NonPositive { name: "router_lr" })
        ));
    }

    #[test]
    fn warmup_ramp_hits_exact_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        // 11 warm-up steps: step 0, midpoint step 5, final step 10
        let plan = StepPlan {
            steps_per_epoch: 0,
            warmup_steps: 11,
            main_steps: 100,
        };
        let (lr0, r0) = lr_at(0, Phase::Warmup, &plan, &cfg);
        assert_eq!(lr0, 1e-5);
        assert_eq!(r0, 0.0);
        let (lr_mid, _) = lr_at(5, Phase::Warmup, &plan, &cfg);
        assert_eq!(lr_mid, (1e-5 + 5e-4) / 2.0);
        let (lr_end, _) = lr_at(10, Phase::Warmup, &plan, &cfg);
        assert_eq!(lr_end, 5e-4);
        // strictly increasing across the ramp
        for s in 1..11 {
            assert!(lr_at(s, Phase::Warmup, &plan, &cfg).0 > lr_at(s - 1, Phase::Warmup, &plan, &cfg).0);
        }
    }

    #[test]
    fn cosine_decay_hits_exact_peak_half_and_zero() {
        let cfg = TrainConfig::default();
        let plan = StepPlan {
            steps_per_epoch: 0,
            warmup_steps: 10,
            main_steps: 100,
        };
        let (e0, r0) = lr_at(10, Phase::Joint, &plan, &cfg);
        assert_eq!(e0, 5e-4);
        assert_eq!(r0, 1e-1);
        let (e_mid, r_mid) = lr_at(60, Phase::Joint, &plan, &cfg);
        assert_eq!(e_mid, 5e-4 / 2.0);
        assert_eq!(r_mid, 1e-1 / 2.0);
        let (e_end, r_end) = lr_at(110, Phase::Joint, &plan, &cfg);
        assert_eq!(e_end, 0.0);
        assert_eq!(r_end, 0.0);
        // non-increasing across the decay
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let (e, r) = lr_at(10 + t, Phase::Joint, &plan, &cfg);
            assert!(e <= prev);
            assert!((r - e * (0.1 / 5e-4)).abs() < 1e-12, "groups share the shape");
            prev = e;
        }
    }

    #[test]
    fn masked_adam_skips_zero_gradient_entries() {
        let mut adam = MaskedAdam::new(0.1);
        let mut p = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::new(vec![4], vec![0.5, 0.0, -0.5, 0.0]);
        adam.step("p", &mut p, &g, 1e-2);
        assert_ne!(p.data()[0], 1.0);
        assert_eq!(p.data()[1], 2.0, "zero-grad entry untouched, no decay");
        assert_ne!(p.data()[2], 3.0);
        assert_eq!(p.data()[3], 4.0);
        // first update of an entry is bias-corrected to a unit Adam step:
        // |Δ| = lr·(g/(√g²+eps) + wd·p)
        let expected = 1.0 - 1e-2 * (0.5f64 / (0.5 + 1e-8) + 0.1 * 1.0);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn masked_adam_state_round_trips_through_tensors() {
        let mut adam = MaskedAdam::new(0.01);
        let mut p = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]);
        for s in 0..5 {
            let g = Tensor::new(vec![3], vec![0.1 * (s + 1) as f32, -0.2, 0.0]);
            adam.step("w", &mut p, &g, 1e-3);
        }
        let saved: IndexMap<String, Tensor> = adam
            .tensors()
            .into_iter()
            .collect();
        let mut restored = MaskedAdam::new(0.01);
        restored.load_tensors(&saved);
        // one more identical step must agree bitwise
        let g = Tensor::new(vec![3], vec![0.3, 0.1, 0.0]);
        let mut p2 = p.clone();
        adam.step("w", &mut p, &g, 1e-3);
        restored.step("w", &mut p2, &g, 1e-3);
        assert_eq!(p.data(), p2.data());
    }

    #[test]
    fn momentum_sgd_matches_hand_rollout() {
        let mut sgd = MomentumSgd::new(0.9, 0.0);
        let mut p = Tensor::new(vec![1], vec![1.0]);
        sgd.step("p", &mut p, &Tensor::new(vec![1], vec![1.0]), 0.1);
        // v=1, p = 1 − 0.1
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        sgd.step("p", &mut p, &Tensor::new(vec![1], vec![1.0]), 0.1);
        // v = 0.9 + 1 = 1.9, p = 0.9 − 0.19
        assert!((p.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_matches_uniform_logits() {
        let logits = Tensor::zeros(&[4, 5]);
        let (ce, correct) = softmax_ce_acc(&logits, &[0, 1, 2, 3]);
        assert!((ce - (5.0f64).ln()).abs() < 1e-12);
        assert_eq!(correct, 1, "argmax of a tie is index 0");
    }

    #[test]
    fn pretrain_reduces_loss_below_chance_on_blobs() {
        let space = desk();
        let data = blob_data(1);
        let cfg = TrainConfig {
            supernet_epochs: 20,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut weights = SupernetWeights::init(&space, &mut rng);
        let stats = pretrain_supernet(&mut weights, &space, &data, &cfg, &mut |_| {}).unwrap();
        let last = *stats.epoch_losses.last().unwrap();
        assert!(
            last < (2.0f64).ln(),
            "final epoch loss {last} should beat chance {:.4}",
            (2.0f64).ln()
        );
    }

    #[test]
    fn pretrain_is_bit_exact_across_runs() {
        let space = desk();
        let data = blob_data(2);
        let cfg = tiny_cfg();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut weights = SupernetWeights::init(&space, &mut rng);
            let mut losses = Vec::new();
            pretrain_supernet(&mut weights, &space, &data, &cfg, &mut |rec| {
                losses.push(rec.loss)
            })
            .unwrap();
            (weights.checksum(), losses)
        };
        let (c1, l1) = run();
        let (c2, l2) = run();
        assert_eq!(c1, c2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn untouched_regions_stay_at_init_under_rigged_sampler() {
        let space = desk();
        let data = blob_data(3);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut weights = SupernetWeights::init(&space, &mut rng);
        let init_blocks: Vec<Tensor> = weights
            .tensors()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect();
        let names: Vec<String> = weights.tensors().iter().map(|(n, _)| n.clone()).collect();
        // always train the minimal subnet: depth 2, 1 head, mlp 2, embed 16
        let block = crate::space::BlockConfig {
            heads: 1,
            mlp: crate::space::MlpRatio::from_milli(2000),
        };
        let minimal = SubnetConfig {
            depth: 2,
            embed: 16,
            blocks: vec![block, block],
        };
        minimal.validate(&space).unwrap();
        let steps = data.len().div_ceil(cfg.batch_size) * cfg.supernet_epochs;
        let mut adam = MaskedAdam::new(cfg.weight_decay);
        let mut loop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fixed = minimal.clone();
        train_supernet_with(
            &mut weights,
            &space,
            &data,
            &cfg,
            cfg.supernet_epochs,
            "pretrain",
            &|step| cosine_decay(PRETRAIN_LR, step, steps),
            &mut adam,
            &mut loop_rng,
            &mut |_| fixed.clone(),
            &mut |_| {},
        )
        .unwrap();
        // block 2 tensors (inactive at depth 2) are bit-identical to init
        for (name, init) in names.iter().zip(&init_blocks) {
            let now = weights.param_mut(name).unwrap().clone();
            if name.starts_with("block2.") {
                assert_eq!(now.data(), init.data(), "{name} must stay at init");
            }
        }
        // sliced region of qkv in block 0 moved; rows past the slice did not
        let qkv_init = &init_blocks[names.iter().position(|n| n == "block0.qkv.weight").unwrap()];
        let qkv_now = weights.param_mut("block0.qkv.weight").unwrap().clone();
        let (rows_active, cols) = (3 * 1 * space.head_dim, qkv_now.cols());
        let active_moved = (0..rows_active * 16)
            .any(|i| qkv_now.data()[i / 16 * cols + i % 16] != qkv_init.data()[i / 16 * cols + i % 16]);
        assert!(active_moved, "active slice should have trained");
        for r in rows_active..qkv_now.rows() {
            assert_eq!(
                qkv_now.row_slice(r),
                qkv_init.row_slice(r),
                "row {r} outside the slice must stay at init"
            );
        }
        for r in 0..rows_active {
            assert_eq!(
                &qkv_now.row_slice(r)[16..],
                &qkv_init.row_slice(r)[16..],
                "columns beyond embed 16 must stay at init"
            );
        }
    }

    #[test]
    fn train_mole_freezes_supernet_and_warmup_freezes_router() {
        let space = desk();
        let data = blob_data(4);
        let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
        let cfg = TrainConfig {
            mole_epochs: 4,
            warmup_epochs: 2,
            batch_size: 16,
            seed: 42,
            ..TrainConfig::default()
        };
        let setup = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let weights = SupernetWeights::init(&space, &mut rng);
            let bank = ExpertBank::init(&space, space.group_count(), 8, &mut rng);
            let router = Router::group_wise_init(
                &RouterConfig::default(),
                &space,
                space.group_count(),
                &mut rng,
            )
            .unwrap();
            (weights, bank, router)
        };
        let run = |router_lr: f64| {
            let (weights, mut bank, mut router) = setup();
            let w_sum = weights.checksum();
            let run_cfg = TrainConfig { router_lr, ..cfg.clone() };
            let mut losses = Vec::new();
            let (_, _) = train_mole(
                &weights,
                &mut bank,
                &mut router,
                &grouping,
                &space,
                &data,
                &run_cfg,
                &mut |rec| {
                    if rec.phase == "warmup" {
                        assert_eq!(rec.lr_router, 0.0);
                    }
                    losses.push(rec.loss);
                },
            )
            .unwrap();
            assert_eq!(weights.checksum(), w_sum, "supernet must stay frozen");
            (losses, router.checksum())
        };
        let (losses_a, router_a) = run(cfg.router_lr);
        let (losses_b, router_b) = run(50.0);
        // if the router moved during warm-up, the wild rate would already
        // change warm-up losses; instead the trajectories agree bitwise up to
        // and including the first joint step (whose loss precedes any router
        // update) and diverge afterwards
        let plan = StepPlan::new(data.len(), &cfg);
        let prefix = plan.warmup_steps + 1;
        assert_eq!(losses_a[..prefix], losses_b[..prefix]);
        assert_ne!(losses_a[prefix..], losses_b[prefix..]);
        let (_, _, router_init) = setup();
        assert_ne!(router_a, router_init.checksum(), "router trains after warm-up");
        assert_ne!(router_a, router_b);
    }

    #[test]
    fn train_mole_is_bit_exact_for_fixed_seed() {
        let space = desk();
        let data = blob_data(5);
        let cfg = TrainConfig {
            mole_epochs: 3,
            warmup_epochs: 1,
            batch_size: 16,
            seed: 21,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let weights = SupernetWeights::init(&space, &mut rng);
            let mut bank = ExpertBank::init(&space, space.group_count(), 8, &mut rng);
            let mut router = Router::group_wise_init(
                &RouterConfig::default(),
                &space,
                space.group_count(),
                &mut rng,
            )
            .unwrap();
            let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
            let mut losses = Vec::new();
            train_mole(
                &weights,
                &mut bank,
                &mut router,
                &grouping,
                &space,
                &data,
                &cfg,
                &mut |rec| losses.push(rec.loss),
            )
            .unwrap();
            (bank.checksum(), router.checksum(), losses)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn mole_loss_declines_on_smoothed_windows() {
        let space = desk();
        let cfg = TrainConfig {
            mole_epochs: 12,
            warmup_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut ok_seeds = 0;
        for seed in 0..3u64 {
            let data = blob_data(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut weights = SupernetWeights::init(&space, &mut rng);
            // brief pretrain so the frozen features carry signal
            let pre_cfg = TrainConfig {
                supernet_epochs: 6,
                seed,
                ..cfg.clone()
            };
            pretrain_supernet(&mut weights, &space, &data, &pre_cfg, &mut |_| {}).unwrap();
            let mut bank = ExpertBank::init(&space, space.group_count(), 8, &mut rng);
            let mut router = Router::group_wise_init(
                &RouterConfig::default(),
                &space,
                space.group_count(),
                &mut rng,
            )
            .unwrap();
            let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let (stats, _) = train_mole(
                &weights, &mut bank, &mut router, &grouping, &space, &data, &run_cfg,
                &mut |_| {},
            )
            .unwrap();
            let window: Vec<f64> = stats
                .epoch_losses
                .windows(5)
                .map(|w| w.iter().sum::<f64>() / w.len() as f64)
                .collect();
            let monotone = window.windows(2).all(|p| p[1] <= p[0] * 1.01);
            if monotone {
                ok_seeds += 1;
            }
        }
        assert!(
            ok_seeds >= 2,
            "smoothed loss should be non-increasing for most seeds (got {ok_seeds}/3)"
        );
    }

    #[test]
    fn full_finetune_updates_everything_under_its_own_tag() {
        let space = desk();
        let data = blob_data(6);
        let cfg = TrainConfig {
            mole_epochs: 3,
            warmup_epochs: 1,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut weights = SupernetWeights::init(&space, &mut rng);
        let before = weights.checksum();
        let mut phases = std::collections::BTreeSet::new();
        let stats = full_finetune_baseline(&mut weights, &space, &data, &cfg, &mut |rec| {
            phases.insert(rec.phase);
        })
        .unwrap();
        assert_eq!(stats.epoch_losses.len(), 3);
        assert_ne!(weights.checksum(), before);
        assert_eq!(phases.into_iter().collect::<Vec<_>>(), vec!["finetune"]);
    }

    #[test]
    fn independent_training_fits_one_architecture() {
        let space = desk();
        let data = blob_data(8);
        let cfg = TrainConfig {
            supernet_epochs: 20,
            mole_epochs: 20,
            warmup_epochs: 2,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let subnet = SubnetConfig::maximal(&space);
        let (weights, stats) = train_independent(&subnet, &space, &data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(stats.epoch_losses.len(), 40);
        let restricted = space.restricted_to(&subnet);
        let metrics = evaluate(&weights, &subnet, &restricted, &data, 16).unwrap();
        assert!(metrics.accuracy >= 0.9, "accuracy {}", metrics.accuracy);
    }

    #[test]
    fn evaluate_agrees_between_paths_and_counts_correctly() {
        let space = desk();
        let data = blob_data(9);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let weights = SupernetWeights::init(&space, &mut rng);
        let bank = ExpertBank::init(&space, space.group_count(), 8, &mut rng);
        let router = Router::group_wise_init(
            &RouterConfig::default(),
            &space,
            space.group_count(),
            &mut rng,
        )
        .unwrap();
        let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
        let subnet = sample_subnet(&space, &mut rng);
        let plain = evaluate(&weights, &subnet, &space, &data, 16).unwrap();
        // fresh bank has U = 0, so expert terms vanish on both paths
        for path in [MolePath::Merged, MolePath::Factored] {
            let m = evaluate_mole(
                &weights, &subnet, &space, &bank, &router, &grouping, &data, 16, path,
            )
            .unwrap();
            assert_eq!(m.loss, plain.loss);
            assert_eq!(m.correct, plain.correct);
        }
        assert_eq!(plain.total, data.len());
        assert!((plain.accuracy - plain.correct as f64 / plain.total as f64).abs() < 1e-15);
    }

    #[test]
    fn joint_gradients_reach_experts_and_router_exactly() {
        use crate::gradcheck::{check_coords, sample_leaf_coords, CheckOpts};
        let space = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let weights = SupernetWeights::init(&space, &mut rng);
        let mut bank = ExpertBank::init(&space, space.group_count(), 8, &mut rng);
        // push U off zero so D-gradients are live
        let u_names: Vec<String> = bank
            .tensors()
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n.ends_with(".U"))
            .collect();
        for name in u_names {
            let t = bank.param_mut(&name).unwrap();
            let shape = t.shape().to_vec();
            *t = Tensor::trunc_normal(&shape, 0.05, &mut rng);
        }
        let router = Router::group_wise_init(
            &RouterConfig::default(),
            &space,
            space.group_count(),
            &mut rng,
        )
        .unwrap();
        let grouping = Grouping::new(&space, GroupingStrategy::Architectural);
        let data = blob_data(10);
        let subnet = sample_subnet(&space, &mut rng);
        let (images, labels) = data.gather(&[0, 1, 2, 3]);
        let patches = patchify(&images, space.image_size, space.patch_size);
        let mut tape = Tape::new();
        let routed = router.route_on_tape(&mut tape, &subnet, &space, &grouping).unwrap();
        let pid = tape.input(patches);
        let ctx = MoleCtx {
            bank: &bank,
            mixture: &routed.mixture,
            path: MolePath::Merged,
            train_bank: true,
        };
        let out = build_forward(
            &mut tape, &weights, &subnet, &space, pid, 4, Role::Input, Some(&ctx),
        )
        .unwrap();
        let loss = tape.cross_entropy(out.logits, &labels).unwrap();
        let mut coords = Vec::new();
        let mut crng = ChaCha8Rng::seed_from_u64(31);
        for prefix in ["lora.", "router.emb", "router.lstm", "router.head", "router.cls"] {
            coords.extend(sample_leaf_coords(&tape, prefix, 8, &mut crng));
        }
        assert!(!coords.is_empty());
        let report = check_coords(&mut tape, loss, &coords, CheckOpts::default());
        assert!(
            report.pass_fraction() >= 0.98,
            "pass fraction {} with {} failures",
            report.pass_fraction(),
            report.failures().count()
        );
    }
}
