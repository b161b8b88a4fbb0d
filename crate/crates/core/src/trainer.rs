//! The three training stages.
//!
//! 1. SuperNet pre-training with progressive path dropping.
//! 2. Distribution learning: per batch, `T` architectures are sampled from the
//!    gate under constraints drawn from a grid, their composite losses are
//!    averaged and three parameter groups (backbone, gate, batch
//!    representation) take one AdamW step each.
//! 3. Deployment sampling, SubNet extraction and task-only fine-tuning.
//!
//! All stages log one [`MetricsRecord`] per epoch and can be paused at an
//! epoch boundary and resumed bit-exactly from a [`TrainState`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archspace::{
    extract_subnet, layer_features, retain_count, LayerMask, Provenance, SubNet, SuperNet, SuperNetConfig,
};
use crate::diffcore::rng::{streams, RngState, RngStream};
use crate::diffcore::{softmax, AdamW, LrSchedule, Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalbench::logits_accuracy;
use crate::gate::{
    batch_repr_tape, batch_stats, bernoulli_sample_exact_k, gate_logits_tape, gumbel_soft_tape, sampling_probs_tape,
    select_gate_from_stats, GateConfig, GateOutput, GateParams, SampleMode,
};
use crate::harness::data::{Dataset, Splits};
use crate::harness::metrics::{MetricsRecord, MetricsSink};
use crate::scoring::{ema, gumbel_noise, ImportanceState, ScoreWeights};

pub const LR_GRID: [f64; 3] = [0.0001, 0.0005, 0.001];
pub const CONSTRAINT_GRID: [f64; 3] = [0.3, 0.4, 0.5];
pub const CORR_BUFFER_DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    /// Architectures sampled per stage-2 batch (`T`).
    pub samples_per_batch: usize,
    pub batch_size: usize,
    /// Fixed number of batches per epoch; `None` means one pass over the data.
    pub batches_per_epoch: Option<usize>,
    pub lr_gate: f64,
    pub lr_repr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub constraint_grid: Vec<f64>,
    /// Use one constraint for every stage-2 sample instead of drawing from the grid.
    pub fixed_constraint: Option<f64>,
    pub patience: usize,
    /// Final weight of the sparsity term; it ramps linearly from 0 over stage 2.
    pub w_sparsity: f64,
    pub w_diversity: f64,
    pub w_corr: f64,
    pub w_stability: f64,
    /// Path-drop keep probability at the first and last stage-1 epoch.
    pub keep_start: f64,
    pub keep_end: f64,
    pub self_distill: bool,
    pub distill_weight: f64,
    pub record_wall_clock: bool,
    pub run_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage2_epochs: 100,
            stage3_epochs: 20,
            samples_per_batch: 4,
            batch_size: 64,
            batches_per_epoch: None,
            lr_gate: 0.001,
            lr_repr: 0.0005,
            lr_backbone: 0.001,
            weight_decay: 0.01,
            constraint_grid: CONSTRAINT_GRID.to_vec(),
            fixed_constraint: None,
            patience: 15,
            w_sparsity: 0.1,
            w_diversity: 0.01,
            w_corr: 0.05,
            w_stability: 0.01,
            keep_start: 1.0,
            keep_end: 0.7,
            self_distill: false,
            distill_weight: 0.1,
            record_wall_clock: false,
            run_id: "run".into(),
        }
    }
}

fn check_fraction(name: &str, c: f64) -> Result<()> {
    if c > 0.0 && c <= 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("{name} {c} outside (0, 1]")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.stage3_epochs == 0 {
            return Err(Error::Config("every stage needs at least one epoch".into()));
        }
        self.validate_shape()
    }

    /// Everything except the epoch counts (zero-epoch stages are allowed when
    /// calling the stage functions directly).
    pub fn validate_shape(&self) -> Result<()> {
        if self.samples_per_batch == 0 {
            return Err(Error::Config("samples_per_batch must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches_per_epoch must be >= 1".into()));
        }
        for (name, v) in [
            ("lr_gate", self.lr_gate),
            ("lr_repr", self.lr_repr),
            ("lr_backbone", self.lr_backbone),
            ("weight_decay", self.weight_decay),
            ("w_sparsity", self.w_sparsity),
            ("w_diversity", self.w_diversity),
            ("w_corr", self.w_corr),
            ("w_stability", self.w_stability),
            ("distill_weight", self.distill_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.constraint_grid.is_empty() {
            return Err(Error::Config("constraint grid is empty".into()));
        }
        for &c in &self.constraint_grid {
            check_fraction("constraint", c)?;
        }
        if let Some(c) = self.fixed_constraint {
            check_fraction("constraint", c)?;
        }
        check_fraction("keep_start", self.keep_start)?;
        check_fraction("keep_end", self.keep_end)?;
        Ok(())
    }

    /// Keep probability used during stage-1 epoch `epoch`.
    pub fn keep_probability(&self, epoch: usize) -> f64 {
        if self.stage1_epochs <= 1 {
            return self.keep_start;
        }
        let f = epoch as f64 / (self.stage1_epochs - 1) as f64;
        self.keep_start + (self.keep_end - self.keep_start) * f.min(1.0)
    }
}

/// Per-step loss. Auxiliary fields hold weighted contributions, so `total`
/// is their plain sum with `task`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub sparsity: f64,
    pub diversity: f64,
    pub correlation: f64,
    pub stability: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn task_only(task: f64) -> Self {
        Self {
            task,
            total: task,
            ..Self::default()
        }
    }

    pub fn additivity_error(&self) -> f64 {
        let sum = self.task + self.sparsity + self.diversity + self.correlation + self.stability + self.distill;
        (self.total - sum).abs()
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.task += o.task;
        self.sparsity += o.sparsity;
        self.diversity += o.diversity;
        self.correlation += o.correlation;
        self.stability += o.stability;
        self.distill += o.distill;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.task,
            &mut self.sparsity,
            &mut self.diversity,
            &mut self.correlation,
            &mut self.stability,
            &mut self.distill,
            &mut self.total,
        ] {
            *v *= s;
        }
        self
    }
}

/// Raw (unweighted) auxiliary terms of one stage-2 step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxTerms {
    pub sparsity: f64,
    pub diversity: f64,
    pub correlation: f64,
    pub stability: f64,
}

/// Weights each auxiliary term and adds the task loss. `progress` in [0, 1]
/// ramps the sparsity weight.
pub fn total_loss(task: f64, aux: &AuxTerms, config: &TrainConfig, progress: f64) -> LossBreakdown {
    let sparsity = config.w_sparsity * progress * aux.sparsity;
    let diversity = config.w_diversity * aux.diversity;
    let correlation = config.w_corr * aux.correlation;
    let stability = config.w_stability * aux.stability;
    LossBreakdown {
        task,
        sparsity,
        diversity,
        correlation,
        stability,
        distill: 0.0,
        total: task + sparsity + diversity + correlation + stability,
    }
}

/// `|mean(p) − c|`.
pub fn sparsity_term(p: &[f64], c: f64) -> f64 {
    (p.iter().sum::<f64>() / p.len() as f64 - c).abs()
}

/// `ln W − H(p)`.
pub fn diversity_term(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    (p.len() as f64).ln() - h
}

/// Mean over layers of the scalar E[|R|]; layers with an empty buffer count as 0.
pub fn correlation_term(states: &[ImportanceState]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().map(|s| s.mean_abs_correlation().unwrap_or(0.0)).sum::<f64>() / states.len() as f64
}

/// `|mean(p) − c|` on the tape.
pub fn sparsity_tape(tape: &mut Tape, p: Var, c: f64) -> Var {
    let m = tape.mean(p);
    let d = tape.add_scalar(m, -c);
    tape.abs(d)
}

/// `ln W − H(p)` on the tape.
pub fn diversity_tape(tape: &mut Tape, p: Var) -> Var {
    let n = tape.value(p).len() as f64;
    let lp = tape.ln(p);
    let plp = tape.mul(p, lp).expect("same shape");
    let s = tape.sum(plp);
    tape.add_scalar(s, n.ln())
}

/// SuperNet, gate and importance states: everything a search run trains.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchModel {
    pub net: SuperNet,
    pub gate: GateParams,
    pub importance: Vec<ImportanceState>,
    /// Importance states fed only by full-forward activations and never by
    /// the gate. The score-based baseline ranks dimensions with these.
    pub detached: Vec<ImportanceState>,
    pub gate_config: GateConfig,
    pub score_weights: ScoreWeights,
}

impl SearchModel {
    pub fn new(net_config: SuperNetConfig, gate_config: GateConfig, score_weights: ScoreWeights, seed: u64) -> Result<Self> {
        gate_config.validate()?;
        score_weights.validate()?;
        let net = SuperNet::new(net_config, seed)?;
        let mut rng = RngStream::new(seed, streams::GATE_INIT);
        let gate = GateParams::new(net.config.input_dim, net.widths(), &gate_config, &mut rng);
        let importance = net
            .widths()
            .iter()
            .enumerate()
            .map(|(l, &w)| ImportanceState::new(l, w, CORR_BUFFER_DEPTH, &mut rng))
            .collect::<Vec<_>>();
        Ok(Self {
            net,
            gate,
            detached: importance.clone(),
            importance,
            gate_config,
            score_weights,
        })
    }

    /// Parameters updated by the gate optimizer: gate MLPs and importance logits/fusion.
    fn gate_group(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.gate.layers.iter_mut().flat_map(|g| g.params_mut()).collect();
        out.extend(self.importance.iter_mut().flat_map(|s| s.params_mut()));
        out
    }

    fn reset_moments(params: Vec<&mut Parameter>) {
        for p in params {
            let shape = p.shape().to_vec();
            p.m = Tensor::zeros(&shape);
            p.v = Tensor::zeros(&shape);
            p.step = 0;
            p.zero_grad();
        }
    }

    /// Mean combined score per layer.
    pub fn mean_scores(&self) -> Vec<f64> {
        self.importance
            .iter()
            .map(|s| s.current_score(&self.score_weights).mean())
            .collect()
    }

    /// Layer features of the unmasked SuperNet on a batch.
    pub fn layer_features(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.net.forward(batch)?.activations.iter().map(layer_features).collect()
    }

    /// Deployment-mode gate outputs (no noise, top-k of `p_l`) for one constraint.
    pub fn deploy(&self, batch: &Tensor, constraint: f64) -> Result<Vec<GateOutput>> {
        check_fraction("constraint", constraint)?;
        let stats = batch_stats(batch)?;
        let feats = self.layer_features(batch)?;
        let mut unused = RngStream::new(0, streams::SAMPLING);
        feats
            .iter()
            .enumerate()
            .map(|(l, f)| {
                let score = self.importance[l].current_score(&self.score_weights);
                select_gate_from_stats(
                    &stats,
                    f,
                    constraint,
                    &score,
                    &self.gate,
                    l,
                    &self.gate_config,
                    SampleMode::Deploy,
                    &mut unused,
                )
            })
            .collect()
    }

    pub fn deploy_masks(&self, batch: &Tensor, constraint: f64) -> Result<Vec<LayerMask>> {
        Ok(self.deploy(batch, constraint)?.into_iter().map(|g| g.mask).collect())
    }

    /// Deployment accuracy of the masked SuperNet on `split`, with masks
    /// drawn from `deploy_batch`.
    pub fn deployment_accuracy(&self, deploy_batch: &Tensor, split: &Dataset, constraint: f64) -> Result<f64> {
        let masks = self.deploy_masks(deploy_batch, constraint)?;
        let out = self.net.forward_masked(&masks, &split.x)?;
        logits_accuracy(&out.logits, &split.y)
    }
}

/// Per-consumer random streams of a run.
#[derive(Clone, Debug)]
pub struct Streams {
    pub gate_noise: RngStream,
    pub sampling: RngStream,
    pub shuffle: RngStream,
    pub path_drop: RngStream,
    pub constraint: RngStream,
    pub dynamic_noise: RngStream,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            gate_noise: RngStream::new(seed, streams::GATE_NOISE),
            sampling: RngStream::new(seed, streams::SAMPLING),
            shuffle: RngStream::new(seed, streams::SHUFFLE),
            path_drop: RngStream::new(seed, streams::PATH_DROP),
            constraint: RngStream::new(seed, streams::CONSTRAINT),
            dynamic_noise: RngStream::new(seed, streams::DYNAMIC_NOISE),
        }
    }

    pub fn states(&self) -> [RngState; 6] {
        [
            self.gate_noise.state(),
            self.sampling.state(),
            self.shuffle.state(),
            self.path_drop.state(),
            self.constraint.state(),
            self.dynamic_noise.state(),
        ]
    }

    pub fn from_states(s: [RngState; 6]) -> Self {
        Self {
            gate_noise: RngStream::from_state(s[0]),
            sampling: RngStream::from_state(s[1]),
            shuffle: RngStream::from_state(s[2]),
            path_drop: RngStream::from_state(s[3]),
            constraint: RngStream::from_state(s[4]),
            dynamic_noise: RngStream::from_state(s[5]),
        }
    }
}

/// Resumable position inside the current stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Stage currently in progress (0 before any training).
    pub stage: u8,
    /// Completed epochs in the current stage.
    pub epoch: usize,
    /// Optimizer steps taken in the current stage.
    pub global_step: u64,
    pub best_val: f64,
    pub since_improvement: usize,
    pub stopped: bool,
    /// Batches of the current stage-2 epoch whose T masks were all identical.
    pub collapsed_batches: usize,
    pub streams: Streams,
    /// Backbone, gate, batch-representation optimizers.
    pub optim: [AdamW; 3],
}

impl TrainState {
    pub fn new(seed: u64, weight_decay: f64) -> Self {
        let opt = AdamW {
            weight_decay,
            ..AdamW::default()
        };
        Self {
            stage: 0,
            epoch: 0,
            global_step: 0,
            best_val: f64::NEG_INFINITY,
            since_improvement: 0,
            stopped: false,
            collapsed_batches: 0,
            streams: Streams::new(seed),
            optim: [opt.clone(), opt.clone(), opt],
        }
    }

    /// Starts `stage` unless it is already in progress.
    fn enter(&mut self, stage: u8) -> bool {
        if self.stage == stage {
            return false;
        }
        self.stage = stage;
        self.epoch = 0;
        self.global_step = 0;
        self.best_val = f64::NEG_INFINITY;
        self.since_improvement = 0;
        self.stopped = false;
        self.collapsed_batches = 0;
        for o in &mut self.optim {
            o.skipped = 0;
        }
        true
    }

    /// Updates early-stopping bookkeeping; returns whether training should stop.
    fn observe(&mut self, val: f64, patience: usize) -> bool {
        if val > self.best_val {
            self.best_val = val;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= patience
    }
}

/// Called after each epoch; returning `false` pauses the stage.
pub type EpochHook<'a> = &'a mut dyn FnMut(&SearchModel, &TrainState) -> Result<bool>;

/// Where a stage reports to.
pub struct StageIo<'a> {
    pub sink: &'a mut dyn MetricsSink,
    pub on_epoch: Option<EpochHook<'a>>,
}

impl<'a> StageIo<'a> {
    pub fn new(sink: &'a mut dyn MetricsSink) -> Self {
        Self { sink, on_epoch: None }
    }

    fn epoch_end(&mut self, model: &SearchModel, state: &TrainState) -> Result<bool> {
        self.sink.flush()?;
        match self.on_epoch.as_mut() {
            Some(hook) => hook(model, state),
            None => Ok(true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub epochs_run: usize,
    pub initial_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub early_stopped: bool,
    /// The stage returned at an epoch boundary because the hook asked it to.
    pub paused: bool,
    pub last_loss: LossBreakdown,
}

/// Index batches for one epoch.
pub fn epoch_batches(n: usize, config: &TrainConfig, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let b = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    match config.batches_per_epoch {
        None => order.chunks(b).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect(),
        Some(m) => {
            let mut out = Vec::with_capacity(m);
            let mut pos = 0;
            for _ in 0..m {
                let mut batch = Vec::with_capacity(b);
                while batch.len() < b {
                    if pos == n {
                        rng.shuffle(&mut order);
                        pos = 0;
                    }
                    batch.push(order[pos]);
                    pos += 1;
                }
                out.push(batch);
            }
            out
        }
    }
}

fn batches_per_epoch(n: usize, config: &TrainConfig) -> usize {
    config.batches_per_epoch.unwrap_or_else(|| {
        let b = config.batch_size.min(n).max(1);
        let full = n / b;
        full + usize::from(n % b >= 2)
    })
}

fn schedule(peak: f64, epochs: usize, n: usize, config: &TrainConfig) -> LrSchedule {
    LrSchedule::one_cycle(peak, (epochs * batches_per_epoch(n, config)).max(1) as u64)
}

fn finite_or_abort(loss: &LossBreakdown, stage: u8, state: &TrainState) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "stage {stage} epoch {} step {}: loss {loss:?}",
            state.epoch, state.global_step
        )))
    }
}

fn wall(start: Instant, config: &TrainConfig) -> u64 {
    if config.record_wall_clock {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Full-network accuracy of the SuperNet on a split.
pub fn supernet_accuracy(net: &SuperNet, split: &Dataset) -> Result<f64> {
    logits_accuracy(&net.forward(&split.x)?.logits, &split.y)
}

fn path_drop_masks(widths: &[usize], keep: f64, rng: &mut RngStream) -> Option<Vec<Tensor>> {
    if keep >= 1.0 {
        return None;
    }
    Some(
        widths
            .iter()
            .map(|&w| {
                let mut bits: Vec<f64> = (0..w).map(|_| f64::from(u8::from(rng.uniform() < keep))).collect();
                if bits.iter().all(|&b| b == 0.0) {
                    bits[rng.below(w)] = 1.0;
                }
                Tensor::vector(bits)
            })
            .collect(),
    )
}

/// Stage 1: supervised SuperNet training with progressive path dropping.
pub fn stage1_pretrain(
    model: &mut SearchModel,
    data: &Splits,
    config: &TrainConfig,
    state: &mut TrainState,
    io: &mut StageIo,
) -> Result<StageReport> {
    config.validate_shape()?;
    if state.enter(1) {
        SearchModel::reset_moments(model.net.params_mut());
    }
    let initial = supernet_accuracy(&model.net, &data.val)?;
    let sched = schedule(config.lr_backbone, config.stage1_epochs, data.train.len(), config);
    let widths = model.net.widths().to_vec();
    let mut report = StageReport {
        stage: 1,
        epochs_run: 0,
        initial_val_accuracy: initial,
        final_val_accuracy: initial,
        best_val_accuracy: state.best_val.max(initial),
        early_stopped: state.stopped,
        paused: false,
        last_loss: LossBreakdown::default(),
    };
    while state.epoch < config.stage1_epochs && !state.stopped {
        let start = Instant::now();
        let keep = config.keep_probability(state.epoch);
        let batches = epoch_batches(data.train.len(), config, &mut state.streams.shuffle);
        let mut sum = LossBreakdown::default();
        for idx in &batches {
            let batch = data.train.subset(idx);
            let drop = path_drop_masks(&widths, keep, &mut state.streams.path_drop);
            let mut tape = Tape::new();
            let vars = model.net.bind(&mut tape);
            let x = tape.constant(batch.x.clone());
            let masks: Vec<Option<Var>> = match &drop {
                Some(ms) => ms.iter().map(|m| Some(tape.constant(m.clone()))).collect(),
                None => vec![None; widths.len()],
            };
            let (logits, _) = model.net.forward_tape(&mut tape, &vars, x, &masks)?;
            let ce = tape.cross_entropy(logits, &batch.y)?;
            let mut loss = LossBreakdown::task_only(tape.value(ce).data()[0]);
            let mut objective = ce;
            if config.self_distill && drop.is_some() {
                let full = model.net.forward(&batch.x)?.logits;
                let mut target = full.clone();
                let mut entropy = 0.0;
                for r in 0..full.rows() {
                    let p = softmax(full.row(r));
                    entropy -= p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
                    target.row_mut(r).copy_from_slice(&p);
                }
                let sce = tape.soft_cross_entropy(logits, target)?;
                let w = tape.scale(sce, config.distill_weight);
                objective = tape.add(ce, w)?;
                let kl = tape.value(sce).data()[0] - entropy / full.rows() as f64;
                loss.distill = config.distill_weight * kl;
                loss.total = loss.task + loss.distill;
            }
            finite_or_abort(&loss, 1, state)?;
            let grads = tape.backward(objective);
            model.net.accumulate(&grads, &vars);
            let lr = sched.lr(state.global_step.min(sched.total_steps))?;
            state.optim[0].step(model.net.params_mut(), lr);
            state.global_step += 1;
            sum.add(&loss);
        }
        let mean = sum.scaled(1.0 / batches.len().max(1) as f64);
        let val = supernet_accuracy(&model.net, &data.val)?;
        state.epoch += 1;
        state.stopped = state.observe(val, config.patience);
        io.sink.record(MetricsRecord {
            run_id: config.run_id.clone(),
            stage: 1,
            epoch: state.epoch,
            step: state.global_step,
            loss: mean,
            val_accuracy: val,
            k: widths.clone(),
            mean_score: model.mean_scores(),
            wall_ms: wall(start, config),
            warning: None,
        })?;
        report.epochs_run += 1;
        report.final_val_accuracy = val;
        report.last_loss = mean;
        report.early_stopped = state.stopped;
        report.best_val_accuracy = state.best_val;
        if !io.epoch_end(model, state)? {
            report.paused = state.epoch < config.stage1_epochs && !state.stopped;
            return Ok(report);
        }
    }
    Ok(report)
}

/// Output of one stage-2 optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Masks of every sample, `[t][l]`.
    pub masks: Vec<Vec<LayerMask>>,
    pub constraints: Vec<f64>,
}

/// One stage-2 batch: sample `T` architectures, average the composite loss,
/// update the three parameter groups and the importance states.
pub fn stage2_step(
    model: &mut SearchModel,
    batch: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
    lrs: [f64; 3],
    progress: f64,
) -> Result<StepOutcome> {
    let n_layers = model.net.num_layers();
    let stats = batch_stats(&batch.x)?;
    let full = model.net.forward(&batch.x)?.activations;
    let feats = full.iter().map(layer_features).collect::<Result<Vec<_>>>()?;
    let weights = model.score_weights.clone();
    let gcfg = model.gate_config.clone();

    let mut tape = Tape::new();
    let net_vars = model.net.bind(&mut tape);
    let repr_vars = model.gate.repr.bind(&mut tape);
    let gate_vars: Vec<Vec<Var>> = model.gate.layers.iter().map(|g| g.bind(&mut tape)).collect();
    let imp_vars: Vec<Vec<Var>> = model.importance.iter().map(|s| s.bind(&mut tape)).collect();

    let emb = batch_repr_tape(&mut tape, &repr_vars, &stats)?;
    let mut scores = Vec::with_capacity(n_layers);
    let mut logits = Vec::with_capacity(n_layers);
    let mut noises = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let w = model.importance[l].width();
        let noise = gumbel_noise(&mut state.streams.dynamic_noise, batch.len(), w);
        scores.push(model.importance[l].score_tape(&mut tape, &imp_vars[l], &feats[l], &noise, &weights)?);
        logits.push(gate_logits_tape(&mut tape, &gate_vars[l], emb, &feats[l], w)?);
        noises.push(noise);
    }

    let x = tape.constant(batch.x.clone());
    let t_count = config.samples_per_batch;
    let mut ces = Vec::with_capacity(t_count);
    let mut sparsities = Vec::with_capacity(t_count);
    let mut diversities = Vec::with_capacity(t_count);
    let mut log_probs = Vec::with_capacity(t_count);
    let mut all_masks = Vec::with_capacity(t_count);
    let mut constraints = Vec::with_capacity(t_count);
    let mut last_acts = Vec::new();
    for _ in 0..t_count {
        let c = match config.fixed_constraint {
            Some(c) => c,
            None => config.constraint_grid[state.streams.constraint.below(config.constraint_grid.len())],
        };
        let mut mask_vars = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers);
        let mut sp = Vec::with_capacity(n_layers);
        let mut dv = Vec::with_capacity(n_layers);
        let mut lp = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let w = model.importance[l].width();
            let eps: Vec<f64> = (0..w).map(|_| state.streams.gate_noise.gumbel()).collect();
            let soft = gumbel_soft_tape(&mut tape, logits[l], Some(&eps), gcfg.tau)?;
            let probs = sampling_probs_tape(&mut tape, soft, scores[l].score)?;
            let pv = tape.value(probs).data().to_vec();
            let k = retain_count(c, w);
            let (mask, _) = bernoulli_sample_exact_k(l, &pv, k, &mut state.streams.sampling)?;
            if mask.k() != k {
                return Err(Error::State(format!("layer {l}: sampled {} dimensions, expected {k}", mask.k())));
            }
            let hard = Tensor::vector(mask.as_f64());
            let mv = if gcfg.straight_through {
                tape.straight_through(hard.clone(), probs)?
            } else {
                tape.constant(hard.clone())
            };
            if gcfg.score_function {
                let lnp = tape.ln(probs);
                let sel = tape.constant(hard);
                let picked = tape.mul(lnp, sel)?;
                lp.push(tape.sum(picked));
            }
            sp.push(sparsity_tape(&mut tape, probs, c));
            dv.push(diversity_tape(&mut tape, probs));
            mask_vars.push(Some(mv));
            masks.push(mask);
        }
        let (out, acts) = model.net.forward_tape(&mut tape, &net_vars, x, &mask_vars)?;
        ces.push(tape.cross_entropy(out, &batch.y)?);
        sparsities.push(sum_vars(&mut tape, &sp)?);
        diversities.push(sum_vars(&mut tape, &dv)?);
        if gcfg.score_function {
            log_probs.push(sum_vars(&mut tape, &lp)?);
        }
        last_acts = acts;
        all_masks.push(masks);
        constraints.push(c);
    }
    let inv_t = 1.0 / t_count as f64;
    let task_sum = sum_vars(&mut tape, &ces)?;
    let task = tape.scale(task_sum, inv_t);
    let sp_sum = sum_vars(&mut tape, &sparsities)?;
    let sparsity = tape.scale(sp_sum, inv_t);
    let dv_sum = sum_vars(&mut tape, &diversities)?;
    let diversity = tape.scale(dv_sum, inv_t);

    let corr = correlation_term(&model.importance);
    let mut stab_parts = Vec::with_capacity(n_layers);
    let mut feature_moves = 0.0;
    for (l, s) in model.importance.iter().enumerate() {
        let prev = tape.constant(Tensor::vector(s.dynamic.clone()));
        let d = tape.sub(scores[l].dynamic, prev)?;
        let a = tape.abs(d);
        stab_parts.push(tape.sum(a));
        feature_moves += s.feature_delta;
    }
    let dyn_moves = sum_vars(&mut tape, &stab_parts)?;
    let stability = tape.add_scalar(dyn_moves, feature_moves);

    let aux = AuxTerms {
        sparsity: tape.value(sparsity).data()[0],
        diversity: tape.value(diversity).data()[0],
        correlation: corr,
        stability: tape.value(stability).data()[0],
    };
    let loss = total_loss(tape.value(task).data()[0], &aux, config, progress);
    finite_or_abort(&loss, 2, state)?;

    let ws = tape.scale(sparsity, config.w_sparsity * progress);
    let wd = tape.scale(diversity, config.w_diversity);
    let wst = tape.scale(stability, config.w_stability);
    let mut objective = sum_vars(&mut tape, &[task, ws, wd, wst])?;
    if gcfg.score_function && t_count > 1 {
        // Leave-mean-out feedback: Σ_t (L_t − mean L) · ln P(A_t) / T.
        let task_vals: Vec<f64> = ces.iter().map(|&c| tape.value(c).data()[0]).collect();
        let mean = task_vals.iter().sum::<f64>() * inv_t;
        let mut terms = Vec::with_capacity(t_count);
        for (lp, v) in log_probs.iter().zip(&task_vals) {
            terms.push(tape.scale(*lp, (v - mean) * inv_t));
        }
        let feedback = sum_vars(&mut tape, &terms)?;
        objective = tape.add(objective, feedback)?;
    }

    let grads = tape.backward(objective);
    model.net.accumulate(&grads, &net_vars);
    model.gate.repr.accumulate(&grads, &repr_vars);
    for (g, v) in model.gate.layers.iter_mut().zip(&gate_vars) {
        g.accumulate(&grads, v);
    }
    for (s, v) in model.importance.iter_mut().zip(&imp_vars) {
        s.accumulate(&grads, v);
    }
    state.optim[0].step(model.net.params_mut(), lrs[0]);
    state.optim[1].step(model.gate_group(), lrs[1]);
    state.optim[2].step(model.gate.repr.params_mut(), lrs[2]);

    for l in 0..n_layers {
        let fresh = tape.value(scores[l].dynamic).data().to_vec();
        let s = &mut model.importance[l];
        if fresh.iter().all(|v| v.is_finite()) {
            s.commit_dynamic(fresh);
        } else {
            s.skipped += 1;
        }
        let acts = tape.value(last_acts[l]).clone();
        s.feature_importance_update(&acts, weights.alpha)?;
        s.push_activations(&acts)?;

        // Same noise draw as the gated state, so both see identical inputs.
        let d = &mut model.detached[l];
        let fused = d.fusion(&feats[l])?;
        if fused.iter().all(|v| v.is_finite()) {
            let eb = d.dynamic_gate_mean(&fused, &noises[l], weights.noise);
            let next = ema(&d.dynamic, &eb, weights.alpha);
            d.commit_dynamic(next);
        } else {
            d.skipped += 1;
        }
        d.feature_importance_update(&full[l], weights.alpha)?;
        d.push_activations(&full[l])?;
    }
    Ok(StepOutcome {
        loss,
        masks: all_masks,
        constraints,
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Mean deployment accuracy over the constraint grid, with masks drawn from
/// the validation split itself.
pub fn stage2_validation(model: &SearchModel, data: &Splits, config: &TrainConfig) -> Result<f64> {
    let grid: Vec<f64> = match config.fixed_constraint {
        Some(c) => vec![c],
        None => config.constraint_grid.clone(),
    };
    let mut acc = 0.0;
    for &c in &grid {
        acc += model.deployment_accuracy(&data.val.x, &data.val, c)?;
    }
    Ok(acc / grid.len() as f64)
}

/// Stage 2: dual-loop distribution learning.
pub fn stage2_distribution_learning(
    model: &mut SearchModel,
    data: &Splits,
    config: &TrainConfig,
    state: &mut TrainState,
    io: &mut StageIo,
) -> Result<StageReport> {
    config.validate_shape()?;
    if state.enter(2) {
        SearchModel::reset_moments(model.net.params_mut());
        SearchModel::reset_moments(model.gate_group());
        SearchModel::reset_moments(model.gate.repr.params_mut());
    }
    let n = data.train.len();
    let scheds = [
        schedule(config.lr_backbone, config.stage2_epochs, n, config),
        schedule(config.lr_gate, config.stage2_epochs, n, config),
        schedule(config.lr_repr, config.stage2_epochs, n, config),
    ];
    let total = scheds[0].total_steps;
    let initial = stage2_validation(model, data, config)?;
    let mut report = StageReport {
        stage: 2,
        epochs_run: 0,
        initial_val_accuracy: initial,
        final_val_accuracy: initial,
        best_val_accuracy: state.best_val.max(initial),
        early_stopped: state.stopped,
        paused: false,
        last_loss: LossBreakdown::default(),
    };
    while state.epoch < config.stage2_epochs && !state.stopped {
        let start = Instant::now();
        let batches = epoch_batches(n, config, &mut state.streams.shuffle);
        let mut sum = LossBreakdown::default();
        let mut last_k = Vec::new();
        state.collapsed_batches = 0;
        for idx in &batches {
            let batch = data.train.subset(idx);
            let step = state.global_step.min(total);
            let lrs = [scheds[0].lr(step)?, scheds[1].lr(step)?, scheds[2].lr(step)?];
            let progress = step as f64 / total as f64;
            let out = stage2_step(model, &batch, config, state, lrs, progress)?;
            if out.masks.len() > 1 && out.masks.iter().all(|m| *m == out.masks[0]) {
                state.collapsed_batches += 1;
            }
            last_k = out.masks.last().map(|ms| ms.iter().map(LayerMask::k).collect()).unwrap_or_default();
            state.global_step += 1;
            sum.add(&out.loss);
        }
        let mean = sum.scaled(1.0 / batches.len().max(1) as f64);
        let warning = (config.samples_per_batch > 1 && state.collapsed_batches * 10 > batches.len() * 9).then(|| {
            format!(
                "diversity collapse: {} of {} batches sampled identical masks",
                state.collapsed_batches,
                batches.len()
            )
        });
        let val = stage2_validation(model, data, config)?;
        state.epoch += 1;
        state.stopped = state.observe(val, config.patience);
        io.sink.record(MetricsRecord {
            run_id: config.run_id.clone(),
            stage: 2,
            epoch: state.epoch,
            step: state.global_step,
            loss: mean,
            val_accuracy: val,
            k: last_k,
            mean_score: model.mean_scores(),
            wall_ms: wall(start, config),
            warning,
        })?;
        report.epochs_run += 1;
        report.final_val_accuracy = val;
        report.last_loss = mean;
        report.early_stopped = state.stopped;
        report.best_val_accuracy = state.best_val;
        if !io.epoch_end(model, state)? {
            report.paused = state.epoch < config.stage2_epochs && !state.stopped;
            return Ok(report);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct Stage3Outcome {
    pub subnet: SubNet,
    pub masks: Vec<LayerMask>,
    /// Validation accuracy of the extracted SubNet before fine-tuning.
    pub pre_accuracy: f64,
    pub report: StageReport,
}

pub fn subnet_accuracy(subnet: &SubNet, split: &Dataset) -> Result<f64> {
    logits_accuracy(&subnet.forward(&split.x)?, &split.y)
}

/// Stage 3: deployment sample, extraction and task-only fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn stage3_finetune(
    model: &SearchModel,
    data: &Splits,
    deploy_batch: &Tensor,
    constraint: f64,
    seed: u64,
    config: &TrainConfig,
    state: &mut TrainState,
    io: &mut StageIo,
) -> Result<Stage3Outcome> {
    config.validate_shape()?;
    check_fraction("constraint", constraint)?;
    let masks = model.deploy_masks(deploy_batch, constraint)?;
    let provenance = Provenance {
        supernet_checksum: model.net.checksum(),
        constraint,
        seed,
    };
    let mut subnet = extract_subnet(&model.net, &masks, provenance)?;
    let pre = subnet_accuracy(&subnet, &data.val)?;
    state.stage = 2;
    let report = finetune_subnet(&mut subnet, data, config, state, io)?;
    Ok(Stage3Outcome {
        subnet,
        masks,
        pre_accuracy: pre,
        report,
    })
}

/// Task-only fine-tuning of an extracted SubNet (stage 3 proper).
pub fn finetune_subnet(
    subnet: &mut SubNet,
    data: &Splits,
    config: &TrainConfig,
    state: &mut TrainState,
    io: &mut StageIo,
) -> Result<StageReport> {
    config.validate_shape()?;
    state.enter(3);
    let pre = subnet_accuracy(subnet, &data.val)?;
    let sched = schedule(config.lr_backbone, config.stage3_epochs, data.train.len(), config);
    let k: Vec<usize> = subnet.masks.iter().map(LayerMask::k).collect();
    let mut report = StageReport {
        stage: 3,
        epochs_run: 0,
        initial_val_accuracy: pre,
        final_val_accuracy: pre,
        best_val_accuracy: pre,
        early_stopped: false,
        paused: false,
        last_loss: LossBreakdown::default(),
    };
    while state.epoch < config.stage3_epochs && !state.stopped {
        let start = Instant::now();
        let batches = epoch_batches(data.train.len(), config, &mut state.streams.shuffle);
        let mut sum = LossBreakdown::default();
        for idx in &batches {
            let batch = data.train.subset(idx);
            let mut tape = Tape::new();
            let vars = subnet.bind(&mut tape);
            let x = tape.constant(batch.x.clone());
            let logits = subnet.forward_tape(&mut tape, &vars, x)?;
            let ce = tape.cross_entropy(logits, &batch.y)?;
            let loss = LossBreakdown::task_only(tape.value(ce).data()[0]);
            finite_or_abort(&loss, 3, state)?;
            let grads = tape.backward(ce);
            subnet.accumulate(&grads, &vars);
            let lr = sched.lr(state.global_step.min(sched.total_steps))?;
            state.optim[0].step(subnet.params_mut(), lr);
            state.global_step += 1;
            sum.add(&loss);
        }
        let mean = sum.scaled(1.0 / batches.len().max(1) as f64);
        let val = subnet_accuracy(subnet, &data.val)?;
        state.epoch += 1;
        state.stopped = state.observe(val, config.patience);
        io.sink.record(MetricsRecord {
            run_id: config.run_id.clone(),
            stage: 3,
            epoch: state.epoch,
            step: state.global_step,
            loss: mean,
            val_accuracy: val,
            k: k.clone(),
            mean_score: Vec::new(),
            wall_ms: wall(start, config),
            warning: None,
        })?;
        io.sink.flush()?;
        report.epochs_run += 1;
        report.final_val_accuracy = val;
        report.last_loss = mean;
        report.early_stopped = state.stopped;
        report.best_val_accuracy = state.best_val;
    }
    Ok(report)
}

/// Writes SubNet weights back into the retained slices of a SuperNet, so the
/// masked SuperNet computes the same function as the SubNet.
pub fn write_back(net: &mut SuperNet, subnet: &SubNet) -> Result<()> {
    net.validate_masks(&subnet.masks)?;
    let mut prev: Option<Vec<usize>> = None;
    let dense_pairs = net.layers.iter_mut().zip(&subnet.layers).zip(subnet.masks.iter().map(|m| Some(m.retained())));
    let head = std::iter::once((&mut net.head, &subnet.head, None));
    for (full, small, cols) in dense_pairs.map(|((a, b), c)| (a, b, c)).chain(head) {
        let rows: Vec<usize> = prev.clone().unwrap_or_else(|| (0..full.in_dim()).collect());
        let cols_v: Vec<usize> = cols.clone().unwrap_or_else(|| (0..full.out_dim()).collect());
        let out_dim = full.out_dim();
        for (si, &r) in rows.iter().enumerate() {
            for (sj, &c) in cols_v.iter().enumerate() {
                full.weight.value.data_mut()[r * out_dim + c] = small.weight.value.at(si, sj);
            }
        }
        for (sj, &c) in cols_v.iter().enumerate() {
            full.bias.value.data_mut()[c] = small.bias.value.data()[sj];
        }
        prev = cols;
    }
    Ok(())
}
