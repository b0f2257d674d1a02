//! Incremental training: the per-task SGD loop for every method, the learning
//! rate schedule, post-hoc bias corrections and the two-branch distillation
//! comparison.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, new_data_task_ratio, EvalReport};
use crate::layout::TaskLayout;
use crate::losses::{ce_loss, ce_ss_loss, gkd_loss, tkd_loss, LossResult};
use crate::memory::ExemplarMemory;
use crate::model::{sgd_step, IncrementalClassifier, ModelSnapshot, Scorer, SgdConfig, SgdState};
use crate::numerics::{log_sum_exp_range, seeded_rng, softmax_range, Matrix};
use crate::sampler::{joint_batches, rp_batches, Batch, BatchPlan, Origin};

/// Training recipe. Each one fixes the classification loss, the batch scheme
/// and the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy over all classes, shuffled batches over new data ∪ memory.
    Ft,
    /// `Ft` plus global distillation.
    CeGkd,
    /// `Ft` plus task-wise distillation.
    CeTkd,
    /// Separated softmax, ratio-preserving batches, task-wise distillation.
    Ssil,
    /// `Ssil` with shuffled joint batches instead of ratio-preserving ones.
    TkdSs,
    /// `Ssil` with the ordinary cross-entropy instead of separated softmax.
    TkdRp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdKind {
    None,
    Global,
    TaskWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeKind {
    /// Softmax over every class seen so far.
    Full,
    /// Softmax over the old or the new block, by the sample's label.
    Separated,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ft,
        Method::CeGkd,
        Method::CeTkd,
        Method::Ssil,
        Method::TkdSs,
        Method::TkdRp,
    ];

    pub fn uses_ss_loss(self) -> bool {
        matches!(self, Method::Ssil | Method::TkdSs)
    }

    pub fn uses_rp_batches(self) -> bool {
        matches!(self, Method::Ssil | Method::TkdRp)
    }

    pub fn kd_kind(self) -> KdKind {
        match self {
            Method::Ft => KdKind::None,
            Method::CeGkd => KdKind::Global,
            Method::CeTkd | Method::Ssil | Method::TkdSs | Method::TkdRp => KdKind::TaskWise,
        }
    }

    pub fn ce_kind(self) -> CeKind {
        if self.uses_ss_loss() {
            CeKind::Separated
        } else {
            CeKind::Full
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::CeGkd => "ce_gkd",
            Method::CeTkd => "ce_tkd",
            Method::Ssil => "ssil",
            Method::TkdSs => "tkd_ss",
            Method::TkdRp => "tkd_rp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Optional bias correction applied after each task from the second on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcess {
    #[default]
    None,
    /// Fine-tune on the balanced exemplar memory.
    Bft,
    /// Affine rescaling of the new-class logits fit on a balanced holdout.
    ScoreCorrection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BftConfig {
    pub epochs: usize,
    /// Divided by the task number.
    pub base_lr: f64,
    pub batch_size: usize,
    pub head_only: bool,
}

impl Default for BftConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 0.001,
            batch_size: 40,
            head_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreCorrectionConfig {
    pub max_iters: usize,
    /// Stop once the gradient norm drops below this.
    pub tolerance: f64,
    pub fit_alpha: bool,
    /// Share of each new class held out of training for the fit.
    pub holdout_fraction: f64,
}

impl Default for ScoreCorrectionConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tolerance: 1e-10,
            fit_alpha: true,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub base_lr: f64,
    /// 0-based epochs at which the rate is multiplied by `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub tau: f64,
    pub batch_plan: BatchPlan,
    /// Batch size of the shuffled joint batches used by non-RP methods.
    pub joint_batch_size: usize,
    pub seed: u64,
    pub post_process: PostProcess,
    pub bft: BftConfig,
    pub score_correction: ScoreCorrectionConfig,
    /// `k` of the second accuracy in each report.
    pub topk: usize,
}

impl TrainConfig {
    /// Desk-scale schedule: 40 epochs, drops at 25 and 35, `N_D = 32`,
    /// `N_M = 8`, joint batches of 40.
    pub fn desk(method: Method, seed: u64) -> Self {
        Self {
            method,
            epochs: 40,
            base_lr: 0.1,
            lr_drops: vec![25, 35],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            tau: 2.0,
            batch_plan: BatchPlan {
                new_batch_size: 32,
                replay_batch_size: 8,
            },
            joint_batch_size: 40,
            seed,
            post_process: PostProcess::None,
            bft: BftConfig::default(),
            score_correction: ScoreCorrectionConfig::default(),
            topk: 2,
        }
    }

    /// Full-size schedule: 100 epochs, drops at 40 and 80, `N_D = 128` and
    /// `N_M` from the task count.
    pub fn full_scale(method: Method, seed: u64, total_tasks: usize) -> Self {
        let plan = BatchPlan::for_task_count(total_tasks);
        Self {
            epochs: 100,
            lr_drops: vec![40, 80],
            batch_plan: plan,
            joint_batch_size: plan.new_batch_size,
            topk: 5,
            ..Self::desk(method, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(invalid("base learning rate must be positive"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid("temperature must be positive"));
        }
        if !self.lr_drops.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("learning-rate drop epochs must be strictly increasing"));
        }
        if self.lr_drops.last().is_some_and(|&e| e >= self.epochs) {
            return Err(invalid("learning-rate drop epochs must precede the last epoch"));
        }
        if self.batch_plan.new_batch_size == 0 || self.joint_batch_size == 0 {
            return Err(invalid("batch sizes must be at least 1"));
        }
        if self.method.uses_rp_batches() && self.batch_plan.replay_batch_size == 0 {
            return Err(invalid("ratio-preserving batches need a replay batch size ≥ 1"));
        }
        if self.topk == 0 {
            return Err(invalid("top-k needs k ≥ 1"));
        }
        if self.bft.epochs == 0 || self.bft.batch_size == 0 || !(self.bft.base_lr > 0.0) {
            return Err(invalid("balanced fine-tuning needs positive epochs, batch size and rate"));
        }
        let f = self.score_correction.holdout_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid("holdout fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Step size for a 0-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.lr_drop_factor.powi(drops as i32)
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
            freeze_backbone: false,
        }
    }
}

/// Mean loss components over one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub ce: f64,
    pub kd: f64,
}

/// The per-sample training loss of a method at task `t`.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub method: Method,
    pub layout: &'a TaskLayout,
    pub t: usize,
    pub tau: f64,
    /// Include the distillation term (ignored at `t = 1`).
    pub distill: bool,
}

impl Objective<'_> {
    fn kd_active(&self) -> bool {
        self.distill && self.t >= 2 && self.method.kd_kind() != KdKind::None
    }

    /// `(classification term, distillation term)` for one sample.
    pub fn sample(
        &self,
        logits: &[f64],
        teacher_logits: Option<&[f64]>,
        label: usize,
    ) -> Result<(LossResult, Option<LossResult>)> {
        let ce = match self.method.ce_kind() {
            CeKind::Separated => ce_ss_loss(logits, label, self.layout, self.t)?,
            CeKind::Full => ce_loss(logits, label, 0..self.layout.classes_through(self.t))?,
        };
        if !self.kd_active() {
            return Ok((ce, None));
        }
        let teacher = teacher_logits
            .ok_or_else(|| invalid(format!("task {} distillation needs a teacher", self.t)))?;
        let kd = match self.method.kd_kind() {
            KdKind::Global => gkd_loss(
                logits,
                teacher,
                0..self.layout.classes_through(self.t - 1),
                self.tau,
            )?,
            KdKind::TaskWise => tkd_loss(logits, teacher, self.layout, self.t, self.tau)?,
            KdKind::None => unreachable!("checked by kd_active"),
        };
        Ok((ce, Some(kd)))
    }

    /// Mean loss over the batch and the logit gradient of that mean.
    pub fn batch(
        &self,
        logits: &Matrix,
        teacher_logits: Option<&Matrix>,
        labels: &[usize],
    ) -> Result<(BatchLoss, Matrix)> {
        let n = labels.len();
        if logits.rows() != n || n == 0 {
            return Err(invalid("logit rows and labels disagree"));
        }
        let scale = 1.0 / n as f64;
        let mut grads = Matrix::zeros(n, logits.cols());
        let mut loss = BatchLoss::default();
        for (i, &y) in labels.iter().enumerate() {
            let (ce, kd) = self.sample(logits.row(i), teacher_logits.map(|t| t.row(i)), y)?;
            loss.ce += ce.value * scale;
            let row = grads.row_mut(i);
            for (g, c) in row.iter_mut().zip(&ce.grad) {
                *g = c * scale;
            }
            if let Some(kd) = kd {
                loss.kd += kd.value * scale;
                for (g, k) in row.iter_mut().zip(&kd.grad) {
                    *g += k * scale;
                }
            }
        }
        Ok((loss, grads))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub total_loss: f64,
    pub batches: usize,
}

/// What a single SGD step was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEvent {
    pub task: usize,
    pub epoch: usize,
    pub ce: CeKind,
    pub kd: KdKind,
    pub new_samples: usize,
    pub replay_samples: usize,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_batch(&mut self, _event: &BatchEvent) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Fixed shape of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub layout: TaskLayout,
    /// Input, hidden and feature widths of the backbone.
    pub layer_dims: Vec<usize>,
    pub memory_capacity: usize,
}

/// Affine correction `z_c ← α z_c + β` on the classes of `new_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCorrection {
    pub alpha: f64,
    pub beta: f64,
    pub new_range: Range<usize>,
}

impl ScoreCorrection {
    pub fn identity(new_range: Range<usize>) -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            new_range,
        }
    }
}

pub fn apply_score_correction(logits: &[f64], alpha: f64, beta: f64, new_range: Range<usize>) -> Vec<f64> {
    let mut out = logits.to_vec();
    for z in &mut out[new_range] {
        *z = alpha * *z + beta;
    }
    out
}

/// A scorer whose new-class scores pass through a [`ScoreCorrection`].
pub struct CorrectedScorer<'a, S: Scorer + ?Sized> {
    pub inner: &'a S,
    pub correction: &'a ScoreCorrection,
}

impl<S: Scorer + ?Sized> Scorer for CorrectedScorer<'_, S> {
    fn scores(&self, batch: &Matrix) -> Result<Matrix> {
        let mut logits = self.inner.scores(batch)?;
        let ScoreCorrection {
            alpha,
            beta,
            new_range,
        } = self.correction;
        for r in 0..logits.rows() {
            for z in &mut logits.row_mut(r)[new_range.clone()] {
                *z = alpha * *z + beta;
            }
        }
        Ok(logits)
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
}

/// Everything a run accumulates.
#[derive(Debug, Clone)]
pub struct RunState {
    pub setup: RunSetup,
    pub model: IncrementalClassifier,
    pub memory: ExemplarMemory,
    /// `snapshots[s]` is the model after task `s + 1`.
    pub snapshots: Vec<ModelSnapshot>,
    pub reports: Vec<EvalReport>,
    pub log: Vec<EpochRecord>,
    /// Score correction in force for the latest task, if any.
    pub correction: Option<ScoreCorrection>,
    rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(setup: RunSetup, seed: u64) -> Result<Self> {
        let model = IncrementalClassifier::new(
            &setup.layer_dims,
            setup.layout.classes_per_task(),
            seed,
        )?;
        Ok(Self {
            memory: ExemplarMemory::new(setup.memory_capacity),
            setup,
            model,
            snapshots: Vec::new(),
            reports: Vec::new(),
            log: Vec::new(),
            correction: None,
            rng: seeded_rng(seed, 0x5A3B1E),
        })
    }

    pub fn layout(&self) -> &TaskLayout {
        &self.setup.layout
    }

    pub fn completed_tasks(&self) -> usize {
        self.snapshots.len()
    }

    /// Teacher for task `t`: the snapshot taken after task `t - 1`.
    pub fn teacher(&self, t: usize) -> Option<&ModelSnapshot> {
        t.checked_sub(2).and_then(|i| self.snapshots.get(i))
    }

    /// Replaces the snapshot that acts as teacher for the next task.
    pub fn set_teacher(&mut self, snapshot: ModelSnapshot) -> Result<()> {
        match self.snapshots.last_mut() {
            Some(last) if last.num_tasks() == snapshot.num_tasks() => {
                *last = snapshot;
                Ok(())
            }
            _ => Err(invalid("teacher snapshot does not match the completed tasks")),
        }
    }
}

/// A failed run, with everything computed up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub state: Box<RunState>,
    pub error: Error,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run failed after {} completed tasks: {}",
            self.state.completed_tasks(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn check_task_data(layout: &TaskLayout, data: &LabeledDataset, t: usize) -> Result<()> {
    let classes = layout.task_classes(t)?;
    if let Some(bad) = data.labels().iter().find(|y| !classes.contains(y)) {
        return Err(invalid(format!(
            "training label {bad} does not belong to task {t} ({classes:?})"
        )));
    }
    Ok(())
}

/// Splits off the last `fraction` of each class (stream order) as a holdout.
fn reserve_holdout(data: &LabeledDataset, fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
    let counts = data.class_counts();
    let reserve: Vec<usize> = counts
        .iter()
        .map(|&c| if c == 0 { 0 } else { ((c as f64 * fraction).round() as usize).clamp(1, c - 1) })
        .collect();
    let mut seen = vec![0usize; counts.len()];
    let (mut keep, mut hold) = (Vec::new(), Vec::new());
    for (i, &y) in data.labels().iter().enumerate() {
        seen[y] += 1;
        if seen[y] > counts[y] - reserve[y] {
            hold.push(i);
        } else {
            keep.push(i);
        }
    }
    if keep.is_empty() || hold.is_empty() {
        return Err(invalid("task data too small to reserve a holdout"));
    }
    Ok((data.subset(&keep)?, data.subset(&hold)?))
}

fn epoch_batches(
    state: &mut RunState,
    data: &LabeledDataset,
    config: &TrainConfig,
    t: usize,
) -> Result<Vec<Batch>> {
    if config.method.uses_rp_batches() {
        let plan = if t == 1 {
            BatchPlan::new(config.batch_plan.new_batch_size, 0)?
        } else {
            config.batch_plan
        };
        rp_batches(data, &state.memory, &plan, &mut state.rng)
    } else {
        joint_batches(data, &state.memory, config.joint_batch_size, &mut state.rng)
    }
}

/// Trains task `t` (which must be the next one): grows the head, runs the
/// method's epochs against the frozen snapshot of the previous model,
/// rebalances the memory, applies the configured post-processing and stores
/// the new snapshot.
pub fn train_task(
    state: &mut RunState,
    task_data: &LabeledDataset,
    config: &TrainConfig,
    t: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    config.validate()?;
    if t != state.completed_tasks() + 1 {
        return Err(invalid(format!(
            "task {t} cannot follow {} completed tasks",
            state.completed_tasks()
        )));
    }
    let layout = *state.layout();
    check_task_data(&layout, task_data, t)?;
    if task_data.dim() != state.model.input_dim() {
        return Err(invalid("task data width differs from the model input"));
    }

    let use_holdout = t >= 2 && config.post_process == PostProcess::ScoreCorrection;
    let (train, holdout) = if use_holdout {
        let (a, b) = reserve_holdout(task_data, config.score_correction.holdout_fraction)?;
        (a, Some(b))
    } else {
        (task_data.clone(), None)
    };

    let teacher = state.teacher(t).cloned();
    state.model.expand_head();
    let objective = Objective {
        method: config.method,
        layout: &layout,
        t,
        tau: config.tau,
        distill: true,
    };
    let mut opt = SgdState::new(&state.model);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate(epoch);
        let sgd = config.sgd(lr);
        let batches = epoch_batches(state, &train, config, t)?;
        let mut totals = BatchLoss::default();
        for batch in &batches {
            observer.on_batch(&BatchEvent {
                task: t,
                epoch,
                ce: config.method.ce_kind(),
                kd: if objective.kd_active() {
                    config.method.kd_kind()
                } else {
                    KdKind::None
                },
                new_samples: batch.count(Origin::New),
                replay_samples: batch.count(Origin::Replay),
            });
            let logits = state.model.forward(&batch.inputs)?;
            let teacher_logits = match &teacher {
                Some(s) => Some(s.forward(&batch.inputs)?),
                None => None,
            };
            let (loss, logit_grads) = objective.batch(&logits, teacher_logits.as_ref(), &batch.labels)?;
            let grads = state.model.backward(&batch.inputs, &logit_grads)?;
            sgd_step(&mut state.model, &grads, &sgd, &mut opt).map_err(|e| {
                Error::NumericFailure(format!("task {t}, epoch {epoch}: {e}"))
            })?;
            totals.ce += loss.ce;
            totals.kd += loss.kd;
        }
        let nb = batches.len() as f64;
        let record = EpochRecord {
            task: t,
            epoch,
            phase: "train".into(),
            lr,
            ce_loss: totals.ce / nb,
            kd_loss: totals.kd / nb,
            total_loss: (totals.ce + totals.kd) / nb,
            batches: batches.len(),
        };
        observer.on_epoch(&record);
        state.log.push(record);
    }

    state.memory.update(&train, &layout, t)?;

    state.correction = None;
    if t >= 2 {
        match config.post_process {
            PostProcess::None => {}
            PostProcess::Bft => balanced_fine_tune(state, config, t, observer)?,
            PostProcess::ScoreCorrection => {
                let holdout = build_holdout(
                    &state.memory,
                    holdout.as_ref().expect("reserved above"),
                    &layout,
                    t,
                )?;
                let fit = fit_score_correction(&state.model, &holdout, &layout, t, &config.score_correction)?;
                state.correction = Some(fit);
            }
        }
    }
    state.snapshots.push(state.model.snapshot());
    Ok(())
}

/// Balanced holdout over all `C_t` classes: old classes from the memory,
/// new classes from the reserved samples, the same count for every class.
fn build_holdout(
    memory: &ExemplarMemory,
    reserved: &LabeledDataset,
    layout: &TaskLayout,
    t: usize,
) -> Result<LabeledDataset> {
    let (old, new) = layout.old_new_split(t)?;
    let reserved_counts = reserved.class_counts();
    let per_class = old
        .clone()
        .map(|c| memory.class_count(c))
        .chain(new.clone().map(|c| reserved_counts[c]))
        .min()
        .unwrap_or(0);
    if per_class == 0 {
        return Err(invalid("holdout would miss some classes"));
    }
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels = Vec::new();
    for c in old {
        for e in memory.bucket(c).iter().take(per_class) {
            rows.push(&e.input);
            labels.push(c);
        }
    }
    let mut taken = vec![0usize; reserved.num_classes()];
    for i in 0..reserved.len() {
        let (x, y) = reserved.sample(i);
        if taken[y] < per_class {
            taken[y] += 1;
            rows.push(x);
            labels.push(y);
        }
    }
    LabeledDataset::new(Matrix::from_rows(&rows)?, labels, reserved.num_classes())
}

/// Fine-tunes the whole model (or only its head) with the ordinary
/// cross-entropy on the class-balanced exemplar memory, at `base_lr / t`.
pub fn balanced_fine_tune(
    state: &mut RunState,
    config: &TrainConfig,
    t: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    if t < 2 {
        return Err(invalid("balanced fine-tuning starts at task 2"));
    }
    let layout = *state.layout();
    if state.model.num_tasks() != t {
        return Err(invalid("model head does not match the task"));
    }
    let balanced = state.memory.to_dataset(layout.total_classes())?;
    let lr = config.bft.base_lr / t as f64;
    let sgd = SgdConfig {
        freeze_backbone: config.bft.head_only,
        ..config.sgd(lr)
    };
    let objective = Objective {
        method: Method::Ft,
        layout: &layout,
        t,
        tau: config.tau,
        distill: false,
    };
    let empty = ExemplarMemory::new(0);
    let mut opt = SgdState::new(&state.model);
    for epoch in 0..config.bft.epochs {
        let batches = joint_batches(&balanced, &empty, config.bft.batch_size, &mut state.rng)?;
        let mut ce = 0.0;
        for batch in &batches {
            observer.on_batch(&BatchEvent {
                task: t,
                epoch,
                ce: CeKind::Full,
                kd: KdKind::None,
                new_samples: 0,
                replay_samples: batch.len(),
            });
            let logits = state.model.forward(&batch.inputs)?;
            let (loss, g) = objective.batch(&logits, None, &batch.labels)?;
            let grads = state.model.backward(&batch.inputs, &g)?;
            sgd_step(&mut state.model, &grads, &sgd, &mut opt)?;
            ce += loss.ce;
        }
        let nb = batches.len() as f64;
        let record = EpochRecord {
            task: t,
            epoch,
            phase: "bft".into(),
            lr,
            ce_loss: ce / nb,
            kd_loss: 0.0,
            total_loss: ce / nb,
            batches: batches.len(),
        };
        observer.on_epoch(&record);
        state.log.push(record);
    }
    Ok(())
}

/// Mean cross-entropy of corrected logits, its gradient and Hessian in
/// `(α, β)`.
fn correction_objective(
    logits: &Matrix,
    labels: &[usize],
    new_range: &Range<usize>,
    alpha: f64,
    beta: f64,
) -> Result<(f64, [f64; 2], [[f64; 3]; 1])> {
    let n = labels.len() as f64;
    let c = logits.cols();
    let mut value = 0.0;
    let mut grad = [0.0; 2];
    // packed (H_αα, H_αβ, H_ββ)
    let mut hess = [[0.0; 3]];
    for (row, &y) in logits.iter_rows().zip(labels) {
        let z = apply_score_correction(row, alpha, beta, new_range.clone());
        let lse = log_sum_exp_range(&z, 0..c, 1.0)?;
        value += (lse - z[y]) / n;
        let p = softmax_range(&z, 0..c, 1.0)?;
        let (mut eu, mut ev, mut euu, mut euv, mut evv) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in new_range.clone() {
            let pk = p.as_slice()[k];
            let u = row[k];
            eu += pk * u;
            ev += pk;
            euu += pk * u * u;
            euv += pk * u;
            evv += pk;
        }
        let (yu, yv) = if new_range.contains(&y) { (row[y], 1.0) } else { (0.0, 0.0) };
        grad[0] += (eu - yu) / n;
        grad[1] += (ev - yv) / n;
        hess[0][0] += (euu - eu * eu) / n;
        hess[0][1] += (euv - eu * ev) / n;
        hess[0][2] += (evv - ev * ev) / n;
    }
    Ok((value, grad, hess))
}

/// Fits `(α, β)` by damped Newton iterations on precomputed logits. The
/// objective is convex in `(α, β)` because the corrected logits are affine in
/// them.
pub fn fit_score_correction_from_logits(
    logits: &Matrix,
    labels: &[usize],
    new_range: Range<usize>,
    config: &ScoreCorrectionConfig,
) -> Result<ScoreCorrection> {
    if labels.is_empty() || logits.rows() != labels.len() || new_range.end > logits.cols() {
        return Err(invalid("score-correction inputs are inconsistent"));
    }
    let mut counts = vec![0usize; logits.cols()];
    for &y in labels {
        if y >= logits.cols() {
            return Err(invalid(format!("holdout label {y} outside the scored classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(invalid(format!("holdout has no sample of class {c}")));
    }
    let (mut alpha, mut beta) = (1.0, 0.0);
    for _ in 0..config.max_iters {
        let (value, g, [h]) = correction_objective(logits, labels, &new_range, alpha, beta)?;
        let (da, db) = if config.fit_alpha {
            let (a, b, d) = (h[0] + 1e-12, h[1], h[2] + 1e-12);
            let det = a * d - b * b;
            if det.abs() < 1e-300 {
                (g[0], g[1])
            } else {
                ((d * g[0] - b * g[1]) / det, (a * g[1] - b * g[0]) / det)
            }
        } else {
            (0.0, g[1] / (h[2] + 1e-12))
        };
        let gnorm = if config.fit_alpha { g[0].hypot(g[1]) } else { g[1].abs() };
        if gnorm < config.tolerance {
            break;
        }
        let mut step = 1.0;
        loop {
            let (na, nb) = (alpha - step * da, beta - step * db);
            let (nv, _, _) = correction_objective(logits, labels, &new_range, na, nb)?;
            if nv <= value || step < 1e-12 {
                alpha = na;
                beta = nb;
                break;
            }
            step *= 0.5;
        }
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::NumericFailure("score correction diverged".into()));
    }
    Ok(ScoreCorrection {
        alpha,
        beta,
        new_range,
    })
}

/// Fits the correction for task `t` on a holdout that covers all `C_t`
/// classes.
pub fn fit_score_correction<S: Scorer + ?Sized>(
    scorer: &S,
    holdout: &LabeledDataset,
    layout: &TaskLayout,
    t: usize,
    config: &ScoreCorrectionConfig,
) -> Result<ScoreCorrection> {
    if t < 2 {
        return Err(invalid("score correction starts at task 2"));
    }
    let (_, new) = layout.old_new_split(t)?;
    if scorer.num_classes() != new.end {
        return Err(invalid("scorer does not match the task"));
    }
    let logits = scorer.scores(holdout.inputs())?;
    fit_score_correction_from_logits(&logits, holdout.labels(), new, config)
}

/// Evaluates the current model (through its score correction, if any) on the
/// test data of tasks `1..=t`.
pub fn evaluate_state(
    state: &RunState,
    seen_test: &LabeledDataset,
    t: usize,
    k: usize,
    task_ratio: Option<Vec<f64>>,
) -> Result<EvalReport> {
    let layout = state.layout();
    match &state.correction {
        Some(c) => evaluate(
            &CorrectedScorer {
                inner: &state.model,
                correction: c,
            },
            seen_test,
            layout,
            t,
            k,
            task_ratio,
        ),
        None => evaluate(&state.model, seen_test, layout, t, k, task_ratio),
    }
}

/// Trains task `t` and appends its report: the task ratio of the previous
/// model on the new data is taken before training.
pub fn run_task(
    state: &mut RunState,
    train: &LabeledDataset,
    seen_test: &LabeledDataset,
    config: &TrainConfig,
    t: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let ratio = match state.teacher(t) {
        Some(teacher) => Some(new_data_task_ratio(teacher, train, state.layout(), t)?),
        None => None,
    };
    train_task(state, train, config, t, observer)?;
    let report = evaluate_state(state, seen_test, t, config.topk, ratio)?;
    state.reports.push(report);
    Ok(())
}

/// Test sets of tasks `1..=t` for every `t`.
pub fn cumulative_test_sets(test_tasks: &[LabeledDataset]) -> Result<Vec<LabeledDataset>> {
    (1..=test_tasks.len())
        .map(|t| LabeledDataset::concat(&test_tasks[..t].iter().collect::<Vec<_>>()))
        .collect()
}

/// Full incremental run over all tasks, evaluating after each one.
pub fn run_incremental(
    train_tasks: &[LabeledDataset],
    test_tasks: &[LabeledDataset],
    setup: &RunSetup,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<RunState, RunFailure> {
    let mut state = match RunState::new(setup.clone(), config.seed) {
        Ok(s) => s,
        Err(error) => {
            // no model could be built; report an empty shell
            let shell = RunState {
                setup: setup.clone(),
                model: IncrementalClassifier::new(&[1], 1, 0).expect("trivial model"),
                memory: ExemplarMemory::new(setup.memory_capacity),
                snapshots: Vec::new(),
                reports: Vec::new(),
                log: Vec::new(),
                correction: None,
                rng: seeded_rng(config.seed, 0),
            };
            return Err(RunFailure {
                state: Box::new(shell),
                error,
            });
        }
    };
    let result = (|| -> Result<()> {
        let tasks = setup.layout.total_tasks();
        if train_tasks.len() != tasks || test_tasks.len() != tasks {
            return Err(invalid(format!(
                "expected {tasks} train and test splits, got {} and {}",
                train_tasks.len(),
                test_tasks.len()
            )));
        }
        config.validate()?;
        let seen = cumulative_test_sets(test_tasks)?;
        for t in 1..=tasks {
            run_task(&mut state, &train_tasks[t - 1], &seen[t - 1], config, t, observer)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(state),
        Err(error) => Err(RunFailure {
            state: Box::new(state),
            error,
        }),
    }
}

/// Two copies of a state trained on task `t` from the same model, memory and
/// random stream: one with global, one with task-wise distillation.
#[derive(Debug, Clone)]
pub struct BranchOutcome {
    pub gkd: RunState,
    pub tkd: RunState,
}

pub fn branch_compare(
    base: &RunState,
    task_data: &LabeledDataset,
    config: &TrainConfig,
    t: usize,
) -> Result<BranchOutcome> {
    if t < 2 || base.completed_tasks() != t - 1 {
        return Err(invalid(format!(
            "branching at task {t} needs a state with {} completed tasks",
            t.saturating_sub(1)
        )));
    }
    let run = |method: Method| -> Result<RunState> {
        let mut state = base.clone();
        let cfg = TrainConfig {
            method,
            ..config.clone()
        };
        train_task(&mut state, task_data, &cfg, t, &mut NoObserver)?;
        Ok(state)
    };
    Ok(BranchOutcome {
        gkd: run(Method::CeGkd)?,
        tkd: run(Method::CeTkd)?,
    })
}
