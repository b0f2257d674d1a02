//! Finite-difference check of every loss composed with the classifier's
//! backward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::layout::TaskLayout;
use crate::losses::{ce_loss, ce_ss_loss, gkd_loss, ssil_loss, tkd_loss, LossResult};
use crate::model::IncrementalClassifier;
use crate::numerics::{finite_diff_grad, relative_error, seeded_rng, Matrix};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-4;
/// Instances whose ReLU pre-activations come this close to zero are redrawn.
const KINK_MARGIN: f64 = 1e-2;

const LAYER_DIMS: [usize; 3] = [4, 5, 4];
const CLASSES_PER_TASK: usize = 2;
const MAX_TASKS: usize = 3;
const BATCH: usize = 4;
const TAU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Gkd,
    Tkd,
    CeSs,
    Ssil,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::Gkd,
        LossKind::Tkd,
        LossKind::CeSs,
        LossKind::Ssil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Gkd => "gkd",
            LossKind::Tkd => "tkd",
            LossKind::CeSs => "ce_ss",
            LossKind::Ssil => "ssil",
        }
    }

    fn needs_old_task(self) -> bool {
        matches!(self, LossKind::Gkd | LossKind::Tkd)
    }

    fn eval(
        self,
        logits: &[f64],
        teacher: Option<&[f64]>,
        label: usize,
        layout: &TaskLayout,
        t: usize,
    ) -> Result<LossResult> {
        let seen = layout.classes_through(t);
        match self {
            LossKind::Ce => ce_loss(logits, label, 0..seen),
            LossKind::Gkd => gkd_loss(
                logits,
                teacher.expect("drawn for t ≥ 2"),
                0..layout.classes_through(t - 1),
                TAU,
            ),
            LossKind::Tkd => tkd_loss(logits, teacher.expect("drawn for t ≥ 2"), layout, t, TAU),
            LossKind::CeSs => ce_ss_loss(logits, label, layout, t),
            LossKind::Ssil => ssil_loss(logits, teacher, label, layout, t, TAU),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Corrupts the analytic gradient of this loss (for testing the checker).
    pub fault: Option<LossKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 1000,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: LossKind,
    pub max_rel_error: f64,
    /// Seed of the instance with the largest error.
    pub worst_seed: u64,
    pub instances: usize,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LossCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LossCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<6} max_rel_error={:.3e} worst_seed={} instances={} {}",
                c.loss.name(),
                c.max_rel_error,
                c.worst_seed,
                c.instances,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

struct Instance {
    model: IncrementalClassifier,
    inputs: Matrix,
    labels: Vec<usize>,
    teacher: Option<Matrix>,
    layout: TaskLayout,
    t: usize,
}

fn draw_instance(kind: LossKind, seed: u64) -> Result<Instance> {
    let mut rng = seeded_rng(seed, 0x6C0C);
    let layout = TaskLayout::new(MAX_TASKS, CLASSES_PER_TASK)?;
    let lo = if kind.needs_old_task() { 2 } else { 1 };
    let t = rng.random_range(lo..=MAX_TASKS);
    let mut model = IncrementalClassifier::new(&LAYER_DIMS, CLASSES_PER_TASK, rng.random())?;
    for _ in 0..t {
        model.expand_head();
    }
    let inputs = loop {
        let x = Matrix::from_vec(
            BATCH,
            LAYER_DIMS[0],
            (0..BATCH * LAYER_DIMS[0]).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )?;
        let clear = model
            .pre_activations(&x)?
            .iter()
            .all(|a| a.as_slice().iter().all(|v| v.abs() > KINK_MARGIN));
        if clear {
            break x;
        }
    };
    let seen = layout.classes_through(t);
    let labels = (0..BATCH).map(|_| rng.random_range(0..seen)).collect();
    let teacher = if t >= 2 {
        let old = layout.classes_through(t - 1);
        Some(Matrix::from_vec(
            BATCH,
            old,
            (0..BATCH * old).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )?)
    } else {
        None
    };
    Ok(Instance {
        model,
        inputs,
        labels,
        teacher,
        layout,
        t,
    })
}

impl Instance {
    fn loss_and_logit_grads(&self, kind: LossKind, model: &IncrementalClassifier) -> Result<(f64, Matrix)> {
        let logits = model.forward(&self.inputs)?;
        let n = BATCH as f64;
        let mut grads = Matrix::zeros(BATCH, logits.cols());
        let mut value = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            let teacher = self.teacher.as_ref().map(|m| m.row(i));
            let r = kind.eval(logits.row(i), teacher, y, &self.layout, self.t)?;
            value += r.value / n;
            for (g, v) in grads.row_mut(i).iter_mut().zip(&r.grad) {
                *g = v / n;
            }
        }
        Ok((value, grads))
    }

    /// Largest relative error between the analytic and numeric parameter
    /// gradients.
    fn max_error(&self, kind: LossKind, fault: bool) -> Result<f64> {
        let (_, logit_grads) = self.loss_and_logit_grads(kind, &self.model)?;
        let mut analytic = self.model.backward(&self.inputs, &logit_grads)?.flatten();
        if fault {
            analytic[0] += 1e-3;
        }
        let mut probe = self.model.clone();
        let numeric = finite_diff_grad(
            |p| {
                probe.set_params_flat(p).expect("same length");
                self.loss_and_logit_grads(kind, &probe)
                    .map(|(v, _)| v)
                    .unwrap_or(f64::NAN)
            },
            &self.model.params_flat(),
            STEP,
        )?;
        Ok(analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &b)| relative_error(a, b, ERROR_FLOOR))
            .fold(0.0, f64::max))
    }
}

/// Runs `instances` seeded instances per loss.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.instances == 0 {
        return Err(invalid("gradient check needs at least one instance"));
    }
    let mut checks = Vec::with_capacity(LossKind::ALL.len());
    for (k, kind) in LossKind::ALL.into_iter().enumerate() {
        let mut worst = (0.0, opts.seed);
        for i in 0..opts.instances as u64 {
            let seed = opts.seed.wrapping_add(i).wrapping_add((k as u64) << 32);
            let inst = draw_instance(kind, seed)?;
            let err = inst.max_error(kind, opts.fault == Some(kind))?;
            if !(err <= worst.0) {
                worst = (err, seed);
            }
        }
        checks.push(LossCheck {
            loss: kind,
            max_rel_error: worst.0,
            worst_seed: worst.1,
            instances: opts.instances,
        });
    }
    Ok(GradcheckReport { checks })
}
