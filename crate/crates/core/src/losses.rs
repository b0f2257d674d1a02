//! Per-sample losses and their exact gradients with respect to the logits.
//!
//! Every function takes the student's full logit row (length `C_t`) and
//! returns a gradient of the same length, zero outside the ranges the loss
//! reads. Distillation terms are plain KL divergences of temperature
//! softmaxes, so their logit gradient is `(p_student − p_teacher) / τ` with no
//! `τ²` rescaling.

use std::ops::Range;

use crate::error::{invalid, Result};
use crate::layout::TaskLayout;
use crate::numerics::{log_softmax_range, softmax_range};

/// Value of a loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossResult {
    fn zeros(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }

    /// Adds another loss on the same logits.
    pub fn accumulate(&mut self, other: &LossResult) {
        self.value += other.value;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
    }
}

/// Cross-entropy of the softmax over `range` against the one-hot `label`.
pub fn ce_loss(logits: &[f64], label: usize, range: Range<usize>) -> Result<LossResult> {
    if !range.contains(&label) {
        return Err(invalid(format!("label {label} outside class range {range:?}")));
    }
    let p = softmax_range(logits, range.clone(), 1.0)?;
    let log_p = log_softmax_range(logits, range.clone(), 1.0)?;
    let mut out = LossResult::zeros(logits.len());
    out.value = -log_p[label - range.start];
    for (k, &pk) in range.clone().zip(p.as_slice()) {
        out.grad[k] = pk;
    }
    out.grad[label] -= 1.0;
    Ok(out)
}

/// `KL(softmax_τ(teacher[range]) ‖ softmax_τ(student[range]))` added into `out`.
fn add_kd_block(
    out: &mut LossResult,
    logits: &[f64],
    teacher_logits: &[f64],
    range: Range<usize>,
    tau: f64,
) -> Result<()> {
    let q = softmax_range(teacher_logits, range.clone(), tau)?;
    let log_q = log_softmax_range(teacher_logits, range.clone(), tau)?;
    let p = softmax_range(logits, range.clone(), tau)?;
    let log_p = log_softmax_range(logits, range.clone(), tau)?;
    let kl: f64 = q
        .as_slice()
        .iter()
        .zip(log_q.iter().zip(&log_p))
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, (lq, lp))| qk * (lq - lp))
        .sum();
    out.value += kl.max(0.0);
    for ((k, &pk), &qk) in range.zip(p.as_slice()).zip(q.as_slice()) {
        out.grad[k] += (pk - qk) / tau;
    }
    Ok(())
}

fn check_teacher(teacher_logits: &[f64], needed: usize) -> Result<()> {
    if teacher_logits.len() < needed {
        return Err(invalid(format!(
            "teacher provides {} logits, distillation needs {needed}",
            teacher_logits.len()
        )));
    }
    Ok(())
}

/// Global distillation: one softmax over all old classes `old_range`.
pub fn gkd_loss(
    logits: &[f64],
    teacher_logits: &[f64],
    old_range: Range<usize>,
    tau: f64,
) -> Result<LossResult> {
    if old_range.is_empty() {
        return Err(invalid("global distillation needs at least one old class"));
    }
    check_teacher(teacher_logits, old_range.end)?;
    let mut out = LossResult::zeros(logits.len());
    add_kd_block(&mut out, logits, teacher_logits, old_range, tau)?;
    Ok(out)
}

/// Task-wise distillation: one softmax per old task block, KLs summed.
pub fn tkd_loss(
    logits: &[f64],
    teacher_logits: &[f64],
    layout: &TaskLayout,
    t: usize,
    tau: f64,
) -> Result<LossResult> {
    if t < 2 {
        return Err(invalid("task-wise distillation needs at least one old task"));
    }
    let blocks = layout.old_task_blocks(t)?;
    check_teacher(teacher_logits, layout.classes_through(t - 1))?;
    let mut out = LossResult::zeros(logits.len());
    for block in blocks {
        add_kd_block(&mut out, logits, teacher_logits, block, tau)?;
    }
    Ok(out)
}

/// Separated-softmax cross-entropy: a new-class sample is scored against the
/// new classes only, an old-class sample against all old classes combined.
pub fn ce_ss_loss(logits: &[f64], label: usize, layout: &TaskLayout, t: usize) -> Result<LossResult> {
    let (old, new) = layout.old_new_split(t)?;
    if logits.len() < new.end {
        return Err(invalid(format!(
            "{} logits cannot cover the {} classes of task {t}",
            logits.len(),
            new.end
        )));
    }
    if new.contains(&label) {
        ce_loss(logits, label, new)
    } else if old.contains(&label) {
        ce_loss(logits, label, old)
    } else {
        Err(invalid(format!("label {label} not seen by task {t}")))
    }
}

/// Separated-softmax cross-entropy plus task-wise distillation. The teacher
/// must be present exactly when `t ≥ 2`.
pub fn ssil_loss(
    logits: &[f64],
    teacher_logits: Option<&[f64]>,
    label: usize,
    layout: &TaskLayout,
    t: usize,
    tau: f64,
) -> Result<LossResult> {
    let mut out = ce_ss_loss(logits, label, layout, t)?;
    match (t, teacher_logits) {
        (1, None) => {}
        (1, Some(_)) => return Err(invalid("no old tasks to distil at task 1")),
        (_, None) => return Err(invalid(format!("task {t} needs teacher logits"))),
        (_, Some(teacher)) => out.accumulate(&tkd_loss(logits, teacher, layout, t, tau)?),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, seeded_rng};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_logits(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn check_fd<F: Fn(&[f64]) -> LossResult>(f: F, z: &[f64]) {
        let analytic = f(z).grad;
        let numeric = finite_diff_grad(|x| f(x).value, z, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-4) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn ce_uniform() {
        let r = ce_loss(&[0.0; 4], 0, 0..4).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-15);
        assert_close(&r.grad, &[-0.75, 0.25, 0.25, 0.25], 1e-15);
    }

    #[test]
    fn ce_six_three_one() {
        let r = ce_loss(&[6f64.ln(), 3f64.ln(), 0.0], 0, 0..3).unwrap();
        assert!((r.value - 0.510826).abs() < 1e-6);
        assert!((r.value + 0.6f64.ln()).abs() < 1e-15);
        assert_close(&r.grad, &[-0.4, 0.3, 0.1], 1e-15);
    }

    #[test]
    fn ce_rejects_label_outside_range() {
        assert!(ce_loss(&[0.0; 4], 3, 0..2).is_err());
        assert!(ce_loss(&[0.0; 4], 0, 0..0).is_err());
    }

    #[test]
    fn ce_zero_outside_range() {
        let r = ce_loss(&[1.0, 2.0, 3.0, 4.0], 2, 2..4).unwrap();
        assert_eq!(&r.grad[..2], &[0.0, 0.0]);
    }

    #[test]
    fn gkd_identical_is_zero() {
        let z = [0.3, -1.2, 2.0, 0.1, 5.0, 6.0];
        let r = gkd_loss(&z, &z[..4], 0..4, 2.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g.abs() < 1e-16));
    }

    #[test]
    fn gkd_needs_old_classes() {
        assert!(gkd_loss(&[0.0; 2], &[], 0..0, 2.0).is_err());
        assert!(gkd_loss(&[0.0; 4], &[0.0], 0..2, 2.0).is_err());
    }

    #[test]
    fn gkd_matches_finite_differences() {
        let mut rng = seeded_rng(5, 1);
        for _ in 0..20 {
            let z = random_logits(6, &mut rng);
            let teacher = random_logits(4, &mut rng);
            check_fd(|x| gkd_loss(x, &teacher, 0..4, 2.0).unwrap(), &z);
        }
    }

    #[test]
    fn tkd_identical_is_zero() {
        let l = TaskLayout::new(3, 2).unwrap();
        let z = [0.3, -1.2, 2.0, 0.1, 5.0, 6.0];
        let r = tkd_loss(&z, &z[..4], &l, 3, 2.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g.abs() < 1e-16));
    }

    #[test]
    fn tkd_rejects_first_task() {
        let l = TaskLayout::new(3, 2).unwrap();
        assert!(tkd_loss(&[0.0; 2], &[], &l, 1, 2.0).is_err());
    }

    /// Two old tasks of two classes, second block shifted by +5.
    fn shift_fixture() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let student = vec![0.4, -0.3, 1.1, 0.2, 0.9, -0.5];
        let teacher = vec![1.0, 0.5, -0.2, 0.7];
        let shifted = vec![1.0, 0.5, -0.2 + 5.0, 0.7 + 5.0];
        (student, teacher, shifted)
    }

    #[test]
    fn tkd_ignores_per_task_shifts_but_gkd_does_not() {
        let l = TaskLayout::new(3, 2).unwrap();
        let (s, t, shifted) = shift_fixture();
        let tkd_a = tkd_loss(&s, &t, &l, 3, 2.0).unwrap().value;
        let tkd_b = tkd_loss(&s, &shifted, &l, 3, 2.0).unwrap().value;
        assert!((tkd_a - tkd_b).abs() < 1e-12);
        let gkd_a = gkd_loss(&s, &t, 0..4, 2.0).unwrap().value;
        let gkd_b = gkd_loss(&s, &shifted, 0..4, 2.0).unwrap().value;
        assert!((gkd_a - gkd_b).abs() > 0.01, "{gkd_a} {gkd_b}");
    }

    #[test]
    fn ce_ss_new_sample_blocks_old_logits() {
        let l = TaskLayout::new(2, 2).unwrap();
        let r = ce_ss_loss(&[9.0, 9.0, 1.0, 0.0], 2, &l, 2).unwrap();
        assert_eq!(r.grad[0].to_bits(), 0.0f64.to_bits());
        assert_eq!(r.grad[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(r, ce_loss(&[9.0, 9.0, 1.0, 0.0], 2, 2..4).unwrap());
    }

    #[test]
    fn ce_ss_old_sample_ignores_new_block() {
        let l = TaskLayout::new(2, 2).unwrap();
        let r = ce_ss_loss(&[0.0, 0.0, 99.0, 99.0], 0, &l, 2).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(&r.grad[2..], &[0.0, 0.0]);
        assert_close(&r.grad[..2], &[-0.5, 0.5], 1e-15);
    }

    #[test]
    fn ce_ss_old_branch_spans_all_old_tasks() {
        let l = TaskLayout::new(3, 2).unwrap();
        let z = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(ce_ss_loss(&z, 1, &l, 3).unwrap(), ce_loss(&z, 1, 0..4).unwrap());
    }

    #[test]
    fn ce_ss_first_task_is_plain_ce() {
        let l = TaskLayout::new(3, 2).unwrap();
        let z = [0.7, -0.1];
        assert_eq!(ce_ss_loss(&z, 0, &l, 1).unwrap(), ce_loss(&z, 0, 0..2).unwrap());
        assert!(ce_ss_loss(&z, 3, &l, 1).is_err());
    }

    #[test]
    fn ssil_first_task_is_ce_ss() {
        let l = TaskLayout::new(3, 2).unwrap();
        let z = [0.7, -0.1];
        assert_eq!(
            ssil_loss(&z, None, 1, &l, 1, 2.0).unwrap(),
            ce_ss_loss(&z, 1, &l, 1).unwrap()
        );
        assert!(ssil_loss(&z, Some(&z), 1, &l, 1, 2.0).is_err());
    }

    #[test]
    fn ssil_requires_teacher_after_first_task() {
        let l = TaskLayout::new(3, 2).unwrap();
        assert!(ssil_loss(&[0.0; 4], None, 0, &l, 2, 2.0).is_err());
    }

    #[test]
    fn ssil_with_matching_teacher_equals_ce_ss() {
        let l = TaskLayout::new(3, 2).unwrap();
        let z = [0.3, 1.0, -0.4, 2.2];
        let r = ssil_loss(&z, Some(&z[..2]), 0, &l, 2, 2.0).unwrap();
        let ce = ce_ss_loss(&z, 0, &l, 2).unwrap();
        assert!((r.value - ce.value).abs() < 1e-15);
        assert_close(&r.grad, &ce.grad, 1e-15);
    }

    #[test]
    fn ssil_is_sum_of_components() {
        let l = TaskLayout::new(4, 2).unwrap();
        let mut rng = seeded_rng(31, 2);
        for label in 0..6 {
            let z = random_logits(6, &mut rng);
            let teacher = random_logits(4, &mut rng);
            let r = ssil_loss(&z, Some(&teacher), label, &l, 3, 2.0).unwrap();
            let a = ce_ss_loss(&z, label, &l, 3).unwrap();
            let b = tkd_loss(&z, &teacher, &l, 3, 2.0).unwrap();
            assert!((r.value - (a.value + b.value)).abs() < 1e-12);
            let sum: Vec<f64> = a.grad.iter().zip(&b.grad).map(|(x, y)| x + y).collect();
            assert_close(&r.grad, &sum, 1e-15);
        }
    }

    #[test]
    fn every_loss_matches_finite_differences() {
        let l = TaskLayout::new(3, 2).unwrap();
        let mut rng = seeded_rng(77, 3);
        for _ in 0..50 {
            let z = random_logits(6, &mut rng);
            let teacher = random_logits(4, &mut rng);
            let label = rng.random_range(0..6);
            check_fd(|x| ce_loss(x, label, 0..6).unwrap(), &z);
            check_fd(|x| ce_ss_loss(x, label, &l, 3).unwrap(), &z);
            check_fd(|x| tkd_loss(x, &teacher, &l, 3, 2.0).unwrap(), &z);
            check_fd(|x| ssil_loss(x, Some(&teacher), label, &l, 3, 2.0).unwrap(), &z);
        }
    }

    proptest! {
        #[test]
        fn ce_grad_is_closed_form(z in prop::collection::vec(-20.0f64..20.0, 2..10), pick in any::<prop::sample::Index>()) {
            let label = pick.index(z.len());
            let r = ce_loss(&z, label, 0..z.len()).unwrap();
            let p = softmax_range(&z, 0..z.len(), 1.0).unwrap();
            for (c, (&g, &pc)) in r.grad.iter().zip(p.as_slice()).enumerate() {
                let expected = pc - if c == label { 1.0 } else { 0.0 };
                prop_assert!((g - expected).abs() < 1e-12);
                if c != label {
                    prop_assert!(g > 0.0);
                }
            }
            prop_assert!(r.grad.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn kd_grads_sum_to_zero_per_block(
            z in prop::collection::vec(-5.0f64..5.0, 6),
            teacher in prop::collection::vec(-5.0f64..5.0, 4),
            tau in 0.5f64..4.0,
        ) {
            let l = TaskLayout::new(3, 2).unwrap();
            let t = tkd_loss(&z, &teacher, &l, 3, tau).unwrap();
            prop_assert!(t.value >= 0.0);
            prop_assert!((t.grad[0] + t.grad[1]).abs() < 1e-14);
            prop_assert!((t.grad[2] + t.grad[3]).abs() < 1e-14);
            prop_assert_eq!(&t.grad[4..], &[0.0, 0.0]);
            let g = gkd_loss(&z, &teacher, 0..4, tau).unwrap();
            prop_assert!(g.value >= 0.0);
            prop_assert!(g.grad.iter().sum::<f64>().abs() < 1e-14);
        }

        #[test]
        fn ce_ss_support_is_the_branch_range(
            z in prop::collection::vec(-5.0f64..5.0, 6),
            label in 0usize..6,
        ) {
            let l = TaskLayout::new(3, 2).unwrap();
            let r = ce_ss_loss(&z, label, &l, 3).unwrap();
            let branch = if label >= 4 { 4..6 } else { 0..4 };
            for (c, g) in r.grad.iter().enumerate() {
                if !branch.contains(&c) {
                    prop_assert_eq!(g.to_bits(), 0.0f64.to_bits());
                }
            }
        }

        #[test]
        fn tkd_is_invariant_to_block_shifts(
            z in prop::collection::vec(-5.0f64..5.0, 6),
            teacher in prop::collection::vec(-5.0f64..5.0, 4),
            s1 in -10.0f64..10.0,
            s2 in -10.0f64..10.0,
        ) {
            let l = TaskLayout::new(3, 2).unwrap();
            let shifted = vec![teacher[0] + s1, teacher[1] + s1, teacher[2] + s2, teacher[3] + s2];
            let a = tkd_loss(&z, &teacher, &l, 3, 2.0).unwrap();
            let b = tkd_loss(&z, &shifted, &l, 3, 2.0).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
        }
    }
}
