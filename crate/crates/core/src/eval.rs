//! Accuracy metrics and bias diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::layout::TaskLayout;
use crate::model::{predict_from_logits, Scorer};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics for one checkpoint, taken after training task `after_task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub after_task: usize,
    pub top1: f64,
    /// Accuracy at `k`.
    pub topk: f64,
    pub k: usize,
    /// Counts, rows = true task, columns = predicted task.
    pub task_confusion: Vec<Vec<u64>>,
    /// Task histogram of the previous model's predictions on the new task's
    /// training data; absent after the first task.
    pub new_data_task_ratio: Option<Vec<f64>>,
}

impl EvalReport {
    /// Among old-task test samples that were misclassified into another task,
    /// the fraction sent to the newest task. Zero when there are none.
    pub fn old_to_latest_fraction(&self) -> f64 {
        let t = self.task_confusion.len();
        if t < 2 {
            return 0.0;
        }
        let mut wrong = 0u64;
        let mut latest = 0u64;
        for (row_task, row) in self.task_confusion.iter().enumerate().take(t - 1) {
            for (col_task, &n) in row.iter().enumerate() {
                if col_task != row_task {
                    wrong += n;
                    if col_task == t - 1 {
                        latest += n;
                    }
                }
            }
        }
        if wrong == 0 {
            0.0
        } else {
            latest as f64 / wrong as f64
        }
    }

    /// Share of all old-task test samples predicted into the newest task.
    pub fn old_samples_in_latest_task(&self) -> f64 {
        let t = self.task_confusion.len();
        if t < 2 {
            return 0.0;
        }
        let rows = &self.task_confusion[..t - 1];
        let total: u64 = rows.iter().flatten().sum();
        let latest: u64 = rows.iter().map(|r| r[t - 1]).sum();
        if total == 0 {
            0.0
        } else {
            latest as f64 / total as f64
        }
    }
}

/// Whether `label` ranks within the top `k` of `logits`. Ties rank the lower
/// class index first, matching the argmax rule.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let z = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count();
    rank < k
}

fn check_test_set<S: Scorer + ?Sized>(scorer: &S, test: &LabeledDataset) -> Result<usize> {
    let c = scorer.num_classes();
    if let Some(bad) = test.labels().iter().find(|&&y| y >= c) {
        return Err(invalid(format!(
            "test label {bad} outside the {c} classes the model knows"
        )));
    }
    Ok(c)
}

pub fn topk_accuracy<S: Scorer + ?Sized>(scorer: &S, test: &LabeledDataset, k: usize) -> Result<f64> {
    let c = check_test_set(scorer, test)?;
    if k == 0 || k > c {
        return Err(invalid(format!("top-{k} accuracy needs 1 ≤ k ≤ {c}")));
    }
    let logits = scorer.scores(test.inputs())?;
    Ok(topk_from_logits(logits.iter_rows(), test.labels(), k))
}

fn topk_from_logits<'a>(rows: impl Iterator<Item = &'a [f64]>, labels: &[usize], k: usize) -> f64 {
    let hits = rows
        .zip(labels)
        .filter(|(row, &y)| in_top_k(row, y, k))
        .count();
    hits as f64 / labels.len() as f64
}

/// Which accuracy to average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Top1,
    TopK,
}

/// Mean of the per-task accuracies over all reports, first task included.
pub fn average_incremental_accuracy(reports: &[EvalReport], metric: Metric) -> Result<f64> {
    if reports.is_empty() {
        return Err(invalid("no reports to average"));
    }
    let sum: f64 = reports
        .iter()
        .map(|r| match metric {
            Metric::Top1 => r.top1,
            Metric::TopK => r.topk,
        })
        .sum();
    Ok(sum / reports.len() as f64)
}

/// Task-level confusion counts after task `t`.
pub fn task_confusion<S: Scorer + ?Sized>(
    scorer: &S,
    test: &LabeledDataset,
    layout: &TaskLayout,
    t: usize,
) -> Result<Vec<Vec<u64>>> {
    let seen = layout.classes_through(t);
    if t == 0 || t > layout.total_tasks() || scorer.num_classes() != seen {
        return Err(invalid(format!(
            "model scores {} classes, task {t} needs {seen}",
            scorer.num_classes()
        )));
    }
    if let Some(bad) = test.labels().iter().find(|&&y| y >= seen) {
        return Err(invalid(format!("test label {bad} not seen by task {t}")));
    }
    let logits = scorer.scores(test.inputs())?;
    let m = layout.classes_per_task();
    let mut counts = vec![vec![0u64; t]; t];
    for (row, &y) in logits.iter_rows().zip(test.labels()) {
        let (_, predicted) = predict_from_logits(row, m);
        counts[layout.task_of(y)][predicted] += 1;
    }
    Ok(counts)
}

/// Normalised histogram of the tasks that the model after task `t-1`
/// predicts for the training inputs of task `t`.
pub fn new_data_task_ratio<S: Scorer + ?Sized>(
    old_model: &S,
    new_task_data: &LabeledDataset,
    layout: &TaskLayout,
    t: usize,
) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(invalid("the task ratio needs an old model (t ≥ 2)"));
    }
    if old_model.num_classes() != layout.classes_through(t - 1) {
        return Err(invalid(format!(
            "old model scores {} classes, expected {}",
            old_model.num_classes(),
            layout.classes_through(t - 1)
        )));
    }
    let logits = old_model.scores(new_task_data.inputs())?;
    let mut counts = vec![0usize; t - 1];
    for row in logits.iter_rows() {
        counts[predict_from_logits(row, layout.classes_per_task()).1] += 1;
    }
    let n = new_task_data.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Full report for a checkpoint.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    test: &LabeledDataset,
    layout: &TaskLayout,
    t: usize,
    k: usize,
    new_data_task_ratio: Option<Vec<f64>>,
) -> Result<EvalReport> {
    let c = check_test_set(scorer, test)?;
    let k = k.clamp(1, c);
    let logits = scorer.scores(test.inputs())?;
    let top1 = topk_from_logits(logits.iter_rows(), test.labels(), 1);
    let topk = topk_from_logits(logits.iter_rows(), test.labels(), k);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        after_task: t,
        top1,
        topk,
        k,
        task_confusion: task_confusion(scorer, test, layout, t)?,
        new_data_task_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Matrix};
    use proptest::prelude::*;
    use rand::Rng;

    /// Scorer that returns stored logits row by row, ignoring the inputs'
    /// values (the inputs only carry the row index).
    struct Fixed(Matrix);

    impl Scorer for Fixed {
        fn scores(&self, batch: &Matrix) -> Result<Matrix> {
            let idx: Vec<usize> = batch.iter_rows().map(|r| r[0] as usize).collect();
            Ok(self.0.select_rows(&idx))
        }

        fn num_classes(&self) -> usize {
            self.0.cols()
        }
    }

    fn indexed(labels: Vec<usize>, num_classes: usize) -> LabeledDataset {
        let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64]).collect();
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels, num_classes).unwrap()
    }

    fn one_hot_logits(labels: &[usize], c: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), c);
        for (i, &y) in labels.iter().enumerate() {
            m.set(i, y, 10.0);
        }
        m
    }

    #[test]
    fn top_k_examples() {
        let labels = vec![0, 1, 2, 3];
        let s = Fixed(one_hot_logits(&labels, 4));
        let test = indexed(labels, 4);
        assert_eq!(topk_accuracy(&s, &test, 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &test, 4).unwrap(), 1.0);
        assert!(topk_accuracy(&s, &test, 5).is_err());
        assert!(topk_accuracy(&s, &test, 0).is_err());

        let s = Fixed(Matrix::from_rows(&[[0.1, 0.9, 0.5]]).unwrap());
        let one = indexed(vec![2], 3);
        assert_eq!(topk_accuracy(&s, &one, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, &one, 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_follow_the_argmax_rule() {
        assert!(in_top_k(&[1.0, 1.0, 0.0], 0, 1));
        assert!(!in_top_k(&[1.0, 1.0, 0.0], 1, 1));
        assert!(in_top_k(&[1.0, 1.0, 0.0], 1, 2));
    }

    #[test]
    fn averages() {
        let rep = |a| EvalReport {
            schema_version: 1,
            after_task: 1,
            top1: a,
            topk: a,
            k: 2,
            task_confusion: vec![],
            new_data_task_ratio: None,
        };
        let r = vec![rep(1.0), rep(0.5)];
        assert_eq!(average_incremental_accuracy(&r, Metric::Top1).unwrap(), 0.75);
        assert_eq!(average_incremental_accuracy(&r[..1], Metric::TopK).unwrap(), 1.0);
        let c = vec![rep(0.3); 7];
        assert!((average_incremental_accuracy(&c, Metric::Top1).unwrap() - 0.3).abs() < 1e-15);
        assert!(average_incremental_accuracy(&[], Metric::Top1).is_err());
    }

    #[test]
    fn confusion_of_perfect_classifier_is_diagonal() {
        let l = TaskLayout::new(3, 2).unwrap();
        let labels = vec![0, 1, 2, 3, 4, 5, 5];
        let s = Fixed(one_hot_logits(&labels, 6));
        let c = task_confusion(&s, &indexed(labels, 6), &l, 3).unwrap();
        assert_eq!(c, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
    }

    #[test]
    fn confusion_of_fully_biased_classifier() {
        let l = TaskLayout::new(3, 2).unwrap();
        let labels = vec![0, 1, 2, 3, 4, 5];
        let s = Fixed(one_hot_logits(&[4; 6], 6));
        let c = task_confusion(&s, &indexed(labels, 6), &l, 3).unwrap();
        assert_eq!(c, vec![vec![0, 0, 2], vec![0, 0, 2], vec![0, 0, 2]]);
        let r = EvalReport {
            schema_version: 1,
            after_task: 3,
            top1: 0.0,
            topk: 0.0,
            k: 2,
            task_confusion: c,
            new_data_task_ratio: None,
        };
        assert_eq!(r.old_to_latest_fraction(), 1.0);
        assert_eq!(r.old_samples_in_latest_task(), 1.0);
    }

    #[test]
    fn confusion_rejects_unseen_labels() {
        let l = TaskLayout::new(3, 2).unwrap();
        let s = Fixed(Matrix::zeros(1, 4));
        assert!(task_confusion(&s, &indexed(vec![5], 6), &l, 2).is_err());
    }

    #[test]
    fn task_ratio_with_one_old_task() {
        let l = TaskLayout::new(3, 2).unwrap();
        let mut rng = seeded_rng(2, 0);
        let logits =
            Matrix::from_vec(20, 2, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = new_data_task_ratio(&Fixed(logits), &indexed(vec![2; 20], 6), &l, 2).unwrap();
        assert_eq!(r, vec![1.0]);
        assert!(new_data_task_ratio(&Fixed(Matrix::zeros(20, 2)), &indexed(vec![0; 20], 6), &l, 1).is_err());
    }

    #[test]
    fn task_ratio_of_random_model_is_uniform() {
        let l = TaskLayout::new(5, 2).unwrap();
        let n = 20_000;
        let mut rng = seeded_rng(8, 0);
        let logits =
            Matrix::from_vec(n, 8, (0..n * 8).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let r = new_data_task_ratio(&Fixed(logits), &indexed(vec![8; n], 10), &l, 5).unwrap();
        assert_eq!(r.len(), 4);
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for v in &r {
            assert!((v - 0.25).abs() < 4.0 * sigma, "{r:?}");
        }
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in any::<u64>(), n in 1usize..40) {
            let l = TaskLayout::new(3, 2).unwrap();
            let mut rng = seeded_rng(seed, 0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let logits = Matrix::from_vec(n, 6, (0..n * 6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let s = Fixed(logits);
            let test = indexed(labels.clone(), 6);
            let mut prev = 0.0;
            for k in 1..=6 {
                let a = topk_accuracy(&s, &test, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
            let c = task_confusion(&s, &test, &l, 3).unwrap();
            prop_assert_eq!(c.iter().flatten().sum::<u64>(), n as u64);
            for (task, row) in c.iter().enumerate() {
                let expected = labels.iter().filter(|&&y| y / 2 == task).count() as u64;
                prop_assert_eq!(row.iter().sum::<u64>(), expected);
            }
            let old = Fixed(s.0.select_rows(&(0..n).collect::<Vec<_>>()));
            let trimmed = Fixed(Matrix::from_rows(&old.0.iter_rows().map(|r| r[..4].to_vec()).collect::<Vec<_>>()).unwrap());
            let r = new_data_task_ratio(&trimmed, &test, &l, 3).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
