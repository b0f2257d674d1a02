//! Mini-batch construction: ratio-preserving batches (every chunk of new data
//! gets a fixed-size replay draw appended) and plain shuffled batches over the
//! union of new data and memory.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::memory::ExemplarMemory;
use crate::numerics::Matrix;

/// Batch sizes for ratio-preserving batches: `N_D` new samples plus `N_M`
/// replayed exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub new_batch_size: usize,
    pub replay_batch_size: usize,
}

impl BatchPlan {
    pub fn new(new_batch_size: usize, replay_batch_size: usize) -> Result<Self> {
        if new_batch_size == 0 {
            return Err(invalid("new-data batch size must be at least 1"));
        }
        Ok(Self {
            new_batch_size,
            replay_batch_size,
        })
    }

    /// Replay batch size commonly paired with `T` tasks and `N_D = 128`
    /// (ratios 8, 4 and 2 for 20, 10 and 5 tasks).
    pub fn for_task_count(total_tasks: usize) -> Self {
        let replay = match total_tasks {
            t if t >= 20 => 16,
            t if t >= 10 => 32,
            _ => 64,
        };
        Self {
            new_batch_size: 128,
            replay_batch_size: replay,
        }
    }
}

/// Where a batch row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    New,
    Replay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub origins: Vec<Origin>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.origins.iter().filter(|&&o| o == origin).count()
    }
}

struct BatchBuilder {
    rows: Vec<f64>,
    labels: Vec<usize>,
    origins: Vec<Origin>,
    dim: usize,
}

impl BatchBuilder {
    fn new(dim: usize, capacity: usize) -> Self {
        Self {
            rows: Vec::with_capacity(dim * capacity),
            labels: Vec::with_capacity(capacity),
            origins: Vec::with_capacity(capacity),
            dim,
        }
    }

    fn push(&mut self, x: &[f64], y: usize, origin: Origin) {
        self.rows.extend_from_slice(x);
        self.labels.push(y);
        self.origins.push(origin);
    }

    fn finish(self) -> Result<Batch> {
        Ok(Batch {
            inputs: Matrix::from_vec(self.labels.len(), self.dim, self.rows)?,
            labels: self.labels,
            origins: self.origins,
        })
    }
}

/// One epoch of ratio-preserving batches. `task_data` is shuffled and cut into
/// chunks of `N_D` (the last chunk may be short); each chunk is followed by
/// `N_M` exemplars drawn with replacement. With `N_M = 0` this is plain
/// batching of the task data and the memory is not read.
pub fn rp_batches<R: Rng + ?Sized>(
    task_data: &LabeledDataset,
    memory: &ExemplarMemory,
    plan: &BatchPlan,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if task_data.is_empty() {
        return Err(invalid("no task data to batch"));
    }
    if plan.new_batch_size == 0 {
        return Err(invalid("new-data batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..task_data.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(plan.new_batch_size));
    for chunk in order.chunks(plan.new_batch_size) {
        let mut b = BatchBuilder::new(task_data.dim(), chunk.len() + plan.replay_batch_size);
        for &i in chunk {
            let (x, y) = task_data.sample(i);
            b.push(x, y, Origin::New);
        }
        if plan.replay_batch_size > 0 {
            for e in memory.sample_replay(plan.replay_batch_size, rng)? {
                b.push(&e.input, e.label, Origin::Replay);
            }
        }
        batches.push(b.finish()?);
    }
    Ok(batches)
}

/// One epoch over the shuffled union of `task_data` and the memory, cut into
/// chunks of `batch_size`.
pub fn joint_batches<R: Rng + ?Sized>(
    task_data: &LabeledDataset,
    memory: &ExemplarMemory,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let stored: Vec<_> = memory.iter().collect();
    let n_new = task_data.len();
    let mut order: Vec<usize> = (0..n_new + stored.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut b = BatchBuilder::new(task_data.dim(), chunk.len());
        for &i in chunk {
            if i < n_new {
                let (x, y) = task_data.sample(i);
                b.push(x, y, Origin::New);
            } else {
                let e = stored[i - n_new];
                b.push(&e.input, e.label, Origin::Replay);
            }
        }
        batches.push(b.finish()?);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::TaskLayout;
    use crate::numerics::seeded_rng;

    /// `n` samples of task `t`, input `[i]` so rows can be traced back.
    fn indexed_task(layout: &TaskLayout, t: usize, n: usize) -> LabeledDataset {
        let classes = layout.task_classes(t).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let labels = (0..n).map(|i| classes.start + i % classes.len()).collect();
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels, layout.total_classes()).unwrap()
    }

    fn memory_after_task1(layout: &TaskLayout, capacity: usize) -> ExemplarMemory {
        let mut m = ExemplarMemory::new(capacity);
        m.update(&indexed_task(layout, 1, 200), layout, 1).unwrap();
        m
    }

    #[test]
    fn rp_full_scale_ratio() {
        let l = TaskLayout::new(2, 2).unwrap();
        let mem = memory_after_task1(&l, 40);
        let data = indexed_task(&l, 2, 256);
        let plan = BatchPlan::new(128, 32).unwrap();
        let batches = rp_batches(&data, &mem, &plan, &mut seeded_rng(1, 0)).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.len(), 160);
            assert_eq!(b.count(Origin::New), 128);
            assert_eq!(b.count(Origin::Replay), 32);
            assert!(b.origins[..128].iter().all(|&o| o == Origin::New));
        }
    }

    #[test]
    fn rp_without_replay_is_plain_batching() {
        let l = TaskLayout::new(2, 2).unwrap();
        let data = indexed_task(&l, 1, 10);
        let plan = BatchPlan::new(4, 0).unwrap();
        let empty = ExemplarMemory::new(10);
        let batches = rp_batches(&data, &empty, &plan, &mut seeded_rng(1, 0)).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(batches.iter().all(|b| b.count(Origin::Replay) == 0));
    }

    #[test]
    fn rp_keeps_the_remainder() {
        let l = TaskLayout::new(2, 2).unwrap();
        let mem = memory_after_task1(&l, 40);
        let data = indexed_task(&l, 2, 130);
        let plan = BatchPlan::new(128, 16).unwrap();
        let batches = rp_batches(&data, &mem, &plan, &mut seeded_rng(1, 0)).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![144, 18]);
        assert_eq!(batches[1].count(Origin::Replay), 16);
    }

    #[test]
    fn rp_errors() {
        let l = TaskLayout::new(2, 2).unwrap();
        let data = indexed_task(&l, 2, 10);
        let plan = BatchPlan::new(4, 2).unwrap();
        let empty = ExemplarMemory::new(10);
        assert!(rp_batches(&data, &empty, &plan, &mut seeded_rng(1, 0)).is_err());
        assert!(BatchPlan::new(0, 3).is_err());
    }

    #[test]
    fn rp_epoch_covers_task_data_exactly() {
        let l = TaskLayout::new(2, 2).unwrap();
        let mem = memory_after_task1(&l, 40);
        let data = indexed_task(&l, 2, 77);
        let plan = BatchPlan::new(10, 3).unwrap();
        let mut rng = seeded_rng(4, 0);
        for _ in 0..20 {
            let batches = rp_batches(&data, &mem, &plan, &mut rng).unwrap();
            let mut seen: Vec<usize> = batches
                .iter()
                .flat_map(|b| {
                    (0..b.len())
                        .filter(|&i| b.origins[i] == Origin::New)
                        .map(|i| b.inputs.get(i, 0) as usize)
                        .collect::<Vec<_>>()
                })
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..77).collect::<Vec<_>>());
        }
    }

    #[test]
    fn default_plan_table() {
        assert_eq!(BatchPlan::for_task_count(20).replay_batch_size, 16);
        assert_eq!(BatchPlan::for_task_count(10).replay_batch_size, 32);
        assert_eq!(BatchPlan::for_task_count(5).replay_batch_size, 64);
    }

    #[test]
    fn joint_exact_fit() {
        let l = TaskLayout::new(2, 2).unwrap();
        // 14 exemplars per class of task 1
        let mem = memory_after_task1(&l, 28);
        let data = indexed_task(&l, 2, 100);
        let batches = joint_batches(&data, &mem, 128, &mut seeded_rng(2, 0)).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 128);
        assert_eq!(batches[0].count(Origin::Replay), 28);
    }

    #[test]
    fn joint_is_deterministic() {
        let l = TaskLayout::new(2, 2).unwrap();
        let mem = memory_after_task1(&l, 28);
        let data = indexed_task(&l, 2, 100);
        let a = joint_batches(&data, &mem, 16, &mut seeded_rng(9, 0)).unwrap();
        let b = joint_batches(&data, &mem, 16, &mut seeded_rng(9, 0)).unwrap();
        assert_eq!(a, b);
        assert!(joint_batches(&data, &mem, 0, &mut seeded_rng(9, 0)).is_err());
    }

    #[test]
    fn joint_replay_fraction_matches_expectation() {
        let l = TaskLayout::new(2, 2).unwrap();
        let mem = memory_after_task1(&l, 28);
        let data = indexed_task(&l, 2, 100);
        let mut rng = seeded_rng(5, 0);
        let expected = 28.0 / 128.0;
        let epochs = 10_000;
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..epochs {
            for b in joint_batches(&data, &mem, 32, &mut rng).unwrap() {
                total += b.count(Origin::Replay) as f64 / b.len() as f64;
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!((mean - expected).abs() < 1e-2, "{mean} vs {expected}");
    }
}
