//! Class-balanced exemplar memory.
//!
//! After task `t` every class seen so far keeps exactly `⌊|M| / C_t⌋`
//! samples. Shrinking quotas drop the most recently inserted samples of each
//! class, so a bucket always holds the first `k` samples of its class in
//! stream order.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::layout::TaskLayout;
use crate::model::{decode_f64s, encode_f64s};
use crate::numerics::Matrix;

/// One stored training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    capacity: usize,
    buckets: BTreeMap<usize, Vec<Exemplar>>,
}

impl ExemplarMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            buckets: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.buckets.get(&class).map_or(0, Vec::len)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets.keys().copied()
    }

    pub fn bucket(&self, class: usize) -> &[Exemplar] {
        self.buckets.get(&class).map_or(&[], Vec::as_slice)
    }

    /// All exemplars, class by class, each class in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> + '_ {
        self.buckets.values().flatten()
    }

    /// Per-class quota after task `t`.
    pub fn quota(&self, layout: &TaskLayout, t: usize) -> Result<usize> {
        let classes = layout.classes_through(t);
        let k = self.capacity / classes;
        if k == 0 {
            return Err(Error::CapacityExhausted {
                capacity: self.capacity,
                classes,
            });
        }
        Ok(k)
    }

    /// Rebalances the memory at the end of task `t`: old buckets shrink to the
    /// new quota `k`, and each class of task `t` stores its first `k` samples
    /// from `task_data`. Calling it twice with the same arguments is a no-op.
    pub fn update(&mut self, task_data: &LabeledDataset, layout: &TaskLayout, t: usize) -> Result<()> {
        let new_classes = layout.task_classes(t)?;
        let k = self.quota(layout, t)?;
        if let Some(&bad) = task_data.labels().iter().find(|l| !new_classes.contains(l)) {
            return Err(invalid(format!(
                "label {bad} does not belong to task {t} ({new_classes:?})"
            )));
        }
        let mut fresh: BTreeMap<usize, Vec<Exemplar>> =
            new_classes.clone().map(|c| (c, Vec::with_capacity(k))).collect();
        for i in 0..task_data.len() {
            let (x, y) = task_data.sample(i);
            let bucket = fresh.get_mut(&y).expect("label validated above");
            if bucket.len() < k {
                bucket.push(Exemplar {
                    input: x.to_vec(),
                    label: y,
                });
            }
        }
        if let Some((c, b)) = fresh.iter().find(|(_, b)| b.len() < k) {
            return Err(invalid(format!(
                "class {c} has {} samples, the memory quota is {k}",
                b.len()
            )));
        }
        self.buckets.retain(|c, _| *c < new_classes.start);
        for bucket in self.buckets.values_mut() {
            bucket.truncate(k);
        }
        self.buckets.extend(fresh);
        Ok(())
    }

    /// `n` exemplars drawn uniformly with replacement.
    pub fn sample_replay<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Exemplar>> {
        let all: Vec<&Exemplar> = self.iter().collect();
        if all.is_empty() {
            return Err(Error::InvalidState("cannot replay from an empty memory".into()));
        }
        if n == 0 {
            return Err(invalid("replay draw of zero samples"));
        }
        Ok((0..n).map(|_| all[rng.random_range(0..all.len())]).collect())
    }

    /// The whole memory as a dataset over `num_classes` labels.
    pub fn to_dataset(&self, num_classes: usize) -> Result<LabeledDataset> {
        let rows: Vec<&[f64]> = self.iter().map(|e| e.input.as_slice()).collect();
        LabeledDataset::new(
            Matrix::from_rows(&rows)?,
            self.iter().map(|e| e.label).collect(),
            num_classes,
        )
    }

    pub(crate) fn to_record(&self) -> MemoryRecord {
        MemoryRecord {
            capacity: self.capacity,
            classes: self
                .buckets
                .iter()
                .map(|(&class, b)| ClassRecord {
                    class,
                    count: b.len(),
                    dim: b.first().map_or(0, |e| e.input.len()),
                    inputs: encode_f64s(&b.iter().flat_map(|e| e.input.iter().copied()).collect::<Vec<_>>()),
                })
                .collect(),
        }
    }

    pub(crate) fn from_record(record: MemoryRecord) -> Result<Self> {
        let mut memory = Self::new(record.capacity);
        for c in record.classes {
            let flat = decode_f64s(&c.inputs, c.count * c.dim)?;
            let bucket = flat
                .chunks_exact(c.dim.max(1))
                .take(c.count)
                .map(|x| Exemplar {
                    input: x.to_vec(),
                    label: c.class,
                })
                .collect();
            memory.buckets.insert(c.class, bucket);
        }
        if memory.len() > memory.capacity {
            return Err(Error::Checkpoint("stored memory exceeds its capacity".into()));
        }
        Ok(memory)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MemoryRecord {
    capacity: usize,
    classes: Vec<ClassRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassRecord {
    class: usize,
    count: usize,
    dim: usize,
    inputs: String,
}
