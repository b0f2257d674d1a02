//! Labelled datasets: synthetic Gaussian mixtures, CSV ingestion and the
//! per-task split under a permuted class order.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::layout::TaskLayout;
use crate::numerics::{seeded_rng, Matrix};

/// Inputs with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Checks shapes, finiteness and the label range. Class coverage is not
    /// required here: per-task splits only hold a slice of the label space.
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("dataset has no samples"));
        }
        if inputs.rows() != labels.len() {
            return Err(invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        if !inputs.is_finite() {
            return Err(Error::NumericFailure("dataset inputs are not finite".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.inputs.row(i), self.labels[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Fails unless every class has at least one sample.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(c) => Err(invalid(format!("class {c} has no samples"))),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Concatenates datasets sharing a label space and width.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut inputs = Matrix::zeros(0, first.dim());
        let mut labels = Vec::new();
        for p in parts {
            if p.num_classes != first.num_classes {
                return Err(invalid("cannot concatenate datasets with different label spaces"));
            }
            inputs.append_rows(&p.inputs)?;
            labels.extend_from_slice(&p.labels);
        }
        Self::new(inputs, labels, first.num_classes)
    }

    pub fn write_csv(&self, path: &Path, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_path(path)?;
        if header {
            let mut names: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
            names.push("label".into());
            w.write_record(&names)?;
        }
        for i in 0..self.len() {
            let (x, y) = self.sample(i);
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parameters of the synthetic Gaussian-mixture generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Ten well separated classes in 16 dimensions.
    pub fn desk_fixture() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            per_class: 200,
            spread: 1.0,
            separation: 4.0,
            seed: 42,
        }
    }
}

/// Gaussian mixture: class `c` has mean `separation / √dim · N(0, I)` (so its
/// expected squared norm is `separation²` whatever the width) and samples
/// `mean + spread · N(0, I)`. Returns `(train, test)` of equal size, both in
/// class-major order.
pub fn synth_gaussian(spec: &SynthSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let SynthSpec {
        num_classes,
        dim,
        per_class,
        spread,
        separation,
        seed,
    } = *spec;
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(invalid("synthetic dataset counts must be positive"));
    }
    if !(spread > 0.0) || !spread.is_finite() || !separation.is_finite() {
        return Err(invalid(format!(
            "bad synthetic spread {spread} / separation {separation}"
        )));
    }
    let mut rng = seeded_rng(seed, 0xDA7A);
    let scale = separation / (dim as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<LabeledDataset> {
        let mut data = Vec::with_capacity(num_classes * per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(
                    mean.iter()
                        .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)),
                );
                labels.push(c);
            }
        }
        LabeledDataset::new(
            Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            num_classes,
        )
    };
    let train = draw(&mut rng)?;
    let test = draw(&mut rng)?;
    Ok((train, test))
}

/// Relabels classes so that original class `ordering[i]` becomes `i`, then
/// hands task `t` the samples of classes `[C_{t-1}, C_t)`. Sample order within
/// each task follows the source dataset. Every split keeps the full label space
/// `C_T`.
pub fn split_tasks(
    dataset: &LabeledDataset,
    layout: &TaskLayout,
    ordering: &[usize],
) -> Result<Vec<LabeledDataset>> {
    let n_classes = layout.total_classes();
    if dataset.num_classes() != n_classes {
        return Err(invalid(format!(
            "dataset has {} classes, layout expects {n_classes}",
            dataset.num_classes()
        )));
    }
    let mut new_label = vec![usize::MAX; n_classes];
    if ordering.len() != n_classes {
        return Err(invalid("ordering length differs from the class count"));
    }
    for (pos, &orig) in ordering.iter().enumerate() {
        if orig >= n_classes || new_label[orig] != usize::MAX {
            return Err(invalid("ordering is not a permutation of the classes"));
        }
        new_label[orig] = pos;
    }
    let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); layout.total_tasks()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        per_task[layout.task_of(new_label[y])].push(i);
    }
    per_task
        .into_iter()
        .enumerate()
        .map(|(t, idx)| {
            if idx.is_empty() {
                return Err(invalid(format!("task {} receives no samples", t + 1)));
            }
            LabeledDataset::new(
                dataset.inputs().select_rows(&idx),
                idx.iter().map(|&i| new_label[dataset.labels()[i]]).collect(),
                n_classes,
            )
        })
        .collect()
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Label space size; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

/// Reads rows of `d` float features followed by one integer label.
pub fn load_csv(path: &Path, opts: CsvOptions) -> Result<LabeledDataset> {
    let ingest = |row: u64, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            ingest(row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(ingest(row, "need at least one feature and a label".into()));
        }
        let d = record.len() - 1;
        match width {
            None => width = Some(d),
            Some(w) if w != d => {
                return Err(ingest(row, format!("expected {w} features, found {d}")))
            }
            _ => {}
        }
        for (j, field) in record.iter().take(d).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| ingest(row, format!("column {j}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(ingest(row, format!("column {j}: non-finite value {field:?}")));
            }
            data.push(v);
        }
        let raw = &record[d];
        let label: usize = raw
            .parse()
            .map_err(|_| ingest(row, format!("label {raw:?} is not a non-negative integer")))?;
        if let Some(n) = opts.num_classes {
            if label >= n {
                return Err(ingest(row, format!("label {label} outside [0, {n})")));
            }
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| ingest(0, "file holds no data rows".into()))?;
    let num_classes = opts
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let inputs = Matrix::from_vec(labels.len(), width, data)?;
    LabeledDataset::new(inputs, labels, num_classes)
}
