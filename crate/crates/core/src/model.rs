//! MLP feature extractor with a growable per-task linear head.
//!
//! Logits for a batch `X` are produced by `a_0 = X`, `a_l = relu(a_{l-1} W_lᵀ + b_l)`
//! for every backbone layer, then one affine block per learned task applied to
//! the final features and concatenated in task order.

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::memory::ExemplarMemory;
use crate::numerics::{seeded_rng, Matrix};

/// Anything that maps a batch of inputs to class scores.
pub trait Scorer {
    fn scores(&self, batch: &Matrix) -> Result<Matrix>;
    fn num_classes(&self) -> usize;
}

/// One affine map `y = W x + b` with `W` stored `out × in`. Also used as the
/// gradient of such a map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `[-a, a]` with `a = 1/√fan_in`, weights and biases alike.
    fn uniform(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / (in_dim as f64).sqrt();
        let mut d = Self::zeros(out_dim, in_dim);
        for w in d.weight.as_mut_slice() {
            *w = rng.random_range(-a..=a);
        }
        for b in &mut d.bias {
            *b = rng.random_range(-a..=a);
        }
        d
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = input.matmul_bt(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.as_slice().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }

    fn len(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }
}

/// Class-incremental classifier: ReLU MLP backbone plus one `m`-row head
/// block per task learned so far.
#[derive(Debug, Clone)]
pub struct IncrementalClassifier {
    layer_dims: Vec<usize>,
    classes_per_task: usize,
    backbone: Vec<Dense>,
    head: Vec<Dense>,
    rng: ChaCha8Rng,
}

/// Intermediate values kept for the backward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[l]` the output of backbone layer `l`.
    acts: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl IncrementalClassifier {
    /// `layer_dims` lists the input width, every hidden width and the feature
    /// width. A single entry means the head reads the raw input.
    pub fn new(layer_dims: &[usize], classes_per_task: usize, seed: u64) -> Result<Self> {
        if layer_dims.is_empty() || layer_dims.contains(&0) || classes_per_task == 0 {
            return Err(invalid(format!(
                "bad model shape: layer_dims {layer_dims:?}, m = {classes_per_task}"
            )));
        }
        let mut rng = seeded_rng(seed, 0x30DE1);
        let backbone = layer_dims
            .windows(2)
            .map(|w| Dense::uniform(w[1], w[0], &mut rng))
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            classes_per_task,
            backbone,
            head: Vec::new(),
            rng,
        })
    }

    /// Assembles a model from explicit parameters; used for hand-built fixtures.
    pub fn from_parts(
        layer_dims: &[usize],
        classes_per_task: usize,
        backbone: Vec<Dense>,
        head: Vec<Dense>,
    ) -> Result<Self> {
        let mut model = Self::new(layer_dims, classes_per_task, 0)?;
        let shapes_ok = backbone.len() == model.backbone.len()
            && backbone.iter().zip(&model.backbone).all(|(a, b)| a.same_shape(b))
            && head
                .iter()
                .all(|h| h.out_dim() == classes_per_task && h.in_dim() == model.feature_dim());
        if !shapes_ok {
            return Err(invalid("parameter shapes do not match the layer dims"));
        }
        model.backbone = backbone;
        model.head = head;
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().expect("layer dims are non-empty")
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes_per_task
    }

    /// Number of head blocks, i.e. tasks learned so far.
    pub fn num_tasks(&self) -> usize {
        self.head.len()
    }

    pub fn backbone(&self) -> &[Dense] {
        &self.backbone
    }

    pub fn head(&self) -> &[Dense] {
        &self.head
    }

    /// Appends a freshly initialised head block for `m` new classes.
    pub fn expand_head(&mut self) {
        let block = Dense::uniform(self.classes_per_task, self.feature_dim(), &mut self.rng);
        self.head.push(block);
    }

    fn trace(&self, batch: &Matrix) -> Result<Trace> {
        if batch.cols() != self.input_dim() {
            return Err(invalid(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        let mut pre = Vec::with_capacity(self.backbone.len());
        acts.push(batch.clone());
        for layer in &self.backbone {
            let z = layer.apply(acts.last().expect("input pushed"))?;
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            pre.push(z);
            acts.push(a);
        }
        Ok(Trace { acts, pre })
    }

    fn head_logits(&self, features: &Matrix) -> Result<Matrix> {
        let m = self.classes_per_task;
        let mut logits = Matrix::zeros(features.rows(), self.num_classes());
        for (b, block) in self.head.iter().enumerate() {
            let part = block.apply(features)?;
            for r in 0..features.rows() {
                logits.row_mut(r)[b * m..(b + 1) * m].copy_from_slice(part.row(r));
            }
        }
        Ok(logits)
    }

    /// Pre-activation features of every backbone layer for `batch`; the
    /// gradient checker uses these to steer clear of ReLU kinks.
    pub fn pre_activations(&self, batch: &Matrix) -> Result<Vec<Matrix>> {
        Ok(self.trace(batch)?.pre)
    }

    /// Raw logits, `n × C_t`.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        let trace = self.trace(batch)?;
        self.head_logits(trace.acts.last().expect("input pushed"))
    }

    /// Consolidated prediction over all learned classes: `(class, task index)`.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, usize)> {
        if self.head.is_empty() {
            return Err(Error::InvalidState("model has no head blocks".into()));
        }
        let logits = self.forward(&Matrix::from_rows(&[x])?)?;
        Ok(predict_from_logits(logits.row(0), self.classes_per_task))
    }

    /// Reverse-mode gradients of `Σ_i ⟨logit_grads_i, logits_i⟩` with respect
    /// to every parameter.
    pub fn backward(&self, batch: &Matrix, logit_grads: &Matrix) -> Result<GradientSet> {
        let trace = self.trace(batch)?;
        if logit_grads.shape() != (batch.rows(), self.num_classes()) {
            return Err(invalid(format!(
                "logit gradients have shape {:?}, expected {:?}",
                logit_grads.shape(),
                (batch.rows(), self.num_classes())
            )));
        }
        let m = self.classes_per_task;
        let n = batch.rows();
        let features = trace.acts.last().expect("input pushed");

        let mut head = Vec::with_capacity(self.head.len());
        let mut d_act = Matrix::zeros(n, self.feature_dim());
        for (b, block) in self.head.iter().enumerate() {
            let cols: Vec<f64> = (0..n)
                .flat_map(|r| logit_grads.row(r)[b * m..(b + 1) * m].iter().copied())
                .collect();
            let g = Matrix::from_vec(n, m, cols)?;
            head.push(Dense {
                weight: g.matmul_at(features)?,
                bias: column_sums(&g),
            });
            d_act.add_scaled(&g.matmul(&block.weight)?, 1.0)?;
        }

        let mut backbone = vec![Dense::zeros(0, 0); self.backbone.len()];
        for l in (0..self.backbone.len()).rev() {
            let mut dz = d_act;
            for (g, &z) in dz.as_mut_slice().iter_mut().zip(trace.pre[l].as_slice()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            backbone[l] = Dense {
                weight: dz.matmul_at(&trace.acts[l])?,
                bias: column_sums(&dz),
            };
            d_act = dz.matmul(&self.backbone[l].weight)?;
        }
        Ok(GradientSet { backbone, head })
    }

    pub fn num_params(&self) -> usize {
        self.backbone.iter().chain(&self.head).map(Dense::len).sum()
    }

    /// All parameters in a fixed order: backbone layers first, then head
    /// blocks; within a layer the weight (row-major) then the bias.
    pub fn params_flat(&self) -> Vec<f64> {
        self.backbone
            .iter()
            .chain(&self.head)
            .flat_map(|d| d.values().copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let targets = self
            .backbone
            .iter_mut()
            .chain(self.head.iter_mut())
            .flat_map(|d| d.values_mut());
        for (t, &p) in targets.zip(params) {
            *t = p;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.backbone
            .iter()
            .chain(&self.head)
            .all(|d| d.values().all(|v| v.is_finite()))
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            inner: Arc::new(self.clone()),
        }
    }
}

impl Scorer for IncrementalClassifier {
    fn scores(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch)
    }

    fn num_classes(&self) -> usize {
        self.classes_per_task * self.head.len()
    }
}

impl IncrementalClassifier {
    /// `C_t` for the current number of head blocks.
    pub fn num_classes(&self) -> usize {
        Scorer::num_classes(self)
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `(argmax class, its 0-based task index)`.
pub fn predict_from_logits(logits: &[f64], classes_per_task: usize) -> (usize, usize) {
    let class = argmax(logits);
    (class, class / classes_per_task)
}

/// Immutable copy of a model, used as the distillation teacher.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    inner: Arc<IncrementalClassifier>,
}

impl ModelSnapshot {
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.inner.forward(batch)
    }

    pub fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    pub fn model(&self) -> &IncrementalClassifier {
        &self.inner
    }

    pub fn restore(&self) -> IncrementalClassifier {
        (*self.inner).clone()
    }
}

impl Scorer for ModelSnapshot {
    fn scores(&self, batch: &Matrix) -> Result<Matrix> {
        self.inner.forward(batch)
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
}

/// One gradient per parameter tensor, in the model's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub backbone: Vec<Dense>,
    pub head: Vec<Dense>,
}

impl GradientSet {
    pub fn zeros_like(model: &IncrementalClassifier) -> Self {
        Self {
            backbone: model
                .backbone
                .iter()
                .map(|d| Dense::zeros(d.out_dim(), d.in_dim()))
                .collect(),
            head: model
                .head
                .iter()
                .map(|d| Dense::zeros(d.out_dim(), d.in_dim()))
                .collect(),
        }
    }

    pub fn is_congruent(&self, model: &IncrementalClassifier) -> bool {
        self.backbone.len() == model.backbone.len()
            && self.head.len() == model.head.len()
            && self.backbone.iter().zip(&model.backbone).all(|(a, b)| a.same_shape(b))
            && self.head.iter().zip(&model.head).all(|(a, b)| a.same_shape(b))
    }

    /// Same order as [`IncrementalClassifier::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        self.backbone
            .iter()
            .chain(&self.head)
            .flat_map(|d| d.values().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }

    pub fn scale(&mut self, k: f64) {
        for d in self.backbone.iter_mut().chain(self.head.iter_mut()) {
            d.values_mut().for_each(|v| *v *= k);
        }
    }
}

/// Optimiser hyper-parameters for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Leaves every backbone parameter untouched.
    #[serde(default)]
    pub freeze_backbone: bool,
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: GradientSet,
}

impl SgdState {
    pub fn new(model: &IncrementalClassifier) -> Self {
        Self {
            velocity: GradientSet::zeros_like(model),
        }
    }

    pub fn velocity(&self) -> &GradientSet {
        &self.velocity
    }
}

/// SGD with optional (Nesterov) momentum and L2 weight decay folded into the
/// gradient:
///
/// ```text
/// g ← g + wd·θ
/// v ← μ·v + g
/// θ ← θ − lr·(g + μ·v)   (Nesterov)
/// θ ← θ − lr·v           (heavy ball)
/// ```
///
/// Nothing is modified if any updated value would be non-finite.
pub fn sgd_step(
    model: &mut IncrementalClassifier,
    grads: &GradientSet,
    config: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    if !grads.is_congruent(model) || !state.velocity.is_congruent(model) {
        return Err(invalid("gradient or optimiser state does not match the model"));
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
        nesterov,
        freeze_backbone,
    } = *config;

    let mut params = model.params_flat();
    let mut velocity = state.velocity.flatten();
    let g_all = grads.flatten();
    let skip = if freeze_backbone {
        model.backbone.iter().map(Dense::len).sum()
    } else {
        0
    };
    for i in skip..params.len() {
        let g = g_all[i] + weight_decay * params[i];
        velocity[i] = momentum * velocity[i] + g;
        let step = if nesterov {
            g + momentum * velocity[i]
        } else {
            velocity[i]
        };
        params[i] -= lr * step;
    }
    if params.iter().chain(&velocity).any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure(
            "SGD update produced non-finite parameters".into(),
        ));
    }
    model.set_params_flat(&params)?;
    let mut targets = state
        .velocity
        .backbone
        .iter_mut()
        .chain(state.velocity.head.iter_mut())
        .flat_map(|d| d.values_mut());
    for v in &velocity {
        *targets.next().expect("congruent shapes") = *v;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "ssil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Packs floats as little-endian IEEE-754 doubles, base64 encoded.
pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("payload holds non-finite values".into()));
    }
    Ok(values)
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseRecord {
    out_dim: usize,
    in_dim: usize,
    weight: String,
    bias: String,
}

impl DenseRecord {
    fn from_dense(d: &Dense) -> Self {
        Self {
            out_dim: d.out_dim(),
            in_dim: d.in_dim(),
            weight: encode_f64s(d.weight.as_slice()),
            bias: encode_f64s(&d.bias),
        }
    }

    fn to_dense(&self) -> Result<Dense> {
        let w = decode_f64s(&self.weight, self.out_dim * self.in_dim)?;
        Ok(Dense {
            weight: Matrix::from_vec(self.out_dim, self.in_dim, w)?,
            bias: decode_f64s(&self.bias, self.out_dim)?,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RngRecord {
    /// 32-byte ChaCha key, hex.
    key: String,
    stream: u64,
    /// Position in 32-bit words, decimal (u128 does not fit JSON numbers).
    word_pos: String,
}

impl RngRecord {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            key: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        if self.key.len() != 64 {
            return Err(Error::Checkpoint("rng key must be 64 hex digits".into()));
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.key[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Checkpoint(format!("rng key: {e}")))?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    classes_per_task: usize,
    tasks: usize,
    rng: RngRecord,
    backbone: Vec<DenseRecord>,
    head: Vec<DenseRecord>,
    memory: Option<crate::memory::MemoryRecord>,
}

/// A model plus (optionally) the exemplar memory that accompanies it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: IncrementalClassifier,
    pub memory: Option<ExemplarMemory>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_dims: m.layer_dims.clone(),
            classes_per_task: m.classes_per_task,
            tasks: m.num_tasks(),
            rng: RngRecord::capture(&m.rng),
            backbone: m.backbone.iter().map(DenseRecord::from_dense).collect(),
            head: m.head.iter().map(DenseRecord::from_dense).collect(),
            memory: self.memory.as_ref().map(ExemplarMemory::to_record),
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: CheckpointRecord = serde_json::from_str(text)?;
        if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                record.format, record.version
            )));
        }
        if record.head.len() != record.tasks {
            return Err(Error::Checkpoint("task count disagrees with head blocks".into()));
        }
        let backbone = record
            .backbone
            .iter()
            .map(DenseRecord::to_dense)
            .collect::<Result<Vec<_>>>()?;
        let head = record
            .head
            .iter()
            .map(DenseRecord::to_dense)
            .collect::<Result<Vec<_>>>()?;
        let mut model =
            IncrementalClassifier::from_parts(&record.layer_dims, record.classes_per_task, backbone, head)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.rng = record.rng.restore()?;
        let memory = record
            .memory
            .map(ExemplarMemory::from_record)
            .transpose()?;
        Ok(Self { model, memory })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
