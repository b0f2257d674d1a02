//! Experiment configuration: a TOML document, validated in full before any
//! training starts.
//!
//! ```toml
//! methods = ["ft", "ssil"]
//! seeds = [0, 1, 2]
//! memory_capacity = 50
//! output_dir = "runs/desk"
//! # class_order_seed = 1993   # omit for the dataset's own order
//!
//! [dataset]
//! kind = "synthetic"          # or "csv" with train = "...", test = "...", has_header = true
//! num_classes = 10
//! dim = 16
//! per_class = 200
//! spread = 1.0
//! separation = 4.0
//! seed = 42
//!
//! [layout]
//! tasks = 5
//! classes_per_task = 2
//!
//! [model]
//! hidden = [64, 32]
//!
//! [train]                     # every key optional, desk-scale defaults
//! epochs = 40
//! lr_drops = [25, 35]
//! new_batch_size = 32
//! replay_batch_size = 8
//! post_process = "none"       # "bft" | "score_correction"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, split_tasks, synth_gaussian, CsvOptions, LabeledDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::layout::{class_ordering, TaskLayout};
use crate::sampler::BatchPlan;
use crate::trainer::{
    BftConfig, Method, PostProcess, RunSetup, ScoreCorrectionConfig, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        separation: f64,
        seed: u64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Widths after the input; the last one is the feature width.
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![64, 32] }
    }
}

/// Training keys of the config; anything left out takes the desk-scale
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub tau: f64,
    pub new_batch_size: usize,
    pub replay_batch_size: usize,
    pub joint_batch_size: usize,
    pub topk: usize,
    pub post_process: PostProcess,
    pub bft: BftConfig,
    pub score_correction: ScoreCorrectionConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::desk(Method::Ft, 0);
        Self {
            epochs: d.epochs,
            base_lr: d.base_lr,
            lr_drops: d.lr_drops,
            lr_drop_factor: d.lr_drop_factor,
            momentum: d.momentum,
            nesterov: d.nesterov,
            weight_decay: d.weight_decay,
            tau: d.tau,
            new_batch_size: d.batch_plan.new_batch_size,
            replay_batch_size: d.batch_plan.replay_batch_size,
            joint_batch_size: d.joint_batch_size,
            topk: d.topk,
            post_process: d.post_process,
            bft: d.bft,
            score_correction: d.score_correction,
        }
    }
}

impl TrainSpec {
    pub fn to_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs: self.epochs,
            base_lr: self.base_lr,
            lr_drops: self.lr_drops.clone(),
            lr_drop_factor: self.lr_drop_factor,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            tau: self.tau,
            batch_plan: BatchPlan {
                new_batch_size: self.new_batch_size,
                replay_batch_size: self.replay_batch_size,
            },
            joint_batch_size: self.joint_batch_size,
            seed,
            post_process: self.post_process,
            bft: self.bft,
            score_correction: self.score_correction,
            topk: self.topk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub layout: LayoutSpec,
    pub memory_capacity: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub class_order_seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Train and test splits per task, ready to run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub setup: RunSetup,
    pub train: Vec<LabeledDataset>,
    pub test: Vec<LabeledDataset>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// Reads the file; relative CSV paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let DatasetSpec::Csv { train, test, .. } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn layout(&self) -> Result<TaskLayout> {
        TaskLayout::new(self.layout.tasks, self.layout.classes_per_task)
            .map_err(|e| config_err(e.to_string()))
    }

    /// Checks everything that can be checked without the data.
    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        let classes = layout.total_classes();
        if self.methods.is_empty() {
            return Err(config_err("no methods listed"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("no seeds listed"));
        }
        if self.memory_capacity / classes == 0 {
            return Err(config_err(format!(
                "memory capacity {} leaves no exemplar per class for {classes} classes",
                self.memory_capacity
            )));
        }
        if let DatasetSpec::Synthetic { num_classes, dim, per_class, .. } = self.dataset {
            if num_classes != classes {
                return Err(config_err(format!(
                    "{} tasks × {} classes = {classes}, but the dataset has {num_classes} classes",
                    self.layout.tasks, self.layout.classes_per_task
                )));
            }
            if dim == 0 || per_class == 0 {
                return Err(config_err("synthetic dataset needs dim and per_class ≥ 1"));
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden needs at least one positive width"));
        }
        for &m in &self.methods {
            self.train
                .to_config(m, 0)
                .validate()
                .map_err(|e| config_err(format!("train ({m}): {e}")))?;
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn restrict(&mut self, seed: Option<u64>, methods: Option<&[Method]>) -> Result<()> {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(keep) = methods {
            self.methods.retain(|m| keep.contains(m));
            if self.methods.is_empty() {
                return Err(config_err("method filter leaves no method to run"));
            }
        }
        Ok(())
    }

    fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                dim,
                per_class,
                spread,
                separation,
                seed,
            } => synth_gaussian(&SynthSpec {
                num_classes: *num_classes,
                dim: *dim,
                per_class: *per_class,
                spread: *spread,
                separation: *separation,
                seed: *seed,
            }),
            DatasetSpec::Csv {
                train,
                test,
                has_header,
            } => {
                let opts = CsvOptions {
                    has_header: *has_header,
                    num_classes: Some(self.layout()?.total_classes()),
                };
                Ok((load_csv(train, opts)?, load_csv(test, opts)?))
            }
        }
    }

    /// Validates, loads the data and splits it into tasks.
    pub fn prepare(&self) -> Result<PreparedData> {
        self.validate()?;
        let layout = self.layout()?;
        let (train, test) = self.load_data().map_err(|e| match e {
            Error::InvalidArgument(m) => config_err(m),
            other => other,
        })?;
        for (name, d) in [("train", &train), ("test", &test)] {
            if d.num_classes() != layout.total_classes() {
                return Err(config_err(format!(
                    "{name} data has {} classes, layout needs {}",
                    d.num_classes(),
                    layout.total_classes()
                )));
            }
            d.require_all_classes()
                .map_err(|e| config_err(format!("{name} data: {e}")))?;
        }
        let quota = self.memory_capacity / layout.total_classes();
        let smallest = train.class_counts().into_iter().min().unwrap_or(0);
        if smallest < quota {
            return Err(config_err(format!(
                "a training class has {smallest} samples, fewer than the {quota} exemplars it must supply"
            )));
        }
        let ordering = match self.class_order_seed {
            Some(s) => class_ordering(layout.total_classes(), s),
            None => (0..layout.total_classes()).collect(),
        };
        let mut layer_dims = vec![train.dim()];
        layer_dims.extend(&self.model.hidden);
        Ok(PreparedData {
            setup: RunSetup {
                layout,
                layer_dims,
                memory_capacity: self.memory_capacity,
            },
            train: split_tasks(&train, &layout, &ordering).map_err(|e| config_err(e.to_string()))?,
            test: split_tasks(&test, &layout, &ordering).map_err(|e| config_err(e.to_string()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
methods = ["ft"]
seeds = [1]
memory_capacity = 8

[dataset]
kind = "synthetic"
num_classes = 4
dim = 3
per_class = 10
spread = 1.0
separation = 3.0
seed = 5

[layout]
tasks = 2
classes_per_task = 2
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.hidden, vec![64, 32]);
        assert_eq!(cfg.train, TrainSpec::default());
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
        let tc = cfg.train.to_config(Method::Ssil, 9);
        assert_eq!(tc, TrainConfig::desk(Method::Ssil, 9));
    }

    #[test]
    fn partial_train_section() {
        let text = format!("{MINIMAL}\n[train]\nepochs = 3\nlr_drops = [1]\n[train.bft]\nhead_only = true\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.train.bft.head_only);
        assert_eq!(cfg.train.bft.epochs, 30);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            MINIMAL.replace("tasks = 2", "tasks = 3"),
            MINIMAL.replace("memory_capacity = 8", "memory_capacity = 3"),
            MINIMAL.replace("methods = [\"ft\"]", "methods = []"),
            MINIMAL.replace("\"ft\"", "\"sgd\""),
            MINIMAL.replace("seed = 5", "seed = 5\nbogus = 1"),
            format!("{MINIMAL}\n[train]\nepochs = 0\n"),
        ];
        for text in cases {
            let r = ExperimentConfig::parse(&text).and_then(|c| c.validate());
            assert!(matches!(r, Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::parse(&MINIMAL.replace("[\"ft\"]", "[\"ft\", \"ssil\"]")).unwrap();
        cfg.restrict(Some(7), Some(&[Method::Ssil])).unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.methods, vec![Method::Ssil]);
        assert!(cfg.restrict(None, Some(&[Method::CeGkd])).is_err());
    }

    #[test]
    fn prepare_splits_tasks() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let p = cfg.prepare().unwrap();
        assert_eq!(p.train.len(), 2);
        assert_eq!(p.setup.layer_dims, vec![3, 64, 32]);
        assert_eq!(p.train[1].labels().iter().min(), Some(&2));
    }
}
