use std::path::{Path, PathBuf};

use lora_construct::tfn::HeadType;
use lora_construct::train::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SweepLinear,
    SweepFnn,
    SweepTfn,
    CompareFinalLayers,
    AblateBias,
    Classify,
    Generalization,
    Curves,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SweepLinear => "sweep-linear",
            ExperimentKind::SweepFnn => "sweep-fnn",
            ExperimentKind::SweepTfn => "sweep-tfn",
            ExperimentKind::CompareFinalLayers => "compare-final-layers",
            ExperimentKind::AblateBias => "ablate-bias",
            ExperimentKind::Classify => "classify",
            ExperimentKind::Generalization => "generalization",
            ExperimentKind::Curves => "curves",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    Fnn,
    Tfn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Fnn => "fnn",
            ModelKind::Tfn => "tfn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Construction,
    Gradient,
    FinalLayers,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Construction => "construction",
            Method::Gradient => "gradient",
            Method::FinalLayers => "final-layers",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [Method::Construction, Method::Gradient, Method::FinalLayers]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Random,
    Pretrained,
}

/// Label scheme for the classification experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// One class per output coordinate.
    #[default]
    MultiClass,
    /// Fixed 2×16 head summing the first and last eight coordinates.
    Binary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Model family; sweeps fix it, the other experiments read it.
    pub model: ModelKind,
    pub dim: usize,
    pub depth: usize,
    pub target_depth: usize,
    pub heads: usize,
    pub head_type: HeadType,
    pub ranks: Vec<usize>,
    /// Tuned-layer counts for the final-layers baseline.
    pub final_layers: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: usize,
    pub seed_base: u64,
    pub variant: Variant,
    pub task: Task,
    pub train_biases: bool,
    pub test_samples: usize,
    pub train_samples: usize,
    /// Input-ball radius; `2·sqrt(dim)` when absent.
    pub input_radius: Option<f64>,
    pub jitter: Option<f64>,
    pub cell_timeout_secs: u64,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Model files to use instead of generated models, for every seed.
    pub frozen_model: Option<PathBuf>,
    pub target_model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::SweepLinear,
            model: ModelKind::Fnn,
            dim: 16,
            depth: 2,
            target_depth: 1,
            heads: 2,
            head_type: HeadType::Multi,
            ranks: (0..=16).collect(),
            final_layers: Vec::new(),
            methods: vec![Method::Construction],
            seeds: 5,
            seed_base: 0,
            variant: Variant::Random,
            task: Task::MultiClass,
            train_biases: false,
            test_samples: 1024,
            train_samples: 400,
            input_radius: None,
            jitter: None,
            cell_timeout_secs: 600,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            frozen_model: None,
            target_model: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key value` overrides. Keys may be dotted (`train.iterations`);
    /// values parse as JSON, falling back to a bare string.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self, BenchError> {
        let mut v = serde_json::to_value(self).map_err(|e| BenchError::Config(e.to_string()))?;
        for (key, raw) in pairs {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut v;
            for part in key.split('.') {
                let part = part.replace('-', "_");
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(&part))
                    .ok_or_else(|| BenchError::Config(format!("unknown key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.dim == 0 || self.depth == 0 || self.target_depth == 0 {
            return bad("dim, depth and target_depth must be positive".into());
        }
        if let Some(r) = self.ranks.iter().find(|&&r| r > self.dim) {
            return bad(format!("rank {r} exceeds dim {}", self.dim));
        }
        if self.test_samples == 0 {
            return bad("test_samples must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if matches!(self.input_radius, Some(r) if !(r > 0.0)) {
            return bad("input_radius must be positive".into());
        }
        if self.task == Task::Binary && self.experiment == ExperimentKind::Classify && self.dim != 16 {
            return bad("the binary head is defined for dim 16".into());
        }
        if self.frozen_model.is_some() != self.target_model.is_some() {
            return bad("frozen_model and target_model go together".into());
        }
        self.train.validate().map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn radius(&self) -> f64 {
        self.input_radius.unwrap_or(2.0 * (self.dim as f64).sqrt())
    }

    /// Model family the experiment actually runs on.
    pub fn model_kind(&self) -> ModelKind {
        match self.experiment {
            ExperimentKind::SweepLinear => ModelKind::Linear,
            ExperimentKind::SweepFnn | ExperimentKind::CompareFinalLayers | ExperimentKind::AblateBias => ModelKind::Fnn,
            ExperimentKind::SweepTfn => ModelKind::Tfn,
            _ => self.model,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_base + i).collect()
    }
}

/// Splits `--key value` pairs out of trailing arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, BenchError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(k) = it.next() {
        let key = k
            .strip_prefix("--")
            .ok_or_else(|| BenchError::Config(format!("expected `--key value`, got `{k}`")))?;
        let value = it.next().ok_or_else(|| BenchError::Config(format!("missing value for `{k}`")))?;
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}
