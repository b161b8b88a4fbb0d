//! Experiment configuration: one flat namespace of dotted keys.
//!
//! ```text
//! # comments start with '#'
//! gate.tau = 0.5
//! net.width = 32
//! train.constraint_grid = [0.3, 0.4, 0.5]
//! data.kind = "spirals"
//! ```
//!
//! Unknown keys are rejected. Values outside the customary grids are accepted
//! with a warning.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use toml::Value;

use crate::archspace::SuperNetConfig;
use crate::diffcore::Activation;
use crate::error::{Error, Result};
use crate::evalbench::{coarse_grid, fine_grid, AblationSpec, Experiment, SweepSpec};
use crate::gate::GateConfig;
use crate::harness::data::{DatasetKind, DatasetSpec};
use crate::scoring::ScoreWeights;
use crate::trainer::{TrainConfig, CONSTRAINT_GRID, LR_GRID};

pub const TAU_GRID: [f64; 3] = [0.1, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub layers: usize,
    pub widths: Vec<usize>,
    pub gate: GateConfig,
    pub weights: ScoreWeights,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    pub ablation: AblationSpec,
    pub data: DatasetSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Constraint used by `train --stage 3` unless overridden.
    pub deploy_constraint: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            widths: vec![32; 3],
            gate: GateConfig::default(),
            weights: ScoreWeights::default(),
            train: TrainConfig::default(),
            sweep: SweepSpec::default(),
            ablation: AblationSpec::default(),
            data: DatasetSpec::default(),
            seed: 0,
            out_dir: PathBuf::from("runs"),
            deploy_constraint: 0.5,
        }
    }
}

/// A parsed config plus any range warnings.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn bad(key: &str, want: &str, v: &Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {v}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(bad(key, "a number", other)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(bad(key, "a non-negative integer", other)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, "true or false", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, "a string", v))
}

fn as_array<'a>(key: &str, v: &'a Value) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| bad(key, "an array", v))
}

fn f64_list(key: &str, v: &Value) -> Result<Vec<f64>> {
    as_array(key, v)?.iter().map(|x| as_f64(key, x)).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<LoadedConfig> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        let mut cfg = ExperimentConfig::default();
        let mut widths_set = false;
        for (key, v) in &pairs {
            widths_set |= cfg.apply(key, v)?;
        }
        if !widths_set {
            cfg.widths = vec![cfg.widths.first().copied().unwrap_or(32); cfg.layers];
        }
        cfg.validate()?;
        let warnings = cfg.range_warnings();
        Ok(LoadedConfig { config: cfg, warnings })
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one key; returns true when it set explicit per-layer widths.
    fn apply(&mut self, key: &str, v: &Value) -> Result<bool> {
        let t = &mut self.train;
        let w = &mut self.weights;
        let d = &mut self.data;
        match key {
            "net.layers" => {
                self.layers = as_usize(key, v)?;
            }
            "net.width" => {
                let width = as_usize(key, v)?;
                self.widths = vec![width; self.layers.max(1)];
            }
            "net.widths" => {
                self.widths = as_array(key, v)?.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?;
                self.layers = self.widths.len();
                return Ok(true);
            }
            "gate.tau" => self.gate.tau = as_f64(key, v)?,
            "gate.hidden" => self.gate.hidden = as_usize(key, v)?,
            "gate.embed_dim" => self.gate.embed_dim = as_usize(key, v)?,
            "gate.straight_through" => self.gate.straight_through = as_bool(key, v)?,
            "gate.score_function" => self.gate.score_function = as_bool(key, v)?,
            "score.static" => w.static_w = as_f64(key, v)?,
            "score.dynamic" => w.dynamic_w = as_f64(key, v)?,
            "score.feature" => w.feature_w = as_f64(key, v)?,
            "score.corr" => w.corr_w = as_f64(key, v)?,
            "score.noise" => w.noise = as_f64(key, v)?,
            "score.lambda_corr" => w.corr_strength = as_f64(key, v)?,
            "score.alpha" => w.alpha = as_f64(key, v)?,
            "train.stage1_epochs" => t.stage1_epochs = as_usize(key, v)?,
            "train.stage2_epochs" => t.stage2_epochs = as_usize(key, v)?,
            "train.stage3_epochs" => t.stage3_epochs = as_usize(key, v)?,
            "train.samples" => t.samples_per_batch = as_usize(key, v)?,
            "train.batch_size" => t.batch_size = as_usize(key, v)?,
            "train.batches_per_epoch" => t.batches_per_epoch = Some(as_usize(key, v)?),
            "train.lr_gate" => t.lr_gate = as_f64(key, v)?,
            "train.lr_repr" => t.lr_repr = as_f64(key, v)?,
            "train.lr_backbone" => t.lr_backbone = as_f64(key, v)?,
            "train.weight_decay" => t.weight_decay = as_f64(key, v)?,
            "train.constraint_grid" => t.constraint_grid = f64_list(key, v)?,
            "train.fixed_constraint" => t.fixed_constraint = Some(as_f64(key, v)?),
            "train.patience" => t.patience = as_usize(key, v)?,
            "train.w_sparsity" => t.w_sparsity = as_f64(key, v)?,
            "train.w_diversity" => t.w_diversity = as_f64(key, v)?,
            "train.w_corr" => t.w_corr = as_f64(key, v)?,
            "train.w_stability" => t.w_stability = as_f64(key, v)?,
            "train.keep_start" => t.keep_start = as_f64(key, v)?,
            "train.keep_end" => t.keep_end = as_f64(key, v)?,
            "train.self_distill" => t.self_distill = as_bool(key, v)?,
            "train.distill_weight" => t.distill_weight = as_f64(key, v)?,
            "train.record_wall_clock" => t.record_wall_clock = as_bool(key, v)?,
            "sweep.grid" => {
                self.sweep.constraints = match as_str(key, v)? {
                    "coarse" => coarse_grid(),
                    "fine" => fine_grid(),
                    other => return Err(Error::Config(format!("{key}: unknown grid {other:?}"))),
                }
            }
            "sweep.constraints" => self.sweep.constraints = f64_list(key, v)?,
            "sweep.seeds" => {
                self.sweep.seeds = as_array(key, v)?
                    .iter()
                    .map(|x| as_usize(key, x).map(|s| s as u64))
                    .collect::<Result<_>>()?
            }
            "sweep.baselines" => {
                self.sweep.baselines = as_array(key, v)?
                    .iter()
                    .map(|x| as_str(key, x)?.parse())
                    .collect::<Result<_>>()?
            }
            "sweep.finetune" => self.sweep.finetune = as_bool(key, v)?,
            "ablation.constraints" => self.ablation.constraints = f64_list(key, v)?,
            "data.kind" => d.kind = as_str(key, v)?.parse::<DatasetKind>()?,
            "data.classes" => d.classes = as_usize(key, v)?,
            "data.samples_per_class" => d.samples_per_class = as_usize(key, v)?,
            "data.input_dim" => d.input_dim = as_usize(key, v)?,
            "data.noise" => d.noise = as_f64(key, v)?,
            "data.spacing" => d.spacing = as_f64(key, v)?,
            "data.spiral_turns" => d.spiral_turns = as_f64(key, v)?,
            "data.train_images" => d.train_images = Some(as_str(key, v)?.into()),
            "data.train_labels" => d.train_labels = Some(as_str(key, v)?.into()),
            "data.test_images" => d.test_images = Some(as_str(key, v)?.into()),
            "data.test_labels" => d.test_labels = Some(as_str(key, v)?.into()),
            "data.fractions" => {
                let f = f64_list(key, v)?;
                d.fractions = f
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected 3 fractions")))?;
            }
            "run.seed" => self.seed = as_usize(key, v)? as u64,
            "run.out" => self.out_dir = as_str(key, v)?.into(),
            "run.deploy_constraint" => self.deploy_constraint = as_f64(key, v)?,
            "run.id" => self.train.run_id = as_str(key, v)?.into(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.layers || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths {:?} do not describe {} non-empty layers",
                self.widths, self.layers
            )));
        }
        self.gate.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        for &c in &self.ablation.constraints {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Range(format!("ablation constraint {c} outside (0, 1]")));
            }
        }
        self.data.validate()?;
        if !(self.deploy_constraint > 0.0 && self.deploy_constraint <= 1.0) {
            return Err(Error::Range(format!("constraint {} outside (0, 1]", self.deploy_constraint)));
        }
        Ok(())
    }

    /// Values accepted but outside the customary hyperparameter grids.
    pub fn range_warnings(&self) -> Vec<String> {
        let on_grid = |v: f64, grid: &[f64]| grid.iter().any(|g| (g - v).abs() < 1e-12);
        let mut out = Vec::new();
        if !on_grid(self.gate.tau, &TAU_GRID) {
            out.push(format!("gate.tau = {} is outside {:?}", self.gate.tau, TAU_GRID));
        }
        for (k, v) in [
            ("train.lr_gate", self.train.lr_gate),
            ("train.lr_repr", self.train.lr_repr),
            ("train.lr_backbone", self.train.lr_backbone),
        ] {
            if !on_grid(v, &LR_GRID) {
                out.push(format!("{k} = {v} is outside {LR_GRID:?}"));
            }
        }
        for &c in &self.train.constraint_grid {
            if !on_grid(c, &CONSTRAINT_GRID) {
                out.push(format!("train.constraint_grid value {c} is outside {CONSTRAINT_GRID:?}"));
            }
        }
        out
    }

    pub fn net_config(&self, input_dim: usize) -> SuperNetConfig {
        SuperNetConfig {
            input_dim,
            num_classes: self.data.classes,
            widths: self.widths.clone(),
            activation: Activation::Relu,
        }
    }

    pub fn experiment(&self, input_dim: usize) -> Experiment {
        Experiment {
            net: self.net_config(input_dim),
            gate: self.gate.clone(),
            weights: self.weights.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
        }
    }

    /// 64-bit digest of everything that shapes training (not the output
    /// directory or run id).
    pub fn hash(&self) -> u64 {
        let mut train = self.train.clone();
        train.run_id.clear();
        let canon = format!(
            "{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{}",
            self.widths, self.gate, self.weights, train, self.data, self.seed, self.deploy_constraint
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys() {
        let text = "# demo\ngate.tau = 0.1\nnet.layers = 2\nnet.width = 16\n[train]\npatience = 3\n";
        let cfg = ExperimentConfig::parse(text).unwrap().config;
        assert_eq!(cfg.gate.tau, 0.1);
        assert_eq!(cfg.widths, vec![16, 16]);
        assert_eq!(cfg.train.patience, 3);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(ExperimentConfig::parse("gate.tauu = 1.0"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("gate.tau = 0.0").is_err());
        assert!(ExperimentConfig::parse("run.deploy_constraint = 1.5").is_err());
    }

    #[test]
    fn off_grid_values_warn() {
        let loaded = ExperimentConfig::parse("gate.tau = 0.7\ntrain.lr_gate = 0.01").unwrap();
        assert_eq!(loaded.warnings.len(), 2);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
