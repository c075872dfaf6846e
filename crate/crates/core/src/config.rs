//! Run configuration, serialized as `key = value` lines.
//!
//! The same text form is used for `--config` files, the config blob inside
//! checkpoints and the run manifest, so a checkpoint fully describes how to
//! rebuild its model and data.

use std::fmt::Write as _;

use crate::cells::{CellKind, Nonlinearity};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optimizer::{scaled_lr, OptimConfig};
use crate::tasks::{TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub precision: Precision,

    pub maps: usize,
    pub kernel_width: usize,
    pub cell: CellKind,
    pub nonlinearity: Nonlinearity,
    pub saturation: bool,
    pub s_limit: f64,
    pub dropout: f64,
    pub bins: Vec<usize>,

    /// Examples generated for every achievable training length.
    pub per_length: usize,
    pub batch_per_bin: usize,

    /// `None` means `0.005 * 96 / maps`.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_ratio: f64,
    pub noise_scale: f64,
    pub patience: u64,
    pub lr_decay: f64,
    pub smoothing: f64,

    pub eval_length: usize,
    pub eval_count: usize,
    pub eval_interval: u64,
    /// Stop once evaluation bit accuracy reaches this value.
    pub target_accuracy: f64,
    pub max_steps: u64,
    /// `0` disables the wall-clock budget.
    pub max_seconds: u64,
    /// `0` writes checkpoints only at the start and end of a run.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Mul2,
            seed: 1,
            precision: Precision::F32,
            maps: 96,
            kernel_width: 3,
            cell: CellKind::Dcgru,
            nonlinearity: Nonlinearity::Hard,
            saturation: true,
            s_limit: 0.9,
            dropout: 0.1,
            bins: vec![9, 17, 25, 33, 41],
            per_length: 10_000,
            batch_per_bin: 32,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_ratio: 1.0,
            noise_scale: 0.01,
            patience: 600,
            lr_decay: 0.7,
            smoothing: 0.99,
            eval_length: 401,
            eval_count: 1024,
            eval_interval: 100,
            target_accuracy: 0.99,
            max_steps: 4000,
            max_seconds: 0,
            checkpoint_interval: 1000,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} expects a boolean, got '{value}'"))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" | "single" => Precision::F32,
                    "f64" | "double" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got '{v}'"))),
                }
            }
            "maps" => self.maps = parse(key, v)?,
            "kernel_width" => self.kernel_width = parse(key, v)?,
            "cell" => {
                self.cell = match v {
                    "dcgru" => CellKind::Dcgru,
                    "cgru" => CellKind::Cgru,
                    _ => return Err(Error::Config(format!("cell must be dcgru or cgru, got '{v}'"))),
                }
            }
            "nonlinearity" => {
                self.nonlinearity = match v {
                    "hard" => Nonlinearity::Hard,
                    "soft" => Nonlinearity::Soft,
                    _ => return Err(Error::Config(format!("nonlinearity must be hard or soft, got '{v}'"))),
                }
            }
            "saturation" => self.saturation = parse_bool(key, v)?,
            "s_limit" => self.s_limit = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "bins" => self.bins = parse_list(key, v)?,
            "per_length" => self.per_length = parse(key, v)?,
            "batch_per_bin" => self.batch_per_bin = parse(key, v)?,
            "lr" => self.lr = if v == "auto" { None } else { Some(parse(key, v)?) },
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "clip_ratio" => self.clip_ratio = parse(key, v)?,
            "noise_scale" => self.noise_scale = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "smoothing" => self.smoothing = parse(key, v)?,
            "eval_length" => self.eval_length = parse(key, v)?,
            "eval_count" => self.eval_count = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "target_accuracy" => self.target_accuracy = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "max_seconds" => self.max_seconds = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let bins: Vec<String> = self.bins.iter().map(|b| b.to_string()).collect();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.name().into());
        kv("seed", self.seed.to_string());
        kv("precision", self.precision.name().into());
        kv("maps", self.maps.to_string());
        kv("kernel_width", self.kernel_width.to_string());
        kv(
            "cell",
            match self.cell {
                CellKind::Dcgru => "dcgru",
                CellKind::Cgru => "cgru",
            }
            .into(),
        );
        kv(
            "nonlinearity",
            match self.nonlinearity {
                Nonlinearity::Hard => "hard",
                Nonlinearity::Soft => "soft",
            }
            .into(),
        );
        kv("saturation", self.saturation.to_string());
        kv("s_limit", self.s_limit.to_string());
        kv("dropout", self.dropout.to_string());
        kv("bins", bins.join(","));
        kv("per_length", self.per_length.to_string());
        kv("batch_per_bin", self.batch_per_bin.to_string());
        kv("lr", self.lr.map_or("auto".into(), |v| v.to_string()));
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("clip_ratio", self.clip_ratio.to_string());
        kv("noise_scale", self.noise_scale.to_string());
        kv("patience", self.patience.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("smoothing", self.smoothing.to_string());
        kv("eval_length", self.eval_length.to_string());
        kv("eval_count", self.eval_count.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("target_accuracy", self.target_accuracy.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("max_seconds", self.max_seconds.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        s
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec::new(self.task)
    }

    pub fn model_config(&self) -> ModelConfig {
        let vocab = self.task.alphabet().len();
        ModelConfig {
            maps: self.maps,
            kernel_width: self.kernel_width,
            cell: self.cell,
            nonlinearity: self.nonlinearity,
            saturation: self.saturation,
            s_limit: self.s_limit,
            dropout: self.dropout,
            vocab_in: vocab,
            vocab_out: vocab,
            bins: self.bins.clone(),
            split: None,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| scaled_lr(self.maps))
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.effective_lr(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_ratio: self.clip_ratio,
            noise_scale: self.noise_scale,
            patience: self.patience,
            decay: self.lr_decay,
            smoothing: self.smoothing,
        }
    }

    /// Longest training example: the largest bin.
    pub fn train_max_len(&self) -> usize {
        self.bins.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.optim_config().validate()?;
        if self.per_length == 0 || self.batch_per_bin == 0 {
            return Err(Error::Config("per_length and batch_per_bin must be positive".into()));
        }
        if self.eval_count == 0 || self.eval_interval == 0 {
            return Err(Error::Config("eval_count and eval_interval must be positive".into()));
        }
        if !self.task.is_achievable(self.eval_length) {
            return Err(Error::Config(format!(
                "evaluation length {} cannot be produced by task {}",
                self.eval_length, self.task
            )));
        }
        Ok(())
    }
}
