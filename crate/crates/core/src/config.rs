//! Run configuration as flat `section.key=value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown keys and malformed values are rejected. [`RunConfig::to_text`]
//! writes every key, so its output parses back to an identical configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Synthetic dataset size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSection {
    pub classes: usize,
    pub samples_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale model sized for the synthetic dataset.
    fn default() -> Self {
        Self {
            data: DataSection { classes: 4, samples_per_class: 16 },
            model: ModelConfig::toy(4),
            train: TrainConfig { batch_size: 8, ..TrainConfig::default() },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        let v = value.trim();
        match key.trim() {
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(key, v)?,
            "model.time" => m.time = parse(key, v)?,
            "model.joints" => m.joints = parse(key, v)?,
            "model.skeleton_channels" => m.skeleton_channels = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.skeleton_layers" => m.skeleton_layers = parse(key, v)?,
            "model.event_layers" => m.event_layers = parse(key, v)?,
            "model.state_dim" => m.state_dim = parse(key, v)?,
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.classes" => m.classes = parse(key, v)?,
            "model.k" => m.k = parse(key, v)?,
            "model.groups" => m.groups = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.swap_dib_targets" => m.swap_dib_targets = parse(key, v)?,
            "dib.alpha" => m.dib.alpha = parse(key, v)?,
            "dib.lambda1" => m.dib.lambda1 = parse(key, v)?,
            "dib.lambda2" => m.dib.lambda2 = parse(key, v)?,
            "dib.momentum" => m.dib.momentum = parse(key, v)?,
            "toggles.sgn" => m.toggles.sgn = parse(key, v)?,
            "toggles.mamba" => m.toggles.mamba = parse(key, v)?,
            "toggles.sse" => m.toggles.sse = parse(key, v)?,
            "toggles.scm" => m.toggles.scm = parse(key, v)?,
            "toggles.dib" => m.toggles.dib = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.nesterov" => t.nesterov = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.milestones" => t.milestones = parse_list(key, v)?,
            "train.lr_decay" => t.lr_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            other => return Err(invalid(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k, v).map_err(|e| invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.classes < 2 || self.data.samples_per_class == 0 {
            return Err(invalid("data needs at least two classes and one sample per class"));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("data.classes", self.data.classes.to_string());
        kv("data.samples_per_class", self.data.samples_per_class.to_string());
        kv("model.time", m.time.to_string());
        kv("model.joints", m.joints.to_string());
        kv("model.skeleton_channels", m.skeleton_channels.to_string());
        kv("model.dim", m.dim.to_string());
        kv("model.skeleton_layers", m.skeleton_layers.to_string());
        kv("model.event_layers", m.event_layers.to_string());
        kv("model.state_dim", m.state_dim.to_string());
        kv("model.height", m.height.to_string());
        kv("model.width", m.width.to_string());
        kv("model.patch", m.patch.to_string());
        kv("model.classes", m.classes.to_string());
        kv("model.k", m.k.to_string());
        kv("model.groups", m.groups.to_string());
        kv("model.dropout", format!("{:?}", m.dropout));
        kv("model.swap_dib_targets", m.swap_dib_targets.to_string());
        kv("dib.alpha", format!("{:?}", m.dib.alpha));
        kv("dib.lambda1", format!("{:?}", m.dib.lambda1));
        kv("dib.lambda2", format!("{:?}", m.dib.lambda2));
        kv("dib.momentum", format!("{:?}", m.dib.momentum));
        kv("toggles.sgn", m.toggles.sgn.to_string());
        kv("toggles.mamba", m.toggles.mamba.to_string());
        kv("toggles.sse", m.toggles.sse.to_string());
        kv("toggles.scm", m.toggles.scm.to_string());
        kv("toggles.dib", m.toggles.dib.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.momentum", format!("{:?}", t.momentum));
        kv("train.nesterov", t.nesterov.to_string());
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.epochs", t.epochs.to_string());
        kv("train.milestones", t.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","));
        kv("train.lr_decay", format!("{:?}", t.lr_decay));
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        s
    }
}
