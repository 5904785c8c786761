//! Run configuration, read from a sectioned `key = value` text file.
//! Unknown keys are rejected.

use crate::error::{ModelError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which schedule family is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Learned per-position insertion (and optionally unmasking) rates.
    Lflexmdm,
    /// Fixed linear schedule for every position.
    Flexmdm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// The schedule network has its own small transformer.
    Separate,
    /// The schedule network reads the generator's trunk at `t = 1`.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub preset: String,
    /// Directory holding `train.jsonl`, `test.jsonl` and `vocab.json`.
    pub data_dir: String,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            preset: "medium".into(),
            data_dir: "data/medium".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub method: Method,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_mult: usize,
    pub aux_layers: usize,
    pub aux_width: usize,
    pub aux_heads: usize,
    pub backbone: Backbone,
    /// Keep every unmasking rate at 1 and learn only insertion rates.
    pub freeze_b_un: bool,
    /// Shared Kumaraswamy shape.
    pub a: f64,
    pub rope_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            method: Method::Lflexmdm,
            layers: 4,
            width: 128,
            heads: 4,
            mlp_mult: 4,
            aux_layers: 2,
            aux_width: 64,
            aux_heads: 4,
            backbone: Backbone::Separate,
            freeze_b_un: true,
            a: 1.0,
            rope_base: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub grad_clip: f64,
    pub lambda_reg: f64,
    pub reg_grid: usize,
    pub reg_t_eps: f64,
    pub reg_delta: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Independent gradient shards per batch; fixed so results do not depend
    /// on the thread count.
    pub shards: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 15_000,
            batch: 64,
            lr: 1e-4,
            weight_decay: 1e-2,
            warmup: 500,
            grad_clip: 1.0,
            lambda_reg: 1.0,
            reg_grid: 16,
            reg_t_eps: 0.01,
            reg_delta: 0.01,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
            shards: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    pub nucleus_p: f64,
    pub confidence: bool,
    pub seed: u64,
    /// Evaluate at most this many test instances (0 = all).
    pub limit: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 500,
            nucleus_p: 1.0,
            confidence: false,
            seed: 0,
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The settings a resumed run must share with its checkpoint. Run length
    /// and logging cadence may change between invocations.
    pub fn resume_key(&self) -> RunConfig {
        let mut c = self.clone();
        c.train.steps = 0;
        c.train.log_every = 0;
        c.train.checkpoint_every = 0;
        c.sample = SampleSection::default();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |s: String| Err(ModelError::Config(s));
        if m.layers == 0
            || m.width == 0
            || m.heads == 0
            || !m.width.is_multiple_of(m.heads)
            || !(m.width / m.heads).is_multiple_of(2)
        {
            return bad(format!(
                "width {} must split into {} heads of even size",
                m.width, m.heads
            ));
        }
        if !m.aux_width.is_multiple_of(m.aux_heads) || !(m.aux_width / m.aux_heads).is_multiple_of(2) {
            return bad(format!(
                "aux width {} must split into {} heads of even size",
                m.aux_width, m.aux_heads
            ));
        }
        if !(m.a > 0.0 && m.a.is_finite()) {
            return bad(format!("a = {} must be positive", m.a));
        }
        let t = &self.train;
        if t.batch == 0 || t.shards == 0 {
            return bad("batch and shards must be positive".into());
        }
        if !(t.lr > 0.0) || t.weight_decay < 0.0 || t.lambda_reg < 0.0 {
            return bad("lr must be positive; weight_decay and lambda_reg non-negative".into());
        }
        let s = &self.sample;
        if s.steps == 0 || !(s.nucleus_p > 0.0 && s.nucleus_p <= 1.0) {
            return bad("sample steps must be positive and nucleus_p in (0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::parse("[model]\nmethod = \"flexmdm\"\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(c.model.method, Method::Flexmdm);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[train]\nstepz = 10\n").is_err());
        assert!(RunConfig::parse("[extra]\nx = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 30\nheads = 4\n").is_err());
    }
}
