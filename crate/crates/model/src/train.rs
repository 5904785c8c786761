//! The optimizer loop: sample a batch, build each example's objective,
//! accumulate gradients in a fixed order, clip, and take one AdamW step.

use crate::checkpoint::{self, Checkpoint, RngState};
use crate::config::RunConfig;
use crate::error::{io_err, ModelError, Result};
use crate::net::Model;
use crate::objective::{example_objective, ObjectiveConfig, ObjectiveStats};
use lflex_autodiff::{AdamW, GradStore, Graph};
use lflex_core::kuma::clamp_time;
use lflex_core::loss::RegConfig;
use lflex_core::rng::{stream, substream};
use lflex_core::{par, TokenId, Vocab};
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Salt separating the initialization stream from per-step streams.
const INIT_STREAM: u64 = u64::MAX;
const BATCH_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

pub const CSV_HEADER: &str = "step,wall_ms,loss_total,loss_unmask,loss_insert,loss_reg,score_term_abs,grad_norm";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub wall_ms: u64,
    pub stats: ObjectiveStats,
    /// Norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.wall_ms, s.total, s.unmask, s.insert, s.reg, s.score_abs, self.grad_norm
        )
    }
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    pub next_step: u64,
    data: Vec<Example>,
}

impl Trainer {
    pub fn new(config: RunConfig, vocab: Vocab, max_len: usize, data: Vec<Example>) -> Result<Self> {
        config.validate()?;
        check_data(&data, max_len)?;
        let mut rng = stream(config.train.seed, INIT_STREAM);
        let model = Model::new(&config.model, vocab, max_len, &mut rng)?;
        let opt = AdamW::new(&model.store, config.train.lr, config.train.weight_decay);
        Ok(Self {
            config,
            model,
            opt,
            next_step: 0,
            data,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save`]. `config` must
    /// agree with the checkpoint's except for run length and logging cadence.
    pub fn resume(ck: Checkpoint, config: RunConfig, data: Vec<Example>) -> Result<Self> {
        if ck.config.resume_key() != config.resume_key() {
            return Err(ModelError::Checkpoint(
                "resume mismatch: configuration differs from the checkpoint's".into(),
            ));
        }
        if ck.rng.seed != config.train.seed {
            return Err(ModelError::Checkpoint("resume mismatch: seed differs".into()));
        }
        let opt = ck
            .opt
            .ok_or_else(|| ModelError::Checkpoint("checkpoint holds no optimizer state".into()))?;
        check_data(&data, ck.model.max_len)?;
        Ok(Self {
            config,
            model: ck.model,
            opt,
            next_step: ck.rng.next_step,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rng = RngState {
            seed: self.config.train.seed,
            next_step: self.next_step,
        };
        checkpoint::save(path, &self.config, &self.model, Some(&self.opt), rng)
    }

    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = &self.config.train;
        if step < t.warmup {
            t.lr * (step + 1) as f64 / t.warmup as f64
        } else {
            t.lr
        }
    }

    fn objective_config(&self) -> ObjectiveConfig {
        let t = &self.config.train;
        ObjectiveConfig {
            lambda_reg: t.lambda_reg,
            reg: RegConfig {
                t_eps: t.reg_t_eps,
                delta: t.reg_delta,
                grid_points: t.reg_grid,
            },
        }
    }

    /// Mean objective and gradient over the batch for `step`, without
    /// updating parameters.
    pub fn batch_gradient(&self, step: u64) -> Result<(GradStore, ObjectiveStats)> {
        let tc = &self.config.train;
        let seed = tc.seed;
        let b = tc.batch;
        let mut pick = substream(seed, step, BATCH_STREAM);
        let batch: Vec<usize> = (0..b).map(|_| pick.gen_range(0..self.data.len())).collect();
        let shards = tc.shards.min(b);
        let ocfg = self.objective_config();
        let inv_b = 1.0 / b as f64;
        let parts = par::try_map_indexed(shards, |s| -> Result<(GradStore, ObjectiveStats)> {
            let mut grads = GradStore::zeros_like(&self.model.store);
            let mut stats = ObjectiveStats::default();
            for k in (s..b).step_by(shards) {
                let ex = &self.data[batch[k]];
                let mut rng = substream(seed, step, k as u64);
                let t = clamp_time(rng.gen::<f64>());
                let g = Graph::new();
                let (obj, st) = example_objective(&g, &self.model, &ocfg, &ex.prompt, &ex.answer, t, &mut rng)?;
                g.backward(obj)?.accumulate(&mut grads, inv_b);
                stats.add_scaled(&st, inv_b);
            }
            Ok((grads, stats))
        })?;
        let mut grads = GradStore::zeros_like(&self.model.store);
        let mut stats = ObjectiveStats::default();
        for (g, s) in &parts {
            grads.add_scaled(g, 1.0);
            stats.add_scaled(s, 1.0);
        }
        Ok((grads, stats))
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.next_step;
        let (mut grads, stats) = self.batch_gradient(step)?;
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(ModelError::Data(format!("non-finite gradient at step {step}")));
        }
        let clip = self.config.train.grad_clip;
        if clip > 0.0 && norm > clip {
            grads.scale(clip / norm);
        }
        let lr = self.lr_at(step);
        self.opt.update(&mut self.model.store, &grads, lr);
        self.next_step += 1;
        Ok(StepMetrics {
            step,
            wall_ms: start.elapsed().as_millis() as u64,
            stats,
            grad_norm: norm,
        })
    }
}

fn check_data(data: &[Example], max_len: usize) -> Result<()> {
    if data.is_empty() {
        return Err(ModelError::Data("no training examples".into()));
    }
    if let Some(e) = data.iter().find(|e| e.answer.is_empty() || e.answer.len() > max_len) {
        return Err(ModelError::Data(format!(
            "answer of length {} outside 1..={max_len}",
            e.answer.len()
        )));
    }
    Ok(())
}

/// Options of [`run`] that do not affect the trained parameters.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Record real step durations; otherwise `wall_ms` is written as 0 so
    /// reruns produce identical files.
    pub timing: bool,
    /// Print a progress line every `log_every` steps.
    pub verbose: bool,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Train until `config.train.steps`, writing `metrics.csv` and
/// `checkpoint.bin` into `out_dir`. On resume, rows at or after the resumed
/// step are dropped before appending.
pub fn run(trainer: &mut Trainer, out_dir: &Path, opts: &RunOptions) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join(METRICS_FILE);
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let mut kept = vec![CSV_HEADER.to_string()];
    if trainer.next_step > 0 {
        if let Ok(text) = std::fs::read_to_string(&csv_path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s < trainer.next_step)
                    })
                    .map(String::from),
            );
        }
    }
    let mut csv = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    writeln!(csv, "{}", kept.join("\n")).map_err(io_err(&csv_path))?;
    let tc = trainer.config.train.clone();
    while trainer.next_step < tc.steps {
        let mut m = trainer.step()?;
        if !opts.timing {
            m.wall_ms = 0;
        }
        writeln!(csv, "{}", m.csv_row()).map_err(io_err(&csv_path))?;
        if opts.verbose && tc.log_every > 0 && (m.step % tc.log_every == 0 || trainer.next_step == tc.steps) {
            eprintln!(
                "step {:>6} loss {:.4} unmask {:.4} insert {:.4} reg {:.5} |grad| {:.3}",
                m.step, m.stats.total, m.stats.unmask, m.stats.insert, m.stats.reg, m.grad_norm
            );
        }
        if tc.checkpoint_every > 0 && trainer.next_step.is_multiple_of(tc.checkpoint_every) {
            trainer.save(&ck_path)?;
        }
    }
    csv.flush().map_err(io_err(&csv_path))?;
    trainer.save(&ck_path)?;
    Ok(ck_path)
}
