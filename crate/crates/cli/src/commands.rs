//! The subcommands as library functions, so tests can drive them directly.

use anyhow::{bail, Context, Result};
use lflex_core::metrics::{exact_match, example_order_correlation, token_accuracy};
use lflex_core::rng::{stream, substream};
use lflex_core::sampler::{sample as run_sampler, write_jsonl, SamplerConfig};
use lflex_core::star::{generate_instance, StarConfig, StarRecord, StarVocab};
use lflex_core::{par, TokenId};
use lflex_model::checkpoint;
use lflex_model::data::{self, TEST_FILE, TRAIN_FILE, VOCAB_FILE};
use lflex_model::train::{self, Example, RunOptions, Trainer};
use lflex_model::RunConfig;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

const TRAIN_SPLIT: u64 = 0;
const TEST_SPLIT: u64 = 1;

/// Dataset sizes; `None` keeps the preset's.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sizes {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

/// Write `train.jsonl`, `test.jsonl` and `vocab.json` for a preset.
pub fn gen_data(preset: &str, seed: u64, sizes: Sizes, out: &Path) -> Result<()> {
    let mut cfg = StarConfig::preset(preset)?;
    cfg.train_size = sizes.train.unwrap_or(cfg.train_size);
    cfg.test_size = sizes.test.unwrap_or(cfg.test_size);
    cfg.validate()?;
    let vocab = StarVocab { pool: cfg.node_pool };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (split, n, file) in [
        (TRAIN_SPLIT, cfg.train_size, TRAIN_FILE),
        (TEST_SPLIT, cfg.test_size, TEST_FILE),
    ] {
        let records = par::try_map_indexed(n, |i| {
            let inst = generate_instance(&cfg, &mut substream(seed, split, i as u64))?;
            StarRecord::new(&inst, &vocab)
        })?;
        data::write_records(&out.join(file), &records)?;
    }
    data::write_vocab(&out.join(VOCAB_FILE), vocab)?;
    Ok(())
}

fn load_examples(dir: &Path, file: &str) -> Result<Vec<Example>> {
    Ok(data::read_records(&dir.join(file))?
        .into_iter()
        .map(|r| Example {
            prompt: r.prompt,
            answer: r.answer,
        })
        .collect())
}

/// Overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub resume: bool,
    pub opts: RunOptions,
}

pub fn train(config_path: &Path, out: &Path, args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let data_dir = PathBuf::from(&cfg.task.data_dir);
    let vocab = data::read_vocab(&data_dir.join(VOCAB_FILE))?;
    let preset = StarConfig::preset(&cfg.task.preset)?;
    let examples = load_examples(&data_dir, TRAIN_FILE)?;
    let ck_path = out.join(train::CHECKPOINT_FILE);
    let mut trainer = if args.resume && ck_path.exists() {
        Trainer::resume(checkpoint::load(&ck_path)?, cfg.clone(), examples)?
    } else {
        Trainer::new(cfg.clone(), vocab.vocab(), preset.max_answer_len(), examples)?
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_text())?;
    Ok(train::run(&mut trainer, out, &args.opts)?)
}

/// One line of a generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unmask_step: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insert_step: Option<Vec<usize>>,
    /// Set when generation failed, e.g. on length overflow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Use at most this many prompts (0 = all).
    pub limit: usize,
    pub trajectories: Option<PathBuf>,
}

pub fn sample(checkpoint_path: &Path, prompts: &Path, out: &Path, args: &SampleArgs) -> Result<()> {
    let ck = checkpoint::load(checkpoint_path)?;
    let model = ck.model;
    let mut records = data::read_records(prompts)?;
    if args.limit > 0 {
        records.truncate(args.limit);
    }
    let mut cfg = args.sampler;
    cfg.max_len = model.max_len;
    let results = par::map_indexed(records.len(), |i| {
        let mut rng = stream(args.seed, i as u64);
        run_sampler(&model, &records[i].prompt, &cfg, &mut rng)
    });
    let mut w = BufWriter::new(std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut traj = match &args.trajectories {
        Some(p) => Some(BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    for (index, r) in results.into_iter().enumerate() {
        let g = match r {
            Ok(o) => {
                if let Some(t) = traj.as_mut() {
                    write_jsonl(&o.trajectory, &mut *t)?;
                }
                Generation {
                    index,
                    tokens: o.tokens,
                    unmask_step: Some(o.trajectory.unmask_step),
                    insert_step: Some(o.trajectory.insert_step),
                    error: None,
                }
            }
            Err(e) => Generation {
                index,
                tokens: vec![],
                unmask_step: None,
                insert_step: None,
                error: Some(e.to_string()),
            },
        };
        writeln!(w, "{}", serde_json::to_string(&g)?)?;
    }
    w.flush()?;
    if let Some(mut t) = traj {
        t.flush()?;
    }
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = vec![];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub exact_match_pct: f64,
    pub token_accuracy_pct: f64,
    /// Mean order-distance correlation over exact-match examples where it is
    /// defined.
    pub order_correlation: Option<f64>,
    pub correlation_examples: usize,
    pub failed_generations: usize,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let corr = self
            .order_correlation
            .map(|c| format!("{c:.4}"))
            .unwrap_or_else(|| "n/a".into());
        format!(
            "examples {}\nexact match {:.2}%\ntoken accuracy {:.2}%\norder-distance correlation {} (over {} exact matches)\nfailed generations {}",
            self.examples,
            self.exact_match_pct,
            self.token_accuracy_pct,
            corr,
            self.correlation_examples,
            self.failed_generations
        )
    }

    pub fn csv(&self) -> String {
        let corr = self.order_correlation.map(|c| format!("{c}")).unwrap_or_default();
        format!(
            "metric,value\nexamples,{}\nexact_match_pct,{}\ntoken_accuracy_pct,{}\norder_correlation,{}\ncorrelation_examples,{}\nfailed_generations,{}\n",
            self.examples,
            self.exact_match_pct,
            self.token_accuracy_pct,
            corr,
            self.correlation_examples,
            self.failed_generations
        )
    }
}

pub fn evaluate(gens: &[Generation], gold: &[StarRecord]) -> Result<EvalReport> {
    if gens.is_empty() {
        bail!("empty generations input");
    }
    let mut seen = vec![false; gold.len()];
    let (mut em, mut acc) = (0usize, 0.0);
    let mut corrs = vec![];
    for g in gens {
        let Some(rec) = gold.get(g.index) else {
            bail!(
                "generation index {} has no gold record ({} available)",
                g.index,
                gold.len()
            );
        };
        if std::mem::replace(&mut seen[g.index], true) {
            bail!("generation index {} appears twice", g.index);
        }
        acc += token_accuracy(&g.tokens, &rec.answer);
        if exact_match(&g.tokens, &rec.answer) {
            em += 1;
            if let Some(steps) = &g.unmask_step {
                let inst = rec.instance();
                if let Some(c) = example_order_correlation(steps, &inst.answer_distances(), inst.path_len()) {
                    corrs.push(c);
                }
            }
        }
    }
    let n = gens.len() as f64;
    Ok(EvalReport {
        examples: gens.len(),
        exact_match_pct: 100.0 * em as f64 / n,
        token_accuracy_pct: 100.0 * acc / n,
        order_correlation: (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64),
        correlation_examples: corrs.len(),
        failed_generations: gens.iter().filter(|g| g.error.is_some()).count(),
    })
}

pub fn eval(generations: &Path, dataset: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let gens = read_generations(generations)?;
    let gold = data::read_records(dataset)?;
    let report = evaluate(&gens, &gold)?;
    if let Some(p) = out {
        std::fs::write(p, report.csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(report)
}
