use lflex_cli::commands::{evaluate, read_generations, Generation};
use lflex_model::data::{read_records, TEST_FILE, TRAIN_FILE, VOCAB_FILE};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[task]
preset = "medium"
data_dir = "DATA"

[model]
method = "lflexmdm"
layers = 1
width = 16
heads = 2
mlp_mult = 2
aux_layers = 1
aux_width = 8
aux_heads = 2
freeze_b_un = false

[train]
steps = 2
batch = 4
warmup = 1
log_every = 1
checkpoint_every = 1
shards = 2
"#;

fn lflex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lflex"))
        .args(args)
        .env("LFLEX_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_tiny(dir: &Path, seed: &str) {
    let out = lflex(&[
        "gen-data",
        "--preset",
        "medium",
        "--seed",
        seed,
        "--train-size",
        "12",
        "--test-size",
        "3",
        "--out",
        s(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY.replace("DATA", s(data))).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_tiny(&a, "5");
    gen_tiny(&b, "5");
    gen_tiny(&c, "6");
    for f in [TRAIN_FILE, TEST_FILE, VOCAB_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.join(TRAIN_FILE)).unwrap(),
        fs::read(c.join(TRAIN_FILE)).unwrap()
    );
    assert_eq!(read_records(&a.join(TRAIN_FILE)).unwrap().len(), 12);
}

#[test]
fn zero_sizes_write_empty_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lflex(&[
        "gen-data",
        "--train-size",
        "0",
        "--test-size",
        "0",
        "--out",
        s(tmp.path()),
    ]);
    assert!(out.status.success());
    assert!(fs::read(tmp.path().join(TRAIN_FILE)).unwrap().is_empty());
    assert!(fs::read(tmp.path().join(TEST_FILE)).unwrap().is_empty());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        lflex(&["gen-data", "--preset", "easy", "--out", s(tmp.path())])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(lflex(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(lflex(&["frobnicate"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let out = lflex(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_gold_is_perfect_and_empty_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(tmp.path(), "1");
    let gold = read_records(&tmp.path().join(TEST_FILE)).unwrap();
    let gens: Vec<Generation> = gold
        .iter()
        .enumerate()
        .map(|(index, r)| Generation {
            index,
            tokens: r.answer.clone(),
            unmask_step: None,
            insert_step: None,
            error: None,
        })
        .collect();
    let rep = evaluate(&gens, &gold).unwrap();
    assert_eq!(rep.exact_match_pct, 100.0);
    assert_eq!(rep.token_accuracy_pct, 100.0);
    assert!(evaluate(&[], &gold).is_err());

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = lflex(&[
        "eval",
        "--generations",
        s(&empty),
        "--dataset",
        s(&tmp.path().join(TEST_FILE)),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_and_sample_are_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "2");
    let cfg = tiny_config(tmp.path(), &data);
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = lflex(&["train", "--config", s(&cfg), "--out", s(&dir), "--quiet"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let gens = dir.join("gens.jsonl");
        let traj = dir.join("traj.jsonl");
        let out = lflex(&[
            "sample",
            "--checkpoint",
            s(&dir.join("checkpoint.bin")),
            "--prompts",
            s(&data.join(TEST_FILE)),
            "--out",
            s(&gens),
            "--trajectories",
            s(&traj),
            "--steps",
            "16",
            "--seed",
            "3",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in [
        "metrics.csv",
        "checkpoint.bin",
        "config.toml",
        "gens.jsonl",
        "traj.jsonl",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(read_generations(&a.join("gens.jsonl")).unwrap().len(), 3);
}

#[cfg(feature = "verify")]
#[test]
fn corrupted_hazard_fails_the_kfe_check() {
    use lflex_core::kuma::hazard;
    let (ok, _) = lflex_cli::verify::kfe_check(&|t, a, b| hazard(t, a, b).unwrap());
    assert!(ok);
    let (ok, detail) = lflex_cli::verify::kfe_check(&|t, a, b| 1.01 * hazard(t, a, b).unwrap());
    assert!(!ok, "corrupted hazard passed: {detail}");
}

#[cfg(feature = "verify")]
#[test]
fn grads_suite_runs_only_gradient_checks() {
    let out = lflex(&["verify", "--suite", "grads"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS") && l.contains("gradient")));
}

#[test]
fn shuffled_predictions_rarely_match() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lflex(&[
        "gen-data",
        "--train-size",
        "0",
        "--test-size",
        "200",
        "--out",
        s(tmp.path()),
    ]);
    assert!(out.status.success());
    let gold = read_records(&tmp.path().join(TEST_FILE)).unwrap();
    let gens: Vec<Generation> = (0..gold.len())
        .map(|index| Generation {
            index,
            tokens: gold[(index + 1) % gold.len()].answer.clone(),
            unmask_step: None,
            insert_step: None,
            error: None,
        })
        .collect();
    assert!(evaluate(&gens, &gold).unwrap().exact_match_pct < 2.0);
}
