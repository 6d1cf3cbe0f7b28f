use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_psgalign");

const TINY: &str = r#"
seed = 7

[model]
hidden_dim = 16
layers = 1
heads = 2
align_dim = 8

[optimizer]
total_steps = 6

[data]
batch_size = 4
seq_tokens = 6
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("S2V_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny synthetic corpus plus a tiny pretrain config inside `dir`.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    let o = run(&["gen-synth", "--out", p(&corpus), "--subjects", "8", "--nights-per-subject", "1", "--epochs", "12"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (corpus, cfg)
}

fn pretrain(corpus: &Path, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--corpus", p(corpus), "--config", p(cfg), "--seed", "7", "--out", p(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["pretrain", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn pretrain_twice_gives_identical_metrics_and_report_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, cfg) = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pretrain(&corpus, &cfg, out, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(ma.lines().count(), 7);
    assert!(ma.starts_with("step,pair,loss,lr\n"));

    let o = run(&["retrieve", "--corpus", p(&corpus), "--checkpoint", p(&a.join("checkpoint.s2vk")), "--pool", "4", "--split", "pretrain", "--set", "seq_tokens=6", "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|q| q.file_name().unwrap().to_string_lossy().starts_with("recall_") && q.extension().unwrap() == "csv")
        .expect("recall csv");
    let text = std::fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    let m = rows.len() - 1;
    assert!(m >= 2);
    assert!(rows.iter().all(|r| r.split(',').count() == m + 1));

    let o = run(&["report", "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(a.join("report.md")).unwrap().contains("verified"));

    std::fs::write(a.join("metrics.csv"), "tampered\n").unwrap();
    assert_eq!(code(&run(&["report", "--out", p(&a)])), 2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, cfg) = setup(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert_eq!(code(&pretrain(&corpus, &cfg, &full, &[])), 0);
    assert_eq!(code(&pretrain(&corpus, &cfg, &split, &["--stop-at", "3"])), 0);
    assert_eq!(std::fs::read_to_string(split.join("metrics.csv")).unwrap().lines().count(), 4);
    let ck = split.join("checkpoint.s2vk");
    let o = pretrain(&corpus, &cfg, &split, &["--resume", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(full.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(split.join("metrics.csv")).unwrap()
    );
    assert_eq!(std::fs::read(full.join("checkpoint.s2vk")).unwrap(), std::fs::read(ck).unwrap());
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, cfg) = setup(dir.path());
    let out = dir.path().join("o");
    assert_eq!(code(&pretrain(&corpus, &cfg, &out, &["--set", "model.hidden_dimm=3"])), 1);
    assert_eq!(code(&pretrain(&corpus, &cfg, &out, &["--set", "data.mask_rate=2.0"])), 1);
    assert_eq!(code(&pretrain(&dir.path().join("missing"), &cfg, &out, &[])), 2);
    let o = pretrain(&corpus, &cfg, &out, &["--lr", "1e300"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("nonfinite.json").exists());
    let man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run-pretrain.json")).unwrap()).unwrap();
    assert!(man["status"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, cfg) = setup(dir.path());
    let out = dir.path().join("o");
    let o = Command::new(BIN)
        .args(["pretrain", "--corpus", p(&corpus), "--config", p(&cfg), "--steps", "1", "--out", p(&out)])
        .env("S2V_SEED", "123")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run-pretrain.json")).unwrap()).unwrap();
    assert_eq!(man["seed"], 123);
    assert!(std::fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 123"));
}

#[test]
fn edf_ingest_stats_prepare_round() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth");
    let o = run(&["gen-synth", "--out", p(&synth), "--subjects", "4", "--nights-per-subject", "2", "--epochs", "4", "--export-edf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let raw = dir.path().join("raw");
    let o = run(&["ingest", p(&synth.join("edf")), "--labels", p(&synth.join("labels.json")), "--subject-separator", "-", "--out", p(&raw)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(raw.join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[night]]").count(), 8);
    // Both nights of a subject share a split.
    let parsed: toml::Table = toml::from_str(&manifest).unwrap();
    let nights = parsed["night"].as_array().unwrap();
    for pair in nights.chunks(2) {
        assert_eq!(pair[0]["split"], pair[1]["split"]);
    }
    let stats = dir.path().join("stats");
    assert_eq!(code(&run(&["stats", "--corpus", p(&raw), "--out", p(&stats)])), 0);
    let prepared = dir.path().join("prepared");
    let o = run(&["prepare", "--corpus", p(&raw), "--stats", p(&stats.join("stats.toml")), "--out", p(&prepared)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(prepared.join("corpus.s2vc").exists());
    assert_eq!(code(&run(&["ingest", p(&dir.path().join("nothing.edf")), "--out", p(&raw)])), 2);
}
