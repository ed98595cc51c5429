use std::path::Path;
use std::process::{Command, Output};

use octpair_core::config::PipelineConfig;
use octpair_core::sweep::sweep_cells;

const SMALL: &str = "\
[simulate.counts]
beef = 3
pork = 3
turkey = 3
[train]
pretrain_epochs = 2
finetune_epochs = 2
folds = 2
[sweep]
fractions = [1.0]
modality_fractions = []
";

fn octpair(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octpair"))
        .args(args)
        .env("OCTPAIR_DATA_DIR", root.join("data"))
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn small<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--toy", "--config", "small.toml"];
    v.extend_from_slice(rest);
    v
}

#[test]
fn default_dry_run_plans_66_insertions_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = octpair(dir.path(), &["simulate", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("66 insertions planned"), "{out}");
    for (class, n) in [("beef", 34), ("pork", 14), ("turkey", 18)] {
        let rows = out.lines().filter(|l| l.starts_with(&format!("{class}-"))).count();
        assert_eq!(rows, n, "{class}");
    }
    assert!(!dir.path().join("data").exists());
}

#[test]
fn simulate_refuses_to_overwrite_without_force() {
    let dir = small_root();
    let o = octpair(dir.path(), &small(&["simulate"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = dir.path().join("data/dataset/manifest.json");
    let before = std::fs::read(&manifest).unwrap();

    let o = octpair(dir.path(), &small(&["--seed", "5", "simulate"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(std::fs::read(&manifest).unwrap(), before);

    let o = octpair(dir.path(), &small(&["--seed", "5", "simulate", "--force"]));
    assert!(o.status.success());
    assert_ne!(std::fs::read(&manifest).unwrap(), before);
}

#[test]
fn preprocess_reports_counts_and_is_deterministic() {
    let dir = small_root();
    assert!(octpair(dir.path(), &small(&["simulate"])).status.success());
    let a = octpair(dir.path(), &small(&["preprocess", "--out", "crops_a"]));
    let b = octpair(dir.path(), &small(&["preprocess", "--out", "crops_b"]));
    assert!(a.status.success(), "{}", stderr(&a));
    let (sa, sb) = (stdout(&a), stdout(&b));
    for class in ["gelatin", "pork", "beef", "turkey"] {
        assert!(sa.lines().any(|l| l.trim_start().starts_with(&format!("{class}:")) && l.contains("labeled")), "{sa}");
    }
    let hash = |s: &str| s.lines().find(|l| l.starts_with("crop manifest sha256")).unwrap().to_string();
    assert_eq!(hash(&sa), hash(&sb));
}

#[test]
fn missing_inputs_fail_with_a_clear_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = octpair(dir.path(), &["preprocess", "--dataset", "nowhere"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no dataset manifest"), "{}", stderr(&o));

    let o = octpair(dir.path(), &["--config", "absent.toml", "config"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(octpair(dir.path(), &["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(octpair(dir.path(), &[]).status.code(), Some(1));
    std::fs::write(dir.path().join("typo.toml"), "[train]\nbatchsize = 3\n").unwrap();
    let o = octpair(dir.path(), &["--config", "typo.toml", "config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));
    assert!(octpair(dir.path(), &["--help"]).status.success());
}

#[test]
fn seed_flag_overrides_and_is_recorded() {
    let dir = small_root();
    let o = octpair(dir.path(), &small(&["--seed", "77", "simulate"]));
    assert!(o.status.success());
    let echo = std::fs::read_to_string(dir.path().join("data/dataset/config.toml")).unwrap();
    assert!(echo.lines().any(|l| l == "seed = 77"), "{echo}");
    let o = octpair(dir.path(), &small(&["--seed", "77", "config"]));
    assert!(stdout(&o).lines().any(|l| l == "seed = 77"));
}

#[test]
fn paper_grid_dry_run_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = octpair(dir.path(), &["--paper-grid", "sweep", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg = PipelineConfig::default();
    cfg.apply_paper_grid();
    let expected = sweep_cells(&cfg).len();
    assert!(stdout(&o).ends_with(&format!("{expected} cells\n")));
    // 3 inits x 6 fractions dual, plus 2 single-modality modes x 6 fractions, x 3 folds.
    assert_eq!(expected, (3 * 6 + 2 * 6) * 3);
}

#[test]
fn empty_ledger_reports_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let o = octpair(dir.path(), &["report", "--out", "nothing"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    assert!(stdout(&o).starts_with("| % Training Set | Method | AP | F1 |"));
}

#[test]
fn stage_commands_chain_end_to_end() {
    let dir = small_root();
    let root = dir.path();
    assert!(octpair(root, &small(&["simulate"])).status.success());
    assert!(octpair(root, &small(&["preprocess"])).status.success());

    let o = octpair(root, &small(&["pretrain", "--fold", "1", "--out", "p.ckpt"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = octpair(root, &small(&["finetune", "--fold", "1", "--init", "contrastive", "--out", "m.ckpt"]));
    assert_eq!(o.status.code(), Some(1), "contrastive init needs a checkpoint");
    let o = octpair(root, &small(&["finetune", "--fold", "1", "--init", "contrastive", "--checkpoint", "p.ckpt", "--fraction", "0.3", "--out", "m.ckpt"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = octpair(root, &small(&["evaluate", "--fold", "1", "--model", "m.ckpt", "--out", "metrics.csv"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(root.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("class,support,precision,recall,f1,ap\n"));
    assert!(csv.lines().last().unwrap().starts_with("weighted,"));

    let o = octpair(root, &small(&["finetune", "--fold", "9", "--out", "x.ckpt"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_resumes_and_strict_reflects_failed_cells() {
    let dir = small_root();
    let root = dir.path();
    assert!(octpair(root, &small(&["simulate"])).status.success());
    assert!(octpair(root, &small(&["preprocess"])).status.success());

    let o = octpair(root, &small(&["sweep", "--strict"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 cells run, 0 skipped, 0 failed"), "{}", stdout(&o));
    let report = root.join("data/sweep/report/table.md");
    let first = std::fs::read(&report).unwrap();

    let o = octpair(root, &small(&["sweep", "--strict"]));
    assert!(stdout(&o).contains("0 cells run, 4 skipped"), "{}", stdout(&o));
    assert!(octpair(root, &small(&["report"])).status.success());
    assert_eq!(std::fs::read(&report).unwrap(), first);

    // The generic init has no weights here, so its cells fail.
    std::fs::write(root.join("generic.toml"), format!("{SMALL}inits = [\"generic_pretrained\"]\n")).unwrap();
    let args = ["--toy", "--config", "generic.toml", "sweep", "--out", "g"];
    let o = octpair(root, &args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("2 failed"), "{}", stdout(&o));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(octpair(root, &strict).status.code(), Some(2));
}

#[test]
fn paper_grid_config_echoes_protocol_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = octpair(dir.path(), &["--toy", "--paper-grid", "config"]);
    assert!(o.status.success());
    let resolved: toml::Table = toml::from_str(&stdout(&o)).unwrap();
    assert_eq!(resolved["train"]["batch_size"].as_integer(), Some(28));
    assert_eq!(resolved["train"]["pretrain_epochs"].as_integer(), Some(100));
    assert_eq!(resolved["train"]["finetune_epochs"].as_integer(), Some(100));
    assert_eq!(resolved["objectives"]["temperature"].as_float(), Some(0.1));
    assert_eq!(resolved["model"]["embed_dim"].as_integer(), Some(512));
    let fractions: Vec<f64> = resolved["sweep"]["fractions"].as_array().unwrap().iter().map(|v| v.as_float().unwrap()).collect();
    assert_eq!(fractions, [0.1, 0.2, 0.3, 0.6, 0.8, 1.0]);
}
