use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn geoaware(args: &[&str]) -> Output {
    geoaware_env(args, None)
}

fn geoaware_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geoaware"));
    cmd.args(args).env_remove("GEOAWARE_SEED");
    if let Some(s) = seed_env {
        cmd.env("GEOAWARE_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn hash(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Narrow widths and a few steps so whole pipelines run in seconds.
const TINY: &str = r#"{
  "policy": {"d_repr": 16, "d_conv": 8, "d_hidden": 16, "d_lang_emb": 8, "trunk_layers": 1, "trunk_heads": 2},
  "train": {"steps": 3, "batch_size": 4, "vq_pretrain_steps": 3},
  "eval": {"rollouts_per_task": 1}
}"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let r = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(r.path("tiny.json"), TINY).unwrap();
        r
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, name: &str, per_task: &str, seed: &str) -> PathBuf {
        let out = self.path(name);
        let o = geoaware(&["gen-data", "--out", p(&out), "--episodes-per-task", per_task, "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }

    fn train(&self, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let cfg = self.path("tiny.json");
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(data), "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = geoaware(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    }
}

#[test]
fn gen_data_default_writes_fifty_demos_per_task() {
    let r = Run::new();
    let out = r.path("d.jsonl");
    let o = geoaware(&["gen-data", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("wrote 200 episodes"), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("expert succeeded 50/50").count(), 4);
}

#[test]
fn gen_data_is_reproducible_and_counts_episodes() {
    let r = Run::new();
    let a = r.data("a.jsonl", "2", "5");
    let b = r.data("b.jsonl", "2", "5");
    assert_eq!(hash(&a), hash(&b));
    let c = r.data("c.jsonl", "2", "6");
    assert_ne!(hash(&a), hash(&c));
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);
}

#[test]
fn seed_environment_variable_sets_the_default_seed() {
    let r = Run::new();
    let by_flag = r.data("flag.jsonl", "1", "9");
    let env_out = r.path("env.jsonl");
    let o = geoaware_env(&["gen-data", "--out", p(&env_out), "--episodes-per-task", "1"], Some("9"));
    assert_eq!(code(&o), 0);
    assert_eq!(hash(&by_flag), hash(&env_out));
    // flags beat the environment
    let both = r.path("both.jsonl");
    let o = geoaware_env(&["gen-data", "--out", p(&both), "--episodes-per-task", "1", "--seed", "9"], Some("1"));
    assert_eq!(code(&o), 0);
    assert_eq!(hash(&by_flag), hash(&both));
    // files beat the environment
    let cfg = r.path("seed.json");
    std::fs::write(&cfg, r#"{"seed": 9, "data": {"episodes_per_task": 1}}"#).unwrap();
    let file = r.path("file.jsonl");
    let o = geoaware_env(&["gen-data", "--config", p(&cfg), "--out", p(&file)], Some("1"));
    assert_eq!(code(&o), 0);
    assert_eq!(hash(&by_flag), hash(&file));
}

#[test]
fn flags_override_the_config_file() {
    let r = Run::new();
    let cfg = r.path("c.json");
    std::fs::write(&cfg, r#"{"seed": 1, "data": {"episodes_per_task": 3}}"#).unwrap();
    let out = r.path("o.jsonl");
    let o = geoaware(&["gen-data", "--config", p(&cfg), "--out", p(&out), "--episodes-per-task", "1", "--seed", "2"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("wrote 4 episodes"));
    assert_eq!(hash(&out), hash(&r.data("ref.jsonl", "1", "2")));
}

#[test]
fn bad_config_and_usage_errors_exit_one() {
    let r = Run::new();
    let cfg = r.path("bad.json");
    std::fs::write(&cfg, r#"{"policy": {"d_reprr": 3}}"#).unwrap();
    let out = r.path("o.jsonl");
    let o = geoaware(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(!out.exists());
    std::fs::write(&cfg, r#"{"sim": {"max_step": 0.1}}"#).unwrap();
    assert_eq!(code(&geoaware(&["gen-data", "--config", p(&cfg), "--out", p(&out)])), 1);
    assert_eq!(code(&geoaware(&["gen-data"])), 1);
    assert_eq!(code(&geoaware(&["train", "--steps", "x"])), 1);
    assert_eq!(code(&geoaware(&["frobnicate"])), 1);
}

#[test]
fn help_lists_every_flag_with_its_default() {
    for sub in ["gen-data", "train", "eval", "ablate", "gradcheck", "report"] {
        let o = geoaware(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        let flags: Vec<&str> = text
            .lines()
            .filter(|l| l.trim_start().starts_with("--") && !l.contains("--help"))
            .collect();
        for line in flags {
            assert!(line.contains("[default:") || line.contains("[required]"), "{sub}: {line}");
        }
    }
    let text = stdout(&geoaware(&["train", "--help"]));
    assert!(text.contains("[default: 5000]") && text.contains("[default: mlp]") && text.contains("[default: geo]"));
    assert!(stdout(&geoaware_env(&["eval", "--help"], Some("42"))).contains("42 from GEOAWARE_SEED"));
}

#[test]
fn train_eval_and_report_round_trip() {
    let r = Run::new();
    let data = r.data("d.jsonl", "1", "0");
    let a = r.train(&data, "a.gavp", &[]);
    let b = r.train(&data, "b.gavp", &[]);
    assert_eq!(hash(&a), hash(&b));
    let c = r.train(&data, "c.gavp", &["--seed", "1"]);
    assert_ne!(hash(&a), hash(&c));

    let rep = r.path("seen.json");
    let o = geoaware(&["eval", "--ckpt", p(&a), "--views", "seen", "--rollouts", "1", "--report", p(&rep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.contains("average success")).unwrap().to_string();
    let pct = line.rsplit(' ').next().unwrap();
    assert!(pct.ends_with('%') && pct.trim_end_matches('%').split('.').nth(1).unwrap().len() == 1, "{line}");
    let rep2 = r.path("seen2.json");
    geoaware(&["eval", "--ckpt", p(&a), "--views", "seen", "--rollouts", "1", "--report", p(&rep2)]);
    assert_eq!(hash(&rep), hash(&rep2));

    let o = geoaware(&["report", "--in", p(&rep), "--format", "md"]);
    assert_eq!(code(&o), 0);
    let md = stdout(&o);
    assert!(md.contains("| Task | Successes | Rollouts | Success (%) |"));
    assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Task")).count(), 5);
    let csv_out = r.path("seen.csv");
    assert_eq!(code(&geoaware(&["report", "--in", p(&rep), "--format", "csv", "--out", p(&csv_out)])), 0);
    let rows = geoaware::bench::parse_eval_csv(&std::fs::read_to_string(&csv_out).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);

    let novel = r.path("novel.json");
    let o = geoaware(&["eval", "--ckpt", p(&a), "--views", "novel-medium", "--rollouts", "1", "--report", p(&novel)]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(&novel).unwrap().contains("\"category\": \"novel_medium\""));
}

#[test]
fn vqbet_and_pixel_variants_train_and_evaluate() {
    let r = Run::new();
    let data = r.data("d.jsonl", "1", "0");
    for (name, flags) in [("vq.gavp", ["--head", "vqbet"]), ("px.gavp", ["--backbone", "pixel"])] {
        let ck = r.train(&data, name, &flags);
        let o = geoaware(&["eval", "--ckpt", p(&ck), "--views", "novel-large", "--rollouts", "1"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("on novel_large: average success"), "{}", stdout(&o));
    }
    assert!(stderr(&geoaware(&["compare"])).contains("unrecognized subcommand"));
}

#[test]
fn broken_or_missing_checkpoints_exit_three() {
    let r = Run::new();
    let missing = r.path("nope.gavp");
    assert_eq!(code(&geoaware(&["eval", "--ckpt", p(&missing)])), 3);
    let data = r.data("d.jsonl", "1", "0");
    let ck = r.train(&data, "a.gavp", &[]);
    let bytes = std::fs::read(&ck).unwrap();
    let cut = r.path("cut.gavp");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = geoaware(&["eval", "--ckpt", p(&cut)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_two_naming_the_step() {
    let r = Run::new();
    let data = r.data("d.jsonl", "1", "0");
    let cfg = r.path("hot.json");
    std::fs::write(&cfg, TINY.replace("\"steps\": 3", "\"steps\": 50, \"lr\": 1e30")).unwrap();
    let out = r.path("x.gavp");
    let o = geoaware(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("at step"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_report_schema_exits_four() {
    let r = Run::new();
    let rep = r.path("r.json");
    std::fs::write(&rep, r#"{"schema_version": 7, "model": "x"}"#).unwrap();
    assert_eq!(code(&geoaware(&["report", "--in", p(&rep)])), 4);
    std::fs::write(&rep, r#"{"schema_version": 1, "model": "x"}"#).unwrap();
    assert_eq!(code(&geoaware(&["report", "--in", p(&rep)])), 4);
}

#[test]
fn ablate_writes_three_checkpoints_and_both_report_formats() {
    let r = Run::new();
    let data = r.data("d.jsonl", "1", "0");
    let out = r.path("abl");
    let cfg = r.path("tiny.json");
    let o = geoaware(&["ablate", "--config", p(&cfg), "--data", p(&data), "--modes", "all,even4,last4", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for mode in ["all", "even4", "last4"] {
        assert!(out.join(format!("policy-{mode}.gavp")).exists(), "{mode}");
    }
    let md = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    let labels: Vec<&str> = md.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(labels, vec!["All", "Evenly-Spaced (default)", "Last"]);
    let first = hash(&out.join("ablation.json"));
    let again = r.path("abl2");
    geoaware(&["ablate", "--config", p(&cfg), "--data", p(&data), "--out-dir", p(&again)]);
    assert_eq!(first, hash(&again.join("ablation.json")));
    assert_eq!(hash(&out.join("policy-even4.gavp")), hash(&again.join("policy-even4.gavp")));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_conv1d() {
    let o = geoaware(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("end_to_end_geo")));
    let o = geoaware(&["gradcheck", "--inject-fault", "conv1d"]);
    assert_ne!(code(&o), 0);
    let fail = stdout(&o).lines().find(|l| l.starts_with("FAIL:")).unwrap().to_string();
    assert!(fail.contains("conv1d"), "{fail}");
}
