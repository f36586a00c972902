use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sfod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfod"))
        .args(args)
        .env_remove("SFOD_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("stdout has a line")).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, preset: &str, n: &str, seed: &str) {
    let o = sfod(&["gen-data", "--preset", preset, "--out", p(dir), "--n", n, "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_repeatable_and_validated() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "source", "10", "7");
    gen(&b, "source", "10", "7");
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
    let o = sfod(&["gen-data", "--preset", "nowhere", "--out", p(&a), "--n", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sfod(&["gen-data", "--preset", "source", "--out", p(&t.path().join("c")), "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--n"));
    let o = Command::new(env!("CARGO_BIN_EXE_sfod"))
        .args(["gen-data", "--preset", "target-noise", "--out", p(&t.path().join("d")), "--n", "2"])
        .env("SFOD_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(last_json(&o)["seed"], 7);
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        gen(&root.join("src"), "source", "4", "1");
        gen(&root.join("tgt"), "target-color", "4", "2");
        gen(&root.join("mon"), "target-color", "2", "3");
        Self { _tmp: tmp, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> Output {
        let (data, out) = (self.path("src"), self.path(out));
        let mut args = vec![
            "pretrain",
            "--data",
            p(&data),
            "--out",
            p(&out),
            "--set",
            "pretrain.epochs=1",
        ];
        args.extend_from_slice(extra);
        sfod(&args)
    }
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn pretrain_writes_its_three_artifacts_and_honours_overrides() {
    let pl = Pipeline::new();
    let cfg = pl.path("run.toml");
    std::fs::write(&cfg, "pretrain.lr = 0.01\npretrain.warmup_iters = 0\n").unwrap();
    let o = pl.pretrain("pre", &["--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(listing(&pl.path("pre")), ["checkpoint.sfod", "config.toml", "metrics.jsonl"]);
    let lines = jsonl(&pl.path("pre/metrics.jsonl"));
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["lr"] == 0.01));
    let echo = std::fs::read_to_string(pl.path("pre/config.toml")).unwrap();
    let hash = last_json(&o)["config_hash"].as_str().unwrap().to_string();
    assert!(echo.starts_with(&format!("# sha256 {hash}\n")));
    // a flag beats the file
    let o = pl.pretrain("pre2", &["--config", p(&cfg), "--set", "pretrain.lr=0.005"]);
    assert!(o.status.success());
    assert!(jsonl(&pl.path("pre2/metrics.jsonl")).iter().all(|l| l["lr"] == 0.005));
    assert_ne!(last_json(&o)["config_hash"].as_str().unwrap(), hash);
}

#[test]
fn pretrain_usage_errors() {
    let pl = Pipeline::new();
    let missing = pl.path("absent");
    let o = sfod(&["pretrain", "--data", p(&missing), "--out", p(&pl.path("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)));
    let o = pl.pretrain("x", &["--set", "pretrain.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn adapt_and_evaluate_end_to_end() {
    let pl = Pipeline::new();
    assert!(pl.pretrain("pre", &[]).status.success());
    let ckpt = pl.path("pre/checkpoint.sfod");
    let tgt = pl.path("tgt");
    let adapt = |out: &str, extra: &[&str]| {
        let out = pl.path(out);
        let mut args = vec![
            "adapt",
            "--target-data",
            p(&tgt),
            "--source-ckpt",
            p(&ckpt),
            "--out",
            p(&out),
            "--set",
            "engine.epochs=1",
            "--set",
            "engine.tau=0.05",
        ];
        args.extend_from_slice(extra);
        sfod(&args)
    };
    let o = adapt(
        "full",
        &["--forbid-source", p(&pl.path("src")), "--monitor-split", p(&pl.path("mon"))],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = last_json(&o);
    assert_eq!(summary["forbidden_reads"], 0);
    assert_eq!(summary["iterations"], 2);
    assert_eq!(summary["monitor_map"].as_array().unwrap().len(), 1);
    assert_eq!(listing(&pl.path("full")), ["checkpoint.sfod", "config.toml", "metrics.jsonl"]);

    let o = adapt("nopfd", &["--disable", "pfd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in jsonl(&pl.path("nopfd/metrics.jsonl")).iter().filter(|l| l.get("alpha").is_some()) {
        assert!(l.get("loss_pro").is_none());
    }
    let o = adapt("mt", &["--disable", "msp", "--disable", "afsp", "--disable", "pfd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in jsonl(&pl.path("mt/metrics.jsonl")).iter().filter(|l| l.get("alpha").is_some()) {
        if l["skipped"] == false {
            let obj = l.as_object().unwrap();
            let losses: Vec<&String> = obj.keys().filter(|k| k.starts_with("loss_")).collect();
            assert_eq!(losses, ["loss_mt", "loss_total"]);
        }
    }

    // the source checkpoint itself may not sit under a forbidden root
    let o = adapt("blocked", &["--forbid-source", p(&pl.path("pre"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("forbidden"));

    let mon = pl.path("mon");
    let eval = |ck: &Path, out: &str, extra: &[&str]| {
        let out_dir = pl.path(out);
        let mut args = vec!["evaluate", "--ckpt", p(ck), "--data", p(&mon), "--out", p(&out_dir)];
        args.extend_from_slice(extra);
        sfod(&args)
    };
    let before = eval(&ckpt, "eval_src", &[]);
    let after = eval(&pl.path("full/checkpoint.sfod"), "eval_full", &[]);
    for o in [&before, &after] {
        assert!(o.status.success(), "{}", stderr(o));
        let r = last_json(o);
        let obj = r.as_object().unwrap();
        assert_eq!(obj.keys().collect::<Vec<_>>(), ["map", "per_class"]);
        assert!(r["map"].as_f64().unwrap() >= 0.0);
        assert!(r["per_class"]["vehicle"].is_number() || r["per_class"]["vehicle"].is_null());
    }
    let files = listing(&pl.path("eval_full"));
    for f in ["pr_airplane.csv", "pr_airplane.svg", "pr_vehicle.csv", "pr_vehicle.svg", "eval.json"] {
        assert!(files.iter().any(|x| x == f), "missing {f} in {files:?}");
    }

    // an architecture the checkpoint was not built for
    let o = eval(&ckpt, "eval_bad", &["--set", "detector.fc_dim=64"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn runs_are_deterministic() {
    let pl = Pipeline::new();
    assert!(pl.pretrain("a", &["--seed", "5"]).status.success());
    assert!(pl.pretrain("b", &["--seed", "5"]).status.success());
    assert_eq!(
        std::fs::read(pl.path("a/metrics.jsonl")).unwrap(),
        std::fs::read(pl.path("b/metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(pl.path("a/checkpoint.sfod")).unwrap(),
        std::fs::read(pl.path("b/checkpoint.sfod")).unwrap()
    );
}
