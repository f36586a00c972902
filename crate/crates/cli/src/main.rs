//! `sfod`: dataset generation, source pretraining, source-free adaptation
//! and evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sfod::checkpoint::Checkpoint;
use sfod::config::{RunConfig, SEED_ENV};
use sfod::detector::ParamStore;
use sfod::engine::{adapt, pretrain};
use sfod::eval::{emit_pr_curve, evaluate_model};
use sfod::fsguard::FsGuard;
use sfod::synthdata::{generate_domain, load_dataset, load_images, DomainSpec, SceneSpec, CLASS_NAMES};
use sfod::Error;

const CHECKPOINT: &str = "checkpoint.sfod";
const METRICS: &str = "metrics.jsonl";
const ECHO: &str = "config.toml";

#[derive(Parser)]
#[command(name = "sfod", version, about = "Source-free domain-adaptive object detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML file with dotted keys, e.g. `engine.tau = 0.7`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set pretrain.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every section; falls back to SFOD_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Msp,
    Afsp,
    Pfd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Source,
    TargetColor,
    TargetNoise,
    TargetStyle,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Source => "source",
            Preset::TargetColor => "target-color",
            Preset::TargetNoise => "target-noise",
            Preset::TargetStyle => "target-style",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Scene layout seed; falls back to SFOD_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised training on a labelled source dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Source-free adaptation on unlabelled target images.
    Adapt {
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Switch a module off. Repeatable.
        #[arg(long, value_enum)]
        disable: Vec<Module>,
        /// Refuse every read under this directory. Repeatable.
        #[arg(long)]
        forbid_source: Vec<PathBuf>,
        /// Labelled target split scored after each epoch; never trained on.
        #[arg(long)]
        monitor_split: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Usage(String),
    State(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Invalid(_) | Error::Corrupt { .. } => Failure::Usage(msg),
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(msg),
            Error::Fingerprint { .. } | Error::Shape(_) | Error::Forbidden(_) => Failure::State(msg),
            Error::Io { .. } | Error::Diverged { .. } => Failure::Internal(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut overrides = args.set.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(RunConfig::resolve(args.config.as_deref(), &overrides, env_seed().as_deref())?)
}

fn require_dir(p: &Path, what: &str) -> Outcome {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} is not a directory", p.display())))
    }
}

fn create_dir(p: &Path) -> Outcome {
    std::fs::create_dir_all(p).map_err(|e| Error::io_at(p, e).into())
}

fn create_file(p: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(p)
        .map(BufWriter::new)
        .map_err(|e| Failure::Internal(Error::io_at(p, e).to_string()))
}

fn write_echo(out: &Path, cfg: &RunConfig) -> Outcome {
    let p = out.join(ECHO);
    let text = format!("# sha256 {}\n{}", cfg.hash(), cfg.echo());
    std::fs::write(&p, text).map_err(|e| Failure::Internal(Error::io_at(&p, e).to_string()))
}

fn finish_log(mut w: BufWriter<File>, p: &Path) -> Outcome {
    w.flush().map_err(|e| Failure::Internal(Error::io_at(p, e).to_string()))
}

fn gen_data(preset: Preset, out: &Path, n: usize, seed: Option<u64>) -> Outcome {
    let seed = match (seed, env_seed()) {
        (Some(s), _) => s,
        (None, Some(s)) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        (None, None) => 0,
    };
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let domain = DomainSpec::preset(preset.name()).expect("every preset name resolves");
    let scene = SceneSpec {
        seed,
        ..SceneSpec::default()
    };
    let m = generate_domain(&domain, &scene, n, out)?;
    println!(
        "{}",
        json!({"preset": preset.name(), "out": out, "images": m.ids.len(), "seed": seed})
    );
    Ok(())
}

fn cmd_pretrain(data: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    require_dir(data, "data")?;
    let guard = FsGuard::new();
    let samples = load_dataset(data, &guard)?;
    create_dir(out)?;
    write_echo(out, &cfg)?;
    let log_path = out.join(METRICS);
    let mut log = create_file(&log_path)?;
    let init = ParamStore::init_detector(&cfg.detector, cfg.pretrain.seed);
    let res = pretrain(&samples, &cfg.detector, &cfg.pretrain, init, &mut log)?;
    finish_log(log, &log_path)?;
    let meta = json!({
        "command": "pretrain",
        "config_hash": cfg.hash(),
        "iterations": res.iterations,
        "diverged": res.diverged.as_ref().map(|e| e.to_string()),
    });
    Checkpoint::new(res.params, cfg.detector.fingerprint(), meta).save(&out.join(CHECKPOINT))?;
    if let Some(e) = res.diverged {
        return Err(Failure::Internal(format!("{e}; last finite weights saved to {}", out.join(CHECKPOINT).display())));
    }
    println!(
        "{}",
        json!({"checkpoint": out.join(CHECKPOINT), "iterations": res.iterations, "config_hash": cfg.hash()})
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    target: &Path,
    source_ckpt: &Path,
    out: &Path,
    args: &ConfigArgs,
    disable: &[Module],
    forbid: &[PathBuf],
    monitor: Option<&Path>,
) -> Outcome {
    let mut cfg = resolve(args)?;
    for m in disable {
        match m {
            Module::Msp => cfg.engine.enable_msp = false,
            Module::Afsp => cfg.engine.enable_afsp = false,
            Module::Pfd => cfg.engine.enable_pfd = false,
        }
    }
    require_dir(target, "target data")?;
    let guard = forbid.iter().fold(FsGuard::new(), |g, root| g.forbid(root));
    let ck = Checkpoint::load_verified(source_ckpt, &guard, &cfg.detector.fingerprint())?;
    let images: Vec<_> = load_images(target, &guard)?.into_iter().map(|s| s.image).collect();
    let monitor = match monitor {
        Some(dir) => {
            require_dir(dir, "monitor split")?;
            Some(load_dataset(dir, &guard)?)
        }
        None => None,
    };
    create_dir(out)?;
    write_echo(out, &cfg)?;
    let log_path = out.join(METRICS);
    let mut log = create_file(&log_path)?;
    let res = adapt(&images, &ck.params, &cfg.detector, &cfg.engine, monitor.as_deref(), &mut log)?;
    finish_log(log, &log_path)?;
    let meta = json!({
        "command": "adapt",
        "config_hash": cfg.hash(),
        "iterations": res.state.iter,
        "skipped": res.state.skipped,
        "source_digest": ck.params.digest(),
    });
    Checkpoint::new(res.teacher, cfg.detector.fingerprint(), meta).save(&out.join(CHECKPOINT))?;
    let forbidden_reads: usize = forbid.iter().map(|r| guard.accesses_under(r)).sum();
    println!(
        "{}",
        json!({
            "checkpoint": out.join(CHECKPOINT),
            "iterations": res.state.iter,
            "skipped": res.state.skipped,
            "monitor_map": res.monitor_map,
            "forbidden_reads": forbidden_reads,
            "config_hash": cfg.hash(),
        })
    );
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, data: &Path, out: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = resolve(args)?;
    require_dir(data, "data")?;
    let guard = FsGuard::new();
    let ck = Checkpoint::load_verified(ckpt, &guard, &cfg.detector.fingerprint())?;
    ck.params.validate(&cfg.detector)?;
    let samples = load_dataset(data, &guard)?;
    let res = evaluate_model(&ck.params, &cfg.detector, &samples, cfg.eval.iou_thresh)?;
    create_dir(out)?;
    emit_pr_curve(&res, out, &CLASS_NAMES)?;
    let per_class: BTreeMap<String, Option<f64>> = res
        .per_class
        .iter()
        .map(|(c, r)| {
            let name = CLASS_NAMES.get(*c as usize - 1).map_or(format!("class{c}"), |n| n.to_string());
            (name, r.ap)
        })
        .collect();
    let report = json!({"map": res.map, "per_class": per_class});
    let full = json!({
        "map": res.map,
        "per_class": per_class,
        "counts": res.per_class.iter().map(|(c, r)| (c.to_string(), json!({"tp": r.tp, "fp": r.fp, "num_gt": r.num_gt}))).collect::<BTreeMap<_, _>>(),
        "checkpoint": ckpt,
        "data": data,
        "config_hash": cfg.hash(),
    });
    let p = out.join("eval.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&full).expect("report serializes"))
        .map_err(|e| Failure::Internal(Error::io_at(&p, e).to_string()))?;
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::GenData { preset, out, n, seed } => gen_data(preset, &out, n, seed),
        Cmd::Pretrain { data, out, cfg } => cmd_pretrain(&data, &out, &cfg),
        Cmd::Adapt {
            target_data,
            source_ckpt,
            out,
            cfg,
            disable,
            forbid_source,
            monitor_split,
        } => cmd_adapt(
            &target_data,
            &source_ckpt,
            &out,
            &cfg,
            &disable,
            &forbid_source,
            monitor_split.as_deref(),
        ),
        Cmd::Evaluate { ckpt, data, out, cfg } => cmd_evaluate(&ckpt, &data, &out, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::State(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
