use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcan_core::ablation::{run_sweep, Sweep};
use pcan_core::certify::gradcheck_suite;
use pcan_core::data::{generate, Dataset, Split, SynthConfig};
use pcan_core::metrics::{difficulty_split, Band};
use pcan_core::trainer::{evaluate_checkpoint, write_report, write_run, Checkpoint, TrainConfig, TrainOutput, Trainer};
use pcan_core::Error;

#[derive(Parser)]
#[command(
    name = "pcan",
    version,
    about = "Prototype calibration over two-stream feature embeddings"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train both streams and write checkpoints, log and test metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train the cross-entropy-only baseline with the same schedule.
        #[arg(long)]
        baseline: bool,
        /// Continue from `checkpoint_last.json` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this epoch; resume later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Per-class accuracy CSV of a reference run; adds a difficulty report.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sweep one parameter and tabulate test metrics.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `param=v1,v2,...`, e.g. `lambda=0,0.1,1,10` or `alpha=1/1/1,1/0.5/0.1`.
        #[arg(long)]
        sweep: Sweep,
        /// Training seeds 0..k per value.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every analytic gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

enum Failure {
    Core(Error),
    Usage(String),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Run = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Run {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => TrainConfig::from_toml(&read(p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
    }
}

fn gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Run {
    let mut cfg = match config {
        None => SynthConfig::default(),
        Some(p) => SynthConfig::from_toml(&read(p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    }
    ds.save(out)?;
    let c = ds.counts();
    println!(
        "{}: {} bodies, {} actions, d = {}, train/val/test = {}/{}/{}",
        out.display(),
        ds.tree.n_body,
        ds.tree.n_action,
        ds.d,
        c.train,
        c.val,
        c.test
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Option<Checkpoint>, Failure> {
    if path.exists() {
        Ok(Some(Checkpoint::load(path)?))
    } else {
        Ok(None)
    }
}

struct TrainArgs<'a> {
    data: &'a Path,
    config: Option<&'a Path>,
    out_dir: &'a Path,
    seed: Option<u64>,
    baseline: bool,
    resume: bool,
    stop_after: Option<usize>,
}

fn train(a: TrainArgs<'_>) -> Run {
    let ds = Dataset::load(a.data)?;
    let mut cfg = train_config(a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.baseline {
        cfg = cfg.baseline();
    }
    let mut trainer = if a.resume {
        let last = a.out_dir.join("checkpoint_last.json");
        let ckpt = load_checkpoint(&last)?
            .ok_or_else(|| Failure::Usage(format!("{}: no checkpoint to resume from", last.display())))?;
        let best = load_checkpoint(&a.out_dir.join("checkpoint_best.json"))?;
        Trainer::resume(&ds, &cfg, ckpt, best)?
    } else {
        Trainer::new(&ds, &cfg)?
    };
    let until = a.stop_after.unwrap_or(cfg.epochs);
    let log = match trainer.run(until, |_| {}) {
        Ok(log) => log,
        Err(Error::NonFinite {
            epoch,
            batch,
            detail,
            dump,
        }) => {
            let path = a.out_dir.join("nan_dump.json");
            let text = serde_json::to_string_pretty(&dump).unwrap_or_default();
            write(&path, &(text + "\n"))?;
            return Err(Failure::Core(Error::NonFinite {
                epoch,
                batch,
                detail: format!("{detail} (batch dumped to {})", path.display()),
                dump,
            }));
        }
        Err(e) => return Err(e.into()),
    };
    let mut out: TrainOutput = trainer.finish();
    out.log = log;
    let report = write_run(a.out_dir, &ds, &out, a.resume)?;
    let best = out.best.best_epoch.map_or("-".into(), |e| e.to_string());
    println!(
        "epoch {}/{} (best {best}): {} action top-1 {:.2}, f1_mean {:.2}",
        out.last.epoch,
        cfg.epochs,
        report.split,
        100.0 * report.fused.action_top1,
        100.0 * report.fused.f1_mean
    );
    Ok(())
}

fn read_per_class(path: &Path) -> Result<Vec<f64>, Failure> {
    let bad = |line: usize, m: String| Failure::Usage(format!("{}:{line}: {m}", path.display()));
    let text = read(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut acc = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let class: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(line, "action column is not an integer".into()))?;
        let a: f64 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| bad(line, "accuracy column is not a number".into()))?;
        if class != acc.len() {
            return Err(bad(line, format!("expected action {}, found {class}", acc.len())));
        }
        acc.push(a);
    }
    Ok(acc)
}

fn per_class_csv(acc: &[f64]) -> String {
    let mut s = String::from("action,accuracy\n");
    for (k, a) in acc.iter().enumerate() {
        s.push_str(&format!("{k},{a}\n"));
    }
    s
}

fn eval(data: &Path, checkpoint: &Path, split: Split, baseline: Option<&Path>, out_dir: Option<&Path>) -> Run {
    let ds = Dataset::load(data)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let report = evaluate_checkpoint(&ckpt, &ds, split)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    let dir = if dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        dir
    };
    let sub = dir.join(format!("eval_{split}"));
    fs::create_dir_all(&sub).map_err(|e| Failure::Usage(format!("{}: {e}", sub.display())))?;
    write_report(&sub, &report)?;
    write(
        &sub.join("per_class.csv"),
        &per_class_csv(&report.fused.per_class_action_accuracy),
    )?;
    print!("{}", report.to_csv()?);
    if let Some(path) = baseline {
        let base = read_per_class(path)?;
        if base.len() != ds.tree.n_action {
            return Err(Failure::Usage(format!(
                "{}: {} classes, the dataset has {}",
                path.display(),
                base.len(),
                ds.tree.n_action
            )));
        }
        let split = difficulty_split(&base, &report.fused.per_class_action_accuracy)?;
        let text = serde_json::to_string_pretty(&split).map_err(Error::from)?;
        write(&sub.join("difficulty.json"), &(text + "\n"))?;
        for b in Band::ALL {
            let s = split.band(b);
            let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v));
            println!(
                "{:?}: {} classes, baseline {}, method {}, delta {}",
                b,
                s.classes,
                pct(s.baseline_mean),
                pct(s.method_mean),
                pct(s.delta)
            );
        }
    }
    Ok(())
}

fn ablate(data: &Path, config: Option<&Path>, sweep: &Sweep, seeds: u64, out: Option<&Path>) -> Run {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be >= 1".into()));
    }
    let ds = Dataset::load(data)?;
    let base = train_config(config)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let table = run_sweep(&ds, &base, sweep, &seeds, |value, seed, r| {
        log::info!("{}={value} seed {seed}: f1_mean {:.4}", sweep.param, r.f1_mean);
    })?;
    let default = PathBuf::from(format!("ablation_{}.csv", sweep.param.trim_start_matches("hp.")));
    let out = out.unwrap_or(&default);
    write(out, &table.to_csv()?)?;
    print!("{}", table.to_text());
    Ok(())
}

fn gradcheck(seeds: usize, tolerance: f64, step: f64) -> Run {
    let results = gradcheck_suite(seeds, tolerance, step)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed;
        println!(
            "{:<5} {:<20} max rel error {:.3e} (seed {}, {} coordinates)",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.worst_seed,
            r.coordinates
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::GradCheck)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PCAN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.cmd {
        Command::Gen { config, out, seed } => gen(config.as_deref(), out, *seed),
        Command::Train {
            data,
            config,
            out_dir,
            seed,
            baseline,
            resume,
            stop_after,
        } => train(TrainArgs {
            data,
            config: config.as_deref(),
            out_dir,
            seed: *seed,
            baseline: *baseline,
            resume: *resume,
            stop_after: *stop_after,
        }),
        Command::Eval {
            data,
            checkpoint,
            split,
            baseline,
            out_dir,
        } => eval(data, checkpoint, *split, baseline.as_deref(), out_dir.as_deref()),
        Command::Ablate {
            data,
            config,
            sweep,
            seeds,
            out,
        } => ablate(data, config.as_deref(), sweep, *seeds, out.as_deref()),
        Command::Gradcheck { seeds, tolerance, step } => gradcheck(*seeds, *tolerance, *step),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
