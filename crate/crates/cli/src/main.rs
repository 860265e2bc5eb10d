//! `maxmin-wsl`: generate synthetic data, train, evaluate and gradient-check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use maxmin_core::gradsuite::{run_suite, ClosedForms};
use maxmin_core::synthdata::{self, MANIFEST};
use maxmin_core::trainer::{epochs_csv, evaluate, fit_with, steps_csv, worker_threads, THREADS_ENV};
use maxmin_core::{checkpoint, Ablation, Error, RegMode, RunConfig, Split};
use sha2::{Digest, Sha256};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NON_FINITE: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "maxmin-wsl", version, about = "Max-min uncertainty weakly-supervised segmentation")]
struct Cli {
    /// Flat JSON config file, e.g. {"loss.lambda": 1e-7}
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for both data generation and training
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Background regularizer
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<RegMode>,
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// Output directory for runs and reports
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the data directory
    Gen,
    /// Train on the dataset and write checkpoints and logs
    Train,
    /// Evaluate a checkpoint on one split
    Eval {
        /// Checkpoint file, or a run directory holding `best.ckpt`
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Run the finite-difference gradient suite
    Gradcheck,
}

fn parse_mode(s: &str) -> Result<RegMode, String> {
    match s {
        "eem" => Ok(RegMode::Eem),
        "sem" => Ok(RegMode::Sem),
        _ => Err(format!("expected eem or sem, got `{s}`")),
    }
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Lib(Error),
    Gradcheck(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn resolve(cli: &Cli, base: Option<&Path>) -> Result<RunConfig, Error> {
    let mut cfg = match cli.config.as_deref().or(base) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.gen.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.train.loss.mode = mode;
    }
    if let Some(ablation) = cli.ablation {
        cfg.ablation = ablation;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(data) = &cli.data {
        cfg.data_dir = data.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(cfg: &RunConfig) -> CmdResult {
    let ds = synthdata::generate(&cfg.gen)?;
    synthdata::save(&ds, &cfg.data_dir)?;
    let manifest_path = cfg.data_dir.join(MANIFEST);
    let manifest = fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    println!(
        "wrote {} images to {} (train {}, val {}, test {})",
        ds.len(),
        cfg.data_dir.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    println!("manifest sha256 {}", sha256_hex(&manifest));
    Ok(())
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let ds = synthdata::load(&cfg.data_dir)?;
    let train = cfg.effective_train();
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write(&out.join("config.json"), cfg.to_json() + "\n")?;
    println!(
        "training {} epochs on {} images: ablation {}, mode {}, loss.lambda {:e}",
        train.epochs,
        ds.train.len(),
        cfg.ablation,
        train.loss.mode,
        cfg.train.loss.lambda
    );
    let started = SystemTime::now();
    let clock = Instant::now();
    let result = fit_with(&ds, &train, |log, params| {
        checkpoint::save(params, &ckpt_dir.join(format!("epoch_{:04}.ckpt", log.epoch)))?;
        let val = log.val_error.map_or("-".to_string(), |v| format!("{v:.2}"));
        println!(
            "epoch {:>3}  loss {:.5}  train_err {:.2}  val_err {}",
            log.epoch,
            log.loss.optimized(),
            log.train_error,
            val
        );
        Ok(())
    })?;
    let best_bytes = checkpoint::encode(&result.best);
    write(&out.join("best.ckpt"), &best_bytes)?;
    let pointer = match result.best_epoch {
        Some(e) => format!("checkpoints/epoch_{e:04}.ckpt\n"),
        None => "none\n".to_string(),
    };
    write(&out.join("best"), pointer)?;
    write(&out.join("steps.csv"), steps_csv(&result.steps))?;
    write(&out.join("epochs.csv"), epochs_csv(&result.epochs))?;
    let info = serde_json::json!({
        "started_unix": unix_seconds(started),
        "finished_unix": unix_seconds(SystemTime::now()),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": worker_threads(),
    });
    write(&out.join("run_info.json"), info.to_string() + "\n")?;
    println!(
        "best epoch {} sha256 {}",
        result.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        sha256_hex(&best_bytes)
    );
    Ok(())
}

fn predictions_csv(eval: &maxmin_core::trainer::Evaluation, labels: &[usize]) -> String {
    let classes = eval.predictions.first().map_or(0, |p| p.p_plus.classes());
    let mut s = String::from("index,label,pred");
    for k in 0..classes {
        write!(s, ",p_plus_{k}").unwrap();
    }
    for k in 0..classes {
        write!(s, ",p_full_{k}").unwrap();
    }
    s.push_str(",pred_fraction\n");
    for (i, (p, m)) in eval.predictions.iter().zip(eval.binary_masks()).enumerate() {
        write!(s, "{i},{},{}", labels[i], p.label).unwrap();
        for v in p.p_plus.probs().iter().chain(p.p_full.probs()) {
            write!(s, ",{v}").unwrap();
        }
        writeln!(s, ",{}", m.fraction()).unwrap();
    }
    s
}

fn cmd_eval(cli: &Cli, checkpoint_path: &Path, split: Split) -> CmdResult {
    let (ckpt, run_config) = if checkpoint_path.is_dir() {
        let cfg = checkpoint_path.join("config.json");
        (checkpoint_path.join("best.ckpt"), cfg.is_file().then_some(cfg))
    } else {
        (checkpoint_path.to_path_buf(), None)
    };
    let cfg = resolve(cli, run_config.as_deref())?;
    let params = checkpoint::load(&ckpt)?;
    let ds = synthdata::load(&cfg.data_dir)?;
    let images = ds.split(split);
    let mut train = cfg.effective_train();
    train.net = params.config().clone();
    let eval = evaluate(images, &params, &train)?;

    let out = cfg.out_dir.join(format!("eval_{split}"));
    let mask_dir = out.join("masks");
    create_dir(&mask_dir)?;
    write(&out.join("report.json"), eval.report.to_json() + "\n")?;
    write(&out.join("confusion.csv"), eval.report.confusion.to_csv())?;
    write(&out.join("sizes.csv"), eval.report.sizes.to_csv())?;
    let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
    write(&out.join("predictions.csv"), predictions_csv(&eval, &labels))?;
    for (i, m) in eval.binary_masks().iter().enumerate() {
        m.to_raster().write(&mask_dir.join(format!("{split}_{i:05}.pgm")))?;
    }
    let r = &eval.report;
    println!(
        "{split}: {} images  cl_error {:.2}  f1_plus {:.2}  f1_minus {:.2}",
        images.len(),
        r.cl_error,
        r.f1_plus,
        r.f1_minus
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck() -> CmdResult {
    let clock = Instant::now();
    let items = run_suite(&ClosedForms::default())?;
    println!("{:<34} {:>12} {:>10}  result", "item", "max error", "tolerance");
    for it in &items {
        println!(
            "{:<34} {:>12.3e} {:>10.0e}  {}",
            it.name,
            it.max_error,
            it.tolerance,
            if it.passed { "pass" } else { "FAIL" }
        );
    }
    println!("elapsed {:.2}s", clock.elapsed().as_secs_f64());
    let failed = items.iter().filter(|i| !i.passed).count();
    if failed > 0 {
        return Err(Failure::Gradcheck(failed));
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    if cli.dump_config {
        println!("{}", resolve(cli, None)?.to_json());
        return Ok(());
    }
    match &cli.command {
        None => Err(Error::Config(format!(
            "no command given; use gen, train, eval or gradcheck (threads capped by {THREADS_ENV})"
        ))
        .into()),
        Some(Command::Gen) => cmd_gen(&resolve(cli, None)?),
        Some(Command::Train) => cmd_train(&resolve(cli, None)?),
        Some(Command::Eval { checkpoint, split }) => cmd_eval(cli, checkpoint, *split),
        Some(Command::Gradcheck) => cmd_gradcheck(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gradcheck(n)) => {
            eprintln!("error: {n} gradient check item(s) out of tolerance");
            ExitCode::from(EXIT_GRADCHECK)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidInput(_) | Error::Shape(_) => EXIT_CONFIG,
                Error::Io { .. } | Error::Corrupt { .. } => EXIT_IO,
                Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
            })
        }
    }
}
