//! `cae-admm`: train, compress, decompress, evaluate, self-check and sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use cae_admm::admm::write_trace_csv;
use cae_admm::checkpoint::{load_checkpoint, save_checkpoint};
use cae_admm::codec::{compress_image, decompress_image};
use cae_admm::io::{atomic_write, read_image, write_image};
use cae_admm::metrics::bpp;
use cae_admm::model::Cae;
use cae_admm::trainer::{aggregate, evaluate_with_baseline, load_dataset, rd_sweep, train, write_epoch_log, write_metrics_csv, Profile};
use cae_admm::validation::run_suite;

#[derive(Parser, Debug)]
#[command(name = "cae-admm", version, about = "Compressive autoencoder with ADMM latent pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Built-in profile: desk or full.
    #[arg(long, default_value = "desk", conflicts_with = "config")]
    profile: String,
    /// Profile file of `key = value` lines (overrides --profile).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for weight init, augmentation, shuffling and quantization.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override, applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an image directory.
    Train {
        /// Directory of PNG / PPM training images.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        #[command(flatten)]
        profile: ProfileArgs,
        /// Train without the ADMM penalty and refreshes.
        #[arg(long)]
        no_admm: bool,
        /// Epoch log CSV [default: <CKPT>.epochs.csv].
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        /// Per-refresh ADMM trace CSV.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Compress one image.
    Compress {
        /// Trained checkpoint.
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// PNG or PPM input.
        #[arg(long = "in", value_name = "IMG")]
        input: PathBuf,
        /// Compressed output file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Decompress a file written by `compress`.
    Decompress {
        /// Checkpoint the file was compressed with.
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// Compressed input file.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Output image; `.png` or `.ppm`.
        #[arg(long, value_name = "IMG")]
        out: PathBuf,
    },
    /// Per-image rate and distortion, with mean and 95% interval.
    Eval {
        /// Model to evaluate.
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        /// Directory of evaluation images.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Per-image CSV to write.
        #[arg(long, value_name = "OUT")]
        csv: PathBuf,
        /// Second model; adds per-image bpp and zero-ratio deltas.
        #[arg(long, value_name = "CKPT")]
        baseline: Option<PathBuf>,
    },
    /// Finite-difference check of every op and composite loss.
    Gradcheck {
        /// Random cases per check.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train and evaluate one model per keep ratio.
    RdSweep {
        /// Directory of training images, also used for evaluation.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated keep ratios, at least two.
        #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
        keep_ratios: Vec<f64>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        profile: ProfileArgs,
        /// Concurrent trainings [default: CAE_ADMM_THREADS, else available cores].
        #[arg(long)]
        threads: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<cae_admm::Error> for Failure {
    fn from(e: cae_admm::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn resolve_profile(a: &ProfileArgs) -> Result<Profile, Failure> {
    let mut p = match &a.config {
        Some(path) => Profile::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => Profile::named(&a.profile).map_err(|e| Failure::Usage(e.to_string()))?,
    };
    if let Some(seed) = a.seed {
        p.set_seed(seed);
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        p.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    p.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(p)
}

fn load_model(path: &Path) -> anyhow::Result<Cae<f32>> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))?
        .model)
}

fn sweep_threads(flag: Option<usize>) -> Result<usize, Failure> {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = match std::env::var("CAE_ADMM_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure::Usage(format!("CAE_ADMM_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let n = flag.unwrap_or(default);
    if n == 0 {
        return Err(Failure::Usage("--threads must be positive".into()));
    }
    Ok(cap.map_or(n, |c| n.min(c)))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train {
            data,
            out,
            profile,
            no_admm,
            log,
            trace,
        } => {
            let mut p = resolve_profile(&profile)?;
            if no_admm {
                p.train.admm = false;
            }
            let data = load_dataset(&data)?;
            let mut model = Cae::<f32>::new(p.model)?;
            let outcome = train(&mut model, &data, &p.train, |r| {
                eprintln!(
                    "epoch {:>3}  loss {:.6}  penalty {:.6}  card(Z) {:.1}  lr {}{}",
                    r.epoch,
                    r.mean_loss,
                    r.mean_penalty,
                    r.mean_card_z,
                    r.lr,
                    if r.admm_refresh { "  [admm refresh]" } else { "" }
                );
            })?;
            let summary = outcome.admm_summary(p.train.keep_ratio);
            save_checkpoint(&out, &model, Some(&outcome.optimizer), summary.as_ref())?;
            let log_path = log.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".epochs.csv");
                PathBuf::from(s)
            });
            let mut buf = Vec::new();
            write_epoch_log(&mut buf, &outcome.log).context("formatting epoch log")?;
            atomic_write(&log_path, &buf)?;
            if let Some(path) = trace {
                let mut buf = Vec::new();
                write_trace_csv(&mut buf, &outcome.trace).context("formatting trace")?;
                atomic_write(&path, &buf)?;
            }
            let last = outcome.log.last();
            println!(
                "final_loss={} mean_card_Z={} epochs={} refreshes={}",
                last.map_or(f64::NAN, |r| r.mean_loss),
                last.map_or(f64::NAN, |r| r.mean_card_z),
                outcome.log.len(),
                outcome.refreshes.len()
            );
        }
        Command::Compress { model, input, out } => {
            let model = load_model(&model)?;
            let img = read_image(&input)?;
            let bytes = compress_image(&model, &img)?;
            atomic_write(&out, &bytes)?;
            println!(
                "bpp={} bytes={}",
                bpp(bytes.len(), (img.width() * img.height()) as usize),
                bytes.len()
            );
        }
        Command::Decompress { model, input, out } => {
            let model = load_model(&model)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let img = decompress_image(&model, &bytes).with_context(|| format!("decoding {}", input.display()))?;
            write_image(&out, &img)?;
            println!("width={} height={}", img.width(), img.height());
        }
        Command::Eval {
            model,
            data,
            csv,
            baseline,
        } => {
            let model = load_model(&model)?;
            let base = baseline.as_deref().map(load_model).transpose()?;
            let data = load_dataset(&data)?;
            let report = evaluate_with_baseline(&model, base.as_ref(), &data)?;
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &report).context("formatting metrics")?;
            atomic_write(&csv, &buf)?;
            let a = aggregate(&report.rows);
            println!(
                "images={} bpp={:.4}±{:.4} psnr_db={:.3} ssim={:.4} ms_ssim={:.4} zero_ratio={:.4}",
                report.rows.len(),
                a.bpp.0,
                a.bpp.1,
                a.psnr_db.0,
                a.ssim.0,
                a.ms_ssim.0,
                a.zero_ratio.0
            );
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be positive".into()));
            }
            let results = run_suite(seeds)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<4} {:<24} error {:.3e}  tolerance {:.0e}  seeds {}",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.error,
                    r.tolerance,
                    r.seeds
                );
                failed += !r.passed as usize;
            }
            if failed > 0 {
                return Err(Failure::Runtime(anyhow!("{failed} of {} checks failed", results.len())));
            }
            println!("all {} checks passed", results.len());
        }
        Command::RdSweep {
            data,
            keep_ratios,
            out,
            profile,
            threads,
        } => {
            if keep_ratios.len() < 2 {
                return Err(Failure::Usage(format!(
                    "--keep-ratios needs at least 2 values, got {}",
                    keep_ratios.len()
                )));
            }
            let p = resolve_profile(&profile)?;
            for &r in &keep_ratios {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Failure::Usage(format!("keep ratio {r} is outside (0, 1]")));
                }
            }
            let threads = sweep_threads(threads)?;
            let data = load_dataset(&data)?;
            let points = rd_sweep(&data, &p, &keep_ratios, &out, threads)?;
            for pt in &points {
                let a = &pt.aggregate;
                println!(
                    "keep_ratio={} bpp={:.4} ssim={:.4} ms_ssim={:.4} zero_ratio={:.4}",
                    pt.keep_ratio, a.bpp.0, a.ssim.0, a.ms_ssim.0, a.zero_ratio.0
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
