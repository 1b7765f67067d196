//! `lowbit` command line: `train`, `bench`, `analyze`, `noise`.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2 for failures
//! while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use lowbit_core::noise::{monte_carlo_report, slope_through_origin, QuantNoiseModel};
use lowbit_core::numerics::Seed;
use lowbit_core::stability::SpikeThresholds;

use crate::analyze::{analyze, AnalyzeOptions};
use crate::bench::{bench, parse_sizes, quantize_fraction, to_csv};
use crate::config::Config;
use crate::error::{TrainerError, TrainerResult};
use crate::trace::load_trace;
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "lowbit", version, about = "Low-bit transformer training, benchmarks and spike analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML config and write its trace.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time quantization and matmul kernels; writes CSV.
    Bench {
        /// Comma-separated `BxDIM` pairs.
        #[arg(long, default_value = "64x256,256x256,256x512")]
        sizes: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect RMS and loss spikes in a trace and match them.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 2.3)]
        rms_threshold: f64,
        #[arg(long, default_value_t = 3.2)]
        loss_z: f64,
        #[arg(long, default_value_t = 1000)]
        warmup_skip: u64,
        #[arg(long, default_value_t = 1)]
        lag_min: u64,
        #[arg(long, default_value_t = 8)]
        lag_max: u64,
        #[arg(long, default_value_t = 100)]
        window: usize,
        #[arg(long, default_value_t = 2)]
        min_hits: usize,
        #[arg(long, default_value_t = 10)]
        dedup_window: u64,
        /// Tensor whose RMS is analyzed (default: embed.weight).
        #[arg(long)]
        tensor: Option<String>,
        /// Negative-control tensor (default: middle block's attn.in_proj.weight).
        #[arg(long)]
        control: Option<String>,
        /// Also write the spike records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the inner-product noise law with Monte Carlo.
    Noise {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        sigma_q: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_u: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_v: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(path: &str) -> impl Fn(std::io::Error) -> TrainerError + '_ {
    move |e| TrainerError::io(path, e)
}

fn execute(command: Command, out: &mut dyn Write) -> TrainerResult<()> {
    let stdout = io_err("<stdout>");
    match command {
        Command::Train { config } => {
            let cfg = Config::load(&config)?;
            let outcome = train(&cfg)?;
            let n = outcome.trace.records.len();
            let skipped: usize = outcome.trace.records.iter().map(|r| r.skipped_tensors.len()).sum();
            writeln!(out, "iterations: {n}").map_err(&stdout)?;
            writeln!(out, "final_loss_mean_100: {:.6}", outcome.final_loss_mean(100)).map_err(&stdout)?;
            writeln!(out, "skipped_tensor_updates: {skipped}").map_err(&stdout)?;
            if let Some(p) = &cfg.train.trace_path {
                writeln!(out, "trace: {}", p.display()).map_err(&stdout)?;
            }
        }
        Command::Bench { sizes, repeats, out: path } => {
            let sizes = parse_sizes(&sizes).map_err(TrainerError::Config)?;
            if repeats == 0 {
                return Err(TrainerError::Config("repeats must be at least 1".into()));
            }
            let rows = bench(&sizes, repeats)?;
            let csv = to_csv(&rows);
            match &path {
                Some(p) => std::fs::write(p, &csv).map_err(|e| TrainerError::io(p, e))?,
                None => write!(out, "{csv}").map_err(&stdout)?,
            }
            for &(b, dim) in &sizes {
                if let Some(f) = quantize_fraction(&rows, b, dim) {
                    let line = format!("quantize_fraction b={b} dim={dim}: {f:.4}");
                    // Keep stdout pure CSV when it carries the table.
                    if path.is_some() {
                        writeln!(out, "{line}").map_err(&stdout)?;
                    } else {
                        eprintln!("{line}");
                    }
                }
            }
        }
        Command::Analyze {
            trace,
            rms_threshold,
            loss_z,
            warmup_skip,
            lag_min,
            lag_max,
            window,
            min_hits,
            dedup_window,
            tensor,
            control,
            out: path,
        } => {
            if lag_min > lag_max {
                return Err(TrainerError::Config("lag-min must not exceed lag-max".into()));
            }
            let t = load_trace(&trace)?;
            let opts = AnalyzeOptions {
                thresholds: SpikeThresholds {
                    rms_threshold,
                    loss_z,
                    warmup_skip,
                    running_window: window,
                    min_hits,
                    dedup_window,
                    lag_min,
                    lag_max,
                },
                tensor,
                control,
            };
            let analysis = analyze(&t, &opts)?;
            let text: String = analysis.lines.iter().map(|l| format!("{l}\n")).collect();
            write!(out, "{text}").map_err(&stdout)?;
            if let Some(p) = path {
                std::fs::write(&p, &text).map_err(|e| TrainerError::io(&p, e))?;
            }
        }
        Command::Noise {
            k,
            sigma_q,
            sigma_u,
            sigma_v,
            trials,
            seed,
        } => {
            if k.is_empty() || trials == 0 {
                return Err(TrainerError::Config("need at least one k and one trial".into()));
            }
            // Validate up front so bad sigmas are a usage error.
            for &kk in &k {
                QuantNoiseModel::new(kk, sigma_u, sigma_v, sigma_q).map_err(|e| TrainerError::Config(e.to_string()))?;
            }
            let rows = monte_carlo_report(&k, sigma_u, sigma_v, sigma_q, trials, Seed(seed))?;
            writeln!(out, "k,predicted,empirical,rel_error").map_err(&stdout)?;
            for r in &rows {
                writeln!(out, "{},{:.6},{:.6},{:.4}", r.k, r.predicted, r.empirical, r.rel_error).map_err(&stdout)?;
            }
            let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.k as f64, r.empirical)).collect();
            let per_element = sigma_q * sigma_q * (sigma_u * sigma_u + sigma_v * sigma_v + sigma_q * sigma_q);
            writeln!(out, "# slope fitted {:.6e}, predicted {:.6e}", slope_through_origin(&points), per_element)
                .map_err(&stdout)?;
        }
    }
    Ok(())
}
