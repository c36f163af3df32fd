use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use normlab::experiment::{run_analyze, run_sweep, run_train, ExperimentSpec, OutputFormat};
use normlab::theory::{proposition_report, ReportOptions};
use normlab::Corpus;

/// Output root used when `--out` is not given.
const OUT_ENV: &str = "NORMLAB_OUT";

#[derive(Parser)]
#[command(
    name = "normlab",
    version,
    about = "Train and probe small Transformers under different normalization placements"
)]
struct Cli {
    /// Output directory (default: $NORMLAB_OUT joined with the spec's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, a checkpoint, and charts.
    Train {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the spec's learning-rate sweep.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Replaces the sweep's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-layer diagnostics of a checkpoint on held-out probe text.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe text (default: the bundled corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        probe_sequences: usize,
    },
    /// Check the MLP-block gradient identity and bounds on random cases.
    Theory {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 10.0, 100.0, 1000.0])]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiplies every bound before checking (detector self-test).
        #[arg(long, default_value_t = 1.0, hide = true)]
        bound_scale: f64,
    },
}

fn out_dir(cli_out: &Option<PathBuf>, fallback: &Path) -> PathBuf {
    if let Some(o) = cli_out {
        return o.clone();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) => PathBuf::from(root).join(fallback),
        None => fallback.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let format: OutputFormat = cli.format.into();
    match cli.command {
        Command::Train { spec, seed } => {
            let mut s = ExperimentSpec::load(&spec)?;
            if let Some(seed) = seed {
                s = s.with_seed(seed);
            }
            let out = out_dir(&cli.out, &s.output_dir);
            let outcome = run_train(&s, &out, format).with_context(|| format!("training {}", spec.display()))?;
            let summary = outcome.record.summary();
            match format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
                OutputFormat::Csv => {
                    println!(
                        "{}: {} steps, final loss {}, {} spikes{}",
                        summary.strategy,
                        summary.steps_run,
                        summary.final_loss.map_or("-".into(), |l| format!("{l:.4}")),
                        summary.spikes,
                        if summary.diverged { ", DIVERGED" } else { "" }
                    );
                    for f in &outcome.files {
                        println!("  {}", f.display());
                    }
                }
            }
        }
        Command::Sweep { spec, seed } => {
            let mut s = ExperimentSpec::load(&spec)?;
            if let (Some(seed), Some(sw)) = (seed, s.sweep.as_mut()) {
                sw.seeds = vec![seed];
            }
            let out = out_dir(&cli.out, &s.output_dir);
            let table = run_sweep(&s, &out, format)?;
            for st in table.strategies() {
                match table.best_lr(&st) {
                    Some((lr, loss)) => println!("{}: best lr {lr} (median final loss {loss:.4})", st.label()),
                    None => println!("{}: every cell diverged or failed", st.label()),
                }
            }
            for c in table.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!(
                    "cell {} lr {} seed {} failed: {}",
                    c.strategy.label(),
                    c.lr,
                    c.seed,
                    c.error.as_deref().unwrap()
                );
            }
            println!("  {}", out.display());
        }
        Command::Analyze {
            checkpoint,
            corpus,
            probe_sequences,
        } => {
            let corpus = match corpus {
                Some(p) => Corpus::from_path(&p)?,
                None => Corpus::bundled(),
            };
            let out = out_dir(&cli.out, Path::new("analysis"));
            let a = run_analyze(&checkpoint, &corpus, probe_sequences, &out, format)?;
            for n in &a.notices {
                eprintln!("notice: {n}");
            }
            match format {
                OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&a)?),
                OutputFormat::Csv => {
                    println!("layer,hidden_abs_mean,hidden_variance,angular_distance,grad_norm");
                    for l in &a.layers {
                        println!(
                            "{},{},{},{},{}",
                            l.layer,
                            l.hidden_abs_mean,
                            l.hidden_variance,
                            l.angular_distance,
                            l.grad_norm.unwrap_or(f64::NAN)
                        );
                    }
                    if let Some(g) = a.variance_growth {
                        println!("variance growth: {}", g.shape);
                    }
                }
            }
        }
        Command::Theory {
            cases,
            dim,
            hidden,
            scales,
            seed,
            bound_scale,
        } => {
            let options = ReportOptions {
                n_cases: cases,
                dim,
                hidden,
                scales,
                seed,
                bound_scale,
            };
            let report = proposition_report(&options)?;
            let out = out_dir(&cli.out, Path::new("theory"));
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("theory.json"), report.to_json() + "\n")?;
            std::fs::write(out.join("theory.txt"), report.to_text())?;
            print!("{}", report.to_text());
            if report.violations > 0 {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
