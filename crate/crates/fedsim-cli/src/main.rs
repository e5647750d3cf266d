//! Command-line driver for the federated-learning simulator.
//!
//! Subcommands map onto the library drivers: `simulate` runs the full
//! lifecycle and writes the report files, `analytics` runs only the
//! statistics phase, `funnel-check` validates an event stream,
//! `compare-balancing` / `compare-normalization` run the paired
//! experiments (exit status encodes pass/fail), and `baseline` trains the
//! centralized reference model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fedsim::export::{from_jsonl, funnel_table, histogram_table, to_jsonl};
use fedsim::funnel::{validate_funnel, FunnelEvent, PipelineShape};
use fedsim::harness::{run_analytics, run_simulation, ExperimentConfig};
use fedsim::population::central_baseline;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated-learning-with-DP simulator")]
struct Cli {
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Suppress every oracle/exact output; only the noised, privacy-
    /// respecting track is produced.
    #[arg(long, global = true)]
    production_mode: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full simulation lifecycle from a config file.
    Simulate { config: PathBuf },
    /// Run only the federated-analytics phase (feature/label statistics).
    Analytics { config: PathBuf },
    /// Validate funnel conservation over a JSONL event file.
    FunnelCheck { events: PathBuf },
    /// Train with label balancing off vs on and compare score spread.
    CompareBalancing { config: PathBuf },
    /// Train with feature normalization off vs on and compare convergence.
    CompareNormalization { config: PathBuf },
    /// Train the centralized reference model on the same population.
    Baseline { config: PathBuf },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
        config.population.seed = seed;
    }
    Ok(config)
}

fn write(out_dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    let path = out_dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { config } => {
            let config = load_config(&config, cli.seed)?;
            let output = run_simulation(&config, cli.production_mode)?;
            let report = &output.report;

            write(&cli.out, "report.json", &serde_json::to_string_pretty(report)?)?;
            write(&cli.out, "rounds.jsonl", &to_jsonl(&report.rounds))?;
            write(&cli.out, "metrics.jsonl", &to_jsonl(&output.round_metrics))?;
            write(&cli.out, "analytics.jsonl", &to_jsonl(&report.analytics))?;
            write(&cli.out, "funnel_events.jsonl", &to_jsonl(&output.events))?;
            write(&cli.out, "funnel.json", &serde_json::to_string_pretty(&report.funnel)?)?;
            write(&cli.out, "funnel_phases.jsonl", &to_jsonl(&report.funnel.phases))?;
            write(&cli.out, "histogram.txt", &histogram_table(&report.score_histogram))?;

            let mut summary = String::new();
            summary.push_str(&format!("seed: {}\n", report.seed));
            summary.push_str(&format!("rounds completed: {}\n", report.rounds.len()));
            summary.push_str(&format!("stop reason: {}\n", report.stop_reason));
            if let Some(last) = report.rounds.last() {
                summary.push_str(&format!(
                    "final noised metrics: loss {:.4}  accuracy {:.4}  auc {:.4}\n",
                    last.eval.noised_loss, last.eval.noised_accuracy, last.eval.noised_auc
                ));
            }
            summary.push_str(&format!(
                "score spread: entropy {:.4}  central mass {:.4}\n",
                report.histogram_entropy, report.central_mass
            ));
            summary.push_str(&format!(
                "funnel: {} sessions, {} violations\n",
                report.funnel.sessions,
                report.funnel.violations.len()
            ));
            summary.push('\n');
            summary.push_str(&funnel_table(&report.funnel));
            write(&cli.out, "summary.txt", &summary)?;
            print!("{summary}");

            if let Some(reason) = &report.aborted {
                eprintln!("run aborted: {reason}");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Analytics { config } => {
            let config = load_config(&config, cli.seed)?;
            let output = run_analytics(&config, cli.production_mode)?;
            write(&cli.out, "feature_stats.jsonl", &to_jsonl(&output.features))?;
            write(&cli.out, "medians.jsonl", &to_jsonl(&output.medians))?;
            write(
                &cli.out,
                "label_stats.json",
                &serde_json::to_string_pretty(&output.label_stats)?,
            )?;
            for record in &output.features {
                println!(
                    "{}: mean {:.4} std {:.4} (range [{}, {}], n={})",
                    record.feature, record.est_mean, record.est_std, record.lo, record.hi,
                    record.n_reports
                );
            }
            println!(
                "labels: pi_hat {:.4} keep_pos {:.4} keep_neg {:.4}",
                output.label_stats.pi_hat, output.label_stats.keep_pos, output.label_stats.keep_neg
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::FunnelCheck { events } => {
            let text = fs::read_to_string(&events)
                .with_context(|| format!("cannot read events {}", events.display()))?;
            let events: Vec<FunnelEvent> =
                from_jsonl(&text).context("events file is not valid funnel JSONL")?;
            let violations = validate_funnel(&events, &PipelineShape::training_default());
            if violations.is_empty() {
                println!("conservation: ok ({} events)", events.len());
                Ok(ExitCode::SUCCESS)
            } else {
                for v in &violations {
                    println!(
                        "violation at phase {}: observed {} expected {}",
                        v.phase, v.observed, v.expected
                    );
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::CompareBalancing { config } => {
            let config = load_config(&config, cli.seed)?;
            let cmp = fedsim::harness::experiment_balancing(&config)?;
            write(&cli.out, "balancing.json", &serde_json::to_string_pretty(&cmp)?)?;
            println!(
                "unbalanced: entropy {:.4} central mass {:.4}",
                cmp.unbalanced.entropy, cmp.unbalanced.central_mass
            );
            println!(
                "balanced:   entropy {:.4} central mass {:.4}",
                cmp.balanced.entropy, cmp.balanced.central_mass
            );
            println!(
                "entropy increased: {}  central mass increased: {}",
                cmp.entropy_increased, cmp.central_mass_increased
            );
            Ok(if cmp.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::CompareNormalization { config } => {
            let config = load_config(&config, cli.seed)?;
            let cmp = fedsim::harness::experiment_normalization(&config)?;
            write(&cli.out, "normalization.json", &serde_json::to_string_pretty(&cmp)?)?;
            println!(
                "final loss ratio (norm/raw): {:.4}  accuracy gain: {:.2} points",
                cmp.final_loss_ratio, cmp.accuracy_gain_points
            );
            println!(
                "saturation: first-third {:.4} last-third {:.4} -> {}",
                cmp.saturation.first_third_improvement,
                cmp.saturation.last_third_improvement,
                cmp.saturation.saturated
            );
            Ok(if cmp.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Baseline { config } => {
            let config = load_config(&config, cli.seed)?;
            let (train, eval) = fedsim::harness::baseline_split(&config)?;
            let report = central_baseline(
                &train,
                &eval,
                &config.model,
                config.hyper.learning_rate,
                40,
                32,
                config.seed,
            )?;
            write(&cli.out, "baseline.json", &serde_json::to_string_pretty(&report)?)?;
            println!(
                "central baseline: auc {:.4} accuracy {:.4} loss {:.4} (train {}, eval {})",
                report.auc, report.accuracy, report.loss, report.train_size, report.eval_size
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
