use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use paraprobe::config::RunConfig;
use paraprobe::pipeline::{temperature_variants, Pipeline, PipelineError, RunOutput, Stage};

#[derive(Parser)]
#[command(
    name = "paraprobe",
    version,
    about = "Paraphrase-rank sensitivity probing for NL2SQL benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load the benchmark and render schemas.
    Ingest(ConfigArg),
    /// Generate paraphrase sets and write parse_requests.jsonl.
    Paraphrase(ConfigArg),
    /// Import CoNLL-U parses for the paraphrase sets.
    ParseImport(ConfigArg),
    /// Rank paraphrases by tree edit distance.
    Rank(ConfigArg),
    /// Apply the embedding cosine filter.
    Filter(ConfigArg),
    /// Print the cosine distribution of a sample of paraphrases.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 100)]
        sample_size: usize,
    },
    /// Paired execution-accuracy evaluation per rank.
    Evaluate(ConfigArg),
    /// Kendall tau with bootstrap intervals.
    Stats(ConfigArg),
    /// Write the report bundle.
    Report(ConfigArg),
    /// Run every stage and write the report bundle.
    Run(ConfigArg),
    /// Run several configurations, optionally once per generation temperature.
    Sweep {
        #[arg(short, long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        temperature: Vec<f64>,
    },
}

fn pipeline(path: &Path) -> anyhow::Result<Pipeline> {
    let config = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Pipeline::new(config)?)
}

fn summarize(run: &RunOutput) {
    if let Some(b) = &run.benchmark {
        println!(
            "examples: {} ({} records skipped)",
            b.examples.len(),
            b.skipped.len()
        );
    }
    if let Some(sets) = &run.paraphrases {
        let shortfall: usize = sets.values().map(|s| s.shortfall).sum();
        println!(
            "paraphrase sets: {} (total shortfall {shortfall})",
            sets.len()
        );
    }
    if let Some(p) = &run.parses {
        println!("parsed sets: {}", p.sets.len());
    }
    if let Some(f) = &run.filtered {
        let total: usize = f.values().map(Vec::len).sum();
        let kept: usize = f
            .values()
            .map(|l| l.iter().filter(|p| p.retained).count())
            .sum();
        println!("paraphrases retained: {kept} of {total}");
    } else if let Some(r) = &run.ranked {
        println!(
            "ranked paraphrases: {}",
            r.values().map(Vec::len).sum::<usize>()
        );
    }
    for eval in run.evaluations.iter().flatten() {
        for r in &eval.records {
            println!(
                "{} rank {:>2}: n={:<4} acc_orig={:.4} acc_para={:.4} delta={:+.4}",
                r.model_id, r.rank, r.n_pairs, r.acc_orig, r.acc_para, r.delta
            );
        }
    }
    for t in run.tau_reports.iter().flatten() {
        println!(
            "{} {} {}: tau={:.4} 95% CI [{:.4}, {:.4}] n={} B={} seed={}",
            t.model_id,
            t.dataset,
            t.rank_filter,
            t.estimate.tau,
            t.ci_lo,
            t.ci_hi,
            t.estimate.n,
            t.b,
            t.seed
        );
    }
}

fn run_stage(path: &Path, stage: Stage) -> anyhow::Result<()> {
    let p = pipeline(path)?;
    let result = p.run_to(stage);
    for n in p.notices() {
        log::info!("{n}");
    }
    let run = result?;
    summarize(&run);
    if stage == Stage::Report {
        println!("bundle written to {}", p.config().output_path().display());
    }
    Ok(())
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest(c) => run_stage(&c.config, Stage::Ingest),
        Command::Paraphrase(c) => run_stage(&c.config, Stage::Paraphrase),
        Command::ParseImport(c) => run_stage(&c.config, Stage::ParseImport),
        Command::Rank(c) => run_stage(&c.config, Stage::Rank),
        Command::Filter(c) => run_stage(&c.config, Stage::Filter),
        Command::Evaluate(c) => run_stage(&c.config, Stage::Evaluate),
        Command::Stats(c) => run_stage(&c.config, Stage::Stats),
        Command::Report(c) | Command::Run(c) => run_stage(&c.config, Stage::Report),
        Command::Calibrate {
            config,
            sample_size,
        } => {
            let p = pipeline(&config.config)?;
            let hist = p.calibrate(sample_size)?;
            if hist.clamped {
                println!(
                    "note: sample size clamped to {} examples",
                    hist.sampled_examples
                );
            }
            println!(
                "{} pairs from {} examples",
                hist.total_pairs, hist.sampled_examples
            );
            for b in &hist.bins {
                println!("[{:+.2}, {:+.2}) {:>6}", b.bin_lo, b.bin_hi, b.count);
            }
            let out = p.write_calibration(&hist)?;
            println!("written to {}", out.display());
            Ok(())
        }
        Command::Sweep {
            configs,
            temperature,
        } => {
            let mut failed = 0;
            for path in &configs {
                let base =
                    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
                let variants = if temperature.is_empty() {
                    vec![base]
                } else {
                    temperature_variants(&base, &temperature)
                };
                for config in variants {
                    let label = format!(
                        "{} (temperature {})",
                        path.display(),
                        config.generation.temperature
                    );
                    let outcome = Pipeline::new(config).and_then(|p| {
                        p.run_to(Stage::Report)?;
                        Ok(p.config().output_path())
                    });
                    match outcome {
                        Ok(dir) => println!("{label}: bundle written to {}", dir.display()),
                        Err(e) => {
                            failed += 1;
                            eprintln!("{label}: {e}");
                        }
                    }
                }
            }
            anyhow::ensure!(failed == 0, "{failed} sweep run(s) failed");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<PipelineError>()
                .is_some_and(|p| matches!(p, PipelineError::Fatal { .. }))
            {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
