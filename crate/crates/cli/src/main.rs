use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use peepscope_cli::commands::{self, ExplainOptions};
use peepscope_cli::{exit_code, RunConfig};
use peepscope_core::{Scenario, TagSet};

#[derive(Parser)]
#[command(name = "peepscope", version, about = "Explainable anomaly detection for reaction-wheel telemetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed, overriding `seed`.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads, overriding `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Train the reduced (8, 16, 64) architecture.
    #[arg(long, global = true)]
    small: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate nominal train/val/test telemetry.
    Generate,
    /// Write corrupted validation and test sets.
    Inject {
        /// I, II or both.
        #[arg(long, value_delimiter = ',', default_value = "I,II")]
        scenario: Vec<Scenario>,
        /// Comma-separated kinds (gwn|offset|impulse|psa|step|all).
        #[arg(long)]
        kinds: Option<String>,
    },
    /// Train the autoencoder and calibrate its threshold.
    Train,
    /// Fit peephole pipelines on the corrupted validation sets.
    FitPeephole {
        #[arg(long, value_delimiter = ',', default_value = "I,II")]
        scenario: Vec<Scenario>,
        /// kinds or wheels; defaults to kinds for I and `[peephole] tag_set` for II.
        #[arg(long)]
        tag_set: Option<TagSet>,
    },
    /// Write AUCs, confusion matrices and the bias report.
    Evaluate,
    /// Explain a telemetry stream window by window.
    Explain {
        /// Stream CSV; a synthetic stream with one step event when omitted.
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value = "I")]
        scenario: Scenario,
        #[arg(long)]
        tag_set: Option<TagSet>,
        /// Seed selector for the synthetic stream.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
}

fn run(cli: Cli) -> Result<(), peepscope_core::Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    commands::init_threads(cfg.threads);

    match cli.command {
        Command::Generate => {
            let s = commands::cmd_generate(&cfg)?;
            println!("generated {} samples into {}", s.samples, cfg.out_dir.display());
        }
        Command::Inject { scenario, kinds } => {
            for s in commands::cmd_inject(&cfg, &scenario, kinds.as_deref())? {
                println!("{}: {} chunks", s.file, s.dataset.len());
            }
        }
        Command::Train => {
            let s = commands::cmd_train(&cfg, cli.small)?;
            println!("model {} threshold {:e} after {} epochs", s.model_hash, s.threshold, s.history.len());
        }
        Command::FitPeephole { scenario, tag_set } => {
            for s in commands::cmd_fit_peephole(&cfg, &scenario, tag_set)? {
                println!("{}: {} flagged chunks, pipeline {}", s.file, s.n_fit, s.pipeline_id);
            }
        }
        Command::Evaluate => {
            let s = commands::cmd_evaluate(&cfg)?;
            println!("nominal test FPR {:.5} ({} of {})", s.fpr(), s.false_positives, s.n_nominal);
            for a in &s.aucs {
                println!(
                    "AUC scenario {} {:<8} {:.4} (n = {})",
                    a.scenario.map_or("", Scenario::name),
                    a.kind.map_or("", |k| k.name()),
                    a.value,
                    a.n_anomalous
                );
            }
            for sc in &s.scopes {
                println!(
                    "{:<20} accuracy {:.3} bias index {:.3}",
                    sc.scope,
                    sc.matrix.accuracy(),
                    sc.matrix.bias_index()
                );
            }
        }
        Command::Explain { stream, stride, scenario, tag_set, trial } => {
            let opts = ExplainOptions {
                stream,
                stride,
                scenario: Some(scenario),
                tag_set,
                trial,
            };
            let out = commands::cmd_explain(&cfg, &opts)?;
            for r in &out.trace.regions {
                println!(
                    "flagged samples {}..={}: {}",
                    r.start_sample, r.end_sample, out.trace.vocabulary[r.dominant_tag]
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("peepscope failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<peepscope_core::Error>().map_or(4, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
