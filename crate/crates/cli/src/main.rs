use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use selfcal_core::calibration::LambdaPolicy;
use selfcal_core::exec::ExecMode;
use selfcal_wsod::commands::{self, Split};
use selfcal_wsod::config::{Overrides, Preset, RunConfig};
use selfcal_wsod::{exit_code, report};

#[derive(Parser)]
#[command(
    name = "selfcal-wsod",
    version,
    about = "Weakly-supervised saliency with self-calibrated pseudo labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration, merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// fixed:V, scheduled or capped:V.
    #[arg(long, global = true, value_parser = parse_lambda)]
    lambda: Option<LambdaPolicy>,

    /// Skip the CRF plugin in label generation and export.
    #[arg(long, global = true)]
    no_crf: bool,

    /// Network input size for both stages.
    #[arg(long, global = true)]
    size: Option<usize>,

    /// Run every loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/test shapes set.
    Synth,
    /// Train the stage-1 classifier.
    TrainCls,
    /// Generate stage-1 pseudo labels (Y1).
    GenPseudo,
    /// Train the saliency network with self-calibration.
    TrainSal {
        /// Continue from the newest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Write saliency maps for a split.
    Infer {
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction directory (with --gt: match by file stem).
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Export CRF-refined predictions on the training set as labels.
    ExportLabels,
    /// Build the static comparison report.
    Report,
    /// Synthetic ablation: with vs without self-calibration.
    Ablation,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: selfcal_wsod::UsageError| e.0)
}

fn parse_lambda(s: &str) -> Result<LambdaPolicy, String> {
    s.parse().map_err(|e: selfcal_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: selfcal_wsod::UsageError| e.0)
}

fn run(cli: Cli) -> Result<()> {
    let ov = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        lambda: cli.lambda,
        no_crf: cli.no_crf,
        size: cli.size,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
    let exec = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match cli.command {
        Command::Synth => {
            commands::synth(&cfg)?;
        }
        Command::TrainCls => {
            let p = commands::train_cls(&cfg, exec)?;
            println!("{}", p.display());
        }
        Command::GenPseudo => {
            let store = commands::gen_pseudo(&cfg, exec)?;
            println!(
                "{} labels in {} ({} skipped)",
                store.len(),
                cfg.paths.store_dir.display(),
                store.meta.skipped.len()
            );
        }
        Command::TrainSal { resume } => {
            let p = commands::train_sal(&cfg, resume, exec)?;
            println!("{}", p.display());
        }
        Command::Infer { split } => {
            let d = commands::infer(&cfg, split, exec)?;
            println!("{}", d.display());
        }
        Command::Eval { pred, gt } => {
            let r = commands::eval(&cfg, pred.as_deref(), gt.as_deref(), exec)?;
            println!("{}", r.summary());
        }
        Command::ExportLabels => {
            let info = commands::export_labels(&cfg, exec)?;
            println!(
                "{} maps in {} (crf applied to {})",
                info.count,
                cfg.paths.export_dir.display(),
                info.crf_applied
            );
        }
        Command::Report => {
            let idx = report::report(&cfg)?;
            println!(
                "report in {} ({})",
                cfg.paths.report_dir.display(),
                if idx.comparison { "with baseline" } else { "single run" }
            );
        }
        Command::Ablation => {
            let r = commands::ablation(&cfg, exec)?;
            for s in &r.seeds {
                println!(
                    "seed {}: SC mae {:.4} F {:.4} | baseline mae {:.4} F {:.4}",
                    s.seed, s.with_sc.test.mae, s.with_sc.test.f, s.without_sc.test.mae, s.without_sc.test.f
                );
            }
            let (m_sc, m_base) = r.mean_mae();
            let (f_sc, f_base) = r.mean_f();
            println!("mean: SC mae {m_sc:.4} F {f_sc:.4} | baseline mae {m_base:.4} F {f_base:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
