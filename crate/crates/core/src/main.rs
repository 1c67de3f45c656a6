use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use odlnn::harness::{self, report, ExperimentConfig, ExperimentKind, TraceFormat};
use odlnn::Error;

#[derive(Parser)]
#[command(name = "odlnn", version, about = "Riemannian training of orthonormal deep linear networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contraction runs from basin-calibrated starts, checked against the rate bound.
    SynthTheorem(Common),
    /// Iterations-to-ε across network depths at fixed conditioning.
    SynthSweep(Common),
    /// GD vs RGD on MNIST (or the synthetic stand-in) over a step-size grid.
    Mnist(Common),
    /// Sampling certification suites.
    Certify {
        suite: Suite,
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild reports from persisted traces without re-training.
    Report {
        /// Output directory of earlier runs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Lemma1,
    Lemma2,
    Geometry,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mnist_images: Option<PathBuf>,
    #[arg(long)]
    mnist_labels: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

impl Common {
    fn resolve(self, kind: ExperimentKind) -> odlnn::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            // An unreadable config file is a config error, not an experiment error.
            Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
                Error::Config(_) => e,
                other => Error::Config(other.to_string()),
            })?,
            None => ExperimentConfig::for_kind(kind),
        };
        if cfg.kind != kind {
            return Err(Error::Config(format!(
                "config describes a {:?} experiment but the {kind:?} subcommand was used",
                cfg.kind
            )));
        }
        if let Some(s) = self.seed {
            cfg.seeds = s;
        }
        if let Some(o) = self.out {
            cfg.out_dir = o;
        }
        if self.mnist_images.is_some() {
            cfg.mnist_images = self.mnist_images;
        }
        if self.mnist_labels.is_some() {
            cfg.mnist_labels = self.mnist_labels;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(f) = self.format {
            cfg.format = match f {
                Format::Csv => TraceFormat::Csv,
                Format::Jsonl => TraceFormat::Jsonl,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print<T: Serialize>(value: &T) -> odlnn::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Trace(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> odlnn::Result<()> {
    match cli.command {
        Command::SynthTheorem(c) => print(&harness::run_synth_theorem(&c.resolve(ExperimentKind::SynthTheorem)?)?),
        Command::SynthSweep(c) => print(&harness::run_synth_sweep(&c.resolve(ExperimentKind::SynthSweep)?)?),
        Command::Mnist(c) => print(&harness::run_mnist(&c.resolve(ExperimentKind::Mnist)?)?),
        Command::Certify { suite, common } => {
            let kind = match suite {
                Suite::Lemma1 => ExperimentKind::CertifyLemma1,
                Suite::Lemma2 => ExperimentKind::CertifyLemma2,
                Suite::Geometry => ExperimentKind::CertifyGeometry,
            };
            print(&harness::run_certify(&common.resolve(kind)?)?)
        }
        Command::Report { out } => {
            for dir in report::rebuild_reports(&out)? {
                println!("{}", dir.join(report::REPORT).display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Idx { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
