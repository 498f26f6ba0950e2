//! Command-line front end: every subcommand takes a JSON experiment config
//! plus a few flag overrides, and exits 0 on success, 2 on a config
//! problem, 1 on a runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigflow::harness::{
    load_config, run_experiment, run_gen_train, run_sample, run_synth_data, ExperimentConfig,
    Protocol,
};
use sigflow::Error;

#[derive(Parser)]
#[command(
    name = "sigflow",
    version,
    about = "Conditional flow-matching toolkit for multichannel time series"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    /// Override the seed list with a single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one subject id
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and write preprocessed window files
    SynthData(Common),
    /// Train a generator per subject; writes checkpoints and loss CSVs
    GenTrain(Common),
    /// Sample windows from a trained generator
    Sample(Common),
    /// Fidelity evaluation: FID, IS, CAS, PRDC, realism, prototype stats
    Eval(Common),
    /// Train on synthetic, test on real
    Tstr(Common),
    /// Augment the real training set and evaluate downstream
    Augment(Common),
    /// Parameter scan (guidance grid unless the config picks another scan)
    Scan(Common),
    /// Sampling throughput benchmark
    Bench(Common),
}

fn apply_overrides(cfg: &mut ExperimentConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(subject) = &common.subject {
        cfg.subject = Some(subject.clone());
    }
}

fn run(cmd: &Cmd) -> Result<Vec<PathBuf>, Error> {
    let common = match cmd {
        Cmd::SynthData(c)
        | Cmd::GenTrain(c)
        | Cmd::Sample(c)
        | Cmd::Eval(c)
        | Cmd::Tstr(c)
        | Cmd::Augment(c)
        | Cmd::Scan(c)
        | Cmd::Bench(c) => c,
    };
    let mut cfg = load_config(&common.config)?;
    apply_overrides(&mut cfg, common);
    match cmd {
        Cmd::SynthData(_) => run_synth_data(&cfg),
        Cmd::GenTrain(_) => run_gen_train(&cfg),
        Cmd::Sample(_) => run_sample(&cfg),
        Cmd::Eval(_) => {
            cfg.protocol = Protocol::Fidelity;
            run_experiment(&cfg)
        }
        Cmd::Tstr(_) => {
            cfg.protocol = Protocol::Tstr;
            run_experiment(&cfg)
        }
        Cmd::Augment(_) => {
            cfg.protocol = Protocol::Augmentation;
            run_experiment(&cfg)
        }
        Cmd::Scan(_) => {
            if !matches!(
                cfg.protocol,
                Protocol::ScanGuidance | Protocol::ScanSolver | Protocol::ScanTimeSampling
            ) {
                cfg.protocol = Protocol::ScanGuidance;
            }
            run_experiment(&cfg)
        }
        Cmd::Bench(_) => {
            cfg.protocol = Protocol::Bench;
            run_experiment(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.cmd) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {}", e);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
    }
}
