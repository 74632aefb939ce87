use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semevo::io::{Mode, SEED_ENV};
use semevo::workflow::{self, Overrides, RunOptions};
use semevo::{ActivationSpace, Result};

#[derive(Parser)]
#[command(name = "semevo", version, about = "Test-time text embedding adaptation for open-vocabulary detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shifted synthetic stream and adapt over it.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Zero-shot scoring only.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        verify_every: Option<usize>,
    },
    /// Adapt over a recorded snapshot stream (`input` in the config).
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        verify_every: Option<usize>,
    },
    /// Run every cell of the configured grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Check the engine against the reference implementation.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        verify_every: usize,
    },
    /// Write prediction embeddings at the configured checkpoints.
    ExportTrajectory {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tau_base: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    conf_threshold: Option<f64>,
    #[arg(long)]
    activation_space: Option<ActivationSpace>,
}

impl Common {
    fn resolve(&self) -> Result<semevo::io::RunConfig> {
        let o = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            n: self.n,
            tau_base: self.tau_base,
            alpha: self.alpha,
            sigma: self.sigma,
            m_max: self.m_max,
            conf_threshold: self.conf_threshold,
            activation_space: self.activation_space,
        };
        let env = std::env::var(SEED_ENV).ok();
        workflow::resolve_config(self.config.as_deref(), env.as_deref(), &o)
    }
}

fn run_single(common: &Common, mode: Option<Mode>, baseline: bool, verify_every: Option<usize>) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let opts = RunOptions {
        baseline,
        verify_every,
        ..RunOptions::from_config(&cfg)
    };
    let result = workflow::run(&cfg, &opts)?;
    let files = workflow::write_run(&cfg.output.dir, &result, cfg.output.trajectory)?;
    let s = &result.summary;
    println!(
        "{} images, accuracy {}, mAP50 {}, verified {} -> {}",
        s.images,
        fmt_opt(s.accuracy),
        fmt_opt(s.map50),
        result.verified_images,
        files.metrics.display()
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate { common, baseline, verify_every } => {
            run_single(common, Some(Mode::Simulate), *baseline, *verify_every)
        }
        Command::Replay { common, baseline, verify_every } => {
            run_single(common, Some(Mode::Replay), *baseline, *verify_every)
        }
        Command::Verify { common, verify_every } => run_single(common, None, false, Some(*verify_every)),
        Command::Ablate { common } => common.resolve().and_then(|cfg| {
            let results = workflow::ablate(&cfg, &RunOptions::from_config(&cfg))?;
            let (rows, _) = workflow::write_ablation(&cfg.output.dir, &results)?;
            println!("{} cells -> {}", results.len(), rows.display());
            Ok(())
        }),
        Command::ExportTrajectory { common } => common.resolve().and_then(|cfg| {
            let result = workflow::run(&cfg, &RunOptions::from_config(&cfg))?;
            let path = workflow::write_trajectory_file(&cfg.output.dir, &result)?;
            println!("{} rows -> {}", result.trajectory.len(), path.display());
            Ok(())
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
