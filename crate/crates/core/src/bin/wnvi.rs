use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wnvi::run::{generate, infer, mc_study, report, write_mc_table, RunConfig};
use wnvi::Result;

#[derive(Parser)]
#[command(name = "wnvi", version, about = "Model-error-aware weak neural variational inference for 2D elastography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the truth problem and write truth fields and noisy observations.
    Generate(Common),
    /// Train the variational posterior, checkpointing as it goes.
    Infer(Common),
    /// Posterior statistics, heatmaps, convergence trace and summary.
    Report(Common),
    /// Monte Carlo integration points vs weighted-residual noise.
    McStudy(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint file, default `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides `inference.max_iters`.
    #[arg(long)]
    iters: Option<u64>,
    /// Threads for report statistics.
    #[arg(long, env = "WNVI_THREADS", default_value_t = 1)]
    threads: usize,
    /// Print the trace while training.
    #[arg(long, short)]
    verbose: bool,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(iters) = self.iters {
            cfg.inference.max_iters = iters;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.config()?;
            let g = generate(&cfg, &cfg.output)?;
            println!(
                "wrote truth ({} nodes) and {} observations to {}",
                g.truth.mesh.n_nodes(),
                g.observations.points.len(),
                cfg.output.display()
            );
        }
        Command::Infer(c) => {
            let cfg = c.config()?;
            let r = infer(&cfg, &cfg.output, c.checkpoint.as_deref(), c.verbose)?;
            println!(
                "{} iterations, converged: {}, checkpoint and trace in {}",
                r.state.iteration,
                r.converged,
                cfg.output.display()
            );
        }
        Command::Report(c) => {
            let cfg = c.config()?;
            let s = report(&cfg, &cfg.output, c.checkpoint.as_deref(), c.threads)?;
            println!(
                "lambda_c^-1 median inside {:.3e}, outside {:.3e} (ratio {:.1}); E within 20% on {:.0}% of background",
                s.lambda_c_inv_median_inside,
                s.lambda_c_inv_median_outside,
                s.lambda_c_inv_ratio,
                100.0 * s.e_within_20_percent
            );
            println!("report written to {}", cfg.output.join("report").display());
        }
        Command::McStudy(c) => {
            let cfg = c.config()?;
            let rows = mc_study(&cfg)?;
            std::fs::create_dir_all(&cfg.output)?;
            let path = cfg.output.join("mc_study.csv");
            write_mc_table(&path, &rows, &cfg.meta())?;
            println!("{:>8}  {:>10}", "points", "noise [%]");
            for r in &rows {
                println!("{:>8}  {:>10.3}", r.points, r.noise);
            }
            println!("table written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
