use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shepherd::harness::{emit_plot_data, inspect, output_dir, run_experiment, run_study, RunConfig, StudyPlan};
use shepherd::Error;

/// Herding a crowd with a few controlled agents, at the particle and the
/// mean-field level.
#[derive(Parser)]
#[command(name = "shepherd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Scenario preset (S1, S2, S3, custom).
    #[arg(long)]
    preset: Option<String>,
    /// Override `section.key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; relative paths resolve against SHEPHERD_OUTPUT_ROOT.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("scenario.preset=\"{p}\""));
        }
        overrides.extend(self.overrides.iter().cloned());
        if let Some(o) = &self.output {
            overrides.push(format!("output.dir={}", toml::Value::String(o.display().to_string())));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Mean-field grids and particle counts compared against a reference grid.
    Study {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "25,50")]
        grids: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000")]
        particles: Vec<usize>,
        /// Defaults to the finest grid.
        #[arg(long)]
        reference_grid: Option<usize>,
    },
    /// Build the plot-ready CSV bundle of a finished run.
    EmitPlots {
        run_dir: PathBuf,
        /// Times of the crowd grids; every snapshot when absent.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
    },
    /// Summarise a run directory, a snapshot or a configuration file.
    Inspect { path: PathBuf },
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os("SHEPHERD_OUTPUT_ROOT").map(PathBuf::from)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("SHEPHERD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("SHEPHERD_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn execute(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Run { config } => {
            let cfg = config.load()?;
            print!("{}", cfg.to_toml());
            let dir = output_dir(output_root().as_deref(), &cfg.output.dir);
            let (manifest, outcome) = run_experiment(&cfg, &dir)?;
            let last = outcome.final_node();
            println!();
            println!("wrote {} files to {}", manifest.files.len(), dir.display());
            println!(
                "final J1 = {:.6e}, J2 = {:.6e}, E = ({:.4}, {:.4}), Var = {:.4}",
                last.parts.j1, last.parts.j2, last.mean[0], last.mean[1], last.variance
            );
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Study {
            config,
            grids,
            particles,
            reference_grid,
        } => {
            let cfg = config.load()?;
            print!("{}", cfg.to_toml());
            let plan = StudyPlan {
                grids,
                particles,
                reference_grid,
            };
            let dir = output_dir(output_root().as_deref(), &cfg.output.dir);
            let table = run_study(&cfg, &plan, &dir)?;
            println!();
            print!("{}", table.to_csv());
            let failed: Vec<_> = table.columns.iter().filter(|c| c.error.is_some()).collect();
            for c in &failed {
                eprintln!("{}: {}", c.label, c.error.as_deref().unwrap_or(""));
            }
            if !failed.is_empty() {
                return Err(Error::Record(format!("{} study runs failed", failed.len())));
            }
        }
        Command::EmitPlots { run_dir, times } => {
            let bundle = emit_plot_data(&run_dir, &times)?;
            for f in &bundle.files {
                println!("{}", f.path);
            }
            for w in &bundle.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Inspect { path } => print!("{}", inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Cfl(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
