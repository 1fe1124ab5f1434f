use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tgcca::simgen::SimSpec;
use tgcca_cli::dataset::{load_json, write_json};
use tgcca_cli::report::write_csv;
use tgcca_cli::{cmd_bench, cmd_eval, cmd_fit, cmd_simulate, BenchConfig, CliError, FitConfig, Result};

#[derive(Parser)]
#[command(name = "tgcca", version, about = "Tensor GCCA simulations, fits and benchmarks")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from a simulation spec.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit models on every fold of a dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time separable against explicit whitening.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute summary.csv from the alignment.csv of a fit directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, out } => {
            let mut spec: SimSpec = load_json(&config)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let m = cmd_simulate(&spec, &out)?;
            println!("wrote {} folds to {}", m.num_folds(), out.display());
        }
        Command::Fit { config, data, out } => {
            let mut cfg: FitConfig = load_json(&config)?;
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s);
            }
            let result = cmd_fit(&cfg, &data, &out)?;
            println!("model,block,component,count,median,q025,q975");
            for s in &result.summary {
                println!(
                    "{},{},{},{},{:.4},{:.4},{:.4}",
                    s.model, s.block, s.component, s.count, s.median, s.q025, s.q975
                );
            }
        }
        Command::Bench { config, out } => {
            let mut cfg: BenchConfig = match config {
                Some(p) => load_json(&p)?,
                None => BenchConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let rows = cmd_bench(&cfg)?;
            println!("q,d,p,separable_seconds,explicit_seconds,ratio,max_abs_diff");
            for r in &rows {
                println!(
                    "{},{},{},{:.6},{:.6},{:.2},{:.2e}",
                    r.q, r.d, r.p, r.separable_seconds, r.explicit_seconds, r.ratio, r.max_abs_diff
                );
            }
            if let Some(dir) = out {
                tgcca_cli::dataset::create_dir(&dir)?;
                write_csv(&dir.join("bench.csv"), &rows)?;
                write_json(&dir.join("bench.json"), &rows)?;
            }
        }
        Command::Eval { data, out } => {
            let out = out.unwrap_or_else(|| data.clone());
            for s in cmd_eval(&data, &out)? {
                println!(
                    "{},{},{},{},{:.4},{:.4},{:.4}",
                    s.model, s.block, s.component, s.count, s.median, s.q025, s.q975
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TGCCA_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
