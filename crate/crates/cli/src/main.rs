use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use splitup::extrapolate::{exact_weights, weights_for, Variant, MAX_EXACT_K};
use splitup::harness::{builtin_problems, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "splitup", version, about = "Operator-splitting convergence experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print extrapolation weights.
    Weights {
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value_t = VariantArg::General)]
        variant: VariantArg,
    },
    /// Run a convergence experiment described by a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// List the built-in problems.
    ListProblems,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    General,
    Strang,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::General => Variant::General,
            VariantArg::Strang => Variant::Strang,
        }
    }
}

fn weights(k: usize, variant: Variant) -> Result<()> {
    let w = weights_for(k, variant)?;
    println!("variant {variant}, k = {k}, cond(V) = {:.3e}", w.condition);
    let exact = if k <= MAX_EXACT_K {
        Some(exact_weights(k, variant)?)
    } else {
        None
    };
    for (j, b) in w.b.iter().enumerate() {
        match &exact {
            Some(r) => println!("b[{j}] = {b:+.17e}  ({})", r[j]),
            None => println!("b[{j}] = {b:+.17e}"),
        }
    }
    Ok(())
}

fn run(config: PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::from_path(&config).with_context(|| format!("loading {}", config.display()))?;
    let report = run_experiment(&cfg)?;
    print!("{}", report.order_table());
    if let Some(path) = &cfg.output {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Weights { k, variant } => weights(k, variant.into()),
        Command::Run { config } => run(config),
        Command::ListProblems => {
            for p in builtin_problems() {
                println!("{:<12} {}", p.name, p.description);
            }
            Ok(())
        }
    }
}
