use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim::aggregation::Strategy;
use fedsim::experiment::{
    compare_strategies, recompute_metrics, run_client, run_experiment, run_server, ExecutionMode,
    ExperimentConfig, ExperimentError, RunOptions, Workload,
};

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Desk-scale federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). An empty file gives the defaults.
    #[arg(long)]
    config: PathBuf,
    /// Directory that holds `runs/`.
    #[arg(long)]
    store_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::from_toml_file(&self.config)?;
        if let Some(root) = &self.store_root {
            cfg.store_root = root.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(id) = &self.run_id {
            cfg.run_id = id.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and print its summary as JSON.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<ExecutionMode>,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Run several strategies from identical seeds and print the metrics table.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<ExecutionMode>,
        /// Comma-separated strategies; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
    },
    /// Recompute test metrics from a finished run's decodes.csv.
    Metrics {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-client shard sizes.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Run a single client role.
    #[command(hide = true)]
    Client {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        client_id: u32,
    },
    /// Run the server role alone.
    #[command(hide = true)]
    Server {
        #[command(flatten)]
        common: Common,
    },
}

fn options() -> RunOptions {
    RunOptions {
        client_exe: std::env::current_exe().ok(),
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Cmd::Run {
            common,
            mode,
            strategy,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = strategy {
                cfg.aggregator.strategy = s;
            }
            print_json(&run_experiment(&cfg, &options())?);
        }
        Cmd::Compare {
            common,
            mode,
            strategies,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let strategies = if strategies.is_empty() {
                Strategy::ALL.to_vec()
            } else {
                strategies
            };
            let rows = compare_strategies(&cfg, &strategies, &options())?;
            println!(
                "approach,final_val_loss,rouge1_f1,rouge2_f1,rouge3_f1,rouge4_f1,rougeL_f1,bleu"
            );
            for r in rows {
                let m = r.metrics.as_row().map(|v| format!("{v:.4}")).join(",");
                println!("{},{:.4},{m}", r.strategy, r.final_val_loss);
            }
        }
        Cmd::Metrics { common } => {
            let cfg = common.load()?;
            print_json(&recompute_metrics(&cfg)?.corpus);
        }
        Cmd::Partition { common } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let w = Workload::build(&cfg)?;
            println!("client,train,validation");
            for (i, s) in w.shards.iter().enumerate() {
                println!("{},{},{}", i + 1, s.train.len(), s.validation.len());
            }
            println!("test,{},", w.data.test.len());
        }
        Cmd::Client { common, client_id } => run_client(&common.load()?, client_id)?,
        Cmd::Server { common } => print_json(&run_server(&common.load()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
