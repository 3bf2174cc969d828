use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use conetank::config::RunConfig;
use conetank::controllers::{Controller, LinearMpc, NonlinearMpc};
use conetank::report::{summary_table, write_trace_csv};
use conetank::sim::{run_batch, SimTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Lmpc,
    Nmpc,
    Both,
}

/// Closed-loop level control of a conical tank with linear and nonlinear MPC.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// TOML configuration file, or "default" for the built-in one.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long, value_enum, default_value_t = Which::Both)]
    controller: Which,
    /// Output directory; overrides `output_dir` from the configuration.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Prediction horizon for both controllers.
    #[arg(long)]
    horizon: Option<usize>,
    /// Seed for measurement noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the default configuration and exit.
    #[arg(long)]
    dump_default_config: bool,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

fn build(config: &RunConfig, which: Which) -> Result<Box<dyn Controller + Send>, String> {
    let tank = config.tank;
    let u0 = config
        .scenario
        .initial_flow(&tank)
        .map_err(|e| e.to_string())?;
    Ok(match which {
        Which::Lmpc => Box::new(
            LinearMpc::new(tank, config.lmpc, config.operating_level, u0)
                .map_err(|e| e.to_string())?,
        ),
        _ => Box::new(NonlinearMpc::new(tank, config.nmpc, u0).map_err(|e| e.to_string())?),
    })
}

fn write_outputs(dir: &Path, traces: &[SimTrace]) -> std::io::Result<String> {
    std::fs::create_dir_all(dir)?;
    for t in traces {
        let path = dir.join(format!("trace_{}.csv", t.controller));
        write_trace_csv(t, BufWriter::new(File::create(path)?))?;
    }
    let refs: Vec<&SimTrace> = traces.iter().collect();
    let table = summary_table(&refs);
    std::fs::write(dir.join("summary.txt"), &table)?;
    Ok(table)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();

    if args.dump_default_config {
        print!("{}", RunConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }

    let mut config = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(n) = args.horizon {
        config.lmpc.ocp.horizon = n;
        config.nmpc.ocp.horizon = n;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Err(e) = config.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }

    let selected: Vec<Which> = match args.controller {
        Which::Both => vec![Which::Lmpc, Which::Nmpc],
        one => vec![one],
    };
    let mut controllers = Vec::new();
    for w in selected {
        match build(&config, w) {
            Ok(c) => controllers.push(c),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    let mut traces = Vec::new();
    for r in run_batch(&config.scenario, controllers, &config.tank, config.seed) {
        match r {
            Ok(t) => traces.push(t),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_FAILURE);
            }
        }
    }

    let dir = args
        .output
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));
    match write_outputs(&dir, &traces) {
        Ok(table) => print!("{table}"),
        Err(e) => {
            eprintln!("error: cannot write outputs to {}: {e}", dir.display());
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    if let Some(t) = traces.iter().find(|t| t.abort.is_some()) {
        let a = t.abort.unwrap();
        eprintln!(
            "error: {} run aborted at t = {} s, level {} m left the tank range",
            t.controller, a.time, a.level
        );
        return ExitCode::from(EXIT_ABORT);
    }
    ExitCode::SUCCESS
}
