use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use local_kalman::harness::{emit_outputs, parse_config, run_experiment, run_seed, summary_json, ConfigError, ExperimentConfig, HarnessError};
use local_kalman::kalman::steady_state_gain;
use local_kalman::lds::simulate;
use local_kalman::netgraph::{audit_locality, build_architecture, dense_kalman_trace, execute_step_traced, Layer, Trace};
use local_kalman::selftest;
use nalgebra::DMatrix;

/// Steps traced by `audit`.
const AUDIT_STEPS: usize = 100;

#[derive(Parser)]
#[command(name = "local-kalman", version, about = "Kalman filtering with local gain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its configured outputs.
    Run { config: PathBuf },
    /// Print the steady-state gain and covariances of the config's model.
    SteadyState { config: PathBuf },
    /// Build the filter network for the config and audit a traced run.
    Audit { config: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
}

enum Failure {
    Config(ConfigError),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = parse_config(path).map_err(Failure::Config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn matrix_text(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:>14.8e}")).collect();
            format!("  [{}]", row.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn run(cli: &Cli, config: &Path) -> Result<(), Failure> {
    let cfg = load(config, cli.seed)?;
    if !cli.quiet {
        println!("# resolved config\n{}", cfg.resolved_toml());
    }
    let result = run_experiment(&cfg)?;
    let written = emit_outputs(&cfg, &result, &cli.out_dir)?;
    if !cli.quiet {
        print!("# summary\n{}", summary_json(&result.summary));
        for path in written {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn steady_state(cli: &Cli, config: &Path) -> Result<(), Failure> {
    let cfg = load(config, cli.seed)?;
    let exp = cfg.resolve().map_err(Failure::Config)?;
    let ss = steady_state_gain(&exp.model, cfg.oracle.tol, cfg.oracle.max_iter).map_err(|e| Failure::Runtime(e.to_string()))?;
    if !cli.quiet {
        println!("iterations: {}  residual: {:e}", ss.iterations, ss.residual);
        println!("K* (filter gain):\n{}", matrix_text(&ss.kf));
        println!("F K* (prediction gain):\n{}", matrix_text(&ss.prediction_gain(&exp.model)));
        println!("M* (prior covariance):\n{}", matrix_text(&ss.m));
        println!("N* (posterior covariance):\n{}", matrix_text(&ss.n));
    }
    Ok(())
}

fn audit(cli: &Cli, config: &Path) -> Result<(), Failure> {
    let cfg = load(config, cli.seed)?;
    let exp = cfg.resolve().map_err(Failure::Config)?;
    let runtime = |e: local_kalman::Error| Failure::Runtime(e.to_string());
    let mut graph = build_architecture(&exp.dynamics(), &exp.k0, 0.0, &cfg.rpe).map_err(runtime)?;
    for i in 0..exp.model.n() {
        let id = graph.node(Layer::StateEstimate, i);
        graph.nodes[id.0].activation = exp.xhat0[i];
    }
    let built = graph.clone();
    let steps = cfg.horizon.min(AUDIT_STEPS);
    let traj = simulate(&exp.model, steps, run_seed(cfg.seed, 0), exp.x0.as_ref()).map_err(runtime)?;
    let mut trace = Trace::new();
    for y in &traj.observations {
        let gamma = cfg.rpe.gamma.gamma(graph.t);
        graph = execute_step_traced(&graph, y, gamma, &mut trace).map_err(runtime)?.0;
    }
    let report = audit_locality(&graph, &trace);
    let (dense_graph, dense_trace) = dense_kalman_trace(&exp.model, 1).map_err(runtime)?;
    let dense = audit_locality(&dense_graph, &dense_trace);

    let text = format!(
        "{}\nnetwork, {steps} traced steps\n{}\nexact kalman step, naive trace\n{}",
        built.architecture_table(),
        report.render(),
        dense.render()
    );
    if !cli.quiet {
        print!("{text}");
    }
    if cli.out_dir != Path::new(".") {
        let io = |e: std::io::Error| Failure::Runtime(format!("{}: {e}", cli.out_dir.display()));
        std::fs::create_dir_all(&cli.out_dir).map_err(io)?;
        std::fs::write(cli.out_dir.join("edges.csv"), built.edge_list()).map_err(io)?;
        std::fs::write(cli.out_dir.join("audit.txt"), &text).map_err(io)?;
    }
    Ok(())
}

fn self_test(cli: &Cli) -> Result<(), Failure> {
    let results = selftest::run_all();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        if !cli.quiet || !r.passed {
            let status = if r.passed { "PASS" } else { "FAIL" };
            println!("{status} {:<48} {:>8.3}s  {}", r.name, r.seconds, r.detail);
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run(&cli, config),
        Command::SteadyState { config } => steady_state(&cli, config),
        Command::Audit { config } => audit(&cli, config),
        Command::Selftest => self_test(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
