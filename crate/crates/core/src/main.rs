use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use evolvable_agents::experiment::{
    emit_csv, format_sig6, run_experiment, ExperimentBackend, ExperimentConfig, ExperimentReport, SimClock,
};
use evolvable_agents::node::{run_node, NodeConfigFile};
use evolvable_agents::operators::{EaParams, RngStream};
use evolvable_agents::transport::golden;
use evolvable_agents::transport::sim::LinkModel;
use evolvable_agents::tsp::{brute_force_optimum, TspInstance};

#[derive(Parser)]
#[command(
    name = "evolvable-agents",
    version,
    about = "Distributed evolutionary TSP solver with adaptive gossip"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Socket,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Real,
    Virtual,
}

#[derive(Subcommand)]
enum Command {
    /// Run repeated experiments over node counts and write CSV reports.
    Run(RunArgs),
    /// Print the exact optimum of a small instance.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Check the built-in wire-format vectors.
    VerifyWire,
    /// Run a single node described by a TOML file.
    Node {
        #[arg(long)]
        config: PathBuf,
        /// Write the node report here as JSON (stdout if omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a random EUC_2D instance in TSPLIB format.
    GenInstance {
        #[arg(long)]
        cities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates are drawn from [0, side).
        #[arg(long, default_value_t = 1000.0)]
        side: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    nodes: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Total evaluations per run, shared by all nodes.
    #[arg(long, default_value_t = 1_000_000)]
    budget: u64,
    /// Total population, shared by all nodes.
    #[arg(long, default_value_t = 32)]
    pop: usize,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    pc: f64,
    #[arg(long, default_value_t = 0.1)]
    pm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    /// Simulated one-way latency.
    #[arg(long, default_value_t = 0.1)]
    latency_ms: f64,
    #[arg(long, default_value_t = 125e6)]
    bandwidth_bps: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    /// `virtual` runs the simulated network in simulated time.
    #[arg(long, value_enum, default_value = "real")]
    clock: ClockArg,
    /// Simulated cost of one evaluation under `--clock virtual`.
    #[arg(long, default_value_t = 10.0)]
    eval_cost_us: f64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn ms(x: f64) -> Result<Duration, String> {
    Duration::try_from_secs_f64(x / 1e3).map_err(|e| format!("bad duration {x} ms: {e}"))
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig, String> {
    let instance = Arc::new(TspInstance::from_file(&a.instance).map_err(|e| format!("{}: {e}", a.instance.display()))?);
    let backend = match (a.backend, a.clock) {
        (BackendArg::Sim, ClockArg::Real) => ExperimentBackend::Sim(SimClock::Real),
        (BackendArg::Sim, ClockArg::Virtual) => ExperimentBackend::Sim(SimClock::Virtual {
            eval_cost: ms(a.eval_cost_us / 1e3)?,
        }),
        (BackendArg::Socket, ClockArg::Real) => ExperimentBackend::Socket,
        (BackendArg::Socket, ClockArg::Virtual) => return Err("--clock virtual needs --backend sim".into()),
    };
    let mut cfg = ExperimentConfig::new(instance, a.nodes.clone(), a.runs, backend);
    cfg.ea = EaParams {
        population_size: a.pop,
        tournament_k: a.k,
        p_crossover: a.pc,
        p_mutation: a.pm,
        max_evaluations: a.budget,
    };
    cfg.link = LinkModel {
        latency: ms(a.latency_ms)?,
        bandwidth: a.bandwidth_bps,
        jitter: ms(a.jitter_ms)?,
        loss_probability: a.loss,
    };
    cfg.base_seed = a.seed;
    Ok(cfg)
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{:>6} {:>5} {:>12} {:>12} {:>12} {:>10}",
        "nodes", "runs", "mbf", "sd", "time_s", "speedup"
    );
    let f = |x: Option<f64>| x.map(format_sig6).unwrap_or_else(|| "-".into());
    for s in &report.summary {
        println!(
            "{:>6} {:>5} {:>12} {:>12} {:>12} {:>10}",
            s.nodes,
            s.completed_runs,
            f(s.mbf),
            f(s.fitness_sd),
            f(s.mean_time),
            f(s.speedup)
        );
    }
    for t in &report.t_tests {
        match &t.result {
            Ok((t_stat, dof)) => println!(
                "welch t {} vs {} nodes: t = {}, dof = {}",
                t.nodes_a,
                t.nodes_b,
                format_sig6(*t_stat),
                format_sig6(*dof)
            ),
            Err(e) => println!("welch t {} vs {} nodes: {e}", t.nodes_a, t.nodes_b),
        }
    }
    let failed = report.runs.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        println!("{failed} run(s) failed and are left empty in runs.csv");
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run(args) => {
            let cfg = experiment_config(&args)?;
            let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
            emit_csv(&report, &args.out).map_err(|e| e.to_string())?;
            print_report(&report);
            println!("wrote {}", args.out.display());
        }
        Command::Oracle { instance } => {
            let inst = TspInstance::from_file(&instance).map_err(|e| format!("{}: {e}", instance.display()))?;
            let (tour, len) = brute_force_optimum(&inst).map_err(|e| e.to_string())?;
            println!("{len}");
            let cities: Vec<String> = tour.cities().iter().map(|c| (c + 1).to_string()).collect();
            println!("{}", cities.join(" "));
        }
        Command::VerifyWire => {
            let mut ok = true;
            for (name, res) in golden::verify() {
                match res {
                    Ok(()) => println!("ok   {name}"),
                    Err(e) => {
                        ok = false;
                        println!("FAIL {name}: {e}");
                    }
                }
            }
            if !ok {
                return Err("wire vectors failed".into());
            }
        }
        Command::Node { config, report } => {
            let cfg = NodeConfigFile::load(&config)
                .and_then(NodeConfigFile::into_node_config)
                .map_err(|e| e.to_string())?;
            let rep = run_node(cfg).map_err(|e| e.to_string())?;
            let json = serde_json::to_string_pretty(&rep).map_err(|e| e.to_string())?;
            match report {
                Some(p) => std::fs::write(&p, json).map_err(|e| format!("{}: {e}", p.display()))?,
                None => println!("{json}"),
            }
        }
        Command::GenInstance {
            cities,
            seed,
            side,
            out,
        } => {
            let inst = TspInstance::random(cities, side, &mut RngStream::new(seed, 0)).map_err(|e| e.to_string())?;
            std::fs::write(&out, inst.to_tsplib()).map_err(|e| format!("{}: {e}", out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
