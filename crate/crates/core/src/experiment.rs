//! Multi-run experiments over node counts: per-run best fitness and time,
//! mean best fitness, speedup against the single-node time, Welch t
//! statistics between node counts, and CSV output.

use std::fmt::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::blackboard::Address;
use crate::cluster::VirtualCluster;
use crate::node::{split_evenly, start_node, Backend, NodeConfig, NodeError, NodeHandle, NodeReport};
use crate::operators::EaParams;
use crate::scheduler::SchedulerConfig;
use crate::transport::sim::{LinkModel, SimHub};
use crate::tsp::TspInstance;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    DestinationUnwritable { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least two values per sample, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("both samples have zero variance")]
    DegenerateVariance,
}

/// How simulated nodes experience time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimClock {
    /// Threads, real sleeps and real delivery delays.
    Real,
    /// Single-threaded discrete-event run; each evaluation costs `eval_cost`
    /// of simulated time on its node.
    Virtual { eval_cost: Duration },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentBackend {
    Sim(SimClock),
    /// Loopback TCP, all nodes of a run inside this process.
    Socket,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub instance: Arc<TspInstance>,
    pub node_counts: Vec<usize>,
    pub runs: usize,
    /// `population_size` is the total over all nodes and `max_evaluations`
    /// the total budget of one run.
    pub ea: EaParams,
    pub backend: ExperimentBackend,
    pub link: LinkModel,
    pub scheduler: SchedulerConfig,
    pub base_seed: u64,
}

impl ExperimentConfig {
    pub fn new(instance: Arc<TspInstance>, node_counts: Vec<usize>, runs: usize, backend: ExperimentBackend) -> Self {
        Self {
            instance,
            node_counts,
            runs,
            ea: EaParams::default(),
            backend,
            link: LinkModel::default(),
            scheduler: SchedulerConfig::default(),
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.node_counts.is_empty() {
            return bad("no node counts given".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        self.ea.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.scheduler
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.link
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for &n in &self.node_counts {
            if n == 0 {
                return bad("node counts must be at least 1".into());
            }
            if n > self.ea.population_size {
                return bad(format!(
                    "{n} nodes cannot share a population of {}",
                    self.ea.population_size
                ));
            }
            // The smallest node quota must pay for the largest node population.
            let min_quota = self.ea.max_evaluations / n as u64;
            let max_agents = self.ea.population_size.div_ceil(n) as u64;
            if min_quota < max_agents {
                return bad(format!(
                    "budget {} is too small for {} agents on {n} nodes",
                    self.ea.max_evaluations, self.ea.population_size
                ));
            }
        }
        if let ExperimentBackend::Sim(SimClock::Virtual { eval_cost }) = self.backend {
            if eval_cost.is_zero() {
                return bad("eval_cost must be positive".into());
            }
        }
        Ok(())
    }
}

/// One run at one node count. `best_fitness` and `wall_time` are `None` when
/// the run could not be carried out.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub nodes: usize,
    pub run: usize,
    pub seed: u64,
    pub best_fitness: Option<u64>,
    pub wall_time: Option<Duration>,
    pub node_reports: Vec<NodeReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeCountSummary {
    pub nodes: usize,
    pub completed_runs: usize,
    pub mbf: Option<f64>,
    pub fitness_sd: Option<f64>,
    /// Seconds.
    pub mean_time: Option<f64>,
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseT {
    pub nodes_a: usize,
    pub nodes_b: usize,
    pub result: Result<(f64, f64), StatsError>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<NodeCountSummary>,
    pub t_tests: Vec<PairwiseT>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run` at `nodes` nodes.
pub fn run_seed(base_seed: u64, nodes: usize, run: usize) -> u64 {
    base_seed.wrapping_add(splitmix64(splitmix64(nodes as u64) ^ run as u64))
}

/// Seed of node `index` within a run.
pub fn node_seed(run_seed: u64, index: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64(index as u64))
}

/// Fully connected configs for `n` nodes. Quotas and populations are split
/// as evenly as possible, larger shares first.
pub fn node_configs(
    config: &ExperimentConfig,
    addresses: &[Address],
    seed: u64,
    mut backend: impl FnMut(usize) -> Backend,
) -> Vec<NodeConfig> {
    let n = addresses.len();
    let pops = split_evenly(config.ea.population_size as u64, n);
    let quotas = split_evenly(config.ea.max_evaluations, n);
    addresses
        .iter()
        .enumerate()
        .map(|(i, a)| NodeConfig {
            address: a.clone(),
            peers: addresses.iter().filter(|p| *p != a).cloned().collect(),
            instance: config.instance.clone(),
            ea: config.ea.clone(),
            agents_on_node: pops[i] as usize,
            eval_quota: quotas[i],
            seed: node_seed(seed, i),
            backend: backend(i),
            scheduler: config.scheduler.clone(),
            event_log: false,
        })
        .collect()
}

fn sim_addresses(n: usize) -> Vec<Address> {
    (0..n).map(|i| Address::new(format!("node-{i}"))).collect()
}

fn join_all(handles: Vec<NodeHandle>) -> Result<Vec<NodeReport>, NodeError> {
    let mut reports = Vec::with_capacity(handles.len());
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(r) => reports.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

/// Starts every config; if one fails the already started nodes are stopped.
fn start_all(configs: Vec<NodeConfig>) -> Result<Vec<NodeReport>, NodeError> {
    let mut handles = Vec::with_capacity(configs.len());
    for c in configs {
        match start_node(c) {
            Ok(h) => handles.push(h),
            Err(e) => {
                for h in &handles {
                    h.stop();
                }
                drop(handles);
                return Err(e);
            }
        }
    }
    join_all(handles)
}

/// Runs `n` nodes once with the configured backend.
pub fn run_once(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<NodeReport>, NodeError> {
    match config.backend {
        ExperimentBackend::Sim(SimClock::Real) => {
            let hub = SimHub::new(config.link, seed).map_err(NodeError::TransportInitFailed)?;
            let configs = node_configs(config, &sim_addresses(n), seed, |_| Backend::Simulated(hub.clone()));
            start_all(configs)
        }
        ExperimentBackend::Sim(SimClock::Virtual { eval_cost }) => {
            let configs = node_configs(config, &sim_addresses(n), seed, |_| Backend::Virtual);
            VirtualCluster::run_to_completion(configs, config.link, seed, eval_cost)
        }
        ExperimentBackend::Socket => {
            let mut listeners = Vec::with_capacity(n);
            for _ in 0..n {
                let l = TcpListener::bind("127.0.0.1:0").map_err(|e| {
                    NodeError::TransportInitFailed(crate::transport::TransportError::BindFailed(
                        "127.0.0.1:0".into(),
                        e,
                    ))
                })?;
                listeners.push(Some(l));
            }
            let addresses: Vec<Address> = listeners
                .iter()
                .map(|l| Address::new(l.as_ref().unwrap().local_addr().unwrap().to_string()))
                .collect();
            let configs = node_configs(config, &addresses, seed, |i| Backend::Socket {
                listener: listeners[i].take(),
            });
            start_all(configs)
        }
    }
}

/// Runs every (node count, run) pair sequentially and aggregates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.node_counts.len() * config.runs);
    for &n in &config.node_counts {
        for r in 0..config.runs {
            let seed = run_seed(config.base_seed, n, r);
            let record = match run_once(config, n, seed) {
                Ok(reports) => {
                    let best = reports.iter().map(|x| x.best_fitness).min();
                    let time = reports.iter().map(|x| x.wall_time).max();
                    log::info!("n={n} run={r} best={best:?} time={time:?}");
                    RunRecord {
                        nodes: n,
                        run: r,
                        seed,
                        best_fitness: best,
                        wall_time: time,
                        node_reports: reports,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("n={n} run={r} failed: {e}");
                    RunRecord {
                        nodes: n,
                        run: r,
                        seed,
                        best_fitness: None,
                        wall_time: None,
                        node_reports: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(record);
        }
    }
    Ok(aggregate(&config.node_counts, runs))
}

/// Builds summaries and pairwise t statistics from run records.
pub fn aggregate(node_counts: &[usize], runs: Vec<RunRecord>) -> ExperimentReport {
    let fitness_of = |n: usize| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.nodes == n)
            .filter_map(|r| r.best_fitness.map(|f| f as f64))
            .collect()
    };
    let mean_time = |n: usize| -> Option<f64> {
        let ts: Vec<f64> = runs
            .iter()
            .filter(|r| r.nodes == n)
            .filter_map(|r| r.wall_time.map(|t| t.as_secs_f64()))
            .collect();
        mean(&ts).ok()
    };
    let t1 = mean_time(1);
    let summary = node_counts
        .iter()
        .map(|&n| {
            let f = fitness_of(n);
            let tn = mean_time(n);
            NodeCountSummary {
                nodes: n,
                completed_runs: f.len(),
                mbf: mean_best_fitness(&f).ok(),
                fitness_sd: sample_sd(&f),
                mean_time: tn,
                speedup: match (t1, tn) {
                    (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                    _ => None,
                },
            }
        })
        .collect();
    let mut t_tests = Vec::new();
    for (i, &a) in node_counts.iter().enumerate() {
        for &b in &node_counts[i + 1..] {
            t_tests.push(PairwiseT {
                nodes_a: a,
                nodes_b: b,
                result: welch_t(&fitness_of(a), &fitness_of(b)),
            });
        }
    }
    ExperimentReport { runs, summary, t_tests }
}

fn mean(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs).ok()?;
    Some(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
}

fn sample_sd(xs: &[f64]) -> Option<f64> {
    sample_variance(xs).map(f64::sqrt)
}

/// Arithmetic mean of best-fitness values.
pub fn mean_best_fitness(values: &[f64]) -> Result<f64, StatsError> {
    mean(values)
}

/// Welch's unequal-variance t statistic and its Welch-Satterthwaite degrees
/// of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples(a.len(), b.len()));
    }
    let (va, vb) = (sample_variance(a).unwrap(), sample_variance(b).unwrap());
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let t = (mean(a)? - mean(b)?) / (qa + qb).sqrt();
    let dof = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok((t, dof))
}

/// Six significant digits in plain decimal notation; non-finite values are
/// rendered as an empty field.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return String::new();
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    // `{:e}` does the rounding to six digits, including carries into a new
    // decade, so the exponent it reports is the final one.
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    let rounded: f64 = sci.parse().unwrap();
    let decimals = (5 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(format_sig6).unwrap_or_default()
}

pub fn runs_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("nodes,run,seed,best_fitness,wall_time_s\n");
    for r in &report.runs {
        let fit = r.best_fitness.map(|f| f.to_string()).unwrap_or_default();
        let time = opt_f64(r.wall_time.map(|t| t.as_secs_f64()));
        writeln!(s, "{},{},{},{fit},{time}", r.nodes, r.run, r.seed).unwrap();
    }
    s
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("nodes,mbf,fitness_sd,mean_time_s,speedup\n");
    for r in &report.summary {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.nodes,
            opt_f64(r.mbf),
            opt_f64(r.fitness_sd),
            opt_f64(r.mean_time),
            opt_f64(r.speedup)
        )
        .unwrap();
    }
    s
}

/// Writes `runs.csv` and `summary.csv` into `dir`, creating it if needed.
pub fn emit_csv(report: &ExperimentReport, dir: &Path) -> Result<(), ExperimentError> {
    let unwritable = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::DestinationUnwritable { path, source }
    };
    std::fs::create_dir_all(dir).map_err(unwritable(dir))?;
    for (name, body) in [("runs.csv", runs_csv(report)), ("summary.csv", summary_csv(report))] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(unwritable(&path))?;
    }
    Ok(())
}
