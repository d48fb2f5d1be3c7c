//! One node: a population of evolvable agents around a shared blackboard,
//! plus the gossip scheduler.
//!
//! Each agent repeatedly selects two parents by tournament from the
//! blackboard pool, recombines and mutates them, evaluates the child, offers
//! it as the node's best, and keeps it only if it beats the agent's own
//! solution. All agents draw evaluations from one shared [`BudgetGate`].

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackboard::{Address, AgentId, BestEvent, Blackboard};
use crate::clock::{Clock, SystemClock};
use crate::operators::{tournament_select, vary, EaParams, OperatorError, RngStream};
use crate::scheduler::{NodeInbox, Scheduler, SchedulerConfig, SchedulerError, SchedulerStats, TickSample};
use crate::transport::sim::{LinkModel, SimHub};
use crate::transport::socket::SocketTransport;
use crate::transport::{Inbox, Transport, TransportError};
use crate::tsp::{Solution, Tour, TspError, TspInstance};

/// Stream id of the scheduler's random stream; agent `i` uses `i + 1`.
pub const SCHEDULER_STREAM: u64 = 0;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid node configuration: {0}")]
    Config(String),
    #[error("transport initialisation failed: {0}")]
    TransportInitFailed(#[source] TransportError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Tsp(#[from] TspError),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("agent thread panicked")]
    AgentPanicked,
}

/// Shared evaluation budget. `claim` never overdraws: once `quota` claims
/// have succeeded every further claim fails.
#[derive(Debug)]
pub struct BudgetGate {
    quota: u64,
    used: AtomicU64,
}

impl BudgetGate {
    pub fn new(quota: u64) -> Self {
        Self {
            quota,
            used: AtomicU64::new(0),
        }
    }

    pub fn claim(&self) -> bool {
        self.used
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |u| {
                (u < self.quota).then_some(u + 1)
            })
            .is_ok()
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Acquire)
    }

    pub fn quota(&self) -> u64 {
        self.quota
    }

    pub fn exhausted(&self) -> bool {
        self.used() >= self.quota
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Evaluated { improved: bool },
    BudgetExhausted,
}

/// An evolvable agent: owns one solution and a private random stream.
#[derive(Debug)]
pub struct Agent {
    id: AgentId,
    current: Arc<Solution>,
    rng: RngStream,
}

impl Agent {
    /// Creates a random, evaluated agent and registers it. Returns `None`
    /// when the budget cannot pay for the initial evaluation.
    pub fn spawn(
        blackboard: &Blackboard,
        instance: &TspInstance,
        mut rng: RngStream,
        gate: &BudgetGate,
    ) -> Option<Self> {
        if !gate.claim() {
            return None;
        }
        let tour = instance.random_tour(&mut rng);
        let current = Arc::new(instance.evaluate(tour).expect("random tour matches the instance"));
        blackboard.add_evaluations(1);
        let id = blackboard.register_agent(current.clone());
        Some(Self { id, current, rng })
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn current(&self) -> &Arc<Solution> {
        &self.current
    }

    /// Replaces the agent's solution from outside the evolutionary loop.
    pub fn adopt(&mut self, blackboard: &Blackboard, solution: Arc<Solution>) {
        self.current = solution.clone();
        blackboard
            .commit_solution(self.id, solution)
            .expect("agent is registered on its blackboard");
    }

    /// One generation: select, vary, evaluate, replace.
    pub fn step(
        &mut self,
        blackboard: &Blackboard,
        instance: &TspInstance,
        params: &EaParams,
        gate: &BudgetGate,
    ) -> Result<StepOutcome, NodeError> {
        if !gate.claim() {
            return Ok(StepOutcome::BudgetExhausted);
        }
        let pool = blackboard
            .read_pool(self.id)
            .expect("agent is registered on its blackboard");
        let child = if pool.is_empty() {
            vary((&self.current.tour, &self.current.tour), params, &mut self.rng)?
        } else {
            let (a, b) = tournament_select(&pool, params.tournament_k, &mut self.rng)?;
            vary((&a.tour, &b.tour), params, &mut self.rng)?
        };
        let child = Arc::new(instance.evaluate(child)?);
        blackboard.add_evaluations(1);
        blackboard.try_improve_best(child.clone());
        let improved = child.fitness < self.current.fitness;
        if improved {
            self.current = child.clone();
            blackboard
                .commit_solution(self.id, child)
                .expect("agent is registered on its blackboard");
        }
        Ok(StepOutcome::Evaluated { improved })
    }
}

/// Runs an agent until the budget is exhausted or `stop` is raised.
/// Returns the number of evaluations it performed.
pub fn run_agent(
    agent: &mut Agent,
    blackboard: &Blackboard,
    instance: &TspInstance,
    params: &EaParams,
    gate: &BudgetGate,
    stop: &AtomicBool,
) -> Result<u64, NodeError> {
    let mut evaluations = 0;
    while !stop.load(Ordering::Relaxed) {
        match agent.step(blackboard, instance, params, gate)? {
            StepOutcome::Evaluated { .. } => evaluations += 1,
            StepOutcome::BudgetExhausted => break,
        }
    }
    Ok(evaluations)
}

/// How a node reaches its peers.
pub enum Backend {
    /// In-process simulated network driven in real time.
    Simulated(SimHub),
    /// TCP. Uses `listener` if given, otherwise binds the node address.
    Socket { listener: Option<TcpListener> },
    /// Driven by a [`crate::cluster::VirtualCluster`] on simulated time.
    Virtual,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Simulated(_) => f.write_str("Simulated"),
            Backend::Socket { .. } => f.write_str("Socket"),
            Backend::Virtual => f.write_str("Virtual"),
        }
    }
}

#[derive(Debug)]
pub struct NodeConfig {
    pub address: Address,
    pub peers: Vec<Address>,
    pub instance: Arc<TspInstance>,
    pub ea: EaParams,
    pub agents_on_node: usize,
    pub eval_quota: u64,
    pub seed: u64,
    pub backend: Backend,
    pub scheduler: SchedulerConfig,
    /// Record every best-fitness check on the blackboard.
    pub event_log: bool,
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), NodeError> {
        if self.agents_on_node == 0 {
            return Err(NodeError::Config("agents_on_node must be at least 1".into()));
        }
        if self.eval_quota < self.agents_on_node as u64 {
            return Err(NodeError::Config(format!(
                "eval_quota {} cannot pay for {} initial evaluations",
                self.eval_quota, self.agents_on_node
            )));
        }
        if self.peers.contains(&self.address) {
            return Err(NodeError::Config(format!(
                "address {} is listed as its own peer",
                self.address
            )));
        }
        self.ea.validate()?;
        self.scheduler.validate()?;
        Ok(())
    }
}

/// Outcome of one node's run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeReport {
    pub address: Address,
    pub best_tour: Tour,
    pub best_fitness: u64,
    pub evaluations_used: u64,
    pub eval_quota: u64,
    #[serde(with = "secs")]
    pub wall_time: Duration,
    /// `delta_t` sampled at most once per second.
    pub delta_t_trace: Vec<TickSample>,
    pub ticks: usize,
    pub stats: SchedulerStats,
    pub cache_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_events: Option<Vec<BestEvent>>,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

/// Keeps the first sample of every whole second.
pub fn per_second(ticks: &[TickSample]) -> Vec<TickSample> {
    let mut out: Vec<TickSample> = Vec::new();
    for t in ticks {
        if out.last().is_none_or(|l| t.at.as_secs() > l.at.as_secs()) {
            out.push(*t);
        }
    }
    out
}

pub(crate) fn build_report(
    blackboard: &Blackboard,
    scheduler: &Scheduler,
    gate: &BudgetGate,
    wall_time: Duration,
) -> NodeReport {
    let best = blackboard.best().expect("a node always has at least one agent");
    let ticks = scheduler.ticks();
    NodeReport {
        address: blackboard.local_address().clone(),
        best_tour: best.tour.clone(),
        best_fitness: best.fitness,
        evaluations_used: gate.used(),
        eval_quota: gate.quota(),
        wall_time,
        delta_t_trace: per_second(&ticks),
        ticks: ticks.len(),
        stats: scheduler.stats(),
        cache_size: blackboard.cache_len(),
        best_events: blackboard.event_log(),
    }
}

pub(crate) fn new_blackboard(config: &NodeConfig) -> Blackboard {
    let dim = config.instance.dimension();
    if config.event_log {
        Blackboard::with_event_log(config.address.clone(), dim)
    } else {
        Blackboard::new(config.address.clone(), dim)
    }
}

/// A running node. [`NodeHandle::join`] waits for the evaluation quota to be
/// consumed; [`NodeHandle::stop`] ends the run early.
pub struct NodeHandle {
    blackboard: Arc<Blackboard>,
    scheduler: Arc<Scheduler>,
    gate: Arc<BudgetGate>,
    stop_agents: Arc<AtomicBool>,
    stop_scheduler: Option<mpsc::Sender<()>>,
    agents: Vec<JoinHandle<Result<u64, NodeError>>>,
    scheduler_thread: Option<JoinHandle<()>>,
    transport: Option<Arc<dyn Transport>>,
    started: Instant,
}

impl NodeHandle {
    pub fn blackboard(&self) -> &Arc<Blackboard> {
        &self.blackboard
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    pub fn address(&self) -> &Address {
        self.blackboard.local_address()
    }

    /// Asks agents to finish their current step and exit.
    pub fn stop(&self) {
        self.stop_agents.store(true, Ordering::Relaxed);
    }

    pub fn join(mut self) -> Result<NodeReport, NodeError> {
        let mut result = Ok(());
        for a in self.agents.drain(..) {
            match a.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => result = Err(e),
                Err(_) => result = Err(NodeError::AgentPanicked),
            }
        }
        let wall_time = self.started.elapsed();
        self.shutdown_scheduler();
        result?;
        Ok(build_report(&self.blackboard, &self.scheduler, &self.gate, wall_time))
    }

    fn shutdown_scheduler(&mut self) {
        self.stop_scheduler.take();
        if let Some(t) = self.scheduler_thread.take() {
            let _ = t.join();
        }
        self.transport.take();
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        self.stop();
        for a in self.agents.drain(..) {
            let _ = a.join();
        }
        self.shutdown_scheduler();
    }
}

/// Starts transport, agents and scheduler on background threads.
pub fn start_node(config: NodeConfig) -> Result<NodeHandle, NodeError> {
    config.validate()?;
    let started = Instant::now();
    let blackboard = Arc::new(new_blackboard(&config));
    let scheduler = Arc::new(Scheduler::new(
        config.address.clone(),
        config.peers.clone(),
        config.scheduler.clone(),
    )?);

    let (transport, clock): (Arc<dyn Transport>, Arc<dyn Clock>) = match config.backend {
        Backend::Simulated(hub) => {
            let clock: Arc<dyn Clock> = Arc::new(hub.clock());
            let inbox = node_inbox(&blackboard, &scheduler, &clock);
            let ep = hub
                .attach(config.address.clone(), inbox)
                .map_err(NodeError::TransportInitFailed)?;
            (Arc::new(ep), clock)
        }
        Backend::Socket { listener } => {
            let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
            let inbox = node_inbox(&blackboard, &scheduler, &clock);
            let t = match listener {
                Some(l) => SocketTransport::from_listener(l, inbox),
                None => SocketTransport::bind(config.address.as_str(), inbox),
            }
            .map_err(NodeError::TransportInitFailed)?;
            if t.local_address() != &config.address {
                return Err(NodeError::Config(format!(
                    "listener address {} differs from node address {}",
                    t.local_address(),
                    config.address
                )));
            }
            (Arc::new(t), clock)
        }
        Backend::Virtual => {
            return Err(NodeError::Config(
                "virtual-clock nodes run inside a VirtualCluster".into(),
            ))
        }
    };

    let gate = Arc::new(BudgetGate::new(config.eval_quota));
    let stop_agents = Arc::new(AtomicBool::new(false));
    let instance = config.instance.clone();
    // Every initial evaluation is paid for before any agent starts evolving.
    let spawned: Vec<Agent> = (0..config.agents_on_node)
        .map(|i| {
            let rng = RngStream::new(config.seed, i as u64 + 1);
            Agent::spawn(&blackboard, &instance, rng, &gate).expect("quota covers initial evaluations")
        })
        .collect();
    let mut agents = Vec::with_capacity(config.agents_on_node);
    for (i, mut agent) in spawned.into_iter().enumerate() {
        let (bb, inst, ea, g, stop) = (
            blackboard.clone(),
            instance.clone(),
            config.ea.clone(),
            gate.clone(),
            stop_agents.clone(),
        );
        agents.push(
            thread::Builder::new()
                .name(format!("agent-{}-{i}", config.address))
                .spawn(move || run_agent(&mut agent, &bb, &inst, &ea, &g, &stop))
                .expect("spawn agent thread"),
        );
    }

    let (stop_tx, stop_rx) = mpsc::channel();
    let sched_thread = {
        let (s, bb, t) = (scheduler.clone(), blackboard.clone(), transport.clone());
        let rng = RngStream::new(config.seed, SCHEDULER_STREAM);
        thread::Builder::new()
            .name(format!("scheduler-{}", config.address))
            .spawn(move || scheduler_loop(&s, &bb, t.as_ref(), clock.as_ref(), rng, &stop_rx))
            .expect("spawn scheduler thread")
    };

    Ok(NodeHandle {
        blackboard,
        scheduler,
        gate,
        stop_agents,
        stop_scheduler: Some(stop_tx),
        agents,
        scheduler_thread: Some(sched_thread),
        transport: Some(transport),
        started,
    })
}

fn node_inbox(blackboard: &Arc<Blackboard>, scheduler: &Arc<Scheduler>, clock: &Arc<dyn Clock>) -> Arc<dyn Inbox> {
    Arc::new(NodeInbox {
        blackboard: blackboard.clone(),
        scheduler: scheduler.clone(),
        clock: clock.clone(),
    })
}

/// Sleep `delta_t`, gossip once, repeat, until `stop` fires or is dropped.
pub fn scheduler_loop(
    scheduler: &Scheduler,
    blackboard: &Blackboard,
    transport: &dyn Transport,
    clock: &dyn Clock,
    mut rng: RngStream,
    stop: &mpsc::Receiver<()>,
) {
    loop {
        match stop.recv_timeout(scheduler.delta_t()) {
            Err(RecvTimeoutError::Timeout) => {}
            _ => return,
        }
        let now = clock.now();
        scheduler.reap_timeouts(now);
        match scheduler.tick(blackboard, &mut rng, now) {
            Ok(out) => {
                if let Err(e) = transport.send(&out.to, &out.msg) {
                    log::debug!("{}: send to {} failed: {e}", scheduler.local_address(), out.to);
                    scheduler.handle_timeout(out.msg.ping_id(), now);
                }
            }
            Err(SchedulerError::NoPeers) => {
                // Single node: nothing to gossip, wait for shutdown.
                let _ = stop.recv();
                return;
            }
            Err(e) => log::warn!("{}: {e}", scheduler.local_address()),
        }
        if let Some(last) = scheduler.ticks().last() {
            log::trace!("{} dt={:?} at {:?}", scheduler.local_address(), last.delta_t, last.at);
        }
    }
}

/// Runs one node to completion.
pub fn run_node(config: NodeConfig) -> Result<NodeReport, NodeError> {
    start_node(config)?.join()
}

/// Splits `total` into `parts` shares that differ by at most one, larger
/// shares first.
pub fn split_evenly(total: u64, parts: usize) -> Vec<u64> {
    let parts = parts as u64;
    (0..parts)
        .map(|i| total / parts + u64::from(i < total % parts))
        .collect()
}

/// Node configuration file (TOML).
///
/// ```toml
/// address = "127.0.0.1:7001"
/// peers = ["127.0.0.1:7002", "127.0.0.1:7003"]
/// instance = "lin318.tsp"
/// agents_on_node = 11
/// eval_quota = 333334
/// seed = 42
/// backend = "socket"          # or "sim" (single node only)
/// event_log = false
///
/// [ea]
/// population_size = 32
/// tournament_k = 7
/// p_crossover = 0.7
/// p_mutation = 0.1
/// max_evaluations = 1000000
///
/// [scheduler]                 # milliseconds
/// initial_delta_t = 1000
/// delta_t_min = 10
/// delta_t_max = 10000
/// timeout_factor = 4
/// timeout_floor = 1000
///
/// [link]                      # sim backend only
/// latency = 0.1               # ms
/// bandwidth = 125000000.0     # bytes/s
/// jitter = 0.0                # ms
/// loss_probability = 0.0
/// ```
///
/// A relative `instance` path is resolved against the file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfigFile {
    pub address: String,
    #[serde(default)]
    pub peers: Vec<String>,
    pub instance: PathBuf,
    pub agents_on_node: usize,
    pub eval_quota: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub event_log: bool,
    #[serde(default)]
    pub ea: EaParams,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub link: LinkModel,
}

fn default_backend() -> String {
    "socket".into()
}

impl NodeConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, NodeError> {
        toml::from_str(text).map_err(|e| NodeError::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, NodeError> {
        let text = std::fs::read_to_string(path).map_err(|source| NodeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        if cfg.instance.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.instance = dir.join(&cfg.instance);
            }
        }
        Ok(cfg)
    }

    pub fn into_node_config(self) -> Result<NodeConfig, NodeError> {
        let instance = Arc::new(TspInstance::from_file(&self.instance)?);
        let backend = match self.backend.as_str() {
            "socket" => Backend::Socket { listener: None },
            "sim" => {
                if !self.peers.is_empty() {
                    return Err(NodeError::Config(
                        "the sim backend in a node file supports a single node; use `run --backend sim` for networks"
                            .into(),
                    ));
                }
                Backend::Simulated(SimHub::new(self.link, self.seed).map_err(NodeError::TransportInitFailed)?)
            }
            other => return Err(NodeError::Config(format!("unknown backend `{other}`"))),
        };
        Ok(NodeConfig {
            address: Address::new(self.address),
            peers: self.peers.into_iter().map(Address::new).collect(),
            instance,
            ea: self.ea,
            agents_on_node: self.agents_on_node,
            eval_quota: self.eval_quota,
            seed: self.seed,
            backend,
            scheduler: self.scheduler,
            event_log: self.event_log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsp::brute_force_optimum;

    fn instance(n: usize, seed: u64) -> Arc<TspInstance> {
        Arc::new(TspInstance::random(n, 1000.0, &mut RngStream::new(seed, 0)).unwrap())
    }

    fn single(instance: Arc<TspInstance>, agents: usize, quota: u64, seed: u64) -> NodeConfig {
        NodeConfig {
            address: "solo".into(),
            peers: vec![],
            instance,
            ea: EaParams::default(),
            agents_on_node: agents,
            eval_quota: quota,
            seed,
            backend: Backend::Simulated(SimHub::default()),
            scheduler: SchedulerConfig::default(),
            event_log: true,
        }
    }

    #[test]
    fn gate_never_overdraws() {
        let gate = Arc::new(BudgetGate::new(10_000));
        let granted = AtomicU64::new(0);
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    while gate.claim() {
                        granted.fetch_add(1, Ordering::Relaxed);
                    }
                });
            }
        });
        assert_eq!(granted.load(Ordering::Relaxed), 10_000);
        assert_eq!(gate.used(), 10_000);
        assert!(!gate.claim());
    }

    #[test]
    fn budget_of_one_evaluates_once() {
        let inst = instance(8, 1);
        let bb = Blackboard::new("n".into(), 8);
        let init = BudgetGate::new(1);
        let mut agent = Agent::spawn(&bb, &inst, RngStream::new(1, 1), &init).unwrap();
        let gate = BudgetGate::new(1);
        let n = run_agent(
            &mut agent,
            &bb,
            &inst,
            &EaParams::default(),
            &gate,
            &AtomicBool::new(false),
        )
        .unwrap();
        assert_eq!(n, 1);
        assert_eq!(bb.evaluations(), 2);
    }

    #[test]
    fn no_variation_means_no_change() {
        let inst = instance(10, 2);
        let bb = Blackboard::new("n".into(), 10);
        let init = BudgetGate::new(3);
        let mut agents: Vec<Agent> = (0..3)
            .map(|i| Agent::spawn(&bb, &inst, RngStream::new(2, i + 1), &init).unwrap())
            .collect();
        let before: Vec<Tour> = agents.iter().map(|a| a.current().tour.clone()).collect();
        let best_before = bb.best().unwrap().fitness;
        let params = EaParams {
            p_crossover: 0.0,
            p_mutation: 0.0,
            ..EaParams::default()
        };
        let gate = BudgetGate::new(600);
        for _ in 0..200 {
            for a in agents.iter_mut() {
                assert!(matches!(
                    a.step(&bb, &inst, &params, &gate).unwrap(),
                    StepOutcome::Evaluated { .. }
                ));
                // Children are copies of existing tours, so nothing new can appear.
                assert!(before.contains(&a.current().tour));
            }
        }
        assert_eq!(bb.best().unwrap().fitness, best_before);
        assert!(agents.iter().all(|a| a.current().fitness == best_before));
    }

    #[test]
    fn lone_agent_without_variation_keeps_its_solution() {
        let inst = instance(10, 4);
        let bb = Blackboard::new("n".into(), 10);
        let gate = BudgetGate::new(101);
        let mut agent = Agent::spawn(&bb, &inst, RngStream::new(4, 1), &gate).unwrap();
        let before = agent.current().clone();
        let params = EaParams {
            p_crossover: 0.0,
            p_mutation: 0.0,
            ..EaParams::default()
        };
        for _ in 0..100 {
            assert_eq!(
                agent.step(&bb, &inst, &params, &gate).unwrap(),
                StepOutcome::Evaluated { improved: false }
            );
        }
        assert!(Arc::ptr_eq(agent.current(), &before));
        assert_eq!(
            agent.step(&bb, &inst, &params, &gate).unwrap(),
            StepOutcome::BudgetExhausted
        );
    }

    #[test]
    fn current_fitness_never_worsens() {
        let inst = instance(30, 3);
        let bb = Blackboard::new("n".into(), 30);
        let init = BudgetGate::new(4);
        let mut agents: Vec<Agent> = (0..4)
            .map(|i| Agent::spawn(&bb, &inst, RngStream::new(3, i + 1), &init).unwrap())
            .collect();
        let gate = BudgetGate::new(4000);
        let mut last: Vec<u64> = agents.iter().map(|a| a.current().fitness).collect();
        'outer: loop {
            for (a, l) in agents.iter_mut().zip(last.iter_mut()) {
                if a.step(&bb, &inst, &EaParams::default(), &gate).unwrap() == StepOutcome::BudgetExhausted {
                    break 'outer;
                }
                assert!(a.current().fitness <= *l);
                *l = a.current().fitness;
            }
        }
        assert!(bb.best().unwrap().fitness <= *last.iter().min().unwrap());
    }

    #[test]
    fn single_node_finds_small_optimum_and_spends_quota_exactly() {
        let inst = instance(9, 4);
        let (_, opt) = brute_force_optimum(&inst).unwrap();
        let report = run_node(single(inst.clone(), 32, 20_000, 4)).unwrap();
        assert_eq!(report.evaluations_used, 20_000);
        assert_eq!(report.best_fitness, opt);
        assert_eq!(inst.tour_length(&report.best_tour).unwrap(), report.best_fitness);
        assert_eq!(report.ticks, 0);
        let events = report.best_events.unwrap();
        assert!(events.len() >= 20_000);
        assert!(events.windows(2).all(|w| w[1].best_after <= w[0].best_after));
    }

    #[test]
    fn config_validation() {
        let inst = instance(5, 5);
        let mut c = single(inst.clone(), 0, 10, 0);
        assert!(c.validate().is_err());
        c.agents_on_node = 4;
        c.eval_quota = 3;
        assert!(c.validate().is_err());
        c.eval_quota = 4;
        c.peers = vec!["solo".into()];
        assert!(c.validate().is_err());
        c.peers.clear();
        assert!(c.validate().is_ok());
        c.backend = Backend::Virtual;
        assert!(matches!(start_node(c), Err(NodeError::Config(_))));
    }

    #[test]
    fn splits_are_exact() {
        assert_eq!(split_evenly(32, 3), vec![11, 11, 10]);
        assert_eq!(split_evenly(1_000_000, 4), vec![250_000; 4]);
        for (total, parts) in [(10_001u64, 4usize), (7, 7), (100, 6)] {
            let s = split_evenly(total, parts);
            assert_eq!(s.iter().sum::<u64>(), total);
            assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn per_second_sampling() {
        let t = |ms: u64| TickSample {
            at: Duration::from_millis(ms),
            delta_t: Duration::from_millis(ms),
        };
        let ticks = [t(100), t(900), t(1000), t(1500), t(3200)];
        let s = per_second(&ticks);
        assert_eq!(s, vec![t(100), t(1000), t(3200)]);
    }

    #[test]
    fn config_file_parses() {
        let text = r#"
address = "127.0.0.1:7001"
peers = ["127.0.0.1:7002"]
instance = "x.tsp"
agents_on_node = 16
eval_quota = 500000
seed = 9

[ea]
tournament_k = 5

[scheduler]
delta_t_min = 20
"#;
        let cfg = NodeConfigFile::parse(text, Path::new("n.toml")).unwrap();
        assert_eq!(cfg.backend, "socket");
        assert_eq!(cfg.ea.tournament_k, 5);
        assert_eq!(cfg.ea.population_size, 32);
        assert_eq!(cfg.scheduler.delta_t_min, Duration::from_millis(20));
        assert_eq!(cfg.scheduler.delta_t_max, Duration::from_secs(10));
        assert!(NodeConfigFile::parse("address = 1", Path::new("n.toml")).is_err());
        assert!(NodeConfigFile::parse(&format!("bogus = 1\n{text}"), Path::new("n.toml")).is_err());
    }
}
