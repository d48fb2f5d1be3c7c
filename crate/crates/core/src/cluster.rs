//! Discrete-event execution of a whole network of nodes on simulated time.
//!
//! Every node is modelled as one processor that runs its agents round-robin,
//! one evaluation per `eval_cost` of simulated time. Scheduler ticks and
//! message deliveries are events on the same timeline, and the network is a
//! [`SimNetwork`]. Everything runs on the calling thread, so a run is a pure
//! function of its configuration and seeds.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use crate::blackboard::{Address, Blackboard};
use crate::clock::{Clock, ManualClock};
use crate::node::{
    build_report, new_blackboard, Agent, Backend, BudgetGate, NodeConfig, NodeError, NodeReport, StepOutcome,
    SCHEDULER_STREAM,
};
use crate::operators::{EaParams, RngStream};
use crate::scheduler::{NodeInbox, Scheduler, SchedulerError};
use crate::transport::sim::{LinkModel, ScheduledDelivery, SimNetwork};
use crate::transport::{encode_message, Inbox, Message};
use crate::tsp::{Solution, TspInstance};

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    Compute(usize),
    Tick(usize),
    Deliver(ScheduledDelivery),
}

#[derive(Debug, PartialEq, Eq)]
struct Event {
    at: Duration,
    seq: u64,
    kind: EventKind,
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// What a call to [`VirtualCluster::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Processed {
    Evaluation {
        node: usize,
    },
    Tick {
        node: usize,
    },
    Delivery {
        node: usize,
    },
    /// An event for a node that had already finished.
    Ignored,
}

struct VirtualNode {
    blackboard: Arc<Blackboard>,
    scheduler: Arc<Scheduler>,
    inbox: NodeInbox,
    agents: Vec<Agent>,
    next_agent: usize,
    gate: BudgetGate,
    instance: Arc<TspInstance>,
    ea: EaParams,
    rng: RngStream,
    finished_at: Option<Duration>,
}

pub struct VirtualCluster {
    clock: Arc<ManualClock>,
    net: SimNetwork,
    nodes: Vec<VirtualNode>,
    index: HashMap<Address, usize>,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    eval_cost: Duration,
}

impl VirtualCluster {
    /// `configs` must use [`Backend::Virtual`]. `eval_cost` is the simulated
    /// time one fitness evaluation takes on a node.
    pub fn new(
        configs: Vec<NodeConfig>,
        link: LinkModel,
        net_seed: u64,
        eval_cost: Duration,
    ) -> Result<Self, NodeError> {
        if eval_cost.is_zero() {
            return Err(NodeError::Config("eval_cost must be positive".into()));
        }
        let clock = Arc::new(ManualClock::new());
        let mut net = SimNetwork::new(link, net_seed).map_err(NodeError::TransportInitFailed)?;
        let mut nodes = Vec::with_capacity(configs.len());
        let mut index = HashMap::new();
        for cfg in &configs {
            if !matches!(cfg.backend, Backend::Virtual) {
                return Err(NodeError::Config(format!("node {} is not virtual", cfg.address)));
            }
            if index.insert(cfg.address.clone(), nodes.len()).is_some() {
                return Err(NodeError::Config(format!("duplicate address {}", cfg.address)));
            }
            nodes.push(Self::build_node(cfg, &clock)?);
            net.add_node(cfg.address.clone());
        }
        for cfg in &configs {
            if let Some(p) = cfg.peers.iter().find(|p| !index.contains_key(*p)) {
                return Err(NodeError::Config(format!(
                    "peer {p} of {} is not in the cluster",
                    cfg.address
                )));
            }
        }

        let mut cluster = Self {
            clock,
            net,
            nodes,
            index,
            queue: BinaryHeap::new(),
            seq: 0,
            eval_cost,
        };
        for (i, cfg) in configs.iter().enumerate() {
            // Initial evaluations occupy the processor first.
            let init = eval_cost * cfg.agents_on_node as u32;
            cluster.push(init, EventKind::Compute(i));
            cluster.push(cfg.scheduler.initial_delta_t, EventKind::Tick(i));
        }
        Ok(cluster)
    }

    fn build_node(cfg: &NodeConfig, clock: &Arc<ManualClock>) -> Result<VirtualNode, NodeError> {
        cfg.validate()?;
        let blackboard = Arc::new(new_blackboard(cfg));
        let scheduler = Arc::new(Scheduler::new(
            cfg.address.clone(),
            cfg.peers.clone(),
            cfg.scheduler.clone(),
        )?);
        let gate = BudgetGate::new(cfg.eval_quota);
        let agents = (0..cfg.agents_on_node)
            .map(|i| {
                Agent::spawn(
                    &blackboard,
                    &cfg.instance,
                    RngStream::new(cfg.seed, i as u64 + 1),
                    &gate,
                )
                .expect("quota covers initial evaluations")
            })
            .collect();
        let clock: Arc<dyn Clock> = clock.clone();
        Ok(VirtualNode {
            inbox: NodeInbox {
                blackboard: blackboard.clone(),
                scheduler: scheduler.clone(),
                clock,
            },
            blackboard,
            scheduler,
            agents,
            next_agent: 0,
            gate,
            instance: cfg.instance.clone(),
            ea: cfg.ea.clone(),
            rng: RngStream::new(cfg.seed, SCHEDULER_STREAM),
            finished_at: None,
        })
    }

    fn push(&mut self, at: Duration, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            at,
            seq: self.seq,
            kind,
        }));
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, address: &Address) -> Option<usize> {
        self.index.get(address).copied()
    }

    pub fn blackboard(&self, node: usize) -> &Arc<Blackboard> {
        &self.nodes[node].blackboard
    }

    pub fn scheduler(&self, node: usize) -> &Arc<Scheduler> {
        &self.nodes[node].scheduler
    }

    pub fn total_ticks(&self) -> usize {
        self.nodes.iter().map(|n| n.scheduler.tick_count()).sum()
    }

    pub fn all_finished(&self) -> bool {
        self.nodes.iter().all(|n| n.finished_at.is_some())
    }

    /// Makes `solution` the current solution of agent 0 on `node`.
    pub fn inject(&mut self, node: usize, solution: Solution) {
        let n = &mut self.nodes[node];
        n.agents[0].adopt(&n.blackboard, Arc::new(solution));
    }

    /// Processes the next event. Returns `None` once the queue is empty.
    pub fn step(&mut self) -> Option<Processed> {
        let Reverse(ev) = self.queue.pop()?;
        self.clock.set(ev.at);
        let now = ev.at;
        Some(match ev.kind {
            EventKind::Compute(i) => self.compute(i, now),
            EventKind::Tick(i) => self.tick(i, now),
            EventKind::Deliver(d) => self.deliver(d, now),
        })
    }

    fn compute(&mut self, i: usize, now: Duration) -> Processed {
        let node = &mut self.nodes[i];
        if node.finished_at.is_some() {
            return Processed::Ignored;
        }
        let k = node.next_agent;
        node.next_agent = (k + 1) % node.agents.len();
        let outcome = node.agents[k]
            .step(&node.blackboard, &node.instance, &node.ea, &node.gate)
            .expect("operators accept valid tours");
        match outcome {
            StepOutcome::Evaluated { .. } => {
                let next = now + self.eval_cost;
                self.push(next, EventKind::Compute(i));
            }
            StepOutcome::BudgetExhausted => node.finished_at = Some(now),
        }
        Processed::Evaluation { node: i }
    }

    fn tick(&mut self, i: usize, now: Duration) -> Processed {
        let node = &mut self.nodes[i];
        if node.finished_at.is_some() {
            return Processed::Ignored;
        }
        node.scheduler.reap_timeouts(now);
        let scheduler = node.scheduler.clone();
        match scheduler.tick(&node.blackboard, &mut node.rng, now) {
            Ok(out) => {
                let from = scheduler.local_address().clone();
                self.send(&from, &out.to, &out.msg, now);
            }
            // A lone node never gossips.
            Err(SchedulerError::NoPeers) => return Processed::Tick { node: i },
            Err(e) => log::warn!("{}: {e}", scheduler.local_address()),
        }
        let next = now + scheduler.delta_t();
        self.push(next, EventKind::Tick(i));
        Processed::Tick { node: i }
    }

    fn send(&mut self, from: &Address, to: &Address, msg: &Message, now: Duration) {
        let bytes = encode_message(msg).expect("messages built by the scheduler encode");
        match self.net.simulated_send(from, to, bytes, now) {
            Ok(Some(d)) => self.push(d.at, EventKind::Deliver(d)),
            Ok(None) => {}
            Err(e) => log::warn!("{from}: {e}"),
        }
    }

    fn deliver(&mut self, d: ScheduledDelivery, now: Duration) -> Processed {
        let Some(&i) = self.index.get(&d.to) else {
            return Processed::Ignored;
        };
        if self.nodes[i].finished_at.is_some() {
            return Processed::Ignored;
        }
        if let Some((to, reply)) = self.nodes[i].inbox.deliver(&d.bytes) {
            let from = d.to.clone();
            self.send(&from, &to, &reply, now);
        }
        Processed::Delivery { node: i }
    }

    /// Runs until every node has spent its quota.
    pub fn run(&mut self) {
        while !self.all_finished() {
            if self.step().is_none() {
                break;
            }
        }
    }

    /// Per-node reports; `wall_time` is the simulated time at which the node
    /// spent its last evaluation.
    pub fn reports(&self) -> Vec<NodeReport> {
        self.nodes
            .iter()
            .map(|n| {
                build_report(
                    &n.blackboard,
                    &n.scheduler,
                    &n.gate,
                    n.finished_at.unwrap_or(self.now()),
                )
            })
            .collect()
    }

    /// Builds, runs and reports in one go.
    pub fn run_to_completion(
        configs: Vec<NodeConfig>,
        link: LinkModel,
        net_seed: u64,
        eval_cost: Duration,
    ) -> Result<Vec<NodeReport>, NodeError> {
        let mut cluster = Self::new(configs, link, net_seed, eval_cost)?;
        cluster.run();
        Ok(cluster.reports())
    }
}
