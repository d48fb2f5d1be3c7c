//! Self-adaptive gossip scheduler.
//!
//! Every `delta_t` a node pushes one of its agents' solutions to a uniformly
//! chosen peer (PING). The receiver caches it and acknowledges (PONG). When
//! the PONG arrives the sender adopts the measured round trip as its new
//! `delta_t`, so the gossip rate follows link latency and bandwidth. Lost
//! PINGs double `delta_t` instead.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackboard::{Address, Blackboard, BlackboardError, Contribution};
use crate::clock::Clock;
use crate::transport::{decode_message, Inbox, Message, Ping, Pong};
use crate::tsp::{Solution, Tour};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    #[serde(with = "millis")]
    pub initial_delta_t: Duration,
    #[serde(with = "millis")]
    pub delta_t_min: Duration,
    #[serde(with = "millis")]
    pub delta_t_max: Duration,
    /// A ping is abandoned after `max(timeout_factor × delta_t, timeout_floor)`.
    pub timeout_factor: u32,
    #[serde(with = "millis")]
    pub timeout_floor: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            initial_delta_t: Duration::from_secs(1),
            delta_t_min: Duration::from_millis(10),
            delta_t_max: Duration::from_secs(10),
            timeout_factor: 4,
            timeout_floor: Duration::from_secs(1),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.delta_t_min > self.delta_t_max {
            return Err(SchedulerError::InvalidConfig("delta_t_min exceeds delta_t_max".into()));
        }
        if self.delta_t_min.is_zero() {
            return Err(SchedulerError::InvalidConfig("delta_t_min must be positive".into()));
        }
        if self.initial_delta_t < self.delta_t_min || self.initial_delta_t > self.delta_t_max {
            return Err(SchedulerError::InvalidConfig(
                "initial_delta_t outside the bounds".into(),
            ));
        }
        if self.timeout_factor == 0 {
            return Err(SchedulerError::InvalidConfig("timeout_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("no peers to gossip with")]
    NoPeers,
    #[error("no local agents to sample")]
    NoAgents,
    #[error("pong for unknown ping id {0}")]
    UnknownPingId(u64),
    #[error("peer list contains the local address {0}")]
    SelfInPeers(Address),
    #[error("invalid scheduler configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingPing {
    pub peer: Address,
    pub sent_at: Duration,
    pub deadline: Duration,
}

/// `delta_t` as it stood when a tick fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickSample {
    pub at: Duration,
    pub delta_t: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub pings_sent: u64,
    pub pongs_received: u64,
    pub unknown_pongs: u64,
    pub timeouts: u64,
    pub pings_received: u64,
    pub malformed: u64,
    pub rejected: u64,
}

#[derive(Debug)]
pub struct SchedulerState {
    pub delta_t: Duration,
    pub pending: BTreeMap<u64, PendingPing>,
    next_ping_id: u64,
    ticks: Vec<TickSample>,
    stats: SchedulerStats,
}

/// A message to put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub to: Address,
    pub msg: Message,
}

#[derive(Debug)]
pub struct Scheduler {
    local: Address,
    peers: Vec<Address>,
    config: SchedulerConfig,
    state: Mutex<SchedulerState>,
    pings_received: AtomicU64,
    malformed: AtomicU64,
    rejected: AtomicU64,
}

impl Scheduler {
    pub fn new(local: Address, peers: Vec<Address>, config: SchedulerConfig) -> Result<Self, SchedulerError> {
        config.validate()?;
        if peers.contains(&local) {
            return Err(SchedulerError::SelfInPeers(local));
        }
        Ok(Self {
            local,
            peers,
            state: Mutex::new(SchedulerState {
                delta_t: config.initial_delta_t,
                pending: BTreeMap::new(),
                next_ping_id: 1,
                ticks: Vec::new(),
                stats: SchedulerStats::default(),
            }),
            config,
            pings_received: AtomicU64::new(0),
            malformed: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        })
    }

    fn lock(&self) -> MutexGuard<'_, SchedulerState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn local_address(&self) -> &Address {
        &self.local
    }

    pub fn peers(&self) -> &[Address] {
        &self.peers
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn delta_t(&self) -> Duration {
        self.lock().delta_t
    }

    fn clamp(&self, d: Duration) -> Duration {
        d.clamp(self.config.delta_t_min, self.config.delta_t_max)
    }

    /// Picks a peer uniformly and builds a PING carrying a uniformly chosen
    /// local agent's solution. The caller sleeps `delta_t` before the next tick.
    pub fn tick<R: Rng + ?Sized>(
        &self,
        blackboard: &Blackboard,
        rng: &mut R,
        now: Duration,
    ) -> Result<Outbound, SchedulerError> {
        if self.peers.is_empty() {
            return Err(SchedulerError::NoPeers);
        }
        let solution = blackboard.sample_random_solution(rng).map_err(|e| match e {
            BlackboardError::NoAgents => SchedulerError::NoAgents,
            _ => unreachable!("sampling only fails without agents"),
        })?;
        let peer = self.peers[rng.gen_range(0..self.peers.len())].clone();

        let mut st = self.lock();
        let ping_id = st.next_ping_id;
        st.next_ping_id += 1;
        let timeout = (st.delta_t * self.config.timeout_factor).max(self.config.timeout_floor);
        st.pending.insert(
            ping_id,
            PendingPing {
                peer: peer.clone(),
                sent_at: now,
                deadline: now + timeout,
            },
        );
        let delta_t = st.delta_t;
        st.ticks.push(TickSample { at: now, delta_t });
        st.stats.pings_sent += 1;
        drop(st);

        Ok(Outbound {
            to: peer,
            msg: Message::Ping(Ping {
                ping_id,
                sender: self.local.clone(),
                evaluations: blackboard.evaluations(),
                fitness: solution.fitness,
                tour: solution.tour.cities().to_vec(),
            }),
        })
    }

    /// Adopts the measured round trip as the new `delta_t`.
    pub fn handle_pong(&self, pong: &Pong, now: Duration) -> Result<Duration, SchedulerError> {
        let mut st = self.lock();
        let Some(p) = st.pending.remove(&pong.ping_id) else {
            st.stats.unknown_pongs += 1;
            return Err(SchedulerError::UnknownPingId(pong.ping_id));
        };
        st.delta_t = self.clamp(now.saturating_sub(p.sent_at));
        st.stats.pongs_received += 1;
        Ok(st.delta_t)
    }

    /// Abandons a ping and doubles `delta_t` (capped). Returns `None` if the
    /// ping was no longer pending.
    pub fn handle_timeout(&self, ping_id: u64, _now: Duration) -> Option<Duration> {
        let mut st = self.lock();
        st.pending.remove(&ping_id)?;
        st.delta_t = (st.delta_t * 2).min(self.config.delta_t_max);
        st.stats.timeouts += 1;
        Some(st.delta_t)
    }

    /// Times out every pending ping whose deadline has passed.
    pub fn reap_timeouts(&self, now: Duration) -> Vec<u64> {
        let expired: Vec<u64> = {
            let st = self.lock();
            st.pending
                .iter()
                .filter(|(_, p)| p.deadline <= now)
                .map(|(id, _)| *id)
                .collect()
        };
        for id in &expired {
            self.handle_timeout(*id, now);
        }
        expired
    }

    /// Earliest pending deadline, if any.
    pub fn next_deadline(&self) -> Option<Duration> {
        self.lock().pending.values().map(|p| p.deadline).min()
    }

    pub fn pending_len(&self) -> usize {
        self.lock().pending.len()
    }

    pub fn ticks(&self) -> Vec<TickSample> {
        self.lock().ticks.clone()
    }

    pub fn tick_count(&self) -> usize {
        self.lock().ticks.len()
    }

    pub fn stats(&self) -> SchedulerStats {
        let mut s = self.lock().stats;
        s.pings_received = self.pings_received.load(Ordering::Relaxed);
        s.malformed = self.malformed.load(Ordering::Relaxed);
        s.rejected = self.rejected.load(Ordering::Relaxed);
        s
    }

    fn note_ping(&self) {
        self.pings_received.fetch_add(1, Ordering::Relaxed);
    }

    fn note_malformed(&self) {
        self.malformed.fetch_add(1, Ordering::Relaxed);
    }

    fn note_rejected(&self) {
        self.rejected.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PingRejected {
    #[error("tour is not a permutation of the instance's cities")]
    InvalidTour,
    #[error(transparent)]
    Blackboard(#[from] BlackboardError),
}

/// Caches the contribution carried by `ping` and builds the acknowledgement.
pub fn handle_ping(blackboard: &Blackboard, ping: &Ping, now: Duration) -> Result<Pong, PingRejected> {
    if ping.tour.len() != blackboard.dimension() {
        return Err(PingRejected::InvalidTour);
    }
    let tour = Tour::new(ping.tour.clone()).map_err(|_| PingRejected::InvalidTour)?;
    let contribution = Contribution {
        address: ping.sender.clone(),
        evaluations: ping.evaluations,
        solution: Arc::new(Solution {
            tour,
            fitness: ping.fitness,
        }),
    };
    blackboard.update_cache(contribution, now)?;
    Ok(Pong {
        ping_id: ping.ping_id,
        sender: blackboard.local_address().clone(),
    })
}

/// Dispatches frames arriving at a node: PINGs go to [`handle_ping`], PONGs
/// to [`Scheduler::handle_pong`]. Undecodable or invalid frames are counted
/// and dropped without a reply.
pub struct NodeInbox {
    pub blackboard: Arc<Blackboard>,
    pub scheduler: Arc<Scheduler>,
    pub clock: Arc<dyn Clock>,
}

impl NodeInbox {
    pub fn on_message(&self, msg: Message) -> Option<(Address, Message)> {
        let now = self.clock.now();
        match msg {
            Message::Ping(ping) => {
                self.scheduler.note_ping();
                match handle_ping(&self.blackboard, &ping, now) {
                    Ok(pong) => Some((ping.sender, Message::Pong(pong))),
                    Err(e) => {
                        log::debug!("{}: rejected ping from {}: {e}", self.scheduler.local, ping.sender);
                        self.scheduler.note_rejected();
                        None
                    }
                }
            }
            Message::Pong(pong) => {
                if let Err(e) = self.scheduler.handle_pong(&pong, now) {
                    log::debug!("{}: {e}", self.scheduler.local);
                }
                None
            }
        }
    }
}

impl Inbox for NodeInbox {
    fn deliver(&self, bytes: &[u8]) -> Option<(Address, Message)> {
        match decode_message(bytes) {
            Ok(msg) => self.on_message(msg),
            Err(e) => {
                log::debug!("{}: malformed frame: {e}", self.scheduler.local);
                self.scheduler.note_malformed();
                None
            }
        }
    }
}
