//! Per-node shared state: the agent registry, the contribution cache and the
//! node's best-so-far solution.
//!
//! Every operation takes a single lock, so each call is atomic with respect
//! to the others and snapshots are consistent. Solutions are immutable and
//! shared through `Arc`, which keeps snapshots cheap.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tsp::Solution;

/// Identifies a node. For the socket backend this is the `host:port` the node
/// listens on.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(String);

impl Address {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Address {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub usize);

/// Gossip payload: who sent it, how much work the sender has done, and one
/// of its solutions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contribution {
    pub address: Address,
    pub evaluations: u64,
    pub solution: Arc<Solution>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlackboardError {
    #[error("unknown agent {0:?}")]
    UnknownAgent(AgentId),
    #[error("contribution carries this node's own address {0}")]
    SelfContribution(Address),
    #[error("no agents registered")]
    NoAgents,
}

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub contribution: Contribution,
    pub received_at: Duration,
}

/// One observation of the best fitness, recorded when event logging is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestEvent {
    pub candidate: u64,
    pub best_after: u64,
}

#[derive(Default)]
struct State {
    agents: Vec<Arc<Solution>>,
    cache: BTreeMap<Address, CacheEntry>,
    best: Option<Arc<Solution>>,
    log: Option<Vec<BestEvent>>,
}

impl State {
    fn improve(&mut self, candidate: &Arc<Solution>) -> bool {
        let improved = self.best.as_ref().is_none_or(|b| candidate.fitness < b.fitness);
        if improved {
            self.best = Some(candidate.clone());
        }
        if let Some(log) = self.log.as_mut() {
            log.push(BestEvent {
                candidate: candidate.fitness,
                best_after: self.best.as_ref().map_or(u64::MAX, |b| b.fitness),
            });
        }
        improved
    }
}

pub struct Blackboard {
    local: Address,
    dimension: usize,
    state: Mutex<State>,
    evaluations: AtomicU64,
}

impl fmt::Debug for Blackboard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Blackboard")
            .field("local", &self.local)
            .finish_non_exhaustive()
    }
}

impl Blackboard {
    pub fn new(local: Address, dimension: usize) -> Self {
        Self {
            local,
            dimension,
            state: Mutex::new(State::default()),
            evaluations: AtomicU64::new(0),
        }
    }

    /// Like [`Blackboard::new`] but records every best-fitness check.
    pub fn with_event_log(local: Address, dimension: usize) -> Self {
        let bb = Self::new(local, dimension);
        bb.lock().log = Some(Vec::new());
        bb
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn local_address(&self) -> &Address {
        &self.local
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn register_agent(&self, initial: Arc<Solution>) -> AgentId {
        let mut st = self.lock();
        st.improve(&initial);
        st.agents.push(initial);
        AgentId(st.agents.len() - 1)
    }

    pub fn agent_count(&self) -> usize {
        self.lock().agents.len()
    }

    pub fn commit_solution(&self, agent: AgentId, solution: Arc<Solution>) -> Result<(), BlackboardError> {
        let mut st = self.lock();
        let slot = st.agents.get_mut(agent.0).ok_or(BlackboardError::UnknownAgent(agent))?;
        *slot = solution.clone();
        st.improve(&solution);
        Ok(())
    }

    pub fn current(&self, agent: AgentId) -> Result<Arc<Solution>, BlackboardError> {
        self.lock()
            .agents
            .get(agent.0)
            .cloned()
            .ok_or(BlackboardError::UnknownAgent(agent))
    }

    /// Every other agent's current solution followed by every cached solution.
    pub fn read_pool(&self, requester: AgentId) -> Result<Vec<Arc<Solution>>, BlackboardError> {
        let st = self.lock();
        if requester.0 >= st.agents.len() {
            return Err(BlackboardError::UnknownAgent(requester));
        }
        let mut pool = Vec::with_capacity(st.agents.len() - 1 + st.cache.len());
        pool.extend(
            st.agents
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != requester.0)
                .map(|(_, s)| s.clone()),
        );
        pool.extend(st.cache.values().map(|e| e.contribution.solution.clone()));
        Ok(pool)
    }

    pub fn update_cache(&self, contribution: Contribution, received_at: Duration) -> Result<(), BlackboardError> {
        if contribution.address == self.local {
            return Err(BlackboardError::SelfContribution(contribution.address));
        }
        let mut st = self.lock();
        st.improve(&contribution.solution);
        st.cache.insert(
            contribution.address.clone(),
            CacheEntry {
                contribution,
                received_at,
            },
        );
        Ok(())
    }

    pub fn cache_snapshot(&self) -> BTreeMap<Address, CacheEntry> {
        self.lock().cache.clone()
    }

    pub fn cache_len(&self) -> usize {
        self.lock().cache.len()
    }

    /// Replaces the best solution iff `candidate` is strictly shorter.
    pub fn try_improve_best(&self, candidate: Arc<Solution>) -> bool {
        self.lock().improve(&candidate)
    }

    pub fn best(&self) -> Option<Arc<Solution>> {
        self.lock().best.clone()
    }

    /// Uniformly chosen local agent solution. Cached migrants are not eligible.
    pub fn sample_random_solution<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Arc<Solution>, BlackboardError> {
        let st = self.lock();
        if st.agents.is_empty() {
            return Err(BlackboardError::NoAgents);
        }
        Ok(st.agents[rng.gen_range(0..st.agents.len())].clone())
    }

    /// True if some agent or cache entry holds a tour equal to `solution`'s
    /// up to rotation and direction.
    pub fn holds(&self, solution: &Solution) -> bool {
        let target = solution.tour.canonical();
        let st = self.lock();
        let same = |s: &Solution| s.fitness == solution.fitness && s.tour.canonical() == target;
        st.agents.iter().any(|s| same(s)) || st.cache.values().any(|e| same(&e.contribution.solution))
    }

    pub fn add_evaluations(&self, n: u64) {
        self.evaluations.fetch_add(n, Ordering::Relaxed);
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn event_log(&self) -> Option<Vec<BestEvent>> {
        self.lock().log.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::RngStream;
    use crate::tsp::Tour;
    use std::collections::HashMap;
    use std::thread;

    fn sol(fitness: u64) -> Arc<Solution> {
        Arc::new(Solution {
            tour: Tour::identity(4),
            fitness,
        })
    }

    fn contrib(addr: &str, evaluations: u64, fitness: u64) -> Contribution {
        Contribution {
            address: addr.into(),
            evaluations,
            solution: sol(fitness),
        }
    }

    fn board() -> Blackboard {
        Blackboard::new("self".into(), 4)
    }

    #[test]
    fn registration_ids_are_unique() {
        let bb = board();
        let ids: Vec<AgentId> = (0..32).map(|_| bb.register_agent(sol(10))).collect();
        assert_eq!(bb.agent_count(), 32);
        let mut dedup = ids.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 32);

        let same = sol(5);
        assert_ne!(bb.register_agent(same.clone()), bb.register_agent(same));
    }

    #[test]
    fn lone_agent_sees_empty_pool() {
        let bb = board();
        let a = bb.register_agent(sol(10));
        assert!(bb.read_pool(a).unwrap().is_empty());
        assert_eq!(bb.read_pool(AgentId(3)), Err(BlackboardError::UnknownAgent(AgentId(3))));
    }

    #[test]
    fn pool_is_others_plus_cache() {
        let bb = board();
        let ids: Vec<AgentId> = (0..32).map(|i| bb.register_agent(sol(100 + i))).collect();
        for p in 0..5 {
            bb.update_cache(contrib(&format!("peer{p}"), 0, 50), Duration::ZERO)
                .unwrap();
        }
        let pool = bb.read_pool(ids[7]).unwrap();
        assert_eq!(pool.len(), 36);
        assert!(pool.iter().all(|s| s.fitness != 107));

        bb.update_cache(contrib("late", 0, 1), Duration::ZERO).unwrap();
        assert!(bb.read_pool(ids[0]).unwrap().iter().any(|s| s.fitness == 1));
    }

    #[test]
    fn snapshots_are_isolated_from_later_commits() {
        let bb = board();
        let a = bb.register_agent(sol(10));
        let b = bb.register_agent(sol(20));
        let snap = bb.read_pool(a).unwrap();
        bb.commit_solution(b, sol(5)).unwrap();
        assert_eq!(snap[0].fitness, 20);
        assert_eq!(bb.read_pool(a).unwrap()[0].fitness, 5);
    }

    #[test]
    fn commit_updates_best_only_when_strictly_better() {
        let bb = board();
        let a = bb.register_agent(sol(100));
        bb.commit_solution(a, sol(90)).unwrap();
        assert_eq!(bb.best().unwrap().fitness, 90);
        bb.commit_solution(a, sol(95)).unwrap();
        assert_eq!(bb.best().unwrap().fitness, 90);
        assert_eq!(
            bb.commit_solution(AgentId(9), sol(1)),
            Err(BlackboardError::UnknownAgent(AgentId(9)))
        );
    }

    #[test]
    fn try_improve_is_strict() {
        let bb = board();
        assert!(bb.try_improve_best(sol(100)));
        assert!(bb.try_improve_best(sol(99)));
        assert_eq!(bb.best().unwrap().fitness, 99);
        let tie = sol(99);
        assert!(!bb.try_improve_best(tie.clone()));
        assert!(!Arc::ptr_eq(&bb.best().unwrap(), &tie));
    }

    #[test]
    fn cache_is_newest_wins_per_address() {
        let bb = board();
        bb.update_cache(contrib("A", 1, 30), Duration::from_millis(1)).unwrap();
        bb.update_cache(contrib("A", 2, 40), Duration::from_millis(2)).unwrap();
        let snap = bb.cache_snapshot();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[&Address::from("A")].contribution.evaluations, 2);
        assert_eq!(snap[&Address::from("A")].received_at, Duration::from_millis(2));

        bb.update_cache(contrib("B", 1, 30), Duration::ZERO).unwrap();
        assert_eq!(bb.cache_len(), 2);
        assert_eq!(
            bb.update_cache(contrib("self", 1, 30), Duration::ZERO),
            Err(BlackboardError::SelfContribution("self".into()))
        );
        assert_eq!(bb.cache_len(), 2);
    }

    #[test]
    fn sampling_only_draws_agents() {
        let bb = board();
        let mut rng = RngStream::new(1, 0);
        assert_eq!(bb.sample_random_solution(&mut rng), Err(BlackboardError::NoAgents));
        bb.register_agent(sol(42));
        bb.update_cache(contrib("A", 0, 1), Duration::ZERO).unwrap();
        for _ in 0..100 {
            assert_eq!(bb.sample_random_solution(&mut rng).unwrap().fitness, 42);
        }
    }

    #[test]
    fn sampling_is_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let bb = board();
        for i in 0..32 {
            bb.register_agent(sol(i));
        }
        let mut rng = RngStream::new(2024, 0);
        let mut counts = [0u64; 32];
        for _ in 0..32_000 {
            counts[bb.sample_random_solution(&mut rng).unwrap().fitness as usize] += 1;
        }
        // 3σ band around 1000 with σ = sqrt(32000 · 1/32 · 31/32).
        let sigma = (32_000.0f64 / 32.0 * 31.0 / 32.0).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 3.0 * sigma, "count {c}");
        }
        let stat: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        let p = 1.0 - ChiSquared::new(31.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 {stat}, p {p}");
    }

    #[test]
    fn concurrent_commits_keep_the_minimum() {
        let bb = Arc::new(Blackboard::with_event_log("self".into(), 4));
        let ids: Vec<AgentId> = (0..32).map(|_| bb.register_agent(sol(u64::MAX / 2))).collect();
        let log: Vec<Vec<u64>> = (0..32u64)
            .map(|a| (0..200u64).map(|i| (a * 7919 + i * 104_729) % 1_000_003 + 1).collect())
            .collect();
        thread::scope(|s| {
            for (id, fits) in ids.iter().zip(&log) {
                let bb = bb.clone();
                s.spawn(move || {
                    for &f in fits {
                        bb.commit_solution(*id, sol(f)).unwrap();
                    }
                });
            }
        });
        let expected = log.iter().flatten().copied().min().unwrap();
        assert_eq!(bb.best().unwrap().fitness, expected);
        let events = bb.event_log().unwrap();
        assert!(events.windows(2).all(|w| w[1].best_after <= w[0].best_after));
    }

    #[test]
    fn concurrent_improvements_equal_sequential_fold() {
        let bb = Arc::new(board());
        let candidates: Vec<u64> = (0..1000u64).map(|i| (i * 7_777_777) % 999_983 + 10).collect();
        thread::scope(|s| {
            for chunk in candidates.chunks(125) {
                let bb = bb.clone();
                s.spawn(move || {
                    for &c in chunk {
                        bb.try_improve_best(sol(c));
                    }
                });
            }
        });
        let fold = candidates.iter().fold(u64::MAX, |m, &c| m.min(c));
        assert_eq!(bb.best().unwrap().fitness, fold);
    }

    #[test]
    fn cache_replay_matches_reference_map() {
        let bb = board();
        let mut rng = RngStream::new(8, 8);
        let mut reference: HashMap<String, u64> = HashMap::new();
        for i in 0..2000u64 {
            let peer = format!("p{}", rng.gen_range(0..8));
            bb.update_cache(contrib(&peer, i, rng.gen_range(1..1000)), Duration::ZERO)
                .unwrap();
            reference.insert(peer, i);
            assert!(bb.cache_len() <= 8);
        }
        let snap = bb.cache_snapshot();
        assert_eq!(snap.len(), reference.len());
        for (addr, entry) in snap {
            assert_eq!(reference[addr.as_str()], entry.contribution.evaluations);
        }
    }
}
