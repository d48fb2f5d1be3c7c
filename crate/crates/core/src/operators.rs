//! Permutation operators: order crossover, 2-opt mutation and k-tournament
//! selection, plus the seeded random streams every agent owns.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tsp::{Solution, Tour};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OperatorError {
    #[error("parents differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid cut points [{cut1}, {cut2}) for length {len}")]
    InvalidCutPoints { cut1: usize, cut2: usize, len: usize },
    #[error("invalid 2-opt indices i={i}, j={j} for length {len}")]
    InvalidIndices { i: usize, j: usize, len: usize },
    #[error("tournament pool is empty")]
    EmptyPool,
    #[error("invalid EA parameters: {0}")]
    InvalidParams(String),
}

/// Evolutionary algorithm parameters. Defaults are the reference settings:
/// 32 agents, tournament of 7, crossover 0.7, mutation 0.1 and one million
/// evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EaParams {
    pub population_size: usize,
    pub tournament_k: usize,
    pub p_crossover: f64,
    pub p_mutation: f64,
    pub max_evaluations: u64,
}

impl Default for EaParams {
    fn default() -> Self {
        Self {
            population_size: 32,
            tournament_k: 7,
            p_crossover: 0.7,
            p_mutation: 0.1,
            max_evaluations: 1_000_000,
        }
    }
}

impl EaParams {
    pub fn validate(&self) -> Result<(), OperatorError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_crossover) {
            return Err(OperatorError::InvalidParams(format!(
                "p_crossover {} outside [0, 1]",
                self.p_crossover
            )));
        }
        if !prob(self.p_mutation) {
            return Err(OperatorError::InvalidParams(format!(
                "p_mutation {} outside [0, 1]",
                self.p_mutation
            )));
        }
        if self.tournament_k < 2 {
            return Err(OperatorError::InvalidParams("tournament_k must be at least 2".into()));
        }
        if self.population_size < 2 {
            return Err(OperatorError::InvalidParams(
                "population_size must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Streams with the same seed but different ids are independent ChaCha
/// streams, so each agent and scheduler can own one without coordination.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Order crossover (OX). The child keeps `p1[cut1..cut2)` in place; the other
/// positions, starting at `cut2` and wrapping, receive the missing cities in
/// the order they appear in `p2` when read cyclically from `cut2`.
pub fn order_crossover(p1: &Tour, p2: &Tour, cut1: usize, cut2: usize) -> Result<Tour, OperatorError> {
    let len = p1.len();
    if p2.len() != len {
        return Err(OperatorError::LengthMismatch(len, p2.len()));
    }
    if cut1 > cut2 || cut2 > len {
        return Err(OperatorError::InvalidCutPoints { cut1, cut2, len });
    }
    let (a, b) = (p1.cities(), p2.cities());
    let mut child = vec![0u32; len];
    let mut taken = vec![false; len];
    for pos in cut1..cut2 {
        child[pos] = a[pos];
        taken[a[pos] as usize] = true;
    }
    let mut write = cut2 % len.max(1);
    for step in 0..len {
        let city = b[(cut2 + step) % len];
        if taken[city as usize] {
            continue;
        }
        taken[city as usize] = true;
        child[write] = city;
        write = (write + 1) % len;
    }
    Ok(Tour::from_vec_unchecked(child))
}

/// Reverses `tour[i..=j]`, i.e. one 2-opt move.
pub fn two_opt_mutation(tour: &Tour, i: usize, j: usize) -> Result<Tour, OperatorError> {
    let len = tour.len();
    if i >= j || j >= len {
        return Err(OperatorError::InvalidIndices { i, j, len });
    }
    let mut order = tour.cities().to_vec();
    order[i..=j].reverse();
    Ok(Tour::from_vec_unchecked(order))
}

impl AsRef<Solution> for Solution {
    fn as_ref(&self) -> &Solution {
        self
    }
}

/// Draws `k` entries uniformly (without replacement when the pool has at
/// least `k` entries) and returns the best two. Equal fitness keeps the
/// earlier draw.
pub fn tournament_select<'a, T, R>(pool: &'a [T], k: usize, rng: &mut R) -> Result<(&'a T, &'a T), OperatorError>
where
    T: AsRef<Solution>,
    R: Rng + ?Sized,
{
    if pool.is_empty() {
        return Err(OperatorError::EmptyPool);
    }
    let k = k.max(2);
    let draws: Vec<usize> = if pool.len() >= k {
        index::sample(rng, pool.len(), k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..pool.len())).collect()
    };

    let fit = |i: usize| pool[i].as_ref().fitness;
    let mut best = draws[0];
    let mut second: Option<usize> = None;
    for &d in &draws[1..] {
        if fit(d) < fit(best) {
            second = Some(best);
            best = d;
        } else if second.is_none_or(|s| fit(d) < fit(s)) {
            second = Some(d);
        }
    }
    Ok((&pool[best], &pool[second.unwrap_or(best)]))
}

/// Recombination followed by mutation. Without crossover the child is a copy
/// of the first (better) parent.
pub fn vary<R: Rng + ?Sized>(parents: (&Tour, &Tour), params: &EaParams, rng: &mut R) -> Result<Tour, OperatorError> {
    let (p1, p2) = parents;
    let len = p1.len();
    let mut child = if rng.gen_bool(params.p_crossover) {
        let x = rng.gen_range(0..=len);
        let y = rng.gen_range(0..=len);
        order_crossover(p1, p2, x.min(y), x.max(y))?
    } else {
        if p2.len() != len {
            return Err(OperatorError::LengthMismatch(len, p2.len()));
        }
        p1.clone()
    };
    if len >= 2 && rng.gen_bool(params.p_mutation) {
        let picks = index::sample(rng, len, 2);
        let (i, j) = (picks.index(0), picks.index(1));
        child = two_opt_mutation(&child, i.min(j), i.max(j))?;
    }
    Ok(child)
}
