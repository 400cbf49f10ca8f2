//! Seeded forward simulation and the exact small-instance generation law.
//!
//! Replica `i` of a run with seed `s` draws from `ChaCha8Rng` seeded with
//! `s` on stream `i`; individuals are processed type by type in increasing
//! index order, each consuming one uniform `f64` for an inverse-CDF lookup.
//! Replicas are therefore independent of scheduling and of each other.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};

use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Prob, ProcessModel};
use crate::rational::to_f64;

pub const DEFAULT_POP_CAP: u64 = 1_000_000;
pub const MAX_LAW_GENERATIONS: usize = 3;
pub const MAX_LAW_POP_CAP: u64 = 64;
/// Largest number of count vectors the exact law may hold.
pub const MAX_LAW_STATES: f64 = 2e6;
/// Replicas simulated per parallel batch when results are streamed in order.
pub const BATCH: u64 = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SimConfig {
    pub start_type: usize,
    pub generations: usize,
    pub pop_cap: u64,
    pub replicas: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(start_type: usize, generations: usize, replicas: u64, seed: u64) -> Self {
        SimConfig { start_type, generations, pop_cap: DEFAULT_POP_CAP, replicas, seed }
    }

    pub fn validate(&self, model: &ProcessModel) -> Result<()> {
        if self.start_type >= model.d() {
            return Err(Error::InvalidArgument(format!(
                "start type {} out of range 0..{}",
                self.start_type,
                model.d()
            )));
        }
        if self.generations == 0 || self.replicas == 0 || self.pop_cap == 0 {
            return Err(Error::InvalidArgument("generations, replicas and pop_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    Extinct,
    CapHit,
    Alive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Trajectory {
    /// `counts[n]` is `X(n)`; `counts[0]` is the unit vector of the start type.
    pub counts: Vec<Vec<u64>>,
    pub status: Status,
}

impl Trajectory {
    pub fn extinction_generation(&self) -> Option<usize> {
        (self.status == Status::Extinct).then(|| self.counts.len() - 1)
    }
}

/// Cumulative tables for inverse-CDF sampling.
#[derive(Clone, Debug)]
pub struct Sampler {
    cdf: Vec<Vec<f64>>,
    children: Vec<Vec<Vec<(usize, u64)>>>,
}

impl Sampler {
    pub fn new(model: &ProcessModel) -> Self {
        let mut cdf = Vec::with_capacity(model.d());
        let mut children = Vec::with_capacity(model.d());
        for k in 0..model.d() {
            let mut acc = 0.0;
            let mut c = Vec::new();
            let mut ch = Vec::new();
            for (p, support) in model.support(k) {
                acc += p;
                c.push(acc);
                ch.push(support.iter().map(|&(j, n)| (j, n as u64)).collect());
            }
            cdf.push(c);
            children.push(ch);
        }
        Sampler { cdf, children }
    }

    fn draw(&self, k: usize, u: f64) -> &[(usize, u64)] {
        let table = &self.cdf[k];
        let idx = table.partition_point(|&c| c <= u).min(table.len() - 1);
        &self.children[k][idx]
    }
}

pub fn replica_rng(seed: u64, replica_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica_index);
    rng
}

fn run_one(sampler: &Sampler, d: usize, cfg: &SimConfig, replica_index: u64) -> Trajectory {
    let mut rng = replica_rng(cfg.seed, replica_index);
    let mut current = vec![0u64; d];
    current[cfg.start_type] = 1;
    let mut counts = vec![current.clone()];
    for _ in 0..cfg.generations {
        let mut next = vec![0u64; d];
        for (k, &n) in current.iter().enumerate() {
            for _ in 0..n {
                let u: f64 = rng.gen();
                for &(j, c) in sampler.draw(k, u) {
                    next[j] += c;
                }
            }
        }
        let total: u64 = next.iter().sum();
        counts.push(next.clone());
        if total == 0 {
            return Trajectory { counts, status: Status::Extinct };
        }
        if total > cfg.pop_cap {
            return Trajectory { counts, status: Status::CapHit };
        }
        current = next;
    }
    Trajectory { counts, status: Status::Alive }
}

/// One replica. Stops at extinction, at the first generation whose total
/// exceeds `pop_cap`, or after `generations` steps.
pub fn simulate_one(model: &ProcessModel, cfg: &SimConfig, replica_index: u64) -> Result<Trajectory> {
    cfg.validate(model)?;
    Ok(run_one(&Sampler::new(model), model.d(), cfg, replica_index))
}

/// All replicas in replica order.
pub fn run_replicas(model: &ProcessModel, cfg: &SimConfig) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for_each_batch(model, cfg, |_, batch| {
        out.extend(batch);
        Ok(())
    })?;
    Ok(out)
}

/// Simulates replicas in parallel batches of [`BATCH`] and hands each batch,
/// in replica order, to `sink` together with its first replica index.
pub fn for_each_batch(
    model: &ProcessModel,
    cfg: &SimConfig,
    mut sink: impl FnMut(u64, Vec<Trajectory>) -> Result<()>,
) -> Result<()> {
    cfg.validate(model)?;
    let sampler = Sampler::new(model);
    let d = model.d();
    let mut start = 0;
    while start < cfg.replicas {
        let end = (start + BATCH).min(cfg.replicas);
        let batch: Vec<Trajectory> = (start..end).into_par_iter().map(|i| run_one(&sampler, d, cfg, i)).collect();
        sink(start, batch)?;
        start = end;
    }
    Ok(())
}

/// Parallel fold over all replicas. `merge` must be commutative and
/// associative for the result to be independent of scheduling.
pub fn fold_replicas<A, I, F, M>(model: &ProcessModel, cfg: &SimConfig, identity: I, fold: F, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(A, u64, Trajectory) -> A + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    cfg.validate(model)?;
    let sampler = Sampler::new(model);
    let d = model.d();
    Ok((0..cfg.replicas)
        .into_par_iter()
        .fold(&identity, |acc, i| fold(acc, i, run_one(&sampler, d, cfg, i)))
        .reduce(&identity, &merge))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtinctionEstimate {
    pub start_type: usize,
    pub replicas: u64,
    pub extinct: u64,
    pub cap_hit: u64,
    pub alive: u64,
    /// Fraction of replicas extinct within the generation budget.
    pub estimate: f64,
    pub standard_error: f64,
    /// Capped replicas count as non-extinct; their share bounds the bias.
    pub cap_hit_bias_bound: f64,
}

#[derive(Default)]
struct StatusTally {
    extinct: u64,
    cap_hit: u64,
    alive: u64,
}

pub fn mc_extinction(model: &ProcessModel, cfg: &SimConfig) -> Result<ExtinctionEstimate> {
    let tally = fold_replicas(
        model,
        cfg,
        StatusTally::default,
        |mut t, _, traj| {
            match traj.status {
                Status::Extinct => t.extinct += 1,
                Status::CapHit => t.cap_hit += 1,
                Status::Alive => t.alive += 1,
            }
            t
        },
        |a, b| StatusTally { extinct: a.extinct + b.extinct, cap_hit: a.cap_hit + b.cap_hit, alive: a.alive + b.alive },
    )?;
    let r = cfg.replicas as f64;
    let p = tally.extinct as f64 / r;
    Ok(ExtinctionEstimate {
        start_type: cfg.start_type,
        replicas: cfg.replicas,
        extinct: tally.extinct,
        cap_hit: tally.cap_hit,
        alive: tally.alive,
        estimate: p,
        standard_error: (p * (1.0 - p) / r).sqrt(),
        cap_hit_bias_bound: tally.cap_hit as f64 / r,
    })
}

/// [`mc_extinction`] from every start type in turn.
pub fn mc_extinction_per_type(model: &ProcessModel, cfg: &SimConfig) -> Result<Vec<ExtinctionEstimate>> {
    (0..model.d())
        .map(|k| mc_extinction(model, &SimConfig { start_type: k, ..cfg.clone() }))
        .collect()
}

/// Per-generation aggregate over replicas that reached that generation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub generation: usize,
    /// Replicas whose trajectory records this generation.
    pub recorded: u64,
    pub extinct_by_now: u64,
    pub mean_counts: Vec<f64>,
}

/// Means of `X_j(n)` over the replicas selected by `filter`, with replicas
/// that died out before `n` contributing zeros.
pub fn summarize(
    model: &ProcessModel,
    cfg: &SimConfig,
    filter: impl Fn(&Trajectory) -> bool + Sync + Send,
) -> Result<(u64, Vec<GenerationSummary>)> {
    let d = model.d();
    let g = cfg.generations;
    type Acc = (u64, Vec<u64>, Vec<u64>, Vec<Vec<u128>>);
    let identity = || -> Acc { (0, vec![0; g + 1], vec![0; g + 1], vec![vec![0u128; d]; g + 1]) };
    let (selected, recorded, extinct, sums) = fold_replicas(
        model,
        cfg,
        identity,
        |mut acc, _, traj| {
            if !filter(&traj) {
                return acc;
            }
            acc.0 += 1;
            for n in 0..=g {
                match traj.counts.get(n) {
                    Some(x) => {
                        acc.1[n] += 1;
                        for (s, &c) in acc.3[n].iter_mut().zip(x) {
                            *s += c as u128;
                        }
                        if x.iter().all(|&c| c == 0) {
                            acc.2[n] += 1;
                        }
                    }
                    None if traj.status == Status::Extinct => {
                        acc.1[n] += 1;
                        acc.2[n] += 1;
                    }
                    None => {}
                }
            }
            acc
        },
        |mut a, b| {
            a.0 += b.0;
            for n in 0..=g {
                a.1[n] += b.1[n];
                a.2[n] += b.2[n];
                for j in 0..d {
                    a.3[n][j] += b.3[n][j];
                }
            }
            a
        },
    )?;
    let rows = (0..=g)
        .map(|n| GenerationSummary {
            generation: n,
            recorded: recorded[n],
            extinct_by_now: extinct[n],
            mean_counts: sums[n]
                .iter()
                .map(|&s| if recorded[n] == 0 { 0.0 } else { s as f64 / recorded[n] as f64 })
                .collect(),
        })
        .collect();
    Ok((selected, rows))
}

/// Probability weights for the exact generation law.
pub trait Weight: Clone + Send + Sync + Zero + One + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn from_prob(p: &Prob) -> Option<Self>;
    fn as_f64(&self) -> f64;
}

impl Weight for f64 {
    fn from_prob(p: &Prob) -> Option<Self> {
        Some(p.value())
    }

    fn as_f64(&self) -> f64 {
        *self
    }
}

impl Weight for BigRational {
    fn from_prob(p: &Prob) -> Option<Self> {
        p.exact().cloned()
    }

    fn as_f64(&self) -> f64 {
        to_f64(self)
    }
}

/// Law of `X(n)` under `P_k`, restricted to total population `≤ pop_cap`.
#[derive(Clone, Debug)]
pub struct GenerationLaw<T> {
    pub start_type: usize,
    pub generation: usize,
    pub pop_cap: u64,
    pub law: BTreeMap<Vec<u32>, T>,
    /// `1 − Σ law`: mass on populations above the cap.
    pub escaped: T,
}

impl<T: Weight> GenerationLaw<T> {
    /// `Σ_x law(x) ∏_j q_j^{x_j}`.
    pub fn pgf(&self, q: &[f64]) -> f64 {
        self.law
            .iter()
            .map(|(x, w)| w.as_f64() * x.iter().zip(q).map(|(&c, &qj)| qj.powi(c as i32)).product::<f64>())
            .sum()
    }

    pub fn probability(&self, x: &[u32]) -> T {
        self.law.get(x).cloned().unwrap_or_else(T::zero)
    }
}

type Law<T> = BTreeMap<Vec<u32>, T>;

fn convolve<T: Weight>(a: &Law<T>, b: &Law<T>, cap: u64) -> Law<T> {
    let mut out: Law<T> = BTreeMap::new();
    for (x, wx) in a {
        let tx: u64 = x.iter().map(|&c| c as u64).sum();
        for (y, wy) in b {
            let ty: u64 = y.iter().map(|&c| c as u64).sum();
            if tx + ty > cap {
                continue;
            }
            let z: Vec<u32> = x.iter().zip(y).map(|(a, b)| a + b).collect();
            let w = wx.clone() * wy.clone();
            match out.get_mut(&z) {
                Some(acc) => *acc = acc.clone() + w,
                None => {
                    out.insert(z, w);
                }
            }
        }
    }
    out
}

fn unit_law<T: Weight>(d: usize, k: usize) -> Law<T> {
    let mut x = vec![0u32; d];
    x[k] = 1;
    BTreeMap::from([(x, T::one())])
}

/// Law of `X(n)` by first-step decomposition: the population at `n` is the
/// sum, over the children of the root, of independent populations at `n − 1`.
pub fn generation_law<T: Weight>(
    model: &ProcessModel,
    start_type: usize,
    n: usize,
    pop_cap: u64,
) -> Result<GenerationLaw<T>> {
    let d = model.d();
    if start_type >= d {
        return Err(Error::InvalidArgument(format!("start type {start_type} out of range 0..{d}")));
    }
    if n == 0 || n > MAX_LAW_GENERATIONS || pop_cap == 0 || pop_cap > MAX_LAW_POP_CAP {
        return Err(Error::TooLarge(format!(
            "exact law needs 1 ≤ n ≤ {MAX_LAW_GENERATIONS} and 1 ≤ pop_cap ≤ {MAX_LAW_POP_CAP}"
        )));
    }
    let states = (0..d).fold(1.0, |acc, i| acc * (pop_cap as f64 + 1.0 + i as f64) / (i + 1) as f64);
    if states > MAX_LAW_STATES {
        return Err(Error::TooLarge(format!("{states:.0} possible count vectors")));
    }
    let mut offspring: Vec<Vec<(Vec<u32>, T)>> = Vec::with_capacity(d);
    for dist in model.dists() {
        let mut rows = Vec::new();
        for e in &dist.entries {
            let w = T::from_prob(&e.prob)
                .ok_or_else(|| Error::InvalidArgument("exact law requires rational probabilities".into()))?;
            rows.push((e.counts.clone(), w));
        }
        offspring.push(rows);
    }
    // laws[j] = law of X(m) under P_j, truncated at pop_cap
    let mut laws: Vec<Law<T>> = (0..d).map(|j| unit_law(d, j)).collect();
    for _ in 0..n {
        let mut next = Vec::with_capacity(d);
        for rows in &offspring {
            let mut total: Law<T> = BTreeMap::new();
            for (counts, w) in rows {
                if w.is_zero() {
                    continue;
                }
                let mut acc: Law<T> = BTreeMap::from([(vec![0u32; d], w.clone())]);
                for (j, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        acc = convolve(&acc, &laws[j], pop_cap);
                        if acc.is_empty() {
                            break;
                        }
                    }
                }
                for (x, p) in acc {
                    match total.get_mut(&x) {
                        Some(v) => *v = v.clone() + p,
                        None => {
                            total.insert(x, p);
                        }
                    }
                }
            }
            next.push(total);
        }
        laws = next;
    }
    let law = laws.swap_remove(start_type);
    let captured = law.values().cloned().fold(T::zero(), |a, b| a + b);
    let escaped = T::one() - captured;
    Ok(GenerationLaw { start_type, generation: n, pop_cap, law, escaped })
}

/// [`generation_law`] in rational arithmetic; requires an exact model.
pub fn exact_generation_law(
    model: &ProcessModel,
    start_type: usize,
    n: usize,
    pop_cap: u64,
) -> Result<GenerationLaw<BigRational>> {
    if !model.is_exact() {
        return Err(Error::InvalidArgument("exact law requires rational probabilities".into()));
    }
    generation_law(model, start_type, n, pop_cap)
}
