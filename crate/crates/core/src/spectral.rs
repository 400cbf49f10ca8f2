//! Mean matrix, Perron root and the regularity hypotheses required for a
//! nontrivial fixed point of the generating function to exist.
//!
//! Type indices are zero-based throughout.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::Zero;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{eval_f_unchecked, jacobian_f_unchecked, ProcessModel};
use crate::rational::to_f64;

/// Band around `ρ = 1` classified as critical.
pub const CRITICALITY_TOL: f64 = 1e-9;
/// Band around `ρ = 1` that triggers a near-critical warning.
pub const NEAR_CRITICAL_BAND: f64 = 1e-6;
pub const POWER_ITERATION_TOL: f64 = 1e-12;
pub const POWER_ITERATION_MAX: usize = 100_000;
/// Smallest `ε = 2^-30` tried when searching for `q⁰ = 1 + εv`.
pub const WITNESS_HALVINGS: i32 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

impl Criticality {
    pub fn classify(rho: f64) -> Self {
        if rho < 1.0 - CRITICALITY_TOL {
            Criticality::Subcritical
        } else if rho > 1.0 + CRITICALITY_TOL {
            Criticality::Supercritical
        } else {
            Criticality::Critical
        }
    }
}

/// `M_{k,j} = E_k[X_j(1)]`, summed exactly for rational models.
pub fn mean_matrix(model: &ProcessModel) -> DMatrix<f64> {
    let d = model.d();
    if model.is_exact() {
        let mut exact = vec![vec![BigRational::zero(); d]; d];
        for (k, dist) in model.dists().iter().enumerate() {
            for e in &dist.entries {
                let p = e.prob.exact().unwrap();
                for (j, &c) in e.counts.iter().enumerate() {
                    if c > 0 {
                        exact[k][j] += p * BigRational::from_integer(c.into());
                    }
                }
            }
        }
        DMatrix::from_fn(d, d, |k, j| to_f64(&exact[k][j]))
    } else {
        let mut m = DMatrix::zeros(d, d);
        for k in 0..d {
            for (p, support) in model.support(k) {
                for &(j, c) in support {
                    m[(k, j)] += p * c as f64;
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PerronResult {
    pub rho: f64,
    /// Nonnegative right eigenvector with unit Euclidean norm.
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// Power iteration ran on `M + I` because no primitivity power was given.
    pub fallback: bool,
    /// `|ρ − vᵀMv|`.
    pub rayleigh_gap: f64,
}

/// Perron root and vector of a nonnegative matrix by power iteration on
/// `M^N` (`power = Some(N)`, the primitivity witness) or, without a
/// witness, on `M + I`.
pub fn perron_root(m: &DMatrix<f64>, power: Option<usize>) -> Result<PerronResult> {
    let d = m.nrows();
    let (op, shift, exponent, fallback) = match power {
        Some(n) if n >= 1 => (m.pow(n as u32), 0.0, n as f64, false),
        _ => (m + DMatrix::identity(d, d), 1.0, 1.0, true),
    };
    let mut x = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut mu_prev = f64::NAN;
    let mut converged = None;
    for it in 1..=POWER_ITERATION_MAX {
        let y = &op * &x;
        let mu = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(PerronResult {
                rho: 0.0,
                vector: x.iter().copied().collect(),
                iterations: it,
                fallback,
                rayleigh_gap: 0.0,
            });
        }
        let next = y / norm;
        let step = (&next - &x).norm();
        x = next;
        if (mu - mu_prev).abs() < POWER_ITERATION_TOL && step < 1e-10 {
            converged = Some((it, mu));
            break;
        }
        mu_prev = mu;
    }
    let (iterations, mu) = converged.ok_or(Error::NonConvergence { iterations: POWER_ITERATION_MAX })?;
    if x.sum() < 0.0 {
        x = -x;
    }
    let rayleigh = x.dot(&(m * &x));
    let from_power = (mu - shift).max(0.0).powf(1.0 / exponent);
    Ok(PerronResult {
        rho: rayleigh,
        vector: x.iter().copied().collect(),
        iterations,
        fallback,
        rayleigh_gap: (from_power - rayleigh).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PositiveRegularity {
    pub positive_regular: bool,
    /// First `N` with `M^N > 0`, searched up to the Wielandt bound `d²−2d+2`.
    pub power: Option<usize>,
    pub irreducible: bool,
    /// Period of the support graph when irreducible.
    pub period: Option<usize>,
}

fn support_pattern(model: &ProcessModel) -> Vec<Vec<bool>> {
    let d = model.d();
    let mut pattern = vec![vec![false; d]; d];
    for (k, row) in pattern.iter_mut().enumerate() {
        for (_, support) in model.support(k) {
            for &(j, _) in support {
                row[j] = true;
            }
        }
    }
    pattern
}

fn bool_mul(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let d = a.len();
    (0..d)
        .map(|i| (0..d).map(|j| (0..d).any(|l| a[i][l] && b[l][j])).collect())
        .collect()
}

pub fn check_positive_regular(model: &ProcessModel) -> PositiveRegularity {
    let d = model.d();
    let pattern = support_pattern(model);
    let bound = d * d + 2 - 2 * d;
    let mut power = pattern.clone();
    let mut found = None;
    for n in 1..=bound {
        if power.iter().all(|row| row.iter().all(|&b| b)) {
            found = Some(n);
            break;
        }
        power = bool_mul(&power, &pattern);
    }
    let (irreducible, period) = irreducibility(&pattern);
    PositiveRegularity { positive_regular: found.is_some(), power: found, irreducible, period }
}

fn irreducibility(pattern: &[Vec<bool>]) -> (bool, Option<usize>) {
    let d = pattern.len();
    let reach = |start: usize, forward: bool| {
        let mut seen = vec![false; d];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for v in 0..d {
                let edge = if forward { pattern[u][v] } else { pattern[v][u] };
                if edge && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    if !(reach(0, true) && reach(0, false)) {
        return (false, None);
    }
    // BFS levels; the period is the gcd of level[u] + 1 − level[v] over edges.
    let mut level = vec![usize::MAX; d];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for v in 0..d {
            if pattern[u][v] && level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut period = 0usize;
    for u in 0..d {
        for v in 0..d {
            if pattern[u][v] {
                let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
                period = gcd(period, diff);
            }
        }
    }
    (true, Some(period))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Some type with positive probability of two or more children.
pub fn check_non_singular(model: &ProcessModel) -> Option<usize> {
    (0..model.d()).find(|&k| {
        model
            .support(k)
            .any(|(_, support)| support.iter().map(|&(_, c)| c as u64).sum::<u64>() >= 2)
    })
}

/// Witness generation `N` with every
/// `p_{k,j}(N) = P_k[X_j(N) ≥ 1, X_k(N) ≥ 1]` (`k ≠ j`) or
/// `p_{k,k}(N) = P_k[X_k(N) ≥ 2]` positive.
#[derive(Clone, Debug, Serialize)]
pub struct GfPosWitness {
    pub generations: usize,
    /// `probabilities[k][j]`, evaluated through the generating function.
    pub probabilities: Vec<Vec<f64>>,
    /// Rigorous lower bounds from the most probable genealogy realising each event.
    pub lower_bounds: Vec<Vec<f64>>,
    /// `max(lower bound, probability − 1e−14)` minimised over `k, j`.
    pub min_certified: f64,
}

impl GfPosWitness {
    /// `log(1/m)`: any `λ ≥ 0` with `max_j λ_j > C` has `g^{(N)}(λ) > λ`.
    pub fn infinity_level(&self) -> f64 {
        -self.min_certified.ln()
    }

    pub fn certified(&self, k: usize, j: usize) -> f64 {
        self.lower_bounds[k][j].max(self.probabilities[k][j] - 1e-14)
    }
}

/// Lower bounds on `P_i[X_j(n) ≥ 1]` (`reach`) and on the pair events of
/// [`GfPosWitness`] (`pair[i][j][k]`), both positive exactly when the event
/// has positive probability.
struct GenealogyBounds {
    reach: Vec<Vec<f64>>,
    pair: Vec<Vec<Vec<f64>>>,
}

impl GenealogyBounds {
    fn initial(d: usize) -> Self {
        GenealogyBounds {
            reach: (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
            pair: vec![vec![vec![0.0; d]; d]; d],
        }
    }

    fn step(&self, model: &ProcessModel) -> Self {
        let d = model.d();
        let mut next = GenealogyBounds { reach: vec![vec![0.0; d]; d], pair: vec![vec![vec![0.0; d]; d]; d] };
        for i in 0..d {
            for (p, support) in model.support(i) {
                for j in 0..d {
                    let mut best = 0.0f64;
                    for &(a, c) in support {
                        let r = self.reach[a][j];
                        best = best.max(1.0 - (1.0 - r).powi(c as i32));
                    }
                    next.reach[i][j] = next.reach[i][j].max(p * best);
                }
                for j in 0..d {
                    for k in j..d {
                        let mut best = 0.0f64;
                        for (sa, &(a, ca)) in support.iter().enumerate() {
                            best = best.max(self.pair[a][j][k]);
                            for &(b, _) in &support[sa..] {
                                if a == b && ca < 2 {
                                    continue;
                                }
                                let split = (self.reach[a][j] * self.reach[b][k])
                                    .max(self.reach[a][k] * self.reach[b][j]);
                                best = best.max(split);
                            }
                        }
                        let value = p * best;
                        if value > next.pair[i][j][k] {
                            next.pair[i][j][k] = value;
                            next.pair[i][k][j] = value;
                        }
                    }
                }
            }
        }
        next
    }
}

/// `f^{(n)}` evaluated at the point with zeros on `zeros` and ones elsewhere.
fn pgf_at_zeros(model: &ProcessModel, zeros: &[usize], n: usize) -> Vec<f64> {
    let mut q = vec![1.0; model.d()];
    for &z in zeros {
        q[z] = 0.0;
    }
    for _ in 0..n {
        q = eval_f_unchecked(model, &q);
    }
    q
}

/// `P_i[X_k(n) = 1]` for every start type `i`, by forward differentiation
/// of `s ↦ f^{(n)}(1, …, s, …, 1)` at `s = 0`.
fn prob_exactly_one(model: &ProcessModel, k: usize, n: usize) -> Vec<f64> {
    let d = model.d();
    let mut q = vec![1.0; d];
    q[k] = 0.0;
    let mut tangent = DVector::zeros(d);
    tangent[k] = 1.0;
    for _ in 0..n {
        let jac = jacobian_f_unchecked(model, &q);
        tangent = jac * tangent;
        q = eval_f_unchecked(model, &q);
    }
    tangent.iter().copied().collect()
}

/// Values of `p_{k,j}(n)` through inclusion–exclusion on the generating function.
pub fn pair_probabilities(model: &ProcessModel, n: usize) -> Vec<Vec<f64>> {
    let d = model.d();
    let single: Vec<Vec<f64>> = (0..d).map(|j| pgf_at_zeros(model, &[j], n)).collect();
    let mut out = vec![vec![0.0; d]; d];
    for j in 0..d {
        let one = prob_exactly_one(model, j, n);
        out[j][j] = (1.0 - single[j][j] - one[j]).max(0.0);
    }
    for j in 0..d {
        for k in (j + 1)..d {
            let both = pgf_at_zeros(model, &[j, k], n);
            // start type j, target pair {j, k}; start type k likewise
            out[j][k] = (1.0 - single[j][j] - single[k][j] + both[j]).max(0.0);
            out[k][j] = (1.0 - single[j][k] - single[k][k] + both[k]).max(0.0);
        }
    }
    out
}

/// Smallest `N ≤ 2·N₀ + 1` (with `N₀` the positive-regularity power) at which
/// every pair probability is positive.
pub fn gf_pos_witness(model: &ProcessModel) -> Result<GfPosWitness> {
    let regularity = check_positive_regular(model);
    let n0 = regularity
        .power
        .ok_or_else(|| Error::HypothesisViolation("model is not positive regular".into()))?;
    if check_non_singular(model).is_none() {
        return Err(Error::HypothesisViolation("model is singular".into()));
    }
    let d = model.d();
    let mut bounds = GenealogyBounds::initial(d);
    for n in 1..=(2 * n0 + 1) {
        bounds = bounds.step(model);
        let lower: Vec<Vec<f64>> =
            (0..d).map(|k| (0..d).map(|j| bounds.pair[k][k][j]).collect()).collect();
        if lower.iter().all(|row| row.iter().all(|&x| x > 0.0)) {
            let probabilities = pair_probabilities(model, n);
            let mut witness = GfPosWitness {
                generations: n,
                probabilities,
                lower_bounds: lower,
                min_certified: f64::INFINITY,
            };
            for k in 0..d {
                for j in 0..d {
                    witness.min_certified = witness.min_certified.min(witness.certified(k, j));
                }
            }
            return Ok(witness);
        }
    }
    Err(Error::NoWitness(format!("no generation N ≤ {} makes every p_kj(N) positive", 2 * n0 + 1)))
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundedWitness {
    /// `q⁰ = 1 + εv` with `f(q⁰) < q⁰` componentwise.
    pub q0: Vec<f64>,
    pub epsilon: f64,
}

/// Largest `ε ∈ {1/2, 1/4, …, 2^-30}` for which `q⁰ = 1 + εv` satisfies
/// `f(q⁰) < q⁰` strictly in every component.
pub fn gf_bded_witness(model: &ProcessModel, v: &[f64]) -> Result<BoundedWitness> {
    if v.len() != model.d() {
        return Err(Error::DimensionMismatch { expected: model.d(), got: v.len() });
    }
    if v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NoWitness("Perron vector is not strictly positive".into()));
    }
    for i in 1..=WITNESS_HALVINGS {
        let epsilon = 0.5f64.powi(i);
        let q0: Vec<f64> = v.iter().map(|&x| 1.0 + epsilon * x).collect();
        let f = eval_f_unchecked(model, &q0);
        if f.iter().zip(&q0).all(|(a, b)| a < b) {
            return Ok(BoundedWitness { q0, epsilon });
        }
    }
    Err(Error::NoWitness("no q⁰ = 1 + εv with f(q⁰) < q⁰ (practical subcriticality margin)".into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisSummary {
    pub subcritical: bool,
    pub positive_regular: bool,
    pub non_singular: bool,
    /// Automatic: every component of `f` is a polynomial.
    pub continuity: bool,
    pub all_pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    pub d: usize,
    pub mean_matrix: Vec<Vec<f64>>,
    pub rho: f64,
    pub perron_vector: Vec<f64>,
    pub perron_iterations: usize,
    pub perron_fallback: bool,
    pub rayleigh_gap: f64,
    pub criticality: Criticality,
    pub near_critical: bool,
    pub regularity: PositiveRegularity,
    pub non_singular_type: Option<usize>,
    pub gf_pos: Option<GfPosWitness>,
    pub gf_bded: Option<BoundedWitness>,
    pub hypotheses: HypothesisSummary,
    pub warnings: Vec<String>,
}

impl SpectralReport {
    /// Names of failed hypotheses, in the order I (subcritical), II.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.hypotheses.subcritical {
            out.push(format!("I (subcritical): rho = {} ({:?})", self.rho, self.criticality));
        }
        if !self.hypotheses.positive_regular {
            let detail = match (self.regularity.irreducible, self.regularity.period) {
                (true, Some(p)) => format!("irreducible with period {p}"),
                _ => "reducible".to_string(),
            };
            out.push(format!("II (positive regular): {detail}"));
        }
        if !self.hypotheses.non_singular {
            out.push("II (non-singular): every entry has at most one child".into());
        }
        out
    }
}

/// Runs every spectral check on `model`.
pub fn analyze(model: &ProcessModel) -> Result<SpectralReport> {
    let m = mean_matrix(model);
    let regularity = check_positive_regular(model);
    let perron = perron_root(&m, regularity.power)?;
    let criticality = Criticality::classify(perron.rho);
    let near_critical = (perron.rho - 1.0).abs() < NEAR_CRITICAL_BAND;
    let non_singular_type = check_non_singular(model);
    let mut warnings = Vec::new();
    if near_critical {
        warnings.push(format!("near-critical: |rho - 1| = {:e}", (perron.rho - 1.0).abs()));
    }
    if perron.fallback {
        warnings.push("no primitivity power; Perron root computed on M + I".into());
    }
    let subcritical = criticality == Criticality::Subcritical;
    let positive_regular = regularity.positive_regular;
    let non_singular = non_singular_type.is_some();
    let gf_pos = if positive_regular && non_singular {
        match gf_pos_witness(model) {
            Ok(w) => Some(w),
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        }
    } else {
        None
    };
    let gf_bded = if subcritical && positive_regular {
        match gf_bded_witness(model, &perron.vector) {
            Ok(w) => Some(w),
            Err(e) => {
                warnings.push(e.to_string());
                None
            }
        }
    } else {
        None
    };
    let hypotheses = HypothesisSummary {
        subcritical,
        positive_regular,
        non_singular,
        continuity: true,
        all_pass: subcritical && positive_regular && non_singular,
    };
    Ok(SpectralReport {
        d: model.d(),
        mean_matrix: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
        rho: perron.rho,
        perron_vector: perron.vector,
        perron_iterations: perron.iterations,
        perron_fallback: perron.fallback,
        rayleigh_gap: perron.rayleigh_gap,
        criticality,
        near_critical,
        regularity,
        non_singular_type,
        gf_pos,
        gf_bded,
        hypotheses,
        warnings,
    })
}
