//! Orbit classification of log-space points into the basins of `0` and `∞`.
//!
//! A point `λ ≥ 0` lies in `S₀` when `g^{(n)}(λ) → 0` and in `S∞` when the
//! orbit is unbounded. Verdicts are only issued with a certificate:
//!
//! * `Orbit`: two orbit points within a window of [`WINDOW`] steps satisfy
//!   `g^{(k+m)}(λ) < g^{(k)}(λ)` (or `>`) in the componentwise order where
//!   `≤` holds everywhere and at least one coordinate differs by more than a
//!   relative margin. Monotone limits then force the orbit to `0` (or `∞`).
//! * `ZeroBox`: an orbit point lies below `log q⁰`, where `q⁰` is the
//!   bounded witness with `f(q⁰) < q⁰`; monotonicity drags it to `0`.
//! * `InfinityBox`: an orbit point has a coordinate above `C = log(1/m)`,
//!   `m` the smallest pair probability of the positivity witness; then
//!   `g^{(N)}(λ) > λ`.
//! * `Saturation`: a coordinate exceeded the overflow cap [`LOG_CAP`].
//!
//! Along every ray `{r·u}` the complement `Λ` of the two basins is a single
//! radius, which [`BasinContext::ray_bisect`] brackets.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{eval_g_unchecked, ProcessModel, LOG_CAP};
use crate::spectral::{analyze, SpectralReport};

pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const WINDOW: usize = 16;
pub const MAX_BISECTION_STEPS: usize = 200;
/// Relative margin a coordinate must clear to count as a strict inequality.
pub const STRICT_MARGIN: f64 = 1e-12;
/// Classification budget multiplier on faces of the orthant.
pub const FACE_ITER_FACTOR: usize = 4;
/// Upper limit on the number of mesh directions.
pub const MAX_MESH_DIRECTIONS: usize = 1_000_000;

const INV_GOLDEN: f64 = 0.618_033_988_749_894_9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    S0,
    SInfty,
    Undecided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    Below,
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CertificateKind {
    Orbit,
    ZeroBox,
    InfinityBox,
    Saturation,
}

/// For `Orbit`: `g^{(k_offset + m)}(λ)` compared with `g^{(k_offset)}(λ)`.
/// For the box kinds: orbit point `k_offset` entered the box and `m = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub m: usize,
    pub k_offset: usize,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BasinVerdict {
    pub verdict: Verdict,
    pub certificate: Option<Certificate>,
    /// Number of orbit points computed, including `λ` itself.
    pub orbit_len: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RayPoint {
    pub u: Vec<f64>,
    pub r: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub lo_verdict: BasinVerdict,
    pub hi_verdict: BasinVerdict,
    pub steps: usize,
}

impl RayPoint {
    pub fn lambda(&self) -> Vec<f64> {
        self.u.iter().map(|x| x * self.r).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeshFailure {
    pub u: Vec<f64>,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaMesh {
    pub grid_per_axis: usize,
    pub directions: usize,
    pub points: Vec<RayPoint>,
    pub failures: Vec<MeshFailure>,
}

impl LambdaMesh {
    pub fn coverage(&self) -> f64 {
        self.points.len() as f64 / self.directions.max(1) as f64
    }
}

/// Precomputed certificate data for one model.
#[derive(Clone, Debug)]
pub struct BasinContext<'a> {
    model: &'a ProcessModel,
    zero_box: Vec<f64>,
    infinity_level: f64,
    witness_generations: usize,
}

fn below(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (&x, &y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if y - x > STRICT_MARGIN * (1.0 + y.abs()) {
            strict = true;
        }
    }
    strict
}

impl<'a> BasinContext<'a> {
    pub fn new(model: &'a ProcessModel) -> Result<Self> {
        let report = analyze(model)?;
        Self::from_report(model, &report)
    }

    /// Fails with `HypothesisViolation` unless the report certifies
    /// subcriticality, positive regularity, non-singularity and both witnesses.
    pub fn from_report(model: &'a ProcessModel, report: &SpectralReport) -> Result<Self> {
        let failures = report.failures();
        if !failures.is_empty() {
            return Err(Error::HypothesisViolation(failures.join("; ")));
        }
        let bded = report
            .gf_bded
            .as_ref()
            .ok_or_else(|| Error::HypothesisViolation("no bounded witness q⁰".into()))?;
        let pos = report
            .gf_pos
            .as_ref()
            .ok_or_else(|| Error::HypothesisViolation("no positivity witness".into()))?;
        Ok(BasinContext {
            model,
            zero_box: bded.q0.iter().map(|q| q.ln()).collect(),
            infinity_level: pos.infinity_level(),
            witness_generations: pos.generations,
        })
    }

    pub fn model(&self) -> &'a ProcessModel {
        self.model
    }

    /// `log q⁰`: points below it are in `S₀`.
    pub fn zero_box(&self) -> &[f64] {
        &self.zero_box
    }

    /// `C = log(1/m)`: points with a coordinate above it are in `S∞`.
    pub fn infinity_level(&self) -> f64 {
        self.infinity_level
    }

    pub fn witness_generations(&self) -> usize {
        self.witness_generations
    }

    fn box_certificate(&self, point: &[f64], index: usize) -> Option<(Verdict, Certificate)> {
        let cert = |kind, direction| Certificate { kind, m: 0, k_offset: index, direction };
        if point.iter().any(|&x| x > LOG_CAP) {
            return Some((Verdict::SInfty, cert(CertificateKind::Saturation, Direction::Above)));
        }
        if point.iter().any(|&x| x > self.infinity_level) {
            return Some((Verdict::SInfty, cert(CertificateKind::InfinityBox, Direction::Above)));
        }
        if point.iter().zip(&self.zero_box).all(|(x, z)| x <= z) {
            return Some((Verdict::S0, cert(CertificateKind::ZeroBox, Direction::Below)));
        }
        None
    }

    fn check_point(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.model.d() {
            return Err(Error::DimensionMismatch { expected: self.model.d(), got: lambda.len() });
        }
        if lambda.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("λ must be finite and componentwise ≥ 0".into()));
        }
        Ok(())
    }

    /// Iterates `g` from `λ` until a certificate appears or `max_iters` steps
    /// have been taken.
    pub fn classify(&self, lambda: &[f64], max_iters: usize) -> Result<BasinVerdict> {
        self.check_point(lambda)?;
        let mut window: std::collections::VecDeque<Vec<f64>> = std::collections::VecDeque::with_capacity(WINDOW);
        let mut current = lambda.to_vec();
        for n in 0..=max_iters {
            if n > 0 {
                current = eval_g_unchecked(self.model, window.back().unwrap());
            }
            if let Some((verdict, certificate)) = self.box_certificate(&current, n) {
                return Ok(BasinVerdict { verdict, certificate: Some(certificate), orbit_len: n + 1 });
            }
            // window holds orbit points n-1, n-2, ... (most recent last)
            for (i, old) in window.iter().rev().enumerate() {
                let m = i + 1;
                let direction = if below(&current, old) {
                    Direction::Below
                } else if below(old, &current) {
                    Direction::Above
                } else {
                    continue;
                };
                let verdict = match direction {
                    Direction::Below => Verdict::S0,
                    Direction::Above => Verdict::SInfty,
                };
                return Ok(BasinVerdict {
                    verdict,
                    certificate: Some(Certificate { kind: CertificateKind::Orbit, m, k_offset: n - m, direction }),
                    orbit_len: n + 1,
                });
            }
            if window.len() == WINDOW {
                window.pop_front();
            }
            window.push_back(current.clone());
        }
        Ok(BasinVerdict { verdict: Verdict::Undecided, certificate: None, orbit_len: max_iters + 1 })
    }

    /// Re-derives the certificate of `verdict` by iterating `g` from `λ` afresh.
    pub fn revalidate(&self, lambda: &[f64], verdict: &BasinVerdict) -> bool {
        let Some(cert) = verdict.certificate else {
            return verdict.verdict == Verdict::Undecided;
        };
        let orbit_point = |n: usize| {
            let mut p = lambda.to_vec();
            for _ in 0..n {
                p = eval_g_unchecked(self.model, &p);
            }
            p
        };
        let early = orbit_point(cert.k_offset);
        let expected = match cert.direction {
            Direction::Below => Verdict::S0,
            Direction::Above => Verdict::SInfty,
        };
        if expected != verdict.verdict {
            return false;
        }
        match cert.kind {
            CertificateKind::Orbit => {
                let mut late = early.clone();
                for _ in 0..cert.m {
                    late = eval_g_unchecked(self.model, &late);
                }
                match cert.direction {
                    Direction::Below => below(&late, &early),
                    Direction::Above => below(&early, &late),
                }
            }
            CertificateKind::ZeroBox => early.iter().zip(&self.zero_box).all(|(x, z)| x <= z),
            CertificateKind::InfinityBox => early.iter().any(|&x| x > self.infinity_level),
            CertificateKind::Saturation => early.iter().any(|&x| x > LOG_CAP),
        }
    }

    /// Brackets the unique radius `r` at which the ray through `u` meets `Λ`.
    pub fn ray_bisect(&self, u: &[f64], tol: f64, max_iters: usize) -> Result<RayPoint> {
        let d = self.model.d();
        if u.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: u.len() });
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if u.iter().any(|x| !(*x >= 0.0)) || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("direction must be nonnegative with unit norm".into()));
        }
        let budget = if u.contains(&0.0) { max_iters * FACE_ITER_FACTOR } else { max_iters };
        let point = |r: f64| u.iter().map(|x| x * r).collect::<Vec<f64>>();

        let mut lo = u
            .iter()
            .zip(&self.zero_box)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, z)| z / x)
            .fold(f64::INFINITY, f64::min);
        let u_max = u.iter().cloned().fold(0.0, f64::max);
        let mut hi = self.infinity_level / u_max * (1.0 + 1e-9) + 1e-9;
        let mut lo_verdict = self.classify(&point(lo), budget)?;
        let mut hi_verdict = self.classify(&point(hi), budget)?;
        if lo_verdict.verdict != Verdict::S0 || hi_verdict.verdict != Verdict::SInfty {
            return Err(Error::HypothesisViolation(format!(
                "initial bracket [{lo}, {hi}] not certified ({:?}, {:?})",
                lo_verdict.verdict, hi_verdict.verdict
            )));
        }
        let mut steps = 0;
        let mut last_low = true;
        while hi - lo > tol {
            let mut probe = 0.5 * (lo + hi);
            loop {
                if steps >= MAX_BISECTION_STEPS {
                    return Err(Error::BisectionStalled { lo, hi, steps });
                }
                steps += 1;
                let verdict = self.classify(&point(probe), budget)?;
                match verdict.verdict {
                    Verdict::S0 => {
                        lo = probe;
                        lo_verdict = verdict;
                        last_low = true;
                        break;
                    }
                    Verdict::SInfty => {
                        hi = probe;
                        hi_verdict = verdict;
                        last_low = false;
                        break;
                    }
                    Verdict::Undecided => {
                        let anchor = if last_low { lo } else { hi };
                        probe = anchor + (probe - anchor) * INV_GOLDEN;
                        if (probe - anchor).abs() <= f64::EPSILON * anchor.abs() {
                            return Err(Error::BisectionStalled { lo, hi, steps });
                        }
                    }
                }
            }
        }
        Ok(RayPoint { u: u.to_vec(), r: 0.5 * (lo + hi), r_lo: lo, r_hi: hi, lo_verdict, hi_verdict, steps })
    }

    /// Solves [`Self::ray_bisect`] on every mesh direction. Rays run in
    /// parallel; the output order is the direction order.
    pub fn lambda_mesh(&self, grid_per_axis: usize, tol: f64, max_iters: usize) -> Result<LambdaMesh> {
        let directions = mesh_directions(self.model.d(), grid_per_axis)?;
        let results: Vec<(Vec<f64>, Result<RayPoint>)> = directions
            .par_iter()
            .map(|u| (u.clone(), self.ray_bisect(u, tol, max_iters)))
            .collect();
        let mut points = Vec::new();
        let mut failures = Vec::new();
        for (u, result) in results {
            match result {
                Ok(p) => points.push(p),
                Err(e) => failures.push(MeshFailure { u, error: e.to_string() }),
            }
        }
        Ok(LambdaMesh { grid_per_axis, directions: directions.len(), points, failures })
    }
}

/// Convenience wrapper building a [`BasinContext`] per call.
pub fn classify(model: &ProcessModel, lambda: &[f64], max_iters: usize) -> Result<BasinVerdict> {
    BasinContext::new(model)?.classify(lambda, max_iters)
}

pub fn ray_bisect(model: &ProcessModel, u: &[f64], tol: f64) -> Result<RayPoint> {
    BasinContext::new(model)?.ray_bisect(u, tol, DEFAULT_MAX_ITERS)
}

pub fn lambda_mesh(model: &ProcessModel, grid_per_axis: usize, tol: f64) -> Result<LambdaMesh> {
    BasinContext::new(model)?.lambda_mesh(grid_per_axis, tol, DEFAULT_MAX_ITERS)
}

/// Unit vector at angle `θ ∈ [0, π/2]` from the first axis, with exact
/// zeros at the two ends.
pub fn direction_from_angle(theta: f64) -> Vec<f64> {
    if theta <= 0.0 {
        vec![1.0, 0.0]
    } else if theta >= std::f64::consts::FRAC_PI_2 {
        vec![0.0, 1.0]
    } else {
        vec![theta.cos(), theta.sin()]
    }
}

/// Deterministic directions on the positive unit sphere: a single point for
/// `d = 1`, `grid` uniform angles for `d = 2`, and the normalised simplex
/// lattice with `grid − 1` divisions for `d ≥ 3`.
pub fn mesh_directions(d: usize, grid: usize) -> Result<Vec<Vec<f64>>> {
    if grid == 0 {
        return Err(Error::InvalidArgument("grid_per_axis must be positive".into()));
    }
    match d {
        0 => Err(Error::InvalidArgument("dimension must be positive".into())),
        1 => Ok(vec![vec![1.0]]),
        2 => {
            if grid == 1 {
                return Ok(vec![direction_from_angle(std::f64::consts::FRAC_PI_4)]);
            }
            Ok((0..grid)
                .map(|i| {
                    if i == grid - 1 {
                        vec![0.0, 1.0]
                    } else {
                        direction_from_angle(std::f64::consts::FRAC_PI_2 * i as f64 / (grid - 1) as f64)
                    }
                })
                .collect())
        }
        _ => {
            let divisions = grid.saturating_sub(1).max(1);
            let count = binomial(divisions + d - 1, d - 1);
            if count > MAX_MESH_DIRECTIONS as f64 {
                return Err(Error::TooLarge(format!("{count} mesh directions for d = {d}, grid = {grid}")));
            }
            let mut out = Vec::new();
            let mut parts = vec![0usize; d];
            compositions(divisions, 0, &mut parts, &mut out);
            Ok(out)
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn compositions(remaining: usize, index: usize, parts: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
    let d = parts.len();
    if index == d - 1 {
        parts[index] = remaining;
        let norm = parts.iter().map(|&p| (p * p) as f64).sum::<f64>().sqrt();
        out.push(parts.iter().map(|&p| p as f64 / norm).collect());
        return;
    }
    for take in (0..=remaining).rev() {
        parts[index] = take;
        compositions(remaining - take, index + 1, parts, out);
    }
}
