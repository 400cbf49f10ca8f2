//! Fixed points of `f` in `(1,∞)^d`.
//!
//! Every nontrivial fixed point `q` has `λ = log q ∈ Λ`, so the search
//! runs over the ray parametrisation of `Λ` from [`crate::basins`]:
//! for `d = 2` the angle residual `∠g(λ(u)) − ∠u` is bracketed by sign
//! changes on the mesh and bisected, for `d ≥ 3` every mesh point seeds
//! Newton on `F(q) = f(q) − q`, and for `d = 1` the single ray is the answer.
//! All candidates are polished with damped Newton and deduplicated.

use nalgebra::{DMatrix, DVector};
use num_traits::{Signed, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::basins::{direction_from_angle, BasinContext, RayPoint, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::model::{eval_f_exact, eval_f_unchecked, eval_g_unchecked, jacobian_f_unchecked, ProcessModel, LOG_CAP};
use crate::rational::{from_f64_exact, to_f64};
use crate::spectral::analyze;

pub const DEFAULT_GRID: usize = 33;
pub const DEFAULT_DEDUP_RADIUS: f64 = 1e-6;
/// Newton stops once `‖f(q) − q‖∞` reaches this.
pub const POLISH_TOL: f64 = 1e-12;
/// Largest residual a reported point may carry.
pub const ACCEPT_TOL: f64 = 1e-10;
/// Points with a coordinate at or below `1 + DISCARD_MARGIN` are dropped.
pub const DISCARD_MARGIN: f64 = 1e-8;
/// Newton iterates stay above `1 + INTERIOR_MARGIN`.
pub const INTERIOR_MARGIN: f64 = 1e-9;
pub const NEWTON_MAX_ITERS: usize = 100;
pub const NEWTON_HALVINGS: usize = 30;
/// Angular bracket width at which the `d = 2` bisection stops.
pub const ANGLE_TOL: f64 = 1e-13;
/// Exact residuals are only computed when no entry has more children than this.
const EXACT_RESIDUAL_MAX_COUNT: u64 = 64;

/// Mesh points per axis used when none is given; the mesh has
/// `C(grid + d − 2, d − 1)` directions so the grid shrinks as `d` grows.
pub fn default_grid(d: usize) -> usize {
    match d {
        0..=2 => DEFAULT_GRID,
        3 => 9,
        4 => 5,
        5..=8 => 3,
        _ => 2,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FinderOptions {
    pub grid_per_axis: usize,
    /// Bracket tolerance passed to ray bisection.
    pub tol: f64,
    pub dedup_radius: f64,
    pub max_iters: usize,
    /// Extra Newton seeds in `q`-space, tried after the mesh seeds.
    pub extra_seeds: Vec<Vec<f64>>,
}

impl Default for FinderOptions {
    fn default() -> Self {
        FinderOptions {
            grid_per_axis: DEFAULT_GRID,
            tol: DEFAULT_TOL,
            dedup_radius: DEFAULT_DEDUP_RADIUS,
            max_iters: DEFAULT_MAX_ITERS,
            extra_seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPoint {
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `‖f(q) − q‖∞`.
    pub residual: f64,
    pub newton_iters: usize,
    /// Unit direction of the mesh ray (or seed) the point was found from.
    pub seed_direction: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointReport {
    pub d: usize,
    pub points: Vec<FixedPoint>,
    pub grid_per_axis: usize,
    pub dedup_radius: f64,
    pub tol: f64,
    pub mesh_directions: usize,
    pub mesh_failures: usize,
    pub candidates: usize,
    pub non_converged: usize,
    pub discarded_boundary: usize,
    pub duplicates: usize,
    /// Zero points found although the hypotheses guarantee one.
    pub contradicts_theorem: bool,
    pub completeness: String,
}

/// Tangential part of `h(u) − u` with `h(u) = g(λ(u)) / |g(λ(u))|`: the signed
/// angle difference for `d = 2`, the first `d − 1` components of `h − u`
/// for `d ≥ 3`, empty for `d = 1`.
pub fn direction_residual(model: &ProcessModel, ray: &RayPoint) -> Result<Vec<f64>> {
    let d = model.d();
    if ray.u.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: ray.u.len() });
    }
    if d == 1 {
        return Ok(Vec::new());
    }
    let g = eval_g_unchecked(model, &ray.lambda());
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument("g(λ) vanishes on the ray point".into()));
    }
    if d == 2 {
        return Ok(vec![g[1].atan2(g[0]) - ray.u[1].atan2(ray.u[0])]);
    }
    Ok((0..d - 1).map(|j| g[j] / norm - ray.u[j]).collect())
}

struct NewtonOutcome {
    q: Vec<f64>,
    residual: f64,
    iters: usize,
}

fn sup_residual(model: &ProcessModel, q: &[f64]) -> f64 {
    eval_f_unchecked(model, q).iter().zip(q).map(|(f, x)| (f - x).abs()).fold(0.0, f64::max)
}

/// Damped Newton on `f(q) − q` confined to `(1 + 1e−9, q_cap)^d`.
fn newton(model: &ProcessModel, seed: &[f64], q_cap: f64) -> Option<NewtonOutcome> {
    let d = model.d();
    let lo = 1.0 + INTERIOR_MARGIN;
    let inside = |q: &[f64]| q.iter().all(|&x| x > lo && x < q_cap);
    let mut q: Vec<f64> = seed.iter().map(|&x| x.clamp(lo * (1.0 + 1e-9), q_cap * (1.0 - 1e-9))).collect();
    let mut residual = sup_residual(model, &q);
    let mut iters = 0;
    while iters < NEWTON_MAX_ITERS && residual > 0.0 {
        let f = eval_f_unchecked(model, &q);
        let rhs = DVector::from_iterator(d, f.iter().zip(&q).map(|(a, b)| b - a));
        let jac = jacobian_f_unchecked(model, &q) - DMatrix::identity(d, d);
        let Some(step) = jac.lu().solve(&rhs) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=NEWTON_HALVINGS {
            let trial: Vec<f64> = q.iter().zip(step.iter()).map(|(x, s)| x + t * s).collect();
            if inside(&trial) {
                let r = sup_residual(model, &trial);
                if r < residual {
                    accepted = Some((trial, r));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, r)) = accepted else {
            break;
        };
        q = next;
        residual = r;
        iters += 1;
    }
    (residual <= POLISH_TOL).then_some(NewtonOutcome { q, residual, iters })
}

struct Candidate {
    seed: Vec<f64>,
    direction: Vec<f64>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn angle_residual(ctx: &BasinContext, theta: f64, opts: &FinderOptions) -> Result<(f64, RayPoint)> {
    let ray = ctx.ray_bisect(&direction_from_angle(theta), opts.tol, opts.max_iters)?;
    let r = direction_residual(ctx.model(), &ray)?[0];
    Ok((r, ray))
}

/// Bisects the angle residual on `[a, b]` where it changes sign.
fn bisect_angle(ctx: &BasinContext, a: (f64, f64), b: (f64, f64), opts: &FinderOptions) -> Result<RayPoint> {
    let (mut ta, mut ra) = a;
    let (mut tb, _) = b;
    let mut best = None;
    while tb - ta > ANGLE_TOL {
        let mid = 0.5 * (ta + tb);
        if mid <= ta || mid >= tb {
            break;
        }
        let (rm, ray) = angle_residual(ctx, mid, opts)?;
        best = Some(ray);
        if rm == 0.0 {
            break;
        }
        if (rm > 0.0) == (ra > 0.0) {
            ta = mid;
            ra = rm;
        } else {
            tb = mid;
        }
    }
    match best {
        Some(ray) => Ok(ray),
        None => Ok(angle_residual(ctx, 0.5 * (ta + tb), opts)?.1),
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// All fixed points of `f` in `(1,∞)^d` found at the given resolution.
pub fn find_fixed_points(model: &ProcessModel, opts: &FinderOptions) -> Result<FixedPointReport> {
    let report = analyze(model)?;
    let ctx = BasinContext::from_report(model, &report)?;
    let d = model.d();
    for s in &opts.extra_seeds {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
    }
    let q_cap = (ctx.infinity_level() * (1.0 + 1e-6) + 1e-6).min(LOG_CAP).exp() + 1.0;
    let mesh = ctx.lambda_mesh(opts.grid_per_axis, opts.tol, opts.max_iters)?;

    let mut candidates: Vec<Candidate> = Vec::new();
    let from_ray = |ray: &RayPoint| Candidate {
        seed: ray.lambda().iter().map(|x| x.exp()).collect(),
        direction: ray.u.clone(),
    };
    match d {
        1 => candidates.extend(mesh.points.iter().map(from_ray)),
        2 => {
            let residuals: Vec<(f64, f64)> = mesh
                .points
                .iter()
                .map(|ray| {
                    let theta = ray.u[1].atan2(ray.u[0]);
                    direction_residual(model, ray).map(|r| (theta, r[0]))
                })
                .collect::<Result<_>>()?;
            let mut brackets = Vec::new();
            for (i, &(theta, r)) in residuals.iter().enumerate() {
                if r == 0.0 {
                    candidates.push(from_ray(&mesh.points[i]));
                }
                if let Some(&(t2, r2)) = residuals.get(i + 1) {
                    if r != 0.0 && r2 != 0.0 && (r > 0.0) != (r2 > 0.0) {
                        brackets.push(((theta, r), (t2, r2)));
                    }
                }
            }
            let rays: Vec<Result<RayPoint>> =
                brackets.par_iter().map(|&(a, b)| bisect_angle(&ctx, a, b, opts)).collect();
            for ray in rays {
                candidates.push(from_ray(&ray?));
            }
        }
        _ => candidates.extend(mesh.points.iter().map(from_ray)),
    }
    candidates.extend(opts.extra_seeds.iter().map(|s| Candidate {
        seed: s.clone(),
        direction: unit(&s.iter().map(|x| x.max(1.0).ln()).collect::<Vec<_>>()),
    }));

    let polished: Vec<Option<FixedPoint>> = candidates
        .par_iter()
        .map(|c| {
            newton(model, &c.seed, q_cap).map(|n| FixedPoint {
                lambda: n.q.iter().map(|x| x.ln()).collect(),
                q: n.q,
                residual: n.residual,
                newton_iters: n.iters,
                seed_direction: c.direction.clone(),
            })
        })
        .collect();
    let candidate_count = polished.len();
    let mut non_converged = 0;
    let mut discarded_boundary = 0;
    let mut found = Vec::new();
    for p in polished {
        match p {
            None => non_converged += 1,
            Some(p) if p.residual > ACCEPT_TOL => non_converged += 1,
            Some(p) if p.q.iter().any(|&x| x <= 1.0 + DISCARD_MARGIN) => discarded_boundary += 1,
            Some(p) => found.push(p),
        }
    }
    found.sort_by(|a, b| lexicographic(&a.q, &b.q));
    let mut points: Vec<FixedPoint> = Vec::new();
    let mut duplicates = 0;
    for p in found {
        let close = points.iter().any(|kept| {
            kept.q.iter().zip(&p.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) <= opts.dedup_radius
        });
        if close {
            duplicates += 1;
        } else {
            points.push(p);
        }
    }
    Ok(FixedPointReport {
        d,
        contradicts_theorem: points.is_empty(),
        points,
        grid_per_axis: opts.grid_per_axis,
        dedup_radius: opts.dedup_radius,
        tol: opts.tol,
        mesh_directions: mesh.directions,
        mesh_failures: mesh.failures.len(),
        candidates: candidate_count,
        non_converged,
        discarded_boundary,
        duplicates,
        completeness: "all points found at this resolution".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FixedPointClass {
    /// `q = (1, …, 1)`.
    TrivialOne,
    /// `q ∈ [0,1]^d`, not the trivial point.
    SubUnit,
    /// `q ∈ (1,∞)^d`.
    AboveOne,
    /// Coordinates on both sides of 1; impossible for a positive regular model.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stability {
    Attracting,
    Repelling,
    Neutral,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointValidation {
    pub q: Vec<f64>,
    pub residual: f64,
    /// `‖f(q) − q‖∞` in rational arithmetic on the exact value of `q`.
    pub exact_residual: Option<f64>,
    pub class: FixedPointClass,
    pub in_open_orthant: bool,
    pub jacobian_spectral_radius: f64,
    pub stability: Stability,
}

/// Checks `f(q) = q` within `tol` and labels the point.
pub fn verify_fixed_point(model: &ProcessModel, q: &[f64], tol: f64) -> Result<FixedPointValidation> {
    let d = model.d();
    if q.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: q.len() });
    }
    if q.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument("q must be finite and nonnegative".into()));
    }
    let residual = sup_residual(model, q);
    let max_count = model.dists().iter().flat_map(|dist| dist.entries.iter().map(|e| e.total())).max().unwrap_or(0);
    let exact_residual = if model.is_exact() && max_count <= EXACT_RESIDUAL_MAX_COUNT {
        let exact: Vec<_> = q.iter().map(|&x| from_f64_exact(x).unwrap()).collect();
        let f = eval_f_exact(model, &exact)?;
        Some(
            f.iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .fold(num_rational::BigRational::zero(), |m, x| if x > m { x } else { m }),
        )
        .map(|r| to_f64(&r))
    } else {
        None
    };
    let decisive = exact_residual.unwrap_or(residual);
    if decisive > tol {
        return Err(Error::NotAFixedPoint { residual: decisive });
    }
    let class = if q.iter().all(|&x| (x - 1.0).abs() <= 1e-12) {
        FixedPointClass::TrivialOne
    } else if q.iter().all(|&x| x > 1.0) {
        FixedPointClass::AboveOne
    } else if q.iter().all(|&x| x <= 1.0) {
        FixedPointClass::SubUnit
    } else {
        FixedPointClass::Mixed
    };
    let jac = jacobian_f_unchecked(model, q);
    let radius = jac.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let stability = if radius < 1.0 - 1e-9 {
        Stability::Attracting
    } else if radius > 1.0 + 1e-9 {
        Stability::Repelling
    } else {
        Stability::Neutral
    };
    Ok(FixedPointValidation {
        q: q.to_vec(),
        residual,
        exact_residual,
        in_open_orthant: class == FixedPointClass::AboveOne,
        class,
        jacobian_spectral_radius: radius,
        stability,
    })
}

/// Rows `(q₁, q₂, f₁ − q₁, f₂ − q₂)` on an `n × n` grid over `[lo, hi]²`.
pub fn residual_grid(model: &ProcessModel, lo: f64, hi: f64, n: usize) -> Result<Vec<[f64; 4]>> {
    if model.d() != 2 {
        return Err(Error::InvalidArgument("residual grid is only defined for two types".into()));
    }
    if n < 2 || !(lo < hi) || lo < 0.0 {
        return Err(Error::InvalidArgument("residual grid needs n ≥ 2 and 0 ≤ lo < hi".into()));
    }
    let step = (hi - lo) / (n - 1) as f64;
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let q = [lo + step * i as f64, lo + step * j as f64];
            let f = eval_f_unchecked(model, &q);
            rows.push([q[0], q[1], f[0] - q[0], f[1] - q[1]]);
        }
    }
    Ok(rows)
}
