//! Conjugate branching processes.
//!
//! For a fixed point `A ∈ (1,∞)^d` of `f` the tilted law
//! `p̂_k(x) = p_k(x) ∏_j A_j^{x_j} / A_k` is supercritical with extinction
//! vector `1/A`, and conditioning it on extinction recovers `p`. Both
//! directions are instances of the normalised tilt
//! `T_t(p)_k(x) = p_k(x) ∏_j t_j^{x_j} / f_k(t)`, so the round trip
//! `T_{1/A} ∘ T_A` is an identity of rational functions.

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{eval_f_exact, eval_f_unchecked, OffspringDistribution, OffspringEntry, Prob, ProcessModel};
use crate::rational::{format_rational, from_f64_exact, pow, rationalize, to_f64};
use crate::simulate::{exact_generation_law, fold_replicas, generation_law, SimConfig, Status};
use crate::spectral::{mean_matrix, perron_root};

/// Largest `‖f(A) − A‖∞` accepted for a tilt.
pub const FIXED_POINT_TOL: f64 = 1e-10;
pub const EXTINCTION_TOL: f64 = 1e-9;
pub const FLOAT_ENTRY_TOL: f64 = 1e-12;
pub const RATIONALIZE_MAX_DENOM: u64 = 1_000_000;
pub const MC_POP_CAP: u64 = 64;
pub const MC_COMPARED_GENERATIONS: usize = 3;
const EXTINCTION_MAX_ITERS: usize = 1_000_000;
/// Exact tilting is skipped when an entry has more children than this.
const EXACT_MAX_COUNT: u64 = 64;

#[derive(Clone, Debug)]
pub struct ConjugateModel {
    pub base: ProcessModel,
    pub a: Vec<f64>,
    /// The rational value of `A` used for exact tilting, when the base is exact.
    pub a_exact: Option<Vec<BigRational>>,
    /// `f(A) = A` holds exactly for a rational `A` close to the float input.
    pub rational_certified: bool,
    pub tilted: ProcessModel,
    /// `1/A`.
    pub extinction_vec: Vec<f64>,
    /// `|Σ_x p_k(x) A^x / A_k − 1|` before renormalisation.
    pub normalization_residuals: Vec<f64>,
    pub tilted_rho: f64,
}

impl ConjugateModel {
    pub fn summary(&self) -> ConjugateSummary {
        ConjugateSummary {
            a: self.a.clone(),
            a_exact: self.a_exact.as_ref().map(|v| v.iter().map(format_rational).collect()),
            rational_certified: self.rational_certified,
            extinction_vec: self.extinction_vec.clone(),
            normalization_residuals: self.normalization_residuals.clone(),
            tilted_rho: self.tilted_rho,
            tilted_supercritical: self.tilted_rho > 1.0,
            exact: self.tilted.is_exact(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConjugateSummary {
    pub a: Vec<f64>,
    pub a_exact: Option<Vec<String>>,
    pub rational_certified: bool,
    pub extinction_vec: Vec<f64>,
    pub normalization_residuals: Vec<f64>,
    pub tilted_rho: f64,
    pub tilted_supercritical: bool,
    pub exact: bool,
}

fn max_count(model: &ProcessModel) -> u64 {
    model.dists().iter().flat_map(|d| d.entries.iter().map(|e| e.total())).max().unwrap_or(0)
}

/// `T_t(p)` in rational arithmetic. Returns the tilted model and the
/// per-type normaliser `f_k(t)`.
fn tilt_exact(model: &ProcessModel, t: &[BigRational]) -> Result<(ProcessModel, Vec<BigRational>)> {
    let mut norms = Vec::with_capacity(model.d());
    let mut dists = Vec::with_capacity(model.d());
    for dist in model.dists() {
        let weights: Vec<BigRational> = dist
            .entries
            .iter()
            .map(|e| {
                let mut w = e.prob.exact().unwrap().clone();
                for (j, &c) in e.counts.iter().enumerate() {
                    if c > 0 {
                        w *= pow(&t[j], c);
                    }
                }
                w
            })
            .collect();
        let norm = weights.iter().fold(BigRational::zero(), |a, b| a + b);
        if !norm.is_positive() {
            return Err(Error::InvalidConjugate("tilt normaliser vanishes".into()));
        }
        let entries = dist
            .entries
            .iter()
            .zip(weights)
            .map(|(e, w)| OffspringEntry::new(e.counts.clone(), Prob::from_rational(w / &norm)))
            .collect();
        dists.push(OffspringDistribution::new(entries));
        norms.push(norm);
    }
    Ok((ProcessModel::new(dists)?, norms))
}

/// `T_t(p)` in floating point.
fn tilt_float(model: &ProcessModel, t: &[f64]) -> Result<(ProcessModel, Vec<f64>)> {
    let norms = eval_f_unchecked(model, t);
    let mut dists = Vec::with_capacity(model.d());
    for (dist, &norm) in model.dists().iter().zip(&norms) {
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidConjugate("tilt normaliser is not positive and finite".into()));
        }
        let mut weights: Vec<f64> = dist
            .entries
            .iter()
            .map(|e| e.prob.value() * e.counts.iter().zip(t).map(|(&c, &x)| x.powi(c as i32)).product::<f64>() / norm)
            .collect();
        // absorb rounding so the float model passes the 1e−12 normalisation check
        let sum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= sum;
        }
        let entries =
            dist.entries.iter().zip(weights).map(|(e, w)| OffspringEntry::new(e.counts.clone(), Prob::from_f64(w))).collect();
        dists.push(OffspringDistribution::new(entries));
    }
    Ok((ProcessModel::new(dists)?, norms))
}

/// Rational `A` with `f(A) = A` exactly, if the continued-fraction
/// approximations of the float coordinates give one.
fn certify_rational(model: &ProcessModel, a: &[f64]) -> Option<Vec<BigRational>> {
    let rat: Vec<BigRational> = a
        .iter()
        .map(|&x| rationalize(x, 1e-9 * x.abs().max(1.0), RATIONALIZE_MAX_DENOM))
        .collect::<Option<_>>()?;
    let f = eval_f_exact(model, &rat).ok()?;
    (f == rat).then_some(rat)
}

/// Builds the conjugate of `model` at the fixed point `a`.
pub fn tilt(model: &ProcessModel, a: &[f64]) -> Result<ConjugateModel> {
    let d = model.d();
    if a.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.len() });
    }
    if a.iter().any(|&x| !(x > 1.0 && x.is_finite())) {
        return Err(Error::InvalidConjugate(
            "A must lie in (1,∞)^d; A = 1 gives the base law itself".into(),
        ));
    }
    let residual = eval_f_unchecked(model, a).iter().zip(a).map(|(f, x)| (f - x).abs()).fold(0.0, f64::max);
    if residual > FIXED_POINT_TOL {
        return Err(Error::NotAFixedPoint { residual });
    }
    let exact_mode = model.is_exact() && max_count(model) <= EXACT_MAX_COUNT;
    let (tilted, a_exact, rational_certified, normalization_residuals) = if exact_mode {
        let (a_rat, certified) = match certify_rational(model, a) {
            Some(r) => (r, true),
            None => (a.iter().map(|&x| from_f64_exact(x).unwrap()).collect::<Vec<_>>(), false),
        };
        let (tilted, norms) = tilt_exact(model, &a_rat)?;
        let residuals = norms.iter().zip(&a_rat).map(|(n, x)| to_f64(&(n / x - BigRational::one()).abs())).collect();
        (tilted, Some(a_rat), certified, residuals)
    } else {
        let (tilted, norms) = tilt_float(model, a)?;
        let residuals = norms.iter().zip(a).map(|(n, x)| (n / x - 1.0).abs()).collect();
        (tilted, None, false, residuals)
    };
    let tilted_rho = perron_root(&mean_matrix(&tilted), None)?.rho;
    Ok(ConjugateModel {
        base: model.clone(),
        a: a.to_vec(),
        a_exact,
        rational_certified,
        tilted,
        extinction_vec: a.iter().map(|x| 1.0 / x).collect(),
        normalization_residuals,
        tilted_rho,
    })
}

/// `T_a(p)`: the law of the first generation conditioned on extinction,
/// when `a` is the extinction vector of `model`.
pub fn condition_on_extinction(model: &ProcessModel, a: &[f64]) -> Result<ProcessModel> {
    if a.len() != model.d() {
        return Err(Error::DimensionMismatch { expected: model.d(), got: a.len() });
    }
    Ok(tilt_float(model, a)?.0)
}

/// Rational version of [`condition_on_extinction`]; requires an exact model.
pub fn condition_on_extinction_exact(model: &ProcessModel, a: &[BigRational]) -> Result<ProcessModel> {
    if a.len() != model.d() {
        return Err(Error::DimensionMismatch { expected: model.d(), got: a.len() });
    }
    if !model.is_exact() {
        return Err(Error::InvalidArgument("exact conditioning requires a rational model".into()));
    }
    Ok(tilt_exact(model, a)?.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtinctionVector {
    pub a: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `lim f^{(n)}(0)` by direct iteration until the iterates stop moving.
pub fn extinction_vector(model: &ProcessModel) -> ExtinctionVector {
    let mut q = vec![0.0; model.d()];
    for it in 1..=EXTINCTION_MAX_ITERS {
        let next = eval_f_unchecked(model, &q);
        let step = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if step == 0.0 {
            return ExtinctionVector { a: q, iterations: it, converged: true };
        }
    }
    ExtinctionVector { a: q, iterations: EXTINCTION_MAX_ITERS, converged: false }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryDiff {
    pub type_index: usize,
    pub counts: Vec<u32>,
    pub base: String,
    pub recovered: String,
    pub diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TiltBackReport {
    pub extinction_vector: Vec<f64>,
    pub extinction_iterations: usize,
    pub expected_extinction: Vec<f64>,
    pub extinction_error: f64,
    pub extinction_ok: bool,
    /// Entries compared in rational arithmetic.
    pub exact: bool,
    pub max_entry_diff: f64,
    pub entries_match: bool,
    pub mismatches: Vec<EntryDiff>,
    pub passed: bool,
}

/// Recomputes the extinction vector of the conjugate and conditions it on
/// extinction, comparing with the base law.
pub fn verify_tilt_back(conj: &ConjugateModel) -> Result<TiltBackReport> {
    let ext = extinction_vector(&conj.tilted);
    let extinction_error =
        ext.a.iter().zip(&conj.extinction_vec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let extinction_ok = ext.converged && extinction_error <= EXTINCTION_TOL;

    let mut mismatches = Vec::new();
    let mut max_entry_diff = 0.0f64;
    let exact = conj.a_exact.is_some() && conj.tilted.is_exact();
    if exact {
        let inv: Vec<BigRational> = conj.a_exact.as_ref().unwrap().iter().map(|x| x.recip()).collect();
        let recovered = condition_on_extinction_exact(&conj.tilted, &inv)?;
        for (k, (b, r)) in conj.base.dists().iter().zip(recovered.dists()).enumerate() {
            for (eb, er) in b.entries.iter().zip(&r.entries) {
                let (pb, pr) = (eb.prob.exact().unwrap(), er.prob.exact().unwrap());
                if pb != pr {
                    let diff = to_f64(&(pb - pr).abs());
                    max_entry_diff = max_entry_diff.max(diff);
                    mismatches.push(EntryDiff {
                        type_index: k,
                        counts: eb.counts.clone(),
                        base: format_rational(pb),
                        recovered: format_rational(pr),
                        diff,
                    });
                }
            }
        }
    } else {
        let recovered = condition_on_extinction(&conj.tilted, &conj.extinction_vec)?;
        for (k, (b, r)) in conj.base.dists().iter().zip(recovered.dists()).enumerate() {
            for (eb, er) in b.entries.iter().zip(&r.entries) {
                let diff = (eb.prob.value() - er.prob.value()).abs();
                max_entry_diff = max_entry_diff.max(diff);
                if diff > FLOAT_ENTRY_TOL {
                    mismatches.push(EntryDiff {
                        type_index: k,
                        counts: eb.counts.clone(),
                        base: eb.prob.value().to_string(),
                        recovered: er.prob.value().to_string(),
                        diff,
                    });
                }
            }
        }
    }
    let entries_match = mismatches.is_empty();
    Ok(TiltBackReport {
        extinction_vector: ext.a,
        extinction_iterations: ext.iterations,
        expected_extinction: conj.extinction_vec.clone(),
        extinction_error,
        extinction_ok,
        exact,
        max_entry_diff,
        entries_match,
        mismatches,
        passed: extinction_ok && entries_match,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GenerationTv {
    pub generation: usize,
    /// Total variation between the empirical conditioned law of `X(n)` and
    /// the exact base law, both restricted to populations `≤ pop_cap`.
    pub tv: f64,
    pub support_size: usize,
    pub base_escaped_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionedLawReport {
    pub start_type: usize,
    pub generations: usize,
    pub replicas: u64,
    pub seed: u64,
    pub pop_cap: u64,
    pub accepted: u64,
    pub cap_hit: u64,
    pub acceptance_rate: f64,
    pub acceptance_se: f64,
    /// `1/A_k`.
    pub expected_acceptance: f64,
    pub acceptance_z: f64,
    pub generation_tv: Vec<GenerationTv>,
}

type Histograms = (u64, u64, Vec<BTreeMap<Vec<u32>, u64>>);

/// Simulates the conjugate, keeps the replicas extinct by `generations`, and
/// compares their generation laws with the exact base law.
pub fn conditioned_law_mc(
    conj: &ConjugateModel,
    start_type: usize,
    generations: usize,
    replicas: u64,
    seed: u64,
) -> Result<ConditionedLawReport> {
    let cfg = SimConfig { start_type, generations, pop_cap: MC_POP_CAP, replicas, seed };
    cfg.validate(&conj.tilted)?;
    let compared = generations.min(MC_COMPARED_GENERATIONS);
    let identity = || -> Histograms { (0, 0, vec![BTreeMap::new(); compared]) };
    let (accepted, cap_hit, hist) = fold_replicas(
        &conj.tilted,
        &cfg,
        identity,
        |mut acc, _, traj| {
            match traj.status {
                Status::Extinct => {
                    acc.0 += 1;
                    for n in 1..=compared {
                        let x: Vec<u32> = match traj.counts.get(n) {
                            Some(v) => v.iter().map(|&c| c as u32).collect(),
                            None => vec![0; conj.tilted.d()],
                        };
                        *acc.2[n - 1].entry(x).or_insert(0) += 1;
                    }
                }
                Status::CapHit => acc.1 += 1,
                Status::Alive => {}
            }
            acc
        },
        |mut a, b| {
            a.0 += b.0;
            a.1 += b.1;
            for (ha, hb) in a.2.iter_mut().zip(b.2) {
                for (x, c) in hb {
                    *ha.entry(x).or_insert(0) += c;
                }
            }
            a
        },
    )?;
    if accepted == 0 {
        return Err(Error::NoAcceptedReplicas);
    }
    let mut generation_tv = Vec::with_capacity(compared);
    for (i, h) in hist.iter().enumerate() {
        let n = i + 1;
        let (law, escaped): (BTreeMap<Vec<u32>, f64>, f64) = if conj.base.is_exact() {
            let l = exact_generation_law(&conj.base, start_type, n, MC_POP_CAP)?;
            (l.law.iter().map(|(x, w)| (x.clone(), to_f64(w))).collect(), to_f64(&l.escaped))
        } else {
            let l = generation_law::<f64>(&conj.base, start_type, n, MC_POP_CAP)?;
            (l.law, l.escaped.max(0.0))
        };
        let total = accepted as f64;
        let mut tv = 0.0;
        let mut support = 0;
        for (x, p) in &law {
            let emp = h.get(x).copied().unwrap_or(0) as f64 / total;
            tv += (emp - p).abs();
            support += 1;
        }
        for (x, c) in h {
            if !law.contains_key(x) {
                tv += *c as f64 / total;
                support += 1;
            }
        }
        generation_tv.push(GenerationTv { generation: n, tv: 0.5 * (tv + escaped), support_size: support, base_escaped_mass: escaped });
    }
    let rate = accepted as f64 / replicas as f64;
    let se = (rate * (1.0 - rate) / replicas as f64).sqrt();
    let expected = conj.extinction_vec[start_type];
    Ok(ConditionedLawReport {
        start_type,
        generations,
        replicas,
        seed,
        pop_cap: MC_POP_CAP,
        accepted,
        cap_hit,
        acceptance_rate: rate,
        acceptance_se: se,
        expected_acceptance: expected,
        acceptance_z: if se > 0.0 { (rate - expected) / se } else { 0.0 },
        generation_tv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_models::*;

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn quadratic_conjugate_exact() {
        let conj = tilt(&quadratic(), &[3.0]).unwrap();
        assert!(conj.rational_certified);
        let dist = conj.tilted.dist(0);
        for e in &dist.entries {
            let expected = if e.counts[0] == 0 { r(1, 4) } else { r(3, 4) };
            assert_eq!(e.prob.exact().unwrap(), &expected);
        }
        assert!((conj.tilted_rho - 1.5).abs() < 1e-12);
        assert_eq!(conj.normalization_residuals, vec![0.0]);
    }

    #[test]
    fn quadratic_tilt_back() {
        let conj = tilt(&quadratic(), &[3.0]).unwrap();
        let report = verify_tilt_back(&conj).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.exact);
        assert!((report.extinction_vector[0] - 1.0 / 3.0).abs() <= 1e-9);
    }

    #[test]
    fn rejects_non_fixed_points_and_unit() {
        assert!(matches!(tilt(&quadratic(), &[2.0]), Err(Error::NotAFixedPoint { .. })));
        assert!(matches!(tilt(&quadratic(), &[1.0]), Err(Error::InvalidConjugate(_))));
        assert!(matches!(tilt(&quadratic(), &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn float_model_tilt_back() {
        let model = crate::model::ProcessModel::from_json_str(
            r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":0.75},{"counts":[2],"prob":0.25}]}]}"#,
        )
        .unwrap();
        let conj = tilt(&model, &[3.0]).unwrap();
        assert!(conj.a_exact.is_none());
        let report = verify_tilt_back(&conj).unwrap();
        assert!(report.passed && !report.exact);
    }

    #[test]
    fn extinction_of_supercritical_quadratic() {
        let ext = extinction_vector(&supercritical_quadratic());
        assert!(ext.converged);
        assert!((ext.a[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn conditioning_subcritical_base_changes_nothing() {
        let base = quadratic();
        let cond = condition_on_extinction(&base, &[1.0]).unwrap();
        for (a, b) in base.dist(0).entries.iter().zip(&cond.dist(0).entries) {
            assert_eq!(a.prob.value(), b.prob.value());
        }
    }

    #[test]
    fn small_conditioned_mc() {
        let conj = tilt(&quadratic(), &[3.0]).unwrap();
        let report = conditioned_law_mc(&conj, 0, 30, 20_000, 42).unwrap();
        assert!(report.acceptance_z.abs() < 4.0, "{report:?}");
        assert!(report.generation_tv[0].tv < 0.02);
    }
}
