//! Finitely-supported multi-type offspring distributions and their
//! generating functions.
//!
//! A model with `d` types assigns to each parent type `k` a finite list of
//! offspring count vectors `x ∈ ℕ^d` with probabilities `p_k(x)`. The
//! generating function is `f_k(q) = Σ_x p_k(x) ∏_j q_j^{x_j}` and its
//! log-space form is `g(λ) = log f(exp λ)`.
//!
//! Probabilities are kept both as binary floats (used by every numerical
//! routine) and, when the model file supplies `"p/q"` strings, as exact
//! rationals.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::{format_rational, is_probability, parse_rational, pow, to_f64};

/// Log of the clamp applied to iterates of `f`; `exp(700)` is just below
/// the largest finite double.
pub const LOG_CAP: f64 = 700.0;

/// Upper bound on `Σ_j x_j` for a single offspring entry.
pub const MAX_TOTAL_OFFSPRING: u64 = 1_000_000;

/// Tolerance on `Σ_x p_k(x) = 1` for float-mode models.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Prob {
    value: f64,
    exact: Option<BigRational>,
}

impl Prob {
    pub fn from_f64(value: f64) -> Self {
        Prob { value, exact: None }
    }

    pub fn from_rational(exact: BigRational) -> Self {
        Prob { value: to_f64(&exact), exact: Some(exact) }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn exact(&self) -> Option<&BigRational> {
        self.exact.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffspringEntry {
    pub counts: Vec<u32>,
    pub prob: Prob,
}

impl OffspringEntry {
    pub fn new(counts: Vec<u32>, prob: Prob) -> Self {
        OffspringEntry { counts, prob }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffspringDistribution {
    pub entries: Vec<OffspringEntry>,
}

impl OffspringDistribution {
    pub fn new(entries: Vec<OffspringEntry>) -> Self {
        OffspringDistribution { entries }
    }

    pub fn is_exact(&self) -> bool {
        self.entries.iter().all(|e| e.prob.exact.is_some())
    }
}

/// Precomputed sparse form of one entry used by the hot evaluation loops.
#[derive(Clone, Debug, PartialEq)]
struct SparseEntry {
    prob: f64,
    log_prob: f64,
    support: Vec<(usize, u32)>,
}

/// A validated `d`-type branching process with finitely-supported offspring.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessModel {
    dists: Vec<OffspringDistribution>,
    sparse: Vec<Vec<SparseEntry>>,
}

impl ProcessModel {
    /// Validates and builds a model. Entries with probability zero are kept
    /// (they round-trip through the file format) but never evaluated.
    pub fn new(dists: Vec<OffspringDistribution>) -> Result<Self> {
        let d = dists.len();
        if d == 0 {
            return Err(Error::InvalidModel("model must have at least one type".into()));
        }
        let exact = dists.iter().all(OffspringDistribution::is_exact);
        for (k, dist) in dists.iter().enumerate() {
            if dist.entries.is_empty() {
                return Err(Error::InvalidModel(format!("type {k} has no offspring entries")));
            }
            let mut seen = std::collections::HashSet::new();
            for entry in &dist.entries {
                if entry.counts.len() != d {
                    return Err(Error::InvalidModel(format!(
                        "type {k}: count vector {:?} has length {}, expected {d}",
                        entry.counts,
                        entry.counts.len()
                    )));
                }
                if entry.total() > MAX_TOTAL_OFFSPRING {
                    return Err(Error::InvalidModel(format!(
                        "type {k}: entry {:?} exceeds the total offspring cap {MAX_TOTAL_OFFSPRING}",
                        entry.counts
                    )));
                }
                let p = entry.prob.value;
                if !(0.0..=1.0).contains(&p) || p.is_nan() {
                    return Err(Error::InvalidModel(format!(
                        "type {k}: probability {p} outside [0, 1]"
                    )));
                }
                if let Some(r) = &entry.prob.exact {
                    if !is_probability(r) {
                        return Err(Error::InvalidModel(format!(
                            "type {k}: probability {r} outside [0, 1]"
                        )));
                    }
                }
                if !seen.insert(entry.counts.clone()) {
                    return Err(Error::InvalidModel(format!(
                        "type {k}: duplicate count vector {:?}",
                        entry.counts
                    )));
                }
            }
            if exact {
                let sum: BigRational = dist
                    .entries
                    .iter()
                    .map(|e| e.prob.exact.clone().unwrap())
                    .fold(BigRational::zero(), |a, b| a + b);
                if !sum.is_one() {
                    return Err(Error::InvalidModel(format!(
                        "type {k}: probabilities sum to {sum}, not exactly 1"
                    )));
                }
            } else {
                let sum: f64 = dist.entries.iter().map(|e| e.prob.value).sum();
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::InvalidModel(format!(
                        "type {k}: probabilities sum to {sum}, not 1 within {NORMALIZATION_TOL:e}"
                    )));
                }
            }
        }
        let sparse = dists
            .iter()
            .map(|dist| {
                dist.entries
                    .iter()
                    .filter(|e| e.prob.value > 0.0)
                    .map(|e| SparseEntry {
                        prob: e.prob.value,
                        log_prob: e.prob.value.ln(),
                        support: e
                            .counts
                            .iter()
                            .enumerate()
                            .filter(|(_, &c)| c > 0)
                            .map(|(j, &c)| (j, c))
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        Ok(ProcessModel { dists, sparse })
    }

    pub fn d(&self) -> usize {
        self.dists.len()
    }

    pub fn dists(&self) -> &[OffspringDistribution] {
        &self.dists
    }

    pub fn dist(&self, k: usize) -> &OffspringDistribution {
        &self.dists[k]
    }

    /// True when every probability carries an exact rational value.
    pub fn is_exact(&self) -> bool {
        self.dists.iter().all(OffspringDistribution::is_exact)
    }

    /// Entries of type `k` with positive probability, as `(prob, sparse counts)`.
    pub fn support(&self, k: usize) -> impl Iterator<Item = (f64, &[(usize, u32)])> {
        self.sparse[k].iter().map(|e| (e.prob, e.support.as_slice()))
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: len });
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            d: self.d(),
            types: self
                .dists
                .iter()
                .map(|dist| TypeFile {
                    entries: dist
                        .entries
                        .iter()
                        .map(|e| EntryFile {
                            counts: e.counts.clone(),
                            prob: match &e.prob.exact {
                                Some(r) => ProbFile::Text(format_rational(r)),
                                None => ProbFile::Number(e.prob.value),
                            },
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }
}

/// On-disk model format:
/// `{ "d": int, "types": [ { "entries": [ { "counts": [...], "prob": "p/q" | float } ] } ] }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub d: usize,
    pub types: Vec<TypeFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeFile {
    pub entries: Vec<EntryFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntryFile {
    pub counts: Vec<u32>,
    pub prob: ProbFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProbFile {
    Text(String),
    Number(f64),
}

impl ProbFile {
    fn to_prob(&self) -> Result<Prob> {
        match self {
            ProbFile::Text(s) => Ok(Prob::from_rational(parse_rational(s)?)),
            ProbFile::Number(x) => Ok(Prob::from_f64(*x)),
        }
    }
}

impl ModelFile {
    pub fn into_model(self) -> Result<ProcessModel> {
        if self.types.len() != self.d {
            return Err(Error::InvalidModel(format!(
                "\"d\" is {} but {} types are listed",
                self.d,
                self.types.len()
            )));
        }
        let dists = self
            .types
            .iter()
            .map(|t| {
                t.entries
                    .iter()
                    .map(|e| Ok(OffspringEntry::new(e.counts.clone(), e.prob.to_prob()?)))
                    .collect::<Result<Vec<_>>>()
                    .map(OffspringDistribution::new)
            })
            .collect::<Result<Vec<_>>>()?;
        ProcessModel::new(dists)
    }
}

/// `f(q)` for `q ≥ 0`.
pub fn eval_f(model: &ProcessModel, q: &[f64]) -> Result<Vec<f64>> {
    model.check_dim(q.len())?;
    Ok(eval_f_unchecked(model, q))
}

pub(crate) fn eval_f_unchecked(model: &ProcessModel, q: &[f64]) -> Vec<f64> {
    model
        .sparse
        .iter()
        .map(|entries| {
            entries
                .iter()
                .map(|e| e.prob * e.support.iter().map(|&(j, c)| q[j].powi(c as i32)).product::<f64>())
                .sum()
        })
        .collect()
}

/// Result of iterating `f` with the overflow clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct IterOutcome {
    pub q: Vec<f64>,
    /// Set when some component exceeded `exp(LOG_CAP)` and was clamped.
    pub saturated: bool,
}

/// `f^{(n)}(q)`. Components above `exp(LOG_CAP)` are clamped there and the
/// saturation flag is raised.
pub fn eval_f_iter(model: &ProcessModel, q: &[f64], n: usize) -> Result<IterOutcome> {
    model.check_dim(q.len())?;
    if n == 0 {
        return Err(Error::InvalidArgument("iteration count must be positive".into()));
    }
    let cap = LOG_CAP.exp();
    let mut current = q.to_vec();
    let mut saturated = false;
    for _ in 0..n {
        current = eval_f_unchecked(model, &current);
        for x in current.iter_mut() {
            if !(*x <= cap) {
                *x = cap;
                saturated = true;
            }
        }
    }
    Ok(IterOutcome { q: current, saturated })
}

/// `g(λ) = log f(exp λ)`, evaluated with log-sum-exp so large `λ` never
/// overflows.
pub fn eval_g(model: &ProcessModel, lambda: &[f64]) -> Result<Vec<f64>> {
    model.check_dim(lambda.len())?;
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("λ must be finite".into()));
    }
    Ok(eval_g_unchecked(model, lambda))
}

pub(crate) fn eval_g_unchecked(model: &ProcessModel, lambda: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(lambda.len());
    let mut terms = Vec::new();
    for entries in &model.sparse {
        terms.clear();
        terms.extend(entries.iter().map(|e| {
            e.log_prob + e.support.iter().map(|&(j, c)| c as f64 * lambda[j]).sum::<f64>()
        }));
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        out.push(max + sum.ln());
    }
    out
}

/// Analytic Jacobian `∂f_k/∂q_j`. Coordinates equal to zero are handled by
/// the limit form: a term survives only when its exponents on the zero
/// coordinates vanish (apart from a single power on `j` itself).
pub fn jacobian_f(model: &ProcessModel, q: &[f64]) -> Result<DMatrix<f64>> {
    model.check_dim(q.len())?;
    Ok(jacobian_f_unchecked(model, q))
}

pub(crate) fn jacobian_f_unchecked(model: &ProcessModel, q: &[f64]) -> DMatrix<f64> {
    let d = model.d();
    let mut jac = DMatrix::zeros(d, d);
    for (k, entries) in model.sparse.iter().enumerate() {
        for e in entries {
            for (pos, &(j, c)) in e.support.iter().enumerate() {
                let mut term = e.prob * c as f64 * q[j].powi(c as i32 - 1);
                for (other, &(i, ci)) in e.support.iter().enumerate() {
                    if other != pos {
                        term *= q[i].powi(ci as i32);
                    }
                }
                jac[(k, j)] += term;
            }
        }
    }
    jac
}

/// Exact `f(q)` for rational `q`. Requires an exact model.
pub fn eval_f_exact(model: &ProcessModel, q: &[BigRational]) -> Result<Vec<BigRational>> {
    model.check_dim(q.len())?;
    if !model.is_exact() {
        return Err(Error::InvalidArgument("exact evaluation requires a rational model".into()));
    }
    Ok(model
        .dists
        .iter()
        .map(|dist| {
            dist.entries
                .iter()
                .map(|e| {
                    let mut term = e.prob.exact.clone().unwrap();
                    for (j, &c) in e.counts.iter().enumerate() {
                        if c > 0 {
                            term *= pow(&q[j], c);
                        }
                    }
                    term
                })
                .fold(BigRational::zero(), |a, b| a + b)
        })
        .collect())
}

/// Builds a model from `(counts, prob)` rows, summing probabilities of
/// rows whose count vectors coincide. Exact iff every row is exact.
pub fn merge_rows(d: usize, rows: Vec<Vec<(Vec<u32>, Prob)>>) -> Result<ProcessModel> {
    let dists = rows
        .into_iter()
        .map(|type_rows| {
            let exact = type_rows.iter().all(|(_, p)| p.exact.is_some());
            let mut merged: BTreeMap<Vec<u32>, Prob> = BTreeMap::new();
            let mut order: Vec<Vec<u32>> = Vec::new();
            for (counts, p) in type_rows {
                match merged.get_mut(&counts) {
                    Some(acc) => {
                        acc.value += p.value;
                        if exact {
                            let sum = acc.exact.take().unwrap() + p.exact.unwrap();
                            *acc = Prob::from_rational(sum);
                        }
                    }
                    None => {
                        order.push(counts.clone());
                        merged.insert(counts, if exact { p } else { Prob::from_f64(p.value) });
                    }
                }
            }
            OffspringDistribution::new(
                order
                    .into_iter()
                    .map(|c| {
                        let p = merged.remove(&c).unwrap();
                        OffspringEntry::new(c, p)
                    })
                    .collect(),
            )
        })
        .collect::<Vec<_>>();
    debug_assert!(dists.iter().all(|dist| dist.entries.iter().all(|e| e.counts.len() == d)));
    ProcessModel::new(dists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> ProcessModel {
        ProcessModel::from_json_str(
            r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":"3/4"},{"counts":[2],"prob":"1/4"}]}]}"#,
        )
        .unwrap()
    }

    fn counterexample() -> ProcessModel {
        ProcessModel::from_json_str(
            r#"{"d":2,"types":[
              {"entries":[{"counts":[1,0],"prob":"1/4"},{"counts":[2,0],"prob":"1/4"},
                          {"counts":[2,2],"prob":"1/100"},{"counts":[0,0],"prob":"49/100"}]},
              {"entries":[{"counts":[0,1],"prob":"1/4"},{"counts":[0,2],"prob":"1/4"},
                          {"counts":[2,2],"prob":"1/100"},{"counts":[0,0],"prob":"49/100"}]}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn f_at_ones_is_ones() {
        for model in [quadratic(), counterexample()] {
            let ones = vec![1.0; model.d()];
            let f = eval_f(&model, &ones).unwrap();
            assert!(f.iter().all(|x| (x - 1.0).abs() <= 1e-12));
            let exact = eval_f_exact(&model, &vec![BigRational::one(); model.d()]).unwrap();
            assert!(exact.iter().all(|x| x.is_one()));
        }
    }

    #[test]
    fn quadratic_has_fixed_point_three() {
        assert_eq!(eval_f(&quadratic(), &[3.0]).unwrap(), vec![3.0]);
        let g = eval_g(&quadratic(), &[3f64.ln()]).unwrap();
        assert!((g[0] - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn counterexample_at_two() {
        let f = eval_f(&counterexample(), &[2.0, 2.0]).unwrap();
        assert!((f[0] - 2.15).abs() < 1e-14 && (f[1] - 2.15).abs() < 1e-14);
        let g = eval_g(&counterexample(), &[2f64.ln(), 2f64.ln()]).unwrap();
        assert!((g[0] - 2.15f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn g_at_zero_is_zero() {
        let g = eval_g(&counterexample(), &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn iterating_from_zero_approaches_one() {
        let out = eval_f_iter(&quadratic(), &[0.0], 1).unwrap();
        assert_eq!(out.q, vec![0.75]);
        let out = eval_f_iter(&quadratic(), &[0.0], 2).unwrap();
        assert!((out.q[0] - (0.75 + 0.25 * 0.5625)).abs() < 1e-15);
        let out = eval_f_iter(&quadratic(), &[0.0], 200).unwrap();
        assert!((out.q[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iterating_far_above_fixed_point_saturates() {
        let out = eval_f_iter(&quadratic(), &[4.0], 50).unwrap();
        assert!(out.saturated);
        assert_eq!(out.q[0], LOG_CAP.exp());
    }

    #[test]
    fn jacobian_at_ones_is_mean_matrix() {
        let jac = jacobian_f(&counterexample(), &[1.0, 1.0]).unwrap();
        assert!((jac[(0, 0)] - 0.77).abs() < 1e-14);
        assert!((jac[(0, 1)] - 0.02).abs() < 1e-14);
        let jq = jacobian_f(&quadratic(), &[3.0]).unwrap();
        assert!((jq[(0, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn jacobian_limit_form_at_zero() {
        // only the single-child term survives at q = 0
        let jac = jacobian_f(&counterexample(), &[0.0, 0.0]).unwrap();
        assert_eq!(jac[(0, 0)], 0.25);
        assert_eq!(jac[(0, 1)], 0.0);
    }

    #[test]
    fn rejects_bad_models() {
        let unnormalized = r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":"1/2"}]}]}"#;
        assert!(matches!(ProcessModel::from_json_str(unnormalized), Err(Error::InvalidModel(_))));
        let duplicate = r#"{"d":1,"types":[{"entries":[{"counts":[0],"prob":0.5},{"counts":[0],"prob":0.5}]}]}"#;
        assert!(ProcessModel::from_json_str(duplicate).is_err());
        let wrong_len = r#"{"d":2,"types":[{"entries":[{"counts":[0],"prob":1.0}]},{"entries":[{"counts":[0,0],"prob":1.0}]}]}"#;
        assert!(ProcessModel::from_json_str(wrong_len).is_err());
        let too_many = r#"{"d":1,"types":[{"entries":[{"counts":[1000001],"prob":1.0}]}]}"#;
        assert!(ProcessModel::from_json_str(too_many).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            eval_f(&counterexample(), &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn json_round_trip_preserves_exactness() {
        let model = counterexample();
        let again = ProcessModel::from_json_str(&model.to_json_string()).unwrap();
        assert_eq!(model, again);
        assert!(again.is_exact());
    }

    #[test]
    fn merge_rows_sums_collisions() {
        let half = || Prob::from_rational(BigRational::new(1.into(), 2.into()));
        let model = merge_rows(1, vec![vec![(vec![0], half()), (vec![0], half())]]).unwrap();
        assert_eq!(model.dist(0).entries.len(), 1);
        assert!(model.dist(0).entries[0].prob.exact().unwrap().is_one());
    }
}
