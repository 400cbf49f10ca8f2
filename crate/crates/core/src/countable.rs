//! Countable-type families tabulated up to `D_max` types, their level-`d`
//! truncations, and sampled checks of the growth and subcriticality
//! conditions under which the truncated fixed points converge.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{find_fixed_points, FinderOptions};
use crate::model::{eval_f_unchecked, eval_g_unchecked, merge_rows, ModelFile, ProcessModel, TypeFile, LOG_CAP};
use crate::spectral::analyze;

pub const DEFAULT_ALPHA: f64 = 2.0;
/// Samples are drawn from `q ∈ [1, SAMPLE_BOX]^{D_max}`.
pub const SAMPLE_BOX: f64 = 4.0;
pub const SAMPLES_PER_CHECK: usize = 512;
/// Seed of the deterministic sampler used by [`check_assumptions`].
pub const SAMPLE_SEED: u64 = 0;
const INEQUALITY_SLACK: f64 = 1e-12;

/// Family file: a model file with `"d_max"`, `"phi"`, `"psi"`, and optional
/// `"epsilon"` and `"alpha"`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyFile {
    #[serde(default)]
    pub d: Option<usize>,
    pub d_max: usize,
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
    #[serde(default)]
    pub psi: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub types: Vec<TypeFile>,
}

#[derive(Clone, Debug)]
pub struct CountableFamily {
    model: ProcessModel,
    phi: Option<Vec<f64>>,
    psi: Option<Vec<f64>>,
    epsilon: Option<f64>,
    alpha: f64,
    warnings: Vec<String>,
}

impl CountableFamily {
    pub fn new(
        model: ProcessModel,
        phi: Option<Vec<f64>>,
        psi: Option<Vec<f64>>,
        epsilon: Option<f64>,
        alpha: Option<f64>,
    ) -> Result<Self> {
        let d_max = model.d();
        let mut warnings = Vec::new();
        for (name, table) in [("phi", &phi), ("psi", &psi)] {
            if let Some(t) = table {
                if t.len() != d_max {
                    return Err(Error::InvalidModel(format!("{name} has {} values for {d_max} types", t.len())));
                }
                if let Some(k) = t.iter().position(|&x| !(x >= 1.0 && x.is_finite())) {
                    return Err(Error::InvalidModel(format!("{name}({k}) = {} is below 1", t[k])));
                }
            }
        }
        if let Some(p) = &phi {
            if let Some(k) = p.windows(2).position(|w| w[1] < w[0]) {
                warnings.push(format!("phi decreases between types {k} and {}", k + 1));
            }
        }
        if let Some(e) = epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::InvalidModel("epsilon must be positive".into()));
            }
        }
        let alpha = alpha.unwrap_or(DEFAULT_ALPHA);
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::InvalidModel("alpha must exceed 1".into()));
        }
        Ok(CountableFamily { model, phi, psi, epsilon, alpha, warnings })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: FamilyFile = serde_json::from_str(text)?;
        if let Some(d) = file.d {
            if d != file.d_max {
                return Err(Error::InvalidModel(format!("\"d\" = {d} differs from \"d_max\" = {}", file.d_max)));
            }
        }
        let model = ModelFile { d: file.d_max, types: file.types }.into_model()?;
        Self::new(model, file.phi, file.psi, file.epsilon, file.alpha)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn d_max(&self) -> usize {
        self.model.d()
    }

    /// The tabulated process on all `D_max` types.
    pub fn model(&self) -> &ProcessModel {
        &self.model
    }

    pub fn phi(&self) -> Option<&[f64]> {
        self.phi.as_deref()
    }

    pub fn psi(&self) -> Option<&[f64]> {
        self.psi.as_deref()
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Keeps types `0..d`, deletes offspring of higher types, and merges entries
/// whose truncated count vectors coincide.
pub fn truncate(family: &CountableFamily, d: usize) -> Result<ProcessModel> {
    if d == 0 || d > family.d_max() {
        return Err(Error::InvalidArgument(format!("truncation level {d} outside 1..={}", family.d_max())));
    }
    let rows = family.model.dists()[..d]
        .iter()
        .map(|dist| dist.entries.iter().map(|e| (e.counts[..d].to_vec(), e.prob.clone())).collect())
        .collect();
    merge_rows(d, rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanRecord {
    pub d: usize,
    pub rho: f64,
    /// Every fixed point found, in log space.
    pub fixed_points: Vec<Vec<f64>>,
    pub representative: Vec<f64>,
    pub representative_q: Vec<f64>,
    pub residual: f64,
    /// `max_k |λ_k^d − λ_k^{d'}|` over the types shared with the previous level.
    pub sup_diff: Option<f64>,
    /// `log(1/p_kk(N))` from the positivity witness of this truncation.
    pub limsup_bounds: Vec<f64>,
    pub below_limsup: bool,
    /// `max_{k < K} λ_k^d`.
    pub max_leading: f64,
    pub above_floor: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationScan {
    pub schedule: Vec<usize>,
    pub records: Vec<ScanRecord>,
    /// `δ = log(1 + ε)`.
    pub delta: Option<f64>,
    /// Number of leading types `K` over which the floor applies.
    pub leading_types: Option<usize>,
    /// `δ / 2`.
    pub floor: Option<f64>,
    pub monotone_differences: bool,
    pub all_below_limsup: bool,
    pub all_above_floor: Option<bool>,
    pub aborted: Option<String>,
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smallest `K ≥ 1` with `log ψ(k) ≤ (δ/2) φ(k)` for all tabulated `k ≥ K`
/// (one-based).
fn leading_types(family: &CountableFamily, delta: f64) -> Option<usize> {
    let phi = family.phi.as_ref()?;
    let psi = family.psi.as_ref()?;
    let mut k = phi.len();
    while k > 0 && psi[k - 1].ln() <= 0.5 * delta * phi[k - 1] {
        k -= 1;
    }
    (k < phi.len()).then_some(k + 1)
}

/// Finds fixed points of each truncation in `schedule`, following one
/// branch by nearest continuation.
pub fn truncation_scan(family: &CountableFamily, schedule: &[usize], opts: &FinderOptions) -> Result<TruncationScan> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("schedule must be a nonempty increasing list".into()));
    }
    let delta = family.epsilon.map(|e| (1.0 + e).ln());
    let leading = delta.and_then(|d| leading_types(family, d));
    let floor = delta.map(|d| 0.5 * d);
    let mut records: Vec<ScanRecord> = Vec::new();
    let mut aborted = None;
    for &d in schedule {
        let model = truncate(family, d)?;
        let report = analyze(&model)?;
        let failures = report.failures();
        if !failures.is_empty() {
            aborted = Some(format!("truncation at d = {d} fails: {}", failures.join("; ")));
            break;
        }
        let Some(witness) = report.gf_pos.as_ref() else {
            aborted = Some(format!("truncation at d = {d}: no positivity witness"));
            break;
        };
        let mut local = opts.clone();
        if let Some(prev) = records.last() {
            let mut seed = prev.representative_q.clone();
            let last = *seed.last().unwrap();
            seed.resize(d, last);
            local.extra_seeds.insert(0, seed);
        }
        let found = match find_fixed_points(&model, &local) {
            Ok(f) => f,
            Err(e) => {
                aborted = Some(format!("truncation at d = {d}: {e}"));
                break;
            }
        };
        if found.points.is_empty() {
            aborted = Some(format!("truncation at d = {d}: no fixed point found"));
            break;
        }
        let chosen = match records.last() {
            Some(prev) => found
                .points
                .iter()
                .min_by(|a, b| {
                    sup_distance(&a.lambda, &prev.representative).total_cmp(&sup_distance(&b.lambda, &prev.representative))
                })
                .unwrap(),
            None => &found.points[0],
        };
        let limsup_bounds: Vec<f64> = (0..d).map(|k| -witness.certified(k, k).ln()).collect();
        let below_limsup = chosen.lambda.iter().zip(&limsup_bounds).all(|(l, b)| l <= b);
        let max_leading = chosen.lambda[..leading.unwrap_or(1).min(d)].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        records.push(ScanRecord {
            d,
            rho: report.rho,
            fixed_points: found.points.iter().map(|p| p.lambda.clone()).collect(),
            representative: chosen.lambda.clone(),
            representative_q: chosen.q.clone(),
            residual: chosen.residual,
            sup_diff: records.last().map(|prev| sup_distance(&chosen.lambda, &prev.representative)),
            limsup_bounds,
            below_limsup,
            max_leading,
            above_floor: floor.map(|f| max_leading > f),
        });
    }
    let diffs: Vec<f64> = records.iter().filter_map(|r| r.sup_diff).collect();
    Ok(TruncationScan {
        schedule: schedule.to_vec(),
        monotone_differences: diffs.windows(2).all(|w| w[1] <= w[0]),
        all_below_limsup: records.iter().all(|r| r.below_limsup),
        all_above_floor: floor.map(|_| records.iter().all(|r| r.above_floor == Some(true))),
        records,
        delta,
        leading_types: leading,
        floor,
        aborted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AssumptionVerdict {
    SampledPass,
    Fail,
    Uncheckable,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub verdict: AssumptionVerdict,
    pub detail: String,
    /// Offending type (zero-based) for failures.
    pub witness_type: Option<usize>,
    /// Per-type constants found on the sample (`C_k` for bounded spatial growth).
    pub constants: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub samples: usize,
    pub sample_box: f64,
    pub warnings: Vec<String>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict == AssumptionVerdict::SampledPass)
    }
}

/// Deterministic sample of `q ∈ [1, SAMPLE_BOX]^d`: constant vectors,
/// single raised coordinates and seeded uniform points.
fn sample_points(d: usize) -> Vec<Vec<f64>> {
    let mut points = Vec::new();
    for i in 0..=8 {
        points.push(vec![1.0 + (SAMPLE_BOX - 1.0) * i as f64 / 8.0; d]);
    }
    for j in 0..d {
        let mut q = vec![1.0; d];
        q[j] = SAMPLE_BOX;
        points.push(q);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    while points.len() < SAMPLES_PER_CHECK {
        let scale: f64 = rng.gen();
        points.push((0..d).map(|_| 1.0 + (SAMPLE_BOX - 1.0) * scale * rng.gen::<f64>()).collect());
    }
    points
}

fn check_truncations(family: &CountableFamily) -> AssumptionCheck {
    for d in 1..=family.d_max() {
        let outcome = truncate(family, d).and_then(|m| analyze(&m));
        let failure = match outcome {
            Ok(r) if r.failures().is_empty() && r.gf_bded.is_some() && r.gf_pos.is_some() => None,
            Ok(r) if r.failures().is_empty() => Some("missing witness".to_string()),
            Ok(r) => Some(r.failures().join("; ")),
            Err(e) => Some(e.to_string()),
        };
        if let Some(detail) = failure {
            return AssumptionCheck {
                name: "I (truncations satisfy the finite-type hypotheses)".into(),
                verdict: AssumptionVerdict::Fail,
                detail: format!("d = {d}: {detail}"),
                witness_type: Some(d - 1),
                constants: None,
            };
        }
    }
    AssumptionCheck {
        name: "I (truncations satisfy the finite-type hypotheses)".into(),
        verdict: AssumptionVerdict::SampledPass,
        detail: format!("every truncation d = 1..={} passes", family.d_max()),
        witness_type: None,
        constants: None,
    }
}

fn check_spatial_growth(family: &CountableFamily, samples: &[Vec<f64>]) -> AssumptionCheck {
    let name = "II (bounded spatial growth)".to_string();
    let model = &family.model;
    let d = model.d();
    let mut constants = vec![1.0f64; d];
    for q in samples {
        let f = eval_f_unchecked(model, q);
        let lifted: Vec<f64> = q.iter().map(|x| x.ln() * family.alpha).collect();
        let g = eval_g_unchecked(model, &lifted);
        for k in 0..d {
            if f[k] <= q[k] {
                if !(g[k] < LOG_CAP) {
                    return AssumptionCheck {
                        name,
                        verdict: AssumptionVerdict::Fail,
                        detail: format!("f_k(q^alpha) overflows for type {k}"),
                        witness_type: Some(k),
                        constants: None,
                    };
                }
                constants[k] = constants[k].max(g[k].exp());
            }
        }
    }
    AssumptionCheck {
        name,
        verdict: AssumptionVerdict::SampledPass,
        detail: format!(
            "alpha = {}; C_k is the largest f_k(q^alpha) over sampled q in [1, {SAMPLE_BOX}]^d with f_k(q) <= q_k",
            family.alpha
        ),
        witness_type: None,
        constants: Some(constants.iter().map(|c| c * (1.0 + 1e-9)).collect()),
    }
}

fn check_growth_in_k(family: &CountableFamily, samples: &[Vec<f64>]) -> AssumptionCheck {
    let name = "III (bounded growth in k)".to_string();
    let (Some(phi), Some(psi)) = (family.phi.as_ref(), family.psi.as_ref()) else {
        return AssumptionCheck {
            name,
            verdict: AssumptionVerdict::Uncheckable,
            detail: "phi or psi missing".into(),
            witness_type: None,
            constants: None,
        };
    };
    let fail = |detail: String, k: Option<usize>| AssumptionCheck {
        name: name.clone(),
        verdict: AssumptionVerdict::Fail,
        detail,
        witness_type: k,
        constants: None,
    };
    let last = phi.len() - 1;
    if !(phi[last] > phi[0]) {
        return fail("phi does not grow over the tabulated range".into(), Some(last));
    }
    if let Some(k) = phi.windows(2).position(|w| w[1] < w[0]) {
        return fail(format!("phi decreases at type {}", k + 1), Some(k + 1));
    }
    let ratio = |k: usize| psi[k].ln() / phi[k];
    if ratio(last) > 0.0 && ratio(last) >= ratio(0) {
        return fail("log psi / phi does not decay over the tabulated range".into(), Some(last));
    }
    let model = &family.model;
    for q in samples {
        let lambda: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        let g = eval_g_unchecked(model, &lambda);
        for k in 0..model.d() {
            let bound = psi[k].ln() + phi[k] * g[0];
            if g[k] > bound + INEQUALITY_SLACK * (1.0 + bound.abs()) {
                return fail(format!("log f_k(q) = {} exceeds log psi + phi log f_1 = {bound} for type {k}", g[k]), Some(k));
            }
        }
    }
    AssumptionCheck {
        name,
        verdict: AssumptionVerdict::SampledPass,
        detail: format!("f_k(q) <= psi(k) f_1(q)^phi(k) on {} sampled q in [1, {SAMPLE_BOX}]^d", samples.len()),
        witness_type: None,
        constants: None,
    }
}

fn check_weighted_subcriticality(family: &CountableFamily) -> AssumptionCheck {
    let name = "IV (subcriticality with weights)".to_string();
    let (Some(phi), Some(eps)) = (family.phi.as_ref(), family.epsilon) else {
        return AssumptionCheck {
            name,
            verdict: AssumptionVerdict::Uncheckable,
            detail: "phi or epsilon missing".into(),
            witness_type: None,
            constants: None,
        };
    };
    let delta = (1.0 + eps).ln();
    let lambda: Vec<f64> = phi.iter().map(|p| delta * p).collect();
    let g = eval_g_unchecked(&family.model, &lambda);
    let (worst, value) = g.iter().cloned().enumerate().fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    if value > delta + INEQUALITY_SLACK {
        return AssumptionCheck {
            name,
            verdict: AssumptionVerdict::Fail,
            detail: format!("E_k[(1+eps)^(sum phi X)] = {} > 1 + eps for type {worst}", value.exp()),
            witness_type: Some(worst),
            constants: None,
        };
    }
    AssumptionCheck {
        name,
        verdict: AssumptionVerdict::SampledPass,
        detail: format!("largest E_k[(1+eps)^(sum phi X)] = {} (type {worst}) <= {}", value.exp(), 1.0 + eps),
        witness_type: None,
        constants: None,
    }
}

/// Sampled verdicts for the four conditions; never a proof.
pub fn check_assumptions(family: &CountableFamily) -> AssumptionReport {
    let samples = sample_points(family.d_max());
    AssumptionReport {
        checks: vec![
            check_truncations(family),
            check_spatial_growth(family, &samples),
            check_growth_in_k(family, &samples),
            check_weighted_subcriticality(family),
        ],
        samples: samples.len(),
        sample_box: SAMPLE_BOX,
        warnings: family.warnings.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled::demo_countable;
    use crate::model::eval_f;

    fn tiny_family(phi: &str) -> CountableFamily {
        CountableFamily::from_json_str(&format!(
            r#"{{"d_max":3,"phi":{phi},"psi":[1,1,1],"epsilon":0.01,"types":[
              {{"entries":[{{"counts":[2,0,0],"prob":"1/10"}},{{"counts":[0,1,1],"prob":"1/10"}},{{"counts":[0,0,1],"prob":"1/10"}},{{"counts":[0,0,0],"prob":"7/10"}}]}},
              {{"entries":[{{"counts":[1,0,0],"prob":"1/10"}},{{"counts":[0,0,0],"prob":"9/10"}}]}},
              {{"entries":[{{"counts":[1,0,0],"prob":"1/10"}},{{"counts":[0,0,0],"prob":"9/10"}}]}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn truncation_merges_collisions() {
        let fam = tiny_family("[1,2,3]");
        let m = truncate(&fam, 2).unwrap();
        // (0,1,1) becomes (0,1); (0,0,1) lands on the empty entry
        let dist = m.dist(0);
        let empty = dist.entries.iter().find(|e| e.counts == vec![0, 0]).unwrap();
        assert_eq!(empty.prob.value(), 0.8);
        assert_eq!(dist.entries.len(), 3);
        assert!(m.is_exact());
    }

    #[test]
    fn truncation_matches_pgf_with_ones() {
        let fam = tiny_family("[1,2,3]");
        let m = truncate(&fam, 2).unwrap();
        let q = [1.3, 1.7];
        let full = eval_f(fam.model(), &[1.3, 1.7, 1.0]).unwrap();
        let trunc = eval_f(&m, &q).unwrap();
        for k in 0..2 {
            assert!((full[k] - trunc[k]).abs() < 1e-15);
        }
        assert_eq!(truncate(&fam, 3).unwrap(), *fam.model());
        assert!(truncate(&fam, 0).is_err() && truncate(&fam, 4).is_err());
    }

    #[test]
    fn constant_phi_fails_growth() {
        let report = check_assumptions(&tiny_family("[1,1,1]"));
        assert_eq!(report.checks[2].verdict, AssumptionVerdict::Fail);
    }

    #[test]
    fn missing_tables_are_uncheckable() {
        let fam = CountableFamily::from_json_str(
            r#"{"d_max":1,"types":[{"entries":[{"counts":[2],"prob":"1/4"},{"counts":[0],"prob":"3/4"}]}]}"#,
        )
        .unwrap();
        let report = check_assumptions(&fam);
        assert_eq!(report.checks[2].verdict, AssumptionVerdict::Uncheckable);
        assert_eq!(report.checks[3].verdict, AssumptionVerdict::Uncheckable);
    }

    #[test]
    fn supercritical_family_fails_weighted_subcriticality() {
        let fam = CountableFamily::from_json_str(
            r#"{"d_max":1,"phi":[1],"psi":[1],"epsilon":0.1,"types":[{"entries":[{"counts":[2],"prob":"3/4"},{"counts":[0],"prob":"1/4"}]}]}"#,
        )
        .unwrap();
        let report = check_assumptions(&fam);
        assert_eq!(report.checks[3].verdict, AssumptionVerdict::Fail);
        assert_eq!(report.checks[0].verdict, AssumptionVerdict::Fail);
    }

    #[test]
    fn demo_passes_sampled_checks() {
        let report = check_assumptions(&demo_countable());
        for c in &report.checks {
            assert_eq!(c.verdict, AssumptionVerdict::SampledPass, "{c:?}");
        }
    }

    #[test]
    fn rejects_small_weights() {
        let text = r#"{"d_max":1,"phi":[0.5],"types":[{"entries":[{"counts":[0],"prob":"1/1"}]}]}"#;
        assert!(CountableFamily::from_json_str(text).is_err());
    }
}
