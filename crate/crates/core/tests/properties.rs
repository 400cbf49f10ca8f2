use nalgebra::DMatrix;
use proptest::prelude::*;

use bpconj::basins::{BasinContext, Verdict, DEFAULT_MAX_ITERS};
use bpconj::bundled;
use bpconj::countable::truncate;
use bpconj::fixedpoint::{find_fixed_points, FinderOptions};
use bpconj::model::{eval_f, eval_f_iter, eval_g, jacobian_f, OffspringDistribution, OffspringEntry, Prob};
use bpconj::spectral::{mean_matrix, perron_root};
use bpconj::ProcessModel;

/// Rows of `(counts, weight)` per type, normalised into a float model.
fn arb_model(max_d: usize) -> impl Strategy<Value = ProcessModel> {
    (1..=max_d).prop_flat_map(|d| {
        let row = prop::collection::btree_map(prop::collection::vec(0u32..=3, d), 0.05f64..1.0, 1..=5);
        prop::collection::vec(row, d).prop_map(|rows| {
            let dists = rows
                .into_iter()
                .map(|row| {
                    let total: f64 = row.values().sum();
                    OffspringDistribution::new(
                        row.into_iter().map(|(c, w)| OffspringEntry::new(c, Prob::from_f64(w / total))).collect(),
                    )
                })
                .collect();
            ProcessModel::new(dists).unwrap()
        })
    })
}

fn point(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

fn model_and_points(max_d: usize, n: usize, lo: f64, hi: f64) -> impl Strategy<Value = (ProcessModel, Vec<Vec<f64>>)> {
    arb_model(max_d).prop_flat_map(move |m| {
        let d = m.d();
        (Just(m), prop::collection::vec(point(d, lo, hi), n))
    })
}

/// Model with types relabelled so that new type `i` is old type `perm[i]`.
fn permute(model: &ProcessModel, perm: &[usize]) -> ProcessModel {
    let dists = perm
        .iter()
        .map(|&old| {
            let entries = model
                .dist(old)
                .entries
                .iter()
                .map(|e| OffspringEntry::new(perm.iter().map(|&j| e.counts[j]).collect(), e.prob.clone()))
                .collect();
            OffspringDistribution::new(entries)
        })
        .collect();
    ProcessModel::new(dists).unwrap()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn f_fixes_one(m in arb_model(4)) {
        let one = vec![1.0; m.d()];
        prop_assert!(sup(&eval_f(&m, &one).unwrap(), &one) < 1e-12);
    }

    #[test]
    fn f_is_monotone((m, pts) in model_and_points(4, 2, 0.0, 2.0)) {
        let lo: Vec<f64> = pts[0].iter().zip(&pts[1]).map(|(a, b)| a.min(*b)).collect();
        let hi: Vec<f64> = pts[0].iter().zip(&pts[1]).map(|(a, b)| a.max(*b)).collect();
        let (flo, fhi) = (eval_f(&m, &lo).unwrap(), eval_f(&m, &hi).unwrap());
        prop_assert!(flo.iter().zip(&fhi).all(|(a, b)| *a <= *b * (1.0 + 1e-14)));
    }

    #[test]
    fn g_is_log_of_f_and_convex((m, pts) in model_and_points(4, 2, -2.0, 3.0)) {
        let (x, y) = (&pts[0], &pts[1]);
        let gx = eval_g(&m, x).unwrap();
        let fx = eval_f(&m, &x.iter().map(|v| v.exp()).collect::<Vec<_>>()).unwrap();
        for (g, f) in gx.iter().zip(&fx) {
            prop_assert!((g - f.ln()).abs() <= 1e-12 * g.abs().max(1.0));
        }
        let mid: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
        let (gm, gy) = (eval_g(&m, &mid).unwrap(), eval_g(&m, y).unwrap());
        for k in 0..m.d() {
            prop_assert!(gm[k] <= 0.5 * (gx[k] + gy[k]) + 1e-12 * gm[k].abs().max(1.0));
        }
    }

    #[test]
    fn iterates_compose((m, pts) in model_and_points(3, 1, 0.0, 1.0), a in 1usize..4, b in 1usize..4) {
        let q = &pts[0];
        let whole = eval_f_iter(&m, q, a + b).unwrap().q;
        let first = eval_f_iter(&m, q, a).unwrap().q;
        let split = eval_f_iter(&m, &first, b).unwrap().q;
        prop_assert!(sup(&whole, &split) < 1e-13);
        let mut manual = q.clone();
        for _ in 0..a + b {
            manual = eval_f(&m, &manual).unwrap();
        }
        prop_assert!(sup(&whole, &manual) < 1e-13);
    }

    #[test]
    fn jacobian_matches_differences((m, pts) in model_and_points(4, 1, 0.5, 2.0)) {
        let q = &pts[0];
        let jac = jacobian_f(&m, q).unwrap();
        for j in 0..m.d() {
            let h = 1e-6;
            let (mut up, mut down) = (q.clone(), q.clone());
            up[j] += h;
            down[j] -= h;
            let (fu, fd) = (eval_f(&m, &up).unwrap(), eval_f(&m, &down).unwrap());
            for i in 0..m.d() {
                let fdq = (fu[i] - fd[i]) / (2.0 * h);
                prop_assert!((jac[(i, j)] - fdq).abs() <= 1e-5 * jac[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn mean_matrix_is_jacobian_at_one(m in arb_model(4)) {
        let jac = jacobian_f(&m, &vec![1.0; m.d()]).unwrap();
        prop_assert!((jac - mean_matrix(&m)).amax() < 1e-12);
    }

    #[test]
    fn relabelling_is_equivariant((m, pts) in model_and_points(4, 1, 0.0, 2.0), seed in any::<u64>()) {
        let d = m.d();
        let mut perm: Vec<usize> = (0..d).collect();
        let mut s = seed;
        for i in (1..d).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pm = permute(&m, &perm);
        let q = &pts[0];
        let q_perm: Vec<f64> = perm.iter().map(|&j| q[j]).collect();
        let f = eval_f(&m, q).unwrap();
        let fp = eval_f(&pm, &q_perm).unwrap();
        for i in 0..d {
            prop_assert!((fp[i] - f[perm[i]]).abs() < 1e-13);
        }
    }

    #[test]
    fn perron_root_solves_characteristic_polynomial(m in arb_model(4)) {
        let mm = mean_matrix(&m);
        let d = m.d();
        // Collatz–Wielandt bounds from a high power applied to the ones vector.
        let mut v = nalgebra::DVector::from_element(d, 1.0);
        for _ in 0..200 {
            v = (&mm + DMatrix::identity(d, d)) * &v;
            let n = v.amax();
            v /= n;
        }
        prop_assume!(v.iter().all(|&x| x > 1e-8));
        let shifted = (&mm + DMatrix::identity(d, d)) * &v;
        let ratios: Vec<f64> = (0..d).map(|i| shifted[i] / v[i] - 1.0).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi - lo < 1e-6);
        let rho = perron_root(&mm, None).unwrap().rho;
        prop_assert!(rho >= lo - 1e-6 && rho <= hi + 1e-6, "rho {} outside [{}, {}]", rho, lo, hi);
        let det = (&mm - DMatrix::identity(d, d) * rho).determinant();
        prop_assert!(det.abs() < 1e-6 * (1.0 + mm.amax()).powi(d as i32));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basins_are_forward_invariant(x in 0.0f64..3.0, y in 0.0f64..3.0, z in 0.0f64..3.0) {
        let cx = bundled::counterexample_d2();
        let sq = bundled::single_quadratic();
        for (m, lambda) in [(&cx, vec![x, y]), (&sq, vec![z])] {
            let ctx = BasinContext::new(m).unwrap();
            let v = ctx.classify(&lambda, DEFAULT_MAX_ITERS).unwrap();
            if v.verdict != Verdict::Undecided {
                let next = eval_g(m, &lambda).unwrap();
                let w = ctx.classify(&next, DEFAULT_MAX_ITERS).unwrap();
                prop_assert_eq!(w.verdict, v.verdict);
            }
        }
    }

    #[test]
    fn rays_are_monotone(theta in 0.0f64..std::f64::consts::FRAC_PI_2, r1 in 0.0f64..3.0, r2 in 0.0f64..3.0) {
        let cx = bundled::counterexample_d2();
        let ctx = BasinContext::new(&cx).unwrap();
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        let u = [theta.cos(), theta.sin()];
        let at = |r: f64| ctx.classify(&[r * u[0], r * u[1]], DEFAULT_MAX_ITERS).unwrap().verdict;
        let (vl, vh) = (at(lo), at(hi));
        prop_assert!(!(vl == Verdict::SInfty && vh == Verdict::S0));
    }

    #[test]
    fn truncation_sets_dropped_types_to_one(d in 1usize..=32, q in prop::collection::vec(0.0f64..2.0, 32)) {
        let family = bundled::demo_countable();
        let full = family.model();
        let t = truncate(&family, d).unwrap();
        let mut padded = q[..d].to_vec();
        padded.resize(full.d(), 1.0);
        let ft = eval_f(&t, &q[..d]).unwrap();
        let ff = eval_f(full, &padded).unwrap();
        prop_assert!(sup(&ft, &ff[..d]) < 1e-13);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fixed_points_follow_relabelling(mass in 1u32..=1000) {
        // Move `mass`/10⁶ from (0,0) to (3,1) in type 0 only, breaking the symmetry.
        let text = bundled::COUNTEREXAMPLE_D2.replacen(
            r#"{ "counts": [0, 0], "prob": "49/100" }"#,
            &format!(r#"{{ "counts": [0, 0], "prob": "{}/1000000" }}, {{ "counts": [3, 1], "prob": "{mass}/1000000" }}"#, 490_000 - mass),
            1,
        );
        let m = ProcessModel::from_json_str(&text).unwrap();
        let pm = permute(&m, &[1, 0]);
        let opts = FinderOptions::default();
        let a = find_fixed_points(&m, &opts).unwrap();
        let b = find_fixed_points(&pm, &opts).unwrap();
        prop_assert_eq!(a.points.len(), b.points.len());
        for p in &a.points {
            let swapped = [p.q[1], p.q[0]];
            prop_assert!(b.points.iter().any(|o| sup(&o.q, &swapped) < 1e-8));
        }
    }

    #[test]
    fn fixed_points_stable_under_grid(grid in 9usize..=65) {
        let cx = bundled::counterexample_d2();
        let base = find_fixed_points(&cx, &FinderOptions::default()).unwrap();
        let other = find_fixed_points(&cx, &FinderOptions { grid_per_axis: grid, ..FinderOptions::default() }).unwrap();
        prop_assert_eq!(base.points.len(), other.points.len());
        for (p, o) in base.points.iter().zip(&other.points) {
            prop_assert!(sup(&p.q, &o.q) < 1e-9);
        }
    }
}

/// Brute-force sign-change count on a fine grid: the number of cells where
/// both residual components change sign bounds the fixed points from below.
#[test]
fn fine_grid_sees_three_crossings() {
    let cx = bundled::counterexample_d2();
    let found = find_fixed_points(&cx, &FinderOptions::default()).unwrap();
    let n = 2000;
    let (lo, hi) = (1.01, 2.5);
    let h = (hi - lo) / n as f64;
    let res = |i: usize, j: usize| {
        let q = [lo + i as f64 * h, lo + j as f64 * h];
        let f = eval_f(&cx, &q).unwrap();
        [f[0] - q[0], f[1] - q[1]]
    };
    let mut prev: Vec<[f64; 2]> = (0..=n).map(|j| res(0, j)).collect();
    let mut cells = Vec::new();
    for i in 1..=n {
        let row: Vec<[f64; 2]> = (0..=n).map(|j| res(i, j)).collect();
        for j in 0..n {
            let corners = [prev[j], prev[j + 1], row[j], row[j + 1]];
            let changes = |c: usize| {
                let pos = corners.iter().any(|r| r[c] > 0.0);
                let neg = corners.iter().any(|r| r[c] < 0.0);
                pos && neg
            };
            if changes(0) && changes(1) {
                cells.push((lo + (i as f64 - 0.5) * h, lo + (j as f64 + 0.5) * h));
            }
        }
        prev = row;
    }
    // Adjacent flagged cells belong to the same crossing.
    let mut clusters: Vec<(f64, f64)> = Vec::new();
    for c in cells {
        if !clusters.iter().any(|k| (k.0 - c.0).abs() < 5.0 * h && (k.1 - c.1).abs() < 5.0 * h) {
            clusters.push(c);
        }
    }
    assert_eq!(clusters.len(), 3, "{clusters:?}");
    for k in &clusters {
        assert!(found.points.iter().any(|p| (p.q[0] - k.0).abs() < 2.0 * h && (p.q[1] - k.1).abs() < 2.0 * h));
    }
}
