use std::sync::Arc;

use mh_ldp::kernel::{build_kernel, MatrixKernel, ProposalSpec, TargetSpec};
use mh_ldp::measures::{joint_relative_entropy, DiscreteMeasure, StateSpace};
use mh_ldp::rate::{
    extract_q, legendre_check, rate_dual_dv, rate_from_split, rate_primal_sinkhorn, rate_report, RateOptions,
};
use mh_ldp::{ExtReal, Matrix, MhKernel, StochasticKernel};
use proptest::prelude::*;

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn kernel(probs: Vec<f64>, rows: Vec<Vec<f64>>) -> MhKernel {
    let m = probs.len();
    let space = Arc::new(StateSpace::finite(m).unwrap());
    build_kernel(
        &TargetSpec::Probabilities { probs: normalize(probs) },
        &ProposalSpec::Matrix { rows: rows.into_iter().map(normalize).collect() },
        space,
    )
    .unwrap()
}

/// A kernel on `m` states and a measure that may miss some states.
fn instance() -> impl Strategy<Value = (MhKernel, DiscreteMeasure)> {
    (2usize..=6).prop_flat_map(|m| {
        (
            prop::collection::vec(0.05f64..1.0, m),
            prop::collection::vec(prop::collection::vec(0.05f64..1.0, m), m),
            prop::collection::vec(prop_oneof![Just(0.0), 0.05f64..1.0], m),
            0usize..m,
        )
            .prop_map(|(probs, rows, mut nu, keep)| {
                let k = kernel(probs, rows);
                nu[keep] = nu[keep].max(0.5);
                let nu = DiscreteMeasure::from_unnormalized(k.space().clone(), nu).unwrap();
                (k, nu)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rate_is_nonnegative_and_sandwiched((k, nu) in instance()) {
        let opts = RateOptions::default();
        let primal = rate_primal_sinkhorn(&nu, &k, &opts).unwrap();
        let dual = rate_dual_dv(&nu, &k).unwrap();
        let (p, d) = (primal.value.to_f64(), dual.value.to_f64());
        prop_assert!(p >= -1e-12);
        prop_assert!(d <= p + 1e-6);
        prop_assert!((p - d).abs() <= 1e-6, "primal {} dual {}", p, d);
    }

    #[test]
    fn optimal_coupling_is_feasible_and_routes_agree((k, nu) in instance()) {
        let rep = rate_report(&nu, &k, &RateOptions::default()).unwrap();
        let c = rep.coupling.as_ref().unwrap();
        let (r1, r2) = c.marginal_residuals(&nu);
        prop_assert!(r1 <= 1e-10 && r2 <= 1e-10);
        let ex = rep.extraction.as_ref().unwrap();
        prop_assert!(ex.q.invariance_residual(&nu) <= 1e-9);
        let split = rate_from_split(&ex.split, &nu, &k).unwrap().to_f64();
        let joint = joint_relative_entropy(&c.to_dense(), &nu, k.kernel()).unwrap().to_f64();
        prop_assert!((split - joint).abs() <= 1e-10, "split {} joint {}", split, joint);
        prop_assert!((joint - rep.value.to_f64()).abs() <= 1e-12);
    }

    #[test]
    fn rate_is_convex((k, a) in instance(), seed in 0u64..1000, t in prop::sample::select(vec![0.25, 0.5, 0.75])) {
        let m = k.len();
        let w: Vec<f64> = (0..m).map(|i| 0.1 + ((seed as usize * 31 + i * 17) % 13) as f64).collect();
        let b = DiscreteMeasure::from_unnormalized(k.space().clone(), w).unwrap();
        let opts = RateOptions::default();
        let ia = rate_primal_sinkhorn(&a, &k, &opts).unwrap().value.to_f64();
        let ib = rate_primal_sinkhorn(&b, &k, &opts).unwrap().value.to_f64();
        let im = rate_primal_sinkhorn(&a.mix(&b, t).unwrap(), &k, &opts).unwrap().value.to_f64();
        prop_assert!(im <= t * ia + (1.0 - t) * ib + 2e-6);
    }

    #[test]
    fn rate_vanishes_at_target((k, _) in instance()) {
        let pi = DiscreteMeasure::new(k.space().clone(), k.target().to_vec()).unwrap();
        prop_assert!(rate_primal_sinkhorn(&pi, &k, &RateOptions::default()).unwrap().value.to_f64() <= 1e-9);
    }

    #[test]
    fn legendre_identity((k, _) in instance(), f in prop::collection::vec(-2.0f64..2.0, 6)) {
        let f = &f[..k.len()];
        let rep = legendre_check(&k, f, &RateOptions::default()).unwrap();
        prop_assert!(rep.gap <= 1e-6, "gap {}", rep.gap);
    }
}

#[test]
fn any_invariant_kernel_costs_at_least_the_rate() {
    // Mixing the optimal q with the identity keeps nu invariant; its cost can
    // only be larger.
    let k = kernel(vec![0.5, 0.3, 0.2], vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.2, 0.4], vec![0.3, 0.3, 0.4]]);
    let nu = DiscreteMeasure::new(k.space().clone(), vec![0.2, 0.3, 0.5]).unwrap();
    let rep = rate_report(&nu, &k, &RateOptions::default()).unwrap();
    let q = rep.extraction.unwrap().q.to_dense();
    for lam in [0.1, 0.5, 0.9] {
        let mixed = Matrix::from_fn(3, 3, |i, j| lam * q[(i, j)] + (1.0 - lam) * if i == j { 1.0 } else { 0.0 });
        let gamma = Matrix::from_fn(3, 3, |i, j| nu.mass(i) * mixed[(i, j)]);
        let cost = joint_relative_entropy(&gamma, &nu, k.kernel()).unwrap().to_f64();
        assert!(cost >= rep.value.to_f64() - 1e-12);
    }
}

#[test]
fn extraction_requires_matching_marginal() {
    let k = kernel(vec![0.5, 0.5], vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    let nu = DiscreteMeasure::new(k.space().clone(), vec![0.5, 0.5]).unwrap();
    let other = DiscreteMeasure::new(k.space().clone(), vec![0.9, 0.1]).unwrap();
    let gamma = rate_primal_sinkhorn(&other, &k, &RateOptions::default()).unwrap().coupling.unwrap();
    assert!(extract_q(&gamma, &nu, &k).is_err());
}

#[test]
fn infinite_rate_agrees_across_routes() {
    // A strictly positive proposal keeps every MH rate finite, so the
    // infinite case uses a plain kernel: the flip chain has no self-loop.
    let space = Arc::new(StateSpace::finite(2).unwrap());
    let flip = MatrixKernel::new(space.clone(), Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
    let d = DiscreteMeasure::dirac(space, 1).unwrap();
    let rep = rate_primal_sinkhorn(&d, &flip, &RateOptions::default()).unwrap();
    assert_eq!(rep.value, ExtReal::Infinite);
    assert!(rep.certificate.is_some());
    assert_eq!(rate_dual_dv(&d, &flip).unwrap().value, ExtReal::Infinite);
}
