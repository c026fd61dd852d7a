use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trocar_core::task::{evaluate_cost, gauss_newton_model, objective_value, smoothed_norm};
use trocar_core::{total_objective, CostTerm, KinematicChain, TaskParams};

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 {
            return v.normalize();
        }
    }
}

fn random_task(rng: &mut ChaCha8Rng, chain: &KinematicChain, q: &DVector<f64>) -> TaskParams {
    let tip = chain.tip_position(q.as_slice()).unwrap();
    let jitter = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let q_prev = q.map(|v| v + rng.random_range(-0.05..0.05));
    let anchor = tip + jitter(rng, 0.05);
    let goal = tip + jitter(rng, 0.05);
    // Keep the reference a few ε away so the smoothed term is well resolved by FD.
    let reference = tip + unit(rng) * rng.random_range(0.001..0.02);
    let weights = [0.0; 5].map(|_: f64| rng.random_range(0.5..30.0));
    TaskParams::new(anchor, unit(rng), goal, q_prev)
        .unwrap()
        .with_weights(weights)
        .unwrap()
        .with_force_feedback(reference)
}

fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, q: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(q.len(), |j, _| {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        (f(&qp) - f(&qm)) / (2.0 * h)
    })
}

fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-8)
}

#[test]
fn every_term_gradient_matches_finite_differences() {
    let chain = KinematicChain::lbr_med7();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let q = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let params = random_task(&mut rng, &chain, &q);
        for term in CostTerm::ALL {
            let (_, grad) = evaluate_cost(term, &q, &params, &chain).unwrap();
            let numeric = fd_gradient(|x| evaluate_cost(term, x, &params, &chain).unwrap().0, &q);
            let err = relative_error(&grad, &numeric);
            assert!(err < 1e-5, "{term:?}: relative error {err:e}");
        }
    }
}

#[test]
fn total_gradient_matches_finite_differences() {
    let chain = KinematicChain::lbr_med7();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let q = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let params = random_task(&mut rng, &chain, &q);
        let report = total_objective(&q, &params, &chain).unwrap();
        let numeric = fd_gradient(|x| objective_value(x, &params, &chain).unwrap(), &q);
        assert!(relative_error(&report.gradient, &numeric) < 1e-5);
        let weighted: f64 = report.values.iter().zip(params.weights).map(|(v, w)| v * w).sum();
        assert!((weighted - report.total).abs() <= 1e-12 * report.total.max(1.0));
    }
}

#[test]
fn gauss_newton_gradient_agrees_with_report() {
    let chain = KinematicChain::lbr_med7();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let q = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let params = random_task(&mut rng, &chain, &q);
        let gn = gauss_newton_model(&q, &params, &chain).unwrap();
        let report = total_objective(&q, &params, &chain).unwrap();
        assert!(relative_error(&gn.gradient, &report.gradient) < 1e-12);
        let h = gn.hessian(0.0);
        assert!((&h - h.transpose()).amax() < 1e-9 * h.amax());
        assert!(h.symmetric_eigenvalues().min() > -1e-9 * h.amax());
    }
}

proptest! {
    #[test]
    fn terms_are_non_negative(q in prop::collection::vec(-3.0f64..3.0, 7), seed in 0u64..1000) {
        let chain = KinematicChain::lbr_med7();
        let q = DVector::from_vec(q);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_task(&mut rng, &chain, &q);
        let report = total_objective(&q, &params, &chain).unwrap();
        prop_assert!(report.values.iter().all(|v| *v >= 0.0));
        prop_assert!(report.total >= 0.0);
    }

    #[test]
    fn axis_line_cost_ignores_motion_along_the_line(shift in -0.5f64..0.5, seed in 0u64..1000) {
        let chain = KinematicChain::lbr_med7();
        let q = DVector::from_vec(vec![0.1, 0.4, -0.2, -1.2, 0.3, 0.8, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = random_task(&mut rng, &chain, &q);
        let (before, _) = evaluate_cost(CostTerm::AxisLine, &q, &params, &chain).unwrap();
        params.axis_anchor += params.insertion_axis * shift;
        let (after, _) = evaluate_cost(CostTerm::AxisLine, &q, &params, &chain).unwrap();
        prop_assert!((before - after).abs() <= 1e-12 * before.max(1e-6));
    }

    #[test]
    fn smoothing_stays_within_epsilon_of_the_norm(d in 0.0f64..1.0, eps in 1e-6f64..1e-2) {
        let s = smoothed_norm(d, eps);
        prop_assert!(s >= 0.0);
        prop_assert!(s <= d + 1e-15);
        prop_assert!(d - s <= eps + 1e-15);
    }

    #[test]
    fn disabling_feedback_drops_only_the_last_term(seed in 0u64..1000) {
        let chain = KinematicChain::lbr_med7();
        let q = DVector::from_vec(vec![0.2, 0.6, 0.0, -1.0, 0.1, 0.7, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with = random_task(&mut rng, &chain, &q);
        let mut without = with.clone();
        without.ff_enabled = false;
        let a = total_objective(&q, &with, &chain).unwrap();
        let b = total_objective(&q, &without, &chain).unwrap();
        prop_assert_eq!(&a.values[..4], &b.values[..4]);
        prop_assert_eq!(b.values[4], 0.0);
        prop_assert!((a.total - b.total - with.weights[4] * a.values[4]).abs() <= 1e-12 * a.total.max(1.0));
    }
}
