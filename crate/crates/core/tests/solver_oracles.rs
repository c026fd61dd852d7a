use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trocar_core::kinematics::JointLimits;
use trocar_core::solver::projected_gradient_residual;
use trocar_core::{solve_box_qp, step_bounds, BoxBounds, KinematicChain, SolverSettings, SqpSolver, TaskParams};

fn random_instance(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>, BoxBounds) {
    let n = rng.random_range(1..=7);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = a.tr_mul(&a) / n as f64 + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let lower = DVector::from_fn(n, |_, _| rng.random_range(-1.5..0.0));
    let upper = DVector::from_fn(n, |i, _| lower[i] + rng.random_range(0.0..2.0));
    (h, g, BoxBounds::new(lower, upper).unwrap())
}

/// Projected gradient with step 1/L, run far past convergence.
fn projected_gradient_oracle(h: &DMatrix<f64>, g: &DVector<f64>, bounds: &BoxBounds) -> DVector<f64> {
    let lipschitz = h.symmetric_eigenvalues().max();
    let mut x = bounds.clamp(&DVector::zeros(g.len()));
    for _ in 0..200_000 {
        let next = bounds.clamp(&(&x - (h * &x + g) / lipschitz));
        let done = (&next - &x).amax() < 1e-15;
        x = next;
        if done {
            break;
        }
    }
    x
}

#[test]
fn active_set_matches_projected_gradient_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..200 {
        let (h, g, bounds) = random_instance(&mut rng);
        let start = bounds.clamp(&DVector::zeros(g.len()));
        let x = solve_box_qp(&h, &g, &bounds, &start).unwrap();
        let oracle = projected_gradient_oracle(&h, &g, &bounds);
        assert!((&x - &oracle).norm() <= 1e-6, "instance {k}: {x} vs {oracle}");
        assert!(bounds.contains(&x, 0.0));
    }
}

/// Closed-form elbow configurations reaching `p` with unit links.
fn two_link_ik(p: &Vector3<f64>) -> Option<[[f64; 2]; 2]> {
    let r2 = p.x * p.x + p.y * p.y;
    let c = (r2 - 2.0) / 2.0;
    if !(-1.0..=1.0).contains(&c) {
        return None;
    }
    let s = (1.0 - c * c).sqrt();
    let sol = |b: f64| [p.y.atan2(p.x) - b.sin().atan2(1.0 + b.cos()), b];
    Some([sol(s.atan2(c)), sol((-s).atan2(c))])
}

#[test]
fn goal_dominant_task_solves_planar_ik() {
    let chain = KinematicChain::planar_2link();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Elbow confined to one branch, so the closed form has a unique answer.
    let pi = std::f64::consts::PI;
    let bounds = BoxBounds::new(DVector::from_vec(vec![-2.0 * pi, 0.05]), DVector::from_vec(vec![2.0 * pi, pi - 0.05])).unwrap();
    for _ in 0..30 {
        let radius: f64 = rng.random_range(0.4..1.9);
        let angle: f64 = rng.random_range(-3.0..3.0);
        let goal = Vector3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
        let [elbow_up, elbow_down] = two_link_ik(&goal).expect("reachable by construction");
        for sol in [elbow_up, elbow_down] {
            let fk = chain.tip_position(&sol).unwrap();
            assert!((fk - goal).norm() < 1e-12);
        }

        let start = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(0.3..2.5)]);
        let params = TaskParams::new(goal, Vector3::x(), goal, start)
            .unwrap()
            .with_weights([1e-12, 1.0, 1e-12, 1e-12, 1.0])
            .unwrap();
        let outcome = SqpSolver::new(SolverSettings::default())
            .unwrap()
            .solve(&chain, &params, &bounds)
            .unwrap();
        let tip = chain.tip_position(outcome.q_star.as_slice()).unwrap();
        assert!((tip - goal).norm() < 1e-6, "miss {:e}", (tip - goal).norm());
        assert!(outcome.iterations <= 20, "{} iterations", outcome.iterations);
        assert!((outcome.q_star[1] - elbow_up[1]).abs() < 1e-5);
        let wrapped = (outcome.q_star[0] - elbow_up[0]).rem_euclid(2.0 * pi);
        assert!(wrapped.min(2.0 * pi - wrapped) < 1e-5);
    }
}

proptest! {
    #[test]
    fn qp_solution_is_stationary_and_feasible(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, g, bounds) = random_instance(&mut rng);
        let start = bounds.clamp(&DVector::from_fn(g.len(), |_, _| rng.random_range(-1.0..1.0)));
        let x = solve_box_qp(&h, &g, &bounds, &start).unwrap();
        prop_assert!(bounds.contains(&x, 0.0));
        prop_assert!(projected_gradient_residual(&x, &(&h * &x + &g), &bounds) < 1e-10);
    }

    #[test]
    fn step_bounds_respect_both_limits(q in prop::collection::vec(-2.0f64..2.0, 7), dt in 1e-4f64..0.05) {
        let limits = JointLimits::lbr_med7(0.1);
        let q = DVector::from_vec(q);
        let step = step_bounds(&limits, &q, dt).unwrap();
        prop_assert!(!step.clamped);
        for i in 0..7 {
            prop_assert!(step.bounds.lower[i] >= limits.q_min[i]);
            prop_assert!(step.bounds.upper[i] <= limits.q_max[i]);
            prop_assert!(step.bounds.lower[i] >= q[i] - dt * limits.qdot_max[i] - 1e-15);
            prop_assert!(step.bounds.upper[i] <= q[i] + dt * limits.qdot_max[i] + 1e-15);
            prop_assert!(step.bounds.lower[i] <= q[i] && q[i] <= step.bounds.upper[i]);
        }
    }

    #[test]
    fn sqp_stays_in_bounds_and_never_increases_cost(seed in 0u64..500) {
        let chain = KinematicChain::lbr_med7();
        let limits = JointLimits::lbr_med7(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DVector::from_fn(7, |i, _| rng.random_range(limits.q_min[i] * 0.8..limits.q_max[i] * 0.8));
        let tip = chain.tip_position(q.as_slice()).unwrap();
        let goal = tip + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0).normalize();
        let mut params = TaskParams::new(goal, axis, goal, q.clone()).unwrap();
        if seed % 2 == 0 {
            params = params.with_force_feedback(tip + Vector3::new(0.0, 0.0, 0.003));
        }
        let bounds = step_bounds(&limits, &q, 0.005).unwrap().bounds;
        let mut solver = SqpSolver::new(SolverSettings::default()).unwrap();
        let outcome = solver.solve(&chain, &params, &bounds).unwrap();
        prop_assert!(bounds.contains(&outcome.q_star, 0.0));
        for pair in solver.cost_history().windows(2) {
            prop_assert!(pair[1] <= pair[0]);
        }
    }
}

