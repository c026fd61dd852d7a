use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trocar_core::kinematics::{orthonormality_error, JointLimits};
use trocar_core::KinematicChain;

fn fd_tip_jacobian(chain: &KinematicChain, q: &[f64]) -> DMatrix<f64> {
    let h = 1e-6;
    let mut jac = DMatrix::zeros(3, q.len());
    for j in 0..q.len() {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[j] += h;
        qm[j] -= h;
        let d = (chain.tip_position(&qp).unwrap() - chain.tip_position(&qm).unwrap()) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

fn random_q(rng: &mut ChaCha8Rng, limits: &JointLimits) -> Vec<f64> {
    limits.q_min.iter().zip(&limits.q_max).map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()
}

#[test]
fn arm_jacobian_matches_central_differences() {
    let chain = KinematicChain::lbr_med7();
    let limits = JointLimits::lbr_med7(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let q = random_q(&mut rng, &limits);
        let pose = chain.pose(&q).unwrap();
        let analytic = pose.linear_jacobian(&pose.tip());
        let numeric = fd_tip_jacobian(&chain, &q);
        let rel = (&analytic - &numeric).norm() / analytic.norm().max(1e-12);
        assert!(rel < 1e-6, "relative error {rel:e} at {q:?}");
    }
}

#[test]
fn planar_chain_matches_closed_form() {
    let chain = KinematicChain::planar_2link();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let tip = chain.tip_position(&[a, b]).unwrap();
        let expected = Vector3::new(a.cos() + (a + b).cos(), a.sin() + (a + b).sin(), 0.0);
        assert!((tip - expected).norm() < 1e-12);
        let axis = chain.optical_axis(&[a, b]).unwrap();
        assert!((axis - Vector3::new((a + b).cos(), (a + b).sin(), 0.0)).norm() < 1e-12);
    }
}

#[test]
fn jacobian_at_arbitrary_attachment_point() {
    let chain = KinematicChain::lbr_med7();
    let q = [0.3, -0.4, 0.2, -1.1, 0.5, 0.9, -0.2];
    let pose = chain.pose(&q).unwrap();
    let offset = Vector3::new(0.01, -0.02, 0.03);
    let point = pose.tip() + offset;
    // A point rigidly attached to the tool moves like the tip plus ω × offset.
    let h = 1e-6;
    let mut numeric = DMatrix::zeros(3, 7);
    for j in 0..7 {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[j] += h;
        qm[j] -= h;
        let attached = |qq: &[f64]| {
            let p = chain.pose(qq).unwrap();
            let r = p.tool_frame().rotation * pose.tool_frame().rotation.inverse();
            p.tip() + r * offset
        };
        numeric.set_column(j, &((attached(&qp) - attached(&qm)) / (2.0 * h)));
    }
    let analytic = chain.linear_jacobian(&q, &point).unwrap();
    assert!((analytic - numeric).amax() < 1e-8);
}

proptest! {
    #[test]
    fn frames_stay_orthonormal(q in prop::collection::vec(-3.0f64..3.0, 7)) {
        let chain = KinematicChain::lbr_med7();
        let frames = chain.forward_kinematics(&q).unwrap();
        prop_assert_eq!(frames.len(), 8);
        for f in &frames {
            prop_assert!(orthonormality_error(f.rotation.to_rotation_matrix().matrix()) < 1e-12);
        }
        let axis = chain.optical_axis(&q).unwrap();
        prop_assert!((axis.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_columns_are_perpendicular_to_joint_axes(q in prop::collection::vec(-3.0f64..3.0, 7)) {
        let chain = KinematicChain::lbr_med7();
        let pose = chain.pose(&q).unwrap();
        let jac = pose.linear_jacobian(&pose.tip());
        for (j, axis) in pose.joint_axes().iter().enumerate() {
            prop_assert!(jac.column(j).dot(axis).abs() < 1e-12);
        }
    }

    #[test]
    fn reach_is_bounded_by_link_lengths(q in prop::collection::vec(-3.0f64..3.0, 7)) {
        let chain = KinematicChain::lbr_med7();
        let tip = chain.tip_position(&q).unwrap();
        let total: f64 = chain.joints().iter().map(|j| j.origin.norm()).sum::<f64>() + chain.tool_tip_offset().norm();
        prop_assert!(tip.norm() <= total + 1e-12);
    }
}
