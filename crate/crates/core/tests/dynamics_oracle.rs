mod common;

use common::{random_commands, QuatModel};
use diffcore::Tape;
use gapnav::dynamics::{
    exp_so3, randomize_params, step, step_vars, CommandVars, ControlCommand, DynamicsParams, QuadState, StateVars,
};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;

#[test]
fn matches_quaternion_integrator_over_1000_steps() {
    for seed in 0..5 {
        let prm = randomize_params(&DynamicsParams::default(), seed, [0.9, 1.1]);
        let mut s = QuadState::hover(Vector3::new(0.0, 0.0, 1.5), &prm);
        s.v = Vector3::new(2.0, -0.3, 0.1);
        let mut oracle = QuatModel::from_state(&s);
        for (k, cmd) in random_commands(seed + 100, 1000, &prm).iter().enumerate() {
            s = step(&s, cmd, &prm).unwrap();
            oracle.step(cmd, &prm);
            let r_oracle = oracle.q.to_rotation_matrix().into_inner();
            let dp = (s.p - oracle.p).norm();
            let dr = UnitQuaternion::from_matrix(&(s.r.transpose() * r_oracle)).angle();
            assert!(dp < 1e-6, "seed {seed} step {k}: position differs by {dp:e}");
            assert!(dr < 1e-7, "seed {seed} step {k}: rotation differs by {dr:e} rad");
            assert!((s.v - oracle.v).norm() < 1e-6);
        }
    }
}

#[test]
fn rotation_drift_stays_small_over_10000_steps() {
    let prm = DynamicsParams::default();
    let mut tape = Tape::no_grad();
    let mut s = StateVars::constant(&QuadState::hover(Vector3::zeros(), &prm)).unwrap();
    let mut worst: f64 = 0.0;
    for (k, cmd) in random_commands(9, 10_000, &prm).iter().enumerate() {
        s = step_vars(&mut tape, &s, &CommandVars::constant(cmd), &prm).unwrap();
        if (k + 1) % prm.reorth_interval == 0 {
            s = s.reorthonormalize(&mut tape).unwrap();
        }
        worst = worst.max(s.value().orthonormality_error());
    }
    assert!(worst < 1e-6, "orthonormality error reached {worst:e}");
}

#[test]
fn free_fall_and_hover_closed_forms() {
    let prm = DynamicsParams {
        drag: 0.0,
        ..DynamicsParams::default()
    };
    let s0 = QuadState::hover(Vector3::new(0.0, 0.0, 10.0), &prm);
    let mut s = s0.clone();
    for _ in 0..30 {
        s = step(&s, &ControlCommand::hover(&prm), &prm).unwrap();
    }
    assert!((s.p - s0.p).norm() < 1e-12 && s.v.norm() < 1e-12);

    let mut s = QuadState {
        thrust: 0.0,
        ..s0.clone()
    };
    let cut = ControlCommand {
        omega_c: Vector3::zeros(),
        thrust_c: 0.0,
    };
    let n = 30;
    for _ in 0..n {
        s = step(&s, &cut, &prm).unwrap();
    }
    let t = n as f64 * prm.dt;
    assert!((s.p.z - (10.0 - 0.5 * prm.gravity * t * t)).abs() < 1e-9);
}

proptest! {
    #[test]
    fn exp_map_is_a_rotation(w in prop::array::uniform3(-4.0f64..4.0)) {
        let r = exp_so3(&Vector3::from(w));
        prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        let q = UnitQuaternion::from_scaled_axis(Vector3::from(w)).to_rotation_matrix().into_inner();
        prop_assert!((r - q).amax() < 1e-12);
    }

    #[test]
    fn step_preserves_state_invariants(
        w in prop::array::uniform3(-8.0f64..8.0),
        c in 0.0f64..1.0,
        v in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let prm = DynamicsParams::default();
        let mut s = QuadState::hover(Vector3::zeros(), &prm);
        s.v = Vector3::from(v);
        let cmd = ControlCommand { omega_c: Vector3::from(w), thrust_c: c * prm.max_thrust() };
        let next = step(&s, &cmd, &prm).unwrap();
        prop_assert!(next.is_finite());
        prop_assert!(next.orthonormality_error() <= 1e-6);
        prop_assert!(next.thrust >= 0.0 && next.thrust <= prm.max_thrust());
        prop_assert!(next.omega.iter().all(|x| x.abs() <= prm.limits.omega_max));
    }
}
