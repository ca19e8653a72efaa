use gapnav::dynamics::{ControlCommand, DynamicsParams, QuadState};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent integrator: attitude as a unit quaternion, first-order lags
/// written out directly.
pub struct QuatModel {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub thrust: f64,
}

impl QuatModel {
    pub fn from_state(s: &QuadState) -> QuatModel {
        QuatModel {
            p: s.p,
            q: UnitQuaternion::from_matrix(&s.r),
            v: s.v,
            omega: s.omega,
            thrust: s.thrust,
        }
    }

    pub fn step(&mut self, cmd: &ControlCommand, prm: &DynamicsParams) {
        let dt = prm.dt;
        let kw = (-dt / prm.tau_omega).exp();
        let kc = (-dt / prm.tau_thrust).exp();
        self.omega = self.omega * kw + cmd.omega_c * (1.0 - kw);
        self.thrust = self.thrust * kc + cmd.thrust_c * (1.0 - kc);
        let z = self.q * Vector3::z();
        let acc = z * (self.thrust / prm.mass) - Vector3::new(0.0, 0.0, prm.gravity) - self.v * prm.drag;
        self.q *= UnitQuaternion::from_scaled_axis(self.omega * dt);
        self.p += self.v * dt + acc * (0.5 * dt * dt);
        self.v += acc * dt;
    }
}

pub fn random_commands(seed: u64, n: usize, prm: &DynamicsParams) -> Vec<ControlCommand> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vector3::zeros();
    (0..n)
        .map(|_| {
            let wmax = prm.limits.omega_max;
            w = (w + Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).map(|x: f64| x.clamp(-wmax, wmax));
            ControlCommand {
                omega_c: w,
                thrust_c: prm.hover_thrust() * rng.gen_range(0.9..1.1),
            }
        })
        .collect()
}
