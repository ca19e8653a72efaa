//! Discrete-time collective-thrust / body-rate quadrotor model.
//!
//! Commanded body rates and thrust pass through first-order filters, attitude
//! is propagated with the SO(3) exponential map, and translation uses an Euler
//! update with a linear drag term. The same step is available on a [`Tape`]
//! ([`step_vars`]) for back-propagation through time and on plain values
//! ([`step`]), which evaluates the identical arithmetic without recording.

use diffcore::{Tape, Tensor};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandLimits {
    /// Per-axis body-rate bound, rad/s.
    pub omega_max: f64,
    /// Maximum collective thrust as a multiple of the weight `m g`.
    pub thrust_to_weight: f64,
}

impl Default for CommandLimits {
    fn default() -> Self {
        CommandLimits {
            omega_max: 8.0,
            thrust_to_weight: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsParams {
    /// kg
    pub mass: f64,
    /// m/s²
    pub gravity: f64,
    /// Linear drag coefficient, 1/s.
    pub drag: f64,
    /// Body-rate response time constant, s.
    pub tau_omega: f64,
    /// Thrust response time constant, s.
    pub tau_thrust: f64,
    /// Integration step, s.
    pub dt: f64,
    pub limits: CommandLimits,
    /// Rollouts project the attitude back onto SO(3) every this many steps.
    pub reorth_interval: usize,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            mass: 0.462,
            gravity: 9.81,
            drag: 0.1,
            tau_omega: 0.03,
            tau_thrust: 0.05,
            dt: 1.0 / 30.0,
            limits: CommandLimits::default(),
            reorth_interval: 100,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("drag", self.drag),
            ("tau_omega", self.tau_omega),
            ("tau_thrust", self.tau_thrust),
            ("dt", self.dt),
            ("omega_max", self.limits.omega_max),
            ("thrust_to_weight", self.limits.thrust_to_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("dynamics.{name} must be positive, got {v}")));
            }
        }
        if self.reorth_interval == 0 {
            return Err(Error::Config("dynamics.reorth_interval must be at least 1".into()));
        }
        Ok(())
    }

    /// Non-fatal configuration remarks.
    pub fn warnings(&self) -> Vec<String> {
        let tau = self.tau_omega.min(self.tau_thrust);
        if self.dt >= tau {
            vec![format!(
                "dt = {:.4} s is not below the fastest time constant {:.4} s",
                self.dt, tau
            )]
        } else {
            Vec::new()
        }
    }

    pub fn max_thrust(&self) -> f64 {
        self.limits.thrust_to_weight * self.mass * self.gravity
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn alpha_omega(&self) -> f64 {
        (-self.dt / self.tau_omega).exp()
    }

    pub fn alpha_thrust(&self) -> f64 {
        (-self.dt / self.tau_thrust).exp()
    }
}

/// Rigid-body state plus the filtered body rate and thrust carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadState {
    pub p: Vector3<f64>,
    /// World-from-body rotation.
    pub r: Matrix3<f64>,
    pub v: Vector3<f64>,
    /// Acceleration computed in the most recent step.
    pub a: Vector3<f64>,
    /// Filtered body rate, rad/s.
    pub omega: Vector3<f64>,
    /// Filtered collective thrust, N.
    pub thrust: f64,
}

impl QuadState {
    /// Level, at rest, with the filtered thrust balancing gravity.
    pub fn hover(p: Vector3<f64>, params: &DynamicsParams) -> QuadState {
        QuadState {
            p,
            r: Matrix3::identity(),
            v: Vector3::zeros(),
            a: Vector3::zeros(),
            omega: Vector3::zeros(),
            thrust: params.hover_thrust(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p
            .iter()
            .chain(self.r.iter())
            .chain(self.v.iter())
            .chain(self.a.iter())
            .chain(self.omega.iter())
            .all(|v| v.is_finite())
            && self.thrust.is_finite()
    }

    /// `‖RᵀR − I‖∞`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.r.transpose() * self.r - Matrix3::identity()).amax()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::State("non-finite quadrotor state".into()));
        }
        if self.r.determinant() <= 0.0 {
            return Err(Error::State("rotation has non-positive determinant".into()));
        }
        Ok(())
    }

    pub fn reorthonormalize(&mut self) {
        self.r = nearest_rotation(&self.r);
    }

    /// Body-frame velocity `Rᵀ v`.
    pub fn body_velocity(&self) -> Vector3<f64> {
        self.r.transpose() * self.v
    }
}

/// Polar-decomposition projection onto SO(3).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlCommand {
    /// Commanded body rates, rad/s.
    pub omega_c: Vector3<f64>,
    /// Commanded collective thrust, N.
    pub thrust_c: f64,
}

impl ControlCommand {
    pub fn hover(params: &DynamicsParams) -> ControlCommand {
        ControlCommand {
            omega_c: Vector3::zeros(),
            thrust_c: params.hover_thrust(),
        }
    }

    pub fn within_limits(&self, params: &DynamicsParams) -> bool {
        self.omega_c.iter().all(|w| w.abs() <= params.limits.omega_max)
            && self.thrust_c >= 0.0
            && self.thrust_c <= params.max_thrust()
    }

    /// The 4-vector used by the smoothness losses: body rates and thrust over `m g`.
    pub fn normalized(&self, params: &DynamicsParams) -> [f64; 4] {
        [
            self.omega_c.x,
            self.omega_c.y,
            self.omega_c.z,
            self.thrust_c / params.hover_thrust(),
        ]
    }
}

pub(crate) fn mat_to_row_major(m: &Matrix3<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn mat_from_row_major(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

fn vec3(t: &Tensor) -> Vector3<f64> {
    let v = t.values();
    Vector3::new(v[0], v[1], v[2])
}

pub(crate) fn tensor3(v: &Vector3<f64>) -> Tensor {
    Tensor::vector(v.as_slice()).expect("finite 3-vector")
}

pub(crate) fn tensor33(m: &Matrix3<f64>) -> Tensor {
    Tensor::matrix(3, 3, &mat_to_row_major(m)).expect("finite 3x3 matrix")
}

/// Quadrotor state held as tape tensors.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub p: Tensor,
    /// `[3, 3]`, row-major.
    pub r: Tensor,
    pub v: Tensor,
    pub a: Tensor,
    pub omega: Tensor,
    /// `[1]`
    pub thrust: Tensor,
}

impl StateVars {
    /// Constant tensors holding `s`.
    pub fn constant(s: &QuadState) -> Result<StateVars> {
        if !s.is_finite() {
            return Err(Error::State("non-finite quadrotor state".into()));
        }
        Ok(StateVars {
            p: tensor3(&s.p),
            r: tensor33(&s.r),
            v: tensor3(&s.v),
            a: tensor3(&s.a),
            omega: tensor3(&s.omega),
            thrust: Tensor::scalar(s.thrust),
        })
    }

    /// Registers every component as a differentiable leaf.
    pub fn leaves(s: &QuadState, tape: &mut Tape) -> Result<StateVars> {
        let c = StateVars::constant(s)?;
        Ok(StateVars {
            p: tape.var(&c.p),
            r: tape.var(&c.r),
            v: tape.var(&c.v),
            a: tape.var(&c.a),
            omega: tape.var(&c.omega),
            thrust: tape.var(&c.thrust),
        })
    }

    pub fn value(&self) -> QuadState {
        QuadState {
            p: vec3(&self.p),
            r: mat_from_row_major(self.r.values()),
            v: vec3(&self.v),
            a: vec3(&self.a),
            omega: vec3(&self.omega),
            thrust: self.thrust.item(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.p, &self.r, &self.v, &self.a, &self.omega, &self.thrust]
    }

    /// Fresh identity copies of the state, marked so that gradients crossing
    /// into the previous step are scaled by `exp(-alpha dt)`.
    pub fn cross_step_boundary(&self, tape: &mut Tape, alpha: f64, dt: f64) -> Result<StateVars> {
        let next = StateVars {
            p: tape.identity(&self.p)?,
            r: tape.identity(&self.r)?,
            v: tape.identity(&self.v)?,
            a: tape.identity(&self.a)?,
            omega: tape.identity(&self.omega)?,
            thrust: tape.identity(&self.thrust)?,
        };
        tape.mark_step_boundary(&next.tensors(), alpha, dt)?;
        Ok(next)
    }

    /// Projects the attitude onto SO(3) by adding a constant correction, so
    /// the backward pass sees an identity.
    pub fn reorthonormalize(&self, tape: &mut Tape) -> Result<StateVars> {
        let r = mat_from_row_major(self.r.values());
        let fixed = nearest_rotation(&r);
        let delta = tensor33(&(fixed - r));
        let mut out = self.clone();
        out.r = tape.add(&self.r, &delta)?;
        Ok(out)
    }

    /// Third column of `R` (body z-axis in world).
    pub fn body_z(&self, tape: &mut Tape) -> Result<Tensor> {
        Ok(tape.gather(&self.r, &[2, 5, 8])?)
    }

    /// First column of `R` (body x-axis in world).
    pub fn body_x(&self, tape: &mut Tape) -> Result<Tensor> {
        Ok(tape.gather(&self.r, &[0, 3, 6])?)
    }

    /// Second column of `R`.
    pub fn body_y(&self, tape: &mut Tape) -> Result<Tensor> {
        Ok(tape.gather(&self.r, &[1, 4, 7])?)
    }

    /// `Rᵀ v`.
    pub fn body_velocity(&self, tape: &mut Tape) -> Result<Tensor> {
        let rt = tape.transpose(&self.r)?;
        Ok(tape.matvec(&rt, &self.v)?)
    }
}

/// Command held as tape tensors.
#[derive(Clone, Debug)]
pub struct CommandVars {
    /// `[3]`, rad/s.
    pub omega_c: Tensor,
    /// `[1]`, N.
    pub thrust_c: Tensor,
}

impl CommandVars {
    pub fn constant(cmd: &ControlCommand) -> CommandVars {
        CommandVars {
            omega_c: tensor3(&cmd.omega_c),
            thrust_c: Tensor::scalar(cmd.thrust_c),
        }
    }

    pub fn value(&self) -> ControlCommand {
        ControlCommand {
            omega_c: vec3(&self.omega_c),
            thrust_c: self.thrust_c.item(),
        }
    }

    /// `[ω_c, c_c / (m g)]` as one 4-vector on the tape.
    pub fn normalized(&self, tape: &mut Tape, params: &DynamicsParams) -> Result<Tensor> {
        let c = tape.scale(&self.thrust_c, 1.0 / params.hover_thrust())?;
        Ok(tape.concat(&[&self.omega_c, &c])?)
    }
}

/// Maps four unbounded outputs to a command with tanh soft limits:
/// `ω = ω_max tanh(y)` and `c = c_max (tanh(y) + 1) / 2`.
pub fn soft_limit_command(tape: &mut Tape, raw: &Tensor, params: &DynamicsParams) -> Result<CommandVars> {
    if raw.shape() != [4] {
        return Err(Error::Input(format!(
            "command head must output 4 values, got {:?}",
            raw.shape()
        )));
    }
    let squashed = tape.tanh(raw)?;
    let rates = tape.slice(&squashed, 0, 3)?;
    let omega_c = tape.scale(&rates, params.limits.omega_max)?;
    let t = tape.slice(&squashed, 3, 1)?;
    let t1 = tape.offset(&t, 1.0)?;
    let thrust_c = tape.scale(&t1, 0.5 * params.max_thrust())?;
    Ok(CommandVars { omega_c, thrust_c })
}

/// One model step on the tape.
///
/// `ω_t = α_ω ω_{t−1} + (1 − α_ω) ω_c`, `c_t = α_c c_{t−1} + (1 − α_c) c_c`,
/// `a_t = c_t R_t e₃ / m − g e₃ − k_v v_t`, `R_{t+1} = R_t exp([ω_t]× Δt)`,
/// `v_{t+1} = v_t + a_t Δt`, `p_{t+1} = p_t + v_t Δt + ½ a_t Δt²`.
pub fn step_vars(tape: &mut Tape, s: &StateVars, u: &CommandVars, params: &DynamicsParams) -> Result<StateVars> {
    let dt = params.dt;
    let (aw, ac) = (params.alpha_omega(), params.alpha_thrust());

    let w_old = tape.scale(&s.omega, aw)?;
    let w_cmd = tape.scale(&u.omega_c, 1.0 - aw)?;
    let omega = tape.add(&w_old, &w_cmd)?;
    let c_old = tape.scale(&s.thrust, ac)?;
    let c_cmd = tape.scale(&u.thrust_c, 1.0 - ac)?;
    let thrust = tape.add(&c_old, &c_cmd)?;

    let z_body = s.body_z(tape)?;
    let thrust_acc = tape.mul(&z_body, &thrust)?;
    let thrust_acc = tape.scale(&thrust_acc, 1.0 / params.mass)?;
    let gravity = Tensor::vector(&[0.0, 0.0, params.gravity])?;
    let drag = tape.scale(&s.v, params.drag)?;
    let a = tape.sub(&thrust_acc, &gravity)?;
    let a = tape.sub(&a, &drag)?;

    let w_dt = tape.scale(&omega, dt)?;
    let delta_r = tape.exp_skew(&w_dt)?;
    let r = tape.matmul(&s.r, &delta_r)?;

    let a_dt = tape.scale(&a, dt)?;
    let v = tape.add(&s.v, &a_dt)?;
    let v_dt = tape.scale(&s.v, dt)?;
    let a_dt2 = tape.scale(&a, 0.5 * dt * dt)?;
    let p = tape.add(&s.p, &v_dt)?;
    let p = tape.add(&p, &a_dt2)?;

    Ok(StateVars {
        p,
        r,
        v,
        a,
        omega,
        thrust,
    })
}

/// One model step on plain values. The result is re-projected onto SO(3)
/// when its orthonormality error exceeds [`ROTATION_TOL`].
pub fn step(state: &QuadState, cmd: &ControlCommand, params: &DynamicsParams) -> Result<QuadState> {
    state.validate()?;
    if !(cmd.omega_c.iter().all(|v| v.is_finite()) && cmd.thrust_c.is_finite()) {
        return Err(Error::State("non-finite command".into()));
    }
    let mut tape = Tape::no_grad();
    let s = StateVars::constant(state)?;
    let next = step_vars(&mut tape, &s, &CommandVars::constant(cmd), params)?;
    let mut out = next.value();
    if out.orthonormality_error() > ROTATION_TOL {
        out.reorthonormalize();
    }
    Ok(out)
}

/// `exp([w]×)` as a rotation matrix.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    mat_from_row_major(&diffcore::exp_so3(&[w.x, w.y, w.z]))
}

/// Multiplies `tau_omega`, `tau_thrust` and `drag` by independent uniform
/// factors drawn from `range`; everything else is copied.
pub fn randomize_params(base: &DynamicsParams, seed: u64, range: [f64; 2]) -> DynamicsParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        if range[0] == range[1] {
            range[0]
        } else {
            rng.gen_range(range[0]..=range[1])
        }
    };
    let mut out = *base;
    out.tau_omega *= draw();
    out.tau_thrust *= draw();
    out.drag *= draw();
    out
}

/// Pose of a gap: center and rotation whose x-axis is the plane normal,
/// pointing along the direction of travel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapPose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl GapPose {
    pub fn normal(&self) -> Vector3<f64> {
        self.rotation.column(0).into()
    }

    /// Quadrotor position expressed in the gap frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapRelativeState {
    /// Signed distance to the gap plane, positive on the approach side, m.
    pub d_gap: f64,
    /// Gap-frame (y, z) of the quadrotor, m.
    pub p_proj: [f64; 2],
    /// 1 while the plane has not been passed, else 0.
    pub passed_flag: u8,
}

pub fn gap_relative(state: &QuadState, pose: &GapPose) -> GapRelativeState {
    gap_relative_point(&state.p, pose)
}

pub fn gap_relative_point(p: &Vector3<f64>, pose: &GapPose) -> GapRelativeState {
    let local = pose.to_local(p);
    let d_gap = -local.x;
    GapRelativeState {
        d_gap,
        p_proj: [local.y, local.z],
        passed_flag: u8::from(d_gap > 0.0),
    }
}

/// Gap-relative quantities on the tape. The passed flag is a plain value.
#[derive(Clone, Debug)]
pub struct GapRelativeVars {
    /// `[1]`
    pub d_gap: Tensor,
    /// `[2]`
    pub p_proj: Tensor,
    pub before_plane: bool,
}

pub fn gap_relative_vars(tape: &mut Tape, p: &Tensor, pose: &GapPose) -> Result<GapRelativeVars> {
    let offset = tape.sub(p, &tensor3(&pose.position))?;
    let rt = tensor33(&pose.rotation.transpose());
    let local = tape.matvec(&rt, &offset)?;
    let x = tape.slice(&local, 0, 1)?;
    let d_gap = tape.neg(&x)?;
    let p_proj = tape.slice(&local, 1, 2)?;
    let before_plane = d_gap.item() > 0.0;
    Ok(GapRelativeVars {
        d_gap,
        p_proj,
        before_plane,
    })
}

/// Rotation about the world x-axis.
pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic angle between two rotations, rad.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}
