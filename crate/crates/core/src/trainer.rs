//! Back-propagation-through-time training of the policy and the auxiliary heads.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use diffcore::{GradientStore, Tape, Tensor};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Kind};
use crate::config::RunConfig;
use crate::dynamics::{
    exp_so3, gap_relative_vars, randomize_params, soft_limit_command, step_vars, DynamicsParams, QuadState, StateVars,
};
use crate::error::{Error, Result};
use crate::losses::{
    action_loss, alignment_loss, jerk_loss, position_loss, rotation_loss, total_loss, velocity_loss, LossBreakdown,
    LossWeights, StepLossSums, TERM_NAMES,
};
use crate::policy::{AuxHead, AuxHeads, HiddenState, ObservationState, Policy};
use crate::renderer::{
    apply_noise, check_collision, generate_gap, preprocess, render_depth, CameraConfig, CameraModel, GapScene,
    NoiseConfig, SceneConfig,
};
use crate::sim::{simulate, Course, ResetMode, SimOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub horizon: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm bound.
    pub grad_clip: f64,
    /// Per-step gradient decay rate, 1/s.
    pub decay_alpha: f64,
    /// Target speed range, m/s.
    pub speed: [f64; 2],
    /// Half-width of the uniform aim-point offset in the gap plane, m.
    pub aim_noise: f64,
    /// Range of the multiplicative dynamics-parameter perturbation.
    pub param_randomization: [f64; 2],
    pub start: [f64; 3],
    /// Sphere radius used for collision detection, m.
    pub collision_radius: f64,
    /// Worker threads for rollouts; 0 uses all cores.
    pub threads: usize,
    pub checkpoint_every: usize,
    pub max_nan_skips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 50_000,
            batch: 64,
            horizon: 80,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 1.0,
            decay_alpha: 0.0,
            speed: [2.0, 4.0],
            aim_noise: 2.0,
            param_randomization: [0.9, 1.1],
            start: [0.0, 0.0, 1.5],
            collision_radius: 0.1,
            threads: 0,
            checkpoint_every: 500,
            max_nan_skips: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "train iterations, batch and horizon must be positive".into(),
            ));
        }
        let nonneg = [
            self.learning_rate,
            self.weight_decay,
            self.decay_alpha,
            self.aim_noise,
            self.grad_clip,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "train rates, decay, noise and clip must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config(
                "optimizer betas must lie in [0, 1) and epsilon be positive".into(),
            ));
        }
        if !(self.speed[0] > 0.0 && self.speed[0] <= self.speed[1]) {
            return Err(Error::Config("train.speed must be an increasing positive range".into()));
        }
        let r = self.param_randomization;
        if !(r[0] > 0.0 && r[0] <= r[1]) || !(self.collision_radius > 0.0) {
            return Err(Error::Config(
                "train randomization range or collision radius invalid".into(),
            ));
        }
        Ok(())
    }
}

/// Two-mode initial-state distribution: near hover, or moving fast with a
/// large attitude and acceleration excursion as right after a traversal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BimodalInit {
    /// Probability of the aggressive mode; 0 disables it.
    pub weight_b: f64,
    /// Mode A velocity standard deviation per axis, m/s.
    pub hover_speed_std: f64,
    /// Mode A maximum roll/pitch, deg.
    pub hover_tilt_deg: f64,
    /// Mode B speed standard deviation around the target speed, m/s.
    pub speed_std: f64,
    /// Mode B half-angle of the forward velocity cone, deg.
    pub cone_deg: f64,
    /// Mode B maximum tilt, deg.
    pub tilt_deg: f64,
    /// Mode B acceleration magnitude range, multiples of g.
    pub accel_g: [f64; 2],
    /// Mode B body-rate bound, rad/s.
    pub rate: f64,
}

impl Default for BimodalInit {
    fn default() -> Self {
        BimodalInit {
            weight_b: 0.5,
            hover_speed_std: 0.1,
            hover_tilt_deg: 5.0,
            speed_std: 0.5,
            cone_deg: 30.0,
            tilt_deg: 45.0,
            accel_g: [1.0, 2.0],
            rate: 1.0,
        }
    }
}

impl BimodalInit {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight_b) {
            return Err(Error::Config("bimodal.weight_b must lie in [0, 1]".into()));
        }
        let positive = [
            self.hover_speed_std,
            self.hover_tilt_deg,
            self.speed_std,
            self.cone_deg,
            self.tilt_deg,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.rate >= 0.0) {
            return Err(Error::Config("bimodal spreads must be positive".into()));
        }
        if !(self.accel_g[0] >= 0.0 && self.accel_g[0] <= self.accel_g[1]) {
            return Err(Error::Config("bimodal.accel_g must be an increasing range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub trajectories: usize,
    pub horizon: usize,
    /// Aperture scale range of the training gaps.
    pub scale: [f64; 2],
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Majority-to-minority ratio above which samples are reweighted.
    pub max_imbalance: f64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            trajectories: 400,
            horizon: 70,
            scale: [0.625, 1.0],
            epochs: 20,
            minibatch: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_imbalance: 9.0,
        }
    }
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn uniform_in(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Random rotation with tilt (angle of body z from world z) at most
/// `max_tilt` and uniform yaw within ±`max_yaw`.
fn tilted_attitude(rng: &mut ChaCha8Rng, max_tilt: f64, max_yaw: f64) -> Matrix3<f64> {
    let tilt = max_tilt * rng.gen::<f64>().sqrt();
    let axis_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let yaw = rng.gen_range(-max_yaw..=max_yaw);
    let axis = Vector3::new(axis_angle.cos(), axis_angle.sin(), 0.0);
    exp_so3(&(axis * tilt)) * exp_so3(&Vector3::new(0.0, 0.0, yaw))
}

/// Collective thrust giving acceleration magnitude `accel` for body z-axis
/// `z` and velocity `v`, clamped to `[0, c_max]`.
pub fn thrust_for_acceleration(z: &Vector3<f64>, v: &Vector3<f64>, accel: f64, p: &DynamicsParams) -> f64 {
    let w = Vector3::new(0.0, 0.0, p.gravity) + v * p.drag;
    let zw = z.dot(&w);
    let disc = zw * zw - w.norm_squared() + accel * accel;
    let s = zw + disc.max(0.0).sqrt();
    (s * p.mass).clamp(0.0, p.max_thrust())
}

/// Draws an initial state at `position`.
pub fn sample_initial_state(
    b: &BimodalInit,
    target_speed: f64,
    position: Vector3<f64>,
    params: &DynamicsParams,
    seed: u64,
) -> QuadState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = QuadState::hover(position, params);
    let aggressive = b.weight_b > 0.0 && rng.gen_bool(b.weight_b);
    if !aggressive {
        let n = Normal::new(0.0, b.hover_speed_std).expect("positive std");
        s.v = Vector3::from_fn(|_, _| n.sample(&mut rng));
        s.r = tilted_attitude(&mut rng, b.hover_tilt_deg.to_radians(), b.hover_tilt_deg.to_radians());
        let z: Vector3<f64> = s.r.column(2).into();
        s.thrust = params.hover_thrust() / z.z;
    } else {
        let speed = (target_speed + b.speed_std * rng.sample::<f64, _>(StandardNormal)).max(0.0);
        let cone = b.cone_deg.to_radians();
        let off = cone * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = Vector3::new(off.cos(), off.sin() * phi.cos(), off.sin() * phi.sin());
        s.v = dir * speed;
        s.r = tilted_attitude(&mut rng, b.tilt_deg.to_radians(), b.cone_deg.to_radians());
        s.omega = Vector3::from_fn(|_, _| rng.gen_range(-b.rate..=b.rate));
        let accel = uniform_in(&mut rng, b.accel_g) * params.gravity;
        let z: Vector3<f64> = s.r.column(2).into();
        s.thrust = thrust_for_acceleration(&z, &s.v, accel, params);
    }
    let z: Vector3<f64> = s.r.column(2).into();
    s.a = z * (s.thrust / params.mass) - Vector3::new(0.0, 0.0, params.gravity) - s.v * params.drag;
    s
}

/// Direction from `from` to `aim`, scaled to `speed`.
pub fn target_velocity(from: &Vector3<f64>, aim: &Vector3<f64>, speed: f64) -> Vector3<f64> {
    let d = aim - from;
    if d.norm() < 1e-9 {
        Vector3::new(speed, 0.0, 0.0)
    } else {
        d.normalize() * speed
    }
}

/// Everything sampled for one training environment.
#[derive(Clone, Debug)]
pub struct Episode {
    pub scene: GapScene,
    pub dynamics: DynamicsParams,
    pub init: QuadState,
    pub speed: f64,
    /// Policy input, fixed in the world frame for the episode.
    pub v_target: Vector3<f64>,
    /// Velocity reference along the gap normal.
    pub v_ref: Vector3<f64>,
    pub noise_seed: u64,
}

impl Episode {
    pub fn sample(cfg: &RunConfig, scene_cfg: &SceneConfig, seed: u64) -> Result<Episode> {
        let t = &cfg.train;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = Vector3::from(t.start);
        let scene = generate_gap(rng.gen(), scene_cfg, start.x)?;
        let dynamics = randomize_params(&cfg.dynamics, rng.gen(), t.param_randomization);
        let speed = uniform_in(&mut rng, t.speed);
        let init = sample_initial_state(&cfg.bimodal, speed, start, &dynamics, rng.gen());
        let aim = if t.aim_noise > 0.0 {
            let dy = rng.gen_range(-t.aim_noise..=t.aim_noise);
            let dz = rng.gen_range(-t.aim_noise..=t.aim_noise);
            scene.pose.position + Vector3::new(0.0, dy, dz)
        } else {
            scene.pose.position
        };
        Ok(Episode {
            v_target: target_velocity(&init.p, &aim, speed),
            v_ref: scene.pose.normal() * speed,
            scene,
            dynamics,
            init,
            speed,
            noise_seed: rng.gen(),
        })
    }
}

/// Settings shared by every rollout of a run.
#[derive(Clone, Debug)]
pub struct RolloutOptions {
    pub horizon: usize,
    pub decay_alpha: f64,
    pub collision_radius: f64,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    pub weights: LossWeights,
}

impl RolloutOptions {
    pub fn from_config(cfg: &RunConfig) -> RolloutOptions {
        RolloutOptions {
            horizon: cfg.train.horizon,
            decay_alpha: cfg.train.decay_alpha,
            collision_radius: cfg.train.collision_radius,
            camera: cfg.camera.clone(),
            noise: cfg.noise.clone(),
            weights: cfg.loss.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutRecord {
    /// `horizon + 1` states, starting with the initial one.
    pub states: Vec<QuadState>,
    /// Normalized commands actually applied.
    pub commands: Vec<[f64; 4]>,
    /// Preprocessed observations, one per simulated step.
    pub observations: Vec<Tensor>,
    pub hidden: Vec<Vec<f64>>,
    /// `[L_p, L_r, L_v, L_f]` per step, including frozen repeats.
    pub step_losses: Vec<[f64; 4]>,
    pub collided_at: Option<usize>,
}

pub struct RolloutOutput {
    pub breakdown: LossBreakdown,
    pub record: RolloutRecord,
}

/// Closed-loop rollout on `tape` with policy parameters `w`.
///
/// Each step renders the scene, runs the policy, applies the soft-limited
/// command to the dynamics and accumulates the per-step losses on the new
/// state. After a collision the state is frozen and the last per-step losses
/// are repeated. When `observations` is given, those images are used in place
/// of rendering.
pub fn rollout(
    tape: &mut Tape,
    policy: &Policy,
    w: &[Tensor],
    ep: &Episode,
    opts: &RolloutOptions,
    observations: Option<&[Tensor]>,
) -> Result<RolloutOutput> {
    let dynp = &ep.dynamics;
    let pose = ep.scene.pose;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(ep.noise_seed);
    let mut s = StateVars::constant(&ep.init)?;
    let mut h = policy.reset_hidden();
    let mut sums = StepLossSums::default();
    let mut us: Vec<Tensor> = Vec::new();
    let mut rec = RolloutRecord {
        states: vec![ep.init.clone()],
        commands: Vec::new(),
        observations: Vec::new(),
        hidden: Vec::new(),
        step_losses: Vec::new(),
        collided_at: None,
    };
    let mut last_terms: Option<[Tensor; 4]> = None;
    let diverged = |step: usize, e: Error| match e {
        Error::Diff(d) => Error::RolloutDiverged {
            iteration: 0,
            step,
            detail: d.to_string(),
        },
        Error::NonFiniteActivation { layer } => Error::RolloutDiverged {
            iteration: 0,
            step,
            detail: format!("non-finite activation in {layer}"),
        },
        other => other,
    };

    for k in 0..opts.horizon {
        if rec.collided_at.is_some() {
            let terms = last_terms.clone().expect("collision follows a step");
            sums.push(tape, &terms)?;
            rec.step_losses
                .push(rec.step_losses.last().copied().unwrap_or_default());
            continue;
        }
        let state = s.value();
        let obs_img = match observations {
            Some(o) => o
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Input("too few observations".into()))?,
            None => {
                let cam = CameraModel::from_state(&opts.camera, &state);
                let mut img = render_depth(&ep.scene.mesh, &cam);
                if opts.noise.is_enabled() {
                    apply_noise(&mut img, &opts.noise, &opts.camera, &mut noise_rng);
                }
                preprocess(&img)?
            }
        };
        let step = (|| -> Result<(StateVars, [Tensor; 4], Tensor, HiddenState)> {
            let obs = ObservationState::vars(tape, &s, &ep.v_target)?;
            let (y, h_new) = policy.forward(tape, w, &obs_img, &obs, &h)?;
            let u = soft_limit_command(tape, &y, dynp)?;
            let un = u.normalized(tape, dynp)?;
            let mut next = step_vars(tape, &s, &u, dynp)?;
            if (k + 1) % dynp.reorth_interval == 0 {
                next = next.reorthonormalize(tape)?;
            }
            let rel = gap_relative_vars(tape, &next.p, &pose)?;
            let detach = opts.weights.stop_gradient;
            let terms = [
                position_loss(tape, &rel, detach)?,
                rotation_loss(tape, &next.r, &pose.rotation, &rel, detach)?,
                velocity_loss(tape, &next.v, &ep.v_ref, &rel)?,
                alignment_loss(tape, &next.p, &pose.position, &next.r, &rel)?,
            ];
            Ok((next, terms, un, h_new))
        })();
        let (next, terms, un, h_new) = step.map_err(|e| diverged(k, e))?;
        sums.push(tape, &terms)?;
        rec.step_losses.push(std::array::from_fn(|i| terms[i].item()));
        rec.commands.push(un.values().try_into().expect("4 command values"));
        rec.observations.push(obs_img);
        rec.hidden.push(h_new.to_vec());
        us.push(un);
        let value = next.value();
        if !value.is_finite() {
            return Err(Error::RolloutDiverged {
                iteration: 0,
                step: k,
                detail: "non-finite state".into(),
            });
        }
        if check_collision(&value.p, &ep.scene.mesh, opts.collision_radius).0 {
            rec.collided_at = Some(k);
        }
        rec.states.push(value);
        last_terms = Some(terms);
        h = h_new;
        s = if opts.decay_alpha > 0.0 {
            next.cross_step_boundary(tape, opts.decay_alpha, dynp.dt)?
        } else {
            next
        };
    }
    let l_a = action_loss(tape, &us)?;
    let l_j = if us.len() >= 2 {
        jerk_loss(tape, &us, dynp.dt)?
    } else {
        Tensor::scalar(0.0)
    };
    let breakdown = total_loss(tape, &sums, l_a, l_j, &opts.weights)?;
    Ok(RolloutOutput { breakdown, record: rec })
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let mut vals = p.to_vec();
            for (j, x) in vals.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + self.weight_decay * *x;
                *x -= self.lr * update;
            }
            *p = Tensor::new(p.shape(), vals)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, names: &[String]) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (i, n) in names.iter().enumerate() {
            tensors.push((format!("m.{n}"), Tensor::vector(&self.m[i])?));
            tensors.push((format!("v.{n}"), Tensor::vector(&self.v[i])?));
        }
        Ok(Checkpoint {
            kind: Kind::Optimizer,
            descriptor: format!("step = {}\n", self.step),
            tensors,
        })
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.kind != Kind::Optimizer || ck.tensors.len() != 2 * self.m.len() {
            return Err(Error::Format("optimizer state does not match the policy".into()));
        }
        let step = ck
            .descriptor
            .trim()
            .strip_prefix("step = ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad optimizer descriptor".into()))?;
        for i in 0..self.m.len() {
            let (m, v) = (&ck.tensors[2 * i].1, &ck.tensors[2 * i + 1].1);
            if m.numel() != self.m[i].len() || v.numel() != self.v[i].len() {
                return Err(Error::Format("optimizer moment shape mismatch".into()));
            }
            self.m[i] = m.to_vec();
            self.v[i] = v.to_vec();
        }
        self.step = step;
        Ok(())
    }
}

/// Global L2 norm of a gradient list.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` in place so their norm is at most `max_norm`; returns the original norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    n
}

fn collect_grads(store: &GradientStore, bound: &[Tensor]) -> Vec<Vec<f64>> {
    bound.iter().map(|t| store.get_or_zeros(t)).collect()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub terms: [f64; 6],
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

pub const LOG_HEADER: [&str; 10] = [
    "iteration",
    "l_p",
    "l_r",
    "l_v",
    "l_f",
    "l_a",
    "l_j",
    "total",
    "grad_norm",
    "skipped",
];

impl LogRow {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.iteration.to_string()];
        r.extend(self.terms.iter().map(|v| format!("{v:.17e}")));
        r.push(format!("{:.17e}", self.total));
        r.push(format!("{:.17e}", self.grad_norm));
        r.push(u8::from(self.skipped).to_string());
        r
    }
}

/// Loss and gradients averaged over one batch.
pub struct BatchResult {
    pub terms: [f64; 6],
    pub total: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Runs one batch of rollouts and reduces their gradients in batch order.
pub fn batch_gradients(
    policy: &Policy,
    episodes: &[Episode],
    opts: &RolloutOptions,
    iteration: usize,
) -> Result<BatchResult> {
    let results: Vec<Result<([f64; 6], f64, Vec<Vec<f64>>)>> = episodes
        .par_iter()
        .map(|ep| {
            let mut tape = Tape::new();
            let w = policy.bind(&mut tape);
            let out = rollout(&mut tape, policy, &w, ep, opts, None)?;
            let store = tape.backward(&out.breakdown.total)?;
            Ok((
                out.breakdown.values(),
                out.breakdown.total.item(),
                collect_grads(&store, &w),
            ))
        })
        .collect();
    let n = episodes.len() as f64;
    let mut terms = [0.0; 6];
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = policy.params.iter().map(|p| vec![0.0; p.numel()]).collect();
    for r in results {
        let (t, tot, g) = r.map_err(|e| match e {
            Error::RolloutDiverged { step, detail, .. } => Error::RolloutDiverged {
                iteration,
                step,
                detail,
            },
            other => other,
        })?;
        for i in 0..6 {
            terms[i] += t[i] / n;
        }
        total += tot / n;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b / n;
            }
        }
    }
    Ok(BatchResult { terms, total, grads })
}

pub fn sample_batch(cfg: &RunConfig, iteration: usize) -> Result<Vec<Episode>> {
    (0..cfg.train.batch)
        .map(|b| Episode::sample(cfg, &cfg.scene, mix_seed(cfg.seed, &[1, iteration as u64, b as u64])))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub log: Vec<LogRow>,
}

/// Where a resumed run picks up.
pub struct ResumeState {
    pub policy: Policy,
    pub optimizer: Checkpoint,
    pub iteration: usize,
}

impl ResumeState {
    /// Reads `policy_iter{N}.ckpt` and `optim_iter{N}.ckpt` from `dir`.
    pub fn load(dir: &Path, iteration: usize) -> Result<ResumeState> {
        Ok(ResumeState {
            policy: Policy::load(&dir.join(format!("policy_iter{iteration}.ckpt")))?,
            optimizer: Checkpoint::load(&dir.join(format!("optim_iter{iteration}.ckpt")))?,
            iteration,
        })
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

/// Trains the policy, writing `train_log.csv`, `timing.csv`, periodic and
/// final checkpoints and `manifest.toml` under `out_dir`.
pub fn train_policy(cfg: &RunConfig, out_dir: &Path, resume: Option<ResumeState>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    with_threads(cfg.train.threads, || train_loop(cfg, out_dir, resume))?
}

fn train_loop(cfg: &RunConfig, out_dir: &Path, resume: Option<ResumeState>) -> Result<TrainOutcome> {
    let t = &cfg.train;
    let (mut policy, start) = match &resume {
        Some(r) => (r.policy.clone(), r.iteration),
        None => (Policy::init(&cfg.policy, mix_seed(cfg.seed, &[0]), &cfg.dynamics)?, 0),
    };
    if policy.arch != cfg.policy {
        return Err(Error::ArchitectureMismatch(
            "resume checkpoint differs from configured policy".into(),
        ));
    }
    let mut opt = AdamW::new(
        &policy.params,
        t.learning_rate,
        t.beta1,
        t.beta2,
        t.epsilon,
        t.weight_decay,
    );
    if let Some(r) = &resume {
        opt.restore(&r.optimizer)?;
    }
    let names = policy.names();
    let opts = RolloutOptions::from_config(cfg);
    let log_path = out_dir.join("train_log.csv");
    let mut log_csv = csv::Writer::from_path(&log_path)?;
    log_csv.write_record(LOG_HEADER)?;
    let timing_path = out_dir.join("timing.csv");
    let mut timing = create(&timing_path)?;
    writeln!(timing, "iteration,seconds").map_err(|e| Error::io(&timing_path, e))?;

    let mut log = Vec::new();
    let mut consecutive_skips = 0;
    let clock = Instant::now();
    for it in start..t.iterations {
        let episodes = sample_batch(cfg, it)?;
        let (row, update) = match batch_gradients(&policy, &episodes, &opts, it) {
            Ok(mut b) => {
                let finite = b.grads.iter().flatten().all(|g| g.is_finite());
                let norm = if finite {
                    clip_gradients(&mut b.grads, t.grad_clip)
                } else {
                    f64::NAN
                };
                let row = LogRow {
                    iteration: it,
                    terms: b.terms,
                    total: b.total,
                    grad_norm: norm,
                    skipped: !finite,
                };
                (row, finite.then_some(b.grads))
            }
            Err(e @ Error::RolloutDiverged { .. }) => {
                log::warn!("{e}; skipping update");
                let row = LogRow {
                    iteration: it,
                    terms: [f64::NAN; 6],
                    total: f64::NAN,
                    grad_norm: f64::NAN,
                    skipped: true,
                };
                (row, None)
            }
            Err(e) => return Err(e),
        };
        match update {
            Some(g) => {
                opt.update(&mut policy.params, &g)?;
                consecutive_skips = 0;
            }
            None => {
                consecutive_skips += 1;
                log::warn!("iteration {it}: non-finite gradient, update skipped");
                if consecutive_skips >= t.max_nan_skips {
                    log_csv.flush().map_err(|e| Error::io(&log_path, e))?;
                    return Err(Error::Diverged(consecutive_skips));
                }
            }
        }
        log_csv.write_record(row.record())?;
        writeln!(timing, "{it},{:.3}", clock.elapsed().as_secs_f64()).map_err(|e| Error::io(&timing_path, e))?;
        if it % 50 == 0 || it + 1 == t.iterations {
            log::info!(
                "iter {it}: total {:.4} [{}] |g| {:.3e}",
                row.total,
                TERM_NAMES
                    .iter()
                    .zip(row.terms)
                    .map(|(n, v)| format!("{n}={v:.3}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                row.grad_norm
            );
        }
        log.push(row);
        let done = it + 1;
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.iterations {
            policy.save(&out_dir.join(format!("policy_iter{done}.ckpt")))?;
            opt.to_checkpoint(&names)?
                .save(&out_dir.join(format!("optim_iter{done}.ckpt")))?;
        }
    }
    log_csv.flush().map_err(|e| Error::io(&log_path, e))?;
    policy.save(&out_dir.join("policy.ckpt"))?;
    write_manifest(
        &out_dir.join("manifest.toml"),
        cfg,
        &[
            ("policy_sha256", policy.hash()),
            ("resumed_from", start.to_string()),
            ("iterations", t.iterations.to_string()),
            ("parameters", policy.num_parameters().to_string()),
        ],
    )?;
    Ok(TrainOutcome { policy, log })
}

/// Writes the run manifest: code version, seed, config hash and extras,
/// followed by the full resolved config.
pub fn write_manifest(path: &Path, cfg: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut s = format!(
        "code_version = \"{}\"\nseed = {}\nconfig_sha256 = \"{}\"\n",
        env!("CARGO_PKG_VERSION"),
        cfg.seed,
        cfg.hash()
    );
    for (k, v) in extra {
        s.push_str(&format!("{k} = \"{v}\"\n"));
    }
    s.push_str("\n# resolved configuration\n[config]\n");
    let body = cfg.to_toml();
    for line in body.lines() {
        if let Some(section) = line.strip_prefix('[') {
            s.push_str(&format!("[config.{section}\n"));
        } else {
            s.push_str(line);
            s.push('\n');
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Hidden states and labels collected from frozen-policy rollouts.
#[derive(Clone, Debug, Default)]
pub struct AuxDataset {
    /// Row-major `[n, hidden]`.
    pub hidden: Vec<f64>,
    pub dim: usize,
    /// 1 once the gap plane has been passed.
    pub crossing: Vec<f64>,
    /// Trajectory-level traversability label; `None` after the plane.
    pub traversable: Vec<Option<f64>>,
    /// Trajectory index of each sample.
    pub trajectory: Vec<usize>,
    /// Per trajectory: first step at or past the plane.
    pub crossing_step: Vec<Option<usize>>,
    /// Per trajectory: aperture scale and label.
    pub scale: Vec<f64>,
    pub label: Vec<bool>,
}

impl AuxDataset {
    pub fn len(&self) -> usize {
        self.crossing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crossing.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.dim..(i + 1) * self.dim]
    }
}

/// Rolls out the frozen `policy` on single gaps with aperture scale drawn
/// from `scale` and labels every step. Collisions are recorded, not simulated.
pub fn collect_aux_dataset(
    policy: &Policy,
    cfg: &RunConfig,
    n: usize,
    horizon: usize,
    scale: [f64; 2],
    seed: u64,
) -> Result<AuxDataset> {
    let scene_cfg = SceneConfig {
        scale,
        ..cfg.scene.clone()
    };
    let traces: Vec<Result<_>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ep = Episode::sample(cfg, &scene_cfg, mix_seed(seed, &[i as u64]))?;
            let course = Course::new(vec![ep.scene.clone()]);
            let opts = SimOptions {
                max_steps: horizon,
                stop_on_collision: false,
                stop_after_last_crossing: None,
                reset: ResetMode::None,
                collision_radius: cfg.train.collision_radius,
                camera: cfg.camera.clone(),
                noise: cfg.noise.clone(),
                noise_seed: ep.noise_seed,
                aim_offsets: None,
            };
            let trace = simulate(policy, None, &course, &ep.init, &ep.dynamics, ep.speed, &opts)?;
            Ok((trace, ep.scene.aperture[0] / cfg.scene.aperture[0]))
        })
        .collect();
    let mut ds = AuxDataset {
        dim: policy.arch.hidden,
        ..AuxDataset::default()
    };
    for (i, r) in traces.into_iter().enumerate() {
        let (trace, scale) = r?;
        let gap = &trace.gaps[0];
        let label = gap.success;
        ds.scale.push(scale);
        ds.label.push(label);
        ds.crossing_step.push(gap.crossing_step);
        for (k, st) in trace.steps.iter().enumerate() {
            ds.hidden.extend_from_slice(&st.hidden);
            let passed = gap.crossing_step.is_some_and(|c| k >= c);
            ds.crossing.push(f64::from(u8::from(passed)));
            ds.traversable.push((!passed).then_some(f64::from(u8::from(label))));
            ds.trajectory.push(i);
        }
    }
    Ok(ds)
}

/// Per-sample weights giving both classes equal total weight, applied when
/// the majority/minority ratio exceeds `max_ratio`.
pub fn balance_weights(labels: &[f64], max_ratio: f64) -> Result<Vec<f64>> {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Dataset(format!(
            "single-class labels ({pos} positive, {neg} negative)"
        )));
    }
    let ratio = pos.max(neg) as f64 / pos.min(neg) as f64;
    if ratio <= max_ratio {
        return Ok(vec![1.0; labels.len()]);
    }
    log::warn!("label imbalance {ratio:.1}:1 exceeds {max_ratio}:1; reweighting");
    let (wp, wn) = (
        labels.len() as f64 / (2.0 * pos as f64),
        labels.len() as f64 / (2.0 * neg as f64),
    );
    Ok(labels.iter().map(|&y| if y > 0.5 { wp } else { wn }).collect())
}

/// Weighted binary cross-entropy with logits, `Σ wᵢ (softplus(zᵢ) − yᵢ zᵢ) / Σ wᵢ`.
pub fn bce_with_logits(tape: &mut Tape, z: &Tensor, y: &[f64], w: &[f64]) -> Result<Tensor> {
    let n = y.len();
    let zf = tape.reshape(z, &[n])?;
    let sp = tape.softplus(&zf)?;
    let yz = tape.mul(&zf, &Tensor::vector(y)?)?;
    let l = tape.sub(&sp, &yz)?;
    let wl = tape.mul(&l, &Tensor::vector(w)?)?;
    let s = tape.sum(&wl)?;
    Ok(tape.scale(&s, 1.0 / w.iter().sum::<f64>())?)
}

fn train_head(
    heads: &mut AuxHeads,
    head: AuxHead,
    ds: &AuxDataset,
    samples: &[(usize, f64, f64)],
    aux: &AuxConfig,
    seed: u64,
) -> Result<f64> {
    let range = 4 * head as usize..4 * head as usize + 4;
    let mut opt = AdamW::new(
        &heads.params[range.clone()],
        aux.learning_rate,
        0.9,
        0.999,
        1e-8,
        aux.weight_decay,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..aux.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(aux.minibatch.max(1)) {
            let mut rows = Vec::with_capacity(chunk.len() * ds.dim);
            let (mut y, mut w) = (Vec::new(), Vec::new());
            for &c in chunk {
                let (idx, label, weight) = samples[c];
                rows.extend_from_slice(ds.row(idx));
                y.push(label);
                w.push(weight);
            }
            let hs = Tensor::new(&[chunk.len(), ds.dim], rows)?;
            let mut tape = Tape::new();
            let bound = heads.bind(&mut tape);
            let z = heads.logits(&mut tape, &bound, &hs, head)?;
            let loss = bce_with_logits(&mut tape, &z, &y, &w)?;
            let store = tape.backward(&loss)?;
            let grads: Vec<Vec<f64>> = bound[range.clone()].iter().map(|t| store.get_or_zeros(t)).collect();
            opt.update(&mut heads.params[range.clone()], &grads)?;
            epoch_loss += loss.item() * chunk.len() as f64;
        }
        last = epoch_loss / samples.len() as f64;
    }
    Ok(last)
}

#[derive(Clone, Debug)]
pub struct AuxOutcome {
    pub heads: AuxHeads,
    pub crossing_loss: f64,
    pub traversability_loss: f64,
    /// Positive fraction of traversability samples before and after weighting.
    pub positive_fraction: (f64, f64),
}

/// Trains both heads on hidden states of the frozen policy with binary
/// cross-entropy; the policy parameters are verified unchanged.
pub fn train_auxiliary(policy: &Policy, cfg: &RunConfig, width: usize, out_dir: Option<&Path>) -> Result<AuxOutcome> {
    let before = policy.hash();
    let aux = &cfg.aux;
    let ds = with_threads(cfg.train.threads, || {
        collect_aux_dataset(
            policy,
            cfg,
            aux.trajectories,
            aux.horizon,
            aux.scale,
            mix_seed(cfg.seed, &[7]),
        )
    })??;
    let mut heads = AuxHeads::init(policy, width, mix_seed(cfg.seed, &[8, width as u64]));

    let cross_labels = ds.crossing.clone();
    let cw = balance_weights(&cross_labels, aux.max_imbalance)?;
    let cross: Vec<(usize, f64, f64)> = (0..ds.len()).map(|i| (i, cross_labels[i], cw[i])).collect();
    let trav_idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.traversable[i].is_some()).collect();
    let trav_labels: Vec<f64> = trav_idx.iter().map(|&i| ds.traversable[i].unwrap()).collect();
    let tw = balance_weights(&trav_labels, aux.max_imbalance)?;
    let trav: Vec<(usize, f64, f64)> = trav_idx
        .iter()
        .zip(&trav_labels)
        .zip(&tw)
        .map(|((&i, &y), &w)| (i, y, w))
        .collect();
    let raw_pos = trav_labels.iter().sum::<f64>() / trav_labels.len() as f64;
    let weighted_pos = trav.iter().map(|s| s.1 * s.2).sum::<f64>() / tw.iter().sum::<f64>();

    let crossing_loss = train_head(
        &mut heads,
        AuxHead::Crossing,
        &ds,
        &cross,
        aux,
        mix_seed(cfg.seed, &[9]),
    )?;
    let traversability_loss = train_head(
        &mut heads,
        AuxHead::Traversability,
        &ds,
        &trav,
        aux,
        mix_seed(cfg.seed, &[10]),
    )?;
    if policy.hash() != before {
        return Err(Error::State(
            "policy parameters changed during auxiliary training".into(),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        heads.save(&dir.join(format!("aux_{width}.ckpt")))?;
        write_manifest(
            &dir.join(format!("aux_{width}_manifest.toml")),
            cfg,
            &[
                ("policy_sha256", before),
                ("aux_width", width.to_string()),
                ("samples", ds.len().to_string()),
                ("trav_positive_fraction", format!("{raw_pos:.6}")),
                ("trav_weighted_positive_fraction", format!("{weighted_pos:.6}")),
                ("crossing_bce", format!("{crossing_loss:.6}")),
                ("trav_bce", format!("{traversability_loss:.6}")),
            ],
        )?;
    }
    Ok(AuxOutcome {
        heads,
        crossing_loss,
        traversability_loss,
        positive_fraction: (raw_pos, weighted_pos),
    })
}
