//! Closed-loop simulation of a trained policy through a course of gaps,
//! without recording gradients.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{gap_relative_point, geodesic_angle, step, DynamicsParams, GapPose, QuadState};
use crate::error::{Error, Result};
use crate::policy::{AuxHeads, ObservationState, Policy};
use crate::renderer::{
    apply_noise, min_distance, preprocess, render_depth, CameraConfig, CameraModel, GapScene, NoiseConfig, TriMesh,
};
use crate::trainer::target_velocity;

/// When the policy hidden state is cleared between gaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResetMode {
    /// When the crossing head first exceeds 0.5; re-armed once it drops below.
    Classifier,
    /// When the vehicle passes the current gap plane.
    OraclePlane,
    None,
}

impl std::str::FromStr for ResetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ResetMode> {
        match s {
            "classifier" => Ok(ResetMode::Classifier),
            "oracle-plane" | "oracle" => Ok(ResetMode::OraclePlane),
            "none" => Ok(ResetMode::None),
            other => Err(Error::Config(format!(
                "unknown reset mode {other:?} (expected classifier, oracle-plane or none)"
            ))),
        }
    }
}

impl std::fmt::Display for ResetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResetMode::Classifier => "classifier",
            ResetMode::OraclePlane => "oracle-plane",
            ResetMode::None => "none",
        })
    }
}

/// Gaps traversed in order, with their combined mesh for rendering.
#[derive(Clone, Debug)]
pub struct Course {
    pub gaps: Vec<GapScene>,
    pub mesh: TriMesh,
}

impl Course {
    pub fn new(gaps: Vec<GapScene>) -> Course {
        let mut mesh = TriMesh {
            vertices: Vec::new(),
            triangles: Vec::new(),
        };
        for g in &gaps {
            mesh.extend(&g.mesh);
        }
        Course { gaps, mesh }
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub max_steps: usize,
    /// End the run at the first collision instead of flying on.
    pub stop_on_collision: bool,
    /// Stop this many steps after the last gap plane has been passed.
    pub stop_after_last_crossing: Option<usize>,
    pub reset: ResetMode,
    pub collision_radius: f64,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    pub noise_seed: u64,
    /// In-plane (y, z) offsets of the aim point for each gap, m.
    pub aim_offsets: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug)]
pub struct SimStep {
    /// State after the step.
    pub state: QuadState,
    /// Hidden state produced at this step (before any reset).
    pub hidden: Vec<f64>,
    pub crossing_prob: Option<f64>,
    pub traversability: Option<f64>,
    /// Index of the gap targeted during this step.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapOutcome {
    /// First step whose resulting state is at or past the plane.
    pub crossing_step: Option<usize>,
    /// Sub-step crossing time in steps from the start.
    pub crossing_time: Option<f64>,
    /// Gap-frame (y, z) at the crossing, or at the closest approach to the plane.
    pub p_proj: [f64; 2],
    pub position_error: f64,
    pub attitude_error_deg: f64,
    /// Minimum distance to this gap's frame minus the vehicle radius, m.
    pub min_clearance: f64,
    pub inside_aperture: bool,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct SimTrace {
    pub steps: Vec<SimStep>,
    pub gaps: Vec<GapOutcome>,
    pub collided_at: Option<usize>,
    pub resets: Vec<usize>,
}

fn slerp(a: &Matrix3<f64>, b: &Matrix3<f64>, t: f64) -> Matrix3<f64> {
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b));
    qa.slerp(&qb, t).to_rotation_matrix().into_inner()
}

/// Plane crossing between two consecutive states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneCrossing {
    /// Fraction of the step at which the plane is reached.
    pub lambda: f64,
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

/// Interpolated crossing when `prev` is in front of the plane and `next` is
/// at or past it: position linearly, attitude by quaternion slerp.
pub fn plane_crossing(prev: &QuadState, next: &QuadState, pose: &GapPose) -> Option<PlaneCrossing> {
    let d0 = gap_relative_point(&prev.p, pose).d_gap;
    let d1 = gap_relative_point(&next.p, pose).d_gap;
    (d0 > 0.0 && d1 <= 0.0).then(|| {
        let lambda = d0 / (d0 - d1);
        PlaneCrossing {
            lambda,
            position: prev.p + (next.p - prev.p) * lambda,
            rotation: slerp(&prev.r, &next.r, lambda),
        }
    })
}

/// In-plane offset, its norm, and the geodesic attitude error in degrees.
pub fn crossing_errors(p: &Vector3<f64>, r: &Matrix3<f64>, pose: &GapPose) -> ([f64; 2], f64, f64) {
    let rel = gap_relative_point(p, pose);
    let err = rel.p_proj[0].hypot(rel.p_proj[1]);
    (rel.p_proj, err, geodesic_angle(&pose.rotation, r).to_degrees())
}

struct GapTracker {
    crossing: Option<(usize, f64, Vector3<f64>, Matrix3<f64>)>,
    closest: (f64, Vector3<f64>, Matrix3<f64>),
    min_distance: f64,
}

/// Flies `policy` from `init` through `course`.
///
/// The target velocity points from the position at which a gap becomes the
/// target toward its (offset) center and is held until that gap's plane is
/// passed. The run ends at `max_steps`, after the last gap, or at the first
/// collision when `stop_on_collision` is set; otherwise collisions are only
/// recorded.
pub fn simulate(
    policy: &Policy,
    aux: Option<&AuxHeads>,
    course: &Course,
    init: &QuadState,
    dynamics: &DynamicsParams,
    speed: f64,
    opts: &SimOptions,
) -> Result<SimTrace> {
    if course.gaps.is_empty() {
        return Err(Error::Input("course has no gaps".into()));
    }
    if opts.reset == ResetMode::Classifier && aux.is_none() {
        return Err(Error::Input("classifier reset needs auxiliary heads".into()));
    }
    let aim = |i: usize| {
        let g = &course.gaps[i];
        let off = opts.aim_offsets.as_ref().map_or([0.0, 0.0], |o| o[i]);
        g.pose.position + g.pose.rotation * Vector3::new(0.0, off[0], off[1])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    let mut s = init.clone();
    let mut h = policy.reset_hidden();
    let mut target = 0;
    let mut v_target = target_velocity(&s.p, &aim(0), speed);
    let mut armed = true;
    let mut trackers: Vec<GapTracker> = course
        .gaps
        .iter()
        .map(|g| {
            let rel = gap_relative_point(&s.p, &g.pose);
            GapTracker {
                crossing: None,
                closest: (rel.d_gap.abs(), s.p, s.r),
                min_distance: min_distance(&s.p, &g.mesh),
            }
        })
        .collect();
    let mut trace = SimTrace {
        steps: Vec::new(),
        gaps: Vec::new(),
        collided_at: None,
        resets: Vec::new(),
    };
    let mut finished_at: Option<usize> = None;

    for k in 0..opts.max_steps {
        let cam = CameraModel::from_state(&opts.camera, &s);
        let mut img = render_depth(&course.mesh, &cam);
        if opts.noise.is_enabled() {
            apply_noise(&mut img, &opts.noise, &opts.camera, &mut rng);
        }
        let depth = preprocess(&img)?;
        let obs = ObservationState::from_state(&s, &v_target);
        let (cmd, h_new) = policy.act(&depth, &obs, &h, dynamics)?;
        let mut next = step(&s, &cmd, dynamics)?;
        if (k + 1) % dynamics.reorth_interval == 0 {
            next.reorthonormalize();
        }
        let (crossing_prob, traversability) = match aux {
            Some(a) => (
                Some(a.predict_crossing(&h_new)?),
                Some(a.predict_traversability(&h_new)?),
            ),
            None => (None, None),
        };
        trace.steps.push(SimStep {
            state: next.clone(),
            hidden: h_new.to_vec(),
            crossing_prob,
            traversability,
            target,
        });

        let mut collided = false;
        for (g, tr) in course.gaps.iter().zip(trackers.iter_mut()) {
            let d = min_distance(&next.p, &g.mesh);
            tr.min_distance = tr.min_distance.min(d);
            collided |= d < opts.collision_radius;
            let rel = gap_relative_point(&next.p, &g.pose);
            if tr.crossing.is_none() && rel.d_gap.abs() < tr.closest.0 {
                tr.closest = (rel.d_gap.abs(), next.p, next.r);
            }
        }

        let mut crossed_now = false;
        if target < course.gaps.len() {
            if let Some(c) = plane_crossing(&s, &next, &course.gaps[target].pose) {
                trackers[target].crossing = Some((k, k as f64 + c.lambda, c.position, c.rotation));
                crossed_now = true;
                target += 1;
                if target < course.gaps.len() {
                    v_target = target_velocity(&next.p, &aim(target), speed);
                } else {
                    finished_at = Some(k);
                }
            }
        }

        let reset = match opts.reset {
            ResetMode::OraclePlane => crossed_now,
            ResetMode::Classifier => {
                let p = crossing_prob.expect("classifier mode has heads");
                let fire = armed && p > 0.5;
                if fire {
                    armed = false;
                } else if p < 0.5 {
                    armed = true;
                }
                fire
            }
            ResetMode::None => false,
        };
        h = if reset {
            trace.resets.push(k);
            policy.reset_hidden()
        } else {
            h_new
        };
        s = next;

        if collided && trace.collided_at.is_none() {
            trace.collided_at = Some(k);
            if opts.stop_on_collision {
                break;
            }
        }
        if let (Some(f), Some(extra)) = (finished_at, opts.stop_after_last_crossing) {
            if k >= f + extra {
                break;
            }
        }
    }

    for (g, tr) in course.gaps.iter().zip(&trackers) {
        let (crossing_step, crossing_time, p, r) = match tr.crossing {
            Some((k, t, p, r)) => (Some(k), Some(t), p, r),
            None => (None, None, tr.closest.1, tr.closest.2),
        };
        let (p_proj, position_error, attitude_error_deg) = crossing_errors(&p, &r, &g.pose);
        let inside = crossing_step.is_some() && g.inside_aperture(p_proj);
        let min_clearance = tr.min_distance - opts.collision_radius;
        trace.gaps.push(GapOutcome {
            crossing_step,
            crossing_time,
            p_proj,
            position_error,
            attitude_error_deg,
            min_clearance,
            inside_aperture: inside,
            success: inside && min_clearance > 0.0,
        });
    }
    Ok(trace)
}
