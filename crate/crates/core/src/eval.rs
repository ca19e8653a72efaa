//! Evaluation protocols: tilt-bucketed single-gap trials, multi-gap courses
//! with hidden-state resets, crossing-detector timing, traversability
//! precision/recall, and target-direction noise sweeps.
//!
//! Reports are written as CSV plus a `summary.txt` of `key=value` lines whose
//! first line is `version=1`.

use std::path::Path;

use diffcore::{Tape, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dynamics::QuadState;
use crate::error::{Error, Result};
use crate::policy::{AuxHead, AuxHeads, Policy};
use crate::renderer::{generate_gap, SceneConfig};
use crate::sim::{simulate, Course, ResetMode, SimOptions, SimTrace};
use crate::trainer::{collect_aux_dataset, mix_seed};

pub const SUMMARY_VERSION: u32 = 1;

/// Tilt buckets in degrees, `[lo, hi)` except the last, which is closed.
pub const TILT_BUCKETS: [[f64; 2]; 3] = [[0.0, 30.0], [30.0, 60.0], [60.0, 80.0]];

/// One gap of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub gap: usize,
    pub scene_seed: u64,
    pub tilt_deg: f64,
    pub success: bool,
    pub crossed: bool,
    pub crossing_step: Option<usize>,
    pub position_error: f64,
    pub attitude_error_deg: f64,
    pub min_clearance: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketStats {
    pub range: [f64; 2],
    pub trials: usize,
    pub success_rate: f64,
    pub mean_position_error: f64,
    pub mean_attitude_error_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<TrialRecord>,
    pub buckets: Vec<BucketStats>,
    pub success_rate: f64,
}

fn bucket_of(tilt_deg: f64) -> usize {
    let t = tilt_deg.abs();
    TILT_BUCKETS
        .iter()
        .position(|b| t < b[1])
        .unwrap_or(TILT_BUCKETS.len() - 1)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Aggregates records into tilt buckets (empty buckets are omitted).
    pub fn from_records(records: Vec<TrialRecord>) -> EvalReport {
        let buckets = TILT_BUCKETS
            .iter()
            .enumerate()
            .filter_map(|(i, range)| {
                let rs: Vec<&TrialRecord> = records.iter().filter(|r| bucket_of(r.tilt_deg) == i).collect();
                (!rs.is_empty()).then(|| BucketStats {
                    range: *range,
                    trials: rs.len(),
                    success_rate: mean(rs.iter().map(|r| f64::from(u8::from(r.success)))),
                    mean_position_error: mean(rs.iter().map(|r| r.position_error)),
                    mean_attitude_error_deg: mean(rs.iter().map(|r| r.attitude_error_deg)),
                })
            })
            .collect();
        let success_rate = mean(records.iter().map(|r| f64::from(u8::from(r.success))));
        EvalReport {
            records,
            buckets,
            success_rate,
        }
    }

    /// Recomputes every aggregate from the records and checks the success rule.
    pub fn audit(&self) -> Result<()> {
        let fresh = EvalReport::from_records(self.records.clone());
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        let buckets_ok = fresh.buckets.len() == self.buckets.len()
            && fresh.buckets.iter().zip(&self.buckets).all(|(a, b)| {
                a.range == b.range
                    && a.trials == b.trials
                    && same(a.success_rate, b.success_rate)
                    && same(a.mean_position_error, b.mean_position_error)
                    && same(a.mean_attitude_error_deg, b.mean_attitude_error_deg)
            });
        if !buckets_ok || !same(fresh.success_rate, self.success_rate) {
            return Err(Error::State("report aggregates do not match their records".into()));
        }
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.success && !(r.crossed && r.min_clearance > 0.0))
        {
            return Err(Error::State(format!(
                "trial {} gap {} marked successful without a clean crossing",
                r.trial, r.gap
            )));
        }
        Ok(())
    }

    /// Records of one gap index.
    pub fn gap(&self, gap: usize) -> EvalReport {
        EvalReport::from_records(self.records.iter().filter(|r| r.gap == gap).cloned().collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads records back and audits the recomputed report.
    pub fn read_csv(path: &Path) -> Result<EvalReport> {
        let mut rd = csv::Reader::from_path(path)?;
        let records = rd.deserialize().collect::<std::result::Result<Vec<TrialRecord>, _>>()?;
        let report = EvalReport::from_records(records);
        report.audit()?;
        Ok(report)
    }

    pub fn write_buckets(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "tilt_lo",
            "tilt_hi",
            "trials",
            "success_rate",
            "position_error_m",
            "attitude_error_deg",
        ])?;
        for b in &self.buckets {
            w.write_record([
                b.range[0].to_string(),
                b.range[1].to_string(),
                b.trials.to_string(),
                format!("{:.6}", b.success_rate),
                format!("{:.6}", b.mean_position_error),
                format!("{:.6}", b.mean_attitude_error_deg),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = vec![
            (format!("{prefix}trials"), self.records.len().to_string()),
            (format!("{prefix}success_rate"), format!("{:.6}", self.success_rate)),
        ];
        for b in &self.buckets {
            let tag = format!("{prefix}tilt_{}_{}", b.range[0], b.range[1]);
            out.push((format!("{tag}_trials"), b.trials.to_string()));
            out.push((format!("{tag}_success_rate"), format!("{:.6}", b.success_rate)));
            out.push((
                format!("{tag}_position_error_m"),
                format!("{:.6}", b.mean_position_error),
            ));
            out.push((
                format!("{tag}_attitude_error_deg"),
                format!("{:.6}", b.mean_attitude_error_deg),
            ));
        }
        out
    }
}

pub fn write_summary(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut s = format!("version={SUMMARY_VERSION}\n");
    for (k, v) in pairs {
        s.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Gap 0 is placed like a training gap ahead of the start; later gaps
/// follow at `spacing` from their predecessor.
pub fn build_course(cfg: &RunConfig, tilt_deg: [f64; 2], n_gaps: usize, seed: u64) -> Result<Course> {
    let mut gaps = Vec::with_capacity(n_gaps);
    let mut x = cfg.train.start[0];
    for i in 0..n_gaps {
        let scene = SceneConfig {
            tilt_deg,
            distance: if i == 0 {
                cfg.scene.distance
            } else {
                cfg.eval.gap_spacing
            },
            ..cfg.scene.clone()
        };
        let gap_seed = if i == 0 { seed } else { mix_seed(seed, &[i as u64]) };
        let g = generate_gap(gap_seed, &scene, x)?;
        x = g.pose.position.x;
        gaps.push(g);
    }
    Ok(Course::new(gaps))
}

/// Whole steps in `factor × path length / speed`.
pub fn timeout_steps(start: &Vector3<f64>, course: &Course, speed: f64, factor: f64, dt: f64) -> usize {
    let mut length = 0.0;
    let mut from = *start;
    for g in &course.gaps {
        length += (g.pose.position - from).norm();
        from = g.pose.position;
    }
    (factor * length / speed / dt).ceil() as usize
}

fn start_state(cfg: &RunConfig) -> QuadState {
    QuadState::hover(Vector3::from(cfg.train.start), &cfg.dynamics)
}

struct TrialSetup {
    course: Course,
    init: QuadState,
    opts: SimOptions,
    seed: u64,
}

fn trial_setup(
    cfg: &RunConfig,
    tilt_deg: [f64; 2],
    n_gaps: usize,
    reset: ResetMode,
    seed: u64,
    aim_offsets: Option<Vec<[f64; 2]>>,
) -> Result<TrialSetup> {
    let course = build_course(cfg, tilt_deg, n_gaps, seed)?;
    let init = start_state(cfg);
    let e = &cfg.eval;
    let max_steps = timeout_steps(&init.p, &course, e.speed, e.timeout_factor, cfg.dynamics.dt);
    let opts = SimOptions {
        max_steps,
        stop_on_collision: false,
        stop_after_last_crossing: Some(e.post_crossing_steps),
        reset,
        collision_radius: e.collision_radius,
        camera: cfg.camera.clone(),
        noise: cfg.noise.clone(),
        noise_seed: mix_seed(seed, &[99]),
        aim_offsets,
    };
    Ok(TrialSetup {
        course,
        init,
        opts,
        seed,
    })
}

fn records_from(trial: usize, setup: &TrialSetup, trace: &SimTrace) -> Vec<TrialRecord> {
    trace
        .gaps
        .iter()
        .zip(&setup.course.gaps)
        .enumerate()
        .map(|(i, (o, g))| TrialRecord {
            trial,
            gap: i,
            scene_seed: setup.seed,
            tilt_deg: g.tilt.to_degrees(),
            success: o.success,
            crossed: o.crossing_step.is_some(),
            crossing_step: o.crossing_step,
            position_error: o.position_error,
            attitude_error_deg: o.attitude_error_deg,
            min_clearance: o.min_clearance,
            steps: trace.steps.len(),
        })
        .collect()
}

/// Multi-gap trials; `n_gaps = 1` with no reset is the single-gap protocol.
pub fn eval_multi_gap(
    policy: &Policy,
    aux: Option<&AuxHeads>,
    cfg: &RunConfig,
    n_gaps: usize,
    tilt_deg: [f64; 2],
    reset: ResetMode,
    trials: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<SimTrace>)> {
    if n_gaps == 0 {
        return Err(Error::Input("need at least one gap".into()));
    }
    let out: Vec<Result<(Vec<TrialRecord>, SimTrace)>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let setup = trial_setup(cfg, tilt_deg, n_gaps, reset, mix_seed(seed, &[i as u64]), None)?;
            let trace = simulate(
                policy,
                aux,
                &setup.course,
                &setup.init,
                &cfg.dynamics,
                cfg.eval.speed,
                &setup.opts,
            )?;
            Ok((records_from(i, &setup, &trace), trace))
        })
        .collect();
    let mut records = Vec::new();
    let mut traces = Vec::new();
    for r in out {
        let (rs, t) = r?;
        records.extend(rs);
        traces.push(t);
    }
    Ok((EvalReport::from_records(records), traces))
}

pub fn eval_single_gap(
    policy: &Policy,
    cfg: &RunConfig,
    trials: usize,
    tilt_deg: [f64; 2],
    seed: u64,
) -> Result<EvalReport> {
    Ok(eval_multi_gap(policy, None, cfg, 1, tilt_deg, ResetMode::None, trials, seed)?.0)
}

/// `trials` single-gap runs in each tilt bucket.
pub fn eval_tilt_table(policy: &Policy, cfg: &RunConfig, trials: usize, seed: u64) -> Result<EvalReport> {
    let mut records = Vec::new();
    for (b, range) in TILT_BUCKETS.iter().enumerate() {
        let r = eval_single_gap(policy, cfg, trials, *range, mix_seed(seed, &[b as u64]))?;
        records.extend(r.records.into_iter().map(|mut rec| {
            rec.trial += b * trials;
            rec
        }));
    }
    Ok(EvalReport::from_records(records))
}

/// Agreement between crossing-head detections and true plane crossings.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossingTiming {
    pub trajectories: usize,
    pub true_crossings: usize,
    pub detections: usize,
    /// Detections within the tolerance of a true crossing.
    pub within: usize,
    pub tolerance: usize,
}

impl CrossingTiming {
    pub fn precision(&self) -> f64 {
        self.within as f64 / self.detections.max(1) as f64
    }

    pub fn recall(&self) -> f64 {
        self.within as f64 / self.true_crossings.max(1) as f64
    }
}

/// Compares the first step with crossing probability above 0.5 against the
/// true crossing step on single-gap trajectories.
pub fn crossing_timing(
    policy: &Policy,
    aux: &AuxHeads,
    cfg: &RunConfig,
    n: usize,
    tolerance: usize,
    seed: u64,
) -> Result<CrossingTiming> {
    let ds = collect_aux_dataset(policy, cfg, n, cfg.aux.horizon, cfg.aux.scale, seed)?;
    let probs = score_rows(aux, &ds.hidden, ds.dim, AuxHead::Crossing)?;
    let mut first = vec![None; n];
    for (i, p) in probs.iter().enumerate() {
        let tr = ds.trajectory[i];
        if *p > 0.5 && first[tr].is_none() {
            let start = ds.trajectory.iter().position(|&t| t == tr).expect("trajectory present");
            first[tr] = Some(i - start);
        }
    }
    let mut t = CrossingTiming {
        trajectories: n,
        true_crossings: ds.crossing_step.iter().filter(|c| c.is_some()).count(),
        detections: first.iter().filter(|d| d.is_some()).count(),
        within: 0,
        tolerance,
    };
    for (det, truth) in first.iter().zip(&ds.crossing_step) {
        if let (Some(d), Some(c)) = (det, truth) {
            if d.abs_diff(*c) <= tolerance {
                t.within += 1;
            }
        }
    }
    Ok(t)
}

/// Head probabilities for row-major hidden states, in chunks.
pub fn score_rows(aux: &AuxHeads, hidden: &[f64], dim: usize, head: AuxHead) -> Result<Vec<f64>> {
    let n = hidden.len() / dim;
    let chunks: Vec<Result<Vec<f64>>> = (0..n)
        .step_by(512)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + 512).min(n);
            let hs = Tensor::new(&[end - start, dim], hidden[start * dim..end * dim].to_vec())?;
            let mut tape = Tape::no_grad();
            let z = aux.logits(&mut tape, &aux.params, &hs, head)?;
            Ok(z.values().iter().map(|&v| diffcore::sigmoid(v)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// Distinct scores in decreasing order; a sample is positive when its score ≥ threshold.
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Trapezoidal area over recall, starting from `(0, precision[0])`.
    pub average_precision: f64,
    pub positives: usize,
    pub samples: usize,
}

impl PrCurve {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::Dataset(
                "scores and labels must be non-empty and equally long".into(),
            ));
        }
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == labels.len() {
            return Err(Error::Dataset("single-class label set".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Dataset("non-finite score".into()));
        }
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let (mut thresholds, mut precision, mut recall) = (Vec::new(), Vec::new(), Vec::new());
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut k = 0;
        while k < idx.len() {
            let s = scores[idx[k]];
            while k < idx.len() && scores[idx[k]] == s {
                if labels[idx[k]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                k += 1;
            }
            thresholds.push(s);
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / positives as f64);
        }
        let average_precision = trapezoid_ap(&precision, &recall);
        Ok(PrCurve {
            thresholds,
            precision,
            recall,
            average_precision,
            positives,
            samples: scores.len(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "precision", "recall"])?;
        for i in 0..self.thresholds.len() {
            w.write_record([
                format!("{:.17e}", self.thresholds[i]),
                format!("{:.17e}", self.precision[i]),
                format!("{:.17e}", self.recall[i]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn trapezoid_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let (mut r0, mut p0) = (0.0, precision[0]);
    let mut ap = 0.0;
    for (&p, &r) in precision.iter().zip(recall) {
        ap += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    ap
}

/// Traversability scores of pre-crossing steps against trajectory labels.
pub fn eval_traversability(
    policy: &Policy,
    aux: &AuxHeads,
    cfg: &RunConfig,
    n: usize,
    scale: [f64; 2],
    seed: u64,
) -> Result<(PrCurve, f64)> {
    let ds = collect_aux_dataset(policy, cfg, n, cfg.aux.horizon, scale, seed)?;
    let scores = score_rows(aux, &ds.hidden, ds.dim, AuxHead::Traversability)?;
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for i in 0..ds.len() {
        if let Some(y) = ds.traversable[i] {
            s.push(scores[i]);
            l.push(y > 0.5);
        }
    }
    let traj_pos = ds.label.iter().filter(|&&x| x).count() as f64 / ds.label.len().max(1) as f64;
    Ok((PrCurve::new(&s, &l)?, traj_pos))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub level: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_position_error: f64,
}

/// Success rate per aim-point noise level. Every level uses the same scenes
/// and the same unit offsets, scaled by the level.
pub fn eval_target_noise(
    policy: &Policy,
    cfg: &RunConfig,
    levels: &[f64],
    trials: usize,
    seed: u64,
) -> Result<(Vec<NoiseRow>, Vec<(f64, usize, Vec<Vector3<f64>>)>)> {
    let tilt = cfg.scene.tilt_deg;
    let mut rows = Vec::new();
    let mut paths = Vec::new();
    for &level in levels {
        let out: Vec<Result<(bool, f64, Vec<Vector3<f64>>)>> = (0..trials)
            .into_par_iter()
            .map(|i| {
                let s = mix_seed(seed, &[i as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(s, &[5]));
                let unit = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
                let off = vec![[unit[0] * level, unit[1] * level]];
                let setup = trial_setup(cfg, tilt, 1, ResetMode::None, s, Some(off))?;
                let trace = simulate(
                    policy,
                    None,
                    &setup.course,
                    &setup.init,
                    &cfg.dynamics,
                    cfg.eval.speed,
                    &setup.opts,
                )?;
                let g = &trace.gaps[0];
                let path = std::iter::once(setup.init.p)
                    .chain(trace.steps.iter().map(|st| st.state.p))
                    .collect();
                Ok((g.success, g.position_error, path))
            })
            .collect();
        let mut succ = 0usize;
        let mut err = 0.0;
        for (i, r) in out.into_iter().enumerate() {
            let (ok, e, path) = r?;
            succ += usize::from(ok);
            err += e;
            if i < 10 {
                paths.push((level, i, path));
            }
        }
        rows.push(NoiseRow {
            level,
            trials,
            success_rate: succ as f64 / trials.max(1) as f64,
            mean_position_error: err / trials.max(1) as f64,
        });
    }
    Ok((rows, paths))
}
