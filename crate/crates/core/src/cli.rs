//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors (bad flags,
//! unreadable or invalid config, incompatible checkpoints), 2 when a run
//! fails after it has started.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::dynamics::{rot_x, QuadState};
use crate::error::{Error, Result};
use crate::eval::{
    build_course, crossing_timing, eval_multi_gap, eval_single_gap, eval_target_noise, eval_tilt_table,
    eval_traversability, write_summary, TILT_BUCKETS,
};
use crate::gradcheck::check_rollouts;
use crate::policy::{AuxHeads, Policy};
use crate::renderer::{generate_gap, render_depth, render_depth_bruteforce, CameraModel};
use crate::sim::ResetMode;
use crate::trainer::{mix_seed, train_auxiliary, train_policy, ResumeState};

#[derive(Parser, Debug)]
#[command(
    name = "gapnav",
    version,
    about = "Train and evaluate a depth-image gap traversal policy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Config override such as `train.batch=16` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct Seeded {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the policy by back-propagation through rollouts.
    Train {
        #[command(flatten)]
        run: Seeded,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Resume from the checkpoints of this iteration in --out-dir.
        #[arg(long)]
        resume: Option<usize>,
    },
    /// Train the crossing and traversability heads on a frozen policy.
    TrainAux {
        #[command(flatten)]
        run: Seeded,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Single-gap trials, bucketed by tilt.
    EvalSingle {
        #[command(flatten)]
        run: Seeded,
        #[arg(long)]
        policy: PathBuf,
        /// Trials per tilt bucket (or in total with --tilt-min/--tilt-max).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, requires = "tilt_max")]
        tilt_min: Option<f64>,
        #[arg(long, requires = "tilt_min")]
        tilt_max: Option<f64>,
    },
    /// Sequential gaps with hidden-state resets.
    EvalMulti {
        #[command(flatten)]
        run: Seeded,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        gaps: Option<usize>,
        /// classifier, oracle-plane or none.
        #[arg(long, default_value = "oracle-plane")]
        reset: String,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Precision/recall of the traversability head.
    EvalTrav {
        #[command(flatten)]
        run: Seeded,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Success rate under aim-point perturbations.
    EvalNoise {
        #[command(flatten)]
        run: Seeded,
        #[arg(long)]
        policy: PathBuf,
        /// Comma-separated offset magnitudes, m.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Finite-difference check of rollout gradients.
    Gradcheck {
        #[command(flatten)]
        run: Seeded,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Render one scene from the start pose to a PGM with a scene dump.
    RenderTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene_seed: u64,
    },
    /// Time the culled and brute-force renderers.
    BenchRender {
        #[command(flatten)]
        run: Seeded,
        #[arg(long, default_value_t = 200)]
        frames: usize,
    },
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

trait Classify<T> {
    fn invalid(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Classify<T> for Result<T> {
    fn invalid(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Validation)
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

/// Applies a dotted `key=value` override; the value is read as TOML and
/// falls back to a plain string.
pub fn apply_override(cfg: &RunConfig, spec: &str) -> Result<RunConfig> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = &mut root;
    for part in path {
        node = node
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
    }
    let table = node
        .as_table_mut()
        .filter(|t| t.contains_key(*last))
        .ok_or_else(|| Error::Config(format!("unknown setting {key:?}")))?;
    table.insert(last.to_string(), value);
    let out: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("override {spec:?}: {e}")))?;
    Ok(out)
}

fn load_config(c: &Common, seed: Option<u64>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).invalid()?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        cfg = apply_override(&cfg, o).invalid()?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.train.threads = t;
    }
    cfg.validate().invalid()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> std::result::Result<&Path, Failure> {
    std::fs::create_dir_all(&c.out_dir)
        .map_err(|e| Error::io(&c.out_dir, e))
        .invalid()?;
    Ok(&c.out_dir)
}

fn pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> std::result::Result<T, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        b = b.num_threads(threads);
    }
    let p = b
        .build()
        .map_err(|e| Failure::Runtime(Error::Config(format!("cannot build thread pool: {e}"))))?;
    Ok(p.install(f))
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn execute(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Train {
            run,
            iterations,
            batch,
            horizon,
            resume,
        } => {
            let mut cfg = load_config(&run.common, Some(run.seed))?;
            if let Some(v) = iterations {
                cfg.train.iterations = v;
            }
            if let Some(v) = batch {
                cfg.train.batch = v;
            }
            if let Some(v) = horizon {
                cfg.train.horizon = v;
            }
            cfg.validate().invalid()?;
            let dir = out_dir(&run.common)?;
            let resume = resume.map(|n| ResumeState::load(dir, n)).transpose().invalid()?;
            let outcome = train_policy(&cfg, dir, resume).runtime()?;
            let first = outcome.log.first().map_or(f64::NAN, |r| r.total);
            let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
            println!("trained {} iterations: loss {first:.4} -> {last:.4}", outcome.log.len());
            write_summary(
                &dir.join("summary.txt"),
                &[
                    kv("iterations", outcome.log.len()),
                    kv("first_loss", format!("{first:.6}")),
                    kv("last_loss", format!("{last:.6}")),
                    kv("policy_sha256", outcome.policy.hash()),
                ],
            )
            .runtime()
        }
        Command::TrainAux {
            run,
            policy,
            width,
            trajectories,
        } => {
            let mut cfg = load_config(&run.common, Some(run.seed))?;
            if let Some(n) = trajectories {
                cfg.aux.trajectories = n;
            }
            let dir = out_dir(&run.common)?.to_path_buf();
            let policy = Policy::load(&policy).invalid()?;
            let width = width.unwrap_or(cfg.policy.aux_hidden);
            let out = pool(cfg.train.threads, || train_auxiliary(&policy, &cfg, width, Some(&dir)))?.runtime()?;
            println!(
                "aux heads width {width}: crossing loss {:.4}, traversability loss {:.4}",
                out.crossing_loss, out.traversability_loss
            );
            write_summary(
                &dir.join("summary.txt"),
                &[
                    kv("width", width),
                    kv("traversable_fraction", format!("{:.6}", out.positive_fraction.0)),
                    kv("crossing_loss", format!("{:.6}", out.crossing_loss)),
                    kv("traversability_loss", format!("{:.6}", out.traversability_loss)),
                ],
            )
            .runtime()
        }
        Command::EvalSingle {
            run,
            policy,
            trials,
            tilt_min,
            tilt_max,
        } => {
            let cfg = load_config(&run.common, Some(run.seed))?;
            let dir = out_dir(&run.common)?;
            let policy = Policy::load(&policy).invalid()?;
            let trials = trials.unwrap_or(cfg.eval.trials);
            let report = pool(cfg.train.threads, || match (tilt_min, tilt_max) {
                (Some(lo), Some(hi)) => eval_single_gap(&policy, &cfg, trials, [lo, hi], cfg.seed),
                _ => eval_tilt_table(&policy, &cfg, trials, cfg.seed),
            })?
            .runtime()?;
            report.audit().runtime()?;
            report.write_csv(&dir.join("records.csv")).runtime()?;
            report.write_buckets(&dir.join("buckets.csv")).runtime()?;
            for b in &report.buckets {
                println!(
                    "tilt {:>2}-{:<2} deg: {:>3} trials, success {:5.1}%, position error {:.3} m, attitude error {:.2} deg",
                    b.range[0],
                    b.range[1],
                    b.trials,
                    100.0 * b.success_rate,
                    b.mean_position_error,
                    b.mean_attitude_error_deg
                );
            }
            write_summary(&dir.join("summary.txt"), &report.summary("")).runtime()
        }
        Command::EvalMulti {
            run,
            policy,
            aux,
            gaps,
            reset,
            trials,
        } => {
            let cfg = load_config(&run.common, Some(run.seed))?;
            let reset: ResetMode = reset.parse().invalid()?;
            let dir = out_dir(&run.common)?;
            let policy = Policy::load(&policy).invalid()?;
            let aux = aux.map(|p| AuxHeads::load(&p, &policy, None)).transpose().invalid()?;
            if reset == ResetMode::Classifier && aux.is_none() {
                return Err(Failure::Validation(Error::Input(
                    "--reset classifier needs --aux".into(),
                )));
            }
            let gaps = gaps.unwrap_or(cfg.eval.multi_gaps);
            if gaps == 0 {
                return Err(Failure::Validation(Error::Input("--gaps must be at least 1".into())));
            }
            let trials = trials.unwrap_or(cfg.eval.trials);
            let tilt = [0.0, cfg.eval.multi_tilt_max_deg];
            let (report, traces) = pool(cfg.train.threads, || {
                eval_multi_gap(&policy, aux.as_ref(), &cfg, gaps, tilt, reset, trials, cfg.seed)
            })?
            .runtime()?;
            report.audit().runtime()?;
            report.write_csv(&dir.join("records.csv")).runtime()?;
            let mut resets = csv::Writer::from_path(dir.join("resets.csv"))
                .map_err(Error::from)
                .runtime()?;
            resets.write_record(["trial", "step"]).map_err(Error::from).runtime()?;
            for (i, t) in traces.iter().enumerate() {
                for k in &t.resets {
                    resets
                        .write_record([i.to_string(), k.to_string()])
                        .map_err(Error::from)
                        .runtime()?;
                }
            }
            resets.flush().map_err(|e| Error::io(dir, e)).runtime()?;
            let mut summary = vec![kv("gaps", gaps), kv("reset", reset)];
            summary.extend(report.summary(""));
            for g in 0..gaps {
                let r = report.gap(g);
                println!(
                    "gap {}: success {:5.1}%, position error {:.3} m, attitude error {:.2} deg",
                    g + 1,
                    100.0 * r.success_rate,
                    mean_of(&r, |x| x.position_error),
                    mean_of(&r, |x| x.attitude_error_deg)
                );
                summary.push(kv(
                    &format!("gap{}_success_rate", g + 1),
                    format!("{:.6}", r.success_rate),
                ));
                summary.push(kv(
                    &format!("gap{}_position_error_m", g + 1),
                    format!("{:.6}", mean_of(&r, |x| x.position_error)),
                ));
                summary.push(kv(
                    &format!("gap{}_attitude_error_deg", g + 1),
                    format!("{:.6}", mean_of(&r, |x| x.attitude_error_deg)),
                ));
            }
            write_summary(&dir.join("summary.txt"), &summary).runtime()
        }
        Command::EvalTrav {
            run,
            policy,
            aux,
            trajectories,
        } => {
            let cfg = load_config(&run.common, Some(run.seed))?;
            let dir = out_dir(&run.common)?;
            let policy = Policy::load(&policy).invalid()?;
            let aux = AuxHeads::load(&aux, &policy, None).invalid()?;
            let n = trajectories.unwrap_or(cfg.eval.trav_trajectories);
            let (curve, timing) = pool(cfg.train.threads, || -> Result<_> {
                let curve = eval_traversability(&policy, &aux, &cfg, n, cfg.eval.trav_scale, cfg.seed)?;
                let timing = crossing_timing(&policy, &aux, &cfg, n, 3, mix_seed(cfg.seed, &[1]))?;
                Ok((curve, timing))
            })?
            .runtime()?;
            let (curve, positive_share) = curve;
            curve.write_csv(&dir.join("pr_curve.csv")).runtime()?;
            println!(
                "traversability AP {:.4} over {} samples ({:.0}% of trajectories traversable); crossing detections within 3 steps {:.1}%",
                curve.average_precision,
                curve.samples,
                100.0 * positive_share,
                100.0 * timing.precision()
            );
            write_summary(
                &dir.join("summary.txt"),
                &[
                    kv("average_precision", format!("{:.6}", curve.average_precision)),
                    kv("samples", curve.samples),
                    kv("positives", curve.positives),
                    kv("traversable_trajectory_share", format!("{positive_share:.6}")),
                    kv("crossing_detections", timing.detections),
                    kv("crossing_true", timing.true_crossings),
                    kv("crossing_within_3_steps", format!("{:.6}", timing.precision())),
                ],
            )
            .runtime()
        }
        Command::EvalNoise {
            run,
            policy,
            levels,
            trials,
        } => {
            let cfg = load_config(&run.common, Some(run.seed))?;
            let dir = out_dir(&run.common)?;
            let policy = Policy::load(&policy).invalid()?;
            let levels = levels.unwrap_or_else(|| cfg.eval.noise_levels.clone());
            if levels.iter().any(|l| !l.is_finite() || *l < 0.0) {
                return Err(Failure::Validation(Error::Input(
                    "noise levels must be non-negative".into(),
                )));
            }
            let trials = trials.unwrap_or(cfg.eval.trials);
            let (rows, paths) = pool(cfg.train.threads, || {
                eval_target_noise(&policy, &cfg, &levels, trials, cfg.seed)
            })?
            .runtime()?;
            let mut w = csv::Writer::from_path(dir.join("noise.csv"))
                .map_err(Error::from)
                .runtime()?;
            w.write_record(["level_m", "trials", "success_rate", "position_error_m"])
                .map_err(Error::from)
                .runtime()?;
            let mut summary = Vec::new();
            for r in &rows {
                println!("noise {:.2} m: success {:5.1}%", r.level, 100.0 * r.success_rate);
                w.write_record([
                    r.level.to_string(),
                    r.trials.to_string(),
                    format!("{:.6}", r.success_rate),
                    format!("{:.6}", r.mean_position_error),
                ])
                .map_err(Error::from)
                .runtime()?;
                summary.push(kv(
                    &format!("success_rate_{}", r.level),
                    format!("{:.6}", r.success_rate),
                ));
            }
            w.flush().map_err(|e| Error::io(dir, e)).runtime()?;
            let mut t = csv::Writer::from_path(dir.join("trajectories.csv"))
                .map_err(Error::from)
                .runtime()?;
            t.write_record(["level_m", "trial", "step", "x", "y", "z"])
                .map_err(Error::from)
                .runtime()?;
            for (level, trial, path) in &paths {
                for (k, p) in path.iter().enumerate() {
                    t.write_record([
                        level.to_string(),
                        trial.to_string(),
                        k.to_string(),
                        format!("{:.6}", p.x),
                        format!("{:.6}", p.y),
                        format!("{:.6}", p.z),
                    ])
                    .map_err(Error::from)
                    .runtime()?;
                }
            }
            t.flush().map_err(|e| Error::io(dir, e)).runtime()?;
            write_summary(&dir.join("summary.txt"), &summary).runtime()
        }
        Command::Gradcheck { run, trials } => {
            let cfg = load_config(&run.common, Some(run.seed))?;
            let dir = out_dir(&run.common)?;
            let checks = pool(cfg.train.threads, || check_rollouts(cfg.seed, trials))?.runtime()?;
            let max = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            println!("max relative error {max:.3e} over {trials} micro-rollouts");
            write_summary(
                &dir.join("summary.txt"),
                &[kv("trials", trials), kv("max_relative_error", format!("{max:.6e}"))],
            )
            .runtime()?;
            if max < 1e-4 {
                Ok(())
            } else {
                Err(Failure::Runtime(Error::State(format!(
                    "gradient check failed: {max:.3e} >= 1e-4"
                ))))
            }
        }
        Command::RenderTest { common, scene_seed } => {
            let cfg = load_config(&common, None)?;
            let dir = out_dir(&common)?;
            let scene = generate_gap(scene_seed, &cfg.scene, cfg.train.start[0]).runtime()?;
            let state = QuadState::hover(Vector3::from(cfg.train.start), &cfg.dynamics);
            let img = render_depth(&scene.mesh, &CameraModel::from_state(&cfg.camera, &state));
            img.write_pgm(&dir.join("depth.pgm")).runtime()?;
            std::fs::write(dir.join("scene.txt"), scene.to_text())
                .map_err(|e| Error::io(dir.join("scene.txt"), e))
                .runtime()?;
            println!(
                "wrote {} and {}",
                dir.join("depth.pgm").display(),
                dir.join("scene.txt").display()
            );
            Ok(())
        }
        Command::BenchRender { run, frames } => {
            let cfg = load_config(&run.common, Some(run.seed))?;
            let dir = out_dir(&run.common)?;
            let tilt = [TILT_BUCKETS[0][0], TILT_BUCKETS[2][1]];
            let course = build_course(&cfg, tilt, 3, cfg.seed).runtime()?;
            let cams: Vec<CameraModel> = (0..frames)
                .map(|i| {
                    let f = i as f64 / frames.max(1) as f64;
                    let p = Vector3::new(f * 4.0, 0.5 * (f * 7.0).sin(), 1.5);
                    CameraModel::new(&cfg.camera, p, rot_x(0.2 * (f * 5.0).cos()))
                })
                .collect();
            let time = |f: &dyn Fn(&CameraModel) -> f64| {
                let t = Instant::now();
                let checksum: f64 = cams.iter().map(f).sum();
                (t.elapsed().as_secs_f64() / frames.max(1) as f64, checksum)
            };
            let (culled, c1) = time(&|c| render_depth(&course.mesh, c).data.iter().sum());
            let (brute, c2) = time(&|c| render_depth_bruteforce(&course.mesh, c).data.iter().sum());
            if c1 != c2 {
                return Err(Failure::Runtime(Error::State("renderers disagree".into())));
            }
            println!(
                "{frames} frames of {}x{} over {} triangles: culled {:.1} us/frame, brute force {:.1} us/frame",
                cfg.camera.width,
                cfg.camera.height,
                course.mesh.triangles.len(),
                culled * 1e6,
                brute * 1e6
            );
            write_summary(
                &dir.join("summary.txt"),
                &[
                    kv("frames", frames),
                    kv("triangles", course.mesh.triangles.len()),
                    kv("depth_checksum", format!("{c1:.17e}")),
                ],
            )
            .runtime()?;
            let timing = dir.join("timing.csv");
            std::fs::write(
                &timing,
                format!("renderer,seconds_per_frame\nculled,{culled:.9}\nbruteforce,{brute:.9}\n"),
            )
            .map_err(|e| Failure::Runtime(Error::io(&timing, e)))
        }
    }
}

fn mean_of(r: &crate::eval::EvalReport, f: impl Fn(&crate::eval::TrialRecord) -> f64) -> f64 {
    r.records.iter().map(f).sum::<f64>() / r.records.len().max(1) as f64
}
