//! Run configuration, loaded from TOML.
//!
//! Every section has defaults, so a config file only needs to list overrides:
//!
//! ```toml
//! seed = 7
//! [train]
//! iterations = 2000
//! batch = 16
//! horizon = 40
//! [scene]
//! tilt_deg = [0.0, 30.0]
//! vertex_jitter = 0.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::policy::PolicyArch;
use crate::renderer::{CameraConfig, NoiseConfig, SceneConfig};
use crate::trainer::{AuxConfig, BimodalInit, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dynamics: DynamicsParams,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub noise: NoiseConfig,
    pub policy: PolicyArch,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub bimodal: BimodalInit,
    pub aux: AuxConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dynamics: DynamicsParams::default(),
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            noise: NoiseConfig::default(),
            policy: PolicyArch::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            bimodal: BimodalInit::default(),
            aux: AuxConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Evaluation protocol settings shared by the harness subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    /// Desired speed used for the target-velocity input during evaluation, m/s.
    pub speed: f64,
    /// Timeout as a multiple of the nominal time to reach the gap.
    pub timeout_factor: f64,
    /// Steps simulated after a plane crossing while clearance is still tracked.
    pub post_crossing_steps: usize,
    /// Spacing between consecutive gaps in multi-gap runs, m.
    pub gap_spacing: [f64; 2],
    pub multi_tilt_max_deg: f64,
    pub multi_gaps: usize,
    /// Gap scale range for the traversability study.
    pub trav_scale: [f64; 2],
    pub trav_trajectories: usize,
    pub noise_levels: Vec<f64>,
    /// Safety radius used for collisions and traversability labels, m.
    pub collision_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 100,
            speed: 3.0,
            timeout_factor: 3.0,
            post_crossing_steps: 5,
            gap_spacing: [3.0, 5.0],
            multi_tilt_max_deg: 50.0,
            multi_gaps: 3,
            trav_scale: [0.5, 1.0],
            trav_trajectories: 300,
            noise_levels: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            collision_radius: 0.1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.scene.validate()?;
        self.camera.validate()?;
        self.policy.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.bimodal.validate()?;
        let e = &self.eval;
        if e.speed <= 0.0 || e.timeout_factor <= 0.0 || e.collision_radius <= 0.0 {
            return Err(Error::Config("eval speed, timeout and radius must be positive".into()));
        }
        if e.gap_spacing[0] <= 0.0 || e.gap_spacing[0] > e.gap_spacing[1] {
            return Err(Error::Config(
                "eval gap_spacing must be an increasing positive range".into(),
            ));
        }
        if e.trav_scale[0] <= 0.0 || e.trav_scale[0] > e.trav_scale[1] {
            return Err(Error::Config(
                "eval trav_scale must be an increasing positive range".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
