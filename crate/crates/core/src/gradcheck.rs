//! Finite-difference check of back-propagation through short closed-loop
//! rollouts with a tiny policy.
//!
//! Depth observations are recorded once and then held fixed, since ray-cast
//! depth is piecewise constant in the state and carries no gradient. The
//! distance gate is built on the tape so that the analytic and numeric
//! derivatives describe the same function.

use diffcore::gradcheck::{central_difference, relative_error, GradCheckConfig};
use diffcore::{Tape, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyArch};
use crate::renderer::CameraConfig;
use crate::trainer::{mix_seed, rollout, Episode, RolloutOptions};

pub const MICRO_HORIZON: usize = 5;

/// Configuration of the micro rollouts: 8×8 camera (4×4 after pooling),
/// three 2-channel convolutions, 6-wide embeddings and hidden state.
pub fn micro_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.camera = CameraConfig {
        width: 8,
        height: 8,
        ..CameraConfig::default()
    };
    cfg.policy = PolicyArch {
        channels: [2, 2, 2],
        kernels: [3, 3, 3],
        strides: [1, 2, 1],
        input: [4, 4],
        embed: 6,
        hidden: 6,
        aux_hidden: 8,
        leaky_slope: 0.01,
    };
    cfg.train.horizon = MICRO_HORIZON;
    cfg.loss.stop_gradient = false;
    cfg.scene.distance = [0.6, 0.9];
    cfg.scene.tilt_deg = [0.0, 60.0];
    cfg
}

/// Minimum distance of every non-differentiable op input from its kink.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug)]
pub struct RolloutCheck {
    pub max_rel_err: f64,
    pub parameters: usize,
    pub kink_margin: f64,
    /// Sampled rollouts rejected for passing too close to a kink.
    pub rejected: u64,
}

/// Compares BPTT and finite-difference gradients of the rollout loss with
/// respect to every policy parameter.
///
/// Rollouts whose tape passes within [`KINK_MARGIN`] of a non-differentiable
/// point are redrawn, because a stencil straddling a kink measures a one-sided
/// mixture rather than the derivative.
pub fn check_rollout(seed: u64) -> Result<RolloutCheck> {
    let cfg = micro_config(seed);
    let opts = RolloutOptions::from_config(&cfg);
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[3, attempt]));
        let policy = Policy::init(&cfg.policy, rng.gen(), &cfg.dynamics)?;
        let mut ep = Episode::sample(&cfg, &cfg.scene, rng.gen())?;
        ep.init.v += Vector3::new(rng.gen_range(0.5..1.5), 0.0, 0.0);

        let mut tape = Tape::no_grad();
        let recorded = rollout(&mut tape, &policy, &policy.params, &ep, &opts, None)?;
        let obs = recorded.record.observations;

        let mut tape = Tape::new();
        let w = policy.bind(&mut tape);
        let loss = rollout(&mut tape, &policy, &w, &ep, &opts, Some(&obs))?.breakdown.total;
        let kink_margin = tape.kink_margin();
        if kink_margin < KINK_MARGIN {
            continue;
        }
        let grads = tape.backward(&loss)?;
        let analytic: Vec<f64> = w.iter().flat_map(|t| grads.get_or_zeros(t)).collect();

        let flat: Vec<f64> = policy.params.iter().flat_map(|t| t.to_vec()).collect();
        let eval = |x: &[f64]| -> f64 {
            let mut offset = 0;
            let params: Result<Vec<Tensor>> = policy
                .params
                .iter()
                .map(|t| {
                    let n = t.numel();
                    offset += n;
                    Ok(Tensor::new(t.shape(), x[offset - n..offset].to_vec())?)
                })
                .collect();
            let mut tape = Tape::no_grad();
            params
                .and_then(|w| rollout(&mut tape, &policy, &w, &ep, &opts, Some(&obs)))
                .map_or(f64::NAN, |o| o.breakdown.total.item())
        };
        let fd = GradCheckConfig::default();
        let numeric = central_difference(eval, &flat, fd.step);
        let max_rel_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| {
                if n.is_finite() {
                    relative_error(a, n, fd.floor)
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max);
        return Ok(RolloutCheck {
            max_rel_err,
            parameters: flat.len(),
            kink_margin,
            rejected: attempt,
        });
    }
    Err(Error::State(format!(
        "no kink-free micro-rollout in {MAX_ATTEMPTS} draws"
    )))
}

/// Runs `trials` independent micro-rollout checks and returns each maximum error.
pub fn check_rollouts(seed: u64, trials: usize) -> Result<Vec<RolloutCheck>> {
    (0..trials)
        .map(|i| check_rollout(mix_seed(seed, &[i as u64])))
        .collect()
}
