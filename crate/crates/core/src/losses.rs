//! Gap-traversal loss terms on tape tensors.
//!
//! Per step: a position term and a rotation term, both gated by proximity to
//! the gap plane, plus velocity-tracking and forward-alignment terms that
//! switch off once the plane has been passed. Over the whole command
//! sequence: action and jerk smoothness. Gates are stop-gradient constants
//! unless [`LossWeights::stop_gradient`] is disabled.

use diffcore::{Tape, Tensor};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{tensor3, tensor33, GapRelativeVars};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub lambda_v: f64,
    pub lambda_f: f64,
    pub lambda_a: f64,
    pub lambda_j: f64,
    /// Detach the proximity gates of the position and rotation terms.
    pub stop_gradient: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 10.0,
            lambda_r: 10.0,
            lambda_v: 0.1,
            lambda_f: 1.0,
            lambda_a: 0.01,
            lambda_j: 1e-4,
            stop_gradient: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `[λp, λr, λv, λf, λa, λj]`
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.lambda_p,
            self.lambda_r,
            self.lambda_v,
            self.lambda_f,
            self.lambda_a,
            self.lambda_j,
        ]
    }
}

pub const TERM_NAMES: [&str; 6] = ["l_p", "l_r", "l_v", "l_f", "l_a", "l_j"];

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    /// `[L_p, L_r, L_v, L_f, L_a, L_j]`
    pub terms: [Tensor; 6],
    pub total: Tensor,
}

impl LossBreakdown {
    pub fn values(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.terms[i].item())
    }
}

fn zero() -> Tensor {
    Tensor::scalar(0.0)
}

/// `max(1 − |d|, 0)`, on the tape when `detach` is false.
fn proximity_gate(tape: &mut Tape, rel: &GapRelativeVars, detach: bool) -> Result<Option<Tensor>> {
    let d = rel.d_gap.item();
    if 1.0 - d.abs() <= 0.0 {
        return Ok(None);
    }
    if detach {
        return Ok(Some(Tensor::scalar(1.0 - d.abs())));
    }
    let a = tape.abs(&rel.d_gap)?;
    let n = tape.neg(&a)?;
    let g = tape.offset(&n, 1.0)?;
    Ok(Some(tape.max_const(&g, 0.0)?))
}

/// `‖p_proj‖ · SG(max(1 − |d|, 0))`.
pub fn position_loss(tape: &mut Tape, rel: &GapRelativeVars, detach: bool) -> Result<Tensor> {
    let Some(gate) = proximity_gate(tape, rel, detach)? else {
        return Ok(zero());
    };
    let n = tape.norm(&rel.p_proj)?;
    Ok(tape.mul(&n, &gate)?)
}

/// `‖½(R_gᵀR − RᵀR_g)^∨‖ · SG(max(1 − |d|, 0))`.
pub fn rotation_loss(
    tape: &mut Tape,
    r: &Tensor,
    r_gap: &Matrix3<f64>,
    rel: &GapRelativeVars,
    detach: bool,
) -> Result<Tensor> {
    let Some(gate) = proximity_gate(tape, rel, detach)? else {
        return Ok(zero());
    };
    let m = tape.matmul(&tensor33(&r_gap.transpose()), r)?;
    // (m32, m13, m21) − (m23, m31, m12) of the row-major 3×3.
    let upper = tape.gather(&m, &[7, 2, 3])?;
    let lower = tape.gather(&m, &[5, 6, 1])?;
    let diff = tape.sub(&upper, &lower)?;
    let vee = tape.scale(&diff, 0.5)?;
    let n = tape.norm(&vee)?;
    Ok(tape.mul(&n, &gate)?)
}

/// `‖v − v_ref‖ · SG(b)`.
pub fn velocity_loss(tape: &mut Tape, v: &Tensor, v_ref: &Vector3<f64>, rel: &GapRelativeVars) -> Result<Tensor> {
    if !rel.before_plane {
        return Ok(zero());
    }
    let e = tape.sub(v, &tensor3(v_ref))?;
    Ok(tape.norm(&e)?)
}

/// `acos(unit(p_g − p) · R e₁) · SG(b)`; zero when `p` is within 1e-6 m of `p_g`.
pub fn alignment_loss(
    tape: &mut Tape,
    p: &Tensor,
    p_gap: &Vector3<f64>,
    r: &Tensor,
    rel: &GapRelativeVars,
) -> Result<Tensor> {
    if !rel.before_plane {
        return Ok(zero());
    }
    let bearing = tape.sub(&tensor3(p_gap), p)?;
    let n = tape.norm(&bearing)?;
    if n.item() < 1e-6 {
        return Ok(zero());
    }
    let unit = tape.div(&bearing, &n)?;
    let heading = tape.gather(r, &[0, 3, 6])?;
    let c = tape.dot(&unit, &heading)?;
    Ok(tape.acos(&c)?)
}

/// `(1/T) Σ ‖u_k‖²`.
pub fn action_loss(tape: &mut Tape, us: &[Tensor]) -> Result<Tensor> {
    if us.is_empty() {
        return Err(Error::Input("action loss needs at least one command".into()));
    }
    let mut acc = zero();
    for u in us {
        let sq = tape.dot(u, u)?;
        acc = tape.add(&acc, &sq)?;
    }
    Ok(tape.scale(&acc, 1.0 / us.len() as f64)?)
}

/// `(1/(T−1)) Σ ‖(u_k − u_{k+1}) / Δt‖²`.
pub fn jerk_loss(tape: &mut Tape, us: &[Tensor], dt: f64) -> Result<Tensor> {
    if us.len() < 2 {
        return Err(Error::Input(format!(
            "jerk loss needs T >= 2 commands, got {}",
            us.len()
        )));
    }
    let mut acc = zero();
    for w in us.windows(2) {
        let d = tape.sub(&w[0], &w[1])?;
        let sq = tape.dot(&d, &d)?;
        acc = tape.add(&acc, &sq)?;
    }
    Ok(tape.scale(&acc, 1.0 / ((us.len() - 1) as f64 * dt * dt))?)
}

/// `(L_a, L_j)` over a command sequence of length `T ≥ 2`.
pub fn smoothness_losses(tape: &mut Tape, us: &[Tensor], dt: f64) -> Result<(Tensor, Tensor)> {
    let lj = jerk_loss(tape, us, dt)?;
    Ok((action_loss(tape, us)?, lj))
}

/// Running horizon sums of the four per-step terms.
#[derive(Clone, Debug)]
pub struct StepLossSums {
    pub sums: [Tensor; 4],
    pub steps: usize,
}

impl Default for StepLossSums {
    fn default() -> Self {
        StepLossSums {
            sums: std::array::from_fn(|_| zero()),
            steps: 0,
        }
    }
}

impl StepLossSums {
    pub fn push(&mut self, tape: &mut Tape, terms: &[Tensor; 4]) -> Result<()> {
        for (s, t) in self.sums.iter_mut().zip(terms) {
            *s = tape.add(s, t)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Horizon-averages the per-step terms and forms `Σ λᵢ Lᵢ`.
pub fn total_loss(
    tape: &mut Tape,
    sums: &StepLossSums,
    l_a: Tensor,
    l_j: Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if sums.steps == 0 {
        return Err(Error::Input("total loss over an empty horizon".into()));
    }
    let inv = 1.0 / sums.steps as f64;
    let mut terms: Vec<Tensor> = Vec::with_capacity(6);
    for s in &sums.sums {
        terms.push(tape.scale(s, inv)?);
    }
    terms.push(l_a);
    terms.push(l_j);
    let terms: [Tensor; 6] = terms.try_into().expect("six terms");
    let total = weighted_sum(tape, &terms, weights)?;
    Ok(LossBreakdown { terms, total })
}

pub fn weighted_sum(tape: &mut Tape, terms: &[Tensor; 6], weights: &LossWeights) -> Result<Tensor> {
    let mut total = zero();
    for (t, w) in terms.iter().zip(weights.as_array()) {
        let wt = tape.scale(t, w)?;
        total = tape.add(&total, &wt)?;
    }
    Ok(total)
}
