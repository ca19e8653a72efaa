//! Recurrent depth-image policy and auxiliary prediction heads.
//!
//! The policy encodes the pooled inverse-depth image with three convolutions
//! and a linear projection, adds a projection of the 9-D state
//! `[v_body, R e₂, v_target]`, updates a GRU and maps the hidden state to four
//! raw outputs `(ω_x, ω_y, ω_z, thrust)`. The auxiliary heads are independent
//! one-hidden-layer perceptrons on the GRU state, predicting whether the gap
//! plane has been crossed and whether the upcoming gap is traversable.

use std::path::Path;

use diffcore::{DiffError, Tape, Tensor};
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{tensors_hash, Checkpoint, Kind};
use crate::dynamics::{soft_limit_command, ControlCommand, DynamicsParams, QuadState, StateVars};
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 9;
pub const OUTPUT_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyArch {
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    pub strides: [usize; 3],
    /// Pooled input height × width.
    pub input: [usize; 2],
    pub embed: usize,
    pub hidden: usize,
    pub aux_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch {
            channels: [32, 64, 128],
            kernels: [2, 3, 3],
            strides: [2, 1, 1],
            input: [12, 16],
            embed: 192,
            hidden: 192,
            aux_hidden: 1024,
            leaky_slope: 0.01,
        }
    }
}

impl PolicyArch {
    /// Zero padding for a kernel: none for even kernels, shape-preserving otherwise.
    pub fn padding(kernel: usize) -> usize {
        (kernel - 1) / 2
    }

    /// `[C, H, W]` after each convolution.
    pub fn conv_shapes(&self) -> Result<[[usize; 3]; 3]> {
        let mut shape = [1, self.input[0], self.input[1]];
        let mut out = [[0; 3]; 3];
        for i in 0..3 {
            let (k, s) = (self.kernels[i], self.strides[i]);
            let p = Self::padding(k);
            let (h, w) = (shape[1] + 2 * p, shape[2] + 2 * p);
            if k == 0 || s == 0 || h < k || w < k {
                return Err(Error::Config(format!(
                    "conv{} does not fit its input {:?}",
                    i + 1,
                    shape
                )));
            }
            shape = [self.channels[i], (h - k) / s + 1, (w - k) / s + 1];
            out[i] = shape;
        }
        Ok(out)
    }

    pub fn flat_dim(&self) -> Result<usize> {
        Ok(self.conv_shapes()?[2].iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.embed == 0 || self.hidden == 0 || self.aux_hidden == 0 {
            return Err(Error::Config("policy sizes must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("policy.leaky_slope must lie in [0, 1)".into()));
        }
        self.conv_shapes().map(|_| ())
    }

    /// Names and shapes of the policy tensors, in storage order.
    pub fn layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut v = Vec::new();
        let mut cin = 1;
        for i in 0..3 {
            let (c, k) = (self.channels[i], self.kernels[i]);
            v.push((format!("conv{}.weight", i + 1), vec![c, cin, k, k]));
            v.push((format!("conv{}.bias", i + 1), vec![c]));
            cin = c;
        }
        let (e, h) = (self.embed, self.hidden);
        v.push(("vis_proj.weight".into(), vec![e, self.flat_dim()?]));
        v.push(("vis_proj.bias".into(), vec![e]));
        v.push(("state_proj.weight".into(), vec![e, STATE_DIM]));
        v.push(("state_proj.bias".into(), vec![e]));
        v.push(("gru.w_ih".into(), vec![3 * h, e]));
        v.push(("gru.w_hh".into(), vec![3 * h, h]));
        v.push(("gru.b_ih".into(), vec![3 * h]));
        v.push(("gru.b_hh".into(), vec![3 * h]));
        v.push(("head.weight".into(), vec![OUTPUT_DIM, h]));
        v.push(("head.bias".into(), vec![OUTPUT_DIM]));
        Ok(v)
    }

    pub fn descriptor(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }
}

const CONV_W: [usize; 3] = [0, 2, 4];
const VIS_W: usize = 6;
const STATE_W: usize = 8;
const GRU_WIH: usize = 10;
const GRU_WHH: usize = 11;
const GRU_BIH: usize = 12;
const GRU_BHH: usize = 13;
const HEAD_W: usize = 14;
const HEAD_B: usize = 15;

fn layer<T>(name: &'static str, r: diffcore::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        DiffError::NonFinite { .. } => Error::NonFiniteActivation { layer: name },
        other => Error::Diff(other),
    })
}

/// Body-frame velocity, body y-axis in world, and target velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationState {
    pub v_body: Vector3<f64>,
    pub r_col2: Vector3<f64>,
    pub v_target: Vector3<f64>,
}

impl ObservationState {
    pub fn from_state(s: &QuadState, v_target: &Vector3<f64>) -> ObservationState {
        ObservationState {
            v_body: s.body_velocity(),
            r_col2: s.r.column(1).into(),
            v_target: *v_target,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let v: Vec<f64> = self
            .v_body
            .iter()
            .chain(self.r_col2.iter())
            .chain(self.v_target.iter())
            .copied()
            .collect();
        Ok(Tensor::vector(&v)?)
    }

    /// The same 9-vector built from tape state, so gradients reach the dynamics.
    pub fn vars(tape: &mut Tape, s: &StateVars, v_target: &Vector3<f64>) -> Result<Tensor> {
        let vb = s.body_velocity(tape)?;
        let y = s.body_y(tape)?;
        let vt = Tensor::vector(v_target.as_slice())?;
        Ok(tape.concat(&[&vb, &y, &vt])?)
    }
}

/// GRU state.
pub type HiddenState = Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub arch: PolicyArch,
    /// Values in [`PolicyArch::layout`] order.
    pub params: Vec<Tensor>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, v).expect("finite init")
}

/// Orthogonal `n × n` block from the QR factorization of a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl Policy {
    /// Fan-in uniform initialization, orthogonal recurrent blocks, and a
    /// thrust bias that commands hover.
    pub fn init(arch: &PolicyArch, seed: u64, dynamics: &DynamicsParams) -> Result<Policy> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = arch.layout()?;
        let mut params = Vec::with_capacity(layout.len());
        for (i, (name, shape)) in layout.iter().enumerate() {
            let t = if name == "gru.w_hh" {
                let h = arch.hidden;
                let mut v = Vec::with_capacity(3 * h * h);
                for _ in 0..3 {
                    let q = orthogonal(&mut rng, h);
                    for r in 0..h {
                        v.extend(q.row(r).iter());
                    }
                }
                Tensor::new(shape, v)?
            } else {
                let fan_in = if name.ends_with("bias") || name.starts_with("gru.b") {
                    layout[if name.starts_with("gru.b") { GRU_WIH } else { i - 1 }].1[1..]
                        .iter()
                        .product::<usize>()
                } else {
                    shape[1..].iter().product()
                };
                let mut bound = 1.0 / (fan_in as f64).sqrt();
                if name.starts_with("head.") {
                    bound *= 0.1;
                }
                uniform_tensor(&mut rng, shape, bound)
            };
            params.push(t);
        }
        let mut b = params[HEAD_B].to_vec();
        b[3] = (2.0 / dynamics.limits.thrust_to_weight - 1.0).atanh();
        params[HEAD_B] = Tensor::vector(&b)?;
        Ok(Policy {
            arch: arch.clone(),
            params,
        })
    }

    pub fn zeros(arch: &PolicyArch) -> Result<Policy> {
        arch.validate()?;
        let params = arch.layout()?.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Ok(Policy {
            arch: arch.clone(),
            params,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.arch
            .layout()
            .expect("validated")
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.params.iter().map(|p| tape.var(p)).collect()
    }

    pub fn reset_hidden(&self) -> HiddenState {
        Tensor::zeros(&[self.arch.hidden])
    }

    /// One recurrent step with parameters `w` (from [`Policy::bind`] or
    /// [`Policy::params`]). Returns the raw head output and the new hidden state.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &[Tensor],
        depth: &Tensor,
        obs: &Tensor,
        h: &HiddenState,
    ) -> Result<(Tensor, HiddenState)> {
        let a = &self.arch;
        if depth.shape() != [1, a.input[0], a.input[1]] {
            return Err(Error::Input(format!(
                "depth input must be [1, {}, {}], got {:?}",
                a.input[0],
                a.input[1],
                depth.shape()
            )));
        }
        if obs.shape() != [STATE_DIM] || h.shape() != [a.hidden] {
            return Err(Error::Input(format!(
                "state must be [{STATE_DIM}] and hidden [{}], got {:?} and {:?}",
                a.hidden,
                obs.shape(),
                h.shape()
            )));
        }
        const CONV: [&str; 3] = ["conv1", "conv2", "conv3"];
        let mut x = depth.clone();
        for (i, name) in CONV.iter().enumerate() {
            let (k, s) = (a.kernels[i], a.strides[i]);
            let c = layer(
                name,
                tape.conv2d(&x, &w[CONV_W[i]], &w[CONV_W[i] + 1], s, PolicyArch::padding(k)),
            )?;
            x = layer(name, tape.leaky_relu(&c, a.leaky_slope))?;
        }
        let flat = tape.reshape(&x, &[x.numel()])?;
        let vis = layer("vis_proj", tape.matvec(&w[VIS_W], &flat))?;
        let vis = layer("vis_proj", tape.add(&vis, &w[VIS_W + 1]))?;
        let st = layer("state_proj", tape.matvec(&w[STATE_W], obs))?;
        let st = layer("state_proj", tape.add(&st, &w[STATE_W + 1]))?;
        let fused = layer("fusion", tape.add(&vis, &st))?;
        let h_new = self.gru(tape, w, &fused, h)?;
        let y = layer("head", tape.matvec(&w[HEAD_W], &h_new))?;
        let y = layer("head", tape.add(&y, &w[HEAD_B]))?;
        Ok((y, h_new))
    }

    fn gru(&self, tape: &mut Tape, w: &[Tensor], x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.arch.hidden;
        let gi = layer("gru", tape.matvec(&w[GRU_WIH], x))?;
        let gi = layer("gru", tape.add(&gi, &w[GRU_BIH]))?;
        let gh = layer("gru", tape.matvec(&w[GRU_WHH], h))?;
        let gh = layer("gru", tape.add(&gh, &w[GRU_BHH]))?;
        let (ir, iz, inn) = (
            tape.slice(&gi, 0, n)?,
            tape.slice(&gi, n, n)?,
            tape.slice(&gi, 2 * n, n)?,
        );
        let (hr, hz, hn) = (
            tape.slice(&gh, 0, n)?,
            tape.slice(&gh, n, n)?,
            tape.slice(&gh, 2 * n, n)?,
        );
        let r = tape.add(&ir, &hr)?;
        let r = layer("gru", tape.sigmoid(&r))?;
        let z = tape.add(&iz, &hz)?;
        let z = layer("gru", tape.sigmoid(&z))?;
        let rn = tape.mul(&r, &hn)?;
        let c = tape.add(&inn, &rn)?;
        let c = layer("gru", tape.tanh(&c))?;
        let d = tape.sub(h, &c)?;
        let zd = tape.mul(&z, &d)?;
        layer("gru", tape.add(&c, &zd))
    }

    /// Inference without recording: command and new hidden state.
    pub fn act(
        &self,
        depth: &Tensor,
        obs: &ObservationState,
        h: &HiddenState,
        dynamics: &DynamicsParams,
    ) -> Result<(ControlCommand, HiddenState)> {
        let mut tape = Tape::no_grad();
        let (y, h_new) = self.forward(&mut tape, &self.params, depth, &obs.to_tensor()?, h)?;
        let cmd = soft_limit_command(&mut tape, &y, dynamics)?;
        Ok((cmd.value(), h_new))
    }

    /// SHA-256 of the parameter names, shapes and values.
    pub fn hash(&self) -> String {
        tensors_hash(&self.named())
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        self.names().into_iter().zip(self.params.iter().cloned()).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: Kind::Policy,
            descriptor: self.arch.descriptor(),
            tensors: self.named(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Policy> {
        if ck.kind != Kind::Policy {
            return Err(Error::Format("not a policy checkpoint".into()));
        }
        let arch: PolicyArch =
            toml::from_str(&ck.descriptor).map_err(|e| Error::Format(format!("bad architecture descriptor: {e}")))?;
        arch.validate()?;
        let layout = arch.layout()?;
        check_layout(&layout, &ck.tensors)?;
        Ok(Policy {
            arch,
            params: ck.tensors.iter().map(|(_, t)| t.clone()).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Policy> {
        Policy::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads and insists on a given architecture.
    pub fn load_expecting(path: &Path, arch: &PolicyArch) -> Result<Policy> {
        let p = Policy::load(path)?;
        if &p.arch != arch {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has {:?}, expected {:?}",
                p.arch, arch
            )));
        }
        Ok(p)
    }
}

fn check_layout(layout: &[(String, Vec<usize>)], tensors: &[(String, Tensor)]) -> Result<()> {
    if layout.len() != tensors.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "expected {} tensors, found {}",
            layout.len(),
            tensors.len()
        )));
    }
    for ((name, shape), (n, t)) in layout.iter().zip(tensors) {
        if name != n || shape.as_slice() != t.shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {name} {shape:?}, found {n} {:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuxDescriptor {
    width: usize,
    policy_hidden: usize,
    policy_sha256: String,
}

/// Gap-crossing and traversability heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHeads {
    pub width: usize,
    pub policy_hidden: usize,
    /// Hash of the policy whose hidden states these heads read.
    pub policy_hash: String,
    /// `crossing.fc1.{weight,bias}, crossing.fc2.{weight,bias}`, then the same for `trav`.
    pub params: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxHead {
    Crossing = 0,
    Traversability = 1,
}

impl AuxHeads {
    pub fn layout(width: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for head in ["crossing", "trav"] {
            v.push((format!("{head}.fc1.weight"), vec![width, hidden]));
            v.push((format!("{head}.fc1.bias"), vec![width]));
            v.push((format!("{head}.fc2.weight"), vec![1, width]));
            v.push((format!("{head}.fc2.bias"), vec![1]));
        }
        v
    }

    pub fn init(policy: &Policy, width: usize, seed: u64) -> AuxHeads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = policy.arch.hidden;
        let params = Self::layout(width, h)
            .iter()
            .map(|(name, shape)| {
                let fan_in = if name.contains("fc1") { h } else { width };
                uniform_tensor(&mut rng, shape, 1.0 / (fan_in as f64).sqrt())
            })
            .collect();
        AuxHeads {
            width,
            policy_hidden: h,
            policy_hash: policy.hash(),
            params,
        }
    }

    pub fn zeros(policy: &Policy, width: usize) -> AuxHeads {
        AuxHeads {
            width,
            policy_hidden: policy.arch.hidden,
            policy_hash: policy.hash(),
            params: Self::layout(width, policy.arch.hidden)
                .iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.params.iter().map(|p| tape.var(p)).collect()
    }

    /// Logits for a batch of hidden states `[N, hidden]`, shaped `[N, 1]`.
    pub fn logits(&self, tape: &mut Tape, w: &[Tensor], hs: &Tensor, head: AuxHead) -> Result<Tensor> {
        let o = 4 * head as usize;
        let n = hs.shape()[0];
        let ones = Tensor::new(&[n, 1], vec![1.0; n])?;
        let w1t = tape.transpose(&w[o])?;
        let z = layer("aux.fc1", tape.matmul(hs, &w1t))?;
        let b1 = tape.reshape(&w[o + 1], &[1, self.width])?;
        let b1 = tape.matmul(&ones, &b1)?;
        let z = layer("aux.fc1", tape.add(&z, &b1))?;
        let a = layer("aux.fc1", tape.leaky_relu(&z, 0.01))?;
        let w2t = tape.transpose(&w[o + 2])?;
        let y = layer("aux.fc2", tape.matmul(&a, &w2t))?;
        layer("aux.fc2", tape.add(&y, &w[o + 3]))
    }

    pub fn predict(&self, h: &HiddenState, head: AuxHead) -> Result<f64> {
        if h.shape() != [self.policy_hidden] {
            return Err(Error::Input(format!("hidden state must be [{}]", self.policy_hidden)));
        }
        let mut tape = Tape::no_grad();
        let hs = Tensor::new(&[1, self.policy_hidden], h.to_vec())?;
        let z = self.logits(&mut tape, &self.params, &hs, head)?;
        Ok(diffcore::sigmoid(z.values()[0]))
    }

    pub fn predict_crossing(&self, h: &HiddenState) -> Result<f64> {
        self.predict(h, AuxHead::Crossing)
    }

    pub fn predict_traversability(&self, h: &HiddenState) -> Result<f64> {
        self.predict(h, AuxHead::Traversability)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let desc = AuxDescriptor {
            width: self.width,
            policy_hidden: self.policy_hidden,
            policy_sha256: self.policy_hash.clone(),
        };
        Checkpoint {
            kind: Kind::Auxiliary,
            descriptor: toml::to_string(&desc).expect("descriptor serializes"),
            tensors: Self::layout(self.width, self.policy_hidden)
                .into_iter()
                .map(|(n, _)| n)
                .zip(self.params.iter().cloned())
                .collect(),
        }
    }

    /// Loads heads for `policy`. `width`, when given, must match the file.
    pub fn load(path: &Path, policy: &Policy, width: Option<usize>) -> Result<AuxHeads> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != Kind::Auxiliary {
            return Err(Error::Format("not an auxiliary-head checkpoint".into()));
        }
        let d: AuxDescriptor =
            toml::from_str(&ck.descriptor).map_err(|e| Error::Format(format!("bad auxiliary descriptor: {e}")))?;
        if let Some(w) = width.filter(|&w| w != d.width) {
            return Err(Error::ArchitectureMismatch(format!(
                "auxiliary heads have hidden width {}, expected {w}",
                d.width
            )));
        }
        if d.policy_hidden != policy.arch.hidden || d.policy_sha256 != policy.hash() {
            return Err(Error::ArchitectureMismatch(
                "auxiliary heads were trained on a different policy".into(),
            ));
        }
        check_layout(&Self::layout(d.width, d.policy_hidden), &ck.tensors)?;
        Ok(AuxHeads {
            width: d.width,
            policy_hidden: d.policy_hidden,
            policy_hash: d.policy_sha256,
            params: ck.tensors.into_iter().map(|(_, t)| t).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let a = PolicyArch::default();
        assert_eq!(a.conv_shapes().unwrap(), [[32, 6, 8], [64, 6, 8], [128, 6, 8]]);
        assert_eq!(a.flat_dim().unwrap(), 6144);
    }

    #[test]
    fn zero_policy_commands_half_thrust() {
        let dynp = DynamicsParams::default();
        let p = Policy::zeros(&PolicyArch::default()).unwrap();
        let obs = ObservationState {
            v_body: Vector3::zeros(),
            r_col2: Vector3::y(),
            v_target: Vector3::new(3.0, 0.0, 0.0),
        };
        let depth = Tensor::new(&[1, 12, 16], vec![0.1; 192]).unwrap();
        let (cmd, h) = p.act(&depth, &obs, &p.reset_hidden(), &dynp).unwrap();
        assert_eq!(cmd.omega_c, Vector3::zeros());
        assert_eq!(cmd.thrust_c, dynp.max_thrust() / 2.0);
        assert_eq!(h.shape(), [192]);
        let aux = AuxHeads::zeros(&p, 1024);
        assert_eq!(aux.predict_crossing(&h).unwrap(), 0.5);
        assert_eq!(aux.predict_traversability(&h).unwrap(), 0.5);
    }

    #[test]
    fn init_hovers_and_orthogonal_blocks() {
        let dynp = DynamicsParams::default();
        let arch = PolicyArch {
            channels: [4, 4, 4],
            embed: 8,
            hidden: 8,
            ..PolicyArch::default()
        };
        let p = Policy::init(&arch, 3, &dynp).unwrap();
        let b = p.params[HEAD_B].values()[3];
        assert!((dynp.max_thrust() * (b.tanh() + 1.0) / 2.0 - dynp.hover_thrust()).abs() < 1e-12);
        let whh = p.params[GRU_WHH].values();
        let q = DMatrix::from_row_slice(8, 8, &whh[..64]);
        assert!((q.transpose() * &q - DMatrix::identity(8, 8)).amax() < 1e-12);
        assert_eq!(p, Policy::init(&arch, 3, &dynp).unwrap());
    }
}
