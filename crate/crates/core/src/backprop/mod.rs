//! Hand-written reverse pass over the time-unrolled network.
//!
//! For one neuron of a dual-branch layer at step `t`, with adjoints `A·'`
//! carried back from step `t + 1` (zero at `t = T`):
//!
//! ```text
//! A_o  = dL/ds − rho (A_u' + A_v')
//! A_v  = beta2 A_v' + A_o · surrogate(v, threshold)
//! A_u  = beta1 A_u' + A_v (alpha2 + scale · gate)
//! dL/dx = alpha1 (A_u + A_ũ)
//! ```
//!
//! `gate` is the mask recorded during the forward pass; the derivative of
//! the gate itself is taken to be identically zero. `scale` is `mu` for the
//! enhanced branch and `phi` for the weakened one.

mod gradcheck;

pub use gradcheck::{
    gradient_check, random_problem, BlockReport, GradCheckOptions, GradCheckReport,
};

use sha2::Sha256;

use crate::error::{Error, Result};
use crate::network::{Model, ParamId, ParamStore};
use crate::neurons::{self, Branch, NeuronParams, ResetMode};
use crate::tensor::{self, Tensor};

/// Default width of the rectangular surrogate.
pub const DEFAULT_SURROGATE_WIDTH: f64 = 1.0;

/// Rectangular surrogate derivative for one value: `1/width` strictly inside
/// the window `|v - threshold| < width/2`, else 0.
#[inline]
pub fn surrogate(v: f64, threshold: f64, width: f64) -> f64 {
    if (v - threshold).abs() < width / 2.0 {
        1.0 / width
    } else {
        0.0
    }
}

pub fn surrogate_grad(v: &[f64], threshold: f64, width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) {
        return Err(Error::invalid(format!(
            "surrogate width must be positive, got {width}"
        )));
    }
    Ok(v.iter().map(|&x| surrogate(x, threshold, width)).collect())
}

/// `dL/dx = alpha1 (A_u + A_ũ)` for every neuron.
pub fn input_grad(alpha1: f64, adj_u: &[f64], adj_u_w: &[f64]) -> Result<Vec<f64>> {
    if adj_u.len() != adj_u_w.len() {
        return Err(Error::shape(format!(
            "dendrite adjoints have {} and {} entries",
            adj_u.len(),
            adj_u_w.len()
        )));
    }
    Ok(adj_u
        .iter()
        .zip(adj_u_w)
        .map(|(a, b)| alpha1 * (a + b))
        .collect())
}

/// Gradient reaching presynaptic spikes through a dense synapse:
/// `dL/ds_i = sum_j w[j, i] dL/dx_j`. `grad_x` is `rows x outer`, `weights`
/// is `outer x inner`.
pub fn spike_grad(grad_x: &[f64], rows: usize, weights: &[f64], outer: usize, inner: usize) -> Result<Vec<f64>> {
    if grad_x.len() != rows * outer || weights.len() != outer * inner {
        return Err(Error::shape(format!(
            "spike_grad: grad_x has {} entries for {rows}x{outer}, weights {} for {outer}x{inner}",
            grad_x.len(),
            weights.len()
        )));
    }
    Ok(tensor::gemm_nn(grad_x, rows, outer, weights, inner))
}

/// `dL/ds_i = sum_j w[j, i] alpha1 (A_u_j + A_ũ_j)` for the downstream layer.
pub fn backward_spike_sum(
    adj_u_next: &[f64],
    adj_u_w_next: &[f64],
    weights: &[f64],
    params: &NeuronParams,
    rows: usize,
    inner: usize,
) -> Result<Vec<f64>> {
    let gx = input_grad(params.alpha1, adj_u_next, adj_u_w_next)?;
    let outer = if rows == 0 { 0 } else { gx.len() / rows };
    spike_grad(&gx, rows, weights, outer, inner)
}

/// `dL/dw[j, i] = sum_t dL/dx_j^t s_i^t`, summed over every row (time step
/// and batch element). `presyn` is `rows x inner`, `grad_x` is `rows x outer`.
pub fn backward_weights(presyn: &[f64], grad_x: &[f64], rows: usize, inner: usize, outer: usize) -> Result<Vec<f64>> {
    if presyn.len() != rows * inner || grad_x.len() != rows * outer {
        return Err(Error::shape(format!(
            "backward_weights: {} presynaptic and {} postsynaptic entries for {rows} rows",
            presyn.len(),
            grad_x.len()
        )));
    }
    Ok(tensor::gemm_tn(grad_x, presyn, rows, outer, inner))
}

/// Adjoint of a spike: downstream gradient plus its reset effect on the
/// next step's dendrite and soma.
#[inline]
pub fn spike_adjoint(grad_s: f64, rho: f64, adj_u_next: f64, adj_v_next: f64) -> f64 {
    grad_s - rho * (adj_u_next + adj_v_next)
}

#[inline]
pub fn soma_adjoint(adj_v_next: f64, beta2: f64, adj_o: f64, surrogate: f64) -> f64 {
    beta2 * adj_v_next + adj_o * surrogate
}

/// Dendrite adjoint. The recorded gate selects between `alpha2 + scale`
/// (dendrite changed in the perceived direction) and `alpha2`.
#[inline]
pub fn dendrite_adjoint(adj_u_next: f64, beta1: f64, adj_v: f64, alpha2: f64, scale: f64, gate: bool) -> f64 {
    let transfer = if gate { alpha2 + scale } else { alpha2 };
    beta1 * adj_u_next + adj_v * transfer
}

/// Everything recorded for one neuron at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeuronRecord {
    pub x: f64,
    pub u: f64,
    pub v: f64,
    pub o: f64,
    pub e: f64,
    pub gate_up: bool,
    pub u_w: f64,
    pub v_w: f64,
    pub o_w: f64,
    pub w: f64,
    pub gate_down: bool,
}

impl NeuronRecord {
    /// Summed output spike.
    #[inline]
    pub fn spike(&self) -> f64 {
        self.o + self.o_w
    }
}

/// Per-neuron adjoints at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeuronAdjoint {
    pub u: f64,
    pub v: f64,
    pub o: f64,
    pub u_w: f64,
    pub v_w: f64,
    pub o_w: f64,
    /// `dL/dx` at this step.
    pub x: f64,
}

/// Which parts of the dual-branch neuron are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchFlags {
    pub enhance: bool,
    pub weaken: bool,
}

/// Reverse step for one neuron of a DSA / CP-DSA layer. `rec` is the tape at
/// step `t`, `prev` the tape at `t - 1` (resting record for the first step).
/// Returns the adjoints at `t` and accumulates the seven scalar gradients
/// into `scalar_grads`.
#[inline]
pub fn backward_neuron_step(
    p: &NeuronParams,
    flags: BranchFlags,
    width: f64,
    next: &NeuronAdjoint,
    grad_s: f64,
    rec: &NeuronRecord,
    prev: &NeuronRecord,
    scalar_grads: &mut [f64; 7],
) -> NeuronAdjoint {
    let mut adj = NeuronAdjoint::default();
    let mu = if flags.enhance { p.mu } else { 0.0 };

    adj.o = spike_adjoint(grad_s, p.rho, next.u, next.v);
    adj.v = soma_adjoint(next.v, p.beta2, adj.o, surrogate(rec.v, p.v_th, width));
    adj.u = dendrite_adjoint(next.u, p.beta1, adj.v, p.alpha2, mu, rec.gate_up);

    scalar_grads[neurons::ALPHA1] += adj.u * rec.x;
    scalar_grads[neurons::BETA1] += adj.u * prev.u;
    scalar_grads[neurons::RHO] -= (adj.u + adj.v) * prev.o;
    scalar_grads[neurons::ALPHA2] += adj.v * rec.u;
    scalar_grads[neurons::BETA2] += adj.v * prev.v;
    if flags.enhance && rec.gate_up {
        scalar_grads[neurons::MU] += adj.v * rec.u;
    }

    let mut adj_u_sum = adj.u;
    if flags.weaken {
        adj.o_w = spike_adjoint(grad_s, p.rho, next.u_w, next.v_w);
        adj.v_w = soma_adjoint(next.v_w, p.beta2, adj.o_w, surrogate(rec.v_w, p.u_th, width));
        adj.u_w = dendrite_adjoint(next.u_w, p.beta1, adj.v_w, p.alpha2, p.phi, rec.gate_down);

        scalar_grads[neurons::ALPHA1] += adj.u_w * rec.x;
        scalar_grads[neurons::BETA1] += adj.u_w * prev.u_w;
        scalar_grads[neurons::RHO] -= (adj.u_w + adj.v_w) * prev.o_w;
        scalar_grads[neurons::ALPHA2] += adj.v_w * rec.u_w;
        scalar_grads[neurons::BETA2] += adj.v_w * prev.v_w;
        if rec.gate_down {
            scalar_grads[neurons::PHI] += adj.v_w * rec.u_w;
        }
        adj_u_sum += adj.u_w;
    }
    adj.x = p.alpha1 * adj_u_sum;
    adj
}

/// Reverse step for one LIF neuron. Uses `u`/`o` of the records.
#[inline]
pub fn backward_lif_step(
    p: &NeuronParams,
    mode: ResetMode,
    width: f64,
    next: &NeuronAdjoint,
    grad_s: f64,
    rec: &NeuronRecord,
) -> NeuronAdjoint {
    let decay = p.lif_decay();
    let mut adj = NeuronAdjoint::default();
    match mode {
        ResetMode::Hard => {
            adj.o = grad_s - next.u * decay * rec.u;
            adj.u = next.u * decay * (1.0 - rec.o) + adj.o * surrogate(rec.u, p.v_th, width);
        }
        ResetMode::Soft => {
            adj.o = grad_s - p.v_th * next.u;
            adj.u = decay * next.u + adj.o * surrogate(rec.u, p.v_th, width);
        }
    }
    adj.x = adj.u;
    adj
}

/// Tape of one neuron layer: `T * per_step` records in time-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronTape {
    pub records: Vec<NeuronRecord>,
    pub per_step: usize,
    /// LIF layers keep their membrane potential in `u` and fire from it.
    pub lif: bool,
    pub v_th: f64,
    pub u_th: f64,
}

impl NeuronTape {
    pub fn step(&self, t: usize) -> &[NeuronRecord] {
        &self.records[t * self.per_step..(t + 1) * self.per_step]
    }

    pub fn time_steps(&self) -> usize {
        if self.per_step == 0 {
            0
        } else {
            self.records.len() / self.per_step
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdBnTape {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    /// Elements pooled per channel.
    pub population: usize,
    pub batch_stats: bool,
}

/// Forward record of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerTape {
    Dense { input: Tensor },
    Conv { input: Tensor },
    AvgPool { input_shape: Vec<usize> },
    Dropout { mask: Option<Vec<f64>> },
    TdBn(TdBnTape),
    Neuron(NeuronTape),
    Residual { branch: Vec<LayerTape>, skip: Vec<LayerTape> },
    Head { input: Tensor },
}

/// Recorded forward trajectory of a whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    pub time_steps: usize,
    pub batch: usize,
    pub layers: Vec<LayerTape>,
}

/// Gate masks of every neuron layer, in forward order, used to freeze the
/// change-perceptive gates of a relaxed forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateMasks {
    pub layers: Vec<Vec<(bool, bool)>>,
}

impl Tape {
    /// Neuron tapes in forward order, descending into residual blocks
    /// (branch before skip).
    pub fn neuron_tapes(&self) -> Vec<&NeuronTape> {
        fn walk<'a>(layers: &'a [LayerTape], out: &mut Vec<&'a NeuronTape>) {
            for l in layers {
                match l {
                    LayerTape::Neuron(n) => out.push(n),
                    LayerTape::Residual { branch, skip } => {
                        walk(branch, out);
                        walk(skip, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn gate_masks(&self) -> GateMasks {
        GateMasks {
            layers: self
                .neuron_tapes()
                .iter()
                .map(|n| n.records.iter().map(|r| (r.gate_up, r.gate_down)).collect())
                .collect(),
        }
    }

    /// Bit pattern of every place where a relaxed forward pass is not smooth:
    /// rectangle-window membership of each soma and the gate each dendritic
    /// change would produce. Two parameter points with equal signatures lie
    /// in the same smooth piece.
    pub fn kink_signature(&self, width: f64) -> Vec<bool> {
        let mut sig = Vec::new();
        for nt in self.neuron_tapes() {
            let m = nt.per_step;
            for (i, r) in nt.records.iter().enumerate() {
                if nt.lif {
                    sig.push(surrogate(r.u, nt.v_th, width) != 0.0);
                    continue;
                }
                let prev = if i >= m { nt.records[i - m] } else { NeuronRecord::default() };
                sig.push(surrogate(r.v, nt.v_th, width) != 0.0);
                sig.push(surrogate(r.v_w, nt.u_th, width) != 0.0);
                sig.push(neurons::branch_gate(Branch::Enhanced, prev.u, r.u));
                sig.push(neurons::branch_gate(Branch::Weakened, prev.u_w, r.u_w));
            }
        }
        sig
    }
}

/// Gradients for every block of a [`ParamStore`], with a write counter per
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub blocks: Vec<Vec<f64>>,
    writes: Vec<u32>,
}

impl GradSet {
    pub fn zeros_for(store: &ParamStore) -> Self {
        GradSet {
            blocks: store.blocks().iter().map(|b| vec![0.0; b.values.len()]).collect(),
            writes: vec![0; store.len()],
        }
    }

    pub fn write(&mut self, id: ParamId, values: Vec<f64>) {
        assert_eq!(self.blocks[id.0].len(), values.len(), "gradient block size");
        self.blocks[id.0] = values;
        self.writes[id.0] += 1;
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.blocks[id.0]
    }

    pub fn write_counts(&self) -> &[u32] {
        &self.writes
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[allow(dead_code)]
    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        use sha2::Digest;
        for b in &self.blocks {
            for v in b {
                h.update(v.to_le_bytes());
            }
        }
    }
}

/// Runs the reverse pass from `grad_logits` (`[T, B, classes]`) and returns
/// gradients for every parameter block of `model`.
pub fn backward(model: &Model, tape: &Tape, grad_logits: &Tensor) -> Result<GradSet> {
    model.backward(tape, grad_logits)
}
