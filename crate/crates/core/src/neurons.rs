//! Single-step dynamics of the neuron variants.
//!
//! All variants start from rest: potentials and spikes are zero before the
//! first step, and the first change-perceptive gate compares `u¹` with 0.
//!
//! Step-function conventions:
//! * spike generation fires when the potential is at or above threshold;
//! * the change-perceptive gates open only on a strict change, so a flat
//!   dendrite produces neither enhancement nor weakening.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Enhanced-branch somatic threshold.
pub const V_TH: f64 = 0.5;
/// Weakened-branch somatic threshold.
pub const U_TH: f64 = 1.0;

/// Names of the learnable scalars, in storage order.
pub const SCALAR_NAMES: [&str; 7] = ["alpha1", "alpha2", "beta1", "beta2", "rho", "mu", "phi"];

/// Admissible range of each learnable scalar, in storage order.
pub const SCALAR_RANGES: [(f64, f64); 7] = [
    (0.0, 2.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
    (0.0, 1.0),
];

pub const ALPHA1: usize = 0;
pub const ALPHA2: usize = 1;
pub const BETA1: usize = 2;
pub const BETA2: usize = 3;
pub const RHO: usize = 4;
pub const MU: usize = 5;
pub const PHI: usize = 6;

/// Per-layer neuron coefficients. The seven scalars `alpha1..phi` are
/// learnable; thresholds and `tau` are fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    /// Axon terminal to dendrite transfer.
    pub alpha1: f64,
    /// Dendrite to soma transfer.
    pub alpha2: f64,
    /// Dendritic decay.
    pub beta1: f64,
    /// Somatic decay.
    pub beta2: f64,
    /// Soft-reset coefficient applied to dendrite and soma after a spike.
    pub rho: f64,
    /// Enhancement scale.
    pub mu: f64,
    /// Weakening scale.
    pub phi: f64,
    pub v_th: f64,
    pub u_th: f64,
    /// Membrane time constant of the LIF variant.
    pub tau: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            alpha1: 1.0,
            alpha2: 0.5,
            beta1: 0.5,
            beta2: 0.5,
            rho: 0.5,
            mu: 0.5,
            phi: 0.5,
            v_th: V_TH,
            u_th: U_TH,
            tau: 2.0,
        }
    }
}

impl NeuronParams {
    pub fn scalars(&self) -> [f64; 7] {
        [
            self.alpha1,
            self.alpha2,
            self.beta1,
            self.beta2,
            self.rho,
            self.mu,
            self.phi,
        ]
    }

    pub fn with_scalars(mut self, s: &[f64]) -> Self {
        assert_eq!(s.len(), 7, "neuron scalar block has 7 entries");
        self.alpha1 = s[ALPHA1];
        self.alpha2 = s[ALPHA2];
        self.beta1 = s[BETA1];
        self.beta2 = s[BETA2];
        self.rho = s[RHO];
        self.mu = s[MU];
        self.phi = s[PHI];
        self
    }

    pub fn in_range(&self) -> bool {
        scalars_in_range(&self.scalars())
    }

    pub fn clamp_to_ranges(&mut self) {
        let mut s = self.scalars();
        clamp_scalars(&mut s);
        *self = self.with_scalars(&s);
    }

    /// LIF leak factor `1 - 1/tau`.
    pub fn lif_decay(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }

    pub fn validate(&self) -> Result<()> {
        if !self.in_range() {
            return Err(Error::invalid(format!(
                "neuron scalars {:?} outside their admissible ranges",
                self.scalars()
            )));
        }
        if !(self.tau > 1.0) {
            return Err(Error::invalid(format!("tau must exceed 1, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn scalars_in_range(s: &[f64]) -> bool {
    s.iter()
        .zip(SCALAR_RANGES)
        .all(|(&v, (lo, hi))| (lo..=hi).contains(&v))
}

pub fn clamp_scalars(s: &mut [f64]) {
    for (v, (lo, hi)) in s.iter_mut().zip(SCALAR_RANGES) {
        *v = v.clamp(lo, hi);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetMode {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Enhanced,
    Weakened,
}

/// Spike nonlinearity. `Relaxed` replaces the step by the piecewise-linear
/// ramp whose derivative is the rectangular surrogate of width `width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeFn {
    Step,
    Relaxed { width: f64 },
}

impl SpikeFn {
    #[inline]
    pub fn eval(self, v: f64, threshold: f64) -> f64 {
        match self {
            SpikeFn::Step => {
                if fires(v, threshold) {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Relaxed { width } => ((v - threshold) / width + 0.5).clamp(0.0, 1.0),
        }
    }
}

#[inline]
pub fn fires(v: f64, threshold: f64) -> bool {
    v - threshold >= 0.0
}

#[inline]
pub fn cp_gate(diff: f64) -> bool {
    diff > 0.0
}

fn check_binary(o: &[f64], what: &str) -> Result<()> {
    match o.iter().position(|&s| s != 0.0 && s != 1.0) {
        Some(i) => Err(Error::invalid(format!(
            "{what}[{i}] = {} is not a binary spike",
            o[i]
        ))),
        None => Ok(()),
    }
}

fn check_len(n: usize, slices: &[(&str, usize)]) -> Result<()> {
    for (name, len) in slices {
        if *len != n {
            return Err(Error::shape(format!("{name} has {len} elements, expected {n}")));
        }
    }
    Ok(())
}

/// Scalar LIF update for one element.
#[inline]
pub(crate) fn lif_potential(decay: f64, v_th: f64, u_prev: f64, o_prev: f64, x: f64, mode: ResetMode) -> f64 {
    match mode {
        ResetMode::Hard => decay * u_prev * (1.0 - o_prev) + x,
        ResetMode::Soft => decay * u_prev - v_th * o_prev + x,
    }
}

/// Iterative LIF step with hard or soft reset.
pub fn lif_step(
    params: &NeuronParams,
    u_prev: &[f64],
    o_prev: &[f64],
    x: &[f64],
    mode: ResetMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(u_prev.len(), &[("o_prev", o_prev.len()), ("x", x.len())])?;
    check_binary(o_prev, "o_prev")?;
    let decay = params.lif_decay();
    let u: Vec<f64> = u_prev
        .iter()
        .zip(o_prev)
        .zip(x)
        .map(|((&u, &o), &x)| lif_potential(decay, params.v_th, u, o, x, mode))
        .collect();
    let o = u.iter().map(|&u| SpikeFn::Step.eval(u, params.v_th)).collect();
    Ok((u, o))
}

/// Coefficients of one dendrite-soma branch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BranchCoeffs {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    /// `mu` for the enhanced branch, `phi` for the weakened one, 0 when the
    /// change-perceptive increment is disabled.
    pub scale: f64,
    pub threshold: f64,
    pub branch: Branch,
}

impl BranchCoeffs {
    pub fn new(p: &NeuronParams, branch: Branch, perceptive: bool) -> Self {
        let (scale, threshold) = match branch {
            Branch::Enhanced => (p.mu, p.v_th),
            Branch::Weakened => (p.phi, p.u_th),
        };
        BranchCoeffs {
            alpha1: p.alpha1,
            alpha2: p.alpha2,
            beta1: p.beta1,
            beta2: p.beta2,
            rho: p.rho,
            scale: if perceptive { scale } else { 0.0 },
            threshold,
            branch,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct BranchOut {
    pub u: f64,
    pub gate: bool,
    pub inc: f64,
    pub v: f64,
    pub o: f64,
}

/// Gate of a branch given its own dendrite before and after the step.
#[inline]
pub(crate) fn branch_gate(branch: Branch, u_prev: f64, u_new: f64) -> bool {
    match branch {
        Branch::Enhanced => cp_gate(u_new - u_prev),
        Branch::Weakened => cp_gate(u_prev - u_new),
    }
}

/// One element, one branch, one step. `frozen_gate` overrides the gate that
/// would be derived from the dendritic change.
#[inline]
pub(crate) fn branch_step(
    c: &BranchCoeffs,
    x: f64,
    u_prev: f64,
    v_prev: f64,
    o_prev: f64,
    spike: SpikeFn,
    frozen_gate: Option<bool>,
) -> BranchOut {
    let u = c.alpha1 * x + c.beta1 * u_prev - c.rho * o_prev;
    let gate = frozen_gate.unwrap_or_else(|| branch_gate(c.branch, u_prev, u));
    let inc = if gate { c.scale * u } else { 0.0 };
    let v = c.alpha2 * u + c.beta2 * v_prev - c.rho * o_prev + inc;
    let o = spike.eval(v, c.threshold);
    BranchOut { u, gate, inc, v, o }
}

/// Dendrite-soma-axon step without change perception.
pub fn dsa_step(
    params: &NeuronParams,
    u: &[f64],
    v: &[f64],
    o: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = u.len();
    check_len(n, &[("v", v.len()), ("o", o.len()), ("x", x.len())])?;
    check_binary(o, "o")?;
    let (a1, a2, b1, b2, rho) = (params.alpha1, params.alpha2, params.beta1, params.beta2, params.rho);
    let mut un = Vec::with_capacity(n);
    let mut vn = Vec::with_capacity(n);
    let mut on = Vec::with_capacity(n);
    for i in 0..n {
        let ui = a1 * x[i] + b1 * u[i] - rho * o[i];
        let vi = a2 * ui + b2 * v[i] - rho * o[i];
        un.push(ui);
        vn.push(vi);
        on.push(SpikeFn::Step.eval(vi, params.v_th));
    }
    Ok((un, vn, on))
}

/// Somatic potential of a DSA step written as somatic memory + dendritic
/// memory + input scaling − adaptive reset. The reset term carries the
/// spike of the previous step through both the dendrite and the soma, so its
/// coefficient is `(1 + alpha2) * rho`.
pub fn dsa_soma_expansion(params: &NeuronParams, u_prev: f64, v_prev: f64, o_prev: f64, x: f64) -> f64 {
    let somatic = params.beta2 * v_prev;
    let dendritic = params.alpha2 * params.beta1 * u_prev;
    let scaling = params.alpha1 * params.alpha2 * x;
    let reset = (1.0 + params.alpha2) * params.rho * o_prev;
    somatic + dendritic + scaling - reset
}

/// Change-perceptive increment of one branch: `mu * [u_new > u_prev] * u_new`
/// (enhanced) or `phi * [u_prev > u_new] * u_new` (weakened).
pub fn cp_increments(params: &NeuronParams, u_new: &[f64], u_prev: &[f64], branch: Branch) -> Result<Vec<f64>> {
    check_len(u_new.len(), &[("u_prev", u_prev.len())])?;
    let scale = match branch {
        Branch::Enhanced => params.mu,
        Branch::Weakened => params.phi,
    };
    Ok(u_new
        .iter()
        .zip(u_prev)
        .map(|(&un, &up)| if branch_gate(branch, up, un) { scale * un } else { 0.0 })
        .collect())
}

/// State of a layer of CP-DSA neurons between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub o: Vec<f64>,
    pub u_w: Vec<f64>,
    pub v_w: Vec<f64>,
    pub o_w: Vec<f64>,
    /// Dendrites one step further back; kept for inspection, the gates of the
    /// next step compare against `u` and `u_w`.
    pub u_prev: Vec<f64>,
    pub u_w_prev: Vec<f64>,
}

impl NeuronState {
    pub fn resting(n: usize) -> Self {
        let z = vec![0.0; n];
        NeuronState {
            u: z.clone(),
            v: z.clone(),
            o: z.clone(),
            u_w: z.clone(),
            v_w: z.clone(),
            o_w: z.clone(),
            u_prev: z.clone(),
            u_w_prev: z,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Gate masks and surrogate arguments of one CP-DSA step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGates {
    pub gate_up: Vec<bool>,
    pub gate_down: Vec<bool>,
    /// `v - v_th` per neuron.
    pub soma_arg: Vec<f64>,
    /// `v_w - u_th` per neuron.
    pub soma_w_arg: Vec<f64>,
}

/// Output of [`cpdsa_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct CpDsaStep {
    pub state: NeuronState,
    /// Summed spikes `o + o_w`, each in {0, 1, 2}.
    pub spikes: Vec<f64>,
    pub gates: StepGates,
    pub enhancement: Vec<f64>,
    pub weakening: Vec<f64>,
}

/// One step of the dual-branch CP-DSA neuron. Both branches receive `x`.
pub fn cpdsa_step(params: &NeuronParams, state: &NeuronState, x: &[f64]) -> Result<CpDsaStep> {
    let n = state.len();
    check_len(
        n,
        &[
            ("v", state.v.len()),
            ("o", state.o.len()),
            ("u_w", state.u_w.len()),
            ("v_w", state.v_w.len()),
            ("o_w", state.o_w.len()),
            ("x", x.len()),
        ],
    )?;
    check_binary(&state.o, "o")?;
    check_binary(&state.o_w, "o_w")?;
    let enh = BranchCoeffs::new(params, Branch::Enhanced, true);
    let wk = BranchCoeffs::new(params, Branch::Weakened, true);

    let mut next = NeuronState::resting(n);
    let mut spikes = vec![0.0; n];
    let mut gates = StepGates {
        gate_up: vec![false; n],
        gate_down: vec![false; n],
        soma_arg: vec![0.0; n],
        soma_w_arg: vec![0.0; n],
    };
    let mut enhancement = vec![0.0; n];
    let mut weakening = vec![0.0; n];
    for i in 0..n {
        let e = branch_step(&enh, x[i], state.u[i], state.v[i], state.o[i], SpikeFn::Step, None);
        let w = branch_step(&wk, x[i], state.u_w[i], state.v_w[i], state.o_w[i], SpikeFn::Step, None);
        next.u[i] = e.u;
        next.v[i] = e.v;
        next.o[i] = e.o;
        next.u_w[i] = w.u;
        next.v_w[i] = w.v;
        next.o_w[i] = w.o;
        next.u_prev[i] = state.u[i];
        next.u_w_prev[i] = state.u_w[i];
        spikes[i] = e.o + w.o;
        gates.gate_up[i] = e.gate;
        gates.gate_down[i] = w.gate;
        gates.soma_arg[i] = e.v - params.v_th;
        gates.soma_w_arg[i] = w.v - params.u_th;
        enhancement[i] = e.inc;
        weakening[i] = w.inc;
    }
    Ok(CpDsaStep {
        state: next,
        spikes,
        gates,
        enhancement,
        weakening,
    })
}
