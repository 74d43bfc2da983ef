use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backprop::{
    self, BranchFlags, GateMasks, GradSet, LayerTape, NeuronAdjoint, NeuronRecord, NeuronTape,
    TdBnTape,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::neurons::{self, Branch, BranchCoeffs, NeuronParams, ResetMode, SpikeFn};
use crate::tensor::{self, Conv2dGeometry, Tensor};

use super::params::{ParamId, ParamStore};

/// Neurons processed per work chunk.
const NEURON_CHUNK: usize = 1024;

/// Dynamics of a neuron layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronKind {
    Lif(ResetMode),
    /// Dendrite-soma-axon neuron. `enhance` turns on the enhancement
    /// increment; `weaken` adds the weakened branch with its increment.
    /// Both off is the plain DSA neuron.
    Dsa { enhance: bool, weaken: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronLayer {
    pub name: String,
    pub kind: NeuronKind,
    /// Learnable scalar block; `None` for LIF layers.
    pub scalars: Option<ParamId>,
    /// Thresholds and `tau`; the learnable fields are read from `scalars`.
    pub fixed: NeuronParams,
    pub surrogate_width: f64,
}

impl NeuronLayer {
    pub fn params(&self, store: &ParamStore) -> NeuronParams {
        match self.scalars {
            Some(id) => self.fixed.with_scalars(store.values(id)),
            None => self.fixed,
        }
    }

    pub fn flags(&self) -> BranchFlags {
        match self.kind {
            NeuronKind::Lif(_) => BranchFlags { enhance: false, weaken: false },
            NeuronKind::Dsa { enhance, weaken } => BranchFlags { enhance, weaken },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdBn {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub alpha_bn: f64,
    pub v_th: f64,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl TdBn {
    /// Fresh layer with unit running variance, `eps = 1e-8` and momentum 0.1.
    pub fn new(gamma: ParamId, beta: ParamId, channels: usize, alpha_bn: f64) -> Self {
        TdBn {
            gamma,
            beta,
            channels,
            alpha_bn,
            v_th: neurons::V_TH,
            eps: 1e-8,
            momentum: 0.1,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weight: ParamId, inputs: usize, units: usize },
    Conv { weight: ParamId, geometry: Conv2dGeometry },
    AvgPool { size: usize },
    Dropout { rate: f64 },
    TdBn(TdBn),
    Neuron(NeuronLayer),
    /// Spike-element-wise residual block: `branch(x) + skip(x)`, where an
    /// empty `skip` is the identity.
    Residual { branch: Vec<Layer>, skip: Vec<Layer> },
    /// Non-spiking dense readout with bias over the flattened features,
    /// producing per-step logits.
    Head { weight: ParamId, bias: ParamId, features: usize, classes: usize },
}

/// Per-call forward settings.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Normalise with batch statistics (training) rather than running ones.
    pub batch_stats: bool,
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Replace the spike step by its piecewise-linear relaxation.
    pub relaxed: bool,
    /// Use these gate masks instead of deriving gates from the dendrites.
    pub frozen_gates: Option<GateMasks>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout_seed: u64) -> Self {
        ForwardOptions {
            batch_stats: true,
            dropout_seed: Some(dropout_seed),
            ..Self::default()
        }
    }

    /// Relaxed, dropout-free forward with batch statistics, as used by the
    /// gradient checker.
    pub fn relaxed(frozen_gates: Option<GateMasks>) -> Self {
        ForwardOptions {
            batch_stats: true,
            dropout_seed: None,
            relaxed: true,
            frozen_gates,
        }
    }
}

pub(crate) struct ForwardCtx<'a> {
    pub time_steps: usize,
    pub batch: usize,
    pub opts: &'a ForwardOptions,
    pub rng: Option<ChaCha8Rng>,
    pub neuron_index: usize,
}

fn rows_of(x: &Tensor) -> usize {
    x.time_steps() * x.batch()
}

impl Layer {
    pub(crate) fn forward(&self, store: &ParamStore, x: Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, LayerTape)> {
        let (t, b) = (ctx.time_steps, ctx.batch);
        match self {
            Layer::Dense { weight, inputs, units } => {
                let rows = rows_of(&x);
                if x.feature_len() != *inputs {
                    return Err(Error::shape(format!(
                        "dense layer expects {inputs} features, got {:?}",
                        x.shape()
                    )));
                }
                let y = tensor::gemm_nt(x.data(), rows, *inputs, store.values(*weight), *units);
                let out = Tensor::from_vec(&[t, b, *units], y)?;
                Ok((out, LayerTape::Dense { input: x }))
            }
            Layer::Conv { weight, geometry } => {
                let g = geometry;
                let expect = [t, b, g.in_channels, g.height, g.width];
                if x.shape() != expect {
                    return Err(Error::shape(format!(
                        "conv layer expects {:?}, got {:?}",
                        expect,
                        x.shape()
                    )));
                }
                let y = tensor::conv2d_forward(g, x.data(), t * b, store.values(*weight));
                let out = Tensor::from_vec(&[t, b, g.out_channels, g.out_height(), g.out_width()], y)?;
                Ok((out, LayerTape::Conv { input: x }))
            }
            Layer::AvgPool { size } => {
                let out = avg_pool(&x, *size)?;
                Ok((out, LayerTape::AvgPool { input_shape: x.shape().to_vec() }))
            }
            Layer::Dropout { rate } => match (&mut ctx.rng, *rate > 0.0) {
                (Some(rng), true) => {
                    let per_step = x.step_len();
                    let keep = 1.0 - rate;
                    // one mask per sample and feature, shared by every step
                    let mask: Vec<f64> = (0..per_step)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut y = x;
                    for step in y.data_mut().chunks_mut(per_step) {
                        for (v, m) in step.iter_mut().zip(&mask) {
                            *v *= m;
                        }
                    }
                    Ok((y, LayerTape::Dropout { mask: Some(mask) }))
                }
                _ => Ok((x, LayerTape::Dropout { mask: None })),
            },
            Layer::TdBn(bn) => {
                let (y, tape) = tdbn_forward(bn, store, &x, ctx.opts.batch_stats)?;
                Ok((y, LayerTape::TdBn(tape)))
            }
            Layer::Neuron(n) => {
                let frozen = match &ctx.opts.frozen_gates {
                    Some(g) => {
                        let mask = g.layers.get(ctx.neuron_index).ok_or_else(|| {
                            Error::shape(format!("no frozen gates for neuron layer {}", n.name))
                        })?;
                        if mask.len() != x.len() {
                            return Err(Error::shape(format!(
                                "frozen gates for {} hold {} entries, layer input has {}",
                                n.name,
                                mask.len(),
                                x.len()
                            )));
                        }
                        Some(mask.as_slice())
                    }
                    None => None,
                };
                ctx.neuron_index += 1;
                let spike = if ctx.opts.relaxed {
                    SpikeFn::Relaxed { width: n.surrogate_width }
                } else {
                    SpikeFn::Step
                };
                let (y, tape) = neuron_forward(n, store, &x, spike, frozen)?;
                Ok((y, LayerTape::Neuron(tape)))
            }
            Layer::Residual { branch, skip } => {
                let mut bt = Vec::with_capacity(branch.len());
                let mut h = x.clone();
                for l in branch {
                    let (y, tp) = l.forward(store, h, ctx)?;
                    bt.push(tp);
                    h = y;
                }
                let mut st = Vec::with_capacity(skip.len());
                let mut s = x;
                for l in skip {
                    let (y, tp) = l.forward(store, s, ctx)?;
                    st.push(tp);
                    s = y;
                }
                h.add_assign(&s).map_err(|_| {
                    Error::shape(format!(
                        "residual branch output {:?} does not match skip output {:?}",
                        h.shape(),
                        s.shape()
                    ))
                })?;
                Ok((h, LayerTape::Residual { branch: bt, skip: st }))
            }
            Layer::Head { weight, bias, features, classes } => {
                let rows = rows_of(&x);
                if x.feature_len() != *features {
                    return Err(Error::shape(format!(
                        "classifier head expects {features} features per sample, got {:?}",
                        x.shape()
                    )));
                }
                let mut y = tensor::gemm_nt(x.data(), rows, *features, store.values(*weight), *classes);
                let bias = store.values(*bias);
                for row in y.chunks_mut(*classes) {
                    for (v, b) in row.iter_mut().zip(bias) {
                        *v += b;
                    }
                }
                let out = Tensor::from_vec(&[t, b, *classes], y)?;
                Ok((out, LayerTape::Head { input: x }))
            }
        }
    }

    pub(crate) fn backward(&self, store: &ParamStore, tape: &LayerTape, grad: Tensor, grads: &mut GradSet) -> Result<Tensor> {
        match (self, tape) {
            (Layer::Dense { weight, inputs, units }, LayerTape::Dense { input }) => {
                let rows = rows_of(input);
                let dw = backprop::backward_weights(input.data(), grad.data(), rows, *inputs, *units)?;
                let dx = backprop::spike_grad(grad.data(), rows, store.values(*weight), *units, *inputs)?;
                grads.write(*weight, dw);
                Tensor::from_vec(input.shape(), dx)
            }
            (Layer::Conv { weight, geometry }, LayerTape::Conv { input }) => {
                let images = rows_of(input);
                let dk = tensor::conv2d_grad_kernel(geometry, input.data(), grad.data(), images);
                let dx = tensor::conv2d_grad_input(geometry, grad.data(), images, store.values(*weight));
                grads.write(*weight, dk);
                Tensor::from_vec(input.shape(), dx)
            }
            (Layer::AvgPool { size }, LayerTape::AvgPool { input_shape }) => avg_pool_backward(&grad, input_shape, *size),
            (Layer::Dropout { .. }, LayerTape::Dropout { mask }) => {
                let mut g = grad;
                if let Some(mask) = mask {
                    let per_step = g.step_len();
                    for step in g.data_mut().chunks_mut(per_step) {
                        for (v, m) in step.iter_mut().zip(mask) {
                            *v *= m;
                        }
                    }
                }
                Ok(g)
            }
            (Layer::TdBn(bn), LayerTape::TdBn(tp)) => tdbn_backward(bn, store, tp, grad, grads),
            (Layer::Neuron(n), LayerTape::Neuron(tp)) => neuron_backward(n, store, tp, grad, grads),
            (Layer::Residual { branch, skip }, LayerTape::Residual { branch: bt, skip: st }) => {
                let mut gb = grad.clone();
                for (l, tp) in branch.iter().zip(bt).rev() {
                    gb = l.backward(store, tp, gb, grads)?;
                }
                let mut gs = grad;
                for (l, tp) in skip.iter().zip(st).rev() {
                    gs = l.backward(store, tp, gs, grads)?;
                }
                gb.add_assign(&gs)?;
                Ok(gb)
            }
            (Layer::Head { weight, bias, features, classes }, LayerTape::Head { input }) => {
                let rows = rows_of(input);
                let dw = backprop::backward_weights(input.data(), grad.data(), rows, *features, *classes)?;
                let mut db = vec![0.0; *classes];
                for row in grad.data().chunks(*classes) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                let dx = backprop::spike_grad(grad.data(), rows, store.values(*weight), *classes, *features)?;
                grads.write(*weight, dw);
                grads.write(*bias, db);
                Tensor::from_vec(input.shape(), dx)
            }
            _ => Err(Error::shape("tape does not match layer topology")),
        }
    }
}

fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 || k == 0 || !s[3].is_multiple_of(k) || !s[4].is_multiple_of(k) {
        return Err(Error::shape(format!(
            "average pool of size {k} needs [T, B, C, H, W] with H and W divisible by {k}, got {:?}",
            s
        )));
    }
    let (h, w) = (s[3], s[4]);
    let (oh, ow) = (h / k, w / k);
    let planes = s[0] * s[1] * s[2];
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / k) * ow + xx / k] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_vec(&[s[0], s[1], s[2], oh, ow], out)
}

fn avg_pool_backward(grad: &Tensor, input_shape: &[usize], k: usize) -> Result<Tensor> {
    let (h, w) = (input_shape[3], input_shape[4]);
    let (oh, ow) = (h / k, w / k);
    let planes = input_shape[0] * input_shape[1] * input_shape[2];
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                d[y * w + xx] = g[(y / k) * ow + xx / k] * inv;
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

/// Splits a `[T, B, C, ...]` (or `[T, B, F]`) tensor into the number of
/// rows `T * B`, channels and elements per channel per row.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let rows = shape[0] * shape[1];
    let channels = shape[2];
    let inner: usize = shape[3..].iter().product();
    (rows, channels, inner)
}

/// Threshold-dependent batch normalisation. Statistics pool over time,
/// batch and spatial positions; the output scale is `alpha_bn * v_th * gamma`.
pub fn tdbn_forward(bn: &TdBn, store: &ParamStore, x: &Tensor, batch_stats: bool) -> Result<(Tensor, TdBnTape)> {
    if x.rank() < 3 || x.shape()[2] != bn.channels {
        return Err(Error::shape(format!(
            "tdBN over {} channels got input {:?}",
            bn.channels,
            x.shape()
        )));
    }
    let (rows, c, inner) = channel_layout(x.shape());
    let population = rows * inner;
    let (mean, var) = if batch_stats {
        if rows < 2 {
            return Err(Error::invalid(format!(
                "tdBN in training mode needs time*batch >= 2 per channel, got {rows}"
            )));
        }
        channel_stats(x.data(), rows, c, inner)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let gamma = store.values(bn.gamma);
    let beta = store.values(bn.beta);
    let k = bn.alpha_bn * bn.v_th;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        for ch in 0..c {
            let base = (r * c + ch) * inner;
            for i in base..base + inner {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = k * xh * gamma[ch] + beta[ch];
            }
        }
    }
    let tape = TdBnTape {
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        population,
        batch_stats,
    };
    Ok((Tensor::from_vec(x.shape(), y)?, tape))
}

/// Per-channel mean and biased variance, two-pass.
fn channel_stats(x: &[f64], rows: usize, c: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows * inner) as f64;
    let mut mean = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            let base = (r * c + ch) * inner;
            mean[ch] += x[base..base + inner].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            let base = (r * c + ch) * inner;
            var[ch] += x[base..base + inner]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

fn tdbn_backward(bn: &TdBn, store: &ParamStore, tp: &TdBnTape, grad: Tensor, grads: &mut GradSet) -> Result<Tensor> {
    let (rows, c, inner) = channel_layout(grad.shape());
    let gamma = store.values(bn.gamma);
    let k = bn.alpha_bn * bn.v_th;
    let g = grad.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            let base = (r * c + ch) * inner;
            for i in base..base + inner {
                dbeta[ch] += g[i];
                dgamma[ch] += g[i] * k * tp.xhat[i];
                let dxh = g[i] * k * gamma[ch];
                sum_dxhat[ch] += dxh;
                sum_dxhat_xhat[ch] += dxh * tp.xhat[i];
            }
        }
    }
    let n = tp.population as f64;
    let mut dx = vec![0.0; g.len()];
    for r in 0..rows {
        for ch in 0..c {
            let base = (r * c + ch) * inner;
            for i in base..base + inner {
                let dxh = g[i] * k * gamma[ch];
                dx[i] = if tp.batch_stats {
                    tp.inv_std[ch] / n * (n * dxh - sum_dxhat[ch] - tp.xhat[i] * sum_dxhat_xhat[ch])
                } else {
                    dxh * tp.inv_std[ch]
                };
            }
        }
    }
    grads.write(bn.gamma, dgamma);
    grads.write(bn.beta, dbeta);
    Tensor::from_vec(grad.shape(), dx)
}

fn neuron_forward(
    n: &NeuronLayer,
    store: &ParamStore,
    x: &Tensor,
    spike: SpikeFn,
    frozen: Option<&[(bool, bool)]>,
) -> Result<(Tensor, NeuronTape)> {
    let t_steps = x.time_steps();
    let m = x.step_len();
    let p = n.params(store);
    let mut records = vec![NeuronRecord::default(); t_steps * m];
    let rest = vec![NeuronRecord::default(); m];
    for t in 0..t_steps {
        let (before, current) = records.split_at_mut(t * m);
        let prev: &[NeuronRecord] = if t == 0 { &rest } else { &before[(t - 1) * m..] };
        let cur = &mut current[..m];
        let xs = x.step(t);
        let fz = frozen.map(|f| &f[t * m..(t + 1) * m]);
        match n.kind {
            NeuronKind::Lif(mode) => {
                let decay = p.lif_decay();
                exec::for_each_chunk_mut(cur, NEURON_CHUNK, |off, chunk| {
                    for (k, r) in chunk.iter_mut().enumerate() {
                        let i = off + k;
                        let pr = &prev[i];
                        let u = neurons::lif_potential(decay, p.v_th, pr.u, pr.o, xs[i], mode);
                        *r = NeuronRecord {
                            x: xs[i],
                            u,
                            o: spike.eval(u, p.v_th),
                            ..NeuronRecord::default()
                        };
                    }
                });
            }
            NeuronKind::Dsa { enhance, weaken } => {
                let enh = BranchCoeffs::new(&p, Branch::Enhanced, enhance);
                let wk = BranchCoeffs::new(&p, Branch::Weakened, true);
                exec::for_each_chunk_mut(cur, NEURON_CHUNK, |off, chunk| {
                    for (k, r) in chunk.iter_mut().enumerate() {
                        let i = off + k;
                        let pr = &prev[i];
                        let (fu, fd) = match fz {
                            Some(f) => (Some(f[i].0), Some(f[i].1)),
                            None => (None, None),
                        };
                        let e = neurons::branch_step(&enh, xs[i], pr.u, pr.v, pr.o, spike, fu);
                        let mut rec = NeuronRecord {
                            x: xs[i],
                            u: e.u,
                            v: e.v,
                            o: e.o,
                            e: e.inc,
                            gate_up: e.gate,
                            ..NeuronRecord::default()
                        };
                        if weaken {
                            let w = neurons::branch_step(&wk, xs[i], pr.u_w, pr.v_w, pr.o_w, spike, fd);
                            rec.u_w = w.u;
                            rec.v_w = w.v;
                            rec.o_w = w.o;
                            rec.w = w.inc;
                            rec.gate_down = w.gate;
                        }
                        *r = rec;
                    }
                });
            }
        }
    }
    let y: Vec<f64> = records.iter().map(NeuronRecord::spike).collect();
    let tape = NeuronTape {
        records,
        per_step: m,
        lif: matches!(n.kind, NeuronKind::Lif(_)),
        v_th: p.v_th,
        u_th: p.u_th,
    };
    Ok((Tensor::from_vec(x.shape(), y)?, tape))
}

fn neuron_backward(n: &NeuronLayer, store: &ParamStore, tp: &NeuronTape, grad: Tensor, grads: &mut GradSet) -> Result<Tensor> {
    let m = tp.per_step;
    let t_steps = tp.time_steps();
    if grad.len() != tp.records.len() {
        return Err(Error::shape(format!(
            "neuron layer {}: gradient has {} entries, tape {}",
            n.name,
            grad.len(),
            tp.records.len()
        )));
    }
    let p = n.params(store);
    let flags = n.flags();
    let width = n.surrogate_width;
    let rest = vec![NeuronRecord::default(); m];
    let mut adj = vec![NeuronAdjoint::default(); m];
    let mut dx = vec![0.0; t_steps * m];
    let mut scalar_grads = [0.0; 7];
    for t in (0..t_steps).rev() {
        let rec = tp.step(t);
        let prev = if t == 0 { &rest[..] } else { tp.step(t - 1) };
        let gs = grad.step(t);
        let partials = exec::map_chunks_mut(&mut adj, NEURON_CHUNK, |off, chunk| {
            let mut acc = [0.0; 7];
            for (k, a) in chunk.iter_mut().enumerate() {
                let i = off + k;
                *a = match n.kind {
                    NeuronKind::Lif(mode) => backprop::backward_lif_step(&p, mode, width, a, gs[i], &rec[i]),
                    NeuronKind::Dsa { .. } => {
                        backprop::backward_neuron_step(&p, flags, width, a, gs[i], &rec[i], &prev[i], &mut acc)
                    }
                };
            }
            acc
        });
        for part in partials {
            for (g, v) in scalar_grads.iter_mut().zip(part) {
                *g += v;
            }
        }
        let dxs = &mut dx[t * m..(t + 1) * m];
        for (d, a) in dxs.iter_mut().zip(&adj) {
            *d = a.x;
        }
        if let Some(i) = dxs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("neuron layer {} step {}", n.name, t + 1),
                detail: format!("input adjoint {} at neuron {i}", dxs[i]),
            });
        }
    }
    if let Some(id) = n.scalars {
        grads.write(id, scalar_grads.to_vec());
    }
    Tensor::from_vec(grad.shape(), dx)
}
