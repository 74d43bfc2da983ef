//! Time-unrolled spiking networks: layer specs, model construction, forward
//! and reverse passes, readout loss and model files.

mod layers;
mod params;
mod presets;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backprop::{GradSet, LayerTape, Tape};
use crate::error::{Error, Result};
use crate::neurons::{self, NeuronParams, ResetMode};
use crate::tensor::{Conv2dGeometry, Tensor};

pub use layers::{tdbn_forward, ForwardOptions, Layer, NeuronKind, NeuronLayer, TdBn};
pub use params::{ParamBlock, ParamId, ParamRole, ParamStore};
pub use presets::{preset, PRESET_NAMES};

use layers::ForwardCtx;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronVariant {
    LifHard,
    LifSoft,
    Dsa,
    Cpdsa,
}

fn default_true() -> bool {
    true
}

fn default_tau() -> f64 {
    2.0
}

fn default_stride() -> usize {
    1
}

fn default_alpha_bn() -> f64 {
    1.0
}

fn default_width() -> f64 {
    crate::backprop::DEFAULT_SURROGATE_WIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronSpec {
    pub variant: NeuronVariant,
    /// Enhancement increment (`cpdsa` only).
    #[serde(default = "default_true")]
    pub enhance: bool,
    /// Weakened branch with its increment (`cpdsa` only).
    #[serde(default = "default_true")]
    pub weaken: bool,
    /// LIF time constant.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl NeuronSpec {
    pub fn cpdsa() -> Self {
        NeuronSpec::of(NeuronVariant::Cpdsa)
    }

    pub fn of(variant: NeuronVariant) -> Self {
        NeuronSpec {
            variant,
            enhance: true,
            weaken: true,
            tau: default_tau(),
        }
    }

    pub fn kind(&self) -> NeuronKind {
        match self.variant {
            NeuronVariant::LifHard => NeuronKind::Lif(ResetMode::Hard),
            NeuronVariant::LifSoft => NeuronKind::Lif(ResetMode::Soft),
            NeuronVariant::Dsa => NeuronKind::Dsa { enhance: false, weaken: false },
            NeuronVariant::Cpdsa => NeuronKind::Dsa {
                enhance: self.enhance,
                weaken: self.weaken,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv3x3 {
        channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        size: usize,
    },
    Dropout {
        rate: f64,
    },
    Tdbn {
        #[serde(default = "default_alpha_bn")]
        alpha_bn: f64,
    },
    Neuron(NeuronSpec),
    ResidualBlock {
        channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        neuron: NeuronSpec,
    },
    ClassifierHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub time_steps: usize,
    /// Per-sample shape: `[F]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub surrogate_width: f64,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Rewrites every DSA-family neuron as CP-DSA with the given flags.
    pub fn with_ablation(mut self, enhance: bool, weaken: bool) -> Self {
        fn rewrite(n: &mut NeuronSpec, enhance: bool, weaken: bool) {
            if matches!(n.variant, NeuronVariant::Dsa | NeuronVariant::Cpdsa) {
                n.variant = NeuronVariant::Cpdsa;
                n.enhance = enhance;
                n.weaken = weaken;
            }
        }
        for l in &mut self.layers {
            match l {
                LayerSpec::Neuron(n) | LayerSpec::ResidualBlock { neuron: n, .. } => rewrite(n, enhance, weaken),
                _ => {}
            }
        }
        self
    }

    /// Sets the rate of every dropout layer.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Dropout { rate: r } = l {
                *r = rate;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        Builder::new(self, &mut ParamStore::new()).map(|_| ())
    }
}

/// Activation geometry per sample while the model is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Geo {
    Flat(usize),
    Map { c: usize, h: usize, w: usize },
}

impl Geo {
    fn len(self) -> usize {
        match self {
            Geo::Flat(f) => f,
            Geo::Map { c, h, w } => c * h * w,
        }
    }

    fn channels(self) -> usize {
        match self {
            Geo::Flat(f) => f,
            Geo::Map { c, .. } => c,
        }
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    width: f64,
    layers: Vec<Layer>,
}

impl<'a> Builder<'a> {
    fn new(config: &ModelConfig, store: &'a mut ParamStore) -> Result<Vec<Layer>> {
        if config.time_steps == 0 {
            return Err(Error::config("time_steps must be at least 1"));
        }
        if config.classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        if !(config.surrogate_width > 0.0 && config.surrogate_width.is_finite()) {
            return Err(Error::config("surrogate_width must be positive"));
        }
        let mut geo = match config.input_shape.as_slice() {
            [f] if *f > 0 => Geo::Flat(*f),
            [c, h, w] if c * h * w > 0 => Geo::Map { c: *c, h: *h, w: *w },
            s => {
                return Err(Error::config(format!(
                    "input_shape must be [features] or [channels, height, width], got {s:?}"
                )))
            }
        };
        match config.layers.last() {
            Some(LayerSpec::ClassifierHead) => {}
            _ => return Err(Error::config("the last layer must be classifier-head")),
        }
        let mut b = Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            width: config.surrogate_width,
            layers: Vec::new(),
        };
        // whether the next neuron layer is fed by a synaptic layer
        let mut fed = false;
        for (i, spec) in config.layers.iter().enumerate() {
            let name = format!("l{i}");
            let ctx = |e: Error| Error::config(format!("layer {i} ({}): {e}", spec_name(spec)));
            match spec {
                LayerSpec::Dense { units } => {
                    let layer = b.dense(&name, geo, *units).map_err(ctx)?;
                    b.layers.push(layer);
                    geo = Geo::Flat(*units);
                    fed = true;
                }
                LayerSpec::Conv3x3 { channels, stride } => {
                    let (layer, g) = b.conv(&name, geo, *channels, 3, *stride).map_err(ctx)?;
                    b.layers.push(layer);
                    geo = g;
                    fed = true;
                }
                LayerSpec::AvgPool { size } => {
                    geo = match geo {
                        Geo::Map { c, h, w } if *size > 0 && h % size == 0 && w % size == 0 => Geo::Map {
                            c,
                            h: h / size,
                            w: w / size,
                        },
                        _ => return Err(ctx(Error::shape(format!("cannot pool {geo:?} by {size}")))),
                    };
                    b.layers.push(Layer::AvgPool { size: *size });
                    fed = false;
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(ctx(Error::invalid(format!("dropout rate {rate} outside [0, 1)"))));
                    }
                    b.layers.push(Layer::Dropout { rate: *rate });
                    fed = false;
                }
                LayerSpec::Tdbn { alpha_bn } => {
                    let layer = b.tdbn(&name, geo, *alpha_bn);
                    b.layers.push(layer);
                }
                LayerSpec::Neuron(n) => {
                    if !fed {
                        return Err(ctx(Error::config(
                            "a neuron layer must follow a dense or conv3x3 layer",
                        )));
                    }
                    let layer = b.neuron(&name, n).map_err(ctx)?;
                    b.layers.push(layer);
                    fed = false;
                }
                LayerSpec::ResidualBlock { channels, stride, neuron } => {
                    let (layer, g) = b.residual(&name, geo, *channels, *stride, neuron).map_err(ctx)?;
                    b.layers.push(layer);
                    geo = g;
                    fed = false;
                }
                LayerSpec::ClassifierHead => {
                    if i + 1 != config.layers.len() {
                        return Err(ctx(Error::config("classifier-head must be the last layer")));
                    }
                    let features = geo.len();
                    let std = (1.0 / features as f64).sqrt();
                    let w = b.normal(config.classes * features, std);
                    let weight = b.store.add(
                        format!("{name}.head.weight"),
                        ParamRole::Weight,
                        &[config.classes, features],
                        w,
                    );
                    let bias = b.store.add(
                        format!("{name}.head.bias"),
                        ParamRole::Bias,
                        &[config.classes],
                        vec![0.0; config.classes],
                    );
                    b.layers.push(Layer::Head {
                        weight,
                        bias,
                        features,
                        classes: config.classes,
                    });
                }
            }
        }
        Ok(b.layers)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite standard deviation");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn dense(&mut self, name: &str, geo: Geo, units: usize) -> Result<Layer> {
        if units == 0 {
            return Err(Error::config("dense units must be positive"));
        }
        let inputs = geo.len();
        let w = self.normal(units * inputs, (2.0 / inputs as f64).sqrt());
        let weight = self.store.add(format!("{name}.dense.weight"), ParamRole::Weight, &[units, inputs], w);
        Ok(Layer::Dense { weight, inputs, units })
    }

    fn conv(&mut self, name: &str, geo: Geo, channels: usize, k: usize, stride: usize) -> Result<(Layer, Geo)> {
        let Geo::Map { c, h, w } = geo else {
            return Err(Error::config("convolution needs a [channels, height, width] input"));
        };
        let geometry = Conv2dGeometry {
            in_channels: c,
            out_channels: channels,
            height: h,
            width: w,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: k / 2,
        };
        geometry.validate()?;
        let fan_in = c * k * k;
        let wv = self.normal(channels * fan_in, (2.0 / fan_in as f64).sqrt());
        let weight = self.store.add(format!("{name}.conv.weight"), ParamRole::Weight, &[channels, c, k, k], wv);
        let out = Geo::Map {
            c: channels,
            h: geometry.out_height(),
            w: geometry.out_width(),
        };
        Ok((Layer::Conv { weight, geometry }, out))
    }

    fn tdbn(&mut self, name: &str, geo: Geo, alpha_bn: f64) -> Layer {
        let c = geo.channels();
        let gamma = self.store.add(format!("{name}.tdbn.gamma"), ParamRole::BnScale, &[c], vec![1.0; c]);
        let beta = self.store.add(format!("{name}.tdbn.beta"), ParamRole::BnShift, &[c], vec![0.0; c]);
        Layer::TdBn(TdBn::new(gamma, beta, c, alpha_bn))
    }

    fn neuron(&mut self, name: &str, spec: &NeuronSpec) -> Result<Layer> {
        let fixed = NeuronParams {
            tau: spec.tau,
            ..NeuronParams::default()
        };
        fixed.validate()?;
        let kind = spec.kind();
        let scalars = match kind {
            NeuronKind::Lif(_) => None,
            NeuronKind::Dsa { enhance, weaken } => {
                let mut values = fixed.scalars().to_vec();
                let mut frozen = Vec::new();
                if !enhance {
                    values[neurons::MU] = 0.0;
                    frozen.push(neurons::MU);
                }
                if !weaken {
                    values[neurons::PHI] = 0.0;
                    frozen.push(neurons::PHI);
                }
                let id = self.store.add(format!("{name}.neuron.scalars"), ParamRole::NeuronScalars, &[7], values);
                self.store.block_mut(id).frozen = frozen;
                Some(id)
            }
        };
        Ok(Layer::Neuron(NeuronLayer {
            name: name.to_string(),
            kind,
            scalars,
            fixed,
            surrogate_width: self.width,
        }))
    }

    fn residual(&mut self, name: &str, geo: Geo, channels: usize, stride: usize, neuron: &NeuronSpec) -> Result<(Layer, Geo)> {
        let mut branch = Vec::new();
        let (c1, g1) = self.conv(&format!("{name}.a"), geo, channels, 3, stride)?;
        branch.push(c1);
        branch.push(self.tdbn(&format!("{name}.a"), g1, 1.0));
        branch.push(self.neuron(&format!("{name}.a"), neuron)?);
        let (c2, g2) = self.conv(&format!("{name}.b"), g1, channels, 3, 1)?;
        branch.push(c2);
        branch.push(self.tdbn(&format!("{name}.b"), g2, 1.0));
        branch.push(self.neuron(&format!("{name}.b"), neuron)?);
        let mut skip = Vec::new();
        if geo.channels() != channels || stride != 1 {
            let (cs, gs) = self.conv(&format!("{name}.skip"), geo, channels, 1, stride)?;
            skip.push(cs);
            skip.push(self.tdbn(&format!("{name}.skip"), gs, 1.0));
            skip.push(self.neuron(&format!("{name}.skip"), neuron)?);
        }
        Ok((Layer::Residual { branch, skip }, g2))
    }
}

fn spec_name(spec: &LayerSpec) -> &'static str {
    match spec {
        LayerSpec::Dense { .. } => "dense",
        LayerSpec::Conv3x3 { .. } => "conv3x3",
        LayerSpec::AvgPool { .. } => "avgpool",
        LayerSpec::Dropout { .. } => "dropout",
        LayerSpec::Tdbn { .. } => "tdbn",
        LayerSpec::Neuron(_) => "neuron",
        LayerSpec::ResidualBlock { .. } => "residual-block",
        LayerSpec::ClassifierHead => "classifier-head",
    }
}

/// A network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    params: ParamStore,
    /// `(running_mean, running_var)` of every tdBN layer in forward order.
    running_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        let mut params = ParamStore::new();
        let layers = Builder::new(&config, &mut params)?;
        Ok(Model { config, params, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Neuron layers in forward order, descending into residual blocks
    /// (branch before skip).
    pub fn neuron_layers(&self) -> Vec<&NeuronLayer> {
        fn walk<'a>(layers: &'a [Layer], out: &mut Vec<&'a NeuronLayer>) {
            for l in layers {
                match l {
                    Layer::Neuron(n) => out.push(n),
                    Layer::Residual { branch, skip } => {
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

    fn tdbn_layers_mut(&mut self) -> Vec<&mut TdBn> {
        fn walk<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut TdBn>) {
            for l in layers {
                match l {
                    Layer::TdBn(bn) => out.push(bn),
                    Layer::Residual { branch, skip } => {
                        walk(branch, out);
                        walk(skip, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&mut self.layers, &mut out);
        out
    }

    /// Runs the network on `input` of shape `[T, B, ...input_shape]` and
    /// returns per-step logits `[T, B, classes]` with the forward tape.
    pub fn forward(&self, input: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, Tape)> {
        let s = input.shape();
        if s.len() < 3 || s[0] != self.config.time_steps || s[2..] != self.config.input_shape[..] || s[1] == 0 {
            return Err(Error::shape(format!(
                "model expects input [{}, B, {:?}] with B >= 1, got {:?}",
                self.config.time_steps, self.config.input_shape, s
            )));
        }
        let mut ctx = ForwardCtx {
            time_steps: s[0],
            batch: s[1],
            opts,
            rng: opts.dropout_seed.map(ChaCha8Rng::seed_from_u64),
            neuron_index: 0,
        };
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for l in &self.layers {
            let (y, tp) = l.forward(&self.params, h, &mut ctx)?;
            tapes.push(tp);
            h = y;
        }
        if let Some(g) = &opts.frozen_gates {
            if g.layers.len() != ctx.neuron_index {
                return Err(Error::shape(format!(
                    "frozen gates cover {} neuron layers, model has {}",
                    g.layers.len(),
                    ctx.neuron_index
                )));
            }
        }
        let tape = Tape {
            time_steps: s[0],
            batch: s[1],
            layers: tapes,
        };
        Ok((h, tape))
    }

    /// Reverse pass from per-step logit gradients to every parameter block.
    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor) -> Result<GradSet> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::shape("tape does not belong to this model"));
        }
        let expect = [tape.time_steps, tape.batch, self.config.classes];
        if grad_logits.shape() != expect {
            return Err(Error::shape(format!(
                "logit gradient must be {:?}, got {:?}",
                expect,
                grad_logits.shape()
            )));
        }
        let mut grads = GradSet::zeros_for(&self.params);
        let mut g = grad_logits.clone();
        for (l, tp) in self.layers.iter().zip(&tape.layers).rev() {
            g = l.backward(&self.params, tp, g, &mut grads)?;
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a training tape into the running
    /// statistics used in evaluation mode. Variance is stored unbiased.
    pub fn update_running_stats(&mut self, tape: &Tape) -> Result<()> {
        fn collect<'a>(tapes: &'a [LayerTape], out: &mut Vec<&'a crate::backprop::TdBnTape>) {
            for t in tapes {
                match t {
                    LayerTape::TdBn(b) => out.push(b),
                    LayerTape::Residual { branch, skip } => {
                        collect(branch, out);
                        collect(skip, out);
                    }
                    _ => {}
                }
            }
        }
        let mut stats = Vec::new();
        collect(&tape.layers, &mut stats);
        let mut bns = self.tdbn_layers_mut();
        if stats.len() != bns.len() {
            return Err(Error::shape("tape does not belong to this model"));
        }
        for (bn, st) in bns.iter_mut().zip(stats) {
            if !st.batch_stats {
                continue;
            }
            let n = st.population as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..bn.channels {
                bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * st.batch_mean[c];
                bn.running_var[c] =
                    (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * st.batch_var[c] * correction;
            }
        }
        Ok(())
    }

    fn running_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        fn walk(layers: &[Layer], out: &mut Vec<(Vec<f64>, Vec<f64>)>) {
            for l in layers {
                match l {
                    Layer::TdBn(bn) => out.push((bn.running_mean.clone(), bn.running_var.clone())),
                    Layer::Residual { branch, skip } => {
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

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        self.params.hash_into(h);
        for (m, v) in self.running_stats() {
            for x in m.iter().chain(&v) {
                h.update(x.to_le_bytes());
            }
        }
    }

    /// Hex SHA-256 over every parameter and running statistic.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
            running_stats: self.running_stats(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut model = Model::new(file.config)?;
        model.params.copy_values_from(&file.params)?;
        for (b, f) in model.params.blocks_mut().iter_mut().zip(file.params.blocks()) {
            b.frozen = f.frozen.clone();
        }
        let mut bns = model.tdbn_layers_mut();
        if bns.len() != file.running_stats.len() {
            return Err(Error::config("model file running statistics do not match its layers"));
        }
        for (bn, (m, v)) in bns.iter_mut().zip(file.running_stats) {
            if m.len() != bn.channels || v.len() != bn.channels {
                return Err(Error::config("model file running statistics have the wrong width"));
            }
            bn.running_mean = m;
            bn.running_var = v;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Cross-entropy of the time-averaged logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub loss: f64,
    /// `dL/dlogits` per step, `[T, B, classes]`.
    pub grad: Tensor,
    /// Time-averaged logits, `[B, classes]`.
    pub mean_logits: Vec<f64>,
}

impl Readout {
    pub fn predictions(&self, classes: usize) -> Vec<usize> {
        self.mean_logits.chunks(classes).map(argmax).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over the batch of the time-averaged logits. Each step
/// receives `1/T` of the softmax gradient.
pub fn readout_loss(logits: &Tensor, labels: &[usize]) -> Result<Readout> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("logits must be [T, B, classes], got {s:?}")));
    }
    let (t, b, c) = (s[0], s[1], s[2]);
    if b == 0 || labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
    }
    let mut mean = vec![0.0; b * c];
    for step in logits.data().chunks(b * c) {
        for (m, v) in mean.iter_mut().zip(step) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let mut loss = 0.0;
    let mut seed = vec![0.0; b * c];
    for (i, &label) in labels.iter().enumerate() {
        let row = &mean[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[label];
        for k in 0..c {
            let p = (row[k] - max).exp() / z;
            seed[i * c + k] = (p - if k == label { 1.0 } else { 0.0 }) / (b * t) as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            location: "readout loss".into(),
            detail: format!("loss {loss}"),
        });
    }
    let mut grad = Vec::with_capacity(t * b * c);
    for _ in 0..t {
        grad.extend_from_slice(&seed);
    }
    Ok(Readout {
        loss,
        grad: Tensor::from_vec(s, grad)?,
        mean_logits: mean,
    })
}
