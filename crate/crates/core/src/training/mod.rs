//! Minibatch SGD over time-unrolled networks, with neuron-scalar clamping,
//! per-epoch parameter traces, evaluation and the ablation harness.

mod ablation;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{readout_loss, ForwardOptions, Model, ParamRole};
use crate::neurons::{self, SCALAR_NAMES};

pub use ablation::{run_ablation, AblationRow, AblationTable, AblationVariant};
pub use schedule::{schedule_lr, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampMode {
    /// Project each neuron scalar into its range after every step.
    Hard,
    /// Sigmoid reparameterisation; reserved, rejected by validation.
    Sigmoid,
}

fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_clamp() -> ClampMode {
    ClampMode::Hard
}
fn default_schedule() -> Schedule {
    Schedule::Constant
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// L2 penalty on synaptic weights only.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Overrides the rate of every dropout layer of the model.
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clamp")]
    pub clamp: ClampMode,
    /// Stop after the first epoch whose training accuracy reaches this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: default_schedule(),
            epochs: 10,
            batch_size: default_batch(),
            dropout: None,
            seed: 0,
            clamp: default_clamp(),
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(format!("dropout {d} outside [0, 1)")));
            }
        }
        if self.clamp == ClampMode::Sigmoid {
            return Err(Error::config("clamp = \"sigmoid\" is not implemented; use \"hard\""));
        }
        self.schedule.validate()
    }
}

/// Neuron scalars of one layer at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTraceRecord {
    pub epoch: usize,
    pub layer: String,
    pub scalars: [f64; 7],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training-batch loss.
    pub loss: f64,
    /// Accuracy over the epoch's training batches.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<ParamTraceRecord>,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// Line-delimited JSON: one `param` record per epoch and neuron layer,
    /// one `metrics` record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for m in &self.metrics {
            let mut v = serde_json::to_value(m)?;
            v["record"] = "metrics".into();
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
            for r in self.trace.iter().filter(|r| r.epoch == m.epoch) {
                let mut obj = serde_json::Map::new();
                obj.insert("record".into(), "param".into());
                obj.insert("epoch".into(), r.epoch.into());
                obj.insert("layer".into(), r.layer.clone().into());
                for (name, v) in SCALAR_NAMES.iter().zip(r.scalars) {
                    obj.insert((*name).into(), v.into());
                }
                obj.insert("loss".into(), m.loss.into());
                obj.insert("train_accuracy".into(), m.train_accuracy.into());
                s.push_str(&serde_json::to_string(&obj)?);
                s.push('\n');
            }
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.train_accuracy)
    }
}

/// Parses the `param` records of a metrics file back into a trace.
pub fn read_trace_jsonl(text: &str) -> Result<Vec<ParamTraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if v["record"] != "param" {
            continue;
        }
        let field = |k: &str| {
            v[k].as_f64().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("missing {k}"),
            })
        };
        let mut scalars = [0.0; 7];
        for (s, name) in scalars.iter_mut().zip(SCALAR_NAMES) {
            *s = field(name)?;
        }
        out.push(ParamTraceRecord {
            epoch: field("epoch")? as usize,
            layer: v["layer"].as_str().unwrap_or_default().to_string(),
            scalars,
        });
    }
    Ok(out)
}

/// Per layer and scalar: value range over the first and last `window`
/// epochs of a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub layer: String,
    pub scalar: &'static str,
    pub early_range: f64,
    pub late_range: f64,
}

impl ConvergenceRow {
    /// The scalar moved early on and moves less at the end. Scalars that
    /// never move (frozen) count as converged.
    pub fn converged(&self) -> bool {
        self.early_range == 0.0 && self.late_range == 0.0 || self.late_range < self.early_range
    }
}

pub fn convergence(trace: &[ParamTraceRecord], window: usize) -> Vec<ConvergenceRow> {
    let mut layers: Vec<&str> = Vec::new();
    for r in trace {
        if !layers.contains(&r.layer.as_str()) {
            layers.push(&r.layer);
        }
    }
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let mut rows = Vec::new();
    for layer in layers {
        let recs: Vec<&ParamTraceRecord> = trace.iter().filter(|r| r.layer == layer).collect();
        let w = window.min(recs.len());
        for (k, name) in SCALAR_NAMES.iter().enumerate() {
            let series: Vec<f64> = recs.iter().map(|r| r.scalars[k]).collect();
            rows.push(ConvergenceRow {
                layer: layer.to_string(),
                scalar: name,
                early_range: range(&series[..w]),
                late_range: range(&series[series.len() - w..]),
            });
        }
    }
    rows
}

/// State passed to the per-step observer of [`train_with`].
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub model: &'a Model,
}

pub fn train(model: &mut Model, train_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, None, config, |_| {})
}

/// Trains `model` in place. `test_set`, when given, is evaluated after every
/// epoch. `observer` runs after every optimiser step.
pub fn train_with(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepInfo),
) -> Result<TrainOutcome> {
    config.validate()?;
    train_set.validate()?;
    if let Some(rate) = config.dropout {
        let adjusted = model.config().clone().with_dropout(rate);
        if adjusted != *model.config() {
            let mut rebuilt = Model::new(adjusted)?;
            rebuilt.params_mut().copy_values_from(model.params())?;
            *model = rebuilt;
        }
    }
    let thresholds = thresholds(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Vec<f64>> = model.params().blocks().iter().map(|b| vec![0.0; b.values.len()]).collect();
    let mut outcome = TrainOutcome::default();
    let mut ids: Vec<usize> = (0..train_set.len()).collect();
    let classes = model.config().classes;

    for epoch in 0..config.epochs {
        let lr = schedule_lr(config.lr, &config.schedule, epoch);
        ids.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in ids.chunks(config.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk)?;
            let opts = ForwardOptions::train(rng.next_u64());
            let (logits, tape) = model.forward(&x, &opts)?;
            let readout = match readout_loss(&logits, &y) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(non_finite(model, epoch, b)),
                Err(e) => return Err(e),
            };
            let grads = model.backward(&tape, &readout.grad)?;
            if !grads.all_finite() {
                return Err(non_finite(model, epoch, b));
            }
            loss_sum += readout.loss * chunk.len() as f64;
            correct += readout.predictions(classes).iter().zip(&y).filter(|(p, l)| p == l).count();

            let params = model.params_mut();
            for ((block, grad), vel) in params.blocks_mut().iter_mut().zip(&grads.blocks).zip(&mut velocity) {
                let decay = if block.role == ParamRole::Weight { config.weight_decay } else { 0.0 };
                for i in 0..block.values.len() {
                    if !block.frozen.is_empty() && block.frozen.contains(&i) {
                        continue;
                    }
                    let g = grad[i] + decay * block.values[i];
                    vel[i] = config.momentum * vel[i] + g;
                    block.values[i] -= lr * vel[i];
                }
            }
            params.clamp_neuron_scalars();
            debug_assert!(model.params().neuron_scalars_in_range());
            debug_assert_eq!(thresholds, self::thresholds(model));
            model.update_running_stats(&tape)?;
            observer(&StepInfo {
                epoch,
                batch: b,
                loss: readout.loss,
                model,
            });
        }
        for n in model.neuron_layers() {
            if n.scalars.is_some() {
                outcome.trace.push(ParamTraceRecord {
                    epoch,
                    layer: n.name.clone(),
                    scalars: n.params(model.params()).scalars(),
                });
            }
        }
        let test_accuracy = match test_set {
            Some(t) => Some(evaluate(model, t, config.batch_size)?.accuracy),
            None => None,
        };
        outcome.metrics.push(EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
        });
        let reached = outcome.final_train_accuracy().unwrap_or(0.0);
        if config.target_accuracy.is_some_and(|t| reached >= t) {
            break;
        }
    }
    Ok(outcome)
}

fn thresholds(model: &Model) -> Vec<(f64, f64)> {
    model.neuron_layers().iter().map(|n| (n.fixed.v_th, n.fixed.u_th)).collect()
}

fn non_finite(model: &Model, epoch: usize, batch: usize) -> Error {
    let mut dump = format!("parameter digest {}", model.digest());
    for b in model.params().blocks() {
        let finite = b.values.iter().filter(|v| v.is_finite()).count();
        let max = b.values.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
        let _ = write!(dump, "; {} finite {}/{} max|.| {:e}", b.name, finite, b.values.len(), max);
    }
    Error::NonFinite {
        location: format!("training loss at epoch {epoch} batch {batch}"),
        detail: dump,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Mean `s / 2` per neuron and step, one entry per neuron layer.
    pub spike_rates: Vec<f64>,
}

/// Evaluation-mode accuracy (running tdBN statistics, no dropout).
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    data.validate()?;
    let classes = model.config().classes;
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    let mut loss = 0.0;
    let mut spikes: Vec<(f64, usize)> = Vec::new();
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let (logits, tape) = model.forward(&x, &ForwardOptions::eval())?;
        let r = readout_loss(&logits, &y)?;
        loss += r.loss * chunk.len() as f64;
        for (p, &l) in r.predictions(classes).iter().zip(&y) {
            count[l] += 1;
            if *p == l {
                correct[l] += 1;
            }
        }
        let nts = tape.neuron_tapes();
        spikes.resize(nts.len(), (0.0, 0));
        for (acc, nt) in spikes.iter_mut().zip(nts) {
            acc.0 += nt.records.iter().map(|r| r.spike() / 2.0).sum::<f64>();
            acc.1 += nt.records.len();
        }
    }
    Ok(Evaluation {
        accuracy: correct.iter().sum::<usize>() as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        per_class_accuracy: correct
            .iter()
            .zip(&count)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        spike_rates: spikes.iter().map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect(),
    })
}

/// Neuron scalars of every DSA-family layer, in forward order.
pub fn neuron_scalars(model: &Model) -> Vec<(String, [f64; 7])> {
    model
        .neuron_layers()
        .iter()
        .filter(|n| n.scalars.is_some())
        .map(|n| (n.name.clone(), n.params(model.params()).scalars()))
        .collect()
}

pub fn scalars_in_range(model: &Model) -> bool {
    neuron_scalars(model).iter().all(|(_, s)| neurons::scalars_in_range(s))
}
