//! Central finite-difference audit of the reverse pass.
//!
//! The forward pass is run in relaxed mode (piecewise-linear spikes) with
//! the change-perceptive gates frozen at their base values, which makes the
//! loss piecewise smooth in every parameter. A coordinate is excluded when
//! either perturbed point lands in a different smooth piece than the base,
//! detected by comparing kink signatures.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::network::{readout_loss, ForwardOptions, Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to rounding are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            tolerance: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub epsilon: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel))
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn excluded(&self) -> usize {
        self.blocks.iter().map(|b| b.excluded).sum()
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.max_rel() <= self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>8} {:>8} {:>12} {:>12} {:>12}",
            "block", "checked", "excluded", "max_rel", "mean_rel", "max_abs"
        );
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:<28} {:>8} {:>8} {:>12.3e} {:>12.3e} {:>12.3e}",
                b.name, b.checked, b.excluded, b.max_rel, b.mean_rel, b.max_abs
            );
        }
        let _ = writeln!(
            s,
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            self.max_rel(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epsilon={:e}", self.epsilon);
        let _ = writeln!(s, "tolerance={:e}", self.tolerance);
        let _ = writeln!(s, "floor={:e}", self.floor);
        let _ = writeln!(s, "loss={:e}", self.loss);
        let _ = writeln!(s, "checked={}", self.checked());
        let _ = writeln!(s, "excluded={}", self.excluded());
        let _ = writeln!(s, "max_rel={:e}", self.max_rel());
        let _ = writeln!(s, "passed={}", self.passed());
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "block.{}=checked:{},excluded:{},max_rel:{:e},mean_rel:{:e},max_abs:{:e}",
                b.name, b.checked, b.excluded, b.max_rel, b.mean_rel, b.max_abs
            );
        }
        s
    }
}

/// Compares the analytic gradient of the readout loss with central
/// differences over every learnable coordinate of `model`.
pub fn gradient_check(model: &Model, input: &Tensor, labels: &[usize], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.epsilon > 0.0 && opts.tolerance > 0.0 && opts.floor > 0.0) {
        return Err(Error::invalid("epsilon, tolerance and floor must be positive"));
    }
    let width = model.config().surrogate_width;
    let base_opts = ForwardOptions::relaxed(None);
    let (logits, tape) = model.forward(input, &base_opts)?;
    let readout = readout_loss(&logits, labels)?;
    let grads = model.backward(&tape, &readout.grad)?;
    let frozen = ForwardOptions::relaxed(Some(tape.gate_masks()));
    let base_sig = tape.kink_signature(width);

    let coords: Vec<(usize, usize)> = model
        .params()
        .blocks()
        .iter()
        .enumerate()
        .flat_map(|(b, block)| (0..block.values.len()).filter(move |&i| block.is_learnable(i)).map(move |i| (b, i)))
        .collect();

    let eval = |b: usize, i: usize, delta: f64| -> Result<(f64, bool)> {
        let mut m = model.clone();
        m.params_mut().blocks_mut()[b].values[i] += delta;
        let (l, tp) = m.forward(input, &frozen)?;
        let loss = readout_loss(&l, labels)?.loss;
        Ok((loss, tp.kink_signature(width) == base_sig))
    };
    let results = exec::map_range(coords.len(), |k| -> Result<Option<f64>> {
        let (b, i) = coords[k];
        let (plus, same_p) = eval(b, i, opts.epsilon)?;
        let (minus, same_m) = eval(b, i, -opts.epsilon)?;
        if same_p && same_m {
            Ok(Some((plus - minus) / (2.0 * opts.epsilon)))
        } else {
            Ok(None)
        }
    });

    let mut blocks: Vec<BlockReport> = model
        .params()
        .blocks()
        .iter()
        .map(|b| BlockReport {
            name: b.name.clone(),
            checked: 0,
            excluded: 0,
            max_rel: 0.0,
            mean_rel: 0.0,
            max_abs: 0.0,
        })
        .collect();
    for (&(b, i), r) in coords.iter().zip(results) {
        let rep = &mut blocks[b];
        match r? {
            None => rep.excluded += 1,
            Some(numeric) => {
                let analytic = grads.blocks[b][i];
                let abs = (analytic - numeric).abs();
                let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
                rep.checked += 1;
                rep.max_rel = rep.max_rel.max(rel);
                rep.mean_rel += rel;
                rep.max_abs = rep.max_abs.max(abs);
            }
        }
    }
    for rep in &mut blocks {
        if rep.checked > 0 {
            rep.mean_rel /= rep.checked as f64;
        }
    }
    Ok(GradCheckReport {
        blocks,
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
        floor: opts.floor,
        loss: readout.loss,
    })
}

/// A freshly initialised model (seeded with `seed`) and a random input
/// batch with labels.
pub fn random_problem(mut config: ModelConfig, batch: usize, seed: u64) -> Result<(Model, Tensor, Vec<usize>)> {
    config.seed = seed;
    let model = Model::new(config)?;
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut shape = vec![cfg.time_steps, batch];
    shape.extend_from_slice(&cfg.input_shape);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let input = Tensor::from_vec(&shape, data)?;
    let labels = (0..batch).map(|_| rng.random_range(0..cfg.classes)).collect();
    Ok((model, input, labels))
}
