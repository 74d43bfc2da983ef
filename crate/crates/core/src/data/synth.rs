//! Synthetic temporal classification tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frames::{FrameClip, Provenance};
use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    /// A bar sweeps across the frame; class `c` fixes the direction
    /// (`c % 4`: right, left, down, up) and speed (`1 + c / 4` pixels per
    /// step). ON events mark the bar, OFF events the pixels it just left.
    MovingBar,
    /// Time-homogeneous Bernoulli events with a class-specific rate map.
    RatePattern,
    /// Every region flashes once; the class is the order of the flashes.
    /// Samples come in groups that differ only in that order, so the
    /// time-averaged frames carry no class information.
    TemporalOrder,
}

impl SynthTask {
    pub fn name(self) -> &'static str {
        match self {
            SynthTask::MovingBar => "moving-bar",
            SynthTask::RatePattern => "rate-pattern",
            SynthTask::TemporalOrder => "temporal-order",
        }
    }
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-bar" => Ok(SynthTask::MovingBar),
            "rate-pattern" => Ok(SynthTask::RatePattern),
            "temporal-order" => Ok(SynthTask::TemporalOrder),
            other => Err(Error::config(format!(
                "unknown synthetic task {other:?}; expected moving-bar, rate-pattern or temporal-order"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub time_steps: usize,
    pub classes: usize,
    pub n: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Probability of a background event per pixel, polarity and step.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_side() -> usize {
    16
}

fn default_noise() -> f64 {
    0.02
}

impl SynthSpec {
    pub fn new(task: SynthTask, time_steps: usize, classes: usize, n: usize, seed: u64) -> Self {
        SynthSpec {
            task,
            time_steps,
            classes,
            n,
            height: default_side(),
            width: default_side(),
            noise: default_noise(),
            seed,
        }
    }
}

const ORDERS_3: [[usize; 3]; 6] = [[0, 1, 2], [2, 1, 0], [1, 0, 2], [2, 0, 1], [0, 2, 1], [1, 2, 0]];

pub fn make_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    let (t, h, w) = (spec.time_steps, spec.height, spec.width);
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("time steps and frame size must be positive"));
    }
    if spec.n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::invalid(format!("noise probability {} outside [0, 1]", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = match spec.task {
        SynthTask::MovingBar => {
            if !(2..=12).contains(&spec.classes) {
                return Err(Error::invalid("moving-bar supports 2 to 12 classes"));
            }
            let max_speed = 1 + (spec.classes - 1) / 4;
            if (t - 1) * max_speed + 2 > h.min(w) {
                return Err(Error::invalid(format!(
                    "a {h}x{w} frame is too small for {t} steps at speed {max_speed}"
                )));
            }
            (0..spec.n)
                .map(|i| moving_bar(spec, i % spec.classes, &mut rng))
                .collect::<Result<Vec<_>>>()?
        }
        SynthTask::RatePattern => {
            if spec.classes < 2 {
                return Err(Error::invalid("rate-pattern needs at least 2 classes"));
            }
            let maps: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| {
                    (0..2 * h * w)
                        .map(|_| if rng.random::<f64>() < 0.3 { 0.5 } else { 0.05 })
                        .collect()
                })
                .collect();
            (0..spec.n)
                .map(|i| {
                    let c = i % spec.classes;
                    let mut data = Vec::with_capacity(t * 2 * h * w);
                    for _ in 0..t {
                        data.extend(maps[c].iter().map(|&r| if rng.random::<f64>() < r { 1.0 } else { 0.0 }));
                    }
                    clip(spec, c, data)
                })
                .collect::<Result<Vec<_>>>()?
        }
        SynthTask::TemporalOrder => temporal_order(spec, &mut rng)?,
    };
    Ok(Dataset {
        samples,
        classes: spec.classes,
    })
}

fn clip(spec: &SynthSpec, label: usize, data: Vec<f64>) -> Result<FrameClip> {
    Ok(FrameClip {
        frames: Tensor::from_vec(&[spec.time_steps, 2, spec.height, spec.width], data)?,
        label,
        provenance: Provenance {
            source: format!("synthetic:{}:seed={}", spec.task.name(), spec.seed),
            ..Provenance::default()
        },
    })
}

fn add_noise(data: &mut [f64], p: f64, rng: &mut ChaCha8Rng) {
    for v in data.iter_mut() {
        if rng.random::<f64>() < p {
            *v += 1.0;
        }
    }
}

fn moving_bar(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<FrameClip> {
    const THICKNESS: usize = 2;
    let (t_steps, h, w) = (spec.time_steps, spec.height, spec.width);
    let direction = class % 4;
    let speed = 1 + class / 4;
    let horizontal = direction < 2;
    let extent = if horizontal { w } else { h };
    let travel = (t_steps - 1) * speed;
    let start = rng.random_range(0..=extent - THICKNESS - travel);
    let plane = h * w;
    let mut data = vec![0.0; t_steps * 2 * plane];
    // leading coordinate of the bar along its axis of motion
    let position = |t: usize| -> usize {
        let along = start + t * speed;
        if direction.is_multiple_of(2) {
            along
        } else {
            extent - THICKNESS - along
        }
    };
    for t in 0..t_steps {
        let now = position(t);
        let covered = |p: usize, at: usize| p >= at && p < at + THICKNESS;
        for y in 0..h {
            for x in 0..w {
                let along = if horizontal { x } else { y };
                let base = t * 2 * plane + y * w + x;
                if covered(along, now) {
                    data[base + plane] += 1.0;
                } else if t > 0 && covered(along, position(t - 1)) {
                    data[base] += 1.0;
                }
            }
        }
    }
    add_noise(&mut data, spec.noise, rng);
    clip(spec, class, data)
}

fn temporal_order(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<FrameClip>> {
    let k = spec.classes;
    if !(2..=6).contains(&k) {
        return Err(Error::invalid("temporal-order supports 2 to 6 classes"));
    }
    let regions = if k == 2 { 2 } else { 3 };
    if spec.time_steps < regions {
        return Err(Error::invalid(format!(
            "temporal-order with {k} classes needs at least {regions} time steps"
        )));
    }
    if !spec.n.is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "temporal-order sample count {} must be a multiple of the class count {k}",
            spec.n
        )));
    }
    if spec.width < regions {
        return Err(Error::invalid("frame is narrower than the number of regions"));
    }
    let orders: Vec<Vec<usize>> = if regions == 2 {
        vec![vec![0, 1], vec![1, 0]]
    } else {
        ORDERS_3[..k].iter().map(|o| o.to_vec()).collect()
    };
    let (t_steps, h, w) = (spec.time_steps, spec.height, spec.width);
    let plane = h * w;
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n / k {
        // shared by the whole group: flash slots, flash masks, noise
        let mut slots: Vec<usize> = (0..t_steps).collect();
        for i in (1..t_steps).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        let mut slots = slots[..regions].to_vec();
        slots.sort_unstable();
        let masks: Vec<Vec<bool>> = (0..regions)
            .map(|_| (0..plane).map(|_| rng.random::<f64>() < 0.8).collect())
            .collect();
        let mut noise = vec![0.0; t_steps * 2 * plane];
        add_noise(&mut noise, spec.noise, rng);
        for (class, order) in orders.iter().enumerate() {
            let mut data = noise.clone();
            for (slot, &region) in slots.iter().zip(order) {
                let (lo, hi) = (region * w / regions, (region + 1) * w / regions);
                for y in 0..h {
                    for x in lo..hi {
                        if masks[region][y * w + x] {
                            data[slot * 2 * plane + plane + y * w + x] += 1.0;
                        }
                    }
                }
            }
            out.push(clip(spec, class, data)?);
        }
    }
    Ok(out)
}
