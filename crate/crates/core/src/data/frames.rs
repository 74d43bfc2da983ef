//! Frame integration, resampling and clip files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::events::EventStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Slicing {
    /// Consecutive slices of `dt_us` microseconds starting at the first event.
    FixedDuration { dt_us: u64 },
    /// `slices` equal-length slices spanning the stream.
    FixedCount { slices: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub slicing: Option<Slicing>,
    /// The last fixed-duration slice is shorter than `dt_us`.
    #[serde(default)]
    pub partial_last_slice: bool,
    /// Spatial resampling applied after integration.
    #[serde(default)]
    pub resample: Option<String>,
}

/// Dense frames `[T, C, H, W]` of non-negative counts (channel = polarity
/// for integrated streams).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    pub frames: Tensor,
    pub label: usize,
    pub provenance: Provenance,
}

impl FrameClip {
    pub fn time_steps(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `[C, H, W]`.
    pub fn frame_shape(&self) -> &[usize] {
        &self.frames.shape()[1..]
    }

    pub fn total(&self) -> f64 {
        self.frames.sum()
    }

    /// Per-slice totals.
    pub fn slice_totals(&self) -> Vec<f64> {
        (0..self.time_steps()).map(|t| self.frames.step_slice(t).iter().sum()).collect()
    }

    /// Sum over the time axis, `[C, H, W]`.
    pub fn time_sum(&self) -> Vec<f64> {
        let per = self.frames.len() / self.time_steps().max(1);
        let mut out = vec![0.0; per];
        for t in 0..self.time_steps() {
            for (o, v) in out.iter_mut().zip(self.frames.step_slice(t)) {
                *o += v;
            }
        }
        out
    }
}

trait StepSlice {
    fn step_slice(&self, t: usize) -> &[f64];
}

impl StepSlice for Tensor {
    fn step_slice(&self, t: usize) -> &[f64] {
        let per = self.len() / self.shape()[0];
        &self.data()[t * per..(t + 1) * per]
    }
}

/// Counts events per slice, polarity and pixel. Slices are half-open and
/// start at the first event; the final timestamp falls in the last slice.
pub fn integrate_frames(stream: &EventStream, slicing: Slicing) -> Result<FrameClip> {
    if !stream.is_sorted() {
        return Err(Error::invalid("event stream is not sorted by timestamp"));
    }
    if !stream.in_bounds() {
        return Err(Error::invalid("event stream has events outside its sensor extent"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let (t0, span) = match (stream.events.first(), stream.events.last()) {
        (Some(a), Some(b)) => (a.t, b.t - a.t),
        _ => (0, 0),
    };
    let (slices, partial): (usize, bool) = match slicing {
        Slicing::FixedDuration { dt_us } => {
            if dt_us == 0 {
                return Err(Error::invalid("slice duration must be positive"));
            }
            let n = span / dt_us + 1;
            (n as usize, n * dt_us > span + 1)
        }
        Slicing::FixedCount { slices } => {
            if slices == 0 {
                return Err(Error::invalid("slice count must be at least 1"));
            }
            (slices, false)
        }
    };
    let plane = h * w;
    let mut data = vec![0.0; slices * 2 * plane];
    for e in &stream.events {
        let rel = e.t - t0;
        let k = match slicing {
            Slicing::FixedDuration { dt_us } => (rel / dt_us) as usize,
            Slicing::FixedCount { slices } => ((rel as u128 * slices as u128) / (span as u128 + 1)) as usize,
        };
        data[(k * 2 + e.p as usize) * plane + e.y as usize * w + e.x as usize] += 1.0;
    }
    Ok(FrameClip {
        frames: Tensor::from_vec(&[slices, 2, h, w], data)?,
        label: stream.label.unwrap_or(0),
        provenance: Provenance {
            source: String::new(),
            slicing: Some(slicing),
            partial_last_slice: partial,
            resample: None,
        },
    })
}

/// Weights of source cells `[0, src)` covering each of `dst` equal output
/// intervals, as `(first source index, weights)`.
fn overlap_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    // output cell i covers [i*src/dst, (i+1)*src/dst) in source units; work in
    // units of 1/dst so every boundary is an integer
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i * src, (i + 1) * src);
            let first = lo / dst;
            let last = (hi - 1) / dst;
            let weights = (first..=last)
                .map(|r| {
                    let a = lo.max(r * dst);
                    let b = hi.min((r + 1) * dst);
                    (b - a) as f64 / dst as f64
                })
                .collect();
            (first, weights)
        })
        .collect()
}

/// Resamples every frame to `target = (H', W')`. Integer ratios use block
/// sums; other ratios distribute each source cell over the output cells by
/// overlapping area. Both conserve the total count.
pub fn downsample(clip: &FrameClip, target: (usize, usize)) -> Result<FrameClip> {
    let s = clip.frames.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::invalid(format!("cannot downsample {h}x{w} to {th}x{tw}")));
    }
    let mut out = clip.clone();
    if (th, tw) == (h, w) {
        return Ok(out);
    }
    let method = if h % th == 0 && w % tw == 0 { "block-sum" } else { "area-overlap" };
    let rows = overlap_weights(h, th);
    let cols = overlap_weights(w, tw);
    let mut data = vec![0.0; planes * th * tw];
    let mut tmp = vec![0.0; h * tw];
    for p in 0..planes {
        let src = &clip.frames.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (j, (c0, wc)) in cols.iter().enumerate() {
                tmp[y * tw + j] = wc.iter().enumerate().map(|(k, a)| a * src[y * w + c0 + k]).sum();
            }
        }
        let dst = &mut data[p * th * tw..(p + 1) * th * tw];
        for (i, (r0, wr)) in rows.iter().enumerate() {
            for j in 0..tw {
                dst[i * tw + j] = wr.iter().enumerate().map(|(k, a)| a * tmp[(r0 + k) * tw + j]).sum();
            }
        }
    }
    out.frames = Tensor::from_vec(&[s[0], s[1], th, tw], data)?;
    out.provenance.resample = Some(format!("{method} {h}x{w}->{th}x{tw}"));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    shape: Vec<usize>,
    label: usize,
    data_file: String,
    provenance: Provenance,
}

/// Writes `<dir>/<stem>.bin` (raw little-endian `f64`, row-major) and the
/// `<dir>/<stem>.json` sidecar describing it. Returns the sidecar path.
pub fn write_clip(dir: &Path, stem: &str, clip: &FrameClip) -> Result<PathBuf> {
    let data_file = format!("{stem}.bin");
    let mut bytes = Vec::with_capacity(8 * clip.frames.len());
    for v in clip.frames.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(&data_file), bytes)?;
    let side = Sidecar {
        format_version: CLIP_FORMAT_VERSION,
        shape: clip.frames.shape().to_vec(),
        label: clip.label,
        data_file,
        provenance: clip.provenance.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&side)?)?;
    Ok(path)
}

pub fn read_clip(sidecar: &Path) -> Result<FrameClip> {
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    if side.format_version != CLIP_FORMAT_VERSION {
        return Err(Error::config(format!(
            "{}: unsupported clip format version {}",
            sidecar.display(),
            side.format_version
        )));
    }
    if side.shape.len() != 4 {
        return Err(Error::shape(format!("{}: clip shape must be [T, C, H, W]", sidecar.display())));
    }
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let bytes = std::fs::read(dir.join(&side.data_file))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::shape(format!("{}: data length is not a multiple of 8", side.data_file)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(FrameClip {
        frames: Tensor::from_vec(&side.shape, data)?,
        label: side.label,
        provenance: side.provenance,
    })
}
