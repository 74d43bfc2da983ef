//! Event-stream ingestion, frame integration, dataset splitting and
//! synthetic tasks.

pub mod events;
pub mod frames;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use events::{parse_events, to_csv, to_packed, Event, EventFormat, EventStream};
pub use frames::{downsample, integrate_frames, read_clip, write_clip, FrameClip, Provenance, Slicing};
pub use synth::{make_synthetic, SynthSpec, SynthTask};

/// Labelled clips sharing one frame shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FrameClip>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `[T, C, H, W]` of the first sample.
    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.frames.shape())
    }

    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            samples: ids.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// Checks that every sample has the same shape and an in-range label.
    pub fn validate(&self) -> Result<()> {
        let Some(shape) = self.sample_shape() else {
            return Err(Error::invalid("dataset is empty"));
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.frames.shape() != shape {
                return Err(Error::shape(format!(
                    "sample {i} has shape {:?}, expected {shape:?}",
                    s.frames.shape()
                )));
            }
            if s.label >= self.classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but the dataset has {} classes",
                    s.label, self.classes
                )));
            }
        }
        Ok(())
    }

    /// Stacks the samples `ids` into a time-major batch `[T, B, C, H, W]`.
    pub fn batch(&self, ids: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.sample_shape().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let t = shape[0];
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(t * ids.len() * per);
        for step in 0..t {
            for &i in ids {
                let s = &self.samples[i].frames;
                if s.shape() != shape {
                    return Err(Error::shape(format!("sample {i} has shape {:?}", s.shape())));
                }
                data.extend_from_slice(&s.data()[step * per..(step + 1) * per]);
            }
        }
        let mut out_shape = vec![t, ids.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let labels = ids.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::from_vec(&out_shape, data)?, labels))
    }

    /// Writes one clip pair per sample as `clip_00000.{bin,json}`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            write_clip(dir, &format!("clip_{i:05}"), s)?;
        }
        Ok(())
    }

    /// Loads every `*.json` clip sidecar in `dir`, in file-name order. The
    /// class count is one more than the largest label unless given.
    pub fn load_dir(dir: &Path, classes: Option<usize>) -> Result<Dataset> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let samples = paths.iter().map(|p| read_clip(p)).collect::<Result<Vec<_>>>()?;
        let classes = classes.unwrap_or_else(|| samples.iter().map(|s| s.label + 1).max().unwrap_or(0));
        let d = Dataset { samples, classes };
        d.validate()?;
        Ok(d)
    }
}

/// Seeded partition of `0..labels.len()` into train and test ids, stratified
/// by label: each class contributes `round(ratio * n_class)` training items.
/// Both id lists are returned sorted.
pub fn split_dataset(labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        ids.shuffle(&mut rng);
        let k = (ratio * ids.len() as f64).round() as usize;
        train.extend_from_slice(&ids[..k]);
        test.extend_from_slice(&ids[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_items_split_nine_one() {
        let (tr, te) = split_dataset(&[0; 10], 0.9, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        assert_eq!(split_dataset(&[0; 10], 0.9, 1).unwrap(), (tr, te));
    }

    #[test]
    fn stratified_per_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let (tr, te) = split_dataset(&labels, 0.9, 4).unwrap();
        for c in 0..10 {
            assert_eq!(tr.iter().filter(|&&i| labels[i] == c).count(), 9);
            assert_eq!(te.iter().filter(|&&i| labels[i] == c).count(), 1);
        }
    }

    #[test]
    fn split_rejects_empty_and_bad_ratio() {
        assert!(split_dataset(&[], 0.5, 0).is_err());
        assert!(split_dataset(&[0, 1], 1.0, 0).is_err());
        assert!(split_dataset(&[0, 1], 0.0, 0).is_err());
    }

    #[test]
    fn batch_is_time_major() {
        let d = make_synthetic(&SynthSpec::new(SynthTask::RatePattern, 3, 2, 4, 0)).unwrap();
        let (x, y) = d.batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[3, 2, 2, 16, 16]);
        assert_eq!(y, vec![0, 0]);
        let per = 2 * 16 * 16;
        assert_eq!(&x.data()[per..2 * per], &d.samples[0].frames.data()[..per]);
        assert_eq!(&x.data()[2 * per..3 * per], &d.samples[2].frames.data()[per..2 * per]);
    }

    #[test]
    fn dataset_dir_round_trip() {
        let d = make_synthetic(&SynthSpec::new(SynthTask::TemporalOrder, 3, 2, 4, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save_dir(dir.path()).unwrap();
        assert_eq!(Dataset::load_dir(dir.path(), Some(2)).unwrap(), d);
    }
}
