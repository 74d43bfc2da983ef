use crate::error::{Error, Result};

use super::{LayerSpec, ModelConfig, NeuronSpec};

pub const PRESET_NAMES: [&str; 4] = ["tiny-dense", "tiny-conv", "resnet14", "resnet20"];

/// Named reference architectures.
///
/// * `tiny-dense`: two dense CP-DSA blocks.
/// * `tiny-conv`: three conv-tdBN-CP-DSA blocks (the last two strided),
///   a 2x2 average pool and the head.
/// * `resnet14` / `resnet20`: an encoding conv followed by three
///   stages of two or three residual blocks at 32, 64 and 128 channels,
///   a global average pool and the head.
pub fn preset(name: &str, time_steps: usize, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelConfig> {
    let n = || LayerSpec::Neuron(NeuronSpec::cpdsa());
    let tdbn = || LayerSpec::Tdbn { alpha_bn: 1.0 };
    let layers = match name {
        "tiny-dense" => vec![
            LayerSpec::Dense { units: 32 },
            tdbn(),
            n(),
            LayerSpec::Dense { units: 32 },
            tdbn(),
            n(),
            LayerSpec::ClassifierHead,
        ],
        "tiny-conv" => vec![
            LayerSpec::Conv3x3 { channels: 8, stride: 1 },
            tdbn(),
            n(),
            LayerSpec::Conv3x3 { channels: 16, stride: 2 },
            tdbn(),
            n(),
            LayerSpec::Conv3x3 { channels: 16, stride: 2 },
            tdbn(),
            n(),
            LayerSpec::AvgPool { size: 2 },
            LayerSpec::ClassifierHead,
        ],
        "resnet14" | "resnet20" => {
            let blocks = if name == "resnet14" { 2 } else { 3 };
            let [_, h, w] = input_shape else {
                return Err(Error::config(format!("{name} needs a [channels, height, width] input")));
            };
            if h % 4 != 0 || w % 4 != 0 || h != w {
                return Err(Error::config(format!(
                    "{name} needs a square input with a side divisible by 4, got {h}x{w}"
                )));
            }
            let mut layers = vec![LayerSpec::Conv3x3 { channels: 32, stride: 1 }, tdbn(), n()];
            for (stage, channels) in [32, 64, 128].into_iter().enumerate() {
                for b in 0..blocks {
                    layers.push(LayerSpec::ResidualBlock {
                        channels,
                        stride: if stage > 0 && b == 0 { 2 } else { 1 },
                        neuron: NeuronSpec::cpdsa(),
                    });
                }
            }
            layers.push(LayerSpec::AvgPool { size: h / 4 });
            layers.push(LayerSpec::ClassifierHead);
            layers
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
            )))
        }
    };
    Ok(ModelConfig {
        time_steps,
        input_shape: input_shape.to_vec(),
        classes,
        seed,
        surrogate_width: crate::backprop::DEFAULT_SURROGATE_WIDTH,
        layers,
    })
}
