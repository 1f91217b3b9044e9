//! Built-in architectures.

use std::fmt;
use std::str::FromStr;

use crate::error::{DstError, Result};
use crate::nn::{LayerSpec, Network};

/// Architecture preset, or a custom MLP given as `mlp:24-64-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Preset {
    /// 24 → 256 → 256 → 1 MLP for tabular binary classification.
    SmallMlp,
    /// 3072 → 1024 → 512 → 10 MLP for flattened CIFAR-10 images.
    LargeMlp,
    /// Three 3×3 convolutions with max pooling and global average pooling.
    SmallCnn,
    /// LeNet-5-Caffe for 28×28 grayscale images.
    Lenet5Caffe,
    /// Fully connected ReLU network with the given layer widths.
    Mlp(Vec<usize>),
}

impl Preset {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Preset::SmallMlp => mlp_layers(&[24, 256, 256, 1]),
            Preset::LargeMlp => mlp_layers(&[3 * 32 * 32, 1024, 512, 10]),
            Preset::SmallCnn => vec![
                LayerSpec::conv2d(3, 32, 3, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool2(),
                LayerSpec::conv2d(32, 64, 3, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool2(),
                LayerSpec::conv2d(64, 128, 3, 1),
                LayerSpec::relu(),
                LayerSpec::global_avg_pool(),
                LayerSpec::linear(128, 10),
            ],
            Preset::Lenet5Caffe => vec![
                LayerSpec::conv2d(1, 20, 5, 0),
                LayerSpec::relu(),
                LayerSpec::max_pool2(),
                LayerSpec::conv2d(20, 50, 5, 0),
                LayerSpec::relu(),
                LayerSpec::max_pool2(),
                LayerSpec::linear(800, 500),
                LayerSpec::relu(),
                LayerSpec::linear(500, 10),
            ],
            Preset::Mlp(widths) => mlp_layers(widths),
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Preset::SmallMlp => vec![24],
            Preset::LargeMlp => vec![3 * 32 * 32],
            Preset::SmallCnn => vec![3, 32, 32],
            Preset::Lenet5Caffe => vec![1, 28, 28],
            Preset::Mlp(widths) => vec![widths[0]],
        }
    }

    /// Network with zero parameters.
    pub fn build(&self) -> Result<Network> {
        Network::new(self.input_shape(), self.layers())
    }
}

fn mlp_layers(widths: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::relu());
        }
        layers.push(LayerSpec::linear(pair[0], pair[1]));
    }
    layers
}

impl FromStr for Preset {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-mlp" => Ok(Preset::SmallMlp),
            "large-mlp" => Ok(Preset::LargeMlp),
            "small-cnn" => Ok(Preset::SmallCnn),
            "lenet5-caffe" => Ok(Preset::Lenet5Caffe),
            other => {
                if let Some(spec) = other.strip_prefix("mlp:") {
                    let widths = spec
                        .split('-')
                        .map(|w| w.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| DstError::config(format!("bad mlp widths '{spec}'")))?;
                    if widths.len() < 2 || widths.contains(&0) {
                        return Err(DstError::config(format!(
                            "mlp needs at least two positive widths, got '{spec}'"
                        )));
                    }
                    Ok(Preset::Mlp(widths))
                } else {
                    Err(DstError::config(format!(
                        "unknown architecture '{other}'; valid options: small-mlp, large-mlp, small-cnn, lenet5-caffe, mlp:<w0>-<w1>-..."
                    )))
                }
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::SmallMlp => f.write_str("small-mlp"),
            Preset::LargeMlp => f.write_str("large-mlp"),
            Preset::SmallCnn => f.write_str("small-cnn"),
            Preset::Lenet5Caffe => f.write_str("lenet5-caffe"),
            Preset::Mlp(w) => {
                let parts: Vec<String> = w.iter().map(usize::to_string).collect();
                write!(f, "mlp:{}", parts.join("-"))
            }
        }
    }
}
