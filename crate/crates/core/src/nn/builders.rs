//! Prebuilt backbones.
//!
//! Channel widths are fixed defaults (the classic LeNet-5 6/16/120/84 and a
//! 64/64/128 three-block convnet with dropout); every width is overridable
//! through the config structs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::{Activation, LayerSpec, NetworkSpec};

pub fn mlp_spec(
    input_shape: &[usize],
    hidden: &[usize],
    num_classes: usize,
    activation: Activation,
) -> Result<NetworkSpec> {
    let mut width: usize = input_shape.iter().product();
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: h,
            activation,
        });
        width = h;
    }
    layers.push(LayerSpec::Dense {
        inputs: width,
        outputs: num_classes,
        activation: Activation::Identity,
    });
    NetworkSpec::new(input_shape.to_vec(), layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeNet5Config {
    pub input_shape: Vec<usize>,
    pub conv_channels: [usize; 3],
    pub hidden: usize,
    pub kernel: usize,
    /// Zero padding of the first convolution (2 turns 28×28 into the
    /// 32×32 field the original design expects).
    pub first_padding: usize,
    pub activation: Activation,
}

impl Default for LeNet5Config {
    fn default() -> Self {
        Self {
            input_shape: vec![1, 28, 28],
            conv_channels: [6, 16, 120],
            hidden: 84,
            kernel: 5,
            first_padding: 2,
            activation: Activation::Tanh,
        }
    }
}

impl LeNet5Config {
    /// conv → avgpool → conv → avgpool → conv → dense → dense. The third
    /// convolution's kernel spans the whole remaining feature map, so its
    /// output is `channels × 1 × 1`.
    pub fn build(&self, num_classes: usize) -> Result<NetworkSpec> {
        if num_classes < 2 {
            return Err(Error::arg("num_classes must be >= 2"));
        }
        let [c, h, w] = match *self.input_shape.as_slice() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::arg("LeNet-5 needs a C×H×W input")),
        };
        let [c1, c2, c3] = self.conv_channels;
        let k = self.kernel;
        let act = self.activation;
        let conv = |i, o, kernel: [usize; 2], padding| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel,
            stride: 1,
            padding,
            activation: act,
        };
        let pool = LayerSpec::AvgPool { window: 2, stride: 2 };

        let extent = |e: usize| -> Option<usize> {
            let e1 = (e + 2 * self.first_padding).checked_sub(k)? + 1;
            let e2 = e1 / 2;
            let e3 = e2.checked_sub(k)? + 1;
            Some(e3 / 2)
        };
        let (rh, rw) = match (extent(h), extent(w)) {
            (Some(rh), Some(rw)) if rh >= 1 && rw >= 1 => (rh, rw),
            _ => return Err(Error::arg(format!("input {h}×{w} too small for LeNet-5 with kernel {k}"))),
        };

        let layers = vec![
            conv(c, c1, [k, k], self.first_padding),
            pool.clone(),
            conv(c1, c2, [k, k], 0),
            pool,
            conv(c2, c3, [rh, rw], 0),
            LayerSpec::Dense {
                inputs: c3,
                outputs: self.hidden,
                activation: act,
            },
            LayerSpec::Dense {
                inputs: self.hidden,
                outputs: num_classes,
                activation: Activation::Identity,
            },
        ];
        NetworkSpec::new(self.input_shape.clone(), layers)
    }
}

/// Default LeNet-5 on 1×28×28 inputs.
pub fn lenet5_spec(num_classes: usize) -> Result<NetworkSpec> {
    LeNet5Config::default().build(num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HintonConfig {
    pub conv_channels: [usize; 3],
    pub kernel: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for HintonConfig {
    fn default() -> Self {
        Self {
            conv_channels: [64, 64, 128],
            kernel: 5,
            dropout: 0.5,
            activation: Activation::Relu,
        }
    }
}

impl HintonConfig {
    /// Three blocks of same-padded conv → maxpool → dropout, then a dense
    /// classifier. Each pool uses a 2×2 window on even extents and an
    /// overlapping 3×3 window on odd ones (stride 2 either way) so that it
    /// tiles the map exactly.
    pub fn build(&self, num_classes: usize, input_shape: &[usize]) -> Result<NetworkSpec> {
        if num_classes < 2 {
            return Err(Error::arg("num_classes must be >= 2"));
        }
        let [mut c, mut h, mut w] = match *input_shape {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::arg("Hinton net needs a C×H×W input")),
        };
        if self.kernel.is_multiple_of(2) {
            return Err(Error::arg("Hinton net kernel must be odd for same padding"));
        }
        let mut layers = Vec::with_capacity(10);
        for &out in &self.conv_channels {
            layers.push(LayerSpec::Conv2d {
                in_channels: c,
                out_channels: out,
                kernel: [self.kernel, self.kernel],
                stride: 1,
                padding: self.kernel / 2,
                activation: self.activation,
            });
            if h != w {
                return Err(Error::arg("Hinton net expects square inputs"));
            }
            let window = match h {
                0 | 1 => return Err(Error::arg("input extent too small for three pools")),
                2 => 2,
                e if e % 2 == 0 => 2,
                _ => 3,
            };
            layers.push(LayerSpec::MaxPool { window, stride: 2 });
            layers.push(LayerSpec::Dropout { rate: self.dropout });
            c = out;
            h = (h - window) / 2 + 1;
            w = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: c * h * w,
            outputs: num_classes,
            activation: Activation::Identity,
        });
        NetworkSpec::new(input_shape.to_vec(), layers)
    }
}

pub fn hinton_spec(num_classes: usize, input_shape: &[usize]) -> Result<NetworkSpec> {
    HintonConfig::default().build(num_classes, input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_structure() {
        let spec = lenet5_spec(10).unwrap();
        let kinds: Vec<_> = spec.layers().iter().map(LayerSpec::kind).collect();
        assert_eq!(
            kinds,
            ["conv2d", "avg_pool", "conv2d", "avg_pool", "conv2d", "dense", "dense"]
        );
        assert_eq!(spec.count_kind("conv2d"), 3);
        assert_eq!(spec.count_kind("avg_pool"), 2);
        assert_eq!(spec.count_kind("dense"), 2);
        assert_eq!(spec.output_shape(4), &[120, 1, 1]);
        assert_eq!(spec.num_classes(), 10);
        assert_eq!(spec.hidden_layers(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn lenet_on_cifar_shape() {
        let cfg = LeNet5Config {
            input_shape: vec![3, 32, 32],
            ..Default::default()
        };
        let spec = cfg.build(10).unwrap();
        assert_eq!(spec.output_shape(4), &[120, 1, 1]);
    }

    #[test]
    fn hinton_structure() {
        for shape in [[3, 32, 32], [1, 28, 28], [3, 8, 8]] {
            let spec = hinton_spec(10, &shape).unwrap();
            assert_eq!(spec.count_kind("conv2d"), 3);
            assert_eq!(spec.count_kind("max_pool"), 3);
            assert_eq!(spec.count_kind("dropout"), 3);
            assert_eq!(spec.num_classes(), 10);
        }
        assert_eq!(hinton_spec(10, &[3, 32, 32]).unwrap().output_shape(7), &[128, 4, 4]);
        assert_eq!(hinton_spec(10, &[1, 28, 28]).unwrap().output_shape(7), &[128, 3, 3]);
    }

    #[test]
    fn mlp_shape() {
        let spec = mlp_spec(&[1, 28, 28], &[128], 10, Activation::Relu).unwrap();
        assert_eq!(spec.len(), 2);
        assert_eq!(spec.output_shape(0), &[128]);
        assert!(mlp_spec(&[4], &[], 1, Activation::Relu).is_err());
    }
}
