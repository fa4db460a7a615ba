use crate::error::{Error, Result};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Weight and bias of one parametric layer.
///
/// Dense weights are `[inputs, outputs]`; convolution kernels are
/// `[out_channels, in_channels, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LayerParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Parameters (or gradients) keyed by layer index; `None` for layers
/// without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Element> {
    layers: Vec<Option<LayerParams<T>>>,
}

pub(crate) fn param_shapes(layer: &LayerSpec) -> Option<(Vec<usize>, Vec<usize>, usize, usize)> {
    match *layer {
        LayerSpec::Dense {
            inputs, outputs, ..
        } => Some((vec![inputs, outputs], vec![outputs], inputs, outputs)),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let area = kernel[0] * kernel[1];
            Some((
                vec![out_channels, in_channels, kernel[0], kernel[1]],
                vec![out_channels],
                in_channels * area,
                out_channels * area,
            ))
        }
        _ => None,
    }
}

impl<T: Element> ParamSet<T> {
    /// Fan-scaled uniform weights and zero biases, drawn in layer order.
    pub fn init(spec: &NetworkSpec, rng: &mut RngStream) -> Result<Self> {
        let layers = spec
            .layers()
            .iter()
            .map(|layer| {
                param_shapes(layer)
                    .map(|(w, b, fan_in, fan_out)| {
                        Ok(LayerParams {
                            weight: Tensor::init_uniform_fan(&w, fan_in, fan_out, rng)?,
                            bias: Tensor::zeros(&b),
                        })
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers()
            .iter()
            .map(|layer| {
                param_shapes(layer).map(|(w, b, _, _)| LayerParams {
                    weight: Tensor::zeros(&w),
                    bias: Tensor::zeros(&b),
                })
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(spec: &NetworkSpec, layers: Vec<Option<LayerParams<T>>>) -> Result<Self> {
        let expected = Self::zeros(spec);
        if !expected.same_structure_as_layers(&layers) {
            return Err(Error::arg("parameter tensors do not match the network spec"));
        }
        Ok(Self { layers })
    }

    fn same_structure_as_layers(&self, other: &[Option<LayerParams<T>>]) -> bool {
        self.layers.len() == other.len()
            && self.layers.iter().zip(other).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
                }
                _ => false,
            })
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.same_structure_as_layers(&other.layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| l.as_ref().map(LayerParams::zeros_like))
                .collect(),
        }
    }

    pub fn layer(&self, i: usize) -> Option<&LayerParams<T>> {
        self.layers.get(i).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, i: usize) -> Option<&mut LayerParams<T>> {
        self.layers.get_mut(i).and_then(Option::as_mut)
    }

    pub fn layers(&self) -> &[Option<LayerParams<T>>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Option<LayerParams<T>>> {
        self.layers
    }

    /// All tensors in a fixed order: layer index, then weight before bias.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_structure(other));
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}
