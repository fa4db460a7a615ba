use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checked_numel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

/// One backbone layer.
///
/// `Dense` flattens whatever it receives, so a dense layer may directly follow
/// a convolution or pool as long as the element count matches `inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => {
                *activation
            }
            _ => Activation::Identity,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => inputs >= 1 && outputs >= 1,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels >= 1 && out_channels >= 1 && kernel[0] >= 1 && kernel[1] >= 1 && stride >= 1,
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                window >= 1 && stride >= 1
            }
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid layer parameters: {self:?}")))
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let numel = checked_numel(input).ok_or_else(|| Error::arg("input shape overflows"))?;
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if numel != inputs {
                    return Err(Error::shape("dense", input, &[inputs]));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = chw(input, "conv2d")?;
                if c != in_channels {
                    return Err(Error::shape("conv2d channels", input, &[in_channels]));
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if kernel[0] > ph || kernel[1] > pw {
                    return Err(Error::shape("conv2d kernel larger than padded input", &[ph, pw], &kernel));
                }
                Ok(vec![
                    out_channels,
                    (ph - kernel[0]) / stride + 1,
                    (pw - kernel[1]) / stride + 1,
                ])
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                let [c, h, w] = chw(input, "pool")?;
                let fits = |e: usize| e >= window && (e - window).is_multiple_of(stride);
                if !fits(h) || !fits(w) {
                    return Err(Error::shape("pool window does not tile input", &[h, w], &[window, stride]));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![numel]),
        }
    }
}

fn chw(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape(op, shape, &[0, 0, 0])),
    }
}

/// A validated backbone: input shape, ordered layers, and the per-layer
/// output shapes inferred from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetworkSpec", into = "RawNetworkSpec")]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawNetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawNetworkSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawNetworkSpec) -> Result<Self> {
        NetworkSpec::new(raw.input_shape, raw.layers)
    }
}

impl From<NetworkSpec> for RawNetworkSpec {
    fn from(s: NetworkSpec) -> Self {
        RawNetworkSpec {
            input_shape: s.input_shape,
            layers: s.layers,
        }
    }
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::arg(format!("invalid input shape {input_shape:?}")));
        }
        if !(input_shape.len() == 1 || input_shape.len() == 3) {
            return Err(Error::arg("input shape must be C×H×W or flat D"));
        }
        if layers.is_empty() {
            return Err(Error::arg("network has no layers"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::arg(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(cur.clone());
        }
        match cur.as_slice() {
            [c] if *c >= 2 => {}
            _ => {
                return Err(Error::arg(format!(
                    "final layer must produce a flat vector of >= 2 logits, got {cur:?}"
                )))
            }
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Per-sample input shape of layer `i`.
    pub fn input_shape_of(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn output_numel(&self, i: usize) -> usize {
        self.shapes[i].iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Layers that carry a representation of their own: everything except the
    /// final classifier, dropout, and flatten.
    pub fn hidden_layers(&self) -> Vec<usize> {
        (0..self.layers.len() - 1)
            .filter(|&i| !matches!(self.layers[i], LayerSpec::Dropout { .. } | LayerSpec::Flatten))
            .collect()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("network spec", e.to_string()))
    }
}
