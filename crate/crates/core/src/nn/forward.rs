use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom, PoolGeom};
use crate::nn::params::{LayerParams, ParamSet};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
enum LayerCache<T: Element> {
    None,
    ArgMax(Vec<usize>),
    Mask(Vec<T>),
}

/// Everything a forward pass produced: the input, each layer's
/// post-activation output, and what backward needs to route gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T: Element> {
    input: Tensor<T>,
    per_layer: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Element> ActivationTrace<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn per_layer(&self) -> &[Tensor<T>] {
        &self.per_layer
    }

    pub fn layer(&self, i: usize) -> &Tensor<T> {
        &self.per_layer[i]
    }

    pub fn logits(&self) -> &Tensor<T> {
        self.per_layer.last().expect("non-empty trace")
    }

    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn into_logits(mut self) -> Tensor<T> {
        self.per_layer.pop().expect("non-empty trace")
    }
}

fn batch_shape(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(per_sample);
    s
}

fn chw(shape: &[usize]) -> [usize; 3] {
    [shape[0], shape[1], shape[2]]
}

fn layer_params<T: Element>(params: &ParamSet<T>, i: usize) -> Result<&LayerParams<T>> {
    params
        .layer(i)
        .ok_or_else(|| Error::arg(format!("missing parameters for layer {i}")))
}

/// Runs the backbone on a `[B, ...input_shape]` batch. `rng` is consulted
/// only by dropout in training mode.
pub fn forward<T: Element>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<ActivationTrace<T>> {
    if batch.rank() != spec.input_shape().len() + 1 || &batch.shape()[1..] != spec.input_shape() {
        return Err(Error::shape(
            "forward input",
            batch.shape(),
            &batch_shape(0, spec.input_shape()),
        ));
    }
    if params.layers().len() != spec.len() {
        return Err(Error::arg("parameter set does not match the network spec"));
    }
    let b = batch.shape()[0];
    let mut per_layer: Vec<Tensor<T>> = Vec::with_capacity(spec.len());
    let mut caches = Vec::with_capacity(spec.len());

    for (i, layer) in spec.layers().iter().enumerate() {
        let x = per_layer.last().unwrap_or(batch).data();
        let in_shape = spec.input_shape_of(i);
        let out_shape = spec.output_shape(i);
        let mut cache = LayerCache::None;
        let mut out = match *layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                ..
            } => {
                let p = layer_params(params, i)?;
                let mut y = Vec::with_capacity(b * outputs);
                for _ in 0..b {
                    y.extend_from_slice(p.bias.data());
                }
                T::gemm(
                    b,
                    inputs,
                    outputs,
                    x,
                    (inputs as isize, 1),
                    p.weight.data(),
                    (outputs as isize, 1),
                    T::one(),
                    &mut y,
                );
                y
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = layer_params(params, i)?;
                let g = ConvGeom::new(chw(in_shape), out_channels, kernel, stride, padding)?;
                g.forward(b, x, p.weight.data(), p.bias.data())
            }
            LayerSpec::MaxPool { window, stride } => {
                let g = PoolGeom::new(chw(in_shape), window, stride)?;
                let (y, arg) = g.max_forward(b, x);
                cache = LayerCache::ArgMax(arg);
                y
            }
            LayerSpec::AvgPool { window, stride } => {
                PoolGeom::new(chw(in_shape), window, stride)?.avg_forward(b, x)
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && rate > 0.0 {
                    let keep = T::from_f64(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    cache = LayerCache::Mask(mask);
                    y
                } else {
                    x.to_vec()
                }
            }
            LayerSpec::Flatten => x.to_vec(),
        };
        kernels::activate(layer.activation(), &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: i });
        }
        per_layer.push(Tensor::from_parts_unchecked(&batch_shape(b, out_shape), out)?);
        caches.push(cache);
    }

    Ok(ActivationTrace {
        input: batch.clone(),
        per_layer,
        caches,
    })
}

/// Reverse-mode pass. `dlogits` is the gradient of the loss w.r.t. the final
/// layer output; each `(layer, grad)` in `injected` adds a gradient directly
/// at that layer's output (how auxiliary heads feed the backbone). Returns
/// parameter gradients and the gradient w.r.t. the input batch.
pub fn backward<T: Element>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    trace: &ActivationTrace<T>,
    dlogits: &Tensor<T>,
    injected: &[(usize, Tensor<T>)],
) -> Result<(ParamSet<T>, Tensor<T>)> {
    if trace.per_layer.len() != spec.len() {
        return Err(Error::arg("trace does not match the network spec"));
    }
    if dlogits.shape() != trace.logits().shape() {
        return Err(Error::shape("backward dlogits", dlogits.shape(), trace.logits().shape()));
    }
    for (i, g) in injected {
        let target = trace
            .per_layer
            .get(*i)
            .ok_or_else(|| Error::arg(format!("injection at layer {i} out of range")))?;
        if g.shape() != target.shape() {
            return Err(Error::shape("injected gradient", g.shape(), target.shape()));
        }
    }

    let b = trace.batch_size();
    let mut grads = params.zeros_like();
    let mut upstream: Vec<T> = dlogits.data().to_vec();

    for (i, layer) in spec.layers().iter().enumerate().rev() {
        for (_, g) in injected.iter().filter(|(j, _)| *j == i) {
            for (u, &v) in upstream.iter_mut().zip(g.data()) {
                *u = *u + v;
            }
        }
        let out = trace.per_layer[i].data();
        kernels::activate_backward(layer.activation(), out, &mut upstream);
        let x = if i == 0 {
            trace.input.data()
        } else {
            trace.per_layer[i - 1].data()
        };
        let in_shape = spec.input_shape_of(i);

        upstream = match (layer, &trace.caches[i]) {
            (
                &LayerSpec::Dense {
                    inputs, outputs, ..
                },
                _,
            ) => {
                let p = layer_params(params, i)?;
                let gp = grads.layer_mut(i).expect("structure mirrors params");
                // dW = xᵀ · dY
                T::gemm(
                    inputs,
                    b,
                    outputs,
                    x,
                    (1, inputs as isize),
                    &upstream,
                    (outputs as isize, 1),
                    T::zero(),
                    gp.weight.data_mut(),
                );
                let db = gp.bias.data_mut();
                for row in upstream.chunks_exact(outputs) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                // dX = dY · Wᵀ
                let mut dx = vec![T::zero(); b * inputs];
                T::gemm(
                    b,
                    outputs,
                    inputs,
                    &upstream,
                    (outputs as isize, 1),
                    p.weight.data(),
                    (1, outputs as isize),
                    T::zero(),
                    &mut dx,
                );
                dx
            }
            (
                &LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                _,
            ) => {
                let p = layer_params(params, i)?;
                let g = ConvGeom::new(chw(in_shape), out_channels, kernel, stride, padding)?;
                let (dw, db, dx) = g.backward(b, x, p.weight.data(), &upstream);
                let gp = grads.layer_mut(i).expect("structure mirrors params");
                gp.weight.data_mut().copy_from_slice(&dw);
                gp.bias.data_mut().copy_from_slice(&db);
                dx
            }
            (LayerSpec::MaxPool { .. }, LayerCache::ArgMax(arg)) => {
                kernels::max_backward(x.len(), arg, &upstream)
            }
            (&LayerSpec::AvgPool { window, stride }, _) => {
                PoolGeom::new(chw(in_shape), window, stride)?.avg_backward(b, &upstream)
            }
            (LayerSpec::Dropout { .. }, LayerCache::Mask(mask)) => {
                upstream.iter().zip(mask).map(|(&g, &m)| g * m).collect()
            }
            (LayerSpec::Dropout { .. }, LayerCache::None) | (LayerSpec::Flatten, _) => upstream,
            (LayerSpec::MaxPool { .. }, _) | (LayerSpec::Dropout { .. }, _) => {
                return Err(Error::arg(format!("trace cache missing for layer {i}")))
            }
        };
    }

    let dinput = Tensor::from_parts_unchecked(trace.input.shape(), upstream)?;
    Ok((grads, dinput))
}
