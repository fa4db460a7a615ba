#![allow(dead_code)]

use hcl_core::hcl::{attach_heads, hcl_loss, Backbone, HclModel};
use hcl_core::nn::{Mode, NetworkSpec};
use hcl_core::{RngStream, StreamId, Tensor};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn random_batch(shape: &[usize], classes: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = RngStream::new(seed, StreamId::Subsample);
    let n: usize = shape.iter().product();
    let x: Vec<f64> = (0..n).map(|_| r.normal()).collect();
    let y = (0..shape[0]).map(|_| r.below(classes as u64) as usize).collect();
    (Tensor::from_f64(shape, &x).unwrap(), y)
}

pub fn model_with_heads(spec: NetworkSpec, heads: &[usize], lambdas: Vec<f64>, seed: u64) -> HclModel<f64> {
    let c = spec.num_classes();
    let bb = Backbone::init(spec, &mut RngStream::new(seed, StreamId::BackboneInit)).unwrap();
    attach_heads(bb, heads, c, &mut RngStream::new(seed, StreamId::HeadInit))
        .unwrap()
        .with_lambdas(lambdas)
        .unwrap()
}

fn total_loss(model: &HclModel<f64>, x: &Tensor<f64>, y: &[usize], mode: Mode, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, StreamId::Dropout);
    let f = model.forward(x, mode, &mut rng).unwrap();
    hcl_loss(&f.head_logits, f.final_logits(), y, model.lambdas())
        .unwrap()
        .total
}

/// Largest relative error between analytic gradients and central finite
/// differences of the composite loss, over every backbone and head parameter.
#[allow(clippy::needless_range_loop)]
pub fn max_param_grad_error(model: &HclModel<f64>, x: &Tensor<f64>, y: &[usize], mode: Mode) -> f64 {
    let seed = 77;
    let mut rng = RngStream::new(seed, StreamId::Dropout);
    let f = model.forward(x, mode, &mut rng).unwrap();
    let grads = model.backward(&f, y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().map(|t| t.to_f64_vec()).collect();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let n_tensors = analytic.len();
    for ti in 0..n_tensors {
        let len = analytic[ti].len();
        for k in 0..len {
            let orig = probe.tensors().nth(ti).unwrap().data()[k];
            probe.tensors_mut().nth(ti).unwrap().data_mut()[k] = orig + FD_EPS;
            let up = total_loss(&probe, x, y, mode, seed);
            probe.tensors_mut().nth(ti).unwrap().data_mut()[k] = orig - FD_EPS;
            let down = total_loss(&probe, x, y, mode, seed);
            probe.tensors_mut().nth(ti).unwrap().data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[ti][k], fd));
        }
    }
    worst
}

/// Same check for the gradient w.r.t. the input batch (vanilla loss).
pub fn max_input_grad_error(model: &HclModel<f64>, x: &Tensor<f64>, y: &[usize], mode: Mode) -> f64 {
    let seed = 78;
    let spec = model.spec();
    let params = &model.backbone.params;
    let mut rng = RngStream::new(seed, StreamId::Dropout);
    let trace = hcl_core::nn::forward(spec, params, x, mode, &mut rng).unwrap();
    let (_, dl) = hcl_core::nn::softmax_cross_entropy(trace.logits(), y).unwrap();
    let (_, dx) = hcl_core::nn::backward(spec, params, &trace, &dl, &[]).unwrap();
    let loss = |x: &Tensor<f64>| {
        let mut rng = RngStream::new(seed, StreamId::Dropout);
        let t = hcl_core::nn::forward(spec, params, x, mode, &mut rng).unwrap();
        hcl_core::nn::softmax_cross_entropy(t.logits(), y).unwrap().0
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + FD_EPS;
        let up = loss(&probe);
        probe.data_mut()[k] = orig - FD_EPS;
        let down = loss(&probe);
        probe.data_mut()[k] = orig;
        worst = worst.max(rel_err(dx.data()[k], (up - down) / (2.0 * FD_EPS)));
    }
    worst
}
