mod common;

use common::*;
use hcl_core::nn::{self, Activation, HintonConfig, LayerSpec, LeNet5Config, Mode, NetworkSpec};
use hcl_core::{RngStream, StreamId, Tensor};

fn readout(inputs: usize) -> LayerSpec {
    LayerSpec::Dense {
        inputs,
        outputs: 3,
        activation: Activation::Identity,
    }
}

fn isolated(input: Vec<usize>, layer: LayerSpec) -> NetworkSpec {
    let out: usize = layer.output_shape(&input).unwrap().iter().product();
    NetworkSpec::new(input, vec![layer, readout(out)]).unwrap()
}

fn check_isolated(name: &str, input: Vec<usize>, layer: LayerSpec, mode: Mode) {
    let mut shape = vec![4];
    shape.extend(&input);
    let spec = isolated(input, layer);
    let model = model_with_heads(spec, &[0], vec![0.7], 3);
    let (x, y) = random_batch(&shape, 3, 21);
    let p = max_param_grad_error(&model, &x, &y, mode);
    let i = max_input_grad_error(&model, &x, &y, mode);
    assert!(p < FD_TOL, "{name}: param grad rel err {p:e}");
    assert!(i < FD_TOL, "{name}: input grad rel err {i:e}");
}

#[test]
fn dense_layers() {
    for act in [Activation::Relu, Activation::Tanh, Activation::Identity] {
        check_isolated(
            "dense",
            vec![5],
            LayerSpec::Dense { inputs: 5, outputs: 4, activation: act },
            Mode::Train,
        );
    }
}

#[test]
fn conv_layers() {
    for (stride, padding, act) in [(1, 0, Activation::Tanh), (2, 1, Activation::Relu), (1, 2, Activation::Identity)] {
        check_isolated(
            "conv2d",
            vec![2, 5, 5],
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: [3, 3],
                stride,
                padding,
                activation: act,
            },
            Mode::Train,
        );
    }
}

#[test]
fn pooling_layers() {
    check_isolated("max_pool", vec![2, 4, 4], LayerSpec::MaxPool { window: 2, stride: 2 }, Mode::Train);
    check_isolated("max_pool overlapping", vec![1, 5, 5], LayerSpec::MaxPool { window: 3, stride: 2 }, Mode::Train);
    check_isolated("avg_pool", vec![2, 4, 4], LayerSpec::AvgPool { window: 2, stride: 2 }, Mode::Train);
}

#[test]
fn dropout_and_flatten() {
    check_isolated("dropout", vec![6], LayerSpec::Dropout { rate: 0.4 }, Mode::Train);
    check_isolated("dropout eval", vec![6], LayerSpec::Dropout { rate: 0.4 }, Mode::Eval);
    check_isolated("flatten", vec![2, 2, 2], LayerSpec::Flatten, Mode::Train);
}

#[test]
fn reduced_lenet_with_all_heads() {
    let spec = LeNet5Config {
        input_shape: vec![1, 12, 12],
        conv_channels: [2, 3, 4],
        hidden: 5,
        kernel: 3,
        first_padding: 1,
        activation: Activation::Tanh,
    }
    .build(3)
    .unwrap();
    let heads = spec.hidden_layers();
    assert_eq!(heads.len(), 6);
    let lambdas = vec![0.3, 0.5, 0.2, 0.9, 0.4, 0.6];
    let model = model_with_heads(spec, &heads, lambdas, 4);
    let (x, y) = random_batch(&[3, 1, 12, 12], 3, 5);
    let err = max_param_grad_error(&model, &x, &y, Mode::Train);
    assert!(err < FD_TOL, "lenet rel err {err:e}");
}

#[test]
fn reduced_hinton_with_all_heads() {
    let spec = HintonConfig {
        conv_channels: [2, 3, 3],
        kernel: 3,
        dropout: 0.3,
        activation: Activation::Relu,
    }
    .build(3, &[2, 8, 8])
    .unwrap();
    let heads = spec.hidden_layers();
    assert_eq!(heads.len(), 6);
    let lambdas = vec![0.5; heads.len()];
    let model = model_with_heads(spec, &heads, lambdas, 6);
    let (x, y) = random_batch(&[3, 2, 8, 8], 3, 7);
    let err = max_param_grad_error(&model, &x, &y, Mode::Train);
    assert!(err < FD_TOL, "hinton rel err {err:e}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let spec = LeNet5Config {
        input_shape: vec![1, 12, 12],
        conv_channels: [2, 3, 4],
        hidden: 5,
        kernel: 3,
        first_padding: 1,
        activation: Activation::Relu,
    }
    .build(3)
    .unwrap();
    let model = model_with_heads(spec, &[], vec![], 1);
    let (x, _) = random_batch(&[2, 1, 12, 12], 3, 2);
    let mut rng = RngStream::new(0, StreamId::Dropout);
    let trace = nn::forward(model.spec(), &model.backbone.params, &x, Mode::Train, &mut rng).unwrap();
    let zero = Tensor::zeros(trace.logits().shape());
    let (g, dx) = nn::backward(model.spec(), &model.backbone.params, &trace, &zero, &[]).unwrap();
    assert!(g.tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(dx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn injections_superpose() {
    let spec = nn::mlp_spec(&[4], &[5, 4], 3, Activation::Tanh).unwrap();
    let model = model_with_heads(spec, &[], vec![], 8);
    let (x, y) = random_batch(&[3, 4], 3, 9);
    let (params, spec) = (&model.backbone.params, model.spec());
    let mut rng = RngStream::new(0, StreamId::Dropout);
    let trace = nn::forward(spec, params, &x, Mode::Eval, &mut rng).unwrap();
    let (_, dl) = nn::softmax_cross_entropy(trace.logits(), &y).unwrap();
    let (g1, _) = random_batch(&[3, 5], 2, 10);
    let (g2, _) = random_batch(&[3, 5], 2, 11);
    let both = nn::backward(spec, params, &trace, &dl, &[(0, g1.clone()), (0, g2.clone())]).unwrap().0;
    let a = nn::backward(spec, params, &trace, &dl, &[(0, g1)]).unwrap().0;
    let b = nn::backward(spec, params, &trace, &Tensor::zeros(dl.shape()), &[(0, g2.clone())]).unwrap().0;
    for ((s, u), v) in both.tensors().zip(a.tensors()).zip(b.tensors()) {
        for ((s, u), v) in s.data().iter().zip(u.data()).zip(v.data()) {
            assert!((s - (u + v)).abs() < 1e-12);
        }
    }
    let bad = Tensor::<f64>::zeros(&[3, 4]);
    assert!(nn::backward(spec, params, &trace, &dl, &[(0, bad)]).is_err());
}
