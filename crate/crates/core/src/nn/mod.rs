//! Backbone layers, forward/backward passes, and prebuilt architectures.

mod builders;
mod forward;
mod kernels;
mod loss;
mod params;
mod spec;

pub use builders::{hinton_spec, lenet5_spec, mlp_spec, HintonConfig, LeNet5Config};
pub use forward::{backward, forward, ActivationTrace, Mode};
pub use kernels::{conv2d_forward, maxpool_forward};
pub use loss::{accuracy, argmax_rows, softmax, softmax_cross_entropy};
pub use params::{LayerParams, ParamSet};
pub use spec::{Activation, LayerSpec, NetworkSpec};
