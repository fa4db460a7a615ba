//! Hidden classification layers.
//!
//! A head is an affine map from the flattened output of one hidden layer to
//! class logits. Training minimizes
//!
//! ```text
//! total = CE(final) + Σᵢ λᵢ · CE(headᵢ)
//! ```
//!
//! Head gradients flow into their own parameters and are injected into the
//! backbone at the layer they read from. Heads never feed later backbone
//! layers, and with every λᵢ = 0 the backbone sees exactly the vanilla
//! gradient.

use crate::error::{Error, Result};
use crate::nn::{self, ActivationTrace, LayerParams, Mode, NetworkSpec, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// A network without heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Element> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
}

impl<T: Element> Backbone<T> {
    pub fn new(spec: NetworkSpec, params: ParamSet<T>) -> Result<Self> {
        if !ParamSet::<T>::zeros(&spec).same_structure(&params) {
            return Err(Error::arg("parameters do not match the network spec"));
        }
        Ok(Self { spec, params })
    }

    /// Backbone with weights drawn from `rng` (the backbone-init stream).
    pub fn init(spec: NetworkSpec, rng: &mut RngStream) -> Result<Self> {
        let params = ParamSet::init(&spec, rng)?;
        Ok(Self { spec, params })
    }

    pub fn forward(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<ActivationTrace<T>> {
        nn::forward(&self.spec, &self.params, batch, mode, rng)
    }
}

/// One hidden classification layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T: Element> {
    pub layer_index: usize,
    /// `[D, C]` where `D` is the flattened size of the layer output.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Head<T> {
    pub fn logits(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let b = z.shape()[0];
        let (d, c) = (self.weight.shape()[0], self.weight.shape()[1]);
        if z.len() != b * d {
            return Err(Error::shape("head input", z.shape(), self.weight.shape()));
        }
        let mut out = Vec::with_capacity(b * c);
        for _ in 0..b {
            out.extend_from_slice(self.bias.data());
        }
        T::gemm(
            b,
            d,
            c,
            z.data(),
            (d as isize, 1),
            self.weight.data(),
            (c as isize, 1),
            T::one(),
            &mut out,
        );
        let out = Tensor::from_parts_unchecked(&[b, c], out)?;
        out.check_finite()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HclModel<T: Element> {
    pub backbone: Backbone<T>,
    heads: Vec<Head<T>>,
    lambdas: Vec<f64>,
}

/// Outputs of a forward pass through backbone and heads.
#[derive(Debug, Clone)]
pub struct HclForward<T: Element> {
    pub trace: ActivationTrace<T>,
    pub head_logits: Vec<Tensor<T>>,
}

impl<T: Element> HclForward<T> {
    pub fn final_logits(&self) -> &Tensor<T> {
        self.trace.logits()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HclLossBreakdown {
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub per_head_loss: Vec<f64>,
    pub per_head_accuracy: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HclGradients<T: Element> {
    pub backbone: ParamSet<T>,
    pub heads: Vec<LayerParams<T>>,
    pub loss: HclLossBreakdown,
}

impl<T: Element> HclGradients<T> {
    /// Same order as [`HclModel::tensors_mut`].
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.backbone
            .tensors()
            .chain(self.heads.iter().flat_map(|h| [&h.weight, &h.bias]))
    }
}

fn validate_lambdas(lambdas: &[f64], heads: usize) -> Result<()> {
    if lambdas.len() != heads {
        return Err(Error::arg(format!(
            "{} lambdas for {heads} heads",
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::arg(format!("lambda {l} is not a non-negative number")));
    }
    Ok(())
}

/// Attaches one linear head per index, drawing head weights only from
/// `rng` (the head-init stream). Biases start at zero; λ defaults to equal
/// weights summing to 1.
pub fn attach_heads<T: Element>(
    backbone: Backbone<T>,
    layer_indices: &[usize],
    num_classes: usize,
    rng: &mut RngStream,
) -> Result<HclModel<T>> {
    if num_classes < 2 {
        return Err(Error::arg("num_classes must be >= 2"));
    }
    let n = backbone.spec.len();
    let mut heads = Vec::with_capacity(layer_indices.len());
    let mut prev: Option<usize> = None;
    for &i in layer_indices {
        if i + 1 >= n {
            return Err(Error::arg(format!(
                "head index {i} must address a hidden layer (network has {n} layers, last is the classifier)"
            )));
        }
        if let Some(p) = prev {
            if i == p {
                return Err(Error::arg(format!("duplicate head index {i}")));
            }
            if i < p {
                return Err(Error::arg("head indices must be increasing"));
            }
        }
        prev = Some(i);
        let d = backbone.spec.output_numel(i);
        heads.push(Head {
            layer_index: i,
            weight: Tensor::init_uniform_fan(&[d, num_classes], d, num_classes, rng)?,
            bias: Tensor::zeros(&[num_classes]),
        });
    }
    let lambdas = vec![1.0 / heads.len().max(1) as f64; heads.len()];
    Ok(HclModel {
        backbone,
        heads,
        lambdas,
    })
}

impl<T: Element> HclModel<T> {
    pub fn vanilla(backbone: Backbone<T>) -> Self {
        Self {
            backbone,
            heads: Vec::new(),
            lambdas: Vec::new(),
        }
    }

    pub fn from_parts(backbone: Backbone<T>, heads: Vec<Head<T>>, lambdas: Vec<f64>) -> Result<Self> {
        validate_lambdas(&lambdas, heads.len())?;
        let c = backbone.spec.num_classes();
        let n = backbone.spec.len();
        for (k, h) in heads.iter().enumerate() {
            if h.layer_index + 1 >= n || (k > 0 && heads[k - 1].layer_index >= h.layer_index) {
                return Err(Error::arg("head indices must be increasing hidden-layer indices"));
            }
            let d = backbone.spec.output_numel(h.layer_index);
            if h.weight.shape() != [d, c] || h.bias.shape() != [c] {
                return Err(Error::shape("head parameters", h.weight.shape(), &[d, c]));
            }
        }
        Ok(Self {
            backbone,
            heads,
            lambdas,
        })
    }

    pub fn with_lambdas(mut self, lambdas: Vec<f64>) -> Result<Self> {
        validate_lambdas(&lambdas, self.heads.len())?;
        self.lambdas = lambdas;
        Ok(self)
    }

    pub fn heads(&self) -> &[Head<T>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head<T>] {
        &mut self.heads
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.backbone.spec
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.spec.num_classes()
    }

    pub fn is_vanilla_equivalent(&self) -> bool {
        self.lambdas.iter().all(|&l| l == 0.0)
    }

    /// Backbone parameters followed by each head's weight and bias.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.backbone.params.tensors_mut().chain(
            self.heads
                .iter_mut()
                .flat_map(|h| [&mut h.weight, &mut h.bias]),
        )
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.backbone
            .params
            .tensors()
            .chain(self.heads.iter().flat_map(|h| [&h.weight, &h.bias]))
    }

    /// One backbone pass; head logits are read off the trace.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, rng: &mut RngStream) -> Result<HclForward<T>> {
        let trace = self.backbone.forward(batch, mode, rng)?;
        let head_logits = self
            .heads
            .iter()
            .map(|h| h.logits(trace.layer(h.layer_index)))
            .collect::<Result<_>>()?;
        Ok(HclForward { trace, head_logits })
    }

    /// Gradients of the composite loss w.r.t. backbone and head parameters.
    pub fn backward(&self, fwd: &HclForward<T>, labels: &[usize]) -> Result<HclGradients<T>> {
        if fwd.head_logits.len() != self.heads.len() {
            return Err(Error::arg("forward pass does not match the head list"));
        }
        let (final_loss, dlogits) = nn::softmax_cross_entropy(fwd.final_logits(), labels)?;
        let mut per_head_loss = Vec::with_capacity(self.heads.len());
        let mut per_head_accuracy = Vec::with_capacity(self.heads.len());
        let mut head_grads = Vec::with_capacity(self.heads.len());
        let mut injected = Vec::new();
        let b = labels.len();

        for ((head, logits), &lambda) in self.heads.iter().zip(&fwd.head_logits).zip(&self.lambdas) {
            let (loss, g) = nn::softmax_cross_entropy(logits, labels)?;
            per_head_loss.push(loss);
            per_head_accuracy.push(nn::accuracy(logits, labels)?);
            let g = g.scale(T::from_f64(lambda))?;
            let z = fwd.trace.layer(head.layer_index);
            let (d, c) = (head.weight.shape()[0], head.weight.shape()[1]);

            let mut dw = vec![T::zero(); d * c];
            T::gemm(d, b, c, z.data(), (1, d as isize), g.data(), (c as isize, 1), T::zero(), &mut dw);
            let mut db = vec![T::zero(); c];
            for row in g.data().chunks_exact(c) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            head_grads.push(LayerParams {
                weight: Tensor::from_parts_unchecked(&[d, c], dw)?,
                bias: Tensor::from_parts_unchecked(&[c], db)?,
            });

            if lambda != 0.0 {
                let mut dz = vec![T::zero(); b * d];
                T::gemm(
                    b,
                    c,
                    d,
                    g.data(),
                    (c as isize, 1),
                    head.weight.data(),
                    (1, c as isize),
                    T::zero(),
                    &mut dz,
                );
                injected.push((head.layer_index, Tensor::from_parts_unchecked(z.shape(), dz)?));
            }
        }

        let (backbone, _) = nn::backward(
            &self.backbone.spec,
            &self.backbone.params,
            &fwd.trace,
            &dlogits,
            &injected,
        )?;
        let total = composite_total(final_loss, &per_head_loss, &self.lambdas);
        Ok(HclGradients {
            backbone,
            heads: head_grads,
            loss: HclLossBreakdown {
                final_loss,
                final_accuracy: nn::accuracy(fwd.final_logits(), labels)?,
                per_head_loss,
                per_head_accuracy,
                total,
            },
        })
    }

    /// Drops the heads, returning the backbone unchanged.
    pub fn strip_heads(self) -> Backbone<T> {
        self.backbone
    }
}

fn composite_total(final_loss: f64, per_head: &[f64], lambdas: &[f64]) -> f64 {
    final_loss
        + per_head
            .iter()
            .zip(lambdas)
            .map(|(l, w)| w * l)
            .sum::<f64>()
}

/// Composite loss over the final and head logits.
pub fn hcl_loss<T: Element>(
    head_logits: &[Tensor<T>],
    final_logits: &Tensor<T>,
    labels: &[usize],
    lambdas: &[f64],
) -> Result<HclLossBreakdown> {
    validate_lambdas(lambdas, head_logits.len())?;
    let (final_loss, _) = nn::softmax_cross_entropy(final_logits, labels)?;
    let mut per_head_loss = Vec::with_capacity(head_logits.len());
    let mut per_head_accuracy = Vec::with_capacity(head_logits.len());
    for logits in head_logits {
        per_head_loss.push(nn::softmax_cross_entropy(logits, labels)?.0);
        per_head_accuracy.push(nn::accuracy(logits, labels)?);
    }
    Ok(HclLossBreakdown {
        final_loss,
        final_accuracy: nn::accuracy(final_logits, labels)?,
        total: composite_total(final_loss, &per_head_loss, lambdas),
        per_head_loss,
        per_head_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_spec, Activation, LayerSpec};
    use crate::rng::StreamId;

    fn rng(id: StreamId) -> RngStream {
        RngStream::new(5, id)
    }

    fn small_model(indices: &[usize]) -> HclModel<f64> {
        let spec = mlp_spec(&[4], &[5, 3], 3, Activation::Tanh).unwrap();
        let bb = Backbone::init(spec, &mut rng(StreamId::BackboneInit)).unwrap();
        attach_heads(bb, indices, 3, &mut rng(StreamId::HeadInit)).unwrap()
    }

    fn batch() -> (Tensor<f64>, Vec<usize>) {
        let mut r = RngStream::new(9, StreamId::Shuffle);
        let x: Vec<f64> = (0..24).map(|_| r.normal()).collect();
        (Tensor::from_f64(&[6, 4], &x).unwrap(), vec![0, 1, 2, 2, 1, 0])
    }

    #[test]
    fn attach_validation() {
        let m = small_model(&[]);
        assert!(m.heads().is_empty());
        let spec = m.spec().clone();
        let bb = || Backbone::<f64>::init(spec.clone(), &mut rng(StreamId::BackboneInit)).unwrap();
        let mut h = rng(StreamId::HeadInit);
        assert!(attach_heads(bb(), &[2], 3, &mut h).is_err());
        assert!(attach_heads(bb(), &[0, 0], 3, &mut h).is_err());
        assert!(attach_heads(bb(), &[1, 0], 3, &mut h).is_err());
        let m = attach_heads(bb(), &[0, 1], 3, &mut h).unwrap();
        assert_eq!(m.lambdas(), &[0.5, 0.5]);
        assert_eq!(m.heads()[0].weight.shape(), &[5, 3]);
        assert!(m.clone().with_lambdas(vec![1.0]).is_err());
        assert!(m.with_lambdas(vec![1.0, -0.1]).is_err());
    }

    #[test]
    fn attaching_leaves_backbone_untouched() {
        let spec = mlp_spec(&[4], &[5], 3, Activation::Relu).unwrap();
        let bb = Backbone::<f32>::init(spec, &mut rng(StreamId::BackboneInit)).unwrap();
        let m = attach_heads(bb.clone(), &[0], 3, &mut rng(StreamId::HeadInit)).unwrap();
        assert_eq!(m.strip_heads(), bb);
    }

    #[test]
    fn identity_head_hand_value() {
        let spec = NetworkSpec::new(
            vec![2],
            vec![
                LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Identity },
                LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Identity },
            ],
        )
        .unwrap();
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let layer = |w: &Tensor<f64>| Some(LayerParams { weight: w.clone(), bias: Tensor::zeros(&[2]) });
        let params = ParamSet::from_layers(&spec, vec![layer(&eye), layer(&eye)]).unwrap();
        let bb = Backbone::new(spec, params).unwrap();
        let head = Head { layer_index: 0, weight: eye.clone(), bias: Tensor::zeros(&[2]) };
        let m = HclModel::from_parts(bb, vec![head], vec![1.0]).unwrap();
        let x = Tensor::from_f64(&[1, 2], &[3., 7.]).unwrap();
        let out = m.forward(&x, Mode::Eval, &mut rng(StreamId::Dropout)).unwrap();
        assert_eq!(out.head_logits[0].data(), &[3., 7.]);
    }

    #[test]
    fn zero_head_gives_ln_c() {
        let mut m = small_model(&[0, 1]);
        for h in m.heads_mut() {
            h.weight = Tensor::zeros(h.weight.shape());
        }
        let (x, y) = batch();
        let f = m.forward(&x, Mode::Eval, &mut rng(StreamId::Dropout)).unwrap();
        assert!(f.head_logits.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
        let loss = hcl_loss(&f.head_logits, f.final_logits(), &y, m.lambdas()).unwrap();
        for l in &loss.per_head_loss {
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn no_heads_matches_vanilla_forward() {
        let m = small_model(&[]);
        let (x, _) = batch();
        let f = m.forward(&x, Mode::Eval, &mut rng(StreamId::Dropout)).unwrap();
        let t = m.backbone.forward(&x, Mode::Eval, &mut rng(StreamId::Dropout)).unwrap();
        assert_eq!(f.final_logits().to_bytes(), t.logits().to_bytes());
        assert!(f.head_logits.is_empty());
    }

    #[test]
    fn loss_breakdown_rules() {
        let (x, y) = batch();
        let m = small_model(&[0, 1]).with_lambdas(vec![0.0, 0.0]).unwrap();
        let f = m.forward(&x, Mode::Eval, &mut rng(StreamId::Dropout)).unwrap();
        let l = hcl_loss(&f.head_logits, f.final_logits(), &y, m.lambdas()).unwrap();
        assert_eq!(l.total, l.final_loss);

        let fl = f.final_logits().clone();
        let l = hcl_loss(&[fl.clone(), fl.clone()], &fl, &y, &[0.5, 0.5]).unwrap();
        assert!((l.total - 2.0 * l.final_loss).abs() < 1e-12);
        assert!(hcl_loss(&[fl.clone(), fl.clone()], &fl, &y, &[0.5]).is_err());
        assert!(hcl_loss(std::slice::from_ref(&fl), &fl, &y, &[-1.0]).is_err());
    }

    #[test]
    fn zero_lambda_backbone_gradient_is_vanilla() {
        let (x, y) = batch();
        let m = small_model(&[0, 1]).with_lambdas(vec![0.0, 0.0]).unwrap();
        let f = m.forward(&x, Mode::Train, &mut rng(StreamId::Dropout)).unwrap();
        let g = m.backward(&f, &y).unwrap();
        let (_, dl) = nn::softmax_cross_entropy(f.final_logits(), &y).unwrap();
        let (van, _) = nn::backward(m.spec(), &m.backbone.params, &f.trace, &dl, &[]).unwrap();
        let a: Vec<_> = g.backbone.tensors().map(Tensor::to_bytes).collect();
        let b: Vec<_> = van.tensors().map(Tensor::to_bytes).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn doubling_lambda_doubles_head_gradients() {
        let (x, y) = batch();
        let base = small_model(&[0, 1]).with_lambdas(vec![0.3, 0.7]).unwrap();
        let twice = base.clone().with_lambdas(vec![0.6, 1.4]).unwrap();
        let zero = base.clone().with_lambdas(vec![0.0, 0.0]).unwrap();
        let f = base.forward(&x, Mode::Eval, &mut rng(StreamId::Dropout)).unwrap();
        let g1 = base.backward(&f, &y).unwrap();
        let g2 = twice.backward(&f, &y).unwrap();
        let g0 = zero.backward(&f, &y).unwrap();
        for (a, b) in g1.heads.iter().zip(&g2.heads) {
            for (u, v) in a.weight.data().iter().zip(b.weight.data()) {
                assert_eq!(2.0 * u, *v);
            }
        }
        // backbone: g(2λ) - g(0) == 2 (g(λ) - g(0))
        for ((t1, t2), t0) in g1.backbone.tensors().zip(g2.backbone.tensors()).zip(g0.backbone.tensors()) {
            for ((a, b), z) in t1.data().iter().zip(t2.data()).zip(t0.data()) {
                assert!(((b - z) - 2.0 * (a - z)).abs() < 1e-12);
            }
        }
    }
}
