//! LoRA-adapted linear layers on a frozen base network.
//!
//! Every linear layer of [`ToyNetwork`] computes `W x + B (A x)` where `W` is a
//! frozen base weight and `B`, `A` are the trainable low-rank factors. Gradients
//! with respect to the factors are computed in closed form; the network family
//! is small enough that a general autodiff engine would only add noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// One linear layer `W + B A` with `W` frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    base_weight: DMatrix<f64>,
    factor_b: DMatrix<f64>,
    factor_a: DMatrix<f64>,
    module_index: usize,
}

impl LoraAdapter {
    pub fn new(
        base_weight: DMatrix<f64>,
        factor_b: DMatrix<f64>,
        factor_a: DMatrix<f64>,
        module_index: usize,
    ) -> Result<Self> {
        let (m, n) = base_weight.shape();
        let r = factor_b.ncols();
        if r == 0 {
            return Err(Error::Validation("LoRA rank must be at least 1".into()));
        }
        if factor_b.nrows() != m {
            return Err(Error::shape("LoraAdapter::B", format!("{m}x{r}"), format!("{}x{}", factor_b.nrows(), r)));
        }
        if factor_a.shape() != (r, n) {
            let (ar, an) = factor_a.shape();
            return Err(Error::shape("LoraAdapter::A", format!("{r}x{n}"), format!("{ar}x{an}")));
        }
        Ok(Self {
            base_weight,
            factor_b,
            factor_a,
            module_index,
        })
    }

    /// Standard LoRA start: `B = 0`, `A ~ U(-1/sqrt(n), 1/sqrt(n))`, so `BA = 0`.
    pub fn init<R: Rng + ?Sized>(
        base_weight: DMatrix<f64>,
        rank: usize,
        module_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, n) = base_weight.shape();
        let bound = 1.0 / (n as f64).sqrt();
        let factor_a = DMatrix::from_fn(rank, n, |_, _| rng.random_range(-bound..bound));
        Self::new(base_weight, DMatrix::zeros(m, rank), factor_a, module_index)
    }

    pub fn base_weight(&self) -> &DMatrix<f64> {
        &self.base_weight
    }

    pub fn factor_b(&self) -> &DMatrix<f64> {
        &self.factor_b
    }

    pub fn factor_a(&self) -> &DMatrix<f64> {
        &self.factor_a
    }

    /// Mutable access to the trainable factors. The base weight has no such accessor.
    pub fn factor_b_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.factor_b
    }

    pub fn factor_a_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.factor_a
    }

    pub fn rank(&self) -> usize {
        self.factor_b.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.base_weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.base_weight.ncols()
    }

    pub fn module_index(&self) -> usize {
        self.module_index
    }

    /// `W x + B (A x)` for every column of `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.base_weight * x + &self.factor_b * (&self.factor_a * x)
    }

    /// `(W + BA)^T d` without materializing `W + BA`.
    fn apply_transpose(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        self.base_weight.tr_mul(d) + self.factor_a.tr_mul(&self.factor_b.tr_mul(d))
    }
}

/// Dimensions of a [`ToyNetwork`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub class_count: usize,
    pub rank: usize,
    pub activation: Activation,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 64,
            hidden_layers: 2,
            class_count: 4,
            rank: 4,
            activation: Activation::Tanh,
        }
    }
}

impl NetworkShape {
    /// `(out, in)` of every layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((self.hidden_dim, fan_in));
            fan_in = self.hidden_dim;
        }
        dims.push((self.class_count, fan_in));
        dims
    }

    /// Length of the concatenated increment vector, `sum_m out_dim(m)`.
    pub fn direction_dim(&self) -> usize {
        self.layer_dims().iter().map(|(m, _)| m).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count < 2 || self.rank == 0 {
            return Err(Error::Validation(format!("degenerate network shape {self:?}")));
        }
        if self.hidden_layers > 0 && self.hidden_dim == 0 {
            return Err(Error::Validation("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Multi-layer perceptron with a LoRA adapter on every linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    adapters: Vec<LoraAdapter>,
    activation: Activation,
}

/// Per-layer record of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    pub inputs: Vec<DMatrix<f64>>,
    /// `W x + B A x` of each layer, before the nonlinearity.
    pub pre_activations: Vec<DMatrix<f64>>,
}

/// Exact loss gradients with respect to every LoRA factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grad_b: Vec<DMatrix<f64>>,
    pub grad_a: Vec<DMatrix<f64>>,
    /// Batch-averaged input of each adapter.
    pub module_inputs: Vec<DVector<f64>>,
}

impl GradientBundle {
    /// All factor gradients flattened in adapter order (`B` then `A` per adapter).
    pub fn flatten(&self) -> DVector<f64> {
        let len: usize = self
            .grad_b
            .iter()
            .chain(&self.grad_a)
            .map(|g| g.len())
            .sum();
        let mut out = Vec::with_capacity(len);
        for (gb, ga) in self.grad_b.iter().zip(&self.grad_a) {
            out.extend(gb.iter());
            out.extend(ga.iter());
        }
        DVector::from_vec(out)
    }
}

impl ToyNetwork {
    pub fn from_adapters(adapters: Vec<LoraAdapter>, activation: Activation) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for (i, pair) in adapters.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "ToyNetwork layer chain",
                    format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        for (i, a) in adapters.iter().enumerate() {
            if a.module_index != i {
                return Err(Error::Validation(format!(
                    "adapter at position {i} carries module index {}",
                    a.module_index
                )));
            }
        }
        Ok(Self {
            adapters,
            activation,
        })
    }

    /// Frozen Gaussian base (scaled by `1/sqrt(fan_in)`) plus fresh LoRA factors.
    pub fn init(shape: &NetworkShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = Vec::new();
        for (idx, (m, n)) in shape.layer_dims().into_iter().enumerate() {
            let scale = 1.0 / (n as f64).sqrt();
            let w = DMatrix::from_fn(m, n, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            adapters.push(LoraAdapter::init(w, shape.rank, idx, &mut rng)?);
        }
        Self::from_adapters(adapters, shape.activation)
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn module_count(&self) -> usize {
        self.adapters.len()
    }

    pub fn input_dim(&self) -> usize {
        self.adapters[0].in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.adapters[self.adapters.len() - 1].out_dim()
    }

    /// Output dimension of every module, i.e. the slice lengths of an increment vector.
    pub fn module_out_dims(&self) -> Vec<usize> {
        self.adapters.iter().map(LoraAdapter::out_dim).collect()
    }

    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if batch.nrows() != self.input_dim() {
            return Err(Error::shape("forward batch rows", self.input_dim(), batch.nrows()));
        }
        if batch.ncols() == 0 {
            return Err(Error::Validation("forward called with an empty batch".into()));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("batch contains non-finite values".into()));
        }
        let last = self.adapters.len() - 1;
        let mut inputs = Vec::with_capacity(self.adapters.len());
        let mut pre_activations = Vec::with_capacity(self.adapters.len());
        let mut x = batch.clone();
        for (i, adapter) in self.adapters.iter().enumerate() {
            let z = adapter.apply(&x);
            let next = if i == last {
                z.clone()
            } else {
                z.map(|v| self.activation.apply(v))
            };
            inputs.push(x);
            pre_activations.push(z);
            x = next;
        }
        Ok((x, ForwardCache {
            inputs,
            pre_activations,
        }))
    }

    /// Mean softmax cross-entropy and its exact gradients with respect to every factor.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        let m_count = self.adapters.len();
        if cache.inputs.len() != m_count || cache.pre_activations.len() != m_count {
            return Err(Error::shape("backward cache layers", m_count, cache.inputs.len()));
        }
        let logits = &cache.pre_activations[m_count - 1];
        let n = logits.ncols();
        if labels.len() != n {
            return Err(Error::shape("backward labels", n, labels.len()));
        }
        let classes = logits.nrows();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {classes})"
            )));
        }

        let (loss, mut delta) = softmax_cross_entropy(logits, labels);

        let mut grad_b = vec![DMatrix::zeros(0, 0); m_count];
        let mut grad_a = vec![DMatrix::zeros(0, 0); m_count];
        let mut module_inputs = vec![DVector::zeros(0); m_count];
        for i in (0..m_count).rev() {
            let adapter = &self.adapters[i];
            let x = &cache.inputs[i];
            // dL/d(W+BA) = delta x^T, chained through the factorization.
            let ax = &adapter.factor_a * x;
            grad_b[i] = &delta * ax.transpose();
            grad_a[i] = adapter.factor_b.tr_mul(&delta) * x.transpose();
            module_inputs[i] = x.column_mean();
            if i > 0 {
                let upstream = adapter.apply_transpose(&delta);
                let act = self.activation;
                let prev_out = &cache.inputs[i];
                delta = upstream.zip_map(prev_out, |g, a| g * act.derivative_from_output(a));
            }
        }
        Ok((loss, GradientBundle {
            grad_b,
            grad_a,
            module_inputs,
        }))
    }

    /// Forward pass followed by [`ToyNetwork::backward`].
    pub fn loss_and_grads(&self, batch: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        let (_, cache) = self.forward(batch)?;
        self.backward(&cache, labels)
    }

    /// Loss only; used by finite-difference checks and evaluation.
    pub fn loss(&self, batch: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward(batch)?;
        Ok(softmax_cross_entropy(&logits, labels).0)
    }

    /// Plain SGD step on the factors: `B -= lr * dB`, `A -= lr * dA`.
    pub fn apply_update(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        let m_count = self.adapters.len();
        if grads.grad_b.len() != m_count || grads.grad_a.len() != m_count {
            return Err(Error::shape("apply_update modules", m_count, grads.grad_b.len()));
        }
        for (adapter, (gb, ga)) in self.adapters.iter().zip(grads.grad_b.iter().zip(&grads.grad_a)) {
            if gb.shape() != adapter.factor_b.shape() {
                return Err(Error::shape("apply_update grad_B", format!("{:?}", adapter.factor_b.shape()), format!("{:?}", gb.shape())));
            }
            if ga.shape() != adapter.factor_a.shape() {
                return Err(Error::shape("apply_update grad_A", format!("{:?}", adapter.factor_a.shape()), format!("{:?}", ga.shape())));
            }
            if gb.iter().chain(ga.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in module {}",
                    adapter.module_index
                )));
            }
        }
        for (adapter, (gb, ga)) in self.adapters.iter_mut().zip(grads.grad_b.iter().zip(&grads.grad_a)) {
            adapter.factor_b -= gb * lr;
            adapter.factor_a -= ga * lr;
        }
        Ok(())
    }

    /// Predicted class (argmax logit) for every column of `batch`.
    pub fn predict(&self, batch: &DMatrix<f64>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(batch)?;
        Ok(logits.column_iter().map(|c| c.argmax().0).collect())
    }

    pub fn accuracy(&self, batch: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        if labels.len() != batch.ncols() {
            return Err(Error::shape("accuracy labels", batch.ncols(), labels.len()));
        }
        let predictions = self.predict(batch)?;
        let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Mean cross-entropy and `dL/dlogits = (softmax - onehot) / N`.
fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.ncols();
    let mut grad = DMatrix::zeros(logits.nrows(), n);
    let mut loss = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        let col = logits.column(j);
        let max = col.max();
        let sum: f64 = col.iter().map(|z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - col[label];
        for k in 0..logits.nrows() {
            let p = (col[k] - log_sum).exp();
            grad[(k, j)] = (p - if k == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net(w: f64, b: f64, a: f64) -> ToyNetwork {
        let adapter = LoraAdapter::new(
            DMatrix::from_element(1, 1, w),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, a),
            0,
        )
        .unwrap();
        ToyNetwork::from_adapters(vec![adapter], Activation::Identity).unwrap()
    }

    #[test]
    fn scalar_forward_matches_hand_value() {
        let net = scalar_net(1.0, 2.0, 3.0);
        let (logits, _) = net.forward(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(logits[(0, 0)], 7.0);
    }

    #[test]
    fn zero_b_reproduces_base_network() {
        let net = ToyNetwork::init(&NetworkShape::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = DMatrix::from_fn(32, 5, |_, _| rng.random_range(-1.0..1.0));
        let (logits, _) = net.forward(&batch).unwrap();
        let mut x = batch.clone();
        for (i, ad) in net.adapters().iter().enumerate() {
            x = ad.base_weight() * &x;
            if i + 1 < net.module_count() {
                x = x.map(f64::tanh);
            }
        }
        assert_eq!(logits, x);
    }

    #[test]
    fn identical_columns_give_identical_logits() {
        let net = ToyNetwork::init(&NetworkShape::default(), 1).unwrap();
        let col = DVector::from_fn(32, |i, _| (i as f64 * 0.37).sin());
        let batch = DMatrix::from_columns(&[col.clone(), col]);
        let (logits, _) = net.forward(&batch).unwrap();
        assert_eq!(logits.column(0), logits.column(1));
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let net = ToyNetwork::init(&NetworkShape::default(), 1).unwrap();
        let err = net.forward(&DMatrix::zeros(31, 2)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let shape = NetworkShape::default();
        let mut net = ToyNetwork::init(&shape, 5).unwrap();
        // Zero the output layer so every logit is zero.
        let out = net.adapters_mut().last_mut().unwrap();
        let (m, n) = out.base_weight().shape();
        *out = LoraAdapter::new(DMatrix::zeros(m, n), DMatrix::zeros(m, shape.rank), out.factor_a().clone(), 2).unwrap();
        let batch = DMatrix::from_element(32, 3, 0.5);
        let loss = net.loss(&batch, &[0, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let net = ToyNetwork::init(&NetworkShape::default(), 1).unwrap();
        let (_, cache) = net.forward(&DMatrix::zeros(32, 1)).unwrap();
        assert!(matches!(net.backward(&cache, &[4]), Err(Error::Validation(_))));
    }

    #[test]
    fn hand_computed_rank_one_linear_gradient() {
        // 2 inputs, 2 classes, identity activation, single layer.
        let w = DMatrix::from_row_slice(2, 2, &[0.5, -0.25, 0.1, 0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.2, -0.4]);
        let a = DMatrix::from_row_slice(1, 2, &[0.7, 0.6]);
        let adapter = LoraAdapter::new(w.clone(), b.clone(), a.clone(), 0).unwrap();
        let net = ToyNetwork::from_adapters(vec![adapter], Activation::Identity).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[1.0, -2.0]);
        let (_, grads) = net.loss_and_grads(&x, &[1]).unwrap();

        // By hand: z = (W + b a) x, e = softmax(z) - onehot(1), dB = e (a x), dA = (b^T e) x^T.
        let ax: f64 = 0.7 * 1.0 + 0.6 * -2.0;
        let z0 = 0.5 * 1.0 - 0.25 * -2.0 + 0.2 * ax;
        let z1 = 0.1 * 1.0 + 0.3 * -2.0 - 0.4 * ax;
        let p0 = 1.0 / (1.0 + (z1 - z0).exp());
        let p1 = 1.0 - p0;
        let e = [p0, p1 - 1.0];
        assert!((grads.grad_b[0][(0, 0)] - e[0] * ax).abs() < 1e-14);
        assert!((grads.grad_b[0][(1, 0)] - e[1] * ax).abs() < 1e-14);
        let bte = 0.2 * e[0] - 0.4 * e[1];
        assert!((grads.grad_a[0][(0, 0)] - bte * 1.0).abs() < 1e-14);
        assert!((grads.grad_a[0][(0, 1)] - bte * -2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_leaves_network_unchanged() {
        let mut net = ToyNetwork::init(&NetworkShape::default(), 2).unwrap();
        let before = net.clone();
        let batch = DMatrix::from_element(32, 4, 0.1);
        let (_, grads) = net.loss_and_grads(&batch, &[0, 1, 2, 3]).unwrap();
        net.apply_update(&grads, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn scalar_update_arithmetic() {
        let mut net = scalar_net(1.0, 1.0, 0.0);
        let grads = GradientBundle {
            grad_b: vec![DMatrix::from_element(1, 1, 0.5)],
            grad_a: vec![DMatrix::zeros(1, 1)],
            module_inputs: vec![DVector::zeros(1)],
        };
        net.apply_update(&grads, 0.1).unwrap();
        assert!((net.adapters()[0].factor_b()[(0, 0)] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn exact_cancellation_zeroes_b() {
        let mut net = scalar_net(1.0, 0.8, 0.3);
        let lr = 0.25;
        let grads = GradientBundle {
            grad_b: vec![net.adapters()[0].factor_b() / lr],
            grad_a: vec![DMatrix::zeros(1, 1)],
            module_inputs: vec![DVector::zeros(1)],
        };
        net.apply_update(&grads, lr).unwrap();
        assert_eq!(net.adapters()[0].factor_b()[(0, 0)], 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut net = ToyNetwork::init(&NetworkShape::default(), 2).unwrap();
        let before = net.clone();
        let batch = DMatrix::from_element(32, 2, 0.3);
        let (_, mut grads) = net.loss_and_grads(&batch, &[0, 1]).unwrap();
        grads.grad_a[1][(0, 0)] = f64::NAN;
        assert!(matches!(net.apply_update(&grads, 0.1), Err(Error::Divergence(_))));
        assert_eq!(net, before);
    }
}
