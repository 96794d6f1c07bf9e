//! Dense layers, multi-layer perceptrons, reverse-mode gradients and Adam.
//!
//! Networks operate on batches stored as [`Matrix`] values with one sample
//! per row. A forward pass that will be differentiated returns a
//! [`ForwardCache`]; [`Mlp::backward`] consumes it together with the upstream
//! gradient of a scalar loss with respect to the network output.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    // ReLU subgradient at exactly 0 is 0.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// A fully connected layer `act(W x + b)` with `W` stored out × in.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            Error::check_dim("layer bias", weights.rows(), b.len())?;
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = math::sqrt(6.0 / (in_dim + out_dim) as f64);
        let weights = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-limit..=limit));
        DenseLayer {
            weights,
            bias: with_bias.then(|| vec![0.0; out_dim]),
            activation,
        }
    }

    /// A bias-free linear map, as used for the latent operator and control matrix.
    pub fn linear(weights: Matrix) -> Self {
        DenseLayer {
            weights,
            bias: None,
            activation: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// True for bias-free identity-activation layers.
    pub fn is_linear(&self) -> bool {
        self.bias.is_none() && self.activation == Activation::Identity
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weights.matvec(x)?;
        if let Some(b) = &self.bias {
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += bi;
            }
        }
        for yi in &mut y {
            *yi = self.activation.apply(*yi);
        }
        Ok(y)
    }

    fn pre_activation_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = Matrix::zeros(x.rows(), self.out_dim());
        gemm(1.0, MatRef::new(x), MatRef::new(&self.weights).t(), 0.0, &mut pre)?;
        if let Some(b) = &self.bias {
            for r in 0..pre.rows() {
                for (p, bi) in pre.row_mut(r).iter_mut().zip(b) {
                    *p += bi;
                }
            }
        }
        Ok(pre)
    }

    fn activate(&self, pre: &Matrix) -> Matrix {
        let mut out = pre.clone();
        if self.activation != Activation::Identity {
            for v in out.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
        }
        out
    }
}

/// Gradient of a scalar loss with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad {
            weights: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: layer.bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Intermediates of a batched forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl ForwardCache {
    /// Smallest |pre-activation| over every ReLU unit and sample in the batch.
    /// Finite-difference checks are only meaningful away from ReLU kinks.
    pub fn min_abs_relu_preactivation(&self, net: &Mlp) -> f64 {
        net.layers
            .iter()
            .zip(&self.pre)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, p)| p.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrad {
            layers: net.layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::LayerShape {
                    layer: i + 1,
                    expected: pair[0].out_dim(),
                    found: pair[1].in_dim(),
                });
            }
        }
        Ok(Mlp { layers })
    }

    /// Glorot-initialized network with the given widths (input first), `hidden`
    /// activation on every layer but the last, `output` on the last.
    pub fn glorot<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer widths need at least two positive entries".into(),
            ));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::glorot(w[0], w[1], true, act, rng)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths including input and output, e.g. `[3, 128, 256, 12]`.
    pub fn widths(&self) -> Vec<usize> {
        core::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if h.len() != layer.in_dim() {
                return Err(Error::LayerShape {
                    layer: i,
                    expected: layer.in_dim(),
                    found: h.len(),
                });
            }
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = layer.pre_activation_batch(&h)?;
            h = layer.activate(&pre);
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_all = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = layer.pre_activation_batch(&h)?;
            let out = layer.activate(&pre);
            inputs.push(core::mem::replace(&mut h, out));
            pre_all.push(pre);
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre: pre_all,
            },
        ))
    }

    /// Reverse-mode pass. `upstream` is dL/d(output), one row per sample.
    /// Returns the parameter gradients and dL/d(input).
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(MlpGrad, Matrix)> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let batch = cache.inputs[0].rows();
        if upstream.rows() != batch || upstream.cols() != self.output_dim() {
            return Err(Error::StaleCache);
        }
        for (layer, (inp, pre)) in self.layers.iter().zip(cache.inputs.iter().zip(&cache.pre)) {
            if inp.cols() != layer.in_dim() || pre.cols() != layer.out_dim() || inp.rows() != batch {
                return Err(Error::StaleCache);
            }
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Identity {
                for (d, p) in delta.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                    *d *= layer.activation.derivative(*p);
                }
            }
            let mut gw = Matrix::zeros(layer.out_dim(), layer.in_dim());
            gemm(1.0, MatRef::new(&delta).t(), MatRef::new(&cache.inputs[l]), 0.0, &mut gw)?;
            let gb = layer.bias.as_ref().map(|_| {
                let mut gb = vec![0.0; layer.out_dim()];
                for r in 0..delta.rows() {
                    for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                        *g += d;
                    }
                }
                gb
            });
            let mut next = Matrix::zeros(batch, layer.in_dim());
            gemm(1.0, MatRef::new(&delta), MatRef::new(&layer.weights), 0.0, &mut next)?;
            grads.push(LayerGrad {
                weights: gw,
                bias: gb,
            });
            delta = next;
        }
        grads.reverse();
        Ok((MlpGrad { layers: grads }, delta))
    }

    /// Sum of squared weight-matrix entries (biases excluded).
    pub fn weight_sq_sum(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.frobenius_sq()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        Ok(())
    }
}

/// Uniform access to trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Parameters for DenseLayer {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![self.weights.as_slice()];
        if let Some(b) = &self.bias {
            v.push(b.as_slice());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.weights.as_mut_slice()];
        if let Some(b) = &mut self.bias {
            v.push(b.as_mut_slice());
        }
        v
    }
}

impl Parameters for LayerGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![self.weights.as_slice()];
        if let Some(b) = &self.bias {
            v.push(b.as_slice());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.weights.as_mut_slice()];
        if let Some(b) = &mut self.bias {
            v.push(b.as_mut_slice());
        }
        v
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

impl Parameters for MlpGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = usize>) -> Self {
        let shapes: Vec<usize> = shapes.into_iter().collect();
        AdamState {
            config,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    pub fn for_params<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        Self::new(config, params.tensors().iter().map(|t| t.len()))
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. Gradients are validated before any
    /// parameter changes, so a rejected step leaves everything untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        Error::check_dim("adam tensor count", self.first_moment.len(), params.len())?;
        Error::check_dim("adam gradient count", self.first_moment.len(), grads.len())?;
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            Error::check_dim("adam parameter tensor", self.first_moment[t].len(), p.len())?;
            Error::check_dim("adam gradient tensor", p.len(), g.len())?;
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: t, index });
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[t];
            let v = &mut self.second_moment[t];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (math::sqrt(v_hat) + epsilon);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients near zero
    /// are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many evenly strided entries per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// (tensor, index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Compares `analytic` (one vector per tensor of `model`) with central
/// differences of `loss` over the model's parameters.
pub fn finite_diff_check<P, L>(model: &P, mut loss: L, analytic: &[Vec<f64>], opts: &FdOptions) -> FdReport
where
    P: Parameters + Clone,
    L: FnMut(&P) -> f64,
{
    let mut probe = model.clone();
    let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    if analytic.len() != lens.len() || analytic.iter().zip(&lens).any(|(a, &n)| a.len() != n) {
        report.pass = false;
        report.max_rel_error = f64::INFINITY;
        return report;
    }
    for (t, &len) in lens.iter().enumerate() {
        let stride = match opts.max_per_tensor {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + opts.step;
            let plus = loss(&probe);
            probe.tensors_mut()[t][i] = orig - opts.step;
            let minus = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[t][i];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = (t, i);
            }
        }
    }
    report.pass = report.max_rel_error < opts.tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hand_net() -> Mlp {
        // 2 -> 2 (ReLU) -> 1 (Identity)
        let l0 = DenseLayer::new(
            Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap(),
            Some(vec![0.5, 0.0]),
            Activation::Relu,
        )
        .unwrap();
        let l1 = DenseLayer::new(
            Matrix::from_rows(&[[2.0, -3.0]]).unwrap(),
            Some(vec![0.25]),
            Activation::Identity,
        )
        .unwrap();
        Mlp::new(vec![l0, l1]).unwrap()
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let l = DenseLayer::new(Matrix::zeros(4, 3), Some(vec![0.0; 4]), Activation::Relu).unwrap();
        let net = Mlp::new(vec![l]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 7.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let net = Mlp::new(vec![DenseLayer::linear(Matrix::identity(3))]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_layer_relu_hand_evaluation() {
        // x = (1, -1)
        // h_pre = (1*1 + 2*(-1) + 0.5, -1*1 + 0.5*(-1) + 0) = (-0.5, -1.5) -> ReLU (0, 0)
        // y = 2*0 - 3*0 + 0.25 = 0.25
        let y = hand_net().forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![0.25]);
        // x = (1, 1): h_pre = (3.5, -0.5) -> (3.5, 0); y = 7.0 + 0.25
        let y = hand_net().forward(&[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![7.25]);
    }

    #[test]
    fn forward_reports_offending_layer() {
        let net = hand_net();
        match net.forward(&[1.0]) {
            Err(Error::LayerShape { layer: 0, expected: 2, found: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bad = Mlp::new(vec![
            DenseLayer::linear(Matrix::zeros(3, 2)),
            DenseLayer::linear(Matrix::zeros(1, 4)),
        ]);
        assert!(matches!(bad, Err(Error::LayerShape { layer: 1, .. })));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let w = Matrix::from_rows(&[[0.3, -0.2, 0.1], [1.0, 0.0, -1.0]]).unwrap();
        let net = Mlp::new(vec![DenseLayer::linear(w.clone())]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.5, -2.0]]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (grad, gin) = net.backward(&cache, &g).unwrap();
        let expect = Matrix::from_rows(&[[0.5, 1.0, 1.5], [-2.0, -4.0, -6.0]]).unwrap();
        assert_eq!(grad.layers[0].weights, expect);
        assert!(grad.layers[0].bias.is_none());
        assert_eq!(gin.row(0), w.transpose_matvec(&[0.5, -2.0]).unwrap().as_slice());
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let net = hand_net();
        // both hidden units negative at x = (1, -1)
        let x = Matrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (grad, gin) = net.backward(&cache, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert!(grad.layers[0].weights.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(grad.layers[0].bias.as_deref(), Some(&[0.0, 0.0][..]));
        assert_eq!(gin.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let net = hand_net();
        let x = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let upstream = Matrix::zeros(1, 1);
        assert!(matches!(net.backward(&cache, &upstream), Err(Error::StaleCache)));
        let other = Mlp::glorot(&[2, 5, 1], Activation::Relu, Activation::Identity, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(other.backward(&cache, &Matrix::zeros(2, 1)), Err(Error::StaleCache)));
    }

    fn sum_output_loss(net: &Mlp, x: &Matrix, w: &Matrix) -> f64 {
        let y = net.forward_batch(x).unwrap();
        y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            + 0.5 * y.frobenius_sq()
    }

    #[test]
    fn random_three_layer_gradients_match_finite_differences() {
        // First seed whose ReLU pre-activations all clear the FD step.
        let (net, x, w, y, cache) = (0..100u64)
            .find_map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let net = Mlp::glorot(&[4, 16, 8, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
                let x = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
                let w = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
                let (y, cache) = net.forward_cached(&x).unwrap();
                (cache.min_abs_relu_preactivation(&net) > 1e-3).then_some((net, x, w, y, cache))
            })
            .unwrap();
        let mut up = w.clone();
        for (u, yi) in up.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *u += yi;
        }
        let (grad, _) = net.backward(&cache, &up).unwrap();
        let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
        let rep = finite_diff_check(&net, |n| sum_output_loss(n, &x, &w), &analytic, &FdOptions::default());
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.checked, net.num_params());
    }

    #[test]
    fn fd_check_linear_quadratic_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(vec![DenseLayer::glorot(3, 2, true, Activation::Identity, &mut rng)]).unwrap();
        let x = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let loss = |n: &Mlp| 0.5 * n.forward_batch(&x).unwrap().frobenius_sq();
        let (y, cache) = net.forward_cached(&x).unwrap();
        let (grad, _) = net.backward(&cache, &y).unwrap();
        let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
        let rep = finite_diff_check(&net, loss, &analytic, &FdOptions::default());
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");

        // negative control
        let mut corrupted = analytic.clone();
        corrupted[0][2] += 0.1;
        let rep = finite_diff_check(&net, loss, &corrupted, &FdOptions::default());
        assert!(!rep.pass);
        assert_eq!(rep.worst, (0, 2));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(AdamConfig::default(), [3]);
        adam_step(&mut [&mut p], &[&[0.0; 3]], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.7, -250.0] {
            let mut p = vec![0.5];
            let mut st = AdamState::new(AdamConfig::default(), [1]);
            st.step(&mut [&mut p], &[&[g]]).unwrap();
            let moved = 0.5 - p[0];
            assert!((moved.abs() - 1e-3).abs() < 1e-8, "g={g} moved={moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn adam_two_steps_follow_scalar_recurrence() {
        // Standalone recurrence, constant gradient g = 0.3, p0 = 1.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8f64, 1e-3f64, 0.3f64);
        let mut expect = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expect -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = vec![1.0];
        let mut st = AdamState::new(AdamConfig::default(), [1]);
        st.step(&mut [&mut p], &[&[g]]).unwrap();
        st.step(&mut [&mut p], &[&[g]]).unwrap();
        assert!((p[0] - expect).abs() < 1e-15);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_updating() {
        let mut a = vec![1.0, 2.0];
        let mut b = vec![3.0];
        let mut st = AdamState::new(AdamConfig::default(), [2, 1]);
        let err = st.step(&mut [&mut a, &mut b], &[&[0.1, 0.2], &[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { tensor: 1, index: 0 }));
        assert_eq!(a, vec![1.0, 2.0]);
        assert_eq!(st.step_count(), 0);
    }
}
