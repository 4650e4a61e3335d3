use serde::{Deserialize, Serialize};

use super::linalg::{dot, norm, Matrix};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("layer bias", weights.rows(), bias.len())?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer bias"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// `W x + b`, each row summed left to right before the bias is added.
    pub fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("layer input", self.input_dim(), x.len())?;
        Ok((0..self.output_dim())
            .map(|r| dot(self.weights.row(r), x) + self.bias[r])
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .pre_activation(x)?
            .into_iter()
            .map(|p| self.activation.apply(p))
            .collect())
    }
}

/// Evaluates a layer as a function of its parameters with the data held fixed.
///
/// Row `i` forms `diag(x) w_i + b_i` (the data acts as a diagonal weight on
/// the parameter row), reduces it to a scalar and applies the activation. The
/// products are accumulated in the same order as [`Layer::forward`], so the
/// two views agree bit for bit.
pub fn dual_layer_forward(
    weights: &Matrix,
    bias: &[f64],
    activation: Activation,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_len("dual layer bias", weights.rows(), bias.len())?;
    check_len("dual layer input", weights.cols(), x.len())?;
    Ok((0..weights.rows())
        .map(|i| {
            let scaled_row = weights.row(i).iter().zip(x).map(|(w, xj)| xj * w);
            let reduced = scaled_row.fold(0.0, |acc, v| acc + v);
            activation.apply(reduced + bias[i])
        })
        .collect())
}

/// Feed-forward network. Encoders set `normalize_output` so every feature
/// lands on the unit sphere; the normalization is part of the Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    normalize_output: bool,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pre_activations: Vec<Vec<f64>>,
    raw_output: Vec<f64>,
    output: Vec<f64>,
    raw_norm: f64,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, normalize_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        if layers.iter().any(|l| l.input_dim() == 0 || l.output_dim() == 0) {
            return Err(Error::InvalidNetwork("zero-width layer".into()));
        }
        Ok(Self {
            layers,
            normalize_output,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.into_output())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_len("network input", self.input_dim(), x.len())?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h)?;
            h = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            pre_activations.push(pre);
        }
        let (output, raw_norm) = if self.normalize_output {
            let n = norm(&h);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::DegenerateEmbedding);
            }
            (h.iter().map(|v| v / n).collect(), n)
        } else {
            (h.clone(), 1.0)
        };
        Ok(Trace {
            pre_activations,
            raw_output: h,
            output,
            raw_norm,
        })
    }

    /// Vector-Jacobian product `Jᵀ upstream` at the point recorded in `trace`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<Vec<f64>> {
        check_len("network upstream gradient", self.output_dim(), upstream.len())?;
        let mut g = if self.normalize_output {
            // d(u/|u|) = (I - y yᵀ)/|u|
            let y = &trace.output;
            let proj = dot(y, upstream);
            upstream
                .iter()
                .zip(y)
                .map(|(gi, yi)| (gi - yi * proj) / trace.raw_norm)
                .collect()
        } else {
            upstream.to_vec()
        };
        debug_assert_eq!(trace.raw_output.len(), g.len());
        for (layer, pre) in self.layers.iter().zip(&trace.pre_activations).rev() {
            let delta: Vec<f64> = g
                .iter()
                .zip(pre)
                .map(|(gi, &p)| gi * layer.activation.derivative(p))
                .collect();
            g = layer.weights.matvec_transposed(&delta)?;
        }
        Ok(g)
    }

    /// `Jᵀ upstream` where `J` is the Jacobian of [`Mlp::forward`] at `x`.
    pub fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        check_len("network upstream gradient", self.output_dim(), upstream.len())?;
        let trace = self.forward_trace(x)?;
        self.backward(&trace, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::finite_difference_grad;
    use crate::rng::{normal_vec, stream};

    fn single(w: Matrix, b: Vec<f64>, act: Activation, normalize: bool) -> Mlp {
        Mlp::new(vec![Layer::new(w, b, act).unwrap()], normalize).unwrap()
    }

    fn random_net(seed: u64, dims: &[usize], act: Activation, normalize: bool) -> Mlp {
        let mut rng = stream(seed, 0);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let w = Matrix::new(d[1], d[0], normal_vec(&mut rng, d[0] * d[1])).unwrap();
                let b = normal_vec(&mut rng, d[1]);
                let a = if k + 2 == dims.len() { Activation::Identity } else { act };
                Layer::new(w, b, a).unwrap()
            })
            .collect();
        Mlp::new(layers, normalize).unwrap()
    }

    #[test]
    fn identity_layer_forward() {
        let net = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity, false);
        assert_eq!(net.forward(&[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        let net = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity, true);
        assert_eq!(net.forward(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let net = random_net(5, &[4, 6, 5, 3], Activation::Tanh, false);
        let x = normal_vec(&mut stream(6, 0), 4);
        let mut h = x.clone();
        for layer in net.layers() {
            let w = layer.weights();
            let mut next = vec![0.0; w.rows()];
            for (r, out) in next.iter_mut().enumerate() {
                let mut s = 0.0;
                for (c, x) in h.iter().enumerate() {
                    s += w.get(r, c) * x;
                }
                *out = layer.activation().apply(s + layer.bias()[r]);
            }
            h = next;
        }
        let got = net.forward(&x).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_errors() {
        let net = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity, true);
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            net.forward(&[0.0, 0.0]),
            Err(Error::DegenerateEmbedding)
        ));
        assert!(net.grad_input(&[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let a = Layer::new(Matrix::zeros(3, 2), vec![0.0; 3], Activation::Tanh).unwrap();
        let b = Layer::new(Matrix::zeros(1, 2), vec![0.0], Activation::Tanh).unwrap();
        assert!(Mlp::new(vec![a, b], false).is_err());
        assert!(Mlp::new(vec![], false).is_err());
    }

    #[test]
    fn grad_input_of_linear_maps() {
        let net = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity, false);
        assert_eq!(net.grad_input(&[0.3, -1.0], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let net = single(w, vec![0.0, 0.0], Activation::Identity, false);
        assert_eq!(net.grad_input(&[0.3, -1.0], &[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
    }

    fn assert_grad_close(net: &Mlp, x: &[f64], upstream: &[f64], tol: f64) {
        let analytic = net.grad_input(x, upstream).unwrap();
        let numeric = finite_difference_grad(
            |p| dot(&net.forward(p).unwrap(), upstream),
            x,
            1e-5,
        );
        let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / scale <= tol, "{a} vs {n}");
        }
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        for seed in 0..20 {
            let net = random_net(seed, &[5, 7, 6, 4], Activation::Tanh, seed % 2 == 0);
            let mut rng = stream(seed, 99);
            let x = normal_vec(&mut rng, 5);
            let up = normal_vec(&mut rng, 4);
            assert_grad_close(&net, &x, &up, 1e-5);
        }
    }

    #[test]
    fn relu_grad_away_from_kinks() {
        let mut checked = 0;
        for seed in 0..40 {
            let net = random_net(seed, &[4, 8, 3], Activation::Relu, true);
            let mut rng = stream(seed, 7);
            let x = normal_vec(&mut rng, 4);
            let pre = net.layers()[0].pre_activation(&x).unwrap();
            if pre.iter().any(|p| p.abs() < 1e-4) {
                continue;
            }
            let up = normal_vec(&mut rng, 3);
            assert_grad_close(&net, &x, &up, 1e-5);
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn normalized_output_has_unit_norm() {
        let net = random_net(3, &[6, 9, 5], Activation::Tanh, true);
        for seed in 0..10 {
            let y = net.forward(&normal_vec(&mut stream(seed, 1), 6)).unwrap();
            assert!((norm(&y) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn dual_layer_examples() {
        let id = Matrix::identity(2);
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            let dual = dual_layer_forward(&id, &[0.0, 0.0], act, &[5.0, 7.0]).unwrap();
            assert_eq!(dual, vec![act.apply(5.0), act.apply(7.0)]);
            let dual = dual_layer_forward(&Matrix::zeros(2, 3), &[1.0, 1.0], act, &[0.2, -9.0, 4.0]).unwrap();
            assert_eq!(dual, vec![act.apply(1.0), act.apply(1.0)]);
        }
        assert!(dual_layer_forward(&id, &[0.0], Activation::Tanh, &[1.0, 2.0]).is_err());
        assert!(dual_layer_forward(&id, &[0.0, 0.0], Activation::Tanh, &[1.0]).is_err());
    }

    #[test]
    fn dual_layer_matches_direct_forward() {
        let mut rng = stream(42, 0);
        let w = Matrix::new(4, 3, normal_vec(&mut rng, 12)).unwrap();
        let b = normal_vec(&mut rng, 4);
        let x = normal_vec(&mut rng, 3);
        let layer = Layer::new(w.clone(), b.clone(), Activation::Tanh).unwrap();
        let direct = layer.forward(&x).unwrap();
        let dual = dual_layer_forward(&w, &b, Activation::Tanh, &x).unwrap();
        let gap = direct.iter().zip(&dual).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(gap <= 1e-12);
    }
}
