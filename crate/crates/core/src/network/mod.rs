//! Feed-forward generators with exact derivatives.
//!
//! An [`Mlp`] is a chain of affine layers each followed by an elementwise
//! activation. Jacobians are assembled in forward mode (one tangent per latent
//! coordinate, which is cheap because latent spaces are tiny) and
//! vector-Jacobian products run in reverse mode. Batched variants operate on
//! row-major matrices with one sample per row and go through `gemm`.
//!
//! The relu derivative at exactly zero is taken to be 0.

mod persist;

pub use persist::{load_model, save_model, ModelFile};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dot, gemm, Matrix};

/// Point in latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentPoint(pub Vec<f64>);

impl LatentPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent point"));
        }
        Ok(Self(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for LatentPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LatentPoint {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
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
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_dim("layer bias", weights.rows(), bias.len())?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer bias"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// `X Wᵀ + b` for a batch `X` with one sample per row.
    fn affine_batch(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.outputs());
        gemm(1.0, x, false, &self.weights, true, 0.0, &mut out);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    fn linear_batch(&self, t: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(t.rows(), self.outputs());
        gemm(1.0, t, false, &self.weights, true, 0.0, &mut out);
        out
    }
}

/// Per-layer inputs and pre-activations of a batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Pre-activation of the final layer.
    pub fn output_pre(&self) -> &Matrix {
        self.pre.last().expect("nonempty network")
    }
}

/// Parameter gradients of one layer.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation {
                layer: "network".into(),
                reason: "no layers".into(),
            });
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Validation {
                    layer: format!("layer {}", i + 1),
                    reason: format!(
                        "expects {} inputs but previous layer produces {}",
                        pair[1].inputs(),
                        pair[0].outputs()
                    ),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases. `dims` lists every width from
    /// input to output; `activations` has one entry per layer.
    pub fn random(dims: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Result<Self> {
        check_dim("activation count", dims.len().saturating_sub(1), activations.len())?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let weights = Matrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng));
                Layer::new(weights, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), z.len())?;
        let mut h = z.to_vec();
        for layer in &self.layers {
            h = (0..layer.outputs())
                .map(|o| layer.activation.apply(dot(layer.weights.row(o), &h) + layer.bias[o]))
                .collect();
        }
        Ok(h)
    }

    /// Forward pass over a batch, one sample per row.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("network input", self.input_dim(), x.cols())?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut pre = layer.affine_batch(&h);
            pre.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            h = pre;
        }
        Ok(h)
    }

    /// Forward pass through `J` applied to a set of tangents at one point.
    /// `tangents` holds one direction per row; returns the output and the
    /// pushed-forward tangents (one per row).
    fn push_forward(&self, z: &[f64], tangents: Matrix) -> (Vec<f64>, Matrix) {
        let mut h = z.to_vec();
        let mut t = tangents;
        for layer in &self.layers {
            let pre: Vec<f64> = (0..layer.outputs())
                .map(|o| dot(layer.weights.row(o), &h) + layer.bias[o])
                .collect();
            let mut tn = layer.linear_batch(&t);
            for r in 0..tn.rows() {
                for (v, p) in tn.row_mut(r).iter_mut().zip(&pre) {
                    *v *= layer.activation.derivative(*p);
                }
            }
            h = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            t = tn;
        }
        (h, t)
    }

    /// Exact Jacobian `∂g/∂z`, `D × d`.
    pub fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        check_dim("network input", self.input_dim(), z.len())?;
        let (_, t) = self.push_forward(z, Matrix::identity(z.len()));
        Ok(t.transpose())
    }

    /// Output and directional derivative `J v`.
    pub fn jvp(&self, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("network input", self.input_dim(), z.len())?;
        check_dim("tangent", self.input_dim(), v.len())?;
        let (y, t) = self.push_forward(z, Matrix::from_raw(1, v.len(), v.to_vec()));
        Ok((y, t.into_vec()))
    }

    /// Batched `(g(xᵢ), J(xᵢ) vᵢ)` for rows `xᵢ` of `x` and `vᵢ` of `v`.
    pub fn jvp_batch(&self, x: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
        check_dim("network input", self.input_dim(), x.cols())?;
        check_dim("tangent", self.input_dim(), v.cols())?;
        check_dim("tangent count", x.rows(), v.rows())?;
        let mut h = x.clone();
        let mut t = v.clone();
        for layer in &self.layers {
            let mut pre = layer.affine_batch(&h);
            let mut tn = layer.linear_batch(&t);
            for (tv, p) in tn.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *tv *= layer.activation.derivative(*p);
            }
            pre.as_mut_slice()
                .iter_mut()
                .for_each(|p| *p = layer.activation.apply(*p));
            h = pre;
            t = tn;
        }
        Ok((h, t))
    }

    /// `uᵀ J` by reverse-mode accumulation.
    pub fn vjp(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.input_dim(), z.len())?;
        check_dim("cotangent", self.output_dim(), u.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = z.to_vec();
        for layer in &self.layers {
            let pre: Vec<f64> = (0..layer.outputs())
                .map(|o| dot(layer.weights.row(o), &h) + layer.bias[o])
                .collect();
            let next = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pres.push(pre);
        }
        let mut g = u.to_vec();
        for (layer, pre) in self.layers.iter().zip(&pres).rev() {
            let gp: Vec<f64> = g
                .iter()
                .zip(pre)
                .map(|(gi, &p)| gi * layer.activation.derivative(p))
                .collect();
            g = layer.weights.vecmat(&gp)?;
        }
        Ok(g)
    }

    /// Batched forward pass that keeps what the backward pass needs.
    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        check_dim("network input", self.input_dim(), x.cols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = layer.affine_batch(&h);
            let mut post = pre.clone();
            post.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(std::mem::replace(&mut h, post));
            pres.push(pre);
        }
        Ok(Trace {
            inputs,
            pre: pres,
            output: h,
        })
    }

    /// Backward pass given `∂L/∂output`. Returns the parameter gradients
    /// (when requested) and `∂L/∂input`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: &Matrix,
        with_params: bool,
    ) -> (Vec<LayerGrad>, Matrix) {
        let last = self.layers.len() - 1;
        let mut gp = grad_output.clone();
        for (g, p) in gp
            .as_mut_slice()
            .iter_mut()
            .zip(trace.pre[last].as_slice())
        {
            *g *= self.layers[last].activation.derivative(*p);
        }
        self.backward_from_pre(trace, gp, with_params)
    }

    /// Backward pass given `∂L/∂(pre-activation of the last layer)`, which
    /// lets callers fuse the output nonlinearity into the loss.
    pub fn backward_from_pre(
        &self,
        trace: &Trace,
        grad_pre: Matrix,
        with_params: bool,
    ) -> (Vec<LayerGrad>, Matrix) {
        let mut grads = Vec::new();
        let mut gp = grad_pre;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            if with_params {
                let mut gw = Matrix::zeros(layer.outputs(), layer.inputs());
                gemm(1.0, &gp, true, &trace.inputs[idx], false, 0.0, &mut gw);
                let mut gb = vec![0.0; layer.outputs()];
                for r in 0..gp.rows() {
                    axpy(1.0, gp.row(r), &mut gb);
                }
                grads.push(LayerGrad {
                    weights: gw,
                    bias: gb,
                });
            }
            let mut gx = Matrix::zeros(gp.rows(), layer.inputs());
            gemm(1.0, &gp, false, &layer.weights, false, 0.0, &mut gx);
            if idx > 0 {
                let prev = &self.layers[idx - 1];
                for (g, p) in gx
                    .as_mut_slice()
                    .iter_mut()
                    .zip(trace.pre[idx - 1].as_slice())
                {
                    *g *= prev.activation.derivative(*p);
                }
            }
            gp = gx;
        }
        grads.reverse();
        (grads, gp)
    }

    /// Batched `uᵢᵀ J(xᵢ)`.
    pub fn vjp_batch(&self, x: &Matrix, u: &Matrix) -> Result<Matrix> {
        check_dim("cotangent", self.output_dim(), u.cols())?;
        check_dim("cotangent count", x.rows(), u.rows())?;
        let trace = self.forward_trace(x)?;
        Ok(self.backward(&trace, u, false).1)
    }
}

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-4;

/// Decoder with Gaussian output `μ(z) + σ(z)·ε`, `σ(z) = s(z) + floor` where
/// `s` is a network ending in softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticGenerator {
    mu: Mlp,
    sigma: Mlp,
    sigma_floor: f64,
}

impl StochasticGenerator {
    pub fn new(mu: Mlp, sigma: Mlp, sigma_floor: f64) -> Result<Self> {
        check_dim("sigma network input", mu.input_dim(), sigma.input_dim())?;
        check_dim("sigma network output", mu.output_dim(), sigma.output_dim())?;
        if !(sigma_floor > 0.0 && sigma_floor.is_finite()) {
            return Err(Error::Validation {
                layer: "sigma_floor".into(),
                reason: format!("must be positive, got {sigma_floor}"),
            });
        }
        let last = sigma.layers().last().expect("nonempty").activation;
        if last != Activation::Softplus {
            return Err(Error::Validation {
                layer: format!("sigma layer {}", sigma.layers().len() - 1),
                reason: format!("final activation must be softplus, got {last:?}"),
            });
        }
        Ok(Self {
            mu,
            sigma,
            sigma_floor,
        })
    }

    pub fn mu_net(&self) -> &Mlp {
        &self.mu
    }

    pub fn sigma_net(&self) -> &Mlp {
        &self.sigma
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mu.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.mu.parameter_count() + self.sigma.parameter_count()
    }

    pub fn mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.mu.forward(z)
    }

    pub fn std(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.sigma.forward(z)?;
        s.iter_mut().for_each(|v| *v += self.sigma_floor);
        Ok(s)
    }

    /// `μ(z) + σ(z)·ε`
    pub fn sample(&self, z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        check_dim("noise", self.output_dim(), eps.len())?;
        let mu = self.mean(z)?;
        let sd = self.std(z)?;
        Ok(mu.iter().zip(&sd).zip(eps).map(|((m, s), e)| m + s * e).collect())
    }

    pub fn jacobian_mu(&self, z: &[f64]) -> Result<Matrix> {
        self.mu.jacobian(z)
    }

    pub fn jacobian_sigma(&self, z: &[f64]) -> Result<Matrix> {
        self.sigma.jacobian(z)
    }
}

/// Map from generator output space into a feature space.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    Identity,
    /// `softmax(W x + b)` with `W` of shape `K × D`.
    Logistic { weights: Matrix, bias: Vec<f64> },
}

impl FeatureMap {
    pub fn logistic(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_dim("logistic bias", weights.rows(), bias.len())?;
        Ok(FeatureMap::Logistic { weights, bias })
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            FeatureMap::Identity => None,
            FeatureMap::Logistic { weights, .. } => Some(weights.rows()),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity => Ok(x.to_vec()),
            FeatureMap::Logistic { weights, bias } => {
                let mut logits = weights.matvec(x)?;
                axpy(1.0, bias, &mut logits);
                Ok(softmax(&logits))
            }
        }
    }

    /// `J_FX`: identity, or `(diag(p) − p pᵀ) W` for the logistic map.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        match self {
            FeatureMap::Identity => Ok(Matrix::identity(x.len())),
            FeatureMap::Logistic { weights, .. } => {
                let p = self.forward(x)?;
                let k = p.len();
                let d = weights.cols();
                // row_k = p_k (W_k − Σ_j p_j W_j)
                let mean_row = weights.vecmat(&p)?;
                let mut out = Matrix::zeros(k, d);
                for c in 0..k {
                    let row = out.row_mut(c);
                    for ((o, w), m) in row.iter_mut().zip(weights.row(c)).zip(&mean_row) {
                        *o = p[c] * (w - m);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.forward(x)?;
        Ok(argmax(&p))
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference Jacobian of `net` at `z`.
pub fn numerical_jacobian(net: &Mlp, z: &[f64], h: f64) -> Result<Matrix> {
    check_dim("network input", net.input_dim(), z.len())?;
    let mut j = Matrix::zeros(net.output_dim(), z.len());
    let mut zp = z.to_vec();
    for c in 0..z.len() {
        zp[c] = z[c] + h;
        let plus = net.forward(&zp)?;
        zp[c] = z[c] - h;
        let minus = net.forward(&zp)?;
        zp[c] = z[c];
        for r in 0..j.rows() {
            j.set(r, c, (plus[r] - minus[r]) / (2.0 * h));
        }
    }
    Ok(j)
}

/// Worst disagreement between analytic and numerical derivatives of a
/// network over random standard-normal inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianAudit {
    pub points: usize,
    /// Largest `‖J − J_fd‖_F / ‖J_fd‖_F`.
    pub max_rel_error: f64,
    /// Largest entry of `|vjp(u) − uᵀJ|` for random `u`.
    pub max_vjp_error: f64,
}

pub fn audit_jacobian(net: &Mlp, points: usize, h: f64, rng: &mut impl Rng) -> Result<JacobianAudit> {
    let mut audit = JacobianAudit {
        points,
        max_rel_error: 0.0,
        max_vjp_error: 0.0,
    };
    for _ in 0..points {
        let z: Vec<f64> = (0..net.input_dim()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let j = net.jacobian(&z)?;
        let fd = numerical_jacobian(net, &z, h)?;
        let diff: f64 = j
            .as_slice()
            .iter()
            .zip(fd.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let rel = diff / fd.frobenius_norm().max(f64::MIN_POSITIVE);
        audit.max_rel_error = audit.max_rel_error.max(rel);
        let u: Vec<f64> = (0..net.output_dim()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let uj = j.vecmat(&u)?;
        for (a, b) in net.vjp(&z, &u)?.iter().zip(&uj) {
            audit.max_vjp_error = audit.max_vjp_error.max((a - b).abs());
        }
    }
    Ok(audit)
}
