//! Small trainers: a VAE with a stochastic decoder, a logistic-regression
//! classifier and a latent-space inverter.
//!
//! VAE training runs in two phases. First the encoder and mean decoder are
//! fitted on the usual Bernoulli ELBO. Then, with both frozen, the σ-network
//! is fitted on the Gaussian negative log-likelihood of the mean decoder's
//! residuals, with latent codes drawn from the approximate posterior.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::network::ModelFile;
use crate::network::{
    softplus, Activation, FeatureMap, LatentPoint, LayerGrad, Mlp, StochasticGenerator,
};

/// σ floor of trained decoders, about 1% of the pixel range. Smaller floors
/// let the σ-network collapse onto near-zero residuals and overfit.
pub const TRAINED_SIGMA_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs of the σ-network phase.
    pub sigma_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub latent_dim: usize,
    /// Encoder hidden widths, input side first; the decoders mirror them.
    pub hidden: Vec<usize>,
    /// Lower bound on the decoder standard deviation.
    pub sigma_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            sigma_epochs: 10,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 0,
            latent_dim: 2,
            hidden: vec![128, 64],
            sigma_floor: TRAINED_SIGMA_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.latent_dim == 0
            || self.hidden.iter().any(|&h| h == 0)
        {
            return Err(Error::InvalidInput(
                "epochs, batch size, latent dim and hidden widths must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(sizes: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        let v = m.clone();
        Adam { lr, t: 0, m, v }
    }

    fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(
            net.layers()
                .iter()
                .flat_map(|l| [l.weights.rows() * l.weights.cols(), l.bias.len()]),
            lr,
        )
    }

    fn begin(&mut self) -> (f64, f64) {
        self.t += 1;
        (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t))
    }

    fn update(&mut self, slot: usize, params: &mut [f64], grad: &[f64], c1: f64, c2: f64) {
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            params[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }

    fn step_net(&mut self, net: &mut Mlp, grads: &[LayerGrad]) {
        let (c1, c2) = self.begin();
        for (i, (layer, g)) in net.layers_mut().iter_mut().zip(grads).enumerate() {
            self.update(2 * i, layer.weights.as_mut_slice(), g.weights.as_slice(), c1, c2);
            self.update(2 * i + 1, &mut layer.bias, &g.bias, c1, c2);
        }
    }

    fn step_flat(&mut self, params: &mut [f64], grad: &[f64]) {
        let (c1, c2) = self.begin();
        self.update(0, params, grad, c1, c2);
    }
}

fn batch_matrix(ds: &Dataset, indices: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(indices.len() * ds.image_dim());
    for &i in indices {
        data.extend_from_slice(ds.image(i));
    }
    Matrix::from_raw(indices.len(), ds.image_dim(), data)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Approximate posterior `q(z | x)`: an MLP whose output is the mean followed
/// by the log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    net: Mlp,
}

impl Encoder {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.output_dim() % 2 != 0 {
            return Err(Error::Validation {
                layer: "encoder".into(),
                reason: format!("output width {} is not mean plus log-variance", net.output_dim()),
            });
        }
        Ok(Encoder { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Posterior mean and log-variance.
    pub fn posterior(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut out = self.net.forward(x)?;
        let lv = out.split_off(self.latent_dim());
        Ok((out, lv))
    }

    pub fn encode(&self, x: &[f64]) -> Result<LatentPoint> {
        let (mean, _) = self.posterior(x)?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output"));
        }
        Ok(LatentPoint(mean))
    }

    /// Posterior means, one row per input row.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        let out = self.net.forward_batch(x)?;
        let d = self.latent_dim();
        Ok(Matrix::from_fn(x.rows(), d, |r, c| out.get(r, c)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub encoder: Encoder,
    pub generator: StochasticGenerator,
}

impl Vae {
    pub fn parameter_count(&self) -> usize {
        self.encoder.net.parameter_count() + self.generator.parameter_count()
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile::Stochastic {
            generator: self.generator.clone(),
            encoder: Some(self.encoder.net.clone()),
        }
    }

    pub fn from_model_file(model: ModelFile) -> Result<Self> {
        match model {
            ModelFile::Stochastic {
                generator,
                encoder: Some(enc),
            } => {
                let encoder = Encoder::new(enc)?;
                check_dim("encoder latent", generator.latent_dim(), encoder.latent_dim())?;
                check_dim("encoder input", generator.output_dim(), encoder.input_dim())?;
                Ok(Vae { encoder, generator })
            }
            ModelFile::Stochastic { encoder: None, .. } => {
                Err(Error::InvalidInput("model file has no encoder".into()))
            }
            _ => Err(Error::InvalidInput("expected a stochastic model file".into())),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VaeReport {
    /// Held-out ELBO per image before training and after every epoch.
    pub elbo_history: Vec<f64>,
    /// Mean training loss (negative ELBO) per epoch.
    pub train_loss: Vec<f64>,
    /// Held-out Gaussian negative log-likelihood per σ epoch, constant dropped.
    pub sigma_nll_history: Vec<f64>,
    pub held_out: usize,
}

/// Bernoulli ELBO per image for `z = m + exp(lv/2)·ε` with the given noise.
fn elbo_terms(
    encoder: &Mlp,
    decoder: &Mlp,
    x: &Matrix,
    eps: &Matrix,
) -> Result<f64> {
    let d = eps.cols();
    let post = encoder.forward_batch(x)?;
    let z = Matrix::from_fn(x.rows(), d, |r, c| {
        post.get(r, c) + (0.5 * post.get(r, d + c)).exp() * eps.get(r, c)
    });
    let logits = decoder.forward_trace(&z)?;
    let mut total = 0.0;
    for r in 0..x.rows() {
        let rec: f64 = logits
            .output_pre()
            .row(r)
            .iter()
            .zip(x.row(r))
            .map(|(l, xi)| softplus(*l) - xi * l)
            .sum();
        let kl: f64 = (0..d)
            .map(|c| {
                let (m, lv) = (post.get(r, c), post.get(r, d + c));
                0.5 * (m * m + lv.exp() - lv - 1.0)
            })
            .sum();
        total -= rec + kl;
    }
    Ok(total / x.rows() as f64)
}

fn sigma_nll(
    encoder: &Mlp,
    generator: &StochasticGenerator,
    x: &Matrix,
    eps: &Matrix,
) -> Result<f64> {
    let d = eps.cols();
    let post = encoder.forward_batch(x)?;
    let z = Matrix::from_fn(x.rows(), d, |r, c| {
        post.get(r, c) + (0.5 * post.get(r, d + c)).exp() * eps.get(r, c)
    });
    let mu = generator.mu_net().forward_batch(&z)?;
    let sd = generator.sigma_net().forward_batch(&z)?;
    let floor = generator.sigma_floor();
    let mut total = 0.0;
    for ((m, s), xi) in mu.as_slice().iter().zip(sd.as_slice()).zip(x.as_slice()) {
        let s = s + floor;
        let r = xi - m;
        total += r * r / (2.0 * s * s) + s.ln();
    }
    Ok(total / x.rows() as f64)
}

fn split_held_out(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (n / 10).clamp(1, 1000)
    }
}

/// Train encoder, mean decoder and σ-network on `ds`.
pub fn train_vae(ds: &Dataset, cfg: &TrainConfig) -> Result<(Vae, VaeReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = ds.image_dim();
    let d = cfg.latent_dim;

    let mut enc_dims = vec![dim];
    enc_dims.extend(&cfg.hidden);
    enc_dims.push(2 * d);
    let mut enc_acts = vec![Activation::Relu; cfg.hidden.len()];
    enc_acts.push(Activation::Identity);
    let mut dec_dims = vec![d];
    dec_dims.extend(cfg.hidden.iter().rev());
    dec_dims.push(dim);
    let mut mu_acts = vec![Activation::Tanh; cfg.hidden.len()];
    mu_acts.push(Activation::Sigmoid);
    let mut sigma_acts = vec![Activation::Tanh; cfg.hidden.len()];
    sigma_acts.push(Activation::Softplus);

    let mut encoder = Mlp::random(&enc_dims, &enc_acts, &mut rng)?;
    let mut mu = Mlp::random(&dec_dims, &mu_acts, &mut rng)?;
    let mut sigma = Mlp::random(&dec_dims, &sigma_acts, &mut rng)?;

    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let held = split_held_out(ds.len());
    let (train_idx, eval_idx) = order.split_at(ds.len() - held);
    let eval_idx = if eval_idx.is_empty() { train_idx } else { eval_idx };
    let eval_x = batch_matrix(ds, eval_idx);
    let eval_eps = gaussian_matrix(&mut rng, eval_idx.len(), d);
    let mut train_idx = train_idx.to_vec();

    let mut report = VaeReport {
        held_out: held,
        ..VaeReport::default()
    };
    report.elbo_history.push(elbo_terms(&encoder, &mu, &eval_x, &eval_eps)?);

    let mut enc_opt = Adam::for_net(&encoder, cfg.learning_rate);
    let mut mu_opt = Adam::for_net(&mu, cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let x = batch_matrix(ds, chunk);
            let b = chunk.len();
            let eps = gaussian_matrix(&mut rng, b, d);
            let et = encoder.forward_trace(&x)?;
            let post = et.output();
            let z = Matrix::from_fn(b, d, |r, c| {
                post.get(r, c) + (0.5 * post.get(r, d + c)).exp() * eps.get(r, c)
            });
            let dt = mu.forward_trace(&z)?;
            let logits = dt.output_pre();
            let mut loss = 0.0;
            for r in 0..b {
                for (l, xi) in logits.row(r).iter().zip(x.row(r)) {
                    loss += softplus(*l) - xi * l;
                }
                for c in 0..d {
                    let (m, lv) = (post.get(r, c), post.get(r, d + c));
                    loss += 0.5 * (m * m + lv.exp() - lv - 1.0);
                }
            }
            loss /= b as f64;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    batch: batch_no + 1,
                    reason: "non-finite loss".into(),
                });
            }
            epoch_loss += loss * b as f64;

            let inv_b = 1.0 / b as f64;
            let grad_logits = Matrix::from_fn(b, dim, |r, c| {
                (dt.output().get(r, c) - x.get(r, c)) * inv_b
            });
            let (mu_grads, gz) = mu.backward_from_pre(&dt, grad_logits, true);
            let grad_post = Matrix::from_fn(b, 2 * d, |r, c| {
                if c < d {
                    gz.get(r, c) + post.get(r, c) * inv_b
                } else {
                    let k = c - d;
                    let lv = post.get(r, c);
                    let half = (0.5 * lv).exp();
                    gz.get(r, k) * eps.get(r, k) * 0.5 * half + 0.5 * (lv.exp() - 1.0) * inv_b
                }
            });
            let (enc_grads, _) = encoder.backward(&et, &grad_post, true);
            enc_opt.step_net(&mut encoder, &enc_grads);
            mu_opt.step_net(&mut mu, &mu_grads);
        }
        report.train_loss.push(epoch_loss / train_idx.len() as f64);
        let elbo = elbo_terms(&encoder, &mu, &eval_x, &eval_eps)?;
        if !elbo.is_finite() {
            return Err(Error::Training {
                epoch: epoch + 1,
                batch: 0,
                reason: "non-finite held-out ELBO".into(),
            });
        }
        report.elbo_history.push(elbo);
    }

    let mut generator = StochasticGenerator::new(mu, sigma.clone(), cfg.sigma_floor)?;
    let floor = generator.sigma_floor();
    let mut sigma_opt = Adam::for_net(&sigma, cfg.learning_rate);
    for epoch in 0..cfg.sigma_epochs {
        train_idx.shuffle(&mut rng);
        for (batch_no, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let x = batch_matrix(ds, chunk);
            let b = chunk.len();
            let eps = gaussian_matrix(&mut rng, b, d);
            let post = encoder.forward_batch(&x)?;
            let z = Matrix::from_fn(b, d, |r, c| {
                post.get(r, c) + (0.5 * post.get(r, d + c)).exp() * eps.get(r, c)
            });
            let mean = generator.mu_net().forward_batch(&z)?;
            let st = sigma.forward_trace(&z)?;
            let inv_b = 1.0 / b as f64;
            let mut bad = false;
            let grad_pre = Matrix::from_fn(b, dim, |r, c| {
                let s = st.output().get(r, c) + floor;
                let res = x.get(r, c) - mean.get(r, c);
                let ds_dpre = crate::network::sigmoid(st.output_pre().get(r, c));
                let g = (1.0 / s - res * res / (s * s * s)) * ds_dpre * inv_b;
                bad |= !g.is_finite();
                g
            });
            if bad {
                return Err(Error::Training {
                    epoch: cfg.epochs + epoch + 1,
                    batch: batch_no + 1,
                    reason: "non-finite σ gradient".into(),
                });
            }
            let (grads, _) = sigma.backward_from_pre(&st, grad_pre, true);
            sigma_opt.step_net(&mut sigma, &grads);
        }
        generator = StochasticGenerator::new(generator.mu_net().clone(), sigma.clone(), floor)?;
        report
            .sigma_nll_history
            .push(sigma_nll(&encoder, &generator, &eval_x, &eval_eps)?);
    }
    let generator = StochasticGenerator::new(generator.mu_net().clone(), sigma, floor)?;
    Ok((
        Vae {
            encoder: Encoder::new(encoder)?,
            generator,
        },
        report,
    ))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LogregReport {
    /// Mean cross-entropy before training and after every epoch.
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
}

/// Classes are the ten digit labels, so predictions are digits directly.
pub const DIGIT_CLASSES: usize = 10;

fn cross_entropy(net: &Mlp, x: &Matrix, labels: &[u8]) -> Result<f64> {
    let logits = net.forward_batch(x)?;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
    }
    Ok(total / labels.len() as f64)
}

/// Multinomial logistic regression on raw pixels, trained with Adam on
/// softmax cross-entropy.
pub fn train_logreg(ds: &Dataset, cfg: &TrainConfig) -> Result<(FeatureMap, LogregReport)> {
    cfg.validate()?;
    if ds.classes().len() < 2 {
        return Err(Error::InvalidInput("logistic regression needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = ds.image_dim();
    let mut net = Mlp::new(vec![crate::network::Layer::new(
        Matrix::zeros(DIGIT_CLASSES, dim),
        vec![0.0; DIGIT_CLASSES],
        Activation::Identity,
    )?])?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let full_x = batch_matrix(ds, &all);
    let mut report = LogregReport::default();
    report.loss_history.push(cross_entropy(&net, &full_x, ds.labels())?);
    let mut opt = Adam::for_net(&net, cfg.learning_rate);
    let mut order = all.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = batch_matrix(ds, chunk);
            let trace = net.forward_trace(&x)?;
            let inv_b = 1.0 / chunk.len() as f64;
            let mut grad = Matrix::zeros(chunk.len(), DIGIT_CLASSES);
            for (r, &i) in chunk.iter().enumerate() {
                let p = crate::network::softmax(trace.output().row(r));
                for (k, pk) in p.iter().enumerate() {
                    let target = if k == ds.label(i) as usize { 1.0 } else { 0.0 };
                    grad.set(r, k, (pk - target) * inv_b);
                }
            }
            if grad.as_slice().iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    batch: batch_no + 1,
                    reason: "non-finite gradient".into(),
                });
            }
            let (grads, _) = net.backward_from_pre(&trace, grad, true);
            opt.step_net(&mut net, &grads);
        }
        report.loss_history.push(cross_entropy(&net, &full_x, ds.labels())?);
    }
    let layer = net.layers()[0].clone();
    let map = FeatureMap::logistic(layer.weights, layer.bias)?;
    report.train_accuracy = accuracy(&map, ds)?;
    Ok((map, report))
}

pub fn accuracy(map: &FeatureMap, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for i in 0..ds.len() {
        if map.predict(ds.image(i))? == ds.label(i) as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertConfig {
    pub starts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            starts: 16,
            iterations: 400,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// Latent point whose mean decode is closest to `x`, by Adam on
/// `‖μ(z) − x‖²` from standard-normal starts run side by side. Returns the
/// best point visited and its loss.
pub fn invert(gen: &StochasticGenerator, x: &[f64], cfg: &InvertConfig) -> Result<(LatentPoint, f64)> {
    check_dim("image", gen.output_dim(), x.len())?;
    if cfg.starts == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidInput("inversion needs starts ≥ 1 and a positive rate".into()));
    }
    let d = gen.latent_dim();
    let k = cfg.starts;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = gaussian_matrix(&mut rng, k, d);
    let mut opt = Adam::new([k * d], cfg.learning_rate);
    let mut best = (f64::INFINITY, vec![0.0; d]);
    let net = gen.mu_net();
    for it in 0..=cfg.iterations {
        let trace = net.forward_trace(&z)?;
        let out = trace.output();
        let mut grad = Matrix::zeros(k, x.len());
        for r in 0..k {
            let mut loss = 0.0;
            for (c, (o, xi)) in out.row(r).iter().zip(x).enumerate() {
                let diff = o - xi;
                loss += diff * diff;
                grad.set(r, c, 2.0 * diff);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("inversion loss"));
            }
            if loss < best.0 {
                best = (loss, z.row(r).to_vec());
            }
        }
        if it == cfg.iterations {
            break;
        }
        let (_, gz) = net.backward(&trace, &grad, false);
        opt.step_flat(z.as_mut_slice(), gz.as_slice());
    }
    Ok((LatentPoint(best.1), best.0))
}
