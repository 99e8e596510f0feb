//! Pull-back metrics on latent space.
//!
//! | variant                 | `M(z)`                                              |
//! |-------------------------|-----------------------------------------------------|
//! | deterministic `g`       | `JᵀJ`                                               |
//! | stochastic `(μ, σ)`     | `JμᵀJμ + JσᵀJσ`                                     |
//! | feature on `g`          | `Jᵀ M_FX J`, `M_FX = J_FXᵀ J_FX` at `x = g(z)`       |
//! | feature on `(μ, σ)`     | `Jμᵀ M_FX Jμ + Jσᵀ diag(M_FX) Jσ` at `x = μ(z)`      |
//!
//! The stochastic feature metric is the expectation over output noise of the
//! random metric of `h(μ + σ·ε)` with the feature Jacobian held at the mean;
//! only the diagonal of `M_FX` survives in the σ term because the noise has
//! identity covariance.

use std::fmt;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix, SymMatrix, PSD_TOLERANCE};
use crate::network::{FeatureMap, Mlp, StochasticGenerator, Trace};

/// A metric given directly as a function of the latent point, for synthetic
/// geometries that do not come from a network.
pub trait MetricField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn metric_at(&self, z: &[f64]) -> Result<SymMatrix>;
}

#[derive(Clone, Debug)]
pub enum MetricProvider {
    Deterministic(Arc<Mlp>),
    Stochastic(Arc<StochasticGenerator>),
    FeatureDeterministic {
        generator: Arc<Mlp>,
        feature: Arc<FeatureMap>,
    },
    FeatureStochastic {
        generator: Arc<StochasticGenerator>,
        feature: Arc<FeatureMap>,
    },
    Field(Arc<dyn MetricField>),
}

/// Generator whose output differences define the discrete path energy.
///
/// Output rows are `[y | s | w]`: `y` enters the energy by plain squared
/// differences, `s` by differences weighted with the segment mean of `w`.
/// Only the stochastic feature metric has a nonempty `s` block.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Embedding<'a> {
    Deterministic(&'a Mlp),
    Stochastic(&'a StochasticGenerator),
    /// `y = f(μ(z))`, `s = σ(z)`, `w = diag(M_FX)` at `μ(z)`.
    Feature {
        mu: &'a Mlp,
        sigma: Option<&'a Mlp>,
        feature: &'a FeatureMap,
    },
}

fn side_by_side(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks[0].rows();
    let width = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(rows, width);
    for r in 0..rows {
        let mut at = 0;
        for b in blocks {
            out.row_mut(r)[at..at + b.cols()].copy_from_slice(b.row(r));
            at += b.cols();
        }
    }
    out
}

fn columns(m: &Matrix, from: usize, to: usize) -> Matrix {
    Matrix::from_fn(m.rows(), to - from, |r, c| m.get(r, from + c))
}

/// Node outputs of an [`Embedding`] with the network traces needed to pull
/// cotangents back.
pub(crate) struct Forward {
    pub values: Matrix,
    traces: Vec<Trace>,
}

impl Embedding<'_> {
    /// Width of the weighted block `s`, which equals the width of `w`.
    pub(crate) fn weighted_width(&self) -> usize {
        match self {
            Embedding::Feature { sigma: Some(s), .. } => s.output_dim(),
            _ => 0,
        }
    }

    pub(crate) fn forward(&self, points: &Matrix) -> Result<Forward> {
        let (values, traces) = match self {
            Embedding::Deterministic(g) => {
                let t = g.forward_trace(points)?;
                (t.output().clone(), vec![t])
            }
            Embedding::Stochastic(s) => {
                let tm = s.mu_net().forward_trace(points)?;
                let ts = s.sigma_net().forward_trace(points)?;
                (side_by_side(&[tm.output(), ts.output()]), vec![tm, ts])
            }
            Embedding::Feature { mu, sigma, feature } => {
                let tm = mu.forward_trace(points)?;
                let x = tm.output();
                let mut y = Vec::with_capacity(x.rows());
                let mut w = Vec::new();
                for r in 0..x.rows() {
                    let at = FeatureAt::new(feature, x.row(r))?;
                    y.push(match &at {
                        FeatureAt::Identity => x.row(r).to_vec(),
                        FeatureAt::Logistic { p, .. } => p.clone(),
                    });
                    if sigma.is_some() {
                        w.push(at.diagonal(x.cols()));
                    }
                }
                let y = Matrix::from_rows(&y)?;
                match sigma {
                    Some(s) => {
                        let ts = s.forward_trace(points)?;
                        let v = side_by_side(&[&y, ts.output(), &Matrix::from_rows(&w)?]);
                        (v, vec![tm, ts])
                    }
                    None => (y, vec![tm]),
                }
            }
        };
        ensure_finite(values.as_slice(), "generator output")?;
        Ok(Forward { values, traces })
    }

    pub(crate) fn outputs(&self, points: &Matrix) -> Result<Matrix> {
        Ok(self.forward(points)?.values)
    }

    /// Pulls cotangents laid out like the forward values back to latent
    /// space.
    pub(crate) fn vjp(&self, fwd: &Forward, cotangents: &Matrix) -> Result<Matrix> {
        let sum = |a: Matrix, b: Matrix| {
            let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
            Matrix::from_raw(a.rows(), a.cols(), data)
        };
        let back = |net: &Mlp, k: usize, u: &Matrix| net.backward(&fwd.traces[k], u, false).1;
        match self {
            Embedding::Deterministic(g) => Ok(back(g, 0, cotangents)),
            Embedding::Stochastic(s) => {
                let d = s.output_dim();
                Ok(sum(
                    back(s.mu_net(), 0, &columns(cotangents, 0, d)),
                    back(s.sigma_net(), 1, &columns(cotangents, d, 2 * d)),
                ))
            }
            Embedding::Feature { mu, sigma, feature } => {
                let x = fwd.traces[0].output();
                let ws = self.weighted_width();
                let k = cotangents.cols() - 2 * ws;
                let mut cx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = cotangents.row(r);
                    let g = FeatureAt::new(feature, x.row(r))?.pullback(&row[..k], &row[k + ws..])?;
                    cx.row_mut(r).copy_from_slice(&g);
                }
                let through_mu = back(mu, 0, &cx);
                match sigma {
                    Some(s) => Ok(sum(through_mu, back(s, 1, &columns(cotangents, k, k + ws)))),
                    None => Ok(through_mu),
                }
            }
        }
    }
}

fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `J_FX u` at the feature input `x`.
fn feature_jvp(feature: &FeatureMap, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    match feature {
        FeatureMap::Identity => Ok(u.to_vec()),
        FeatureMap::Logistic { weights, .. } => {
            let p = feature.forward(x)?;
            let wu = weights.matvec(u)?;
            let s = dot(&p, &wu);
            Ok(p.iter().zip(&wu).map(|(pk, w)| pk * (w - s)).collect())
        }
    }
}

/// Diagonal of `M_FX = J_FXᵀ J_FX` at `x`.
fn feature_metric_diagonal(feature: &FeatureMap, x: &[f64]) -> Result<Vec<f64>> {
    match feature {
        FeatureMap::Identity => Ok(vec![1.0; x.len()]),
        FeatureMap::Logistic { .. } => {
            let j = feature.jacobian(x)?;
            let mut diag = vec![0.0; j.cols()];
            for k in 0..j.rows() {
                for (d, v) in diag.iter_mut().zip(j.row(k)) {
                    *d += v * v;
                }
            }
            Ok(diag)
        }
    }
}

/// A feature map linearized at one output point, with the derivatives of
/// its Jacobian needed for exact energy gradients.
enum FeatureAt<'a> {
    Identity,
    Logistic {
        weights: &'a Matrix,
        p: Vec<f64>,
        /// `W_cj − (Wᵀp)_j`, row-major `K × D`.
        centered: Matrix,
    },
}

impl<'a> FeatureAt<'a> {
    fn new(feature: &'a FeatureMap, x: &[f64]) -> Result<Self> {
        Ok(match feature {
            FeatureMap::Identity => FeatureAt::Identity,
            FeatureMap::Logistic { weights, .. } => {
                let p = feature.forward(x)?;
                let m = weights.vecmat(&p)?;
                let centered = Matrix::from_fn(weights.rows(), weights.cols(), |c, j| weights.get(c, j) - m[j]);
                FeatureAt::Logistic { weights, p, centered }
            }
        })
    }

    /// `diag(M_FX)`.
    fn diagonal(&self, dim: usize) -> Vec<f64> {
        match self {
            FeatureAt::Identity => vec![1.0; dim],
            FeatureAt::Logistic { p, centered, .. } => {
                let mut out = vec![0.0; dim];
                for (c, pc) in p.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(centered.row(c)) {
                        *o += (pc * w).powi(2);
                    }
                }
                out
            }
        }
    }

    /// `∂/∂x` of `a·f(x) + c·diag(M_FX)(x)`. The `c·diag` part is skipped
    /// when `c` is empty.
    fn pullback(&self, a: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureAt::Identity => Ok(a.to_vec()),
            FeatureAt::Logistic { weights, p, centered } => {
                let mut h = a.to_vec();
                if !c.is_empty() {
                    // r_j = Σ_c p_c² (W_cj − m_j)
                    let mut r = vec![0.0; c.len()];
                    for (k, pk) in p.iter().enumerate() {
                        for (rj, w) in r.iter_mut().zip(centered.row(k)) {
                            *rj += pk * pk * w;
                        }
                    }
                    for (k, hk) in h.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (((cj, w), raw), rj) in c.iter().zip(centered.row(k)).zip(weights.row(k)).zip(&r) {
                            acc += cj * (p[k] * w * w - raw * rj);
                        }
                        *hk += 2.0 * acc;
                    }
                }
                let ph = dot(p, &h);
                let da: Vec<f64> = p.iter().zip(&h).map(|(pk, hk)| pk * (hk - ph)).collect();
                weights.vecmat(&da)
            }
        }
    }
}

/// `Jᵀ diag(w) J` for `J` of shape `D × d`.
fn weighted_gram(j: &Matrix, w: &[f64]) -> SymMatrix {
    let scaled = Matrix::from_fn(j.rows(), j.cols(), |r, c| j.get(r, c) * w[r].sqrt());
    scaled.gram()
}

fn clamp_radicand(q: f64, scale: f64) -> Result<f64> {
    if q < -PSD_TOLERANCE * scale.max(1.0) {
        Err(Error::NotPsd { value: q })
    } else {
        Ok(q.max(0.0))
    }
}

impl MetricProvider {
    pub fn deterministic(g: Mlp) -> Self {
        MetricProvider::Deterministic(Arc::new(g))
    }

    pub fn stochastic(g: StochasticGenerator) -> Self {
        MetricProvider::Stochastic(Arc::new(g))
    }

    pub fn feature_deterministic(g: Mlp, f: FeatureMap) -> Self {
        MetricProvider::FeatureDeterministic {
            generator: Arc::new(g),
            feature: Arc::new(f),
        }
    }

    pub fn feature_stochastic(g: StochasticGenerator, f: FeatureMap) -> Self {
        MetricProvider::FeatureStochastic {
            generator: Arc::new(g),
            feature: Arc::new(f),
        }
    }

    pub fn field(f: impl MetricField + 'static) -> Self {
        MetricProvider::Field(Arc::new(f))
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricProvider::Deterministic(_) => "deterministic",
            MetricProvider::Stochastic(_) => "stochastic",
            MetricProvider::FeatureDeterministic { .. } => "feature_det",
            MetricProvider::FeatureStochastic { .. } => "feature_stoch",
            MetricProvider::Field(_) => "field",
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            MetricProvider::Deterministic(g) => g.input_dim(),
            MetricProvider::Stochastic(g) => g.latent_dim(),
            MetricProvider::FeatureDeterministic { generator, .. } => generator.input_dim(),
            MetricProvider::FeatureStochastic { generator, .. } => generator.latent_dim(),
            MetricProvider::Field(f) => f.dim(),
        }
    }

    pub(crate) fn embedding(&self) -> Option<Embedding<'_>> {
        match self {
            MetricProvider::Deterministic(g) => Some(Embedding::Deterministic(g)),
            MetricProvider::Stochastic(g) => Some(Embedding::Stochastic(g)),
            MetricProvider::FeatureDeterministic { generator, feature } => Some(Embedding::Feature {
                mu: generator,
                sigma: None,
                feature,
            }),
            MetricProvider::FeatureStochastic { generator, feature } => Some(Embedding::Feature {
                mu: generator.mu_net(),
                sigma: Some(generator.sigma_net()),
                feature,
            }),
            MetricProvider::Field(_) => None,
        }
    }

    pub fn metric_at(&self, z: &[f64]) -> Result<SymMatrix> {
        check_dim("latent point", self.latent_dim(), z.len())?;
        ensure_finite(z, "latent point")?;
        let m = match self {
            MetricProvider::Deterministic(g) => {
                let j = g.jacobian(z)?;
                ensure_finite(j.as_slice(), "generator Jacobian")?;
                j.gram()
            }
            MetricProvider::Stochastic(g) => {
                let jm = g.jacobian_mu(z)?;
                let js = g.jacobian_sigma(z)?;
                ensure_finite(jm.as_slice(), "mean Jacobian")?;
                ensure_finite(js.as_slice(), "sigma Jacobian")?;
                jm.gram().add(&js.gram())?
            }
            MetricProvider::FeatureDeterministic { generator, feature } => {
                let x = generator.forward(z)?;
                ensure_finite(&x, "generator output")?;
                let j = generator.jacobian(z)?;
                let a = feature.jacobian(&x)?.matmul(&j)?;
                a.gram()
            }
            MetricProvider::FeatureStochastic { generator, feature } => {
                let x = generator.mean(z)?;
                ensure_finite(&x, "generator output")?;
                let jm = generator.jacobian_mu(z)?;
                let js = generator.jacobian_sigma(z)?;
                let mean_term = match feature.as_ref() {
                    FeatureMap::Identity => jm.gram(),
                    f => f.jacobian(&x)?.matmul(&jm)?.gram(),
                };
                let diag = feature_metric_diagonal(feature, &x)?;
                mean_term.add(&weighted_gram(&js, &diag))?
            }
            MetricProvider::Field(f) => f.metric_at(z)?,
        };
        ensure_finite(m.as_matrix().as_slice(), "metric")?;
        Ok(m)
    }

    /// `√(vᵀ M(z) v)`
    pub fn speed(&self, z: &[f64], v: &[f64]) -> Result<f64> {
        check_dim("velocity", self.latent_dim(), v.len())?;
        let m = self.metric_at(z)?;
        let q = m.quad_form(v)?;
        Ok(clamp_radicand(q, m.frobenius_norm() * dot(v, v))?.sqrt())
    }

    /// `vᵢᵀ M(zᵢ) vᵢ` for each row, via Jacobian-vector products where the
    /// metric comes from a network.
    pub fn speed_sq_batch(&self, points: &Matrix, velocities: &Matrix) -> Result<Vec<f64>> {
        check_dim("latent point", self.latent_dim(), points.cols())?;
        check_dim("velocity", self.latent_dim(), velocities.cols())?;
        check_dim("velocity count", points.rows(), velocities.rows())?;
        let n = points.rows();
        let sq = |m: &Matrix, r: usize| m.row(r).iter().map(|v| v * v).sum::<f64>();
        let out = match self {
            MetricProvider::Deterministic(g) => {
                let (_, jv) = g.jvp_batch(points, velocities)?;
                (0..n).map(|r| sq(&jv, r)).collect()
            }
            MetricProvider::Stochastic(g) => {
                let (_, jm) = g.mu_net().jvp_batch(points, velocities)?;
                let (_, js) = g.sigma_net().jvp_batch(points, velocities)?;
                (0..n).map(|r| sq(&jm, r) + sq(&js, r)).collect()
            }
            MetricProvider::FeatureDeterministic { generator, feature } => {
                let (x, jv) = generator.jvp_batch(points, velocities)?;
                (0..n)
                    .map(|r| {
                        let u = feature_jvp(feature, x.row(r), jv.row(r))?;
                        Ok(dot(&u, &u))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            MetricProvider::FeatureStochastic { generator, feature } => {
                let (x, jm) = generator.mu_net().jvp_batch(points, velocities)?;
                let (_, js) = generator.sigma_net().jvp_batch(points, velocities)?;
                (0..n)
                    .map(|r| {
                        let u = feature_jvp(feature, x.row(r), jm.row(r))?;
                        let diag = feature_metric_diagonal(feature, x.row(r))?;
                        let sigma_term: f64 =
                            diag.iter().zip(js.row(r)).map(|(d, s)| d * s * s).sum();
                        Ok(dot(&u, &u) + sigma_term)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            MetricProvider::Field(f) => (0..n)
                .map(|r| {
                    let m = f.metric_at(points.row(r))?;
                    let v = velocities.row(r);
                    clamp_radicand(m.quad_form(v)?, m.frobenius_norm() * dot(v, v))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        ensure_finite(&out, "speed")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn linear(a: Matrix) -> Mlp {
        let rows = a.rows();
        Mlp::new(vec![Layer::new(a, vec![0.0; rows], Activation::Identity).unwrap()]).unwrap()
    }

    fn stochastic(rng: &mut ChaCha8Rng, d: usize, hidden: usize, out: usize) -> StochasticGenerator {
        let mu = Mlp::random(&[d, hidden, out], &[Activation::Tanh, Activation::Sigmoid], rng).unwrap();
        let sigma = Mlp::random(&[d, hidden, out], &[Activation::Tanh, Activation::Softplus], rng).unwrap();
        StochasticGenerator::new(mu, sigma, 1e-4).unwrap()
    }

    fn logistic(rng: &mut ChaCha8Rng, k: usize, d: usize) -> FeatureMap {
        let w = Matrix::from_fn(k, d, |_, _| rng.random_range(-2.0..2.0));
        FeatureMap::logistic(w, (0..k).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    fn max_abs_diff(a: &SymMatrix, b: &SymMatrix) -> f64 {
        a.as_matrix()
            .as_slice()
            .iter()
            .zip(b.as_matrix().as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_generator_metric_is_constant() {
        let a = Matrix::new(3, 2, vec![1.0, 2.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let expected = a.gram();
        let p = MetricProvider::deterministic(linear(a));
        for z in [[0.0, 0.0], [3.0, -2.0], [-10.0, 7.5]] {
            assert!(max_abs_diff(&p.metric_at(&z).unwrap(), &expected) < 1e-15);
        }
    }

    #[test]
    fn identity_feature_reduces_to_plain_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Mlp::random(&[2, 8, 5], &[Activation::Tanh, Activation::Sigmoid], &mut rng).unwrap();
        let plain = MetricProvider::deterministic(g.clone());
        let feat = MetricProvider::feature_deterministic(g, FeatureMap::Identity);
        let s = stochastic(&mut rng, 2, 8, 5);
        let splain = MetricProvider::stochastic(s.clone());
        let sfeat = MetricProvider::feature_stochastic(s, FeatureMap::Identity);
        for _ in 0..10 {
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            assert!(max_abs_diff(&plain.metric_at(&z).unwrap(), &feat.metric_at(&z).unwrap()) < 1e-12);
            assert!(max_abs_diff(&splain.metric_at(&z).unwrap(), &sfeat.metric_at(&z).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn feature_stochastic_matches_noise_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = stochastic(&mut rng, 2, 6, 5);
        let f = logistic(&mut rng, 3, 5);
        let z = [0.3, -0.4];
        let p = MetricProvider::feature_stochastic(g.clone(), f.clone());
        let m = p.metric_at(&z).unwrap();

        let x = g.mean(&z).unwrap();
        let jfx = f.jacobian(&x).unwrap();
        let jm = g.jacobian_mu(&z).unwrap();
        let js = g.jacobian_sigma(&z).unwrap();
        let draws = 100_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..draws {
            let eps: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let jxz = Matrix::from_fn(5, 2, |r, c| jm.get(r, c) + eps[r] * js.get(r, c));
            let jfz = jfx.matmul(&jxz).unwrap();
            let gram = jfz.transpose().matmul(&jfz).unwrap();
            for (a, v) in acc.iter_mut().zip(gram.as_slice()) {
                *a += v;
            }
        }
        let oracle: Vec<f64> = acc.iter().map(|a| a / draws as f64).collect();
        let diff: f64 = m
            .as_matrix()
            .as_slice()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 0.02, "relative error {}", diff / norm);
    }

    #[test]
    fn constant_sigma_reduces_to_mean_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = Mlp::random(&[2, 6, 4], &[Activation::Tanh, Activation::Sigmoid], &mut rng).unwrap();
        let sigma = Mlp::new(vec![Layer::new(Matrix::zeros(4, 2), vec![0.3; 4], Activation::Softplus).unwrap()]).unwrap();
        let g = StochasticGenerator::new(mu.clone(), sigma, 1e-4).unwrap();
        let f = logistic(&mut rng, 3, 4);
        let stoch = MetricProvider::stochastic(g.clone());
        let det = MetricProvider::deterministic(mu.clone());
        let fstoch = MetricProvider::feature_stochastic(g, f.clone());
        let fdet = MetricProvider::feature_deterministic(mu, f);
        for _ in 0..10 {
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            assert!(max_abs_diff(&stoch.metric_at(&z).unwrap(), &det.metric_at(&z).unwrap()) < 1e-10);
            assert!(max_abs_diff(&fstoch.metric_at(&z).unwrap(), &fdet.metric_at(&z).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn speed_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = stochastic(&mut rng, 2, 6, 7);
        let f = logistic(&mut rng, 4, 7);
        let providers = [
            MetricProvider::deterministic(g.mu_net().clone()),
            MetricProvider::stochastic(g.clone()),
            MetricProvider::feature_deterministic(g.mu_net().clone(), f.clone()),
            MetricProvider::feature_stochastic(g, f),
        ];
        for p in &providers {
            let mut pts = Vec::new();
            let mut vels = Vec::new();
            for _ in 0..5 {
                pts.push(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
                vels.push(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            }
            let batch = p
                .speed_sq_batch(&Matrix::from_rows(&pts).unwrap(), &Matrix::from_rows(&vels).unwrap())
                .unwrap();
            for i in 0..5 {
                let explicit = p.metric_at(&pts[i]).unwrap().quad_form(&vels[i]).unwrap();
                let s = p.speed(&pts[i], &vels[i]).unwrap();
                assert!((s * s - explicit).abs() < 1e-10 * explicit.max(1.0));
                assert!((batch[i] - explicit).abs() < 1e-10 * explicit.max(1.0), "{}", p.name());
            }
            assert_eq!(p.speed(&pts[0], &[0.0, 0.0]).unwrap(), 0.0);
        }
        let id = MetricProvider::deterministic(linear(Matrix::identity(2)));
        assert!((id.speed(&[1.0, 1.0], &[3.0, 4.0]).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn metric_is_psd_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = stochastic(&mut rng, 2, 8, 6);
        let f = logistic(&mut rng, 3, 6);
        let providers = [
            MetricProvider::deterministic(g.mu_net().clone()),
            MetricProvider::stochastic(g.clone()),
            MetricProvider::feature_deterministic(g.mu_net().clone(), f.clone()),
            MetricProvider::feature_stochastic(g, f),
        ];
        for p in &providers {
            for _ in 0..100 {
                let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let m = p.metric_at(&z).unwrap();
                let e = m.eigen().unwrap();
                assert!(e.eigenvalues[0] >= -1e-10 * m.frobenius_norm());
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = MetricProvider::deterministic(linear(Matrix::identity(2)));
        assert!(matches!(p.metric_at(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }
}
