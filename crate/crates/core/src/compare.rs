//! Comparing interpolations across generative models.
//!
//! Interpolations of two models are only comparable when their latent
//! neighbourhoods are similarly curved. For each sampled pair of test images
//! both models encode the endpoints and shorten the straight line between
//! them; pairs whose relative improvements differ by at most a threshold are
//! selected.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::geodesic::{shorten, CurveOptConfig};
use crate::metric::MetricProvider;
use crate::network::{argmax, FeatureMap, LatentPoint, StochasticGenerator};
use crate::spline::BSplineCurve;
use crate::training::Vae;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub start_index: usize,
    pub end_index: usize,
}

/// `n` disjoint index pairs drawn uniformly without replacement.
pub fn sample_test_pairs(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<PairSample>> {
    if ds.len() < 2 * n {
        return Err(Error::DatasetTooSmall {
            needed: 2 * n,
            available: ds.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, ds.len(), 2 * n).into_vec();
    Ok(picks
        .chunks(2)
        .map(|c| PairSample {
            start_index: c[0],
            end_index: c[1],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPath {
    pub z0: LatentPoint,
    pub z1: LatentPoint,
    pub d_straight: f64,
    pub d_short: f64,
    pub rel_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pair: usize,
    pub start_index: usize,
    pub end_index: usize,
    pub a: ModelPath,
    pub b: ModelPath,
    pub gap: f64,
    pub selected: bool,
}

fn model_path(vae: &Vae, p: &MetricProvider, x0: &[f64], x1: &[f64], cfg: &CurveOptConfig) -> Result<ModelPath> {
    let z0 = vae.encoder.encode(x0)?;
    let z1 = vae.encoder.encode(x1)?;
    let r = shorten(&z0, &z1, p, cfg)?;
    Ok(ModelPath {
        z0,
        z1,
        d_straight: r.d_straight,
        d_short: r.d_short,
        rel_improvement: r.rel_improvement(),
    })
}

/// One row per pair, in pair order. Pairs run on the current rayon pool.
pub fn compare_models(
    model_a: &Vae,
    model_b: &Vae,
    ds: &Dataset,
    pairs: &[PairSample],
    threshold: f64,
    cfg: &CurveOptConfig,
) -> Result<Vec<ComparisonRow>> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidInput("threshold must be nonnegative".into()));
    }
    for vae in [model_a, model_b] {
        check_dim("encoder input", ds.image_dim(), vae.encoder.input_dim())?;
        check_dim("encoder latent", vae.generator.latent_dim(), vae.encoder.latent_dim())?;
    }
    let pa = MetricProvider::stochastic(model_a.generator.clone());
    let pb = MetricProvider::stochastic(model_b.generator.clone());
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let x0 = ds.image(pair.start_index);
            let x1 = ds.image(pair.end_index);
            let a = model_path(model_a, &pa, x0, x1, cfg)?;
            let b = model_path(model_b, &pb, x0, x1, cfg)?;
            let gap = (a.rel_improvement - b.rel_improvement).abs();
            Ok(ComparisonRow {
                pair: i,
                start_index: pair.start_index,
                end_index: pair.end_index,
                a,
                b,
                gap,
                selected: gap <= threshold,
            })
        })
        .collect()
}

/// Recomputes the selection flags for another threshold.
pub fn reselect(rows: &mut [ComparisonRow], threshold: f64) {
    for r in rows {
        r.selected = r.gap <= threshold;
    }
}

/// Rows by increasing gap, ties in pair order.
pub fn ranked(rows: &[ComparisonRow]) -> Vec<&ComparisonRow> {
    let mut out: Vec<&ComparisonRow> = rows.iter().collect();
    out.sort_by(|x, y| x.gap.total_cmp(&y.gap).then(x.pair.cmp(&y.pair)));
    out
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let d = rows.first().map_or(0, |r| r.a.z0.dim());
    let mut out = String::from("pair,start_index,end_index");
    for m in ["a", "b"] {
        for end in ["z0", "z1"] {
            for c in 0..d {
                write!(out, ",{m}_{end}_{c}").unwrap();
            }
        }
        write!(out, ",{m}_d_straight,{m}_d_short,{m}_rel_improvement").unwrap();
    }
    out.push_str(",gap,selected\n");
    for r in rows {
        write!(out, "{},{},{}", r.pair, r.start_index, r.end_index).unwrap();
        for m in [&r.a, &r.b] {
            for v in m.z0.iter().chain(m.z1.iter()) {
                write!(out, ",{v}").unwrap();
            }
            write!(out, ",{},{},{}", m.d_straight, m.d_short, m.rel_improvement).unwrap();
        }
        writeln!(out, ",{},{}", r.gap, r.selected).unwrap();
    }
    out
}

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStrip {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImageStrip {
    /// Tiles of `rows × cols` pixels placed left to right.
    pub fn from_frames(frames: &[Vec<f64>], rows: usize, cols: usize) -> Result<Self> {
        for f in frames {
            check_dim("frame", rows * cols, f.len())?;
        }
        let width = cols * frames.len();
        let mut pixels = vec![0.0; width * rows];
        for (k, f) in frames.iter().enumerate() {
            for r in 0..rows {
                pixels[r * width + k * cols..r * width + (k + 1) * cols]
                    .copy_from_slice(&f[r * cols..(r + 1) * cols]);
            }
        }
        Ok(ImageStrip {
            width,
            height: rows,
            pixels,
        })
    }

    /// Strips of equal width stacked top to bottom.
    pub fn stack(strips: &[ImageStrip]) -> Result<Self> {
        let width = strips.first().map_or(0, |s| s.width);
        let mut pixels = Vec::new();
        for s in strips {
            check_dim("strip width", width, s.width)?;
            pixels.extend_from_slice(&s.pixels);
        }
        Ok(ImageStrip {
            width,
            height: strips.iter().map(|s| s.height).sum(),
            pixels,
        })
    }

    /// Binary 8-bit PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

fn uniform_ts(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Mean decodes `μ(γ(t_i))` at `n_frames` uniform parameters.
pub fn decode_frames(gen: &StochasticGenerator, curve: &BSplineCurve, n_frames: usize) -> Result<Vec<Vec<f64>>> {
    if n_frames < 2 {
        return Err(Error::InvalidInput("need at least 2 frames".into()));
    }
    check_dim("curve", gen.latent_dim(), curve.dim())?;
    uniform_ts(n_frames)
        .into_iter()
        .map(|t| gen.mean(&curve.eval(t)?))
        .collect()
}

pub fn interpolation_sequence(
    gen: &StochasticGenerator,
    curve: &BSplineCurve,
    n_frames: usize,
    shape: (usize, usize),
) -> Result<ImageStrip> {
    ImageStrip::from_frames(&decode_frames(gen, curve, n_frames)?, shape.0, shape.1)
}

/// Number of consecutive evaluation points whose decodes the classifier
/// assigns to different classes.
pub fn class_transition_count(
    f: &FeatureMap,
    gen: &StochasticGenerator,
    curve: &BSplineCurve,
    n_eval: usize,
) -> Result<usize> {
    if f.classes().is_none() {
        return Err(Error::Unsupported("class transitions need a classifier feature map".into()));
    }
    if n_eval < 2 {
        return Err(Error::InvalidInput("need at least 2 evaluation points".into()));
    }
    let classes = class_sequence(f, gen, curve, n_eval)?;
    Ok(classes.windows(2).filter(|w| w[0] != w[1]).count())
}

/// Predicted class of `μ(γ(t_i))` along a uniform grid.
pub fn class_sequence(
    f: &FeatureMap,
    gen: &StochasticGenerator,
    curve: &BSplineCurve,
    n_eval: usize,
) -> Result<Vec<usize>> {
    decode_frames(gen, curve, n_eval)?
        .iter()
        .map(|x| Ok(argmax(&f.forward(x)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::network::{Activation, Layer, Mlp};
    use crate::training::Encoder;
    use rand::Rng;

    fn toy_dataset(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        Dataset::new(images, vec![1; n], 2, 2).unwrap()
    }

    fn toy_vae(seed: u64, hidden: usize) -> Vae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Mlp::random(&[4, hidden, 4], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
        let mu = Mlp::random(&[2, hidden, 4], &[Activation::Tanh, Activation::Sigmoid], &mut rng).unwrap();
        let sigma = Mlp::random(&[2, hidden, 4], &[Activation::Tanh, Activation::Softplus], &mut rng).unwrap();
        Vae {
            encoder: Encoder::new(enc).unwrap(),
            generator: StochasticGenerator::new(mu, sigma, 1e-4).unwrap(),
        }
    }

    fn quick_cfg() -> CurveOptConfig {
        CurveOptConfig {
            max_iters: 40,
            max_control_points: 5,
            ..CurveOptConfig::default()
        }
    }

    #[test]
    fn pairs_are_disjoint_and_reproducible() {
        let ds = toy_dataset(50);
        let a = sample_test_pairs(&ds, 20, 3).unwrap();
        assert_eq!(a, sample_test_pairs(&ds, 20, 3).unwrap());
        assert_eq!(a.len(), 20);
        let mut all: Vec<usize> = a.iter().flat_map(|p| [p.start_index, p.end_index]).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 40);
        assert!(matches!(
            sample_test_pairs(&ds, 26, 3),
            Err(Error::DatasetTooSmall { needed: 52, available: 50 })
        ));
    }

    #[test]
    fn self_comparison_selects_everything() {
        let ds = toy_dataset(12);
        let pairs = sample_test_pairs(&ds, 4, 1).unwrap();
        let vae = toy_vae(2, 6);
        let rows = compare_models(&vae, &vae, &ds, &pairs, 0.0, &quick_cfg()).unwrap();
        assert!(rows.iter().all(|r| r.gap == 0.0 && r.selected));
    }

    #[test]
    fn comparison_is_symmetric_and_monotone() {
        let ds = toy_dataset(12);
        let pairs = sample_test_pairs(&ds, 4, 1).unwrap();
        let (a, b) = (toy_vae(2, 6), toy_vae(3, 3));
        let ab = compare_models(&a, &b, &ds, &pairs, 0.01, &quick_cfg()).unwrap();
        let ba = compare_models(&b, &a, &ds, &pairs, 0.01, &quick_cfg()).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(x.a, y.b);
            assert_eq!(x.b, y.a);
            assert_eq!(x.gap, y.gap);
            assert_eq!(x.selected, y.selected);
        }
        let mut rows = ab.clone();
        let mut prev: Vec<bool> = vec![false; rows.len()];
        for t in [0.0, 0.001, 0.01, 0.1, 1.0] {
            reselect(&mut rows, t);
            for (p, r) in prev.iter().zip(&rows) {
                assert!(!p || r.selected);
            }
            prev = rows.iter().map(|r| r.selected).collect();
        }
        let order = ranked(&ab);
        assert!(order.windows(2).all(|w| w[0].gap <= w[1].gap));
        let csv = comparison_csv(&ab);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn strips_hold_endpoint_decodes() {
        let vae = toy_vae(4, 5);
        let gen = &vae.generator;
        let z0 = LatentPoint(vec![-1.0, 0.5]);
        let z1 = LatentPoint(vec![0.8, -0.2]);
        let c = BSplineCurve::straight_line(&z0, &z1, 2).unwrap();
        let frames = decode_frames(gen, &c, 2).unwrap();
        assert_eq!(frames, vec![gen.mean(&z0).unwrap(), gen.mean(&z1).unwrap()]);
        let strip = interpolation_sequence(gen, &c, 5, (2, 2)).unwrap();
        assert_eq!((strip.width, strip.height), (10, 2));
        let last = gen.mean(&z1).unwrap();
        assert_eq!(strip.pixels[8], last[0]);
        assert_eq!(strip.pixels[9], last[1]);
        assert_eq!(strip.pixels[18], last[2]);
        let pgm = strip.to_pgm();
        assert!(pgm.starts_with(b"P5\n10 2\n255\n"));
        assert_eq!(pgm.len(), 12 + 20);
        let tall = ImageStrip::stack(&[strip.clone(), strip]).unwrap();
        assert_eq!(tall.height, 4);
        assert!(decode_frames(gen, &c, 1).is_err());
    }

    #[test]
    fn class_transitions() {
        // Decoder whose first output grows with z₀; classifier thresholds it.
        let mu = Mlp::new(vec![Layer::new(
            Matrix::new(2, 2, vec![4.0, 0.0, 0.0, 0.0]).unwrap(),
            vec![0.0, 0.0],
            Activation::Sigmoid,
        )
        .unwrap()])
        .unwrap();
        let sigma = Mlp::new(vec![Layer::new(Matrix::zeros(2, 2), vec![0.0; 2], Activation::Softplus).unwrap()]).unwrap();
        let gen = StochasticGenerator::new(mu, sigma, 1e-4).unwrap();
        let f = FeatureMap::logistic(Matrix::new(2, 2, vec![10.0, 0.0, -10.0, 0.0]).unwrap(), vec![-5.0, 5.0]).unwrap();
        let c = BSplineCurve::straight_line(&LatentPoint(vec![-1.0, 0.0]), &LatentPoint(vec![1.0, 0.0]), 2).unwrap();
        let seq = class_sequence(&f, &gen, &c, 10).unwrap();
        // p₀ = sigmoid(4 z₀) crosses 0.5 at z₀ = 0, so class 1 then class 0.
        let expected: Vec<usize> = (0..10)
            .map(|i| {
                let z = -1.0 + 2.0 * i as f64 / 9.0;
                let x0 = crate::network::sigmoid(4.0 * z);
                if 10.0 * x0 - 5.0 > -10.0 * x0 + 5.0 { 0 } else { 1 }
            })
            .collect();
        assert_eq!(seq, expected);
        assert_eq!(class_transition_count(&f, &gen, &c, 10).unwrap(), 1);
        let still = BSplineCurve::new(vec![LatentPoint(vec![0.3, 0.1]); 4], vec![0., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
        assert_eq!(class_transition_count(&f, &gen, &still, 20).unwrap(), 0);
        assert!(matches!(
            class_transition_count(&FeatureMap::Identity, &gen, &c, 5),
            Err(Error::Unsupported(_))
        ));
    }
}
