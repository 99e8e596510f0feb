//! Monte-Carlo estimate of how much shorter than straight lines the
//! shortest curves found along steep directions are.
//!
//! Each sample draws `x_A ~ N(0, I)`, steps a distance `α` along the metric's
//! top eigenvector (turned to face the origin) to get `x_B`, and records the
//! relative improvement `(d_straight − d_short) / d_straight` of the
//! shortened curve. Sample `i` draws from its own ChaCha stream, so results
//! do not depend on scheduling or the number of workers.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{shorten, CurveOptConfig};
use crate::linalg::dot;
use crate::metric::MetricProvider;
use crate::network::LatentPoint;

/// Share of failed samples above which a run is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub alpha: f64,
    pub seed: u64,
    pub shorten: CurveOptConfig,
    pub histogram_bins: usize,
}

impl McConfig {
    pub fn new(n_samples: usize, alpha: f64, seed: u64) -> Self {
        McConfig {
            n_samples,
            alpha,
            seed,
            shorten: CurveOptConfig::default(),
            histogram_bins: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::InvalidInput("histogram needs at least one bin".into()));
        }
        self.shorten.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRecord {
    pub index: usize,
    pub x_a: LatentPoint,
    pub x_b: LatentPoint,
    pub d_straight: f64,
    pub d_short: f64,
    pub rel_improvement: f64,
    pub fallback_used: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform bins on `[0, max(values)]`, last bin closed.
    pub fn of(values: &[f64], bins: usize) -> Self {
        let max = values.iter().cloned().fold(0.0, f64::max);
        let hi = if max > 0.0 { max } else { 1.0 };
        let edges = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / hi) * bins as f64).floor().max(0.0) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single record.
    pub std: f64,
    pub histogram: Histogram,
    pub fallbacks: usize,
    pub failures: Vec<SampleFailure>,
    pub records: Vec<ImprovementRecord>,
}

/// RNG for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Unit top eigenvector of `M(x)`, signed to point towards the origin.
pub fn steepest_direction(p: &MetricProvider, x: &[f64]) -> Result<Vec<f64>> {
    let eig = p.metric_at(x)?.psd_eigen()?;
    let (_, mut v) = eig.max();
    if dot(&v, x) > 0.0 {
        v.iter_mut().for_each(|c| *c = -*c);
    }
    Ok(v)
}

pub fn sample_pair(p: &MetricProvider, alpha: f64, rng: &mut impl Rng) -> Result<(LatentPoint, LatentPoint)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput("alpha must be positive".into()));
    }
    let x_a: Vec<f64> = (0..p.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
    let v = steepest_direction(p, &x_a)?;
    let x_b = x_a.iter().zip(&v).map(|(a, vi)| a + alpha * vi).collect();
    Ok((LatentPoint(x_a), LatentPoint(x_b)))
}

fn one_sample(p: &MetricProvider, cfg: &McConfig, index: usize) -> Result<ImprovementRecord> {
    let mut rng = sample_rng(cfg.seed, index);
    let (x_a, x_b) = sample_pair(p, cfg.alpha, &mut rng)?;
    let r = shorten(&x_a, &x_b, p, &cfg.shorten)?;
    Ok(ImprovementRecord {
        index,
        rel_improvement: r.rel_improvement(),
        d_straight: r.d_straight,
        d_short: r.d_short,
        fallback_used: r.fallback_used,
        x_a,
        x_b,
    })
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn summarize(results: Vec<Result<ImprovementRecord>>, bins: usize) -> Result<McSummary> {
    let total = results.len();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(SampleFailure {
                index,
                reason: e.to_string(),
            }),
        }
    }
    if records.is_empty() || failures.len() as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::TooManyFailures {
            failed: failures.len(),
            total,
        });
    }
    let values: Vec<f64> = records.iter().map(|r| r.rel_improvement).collect();
    let (mean, std) = mean_and_std(&values);
    Ok(McSummary {
        mean,
        std,
        histogram: Histogram::of(&values, bins),
        fallbacks: records.iter().filter(|r| r.fallback_used).count(),
        failures,
        records,
    })
}

/// Runs every sample on the current rayon pool.
pub fn run_monte_carlo(p: &MetricProvider, cfg: &McConfig) -> Result<McSummary> {
    cfg.validate()?;
    let results: Vec<Result<ImprovementRecord>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| one_sample(p, cfg, i))
        .collect();
    summarize(results, cfg.histogram_bins)
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], level: f64, resamples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (at(tail), at(1.0 - tail))
}

impl McSummary {
    pub fn records_csv(&self) -> String {
        let d = self.records.first().map_or(0, |r| r.x_a.dim());
        let mut out = String::from("index");
        for prefix in ["x_a", "x_b"] {
            for c in 0..d {
                write!(out, ",{prefix}_{c}").unwrap();
            }
        }
        out.push_str(",d_straight,d_short,rel_improvement\n");
        for r in &self.records {
            write!(out, "{}", r.index).unwrap();
            for v in r.x_a.iter().chain(r.x_b.iter()) {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{},{},{}", r.d_straight, r.d_short, r.rel_improvement).unwrap();
        }
        out
    }

    /// Everything but the per-sample records.
    pub fn summary_json(&self) -> String {
        let v = serde_json::json!({
            "samples": self.records.len() + self.failures.len(),
            "succeeded": self.records.len(),
            "mean": self.mean,
            "std": self.std,
            "fallbacks": self.fallbacks,
            "failures": self.failures,
            "histogram": self.histogram,
        });
        serde_json::to_string_pretty(&v).expect("summary serializes")
    }
}
