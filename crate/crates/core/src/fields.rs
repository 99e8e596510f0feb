//! Diagnostics of two-dimensional latent spaces: scalar summaries of the
//! metric on a grid, and streamlines of its extreme eigenvector fields.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, dot, log_sqrt_det};
use crate::metric::MetricProvider;
use crate::network::LatentPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    /// `ln(λ_max / λ_min)`
    LogCondition,
    /// `½ ln det M`
    LogSqrtDet,
}

impl ScalarKind {
    pub fn name(self) -> &'static str {
        match self {
            ScalarKind::LogCondition => "log_condition",
            ScalarKind::LogSqrtDet => "log_sqrt_det",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let b = Bounds { xmin, xmax, ymin, ymax };
        if !(xmin < xmax && ymin < ymax) || [xmin, xmax, ymin, ymax].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("bounds {b:?} are not ordered and finite")));
        }
        Ok(b)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        (self.xmin..=self.xmax).contains(&p[0]) && (self.ymin..=self.ymax).contains(&p[1])
    }
}

fn require_planar(p: &MetricProvider) -> Result<()> {
    if p.latent_dim() != 2 {
        return Err(Error::InvalidInput(format!(
            "field diagnostics need a 2-dimensional latent space, got {}",
            p.latent_dim()
        )));
    }
    Ok(())
}

/// Scalar field sampled on the nodes of a regular grid. `values[iy·nx + ix]`
/// belongs to node `(x_ix, y_iy)`; NaN marks nodes where the metric is
/// singular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub bounds: Bounds,
    pub nx: usize,
    pub ny: usize,
    pub kind: ScalarKind,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn node(&self, ix: usize, iy: usize) -> [f64; 2] {
        grid_node(&self.bounds, self.nx, self.ny, ix, iy)
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    pub fn to_csv(&self) -> String {
        let b = &self.bounds;
        let mut out = String::new();
        writeln!(out, "# kind={}", self.kind.name()).unwrap();
        writeln!(out, "# bounds={},{},{},{}", b.xmin, b.xmax, b.ymin, b.ymax).unwrap();
        writeln!(out, "# resolution={}x{}", self.nx, self.ny).unwrap();
        writeln!(out, "# missing=NaN").unwrap();
        out.push_str("x,y,value\n");
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let [x, y] = self.node(ix, iy);
                writeln!(out, "{x},{y},{}", self.value(ix, iy)).unwrap();
            }
        }
        out
    }
}

fn grid_node(b: &Bounds, nx: usize, ny: usize, ix: usize, iy: usize) -> [f64; 2] {
    [
        b.xmin + (b.xmax - b.xmin) * ix as f64 / (nx - 1) as f64,
        b.ymin + (b.ymax - b.ymin) * iy as f64 / (ny - 1) as f64,
    ]
}

/// Value of `kind` at `z`, or NaN where the metric is singular.
pub fn scalar_at(p: &MetricProvider, kind: ScalarKind, z: &[f64]) -> Result<f64> {
    let m = p.metric_at(z)?;
    let v = match kind {
        ScalarKind::LogCondition => condition_number(&m).map(f64::ln),
        ScalarKind::LogSqrtDet => log_sqrt_det(&m),
    };
    match v {
        Ok(v) => Ok(v),
        Err(Error::SingularMetric { .. } | Error::NotPositiveDefinite { .. } | Error::NotPsd { .. }) => {
            Ok(f64::NAN)
        }
        Err(e) => Err(e),
    }
}

/// Evaluates the nodes on the current rayon pool.
pub fn scalar_grid(
    p: &MetricProvider,
    kind: ScalarKind,
    bounds: Bounds,
    nx: usize,
    ny: usize,
) -> Result<GridField> {
    require_planar(p)?;
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidInput("grid resolution must be at least 2 per axis".into()));
    }
    let values = (0..nx * ny)
        .into_par_iter()
        .map(|k| scalar_at(p, kind, &grid_node(&bounds, nx, ny, k % nx, k / nx)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridField {
        bounds,
        nx,
        ny,
        kind,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenKind {
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamlineOptions {
    pub step_length: f64,
    pub n_steps: usize,
    /// Stop before leaving this box.
    pub bounds: Option<Bounds>,
    /// Orientation reference for the first step; `(1, 0)` if absent.
    pub initial_direction: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    pub points: Vec<LatentPoint>,
    /// Why the line ended early, if it did.
    pub stopped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamlineSet {
    pub kind: EigenKind,
    pub lines: Vec<Streamline>,
}

impl StreamlineSet {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("streamline_id,point_index,x,y\n");
        for (id, line) in self.lines.iter().enumerate() {
            for (k, p) in line.points.iter().enumerate() {
                writeln!(out, "{id},{k},{},{}", p[0], p[1]).unwrap();
            }
        }
        out
    }
}

/// Explicit Euler steps along the unit eigenvector of the smallest or largest
/// eigenvalue, flipped as needed to keep turning less than 90 degrees.
pub fn streamline(p: &MetricProvider, kind: EigenKind, seed: &[f64], opts: &StreamlineOptions) -> Result<Streamline> {
    require_planar(p)?;
    if !(opts.step_length > 0.0 && opts.step_length.is_finite()) {
        return Err(Error::InvalidInput("step length must be positive".into()));
    }
    let mut x = seed.to_vec();
    let mut points = vec![LatentPoint(x.clone())];
    let mut prev = opts.initial_direction.unwrap_or([1.0, 0.0]).to_vec();
    let mut stopped = None;
    for _ in 0..opts.n_steps {
        let eig = match p.metric_at(&x).and_then(|m| m.psd_eigen()) {
            Ok(e) => e,
            Err(e) => {
                stopped = Some(e.to_string());
                break;
            }
        };
        let (_, mut v) = match kind {
            EigenKind::Min => eig.min(),
            EigenKind::Max => eig.max(),
        };
        if dot(&v, &prev) < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        let next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + opts.step_length * b).collect();
        if opts.bounds.is_some_and(|b| !b.contains(&next)) {
            stopped = Some("left the domain".into());
            break;
        }
        points.push(LatentPoint(next.clone()));
        x = next;
        prev = v;
    }
    Ok(Streamline { points, stopped })
}

pub fn streamlines(
    p: &MetricProvider,
    kind: EigenKind,
    seeds: &[LatentPoint],
    opts: &StreamlineOptions,
) -> Result<StreamlineSet> {
    let lines = seeds
        .par_iter()
        .map(|s| streamline(p, kind, s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamlineSet { kind, lines })
}
