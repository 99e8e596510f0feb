//! Curve length, path energy and the curve shortener.
//!
//! Network metrics use the discrete energy `S·Σ‖y(t_{i+1}) − y(t_i)‖²` over
//! output samples `y = g(γ(t))` (or `[μ, σ]` side by side), whose gradient
//! needs only vector-Jacobian products. Feature metrics difference the
//! feature outputs `f(μ(γ(t)))`; the stochastic one adds the σ differences
//! weighted by the segment mean of `diag(M_FX)`. Metric fields integrate
//! `γ̇ᵀ M γ̇` by the trapezoid rule and are differentiated numerically.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::metric::{Embedding, Forward, MetricProvider};
use crate::network::LatentPoint;
use crate::spline::{BSplineCurve, ORDER};

pub const FD_STEP: f64 = 1e-4;
const MAX_HALVINGS: usize = 20;
/// Largest multiple of the configured step the line search may grow to.
const MAX_STEP_GROWTH: f64 = 65536.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Chain rule through output differences; network metrics only.
    ExactVjp,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveOptConfig {
    /// Trapezoid intervals for curve length.
    pub quad_points: usize,
    /// Intervals of the energy discretization.
    pub energy_segments: usize,
    pub step_size: f64,
    pub max_iters: usize,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub max_control_points: usize,
    /// `None` picks exact gradients where available.
    pub gradient_mode: Option<GradientMode>,
}

impl Default for CurveOptConfig {
    fn default() -> Self {
        CurveOptConfig {
            quad_points: 256,
            energy_segments: 64,
            step_size: 1e-2,
            max_iters: 2000,
            plateau_window: 20,
            plateau_rel_tol: 1e-3,
            max_control_points: 12,
            gradient_mode: None,
        }
    }
}

impl CurveOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("curve optimizer: {what}")));
        if self.quad_points < 2 {
            return bad("quad_points must be at least 2");
        }
        if self.energy_segments < 1 {
            return bad("energy_segments must be positive");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.max_iters == 0 || self.plateau_window == 0 {
            return bad("max_iters and plateau_window must be positive");
        }
        if !(self.plateau_rel_tol > 0.0) {
            return bad("plateau_rel_tol must be positive");
        }
        if self.max_control_points < ORDER {
            return bad("max_control_points must be at least 4");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShortenResult {
    pub curve: BSplineCurve,
    pub d_straight: f64,
    pub d_short: f64,
    pub iterations: usize,
    pub control_points: usize,
    pub fallback_used: bool,
    /// Energy after every accepted step, starting with the straight line.
    pub energy_history: Vec<f64>,
}

impl ShortenResult {
    pub fn rel_improvement(&self) -> f64 {
        (self.d_straight - self.d_short) / self.d_straight
    }
}

fn uniform_speeds(curve: &BSplineCurve, p: &MetricProvider, n: usize) -> Result<Vec<f64>> {
    check_dim("curve", p.latent_dim(), curve.dim())?;
    let d = curve.dim();
    let mut pts = Matrix::zeros(n + 1, d);
    let mut vel = Matrix::zeros(n + 1, d);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        pts.row_mut(i).copy_from_slice(&curve.eval(t)?);
        vel.row_mut(i).copy_from_slice(&curve.derivative(t)?);
    }
    p.speed_sq_batch(&pts, &vel)
}

fn trapezoid(values: &[f64]) -> f64 {
    let n = values.len() - 1;
    let inner: f64 = values[1..n].iter().sum();
    (inner + 0.5 * (values[0] + values[n])) / n as f64
}

/// Trapezoid rule for `∫₀¹ √(γ̇ᵀ M γ̇) dt` over `n` uniform intervals.
pub fn curve_length(curve: &BSplineCurve, p: &MetricProvider, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidInput("curve length needs at least 2 intervals".into()));
    }
    let speeds: Vec<f64> = uniform_speeds(curve, p, n)?.into_iter().map(f64::sqrt).collect();
    Ok(trapezoid(&speeds))
}

/// Spline basis weights at the energy nodes `t_i = i/S` of one knot vector.
struct Nodes {
    dim: usize,
    segments: usize,
    basis: Vec<(usize, [f64; ORDER])>,
    dbasis: Vec<(usize, [f64; ORDER])>,
}

impl Nodes {
    fn new(curve: &BSplineCurve, segments: usize) -> Result<Self> {
        let mut basis = Vec::with_capacity(segments + 1);
        let mut dbasis = Vec::with_capacity(segments + 1);
        for i in 0..=segments {
            let t = i as f64 / segments as f64;
            basis.push(curve.basis_at(t)?);
            dbasis.push(curve.derivative_weights(t)?);
        }
        Ok(Nodes {
            dim: curve.dim(),
            segments,
            basis,
            dbasis,
        })
    }

    fn combine(&self, w: &(usize, [f64; ORDER]), cps: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let d = self.dim;
        for (k, wk) in w.1.iter().enumerate() {
            let p = &cps[(w.0 + k) * d..(w.0 + k + 1) * d];
            for (o, x) in out.iter_mut().zip(p) {
                *o += wk * x;
            }
        }
    }

    /// Whether node `i` depends on control point `j`.
    fn touches(&self, i: usize, j: usize) -> bool {
        let hit = |w: &(usize, [f64; ORDER])| j >= w.0 && j < w.0 + ORDER;
        hit(&self.basis[i]) || hit(&self.dbasis[i])
    }
}

#[derive(Clone, Copy)]
enum Form<'a> {
    Discrete(Embedding<'a>),
    Quadrature(&'a MetricProvider),
}

impl<'a> Form<'a> {
    fn of(p: &'a MetricProvider) -> Self {
        match p.embedding() {
            Some(e) => Form::Discrete(e),
            None => Form::Quadrature(p),
        }
    }

    /// Per-node quantities for the listed `(node, control points)` jobs,
    /// stacked in job order.
    fn node_values(&self, nodes: &Nodes, jobs: &[(usize, &[f64])]) -> Result<Matrix> {
        let d = nodes.dim;
        let mut pts = Matrix::zeros(jobs.len(), d);
        for (r, (i, cps)) in jobs.iter().enumerate() {
            nodes.combine(&nodes.basis[*i], cps, pts.row_mut(r));
        }
        match self {
            Form::Discrete(e) => e.outputs(&pts),
            Form::Quadrature(p) => {
                let mut vel = Matrix::zeros(jobs.len(), d);
                for (r, (i, cps)) in jobs.iter().enumerate() {
                    nodes.combine(&nodes.dbasis[*i], cps, vel.row_mut(r));
                }
                let s = p.speed_sq_batch(&pts, &vel)?;
                Ok(Matrix::from_raw(s.len(), 1, s))
            }
        }
    }

    fn energy(&self, segments: usize, values: &Matrix) -> f64 {
        match self {
            Form::Discrete(e) => {
                let ws = e.weighted_width();
                let plain = values.cols() - 2 * ws;
                let mut acc = 0.0;
                for i in 0..segments {
                    let (a, b) = (values.row(i + 1), values.row(i));
                    acc += a[..plain].iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    for j in plain..plain + ws {
                        let w = 0.5 * (a[j + ws] + b[j + ws]);
                        acc += w * (a[j] - b[j]) * (a[j] - b[j]);
                    }
                }
                segments as f64 * acc
            }
            Form::Quadrature(_) => trapezoid(values.as_slice()),
        }
    }
}

fn flat_control_points(curve: &BSplineCurve) -> Vec<f64> {
    curve.control_points().iter().flat_map(|p| p.iter().copied()).collect()
}

fn all_values(form: &Form, nodes: &Nodes, cps: &[f64]) -> Result<Matrix> {
    let jobs: Vec<(usize, &[f64])> = (0..=nodes.segments).map(|i| (i, cps)).collect();
    form.node_values(nodes, &jobs)
}

fn energy_of(form: &Form, nodes: &Nodes, cps: &[f64]) -> Result<f64> {
    Ok(form.energy(nodes.segments, &all_values(form, nodes, cps)?))
}

/// Discrete energy for plain generators, trapezoid energy otherwise.
pub fn path_energy(curve: &BSplineCurve, p: &MetricProvider, segments: usize) -> Result<f64> {
    if segments < 1 {
        return Err(Error::InvalidInput("path energy needs at least 1 segment".into()));
    }
    check_dim("curve", p.latent_dim(), curve.dim())?;
    let form = Form::of(p);
    let nodes = Nodes::new(curve, segments)?;
    energy_of(&form, &nodes, &flat_control_points(curve))
}

fn node_points(nodes: &Nodes, cps: &[f64]) -> Matrix {
    let mut pts = Matrix::zeros(nodes.segments + 1, nodes.dim);
    for i in 0..=nodes.segments {
        nodes.combine(&nodes.basis[i], cps, pts.row_mut(i));
    }
    pts
}

/// Discrete energy and its gradient from one traced forward pass.
fn discrete_gradient(e: &Embedding, nodes: &Nodes, cps: &[f64], fwd: &Forward) -> Result<(f64, Vec<f64>)> {
    let d = nodes.dim;
    let count = cps.len() / d;
    let s = nodes.segments;
    let base = &fwd.values;
    let ws = e.weighted_width();
    let plain = base.cols() - 2 * ws;
    let sf = s as f64;
    let mut gy = Matrix::zeros(s + 1, base.cols());
    for i in 0..s {
        let (a, b) = (base.row(i + 1), base.row(i));
        let mut up = vec![0.0; base.cols()];
        for c in 0..plain {
            up[c] = 2.0 * sf * (a[c] - b[c]);
        }
        for c in plain..plain + ws {
            let diff = a[c] - b[c];
            up[c] = sf * (a[c + ws] + b[c + ws]) * diff;
            up[c + ws] = 0.5 * sf * diff * diff;
        }
        for (c, u) in up.iter().enumerate() {
            gy.row_mut(i + 1)[c] += u;
            gy.row_mut(i)[c] += if c < plain + ws { -u } else { *u };
        }
    }
    let gz = e.vjp(fwd, &gy)?;
    let mut grad = vec![0.0; (count - 2) * d];
    for i in 0..=s {
        let (first, w) = &nodes.basis[i];
        for (k, wk) in w.iter().enumerate() {
            let j = first + k;
            if j == 0 || j == count - 1 {
                continue;
            }
            for (gc, v) in grad[(j - 1) * d..j * d].iter_mut().zip(gz.row(i)) {
                *gc += wk * v;
            }
        }
    }
    Ok((Form::Discrete(*e).energy(s, base), grad))
}

fn gradient_impl(
    form: &Form,
    nodes: &Nodes,
    cps: &[f64],
    mode: GradientMode,
) -> Result<(f64, Vec<f64>)> {
    let d = nodes.dim;
    let count = cps.len() / d;
    let s = nodes.segments;
    let unsupported = |p: &MetricProvider| {
        Err(Error::Unsupported(format!(
            "{:?} gradients are not available for the {} metric",
            mode,
            p.name()
        )))
    };
    match (mode, form) {
        (GradientMode::ExactVjp, Form::Quadrature(p)) => return unsupported(p),
        (GradientMode::ExactVjp, Form::Discrete(e)) => {
            let fwd = e.forward(&node_points(nodes, cps))?;
            return Ok(discrete_gradient(e, nodes, cps, &fwd)?);
        }
        _ => {}
    }
    let base = all_values(form, nodes, cps)?;
    let energy = form.energy(s, &base);
    let mut grad = vec![0.0; (count - 2) * d];
    match (mode, form) {
        (GradientMode::ExactVjp, Form::Discrete(_)) => unreachable!("handled above"),
        (GradientMode::ExactVjp, Form::Quadrature(_)) => unreachable!("handled above"),
        (GradientMode::FiniteDifference, _) => {
            // Only the nodes inside a control point's support are re-evaluated;
            // the rest of the energy is unchanged by the perturbation.
            let mut perturbed: Vec<Vec<f64>> = Vec::with_capacity(grad.len() * 2);
            let mut affected: Vec<Vec<usize>> = Vec::with_capacity(grad.len());
            for j in 1..count - 1 {
                let rows: Vec<usize> = (0..=s).filter(|&i| nodes.touches(i, j)).collect();
                for c in 0..d {
                    for sign in [1.0, -1.0] {
                        let mut q = cps.to_vec();
                        q[j * d + c] += sign * FD_STEP;
                        perturbed.push(q);
                    }
                    affected.push(rows.clone());
                }
            }
            let mut jobs: Vec<(usize, &[f64])> = Vec::new();
            for (k, rows) in affected.iter().enumerate() {
                for q in &perturbed[2 * k..2 * k + 2] {
                    jobs.extend(rows.iter().map(|&i| (i, q.as_slice())));
                }
            }
            let values = form.node_values(nodes, &jobs)?;
            let mut offset = 0;
            for (k, rows) in affected.iter().enumerate() {
                let mut e = [0.0; 2];
                for side in &mut e {
                    let mut local = base.clone();
                    for (r, &i) in rows.iter().enumerate() {
                        local.row_mut(i).copy_from_slice(values.row(offset + r));
                    }
                    offset += rows.len();
                    *side = form.energy(s, &local);
                }
                grad[k] = (e[0] - e[1]) / (2.0 * FD_STEP);
            }
        }
    }
    Ok((energy, grad))
}

fn resolve_mode(p: &MetricProvider, mode: Option<GradientMode>) -> GradientMode {
    mode.unwrap_or(match p {
        MetricProvider::Field(_) => GradientMode::FiniteDifference,
        _ => GradientMode::ExactVjp,
    })
}

/// Gradient of [`path_energy`] with respect to the interior control points,
/// flattened point by point.
pub fn energy_gradient(
    curve: &BSplineCurve,
    p: &MetricProvider,
    segments: usize,
    mode: GradientMode,
) -> Result<Vec<f64>> {
    if segments < 1 {
        return Err(Error::InvalidInput("path energy needs at least 1 segment".into()));
    }
    check_dim("curve", p.latent_dim(), curve.dim())?;
    let form = Form::of(p);
    let nodes = Nodes::new(curve, segments)?;
    Ok(gradient_impl(&form, &nodes, &flat_control_points(curve), mode)?.1)
}

/// Energy of a line-search candidate, keeping the traced forward pass when
/// the next gradient can reuse it.
fn evaluate(form: &Form, nodes: &Nodes, cps: &[f64], mode: GradientMode) -> Result<(f64, Option<Forward>)> {
    match (form, mode) {
        (Form::Discrete(e), GradientMode::ExactVjp) => {
            let fwd = e.forward(&node_points(nodes, cps))?;
            Ok((form.energy(nodes.segments, &fwd.values), Some(fwd)))
        }
        _ => Ok((energy_of(form, nodes, cps)?, None)),
    }
}

fn with_interior(full: &[f64], interior: &[f64], d: usize) -> Vec<f64> {
    let mut out = full.to_vec();
    out[d..d + interior.len()].copy_from_slice(interior);
    out
}

/// Gradient descent on the path energy from the straight line, inserting a
/// control point whenever the energy plateaus. Returns the straight line
/// itself when nothing shorter was found.
pub fn shorten(
    z0: &LatentPoint,
    z1: &LatentPoint,
    p: &MetricProvider,
    cfg: &CurveOptConfig,
) -> Result<ShortenResult> {
    cfg.validate()?;
    check_dim("start point", p.latent_dim(), z0.dim())?;
    let straight = BSplineCurve::straight_line(z0, z1, 2)?;
    let d_straight = curve_length(&straight, p, cfg.quad_points)?;
    let mode = resolve_mode(p, cfg.gradient_mode);
    let form = Form::of(p);
    let d = z0.dim();

    let mut curve = straight.clone();
    let mut nodes = Nodes::new(&curve, cfg.energy_segments)?;
    let mut cps = flat_control_points(&curve);
    let mut best: Option<(f64, BSplineCurve)> = None;
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let (mut energy, mut grad) = gradient_impl(&form, &nodes, &cps, mode)?;
    let mut history = vec![energy];
    let mut stage = vec![energy];

    loop {
        let mut plateau = dot(&grad, &grad) == 0.0;
        if !plateau && iterations < cfg.max_iters {
            iterations += 1;
            let x: Vec<f64> = cps[d..cps.len() - d].to_vec();
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
                let full = with_interior(&cps, &cand, d);
                match evaluate(&form, &nodes, &full, mode) {
                    Ok((e, fwd)) if e < energy => {
                        accepted = Some((full, fwd));
                        break;
                    }
                    Ok(_) | Err(Error::NonFinite(_)) => step *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            match accepted {
                Some((full, fwd)) => {
                    cps = full;
                    (energy, grad) = match (fwd, form) {
                        (Some(fwd), Form::Discrete(e)) => discrete_gradient(&e, &nodes, &cps, &fwd)?,
                        _ => gradient_impl(&form, &nodes, &cps, mode)?,
                    };
                    history.push(energy);
                    stage.push(energy);
                    step = (step * 2.0).min(cfg.step_size * MAX_STEP_GROWTH);
                    let w = cfg.plateau_window;
                    if stage.len() > w {
                        let old = stage[stage.len() - 1 - w];
                        plateau = old <= 0.0 || (old - energy) / old < cfg.plateau_rel_tol;
                    }
                }
                None => {
                    plateau = true;
                    step = cfg.step_size;
                }
            }
        }
        let exhausted = iterations >= cfg.max_iters;
        if plateau || exhausted {
            curve = curve.with_interior(&cps[d..cps.len() - d])?;
            let len = curve_length(&curve, p, cfg.quad_points)?;
            if best.as_ref().is_none_or(|(b, _)| len < *b) {
                best = Some((len, curve.clone()));
            }
            if exhausted || curve.control_points().len() >= cfg.max_control_points {
                break;
            }
            curve = curve.insert_control_point();
            nodes = Nodes::new(&curve, cfg.energy_segments)?;
            cps = flat_control_points(&curve);
            (energy, grad) = gradient_impl(&form, &nodes, &cps, mode)?;
            stage = vec![energy];
        }
    }

    let (best_len, best_curve) = best.expect("at least one stage completes");
    let (curve, d_short, fallback_used) = if best_len > d_straight {
        (straight, d_straight, true)
    } else {
        (best_curve, best_len, false)
    };
    Ok(ShortenResult {
        control_points: curve.control_points().len(),
        curve,
        d_straight,
        d_short,
        iterations,
        fallback_used,
        energy_history: history,
    })
}
