//! Clamped cubic B-spline curves in latent space.
//!
//! The knot vector has the shape `(0,0,0,0, interior…, 1,1,1,1)` with `n − 3`
//! interior knots for `n + 1` control points, so the curve interpolates its
//! first and last control points. Basis functions follow the Cox–de Boor
//! recursion with `0/0 := 0`; at `t = 1` the last nonempty knot span is
//! treated as closed so that `C(1) = Pₙ`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::network::LatentPoint;

pub const ORDER: usize = 4;
const DEGREE: usize = ORDER - 1;

/// Order-`k` basis function `N_{i,k}(t)` over `knots`, by direct recursion.
pub fn basis(i: usize, k: usize, t: f64, knots: &[f64]) -> f64 {
    assert!(k >= 1 && i + k < knots.len(), "basis index out of range");
    if k == 1 {
        let (lo, hi) = (knots[i], knots[i + 1]);
        let end = knots[knots.len() - 1];
        let closed_end = t == end && lo < hi && hi == end;
        return if (lo <= t && t < hi) || closed_end { 1.0 } else { 0.0 };
    }
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let left = ratio(t - knots[i], knots[i + k - 1] - knots[i]);
    let right = ratio(knots[i + k] - t, knots[i + k] - knots[i + 1]);
    let mut acc = 0.0;
    if left != 0.0 {
        acc += left * basis(i, k - 1, t, knots);
    }
    if right != 0.0 {
        acc += right * basis(i + 1, k - 1, t, knots);
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BSplineCurve {
    control_points: Vec<LatentPoint>,
    knots: Vec<f64>,
}

impl BSplineCurve {
    pub fn new(control_points: Vec<LatentPoint>, knots: Vec<f64>) -> Result<Self> {
        let curve = Self {
            control_points,
            knots,
        };
        curve.validate()?;
        Ok(curve)
    }

    fn validate(&self) -> Result<()> {
        let count = self.control_points.len();
        if count < ORDER {
            return Err(Error::InvalidInput(format!(
                "a cubic B-spline needs at least {ORDER} control points, got {count}"
            )));
        }
        check_dim("knot count", count + ORDER, self.knots.len())?;
        let dim = self.control_points[0].dim();
        for p in &self.control_points {
            check_dim("control point", dim, p.dim())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("control point"));
            }
        }
        let m = self.knots.len();
        if self.knots[..ORDER].iter().any(|&k| k != 0.0)
            || self.knots[m - ORDER..].iter().any(|&k| k != 1.0)
        {
            return Err(Error::InvalidInput("knot vector must be clamped to [0, 1]".into()));
        }
        let interior = &self.knots[ORDER..m - ORDER];
        if interior.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
            return Err(Error::InvalidInput("interior knots must lie strictly inside (0, 1)".into()));
        }
        if self.knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("knot vector must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Equally spaced control points on `[z0, z1]` with uniform interior knots.
    pub fn straight_line(z0: &LatentPoint, z1: &LatentPoint, interior: usize) -> Result<Self> {
        check_dim("line endpoint", z0.dim(), z1.dim())?;
        if interior < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 interior control points, got {interior}"
            )));
        }
        if z0 == z1 {
            return Err(Error::DegenerateEndpoints);
        }
        let n = interior + 1;
        let mut points = Vec::with_capacity(n + 1);
        points.push(z0.clone());
        for i in 1..n {
            let f = i as f64 / n as f64;
            points.push(LatentPoint(
                z0.iter().zip(z1.iter()).map(|(a, b)| a + f * (b - a)).collect(),
            ));
        }
        points.push(z1.clone());
        let spans = n - DEGREE + 1;
        let mut knots = vec![0.0; ORDER];
        knots.extend((1..spans).map(|k| k as f64 / spans as f64));
        knots.extend([1.0; ORDER]);
        Self::new(points, knots)
    }

    pub fn control_points(&self) -> &[LatentPoint] {
        &self.control_points
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.control_points[0].dim()
    }

    pub fn start(&self) -> &LatentPoint {
        &self.control_points[0]
    }

    pub fn end(&self) -> &LatentPoint {
        &self.control_points[self.control_points.len() - 1]
    }

    /// Replaces the interior control points, keeping both endpoints. `flat`
    /// holds the interior points coordinate-major per point.
    pub fn with_interior(&self, flat: &[f64]) -> Result<Self> {
        let d = self.dim();
        let inner = self.control_points.len() - 2;
        check_dim("interior coordinates", inner * d, flat.len())?;
        let mut points = self.control_points.clone();
        for (k, chunk) in flat.chunks(d).enumerate() {
            points[k + 1] = LatentPoint(chunk.to_vec());
        }
        Ok(Self {
            control_points: points,
            knots: self.knots.clone(),
        })
    }

    pub fn interior_flat(&self) -> Vec<f64> {
        let n = self.control_points.len();
        self.control_points[1..n - 1]
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    /// Parameter interval `[T_i, T_{i+4})` on which control point `i` acts.
    pub fn support(&self, i: usize) -> (f64, f64) {
        (self.knots[i], self.knots[i + ORDER])
    }

    fn check_domain(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::OutsideDomain { t })
        }
    }

    /// Index `j` with `T_j ≤ t < T_{j+1}`, using the last nonempty span at `t = 1`.
    fn span(&self, t: f64) -> usize {
        let n = self.control_points.len() - 1;
        if t >= self.knots[n + 1] {
            return n;
        }
        // Binary search over [DEGREE, n].
        let (mut lo, mut hi) = (DEGREE, n + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis functions of degree `p` at `t` on span `j`, i.e.
    /// `N_{j−p,p+1} … N_{j,p+1}`.
    fn span_basis(&self, j: usize, t: f64, p: usize) -> [f64; ORDER] {
        let u = &self.knots;
        let mut n = [0.0; ORDER];
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        n[0] = 1.0;
        for r in 1..=p {
            left[r] = t - u[j + 1 - r];
            right[r] = u[j + r] - t;
            let mut saved = 0.0;
            for s in 0..r {
                let den = right[s + 1] + left[r - s];
                let temp = if den == 0.0 { 0.0 } else { n[s] / den };
                n[s] = saved + right[s + 1] * temp;
                saved = left[r - s] * temp;
            }
            n[r] = saved;
        }
        n
    }

    /// Indices and values of the (at most four) nonzero cubic basis functions at `t`.
    pub fn basis_at(&self, t: f64) -> Result<(usize, [f64; ORDER])> {
        Self::check_domain(t)?;
        let j = self.span(t);
        Ok((j - DEGREE, self.span_basis(j, t, DEGREE)))
    }

    /// Coefficients `c_i` with `C'(t) = Σ c_i P_i`.
    pub fn derivative_weights(&self, t: f64) -> Result<(usize, [f64; ORDER])> {
        Self::check_domain(t)?;
        let j = self.span(t);
        let quad = self.span_basis(j, t, DEGREE - 1);
        // quad[s] = N_{m,3} with m = j − 2 + s; term m multiplies (P_m − P_{m−1}).
        let first = j - DEGREE;
        let mut w = [0.0; ORDER];
        for (s, &nv) in quad.iter().take(DEGREE).enumerate() {
            let m = j - (DEGREE - 1) + s;
            let den = self.knots[m + DEGREE] - self.knots[m];
            if den == 0.0 || nv == 0.0 {
                continue;
            }
            let c = DEGREE as f64 * nv / den;
            w[m - first] += c;
            w[m - 1 - first] -= c;
        }
        // w[0] corresponds to P_{first}; the window spans first..=first+3.
        Ok((first, w))
    }

    pub fn eval(&self, t: f64) -> Result<LatentPoint> {
        let (first, b) = self.basis_at(t)?;
        let mut out = vec![0.0; self.dim()];
        for (k, &w) in b.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.control_points[first + k].iter()) {
                *o += w * p;
            }
        }
        Ok(LatentPoint(out))
    }

    /// `∂C/∂t = 3 Σ N_{i+1,3}(t) (P_{i+1} − P_i) / (T_{i+4} − T_{i+1})`.
    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        Self::check_domain(t)?;
        let j = self.span(t);
        let quad = self.span_basis(j, t, DEGREE - 1);
        let mut out = vec![0.0; self.dim()];
        for (s, &nv) in quad.iter().take(DEGREE).enumerate() {
            let m = j - (DEGREE - 1) + s;
            let den = self.knots[m + DEGREE] - self.knots[m];
            if den == 0.0 || nv == 0.0 {
                continue;
            }
            let c = DEGREE as f64 * nv / den;
            let (a, b) = (&self.control_points[m - 1], &self.control_points[m]);
            for ((o, pa), pb) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                *o += c * (pb - pa);
            }
        }
        Ok(out)
    }

    /// Splits the longest knot span at its midpoint (lowest index on ties)
    /// and inserts the matching control point without changing the curve.
    pub fn insert_control_point(&self) -> BSplineCurve {
        let n = self.control_points.len() - 1;
        let mut j = DEGREE;
        let mut widest = f64::NEG_INFINITY;
        for i in DEGREE..=n {
            let w = self.knots[i + 1] - self.knots[i];
            if w > widest {
                widest = w;
                j = i;
            }
        }
        let t_new = 0.5 * (self.knots[j] + self.knots[j + 1]);

        let mut points = self.control_points.clone();
        points.insert(j, self.control_points[j].clone());
        // Largest index first so every update reads old values.
        for i in (j - DEGREE + 1..=j).rev() {
            let ti = self.knots[i];
            let a = (t_new - ti) / (self.knots[i + DEGREE] - ti);
            let (prev, cur) = (&self.control_points[i - 1], &self.control_points[i]);
            points[i] = LatentPoint(
                prev.iter()
                    .zip(cur.iter())
                    .map(|(p, c)| (1.0 - a) * p + a * c)
                    .collect(),
            );
        }
        let mut knots = self.knots.clone();
        knots.insert(j + 1, t_new);
        BSplineCurve {
            control_points: points,
            knots,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("curves always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BSplineCurve = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        raw.validate()?;
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp(v: &[f64]) -> LatentPoint {
        LatentPoint(v.to_vec())
    }

    fn random_curve(n_points: usize, dim: usize, rng: &mut ChaCha8Rng) -> BSplineCurve {
        let points = (0..n_points)
            .map(|_| LatentPoint((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let mut interior: Vec<f64> = (0..n_points - ORDER).map(|_| rng.random_range(0.05..0.95)).collect();
        interior.sort_by(f64::total_cmp);
        let mut knots = vec![0.0; ORDER];
        knots.extend(interior);
        knots.extend([1.0; ORDER]);
        BSplineCurve::new(points, knots).unwrap()
    }

    /// De Boor's triangular scheme, written independently of `span_basis`.
    fn de_boor(c: &BSplineCurve, t: f64) -> Vec<f64> {
        let u = c.knots();
        let n = c.control_points().len() - 1;
        let mut k = DEGREE;
        while k < n && !(t < u[k + 1]) {
            k += 1;
        }
        let mut d: Vec<Vec<f64>> = (0..=DEGREE).map(|j| c.control_points()[j + k - DEGREE].0.clone()).collect();
        for r in 1..=DEGREE {
            for j in (r..=DEGREE).rev() {
                let i = j + k - DEGREE;
                let alpha = (t - u[i]) / (u[i + DEGREE + 1 - r] - u[i]);
                let prev = d[j - 1].clone();
                for (x, p) in d[j].iter_mut().zip(prev) {
                    *x = (1.0 - alpha) * p + alpha * *x;
                }
            }
        }
        d[DEGREE].clone()
    }

    fn bernstein(i: usize, deg: usize, t: f64) -> f64 {
        let binom = |n: usize, k: usize| (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64);
        binom(deg, i) * t.powi(i as i32) * (1.0 - t).powi((deg - i) as i32)
    }

    #[test]
    fn order_one_is_an_indicator() {
        let knots = [0.0, 0.0, 0.0, 0.0, 0.4, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(basis(3, 1, 0.2, &knots), 1.0);
        assert_eq!(basis(3, 1, 0.4, &knots), 0.0);
        assert_eq!(basis(4, 1, 0.4, &knots), 1.0);
        assert_eq!(basis(4, 1, 1.0, &knots), 1.0);
        assert_eq!(basis(3, 1, 1.0, &knots), 0.0);
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let curve = random_curve(9, 2, &mut rng);
        for s in 0..=1000 {
            let t = s as f64 / 1000.0;
            let total: f64 = (0..9)
                .map(|i| {
                    let v = basis(i, 4, t, curve.knots());
                    assert!(v >= 0.0);
                    v
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "t = {t}: {total}");
        }
    }

    #[test]
    fn recursion_agrees_with_span_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let curve = random_curve(8, 2, &mut rng);
        for s in 0..=200 {
            let t = s as f64 / 200.0;
            let (first, b) = curve.basis_at(t).unwrap();
            for i in 0..8 {
                let direct = basis(i, 4, t, curve.knots());
                let fast = if i >= first && i < first + 4 { b[i - first] } else { 0.0 };
                assert!((direct - fast).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bezier_case_matches_bernstein() {
        let knots = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        for s in 0..20 {
            let t = s as f64 / 19.0;
            for i in 0..4 {
                assert!((basis(i, 4, t, &knots) - bernstein(i, 3, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn endpoints_are_interpolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_curve(7, 3, &mut rng);
        assert_eq!(&c.eval(0.0).unwrap(), c.start());
        assert_eq!(&c.eval(1.0).unwrap(), c.end());
    }

    #[test]
    fn eval_matches_de_boor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_curve(10, 3, &mut rng);
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..1.0);
            let a = c.eval(t).unwrap();
            let b = de_boor(&c, t);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_points_stay_on_segment() {
        let c = BSplineCurve::new(
            (0..6).map(|i| lp(&[i as f64, 2.0 * i as f64])).collect(),
            vec![0.0, 0.0, 0.0, 0.0, 0.3, 0.6, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        for s in 0..=100 {
            let p = c.eval(s as f64 / 100.0).unwrap();
            // distance to the line y = 2x
            assert!(((2.0 * p[0] - p[1]) / 5f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_domain() {
        let c = BSplineCurve::straight_line(&lp(&[0.0]), &lp(&[1.0]), 2).unwrap();
        assert!(matches!(c.eval(1.5), Err(Error::OutsideDomain { .. })));
        assert!(matches!(c.derivative(-0.1), Err(Error::OutsideDomain { .. })));
    }

    #[test]
    fn derivative_of_straight_line_is_parallel() {
        let (a, b) = (lp(&[1.0, -1.0]), lp(&[3.0, 2.0]));
        let c = BSplineCurve::straight_line(&a, &b, 5).unwrap();
        for s in 0..=50 {
            let d = c.derivative(s as f64 / 50.0).unwrap();
            let cross = d[0] * 3.0 - d[1] * 2.0;
            assert!(cross.abs() < 1e-12);
            assert!(d[0] > 0.0);
        }
    }

    #[test]
    fn bezier_derivative_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_curve(4, 2, &mut rng);
        let p = c.control_points();
        for s in 0..=20 {
            let t = s as f64 / 20.0;
            let d = c.derivative(t).unwrap();
            for k in 0..2 {
                let expected: f64 = (0..3).map(|i| 3.0 * bernstein(i, 2, t) * (p[i + 1][k] - p[i][k])).sum();
                assert!((d[k] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_curve(9, 3, &mut rng);
        let h = 1e-6;
        for _ in 0..100 {
            let t: f64 = rng.random_range(h..1.0 - h);
            let d = c.derivative(t).unwrap();
            let (p, m) = (c.eval(t + h).unwrap(), c.eval(t - h).unwrap());
            for k in 0..3 {
                assert!((d[k] - (p[k] - m[k]) / (2.0 * h)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn derivative_weights_reproduce_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_curve(8, 2, &mut rng);
        for s in 0..=64 {
            let t = s as f64 / 64.0;
            let (first, w) = c.derivative_weights(t).unwrap();
            let mut acc = [0.0; 2];
            for (k, wk) in w.iter().enumerate().take(ORDER) {
                for d in 0..2 {
                    acc[d] += wk * c.control_points()[first + k][d];
                }
            }
            let d = c.derivative(t).unwrap();
            assert!((acc[0] - d[0]).abs() < 1e-12 && (acc[1] - d[1]).abs() < 1e-12);
        }
    }

    fn max_deviation(a: &BSplineCurve, b: &BSplineCurve) -> f64 {
        (0..1000)
            .map(|s| {
                let t = s as f64 / 999.0;
                let (p, q) = (a.eval(t).unwrap(), b.eval(t).unwrap());
                p.iter().zip(q.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn insertion_preserves_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let original = random_curve(6, 2, &mut rng);
        let mut c = original.clone();
        for _ in 0..10 {
            let next = c.insert_control_point();
            assert_eq!(next.control_points().len(), c.control_points().len() + 1);
            assert_eq!(next.knots().len(), c.knots().len() + 1);
            assert!(max_deviation(&c, &next) < 1e-9);
            next.validate().unwrap();
            c = next;
        }
        assert!(max_deviation(&original, &c) < 1e-8);
    }

    #[test]
    fn bezier_insertion_splits_at_half() {
        let c = BSplineCurve::straight_line(&lp(&[0.0, 0.0]), &lp(&[3.0, 0.0]), 2).unwrap();
        assert_eq!(c.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let c2 = c.insert_control_point();
        assert_eq!(c2.knots(), &[0.0, 0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn insertion_tie_break_uses_lowest_index() {
        // Spans: [0,.25] [.25,.5] [.5,1] → widest is the last; after that the
        // two halves (.5,.75) and (.75,1) tie with the first two at 0.25, so
        // the next insertion splits [0, .25].
        let c = BSplineCurve::new(
            (0..6).map(|i| lp(&[i as f64, (i * i) as f64])).collect(),
            vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.5, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let c1 = c.insert_control_point();
        assert_eq!(c1.knots(), &[0.0, 0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0]);
        let c2 = c1.insert_control_point();
        assert_eq!(
            c2.knots(),
            &[0.0, 0.0, 0.0, 0.0, 0.125, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn straight_line_construction() {
        let (a, b) = (lp(&[0.0, 0.0]), lp(&[3.0, 6.0]));
        let c = BSplineCurve::straight_line(&a, &b, 2).unwrap();
        let xs: Vec<f64> = c.control_points().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
        let c5 = BSplineCurve::straight_line(&a, &b, 5).unwrap();
        assert_eq!(c5.knots().len(), 7 + ORDER);
        for s in 0..50 {
            let p = c5.eval(s as f64 / 49.0).unwrap();
            assert!((2.0 * p[0] - p[1]).abs() < 1e-12);
        }
        assert!(matches!(BSplineCurve::straight_line(&a, &a, 2), Err(Error::DegenerateEndpoints)));
        assert!(BSplineCurve::straight_line(&a, &b, 1).is_err());
    }

    #[test]
    fn local_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_curve(9, 2, &mut rng);
        let i = 4;
        let mut pts = c.control_points().to_vec();
        pts[i].0[0] += 0.7;
        let moved = BSplineCurve::new(pts, c.knots().to_vec()).unwrap();
        let (lo, hi) = c.support(i);
        for s in 0..=1000 {
            let t = s as f64 / 1000.0;
            if t < lo || t >= hi {
                let (p, q) = (c.eval(t).unwrap(), moved.eval(t).unwrap());
                assert!((p[0] - q[0]).abs() < 1e-14 && (p[1] - q[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn json_round_trip_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = random_curve(6, 2, &mut rng);
        assert_eq!(BSplineCurve::from_json(&c.to_json()).unwrap(), c);
        let bad = r#"{"control_points":[[0,0],[1,1],[2,2],[3,3]],"knots":[0,0,0,1,1,1,1,1]}"#;
        assert!(BSplineCurve::from_json(bad).is_err());
    }
}
