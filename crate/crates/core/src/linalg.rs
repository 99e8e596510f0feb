//! Small dense linear algebra: row-major matrices, symmetric matrices and a
//! cyclic Jacobi eigensolver.
//!
//! Everything here is sized for latent spaces of a handful of dimensions and
//! network layers of a few hundred units. Large products go through
//! `matrixmultiply`; the eigensolver is plain Jacobi, which is accurate to
//! machine precision on the small symmetric matrices the metric code produces.

use crate::error::{check_dim, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("matrix entries", rows * cols, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose rows are the given slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|x| x * c).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `A v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `uᵀ A`
    pub fn vecmat(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("vecmat", self.rows, u.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &ui) in u.iter().enumerate() {
            axpy(ui, self.row(i), &mut out);
        }
        Ok(out)
    }

    /// `AᵀA`, symmetric by construction.
    pub fn gram(&self) -> SymMatrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        gemm(1.0, self, true, self, false, 0.0, &mut out);
        SymMatrix::symmetrize(out)
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c` where `op` optionally transposes.
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k, rsa, csa) = if trans_a {
        (a.cols, a.rows, 1, a.cols)
    } else {
        (a.rows, a.cols, a.cols, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b.cols, b.rows, 1, b.cols)
    } else {
        (b.rows, b.cols, b.cols, 1)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: strides and extents describe exactly the buffers owned by the
    // three matrices; `c` is borrowed mutably and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense symmetric matrix. Entries are stored in full; the constructors
/// guarantee `m[i][j] == m[j][i]` bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    inner: Matrix,
}

impl SymMatrix {
    /// Accepts a square matrix that is symmetric up to rounding and mirrors
    /// the upper triangle into the lower one.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        let m = Matrix::new(dim, dim, data)?;
        let scale = m.frobenius_norm().max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self::symmetrize(m))
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            inner: Matrix::identity(dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            inner: Matrix::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 }),
        }
    }

    pub(crate) fn symmetrize(mut m: Matrix) -> Self {
        let n = m.rows;
        debug_assert_eq!(n, m.cols);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = m.get(i, j);
                m.set(j, i, v);
            }
        }
        Self { inner: m }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.rows
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        Self {
            inner: self.inner.scale(c),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        check_dim("symmetric add", self.dim(), other.dim())?;
        let data = self
            .inner
            .data
            .iter()
            .zip(&other.inner.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            inner: Matrix::from_raw(self.dim(), self.dim(), data),
        })
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        Ok(dot(&self.inner.matvec(v)?, v))
    }

    pub fn eigen(&self) -> Result<EigenPairs> {
        sym_eig(self)
    }

    /// Eigendecomposition for metric use: eigenvalues in `(-1e-10·‖M‖, 0]`
    /// are clamped to zero, anything more negative is rejected.
    pub fn psd_eigen(&self) -> Result<EigenPairs> {
        let mut pairs = sym_eig(self)?;
        let tol = PSD_TOLERANCE * self.frobenius_norm();
        for lambda in &mut pairs.eigenvalues {
            if *lambda < -tol {
                return Err(Error::NotPsd { value: *lambda });
            }
            if *lambda < 0.0 {
                *lambda = 0.0;
            }
        }
        Ok(pairs)
    }
}

/// Relative tolerance below zero that is still treated as a zero eigenvalue.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Eigenvalues in ascending order with matching orthonormal eigenvectors.
#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl EigenPairs {
    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    pub fn min(&self) -> (f64, Vec<f64>) {
        (self.eigenvalues[0], self.eigenvector(0))
    }

    pub fn max(&self) -> (f64, Vec<f64>) {
        let last = self.eigenvalues.len() - 1;
        (self.eigenvalues[last], self.eigenvector(last))
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenPairs> {
    let n = m.dim();
    if n == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    if m.inner.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let mut a = m.inner.clone();
    let mut v = Matrix::identity(n);
    let total = a.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a.get(p, q).powi(2))
            .sum();
        if off.sqrt() <= f64::EPSILON * total * 1e-2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let eigenvalues = order.iter().map(|&i| a.get(i, i)).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(EigenPairs {
        eigenvalues,
        eigenvectors,
    })
}

/// `½ Σ ln λᵢ = ln √det M` for a positive-definite matrix.
pub fn log_sqrt_det(m: &SymMatrix) -> Result<f64> {
    let pairs = sym_eig(m)?;
    let mut acc = 0.0;
    for &lambda in &pairs.eigenvalues {
        if lambda <= 0.0 {
            return Err(Error::NotPositiveDefinite { eigenvalue: lambda });
        }
        acc += lambda.ln();
    }
    Ok(0.5 * acc)
}

/// `λ_max / λ_min` of a positive semi-definite matrix with `λ_min > 0`.
pub fn condition_number(m: &SymMatrix) -> Result<f64> {
    let pairs = m.psd_eigen()?;
    let (lo, _) = pairs.min();
    let (hi, _) = pairs.max();
    if lo <= 0.0 {
        return Err(Error::SingularMetric { eigenvalue: lo });
    }
    Ok(hi / lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut impl Rng) -> SymMatrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let data = Matrix::from_fn(n, n, |i, j| a.get(i, j) + a.get(j, i)).into_vec();
        SymMatrix::new(n, data).unwrap()
    }

    fn random_pd(n: usize, rng: &mut impl Rng) -> SymMatrix {
        let a = Matrix::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
        a.gram()
    }

    /// Power iteration with Hotelling deflation on `M + shift·I`, returning
    /// eigenvalues in descending order.
    fn power_deflation_oracle(m: &SymMatrix) -> Vec<(f64, Vec<f64>)> {
        let n = m.dim();
        let shift = m.frobenius_norm() + 1.0;
        let mut work: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| m.get(i, j) + if i == j { shift } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut out = Vec::new();
        for k in 0..n {
            let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i + k) as f64).collect();
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let y: Vec<f64> = work
                    .iter()
                    .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let next: Vec<f64> = y.iter().map(|v| v / ny).collect();
                let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
                x = next;
                lambda = ny;
                if diff < 1e-15 {
                    break;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    work[i][j] -= lambda * x[i] * x[j];
                }
            }
            out.push((lambda - shift, x));
        }
        out
    }

    fn cofactor_det(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n == 1 {
            return m[0][0];
        }
        (0..n)
            .map(|c| {
                let minor: Vec<Vec<f64>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(j, _)| *j != c)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[0][c] * cofactor_det(&minor)
            })
            .sum()
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigenpairs() {
        let e = sym_eig(&SymMatrix::from_diagonal(&[9.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 9.0]);
        assert_eq!(e.eigenvector(0), vec![0.0, 1.0]);
        assert_eq!(e.eigenvector(1), vec![1.0, 0.0]);
    }

    #[test]
    fn random_symmetric_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let m = random_sym(5, &mut rng);
            let e = sym_eig(&m).unwrap();
            let oracle = power_deflation_oracle(&m);
            for (k, (lambda, vec)) in oracle.iter().enumerate() {
                let idx = 4 - k;
                assert!((e.eigenvalues[idx] - lambda).abs() < 1e-6);
                let cos = dot(&e.eigenvector(idx), vec).abs();
                assert!(cos > 1.0 - 1e-6, "cos {cos}");
            }
        }
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..8 {
            let m = random_sym(n, &mut rng);
            let e = sym_eig(&m).unwrap();
            let v = &e.eigenvectors;
            let vtv = v.transpose().matmul(v).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv.get(i, j) - target).abs() < 1e-10);
                }
            }
            let lam = Matrix::from_fn(n, n, |i, j| if i == j { e.eigenvalues[i] } else { 0.0 });
            let rec = v.matmul(&lam).unwrap().matmul(&v.transpose()).unwrap();
            let err: f64 = rec
                .as_slice()
                .iter()
                .zip(m.as_matrix().as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-8 * m.frobenius_norm().max(1e-300));
            for w in e.eigenvalues.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let m = SymMatrix {
            inner: Matrix::from_raw(2, 2, vec![1.0, f64::NAN, f64::NAN, 1.0]),
        };
        assert!(matches!(sym_eig(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn log_sqrt_det_cases() {
        assert_eq!(log_sqrt_det(&SymMatrix::identity(4)).unwrap(), 0.0);
        let e2 = 2f64.exp();
        let v = log_sqrt_det(&SymMatrix::from_diagonal(&[e2, e2])).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_pd(4, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| m.as_matrix().row(i).to_vec()).collect();
        let oracle = 0.5 * cofactor_det(&rows).ln();
        assert!((log_sqrt_det(&m).unwrap() - oracle).abs() < 1e-8);
        assert!(matches!(
            log_sqrt_det(&SymMatrix::from_diagonal(&[1.0, 0.0])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn condition_number_cases() {
        assert_eq!(condition_number(&SymMatrix::identity(3)).unwrap(), 1.0);
        assert_eq!(
            condition_number(&SymMatrix::from_diagonal(&[9.0, 1.0])).unwrap(),
            9.0
        );
        assert!(matches!(
            condition_number(&SymMatrix::from_diagonal(&[2.0, 0.0])),
            Err(Error::SingularMetric { .. })
        ));
        assert!(matches!(
            condition_number(&SymMatrix::from_diagonal(&[2.0, -1.0])),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn condition_number_matches_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let m = a.gram();
        // Singular values of A from the eigenvalues of A Aᵀ (the other Gram
        // product), so this does not reuse AᵀA.
        let aat = a.matmul(&a.transpose()).unwrap();
        let aat = SymMatrix::new(6, aat.into_vec()).unwrap();
        let ev = power_deflation_oracle(&aat);
        let sigma_max = ev[0].0.sqrt();
        let sigma_min = ev[2].0.sqrt();
        let expected = (sigma_max / sigma_min).powi(2);
        let got = condition_number(&m).unwrap();
        assert!((got - expected).abs() / expected < 1e-6);
    }

    #[test]
    fn tiny_negative_eigenvalues_are_clamped() {
        let m = SymMatrix::from_diagonal(&[1.0, -1e-13]);
        let e = m.psd_eigen().unwrap();
        assert_eq!(e.eigenvalues, vec![0.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pd_strategy() -> impl Strategy<Value = SymMatrix> {
            (1usize..6, any::<u64>()).prop_map(|(n, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Matrix::from_fn(n + 1, n, |_, _| rng.random_range(-1.0..1.0));
                let g = a.gram();
                g.add(&SymMatrix::identity(n).scale(0.1)).unwrap()
            })
        }

        proptest! {
            #[test]
            fn condition_number_is_scale_invariant(m in pd_strategy(), c in 1e-3f64..1e3) {
                let base = condition_number(&m).unwrap();
                let scaled = condition_number(&m.scale(c)).unwrap();
                prop_assert!((base - scaled).abs() <= 1e-9 * base);
            }

            #[test]
            fn log_sqrt_det_scales_with_dimension(m in pd_strategy(), c in 1e-3f64..1e3) {
                let base = log_sqrt_det(&m).unwrap();
                let scaled = log_sqrt_det(&m.scale(c)).unwrap();
                let expected = base + 0.5 * m.dim() as f64 * c.ln();
                prop_assert!((scaled - expected).abs() < 1e-9);
            }

            #[test]
            fn eigenvectors_orthonormal(m in pd_strategy()) {
                let e = sym_eig(&m).unwrap();
                let vtv = e.eigenvectors.transpose().matmul(&e.eigenvectors).unwrap();
                for i in 0..m.dim() {
                    for j in 0..m.dim() {
                        let target = if i == j { 1.0 } else { 0.0 };
                        prop_assert!((vtv.get(i, j) - target).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
