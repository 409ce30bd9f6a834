//! Banded LU, eigensolvers and quadrature.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Field over which the banded kernels operate.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn modulus(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Square matrix with `kl` sub- and `ku` super-diagonals, stored row by row.
///
/// Row `i` holds columns `i - kl ..= i + ku`; entry `(i, j)` lives at
/// `i * (kl + ku + 1) + (j + kl - i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix<T: Scalar = f64> {
    m: usize,
    kl: usize,
    ku: usize,
    data: Vec<T>,
}

impl<T: Scalar> BandedMatrix<T> {
    pub fn zeros(m: usize, kl: usize, ku: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::param("m", "matrix dimension must be positive"));
        }
        // Bandwidths are clamped so small systems can reuse a wide stencil layout.
        let kl = kl.min(m - 1);
        let ku = ku.min(m - 1);
        Ok(Self {
            m,
            kl,
            ku,
            data: vec![T::zero(); m * (kl + ku + 1)],
        })
    }

    pub fn identity(m: usize) -> Result<Self> {
        let mut a = Self::zeros(m, 0, 0)?;
        for i in 0..m {
            a.set(i, i, T::one());
        }
        Ok(a)
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.kl
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.ku
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.m && j < self.m && j + self.kl >= i && j <= i + self.ku
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    /// Entry `(i, j)`, zero outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        if self.in_band(i, j) {
            self.data[self.offset(i, j)]
        } else {
            T::zero()
        }
    }

    /// Sets entry `(i, j)`. Panics outside the band.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let k = self.offset(i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let k = self.offset(i, j);
        self.data[k] += v;
    }

    /// Column range of row `i` inside the band.
    #[inline]
    pub fn row_span(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.kl)..(i + self.ku + 1).min(self.m)
    }

    pub fn matvec(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.m);
        assert_eq!(y.len(), self.m);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = T::zero();
            for j in self.row_span(i) {
                s += self.data[self.offset(i, j)] * x[j];
            }
            *yi = s;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.m];
        self.matvec(x, &mut y);
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self {
            m: self.m,
            kl: self.ku,
            ku: self.kl,
            data: vec![T::zero(); self.data.len()],
        };
        for i in 0..self.m {
            for j in self.row_span(i) {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.m)
            .map(|i| self.row_span(i).map(|j| self.get(i, j).modulus()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Returns `alpha * self + beta * I`.
    pub fn scaled_plus_identity(&self, alpha: T, beta: T) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= alpha;
        }
        for i in 0..self.m {
            out.add_to(i, i, beta);
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        (0..self.m)
            .map(|i| (0..self.m).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn factor(&self) -> Result<BandedLu<T>> {
        BandedLu::new(self)
    }
}

impl BandedMatrix<f64> {
    pub fn to_complex(&self) -> BandedMatrix<Complex64> {
        BandedMatrix {
            m: self.m,
            kl: self.kl,
            ku: self.ku,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |i, j| self.get(i, j))
    }
}

/// LU factorization with partial pivoting in band form.
///
/// Row interchanges widen the upper band to `kl + ku`, so every row keeps
/// `2 kl + ku + 1` slots starting at column `i - kl`.
#[derive(Debug, Clone)]
pub struct BandedLu<T: Scalar = f64> {
    m: usize,
    kl: usize,
    width: usize,
    data: Vec<T>,
    pivots: Vec<usize>,
}

impl<T: Scalar> BandedLu<T> {
    pub fn new(a: &BandedMatrix<T>) -> Result<Self> {
        let (m, kl, ku) = (a.m, a.kl, a.ku);
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            m,
            kl,
            width,
            data: vec![T::zero(); m * width],
            pivots: vec![0; m],
        };
        for i in 0..m {
            for j in a.row_span(i) {
                let v = a.get(i, j);
                if !v.is_finite() {
                    return Err(Error::param("matrix", format!("non-finite entry at ({i}, {j})")));
                }
                let k = lu.idx(i, j);
                lu.data[k] = v;
            }
        }
        let ucols = kl + ku;
        for k in 0..m {
            let last = (k + kl).min(m - 1);
            let mut p = k;
            let mut best = lu.data[lu.idx(k, k)].modulus();
            for r in k + 1..=last {
                let v = lu.data[lu.idx(r, k)].modulus();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Singular { pivot: k });
            }
            lu.pivots[k] = p;
            let cmax = (k + ucols).min(m - 1);
            if p != k {
                for c in k..=cmax {
                    let (ik, ip) = (lu.idx(k, c), lu.idx(p, c));
                    lu.data.swap(ik, ip);
                }
            }
            let pivot = lu.data[lu.idx(k, k)];
            for r in k + 1..=last {
                let irk = lu.idx(r, k);
                let l = lu.data[irk] / pivot;
                lu.data[irk] = l;
                if l == T::zero() {
                    continue;
                }
                let rbase = lu.idx(r, k + 1);
                let kbase = lu.idx(k, k + 1);
                for c in 0..cmax - k {
                    let u = lu.data[kbase + c];
                    lu.data[rbase + c] -= l * u;
                }
            }
        }
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        assert_eq!(b.len(), self.m);
        let m = self.m;
        let ucols = self.width - self.kl - 1;
        for k in 0..m {
            let p = self.pivots[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk == T::zero() {
                continue;
            }
            for r in k + 1..=(k + self.kl).min(m - 1) {
                b[r] -= self.data[self.idx(r, k)] * bk;
            }
        }
        for k in (0..m).rev() {
            let mut s = b[k];
            let cmax = (k + ucols).min(m - 1);
            let base = self.idx(k, k);
            for c in k + 1..=cmax {
                s -= self.data[base + (c - k)] * b[c];
            }
            b[k] = s / self.data[base];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solves `A x = b` by banded LU with partial pivoting.
pub fn banded_solve<T: Scalar>(a: &BandedMatrix<T>, b: &[T]) -> Result<Vec<T>> {
    if b.len() != a.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.len(),
        });
    }
    Ok(a.factor()?.solve(b))
}

/// An eigenvalue with a unit-norm eigenvector and its residual `|A v - λ v|`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex64,
    pub vector: Vec<Complex64>,
    pub residual: f64,
}

/// Settings for shift-invert Arnoldi.
#[derive(Debug, Clone)]
pub struct ShiftInvertOptions {
    pub shifts: Vec<Complex64>,
    pub krylov_dim: usize,
    pub max_restarts: usize,
    /// Residual target relative to `|A|_inf`.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for ShiftInvertOptions {
    fn default() -> Self {
        Self {
            shifts: vec![Complex64::new(0.05, 0.0)],
            krylov_dim: 60,
            max_restarts: 30,
            rel_tol: 1e-8,
            seed: 7,
        }
    }
}

fn norm2(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn check_count(count: usize, m: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::param("count", "must be at least 1"));
    }
    if count > m {
        return Err(Error::param(
            "count",
            format!("requested {count} eigenvalues of a {m}x{m} matrix"),
        ));
    }
    Ok(())
}

fn sort_rightmost(pairs: &mut [EigenPair]) {
    pairs.sort_by(|a, b| {
        b.value
            .re
            .total_cmp(&a.value.re)
            .then(b.value.im.total_cmp(&a.value.im))
    });
}

/// Rightmost eigenpairs of a dense real matrix.
///
/// Eigenvalues come from a real Schur decomposition; each eigenvector is then
/// refined by complex inverse iteration.
pub fn eigs_rightmost_dense(a: &DMatrix<f64>, count: usize) -> Result<Vec<EigenPair>> {
    let m = a.nrows();
    if a.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: a.ncols(),
        });
    }
    check_count(count, m)?;
    let anorm = a
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 10_000 * m.max(10))
        .ok_or(Error::EigenNonConvergence { residual: f64::NAN })?;
    let mut values: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    values.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    let ac = a.map(|v| Complex64::new(v, 0.0));
    let mut out = Vec::with_capacity(count);
    let mut worst = 0.0f64;
    for &lambda in values.iter().take(count) {
        let (vector, residual) = inverse_iteration_dense(&ac, lambda, anorm)?;
        worst = worst.max(residual);
        out.push(EigenPair {
            value: lambda,
            vector,
            residual,
        });
    }
    if worst > 1e-8 * anorm {
        return Err(Error::EigenNonConvergence { residual: worst });
    }
    Ok(out)
}

fn inverse_iteration_dense(
    a: &DMatrix<Complex64>,
    lambda: Complex64,
    anorm: f64,
) -> Result<(Vec<Complex64>, f64)> {
    let m = a.nrows();
    let perturb = anorm * 1e-10 * Complex64::new(1.0, 0.7);
    let mut shifted = a.clone();
    for i in 0..m {
        shifted[(i, i)] -= lambda + perturb;
    }
    let lu = shifted.lu();
    let mut v = DVector::from_fn(m, |i, _| {
        Complex64::new(1.0 + 0.1 * (i as f64).sin(), 0.3 * (i as f64 * 0.7).cos())
    });
    v /= Complex64::new(v.norm(), 0.0);
    let mut residual = f64::INFINITY;
    for _ in 0..6 {
        let Some(w) = lu.solve(&v) else {
            break;
        };
        let nw = w.norm();
        if !nw.is_finite() || nw == 0.0 {
            break;
        }
        v = w / Complex64::new(nw, 0.0);
        let r = a * &v - &v * lambda;
        residual = r.norm();
        if residual <= 1e-13 * anorm {
            break;
        }
    }
    Ok((v.iter().copied().collect(), residual))
}

/// Rightmost eigenpairs of a banded real matrix by shift-invert Arnoldi.
///
/// Each shift contributes the Ritz pairs nearest to it that pass the residual
/// test; pairs found from several shifts are merged and sorted by real part.
pub fn eigs_rightmost_banded(
    a: &BandedMatrix<f64>,
    count: usize,
    opts: &ShiftInvertOptions,
) -> Result<Vec<EigenPair>> {
    let m = a.dim();
    check_count(count, m)?;
    let anorm = a.norm_inf().max(f64::MIN_POSITIVE);
    let ac = a.to_complex();
    let mut found: Vec<EigenPair> = Vec::new();
    let mut best_residual = f64::INFINITY;
    for (s_idx, &shift) in opts.shifts.iter().enumerate() {
        let shifted = ac.scaled_plus_identity(Complex64::new(1.0, 0.0), -shift);
        let lu = shifted.factor()?;
        let pairs = arnoldi_shift_invert(&ac, &lu, shift, count, opts, anorm, s_idx as u64)?;
        for p in pairs {
            best_residual = best_residual.min(p.residual);
            if p.residual > opts.rel_tol * anorm {
                continue;
            }
            let dup = found
                .iter()
                .any(|q| (q.value - p.value).norm() <= 1e-7 * (1.0 + p.value.norm()));
            if !dup {
                found.push(p);
            }
        }
    }
    if found.is_empty() {
        return Err(Error::EigenNonConvergence {
            residual: best_residual,
        });
    }
    sort_rightmost(&mut found);
    found.truncate(count);
    Ok(found)
}

fn arnoldi_shift_invert(
    a: &BandedMatrix<Complex64>,
    lu: &BandedLu<Complex64>,
    shift: Complex64,
    want: usize,
    opts: &ShiftInvertOptions,
    anorm: f64,
    salt: u64,
) -> Result<Vec<EigenPair>> {
    let m = a.dim();
    let kdim = opts.krylov_dim.max(2 * want + 10).min(m);
    let mut start: Vec<Complex64> = {
        let mut state = opts.seed.wrapping_mul(6364136223846793005).wrapping_add(salt + 1);
        (0..m)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
                Complex64::new(u - 0.5, 0.0)
            })
            .collect()
    };
    let mut last: Vec<EigenPair> = Vec::new();
    let mut best_converged = 0usize;
    let mut stalled = 0usize;
    for _ in 0..=opts.max_restarts {
        let (basis, h, breakdown) = arnoldi(lu, &start, kdim);
        let k = h.ncols();
        let schur = nalgebra::Schur::try_new(h.clone(), 1e-15, 100_000)
            .ok_or(Error::EigenNonConvergence { residual: f64::NAN })?;
        let (q, t) = schur.unpack();
        let mut ritz: Vec<(usize, Complex64)> = (0..k).map(|i| (i, t[(i, i)])).collect();
        ritz.sort_by(|x, y| y.1.norm().total_cmp(&x.1.norm()));
        let take = (want + 4).min(k);
        let mut pairs = Vec::with_capacity(take);
        for &(idx, theta) in ritz.iter().take(take) {
            if theta.norm() == 0.0 {
                continue;
            }
            let y_t = triangular_eigvec(&t, idx);
            let y = &q * y_t;
            let mut x = vec![Complex64::new(0.0, 0.0); m];
            for (j, b) in basis.iter().enumerate().take(k) {
                let c = y[j];
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi += c * bi;
                }
            }
            let nx = norm2(&x);
            if nx == 0.0 {
                continue;
            }
            for xi in x.iter_mut() {
                *xi /= nx;
            }
            let lambda = shift + Complex64::new(1.0, 0.0) / theta;
            let ax = a.mul_vec(&x);
            let mut rq = dot(&x, &ax);
            if !rq.is_finite() {
                rq = lambda;
            }
            let value = if (rq - lambda).norm() < 1e-6 * (1.0 + lambda.norm()) {
                rq
            } else {
                lambda
            };
            let r: Vec<Complex64> = ax.iter().zip(&x).map(|(p, xi)| p - value * xi).collect();
            pairs.push(EigenPair {
                value,
                vector: x,
                residual: norm2(&r),
            });
        }
        let ok = pairs
            .iter()
            .take(want)
            .all(|p| p.residual <= opts.rel_tol * anorm);
        let converged = pairs.iter().filter(|p| p.residual <= opts.rel_tol * anorm).count();
        last = pairs;
        if ok || breakdown {
            break;
        }
        if converged > best_converged {
            best_converged = converged;
            stalled = 0;
        } else if converged > 0 {
            stalled += 1;
            if stalled >= 2 {
                break;
            }
        }
        // Restart from the combination of wanted Ritz vectors.
        let mut next = vec![Complex64::new(0.0, 0.0); m];
        for p in last.iter().take(want) {
            for (n, v) in next.iter_mut().zip(&p.vector) {
                *n += v;
            }
        }
        if norm2(&next) == 0.0 {
            break;
        }
        start = next;
    }
    Ok(last)
}

/// Arnoldi process on `(A - σ)^{-1}`. Returns the basis, the square Hessenberg
/// matrix and whether an invariant subspace was found early.
fn arnoldi(
    lu: &BandedLu<Complex64>,
    start: &[Complex64],
    kdim: usize,
) -> (Vec<Vec<Complex64>>, DMatrix<Complex64>, bool) {
    let mut basis: Vec<Vec<Complex64>> = Vec::with_capacity(kdim + 1);
    let n0 = norm2(start);
    basis.push(start.iter().map(|v| v / n0).collect());
    let mut h = DMatrix::<Complex64>::zeros(kdim + 1, kdim);
    let mut k = kdim;
    let mut breakdown = false;
    for j in 0..kdim {
        let mut w = lu.solve(&basis[j]);
        let wn0 = norm2(&w);
        for _pass in 0..2 {
            for (i, b) in basis.iter().enumerate() {
                let c = dot(b, &w);
                h[(i, j)] += c;
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        let wn = norm2(&w);
        h[(j + 1, j)] = Complex64::new(wn, 0.0);
        if wn <= 1e-13 * wn0 {
            k = j + 1;
            breakdown = true;
            break;
        }
        if j + 1 < kdim {
            basis.push(w.iter().map(|v| v / wn).collect());
        }
    }
    let hk = h.view((0, 0), (k, k)).into_owned();
    basis.truncate(k);
    (basis, hk, breakdown)
}

/// Eigenvector of an upper-triangular matrix for its `k`-th diagonal entry.
fn triangular_eigvec(t: &DMatrix<Complex64>, k: usize) -> DVector<Complex64> {
    let n = t.nrows();
    let lambda = t[(k, k)];
    let scale = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let mut x = DVector::<Complex64>::zeros(n);
    x[k] = Complex64::new(1.0, 0.0);
    for j in (0..k).rev() {
        let mut s = Complex64::new(0.0, 0.0);
        for l in j + 1..=k {
            s += t[(j, l)] * x[l];
        }
        let mut d = t[(j, j)] - lambda;
        if d.norm() < 1e-14 * scale {
            d = Complex64::new(1e-14 * scale, 0.0);
        }
        x[j] = -s / d;
    }
    x
}

/// Composite trapezoid rule on strictly increasing abscissae.
pub fn quad_trapezoid(t: &[f64], f: &[f64]) -> Result<f64> {
    if t.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: f.len(),
        });
    }
    if t.len() < 2 {
        return Err(Error::param("samples", "trapezoid rule needs at least 2 samples"));
    }
    let mut s = 0.0;
    for k in 1..t.len() {
        let dt = t[k] - t[k - 1];
        if dt <= 0.0 || dt.is_nan() {
            return Err(Error::param("samples", "abscissae must be strictly increasing"));
        }
        s += 0.5 * dt * (f[k] + f[k - 1]);
    }
    Ok(s)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poisson(m: usize) -> BandedMatrix {
        let mut a = BandedMatrix::zeros(m, 1, 1).unwrap();
        for i in 0..m {
            a.set(i, i, 2.0);
            if i > 0 {
                a.set(i, i - 1, -1.0);
            }
            if i + 1 < m {
                a.set(i, i + 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let a = BandedMatrix::<f64>::identity(7).unwrap();
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 2.5).collect();
        assert_eq!(banded_solve(&a, &b).unwrap(), b);
    }

    #[test]
    fn poisson_matches_dense_elimination() {
        let m = 50;
        let a = poisson(m);
        let b: Vec<f64> = (0..m).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        let x = banded_solve(&a, &b).unwrap();
        let dense = a.to_nalgebra().lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..m {
            assert!((x[i] - dense[i]).abs() <= 1e-12 * (1.0 + dense[i].abs()));
        }
    }

    #[test]
    fn zero_row_is_singular() {
        let mut a = poisson(6);
        for j in 1..4 {
            a.set(2, j, 0.0);
        }
        match banded_solve(&a, &[1.0; 6]) {
            Err(Error::Singular { .. }) => {}
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn complex_solve_residual() {
        let m = 40;
        let mut a = BandedMatrix::<Complex64>::zeros(m, 2, 3).unwrap();
        for i in 0..m {
            for j in a.row_span(i) {
                let v = Complex64::new(((i + 2 * j) as f64).cos(), ((i * j) as f64).sin() * 0.3);
                a.set(i, j, v);
            }
        }
        let b: Vec<Complex64> = (0..m).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let x = banded_solve(&a, &b).unwrap();
        let r = a.mul_vec(&x);
        let xn = x.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let bn = b.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let rn = r.iter().zip(&b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(rn <= 1e-10 * (a.norm_inf() * xn + bn));
    }

    #[test]
    fn transpose_swaps_bandwidths() {
        let mut a = BandedMatrix::<f64>::zeros(5, 1, 2).unwrap();
        a.set(0, 2, 3.0);
        a.set(3, 2, -1.0);
        let t = a.transpose();
        assert_eq!(t.lower_bandwidth(), 2);
        assert_eq!(t.get(2, 0), 3.0);
        assert_eq!(t.get(2, 3), -1.0);
    }

    #[test]
    fn diagonal_rightmost() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, 0.5]));
        let e = eigs_rightmost_dense(&a, 1).unwrap();
        assert_relative_eq!(e[0].value.re, 0.5, epsilon = 1e-12);
        assert!(e[0].value.im.abs() < 1e-12);
    }

    #[test]
    fn count_exceeding_dimension_is_rejected() {
        let a = DMatrix::<f64>::identity(3, 3);
        assert!(eigs_rightmost_dense(&a, 4).is_err());
        let b = BandedMatrix::<f64>::identity(3).unwrap();
        assert!(eigs_rightmost_banded(&b, 4, &ShiftInvertOptions::default()).is_err());
    }

    #[test]
    fn planted_dominant_pair_recovered() {
        let m = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let q = g.qr().q();
        let mut diag: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..-1.0)).collect();
        diag[17] = 0.75;
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(diag)) * q.transpose();
        let e = eigs_rightmost_dense(&a, 1).unwrap();
        assert!((e[0].value - Complex64::new(0.75, 0.0)).norm() < 1e-8);
        let planted = q.column(17);
        let overlap: f64 = e[0]
            .vector
            .iter()
            .zip(planted.iter())
            .map(|(v, p)| v * *p)
            .sum::<Complex64>()
            .norm();
        assert!((overlap - 1.0).abs() < 1e-8);
    }

    #[test]
    fn banded_arnoldi_matches_dense() {
        let m = 300;
        let h = 1.0 / (m as f64 + 1.0);
        let mut a = BandedMatrix::zeros(m, 1, 1).unwrap();
        for i in 0..m {
            a.set(i, i, -2.0 / (h * h));
            if i > 0 {
                a.set(i, i - 1, 1.0 / (h * h) - 0.5 / h);
            }
            if i + 1 < m {
                a.set(i, i + 1, 1.0 / (h * h) + 0.5 / h);
            }
        }
        let opts = ShiftInvertOptions::default();
        let e = eigs_rightmost_banded(&a, 3, &opts).unwrap();
        let dense = eigs_rightmost_dense(&a.to_nalgebra(), 3).unwrap();
        for (x, y) in e.iter().zip(&dense) {
            assert!((x.value - y.value).norm() < 1e-8 * y.value.norm().max(1.0));
        }
    }

    #[test]
    fn trapezoid_examples() {
        let t: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        assert_relative_eq!(quad_trapezoid(&t, &[1.0; 11]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(quad_trapezoid(&t, &t).unwrap(), 0.5);
        let t: Vec<f64> = (0..1000).map(|i| 10.0 * i as f64 / 999.0).collect();
        let f: Vec<f64> = t.iter().map(|x| (-x).exp()).collect();
        assert!((quad_trapezoid(&t, &f).unwrap() - (1.0 - (-10.0f64).exp())).abs() < 1e-5);
        assert!(quad_trapezoid(&[0.0], &[1.0]).is_err());
        assert!(quad_trapezoid(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_unit(16);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        let s: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(31)).sum();
        assert_relative_eq!(s, 1.0 / 32.0, epsilon = 1e-14);
    }
}
