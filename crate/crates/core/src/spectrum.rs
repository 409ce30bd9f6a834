//! Linearization at the front, weighted conjugation, essential and point
//! spectrum, and the rank-one spectral projections onto the translation mode.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::front::FrontProfile;
use crate::grid::{random_bumps, GridField, Norms, SpatialGrid, TransportScheme, Weight};
use crate::linalg::{eigs_rightmost_banded, BandedMatrix, ShiftInvertOptions};
use crate::model::ReactionModel;

/// `L = D ∂xx + c ∂x + J(x)` on the grid and its conjugate `Γ L Γ⁻¹`.
///
/// Unknowns are stored node-major, so `L` has bandwidth `n` on both sides.
#[derive(Debug, Clone)]
pub struct WeightedOperator {
    pub grid: SpatialGrid,
    pub weight: Weight,
    pub q: f64,
    pub n: usize,
    pub c: f64,
    pub diffusion: Vec<f64>,
    pub l: BandedMatrix,
    pub lw: BandedMatrix,
    /// `B_q(x_i) = ∂R(Y_q(x_i)) - ∂R(0)`, one `n × n` block per node.
    pub bq: Vec<f64>,
    pub jac_minus: Vec<f64>,
    pub jac_plus: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `Y_q'` from the profile (centered differences).
    pub yprime: GridField,
}

pub(crate) fn assemble_matrix(
    grid: &SpatialGrid,
    n: usize,
    diffusion: &[f64],
    c: f64,
    scheme: TransportScheme,
    jac: impl Fn(usize) -> Vec<f64>,
) -> Result<BandedMatrix> {
    let nodes = grid.nodes;
    let h = grid.h;
    let mut l = BandedMatrix::zeros(nodes * n, 2 * n, 2 * n)?;
    for i in 0..nodes {
        let j_i = jac(i);
        for a in 0..n {
            let row = i * n + a;
            let d = diffusion[a];
            l.add_to(row, row, -2.0 * d / (h * h));
            if i > 0 {
                l.add_to(row, row - n, d / (h * h));
            }
            if i + 1 < nodes {
                l.add_to(row, row + n, d / (h * h));
            }
            let w = scheme.weights(d, c, h);
            for k in -2..=2isize {
                let node = i as isize + k;
                let wk = w[(k + 2) as usize];
                if wk != 0.0 && node >= 0 && (node as usize) < nodes {
                    l.add_to(row, node as usize * n + a, c * wk);
                }
            }
            for b in 0..n {
                l.add_to(row, i * n + b, j_i[a * n + b]);
            }
        }
    }
    Ok(l)
}

fn conjugate(l: &BandedMatrix, gamma: &[f64], n: usize) -> BandedMatrix {
    let mut lw = l.clone();
    if gamma.iter().all(|g| *g == 1.0) {
        return lw;
    }
    for r in 0..l.dim() {
        for col in l.row_span(r) {
            let v = l.get(r, col);
            if v != 0.0 {
                lw.set(r, col, v * (gamma[r / n] / gamma[col / n]));
            }
        }
    }
    lw
}

/// Assembles `L_q` at the (already shifted) profile after checking that the
/// weight is admissible for the fitted tail rates.
pub fn assemble_linearization(model: &ReactionModel, profile: &FrontProfile, weight: &Weight) -> Result<WeightedOperator> {
    weight.check_admissible(profile.omega_minus, profile.omega_plus)?;
    assemble_unchecked(model, profile, weight)
}

/// [`assemble_linearization`] without the admissibility test, for
/// diagnostics such as the unweighted operator.
pub fn assemble_unchecked(model: &ReactionModel, profile: &FrontProfile, weight: &Weight) -> Result<WeightedOperator> {
    let grid = profile.grid;
    if profile.shift.abs() > grid.half_width / 10.0 + 1e-12 {
        return Err(Error::param("q", "shift exceeds X/10"));
    }
    let n = model.n;
    let j0 = model.jacobian(&vec![0.0; n]);
    let jacs: Vec<Vec<f64>> = (0..grid.nodes).map(|i| model.jacobian(profile.y0.node(i))).collect();
    let l = assemble_matrix(&grid, n, &model.diffusion, profile.c, profile.transport, |i| jacs[i].clone())?;
    let gamma = weight.samples(&grid);
    let lw = conjugate(&l, &gamma, n);
    let mut bq = Vec::with_capacity(grid.nodes * n * n);
    for jac in &jacs {
        bq.extend(jac.iter().zip(&j0).map(|(a, b)| a - b));
    }
    Ok(WeightedOperator {
        grid,
        weight: *weight,
        q: profile.shift,
        n,
        c: profile.c,
        diffusion: model.diffusion.clone(),
        l,
        lw,
        bq,
        jac_minus: model.jacobian(&profile.end_minus),
        jac_plus: model.jacobian(&profile.end_plus),
        gamma,
        yprime: profile.y0prime.clone(),
    })
}

/// Which end state a limit operator is taken at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Minus,
    Plus,
}

/// Constant-coefficient operator at an end state with, on the left, its
/// upper-triangular splitting.
#[derive(Debug, Clone)]
pub struct LimitOperator {
    pub op: WeightedOperator,
    /// `D₁ ∂xx + c ∂x + A₁` on the `U` block.
    pub l1: Option<BandedMatrix>,
    /// `D₂ ∂xx + c ∂x + ∂_V R₂(0, 0)` on the `V` block.
    pub l2: Option<BandedMatrix>,
    /// `∂_V R₁(0, 0)`, `n1 × n2` row-major.
    pub coupling: Vec<f64>,
    /// Largest entry of the lower-left block of `∂R(0)`.
    pub lower_left_max: f64,
}

pub fn limit_operator(model: &ReactionModel, profile: &FrontProfile, side: Side, weight: &Weight) -> Result<LimitOperator> {
    let grid = profile.grid;
    let (n, n1, n2) = (model.n, model.n1, model.n2);
    let state = match side {
        Side::Minus => profile.end_minus.clone(),
        Side::Plus => profile.end_plus.clone(),
    };
    let jac = model.jacobian(&state);
    let l = assemble_matrix(&grid, n, &model.diffusion, profile.c, profile.transport, |_| jac.clone())?;
    let gamma = weight.samples(&grid);
    let lw = conjugate(&l, &gamma, n);
    let j0 = model.jacobian(&vec![0.0; n]);
    let bq = jac.iter().zip(&j0).map(|(a, b)| a - b).cycle().take(grid.nodes * n * n).collect();
    let op = WeightedOperator {
        grid,
        weight: *weight,
        q: profile.shift,
        n,
        c: profile.c,
        diffusion: model.diffusion.clone(),
        l,
        lw,
        bq,
        jac_minus: model.jacobian(&profile.end_minus),
        jac_plus: model.jacobian(&profile.end_plus),
        gamma,
        yprime: GridField::zeros(grid.nodes, n),
    };
    let mut lower_left_max = 0.0f64;
    for a in n1..n {
        for b in 0..n1 {
            lower_left_max = lower_left_max.max(jac[a * n + b].abs());
        }
    }
    let mut coupling = vec![0.0; n1 * n2];
    for a in 0..n1 {
        for b in 0..n2 {
            coupling[a * n2 + b] = jac[a * n + n1 + b];
        }
    }
    let (l1, l2) = if side == Side::Minus {
        let a1 = model.a1.clone();
        let l1 = assemble_matrix(&grid, n1, &model.diffusion[..n1], profile.c, profile.transport, |_| a1.clone())?;
        let mut r2 = vec![0.0; n2 * n2];
        for a in 0..n2 {
            for b in 0..n2 {
                r2[a * n2 + b] = jac[(n1 + a) * n + n1 + b];
            }
        }
        let l2 = assemble_matrix(&grid, n2, &model.diffusion[n1..], profile.c, profile.transport, |_| r2.clone())?;
        (Some(l1), Some(l2))
    } else {
        (None, None)
    };
    Ok(LimitOperator {
        op,
        l1,
        l2,
        coupling,
        lower_left_max,
    })
}

/// One sample of an essential-spectrum curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: f64,
    pub side: Side,
    pub branch: usize,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EssentialSpectrum {
    pub points: Vec<CurvePoint>,
    pub sup_minus: f64,
    pub sup_plus: f64,
    pub ess_sup_real: f64,
    pub pass: bool,
}

impl EssentialSpectrum {
    /// CSV with columns `k, side, branch, re, im`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,side,branch,re_lambda,im_lambda\n");
        for p in &self.points {
            let side = match p.side {
                Side::Minus => "minus",
                Side::Plus => "plus",
            };
            s.push_str(&format!("{},{},{},{},{}\n", p.k, side, p.branch, p.re, p.im));
        }
        s
    }
}

/// 2001 frequencies on `[-20, 20]`.
pub fn default_k_grid() -> Vec<f64> {
    (0..2001).map(|i| -20.0 + 0.02 * i as f64).collect()
}

/// Eigenvalues of the symbol `(ik - α)² D + c (ik - α) + J`, sorted by real part.
pub fn symbol_eigenvalues(diffusion: &[f64], c: f64, jac: &[f64], alpha: f64, k: f64) -> Vec<Complex64> {
    let n = diffusion.len();
    let z = Complex64::new(-alpha, k);
    let m = DMatrix::from_fn(n, n, |a, b| {
        let mut v = Complex64::new(jac[a * n + b], 0.0);
        if a == b {
            v += z * z * diffusion[a] + c * z;
        }
        v
    });
    let mut ev: Vec<Complex64> = if n == 1 {
        vec![m[(0, 0)]]
    } else {
        nalgebra::Schur::new(m).eigenvalues().map(|v| v.iter().copied().collect()).unwrap_or_default()
    };
    ev.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    ev
}

/// Boundary curves of the essential spectrum from the two limit symbols.
pub fn essential_spectrum_curves(
    diffusion: &[f64],
    c: f64,
    jac_minus: &[f64],
    jac_plus: &[f64],
    weight: &Weight,
    k_grid: &[f64],
) -> EssentialSpectrum {
    let mut points = Vec::with_capacity(k_grid.len() * diffusion.len() * 2);
    let mut sup_minus = f64::NEG_INFINITY;
    let mut sup_plus = f64::NEG_INFINITY;
    for (side, jac, alpha) in [
        (Side::Minus, jac_minus, weight.alpha_minus),
        (Side::Plus, jac_plus, weight.alpha_plus),
    ] {
        for &k in k_grid {
            for (branch, ev) in symbol_eigenvalues(diffusion, c, jac, alpha, k).into_iter().enumerate() {
                match side {
                    Side::Minus => sup_minus = sup_minus.max(ev.re),
                    Side::Plus => sup_plus = sup_plus.max(ev.re),
                }
                points.push(CurvePoint {
                    k,
                    side,
                    branch,
                    re: ev.re,
                    im: ev.im,
                });
            }
        }
    }
    let ess_sup_real = sup_minus.max(sup_plus);
    EssentialSpectrum {
        points,
        sup_minus,
        sup_plus,
        ess_sup_real,
        pass: ess_sup_real < 0.0,
    }
}

impl WeightedOperator {
    pub fn essential_spectrum(&self, k_grid: &[f64]) -> EssentialSpectrum {
        essential_spectrum_curves(&self.diffusion, self.c, &self.jac_minus, &self.jac_plus, &self.weight, k_grid)
    }

    /// `|Lw (Γ Y')|_∞` and `|L Y'|_∞`.
    pub fn zero_mode_residual(&self, yprime: &GridField) -> f64 {
        self.l.mul_vec(&yprime.values).iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralDecomposition {
    #[serde(serialize_with = "ser_complex_vec")]
    pub eigenvalues: Vec<Complex64>,
    #[serde(serialize_with = "ser_complex")]
    pub lambda0: Complex64,
    #[serde(skip)]
    pub zero_mode: GridField,
    pub cosine: f64,
    pub ess_sup_real: f64,
    /// `-max Re` over the nonzero computed eigenvalues.
    pub point_gap: f64,
    /// `min(point_gap, -ess_sup_real)`.
    pub nu_raw: f64,
    /// `nu_raw` shrunk by 10% for downstream use.
    pub nu: f64,
    /// Distance from `λ₀` to the next computed eigenvalue.
    pub separation: f64,
    pub simple: bool,
    pub hypothesis_a: bool,
    pub hypothesis_b: bool,
}

fn ser_complex<S: serde::Serializer>(z: &Complex64, s: S) -> std::result::Result<S::Ok, S::Error> {
    [z.re, z.im].serialize(s)
}

fn ser_complex_vec<S: serde::Serializer>(v: &[Complex64], s: S) -> std::result::Result<S::Ok, S::Error> {
    v.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>().serialize(s)
}

/// Default shifts: near zero, further right and off the real axis.
pub fn default_shift_options() -> ShiftInvertOptions {
    ShiftInvertOptions {
        shifts: vec![
            Complex64::new(0.05, 0.0),
            Complex64::new(0.5, 0.0),
            Complex64::new(0.2, 0.6),
            Complex64::new(0.2, -0.6),
        ],
        krylov_dim: 60,
        max_restarts: 30,
        rel_tol: 1e-8,
        seed: 7,
    }
}

/// Rightmost eigenvalues of `Lw`, the zero eigenvalue and the gap `ν`.
pub fn point_spectrum(op: &WeightedOperator, count: usize, opts: &ShiftInvertOptions) -> Result<SpectralDecomposition> {
    let pairs = eigs_rightmost_banded(&op.lw, count, opts)?;
    let ess = op.essential_spectrum(&default_k_grid());
    let (i0, _) = pairs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.norm().total_cmp(&b.1.value.norm()))
        .expect("at least one pair");
    let lambda0 = pairs[i0].value;
    let others: Vec<Complex64> = pairs.iter().enumerate().filter(|(i, _)| *i != i0).map(|(_, p)| p.value).collect();
    let point_gap = -others.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let nu_raw = point_gap.min(-ess.ess_sup_real);
    let separation = others.iter().map(|z| (z - lambda0).norm()).fold(f64::INFINITY, f64::min);

    // Unweighted real zero mode, aligned with Y' in sign and scale.
    let n = op.n;
    let v = &pairs[i0].vector;
    let pivot = v.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())).copied().unwrap_or(Complex64::new(1.0, 0.0));
    let rot = pivot.conj() / pivot.norm();
    let gy: Vec<f64> = op.yprime.values.iter().enumerate().map(|(k, y)| op.gamma[k / n] * y).collect();
    let vr: Vec<f64> = v.iter().map(|z| (z * rot).re).collect();
    let dot: f64 = vr.iter().zip(&gy).map(|(a, b)| a * b).sum();
    let nv = vr.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ng = gy.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = if nv > 0.0 && ng > 0.0 { dot.abs() / (nv * ng) } else { 0.0 };
    let mut zero_mode = GridField::zeros(op.grid.nodes, n);
    for (k, val) in vr.iter().enumerate() {
        zero_mode.values[k] = val / op.gamma[k / n];
    }
    let zz: f64 = zero_mode.values.iter().map(|a| a * a).sum();
    let zy: f64 = zero_mode.values.iter().zip(&op.yprime.values).map(|(a, b)| a * b).sum();
    if zz > 0.0 {
        zero_mode = zero_mode.scaled(zy / zz);
    }

    let simple = separation >= 0.5 * nu_raw.max(0.0);
    let hypothesis_a = ess.pass;
    let hypothesis_b = nu_raw > 0.0 && lambda0.norm() <= 1e-3 * nu_raw && simple && cosine >= 0.999;
    let mut eigenvalues: Vec<Complex64> = pairs.iter().map(|p| p.value).collect();
    eigenvalues.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(SpectralDecomposition {
        eigenvalues,
        lambda0,
        zero_mode,
        cosine,
        ess_sup_real: ess.ess_sup_real,
        point_gap,
        nu_raw,
        nu: 0.9 * nu_raw,
        separation,
        simple,
        hypothesis_a,
        hypothesis_b,
    })
}

/// Trapezoid weights on the grid.
pub fn trapezoid_weights(grid: &SpatialGrid) -> Vec<f64> {
    let mut w = vec![grid.h; grid.nodes];
    w[0] *= 0.5;
    w[grid.nodes - 1] *= 0.5;
    w
}

/// The translation mode `Y_q'`, its adjoint `Z_q` and the functional
/// `π_q(Y) = ∫ ⟨Z_q, γ Y⟩ dx` realized by the trapezoid rule.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub grid: SpatialGrid,
    pub weight: Weight,
    pub q: f64,
    /// Discrete kernel vector of `L`, scaled to the centered-difference `Y_q'`.
    pub yqprime: GridField,
    pub zq: GridField,
    /// `π_q(Y_q')` after normalization.
    pub normalization: f64,
    /// Node-major coefficients `w_i γ_i Z_q(x_i)`.
    functional: Vec<f64>,
}

fn inverse_iteration(a: &BandedMatrix, start: &[f64], iterations: usize) -> Result<Vec<f64>> {
    let shift = -1e-9 * a.norm_inf().max(1.0);
    let shifted = a.scaled_plus_identity(1.0, -shift);
    let lu = shifted.factor()?;
    let mut v = start.to_vec();
    for _ in 0..iterations {
        lu.solve_in_place(&mut v);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(nv > 0.0) || !nv.is_finite() {
            return Err(Error::KernelDimension("inverse iteration collapsed".into()));
        }
        for x in v.iter_mut() {
            *x /= nv;
        }
    }
    Ok(v)
}

/// Builds the projection pair from the discrete kernels of `L` and `Lwᵀ`.
pub fn adjoint_zero_mode(op: &WeightedOperator) -> Result<ProjectionPair> {
    let n = op.n;
    let nodes = op.grid.nodes;
    let d = &op.yprime.values;
    if d.iter().all(|v| *v == 0.0) {
        return Err(Error::KernelDimension("profile derivative vanishes".into()));
    }
    let kernel = inverse_iteration(&op.l, d, 3)?;
    let kk: f64 = kernel.iter().map(|a| a * a).sum();
    let kd: f64 = kernel.iter().zip(d).map(|(a, b)| a * b).sum();
    let yq: Vec<f64> = kernel.iter().map(|a| a * kd / kk).collect();

    let start: Vec<f64> = yq.iter().enumerate().map(|(k, y)| op.gamma[k / n] * y).collect();
    let left = inverse_iteration(&op.lw.transpose(), &start, 4)?;
    let weights = trapezoid_weights(&op.grid);
    let s: f64 = left.iter().zip(&yq).enumerate().map(|(k, (l, y))| l * op.gamma[k / n] * y).sum();
    let nl = left.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = start.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(s.abs() > 1e-8 * nl * ny) {
        return Err(Error::KernelDimension(format!(
            "left and right zero modes are orthogonal (overlap {:.3e}); the zero eigenvalue is not simple",
            s / (nl * ny)
        )));
    }
    let mut zq = GridField::zeros(nodes, n);
    let mut functional = vec![0.0; nodes * n];
    for k in 0..nodes * n {
        let i = k / n;
        zq.values[k] = left[k] / (weights[i] * s);
        functional[k] = left[k] / s * op.gamma[i];
    }
    let yqprime = GridField::from_values(n, yq)?;
    let mut pair = ProjectionPair {
        grid: op.grid,
        weight: op.weight,
        q: op.q,
        yqprime,
        zq,
        normalization: 0.0,
        functional,
    };
    pair.normalization = pair.pi(&pair.yqprime);
    Ok(pair)
}

impl ProjectionPair {
    /// `π_q(Y)`.
    pub fn pi(&self, y: &GridField) -> f64 {
        self.functional.iter().zip(&y.values).map(|(a, b)| a * b).sum()
    }

    /// `π_q` applied to a raw node-major vector.
    pub fn pi_slice(&self, y: &[f64]) -> f64 {
        self.functional.iter().zip(y).map(|(a, b)| a * b).sum()
    }

    pub fn center(&self, y: &GridField) -> GridField {
        self.yqprime.scaled(self.pi(y))
    }

    pub fn stable(&self, y: &GridField) -> GridField {
        y.axpy(-self.pi(y), &self.yqprime)
    }

    /// `max |Z_q|` at the two boundary nodes over `max |Z_q|`.
    pub fn boundary_ratio(&self) -> f64 {
        let n = self.zq.components;
        let last = self.zq.nodes() - 1;
        let edge = (0..n).map(|j| self.zq.get(0, j).abs().max(self.zq.get(last, j).abs())).fold(0.0, f64::max);
        edge / self.zq.max_abs()
    }
}

/// `(P_c Y, P_s Y, π_q(Y))`.
pub fn apply_projections(pair: &ProjectionPair, y: &GridField) -> (GridField, GridField, f64) {
    let pi = pair.pi(y);
    let pc = pair.yqprime.scaled(pi);
    let ps = y.sub(&pc);
    (pc, ps, pi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzRatio {
    pub dq: f64,
    /// Sampled `|P_q^c - P_p^c|` in `|·|_β`, divided by `|q - p|`.
    pub beta: f64,
    /// The same in `|·|_α`.
    pub alpha: f64,
}

/// Sampled operator-norm difference of two center projections over `samples`
/// random unit fields; both pairs must share grid and weight.
pub fn projection_lipschitz_check(pq: &ProjectionPair, pp: &ProjectionPair, norms: &Norms, samples: usize, seed: u64) -> LipschitzRatio {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pq.yqprime.components;
    let dq = (pq.q - pp.q).abs();
    let mut beta = 0.0f64;
    let mut alpha = 0.0f64;
    for _ in 0..samples {
        let y = random_bumps(&pq.grid, n, &mut rng, 8.0, 4);
        let diff = pq.center(&y).sub(&pp.center(&y));
        beta = beta.max(norms.beta(&diff) / norms.beta(&y));
        alpha = alpha.max(norms.alpha(&diff) / norms.alpha(&y));
    }
    if dq > 0.0 {
        beta /= dq;
        alpha /= dq;
    }
    LipschitzRatio { dq, beta, alpha }
}
