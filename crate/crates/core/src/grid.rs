//! Uniform grids, exponential weights and the norms used throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BandedMatrix;

/// Uniform grid on `[-X, X]` with an odd node count, so `x = 0` is a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub half_width: f64,
    pub nodes: usize,
    pub h: f64,
}

impl SpatialGrid {
    pub fn new(half_width: f64, nodes: usize) -> Result<Self> {
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::param("X", "half-width must be positive"));
        }
        if nodes < 3 || nodes % 2 == 0 {
            return Err(Error::param("N", format!("node count must be odd and >= 3, got {nodes}")));
        }
        Ok(Self {
            half_width,
            nodes,
            h: 2.0 * half_width / (nodes - 1) as f64,
        })
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        // Mirror the centre so the grid is exactly symmetric about 0.
        let c = (self.nodes - 1) / 2;
        if i >= c {
            (i - c) as f64 * self.h
        } else {
            -((c - i) as f64) * self.h
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.x(i)).collect()
    }

    pub fn center(&self) -> usize {
        (self.nodes - 1) / 2
    }
}

/// `make_grid`: uniform grid with half-width `X` and `N` nodes.
pub fn make_grid(half_width: f64, nodes: usize) -> Result<SpatialGrid> {
    SpatialGrid::new(half_width, nodes)
}

/// Weight `γ = e^η` with `η(x) = α₋x` left of `-x0`, `α₊x` right of `x0`
/// and a quintic blend in between matching two derivatives at both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub alpha_minus: f64,
    pub alpha_plus: f64,
    pub x0: f64,
    /// Blend polynomial in `s = (x + x0) / (2 x0)`, lowest degree first.
    middle: [f64; 6],
}

impl Weight {
    pub fn new(alpha_minus: f64, alpha_plus: f64, x0: f64) -> Result<Self> {
        if !(x0 > 0.0) || !x0.is_finite() {
            return Err(Error::param("x0", "matching abscissa must be positive"));
        }
        if !alpha_minus.is_finite() || !alpha_plus.is_finite() {
            return Err(Error::param("alpha", "exponents must be finite"));
        }
        let l = 2.0 * x0;
        let (v0, d0) = (-alpha_minus * x0, alpha_minus * l);
        let (v1, d1) = (alpha_plus * x0, alpha_plus * l);
        // Quintic Hermite basis with zero second derivatives at both ends.
        let h0 = [1.0, 0.0, 0.0, -10.0, 15.0, -6.0];
        let h1 = [0.0, 1.0, 0.0, -6.0, 8.0, -3.0];
        let h3 = [0.0, 0.0, 0.0, 10.0, -15.0, 6.0];
        let h4 = [0.0, 0.0, 0.0, -4.0, 7.0, -3.0];
        let mut middle = [0.0; 6];
        for k in 0..6 {
            middle[k] = v0 * h0[k] + d0 * h1[k] + v1 * h3[k] + d1 * h4[k];
        }
        Ok(Self {
            alpha_minus,
            alpha_plus,
            x0,
            middle,
        })
    }

    pub fn unit() -> Self {
        Self::new(0.0, 0.0, 1.0).expect("unit weight")
    }

    pub fn is_unit(&self) -> bool {
        self.alpha_minus == 0.0 && self.alpha_plus == 0.0
    }

    /// Returns `(η, η', η'')` at `x`.
    pub fn exponent(&self, x: f64) -> (f64, f64, f64) {
        if x <= -self.x0 {
            return (self.alpha_minus * x, self.alpha_minus, 0.0);
        }
        if x >= self.x0 {
            return (self.alpha_plus * x, self.alpha_plus, 0.0);
        }
        let l = 2.0 * self.x0;
        let s = (x + self.x0) / l;
        let c = &self.middle;
        let p = c[0] + s * (c[1] + s * (c[2] + s * (c[3] + s * (c[4] + s * c[5]))));
        let dp = c[1] + s * (2.0 * c[2] + s * (3.0 * c[3] + s * (4.0 * c[4] + s * 5.0 * c[5])));
        let ddp = 2.0 * c[2] + s * (6.0 * c[3] + s * (12.0 * c[4] + s * 20.0 * c[5]));
        (p, dp / l, ddp / (l * l))
    }

    pub fn gamma(&self, x: f64) -> f64 {
        self.exponent(x).0.exp()
    }

    pub fn samples(&self, grid: &SpatialGrid) -> Vec<f64> {
        (0..grid.nodes).map(|i| self.gamma(grid.x(i))).collect()
    }

    /// Admissibility against fitted tail rates: `0 < α₋ < -ω₋` and `0 ≤ α₊ < ω₊`.
    pub fn check_admissible(&self, omega_minus: f64, omega_plus: f64) -> Result<()> {
        if !(self.alpha_minus > 0.0 && self.alpha_minus < -omega_minus) {
            return Err(Error::InadmissibleWeight(format!(
                "0 < alpha_minus < -omega_minus violated: alpha_minus = {}, omega_minus = {}",
                self.alpha_minus, omega_minus
            )));
        }
        if !(self.alpha_plus >= 0.0 && self.alpha_plus < omega_plus) {
            return Err(Error::InadmissibleWeight(format!(
                "0 <= alpha_plus < omega_plus violated: alpha_plus = {}, omega_plus = {}",
                self.alpha_plus, omega_plus
            )));
        }
        Ok(())
    }
}

/// `make_weight`: the C² weight of class `(α₋, α₊)` blended on `[-x0, x0]`.
pub fn make_weight(alpha: (f64, f64), x0: f64) -> Result<Weight> {
    Weight::new(alpha.0, alpha.1, x0)
}

/// Samples of a map `ℝ → ℝⁿ`, stored node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub components: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(nodes: usize, components: usize) -> Self {
        Self {
            components,
            values: vec![0.0; nodes * components],
        }
    }

    pub fn from_values(components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 || values.len() % components != 0 {
            return Err(Error::DimensionMismatch {
                expected: components,
                got: values.len(),
            });
        }
        Ok(Self { components, values })
    }

    pub fn from_fn(grid: &SpatialGrid, components: usize, mut f: impl FnMut(f64, usize) -> f64) -> Self {
        let mut out = Self::zeros(grid.nodes, components);
        for i in 0..grid.nodes {
            let x = grid.x(i);
            for j in 0..components {
                out.values[i * components + j] = f(x, j);
            }
        }
        out
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.components
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.components + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.components + j] = v;
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.components..(i + 1) * self.components]
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        self.values.iter().skip(j).step_by(self.components).copied().collect()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            components: self.components,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &GridField) -> Self {
        debug_assert_eq!(self.values.len(), other.values.len());
        Self {
            components: self.components,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }

    pub fn sub(&self, other: &GridField) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// CSV with columns `x, component_1, ..., component_n`.
    pub fn to_csv(&self, grid: &SpatialGrid) -> String {
        let mut s = String::from("x");
        for j in 0..self.components {
            s.push_str(&format!(",component_{}", j + 1));
        }
        s.push('\n');
        for i in 0..self.nodes() {
            s.push_str(&format!("{}", grid.x(i)));
            for j in 0..self.components {
                s.push_str(&format!(",{}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let components = header.split(',').count().saturating_sub(1);
        if components == 0 {
            return Err(Error::Parse("CSV has no component columns".into()));
        }
        let mut values = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != components + 1 {
                return Err(Error::Parse(format!("row {} has {} columns", ln + 2, cols.len())));
            }
            for c in &cols[1..] {
                values.push(
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: {e}", ln + 2)))?,
                );
            }
        }
        Self::from_values(components, values)
    }
}

/// Realization of the base norm `|·|₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Sup,
    H1,
}

/// Weight samples on a grid, ready for repeated norm evaluation.
#[derive(Debug, Clone)]
pub struct Norms {
    pub grid: SpatialGrid,
    pub kind: NormKind,
    gamma: Vec<f64>,
}

impl Norms {
    pub fn new(grid: &SpatialGrid, weight: &Weight, kind: NormKind) -> Self {
        Self {
            grid: *grid,
            kind,
            gamma: weight.samples(grid),
        }
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    fn eval(&self, y: &GridField, weighted: bool, first: usize) -> f64 {
        let n = y.components;
        let g = |i: usize| if weighted { self.gamma[i] } else { 1.0 };
        match self.kind {
            NormKind::Sup => {
                let mut m = 0.0f64;
                for i in 0..y.nodes() {
                    let gi = g(i);
                    for j in first..n {
                        m = m.max((gi * y.get(i, j)).abs());
                    }
                }
                m
            }
            NormKind::H1 => {
                let h = self.grid.h;
                let nodes = y.nodes();
                let val = |i: isize, j: usize| -> f64 {
                    if i < 0 || i as usize >= nodes {
                        0.0
                    } else {
                        g(i as usize) * y.get(i as usize, j)
                    }
                };
                let mut s = 0.0;
                for i in 0..nodes as isize {
                    for j in first..n {
                        let v = val(i, j);
                        let d = (val(i + 1, j) - val(i - 1, j)) / (2.0 * h);
                        s += v * v + d * d;
                    }
                }
                (h * s).sqrt()
            }
        }
    }

    /// `|y|₀`.
    pub fn zero(&self, y: &GridField) -> f64 {
        self.eval(y, false, 0)
    }

    /// `|y|_α = |γ y|₀`.
    pub fn alpha(&self, y: &GridField) -> f64 {
        self.eval(y, true, 0)
    }

    /// `|y|_β = max(|y|₀, |y|_α)`.
    pub fn beta(&self, y: &GridField) -> f64 {
        self.zero(y).max(self.alpha(y))
    }

    /// `|v|₀` for the trailing components starting at `first`.
    pub fn tail_zero(&self, y: &GridField, first: usize) -> f64 {
        self.eval(y, false, first)
    }

    pub fn tail_alpha(&self, y: &GridField, first: usize) -> f64 {
        self.eval(y, true, first)
    }
}

/// Which norm `norm` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    Zero,
    Alpha,
    Beta,
}

/// Single-shot norm of `y`; `weight = None` means `γ ≡ 1`.
pub fn norm(grid: &SpatialGrid, weight: Option<&Weight>, y: &GridField, kind: NormKind) -> Result<f64> {
    if y.nodes() != grid.nodes || y.values.len() != grid.nodes * y.components {
        return Err(Error::DimensionMismatch {
            expected: grid.nodes,
            got: y.nodes(),
        });
    }
    let w = weight.copied().unwrap_or_else(Weight::unit);
    Ok(Norms::new(grid, &w, kind).alpha(y))
}

/// The three trajectory norms and their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryNorms {
    pub weighted_alpha: f64,
    pub sup_zero: f64,
    pub weighted_v: f64,
    pub total: f64,
}

/// Discrete `sup_k e^{ωt_k}|y_k|_α`, `sup_k |y_k|₀`, `sup_k e^{ωt_k}|v_k|₀`.
///
/// `v` is the block of components starting at `n1`.
pub fn trajectory_norms(
    times: &[f64],
    states: &[GridField],
    omega: f64,
    norms: &Norms,
    n1: usize,
) -> Result<TrajectoryNorms> {
    if times.is_empty() || states.is_empty() {
        return Err(Error::param("trajectory", "empty trajectory"));
    }
    if times.len() != states.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: states.len(),
        });
    }
    if !(omega > 0.0) {
        return Err(Error::param("omega", "rate must be positive"));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("times", "must be nondecreasing"));
    }
    let mut out = TrajectoryNorms {
        weighted_alpha: 0.0,
        sup_zero: 0.0,
        weighted_v: 0.0,
        total: 0.0,
    };
    for (t, y) in times.iter().zip(states) {
        let e = (omega * t).exp();
        out.weighted_alpha = out.weighted_alpha.max(e * norms.alpha(y));
        out.sup_zero = out.sup_zero.max(norms.zero(y));
        out.weighted_v = out.weighted_v.max(e * norms.tail_zero(y, n1));
    }
    out.total = out.weighted_alpha.max(out.sup_zero).max(out.weighted_v);
    Ok(out)
}

/// Smooth random field: a sum of Gaussian bumps per component with centres
/// in `[-support, support]`.
pub fn random_bumps<R: rand::Rng>(grid: &SpatialGrid, components: usize, rng: &mut R, support: f64, bumps: usize) -> GridField {
    let mut out = GridField::zeros(grid.nodes, components);
    for j in 0..components {
        for _ in 0..bumps {
            let centre = rng.gen_range(-support..=support);
            let width: f64 = rng.gen_range(0.6..2.0);
            let amp: f64 = rng.gen_range(-1.0..1.0);
            for i in 0..grid.nodes {
                let z = (grid.x(i) - centre) / width;
                if z.abs() < 12.0 {
                    out.values[i * components + j] += amp * (-0.5 * z * z).exp();
                }
            }
        }
    }
    out
}

/// First-derivative stencil used for the advection term `c ∂x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScheme {
    /// Centered differences for every component.
    Centered,
    /// Second-order one-sided differences, taken from the upstream side, for
    /// components without diffusion; centered elsewhere.
    #[default]
    Upwind,
}

impl TransportScheme {
    /// Weights of `∂x` at node offsets `-2..=2` for a component with the
    /// given diffusion coefficient and advection speed `c`.
    pub fn weights(self, diffusion: f64, c: f64, h: f64) -> [f64; 5] {
        let k = 0.5 / h;
        if self == TransportScheme::Upwind && diffusion == 0.0 {
            if c >= 0.0 {
                [0.0, 0.0, -3.0 * k, 4.0 * k, -k]
            } else {
                [k, -4.0 * k, 3.0 * k, 0.0, 0.0]
            }
        } else {
            [0.0, -k, 0.0, k, 0.0]
        }
    }
}

/// Boundary treatment for the difference operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryCondition {
    /// Values beyond the domain are taken as 0.
    #[default]
    Dirichlet0,
}

/// Centered second-order `Dx` and `Dxx` on a scalar grid.
pub fn diff_ops(grid: &SpatialGrid, _bc: BoundaryCondition) -> Result<(BandedMatrix, BandedMatrix)> {
    let n = grid.nodes;
    let h = grid.h;
    let mut dx = BandedMatrix::zeros(n, 1, 1)?;
    let mut dxx = BandedMatrix::zeros(n, 1, 1)?;
    for i in 0..n {
        dxx.set(i, i, -2.0 / (h * h));
        if i > 0 {
            dx.set(i, i - 1, -0.5 / h);
            dxx.set(i, i - 1, 1.0 / (h * h));
        }
        if i + 1 < n {
            dx.set(i, i + 1, 0.5 / h);
            dxx.set(i, i + 1, 1.0 / (h * h));
        }
    }
    Ok((dx, dxx))
}

/// Centered derivative of every component with given ghost values at both ends.
pub fn derivative(y: &GridField, h: f64, left: &[f64], right: &[f64]) -> GridField {
    let n = y.components;
    let nodes = y.nodes();
    let mut out = GridField::zeros(nodes, n);
    for i in 0..nodes {
        for j in 0..n {
            let lo = if i == 0 { left[j] } else { y.get(i - 1, j) };
            let hi = if i + 1 == nodes { right[j] } else { y.get(i + 1, j) };
            out.set(i, j, (hi - lo) / (2.0 * h));
        }
    }
    out
}
