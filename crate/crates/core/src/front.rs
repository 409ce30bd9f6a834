//! Traveling fronts: Newton on the steady moving-frame boundary value
//! problem, natural-parameter continuation, shifts and tail-rate fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{derivative, GridField, SpatialGrid, TransportScheme};
use crate::linalg::BandedMatrix;
use crate::model::ReactionModel;

/// Samples at or below this level are treated as round-off in tail fits.
pub const NOISE_FLOOR: f64 = 1e-13;

/// Gauge fixing the translation of the front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phase {
    /// `Y_index(at) = value`; `value = None` means the end-state midpoint.
    PinComponent {
        index: usize,
        value: Option<f64>,
        #[serde(default)]
        at: f64,
    },
    /// `∫ ⟨Y - Y_guess, Y_guess'⟩ dx = 0`.
    Orthogonality,
}

impl Default for Phase {
    fn default() -> Self {
        Phase::PinComponent {
            index: 0,
            value: None,
            at: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub min_damping: f64,
    /// Stencil of the advection term.
    pub transport: TransportScheme,
    /// Re-solve on the half-resolution grid and extrapolate the speed.
    pub richardson: bool,
}

impl Default for FrontOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iterations: 60,
            min_damping: 1.0 / 1024.0,
            transport: TransportScheme::Upwind,
            richardson: true,
        }
    }
}

/// Fitted tail exponents and prefactors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub omega_minus: f64,
    pub omega_plus: f64,
    pub c_minus: f64,
    pub c_plus: f64,
    pub minus_undetermined: bool,
    pub plus_undetermined: bool,
    pub minus_non_monotone: bool,
    pub plus_non_monotone: bool,
}

/// A sampled front `Y₀` with speed `c` in shifted coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontProfile {
    pub grid: SpatialGrid,
    pub y0: GridField,
    pub c: f64,
    /// Speed extrapolated from this grid and the half-resolution grid.
    pub c_extrapolated: Option<f64>,
    pub end_minus: Vec<f64>,
    pub end_plus: Vec<f64>,
    pub omega_minus: f64,
    pub omega_plus: f64,
    pub decay: DecayFit,
    pub y0prime: GridField,
    pub shift: f64,
    pub phase: Phase,
    pub residual: f64,
    pub degenerate: bool,
    pub newton_iterations: usize,
    pub damping_history: Vec<f64>,
    #[serde(default)]
    pub transport: TransportScheme,
}

/// Logistic blend `Y₋ + (Y₊ - Y₋)(1 + tanh(s x))/2`.
pub fn initial_guess(end_minus: &[f64], end_plus: &[f64], grid: &SpatialGrid, steepness: f64) -> Result<GridField> {
    if end_minus.len() != end_plus.len() {
        return Err(Error::DimensionMismatch {
            expected: end_minus.len(),
            got: end_plus.len(),
        });
    }
    Ok(GridField::from_fn(grid, end_minus.len(), |x, j| {
        let s = 0.5 * (1.0 + (steepness * x).tanh());
        end_minus[j] + (end_plus[j] - end_minus[j]) * s
    }))
}

/// Initial guess from the model's end states.
pub fn model_guess(model: &ReactionModel, grid: &SpatialGrid, steepness: f64) -> GridField {
    initial_guess(&model.end_minus, &model.end_plus, grid, steepness).expect("model end states share a dimension")
}

/// Four-point Lagrange weights for `x` on `grid`, with the first node index.
fn cubic_stencil(grid: &SpatialGrid, x: f64) -> (isize, [f64; 4]) {
    let s = (x + grid.half_width) / grid.h;
    let k = s.floor() as isize;
    let t = s - k as f64;
    // Nodes k-1, k, k+1, k+2 at offsets -1, 0, 1, 2 from x_k.
    let w = [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ];
    (k - 1, w)
}

/// `Y(x)` by cubic interpolation; end states are used beyond the samples.
pub fn interpolate_at(y: &GridField, grid: &SpatialGrid, end_minus: &[f64], end_plus: &[f64], x: f64, out: &mut [f64]) {
    let (first, w) = cubic_stencil(grid, x);
    let nodes = grid.nodes as isize;
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let i = first + k as isize;
            let v = if i < 0 {
                end_minus[j]
            } else if i >= nodes {
                end_plus[j]
            } else {
                y.get(i as usize, j)
            };
            s += wk * v;
        }
        *o = s;
    }
}

/// Samples of `x ↦ Y(x - q)` by cubic interpolation.
pub fn interpolate_shift(y: &GridField, grid: &SpatialGrid, end_minus: &[f64], end_plus: &[f64], q: f64) -> GridField {
    let n = y.components;
    let mut out = GridField::zeros(grid.nodes, n);
    let mut buf = vec![0.0; n];
    for i in 0..grid.nodes {
        interpolate_at(y, grid, end_minus, end_plus, grid.x(i) - q, &mut buf);
        out.values[i * n..(i + 1) * n].copy_from_slice(&buf);
    }
    out
}

/// `D Y_xx + c Y_x + R(Y)` with end-state ghosts.
pub fn steady_residual(
    model: &ReactionModel,
    grid: &SpatialGrid,
    y: &GridField,
    c: f64,
    end_minus: &[f64],
    end_plus: &[f64],
    scheme: TransportScheme,
) -> GridField {
    let n = model.n;
    let h = grid.h;
    let nodes = grid.nodes;
    let mut out = GridField::zeros(nodes, n);
    let mut r = vec![0.0; n];
    for i in 0..nodes {
        model.eval_into(y.node(i), &mut r);
        for j in 0..n {
            let at = |k: isize| {
                let node = i as isize + k;
                if node < 0 {
                    end_minus[j]
                } else if node as usize >= nodes {
                    end_plus[j]
                } else {
                    y.get(node as usize, j)
                }
            };
            let w = scheme.weights(model.diffusion[j], c, h);
            let dx: f64 = (-2..=2).map(|k| w[(k + 2) as usize] * at(k)).sum();
            let v = model.diffusion[j] * (at(1) - 2.0 * at(0) + at(-1)) / (h * h) + c * dx + r[j];
            out.set(i, j, v);
        }
    }
    out
}

struct PhaseRow {
    node: usize,
    kind: PhaseKind,
}

enum PhaseKind {
    Pin { comp: usize, value: f64, first: isize, w: [f64; 4] },
    Integral { reference: GridField, slope: GridField },
}

/// Newton system for `(Y, c)` with the speed carried as a node field tied by
/// difference equations, which keeps the Jacobian banded.
struct FrontSystem<'a> {
    model: &'a ReactionModel,
    grid: SpatialGrid,
    end_minus: &'a [f64],
    end_plus: &'a [f64],
    phase: PhaseRow,
    scheme: TransportScheme,
    block: usize,
}

impl<'a> FrontSystem<'a> {
    fn new(
        model: &'a ReactionModel,
        grid: SpatialGrid,
        end_minus: &'a [f64],
        end_plus: &'a [f64],
        guess: &GridField,
        phase: Phase,
        scheme: TransportScheme,
    ) -> Result<Self> {
        let n = model.n;
        let (phase, block) = match phase {
            Phase::PinComponent { index, value, at } => {
                if index >= n {
                    return Err(Error::param("phase.index", format!("component {index} out of range")));
                }
                if end_minus[index] == end_plus[index] {
                    return Err(Error::PhaseDegenerate(format!(
                        "component {index} has equal end states, pinning it does not fix translations"
                    )));
                }
                if at.abs() > grid.half_width - 3.0 * grid.h {
                    return Err(Error::param("phase.at", "pin location must lie inside the grid"));
                }
                let value = value.unwrap_or(0.5 * (end_minus[index] + end_plus[index]));
                let (first, w) = cubic_stencil(&grid, at);
                let node = (((at + grid.half_width) / grid.h).round() as usize).min(grid.nodes - 1);
                (
                    PhaseRow {
                        node,
                        kind: PhaseKind::Pin {
                            comp: index,
                            value,
                            first,
                            w,
                        },
                    },
                    n + 1,
                )
            }
            Phase::Orthogonality => {
                let slope = derivative(guess, grid.h, end_minus, end_plus);
                if slope.max_abs() == 0.0 {
                    return Err(Error::PhaseDegenerate("reference profile has zero derivative".into()));
                }
                (
                    PhaseRow {
                        node: grid.nodes - 1,
                        kind: PhaseKind::Integral {
                            reference: guess.clone(),
                            slope,
                        },
                    },
                    n + 2,
                )
            }
        };
        Ok(Self {
            model,
            grid,
            end_minus,
            end_plus,
            phase,
            scheme,
            block,
        })
    }

    fn size(&self) -> usize {
        self.grid.nodes * self.block
    }

    fn pack(&self, y: &GridField, c: f64) -> Vec<f64> {
        let (n, m) = (self.model.n, self.block);
        let mut z = vec![0.0; self.size()];
        for i in 0..self.grid.nodes {
            z[i * m..i * m + n].copy_from_slice(y.node(i));
            z[i * m + n] = c;
        }
        if let PhaseKind::Integral { .. } = self.phase.kind {
            let phi = self.integrand(&z);
            let h = self.grid.h;
            for i in 1..self.grid.nodes {
                z[i * m + n + 1] = z[(i - 1) * m + n + 1] + 0.5 * h * (phi[i] + phi[i - 1]);
            }
        }
        z
    }

    fn unpack(&self, z: &[f64]) -> (GridField, f64) {
        let (n, m) = (self.model.n, self.block);
        let mut y = GridField::zeros(self.grid.nodes, n);
        for i in 0..self.grid.nodes {
            y.values[i * n..(i + 1) * n].copy_from_slice(&z[i * m..i * m + n]);
        }
        (y, z[self.phase.node * m + n])
    }

    fn integrand(&self, z: &[f64]) -> Vec<f64> {
        let (n, m) = (self.model.n, self.block);
        match &self.phase.kind {
            PhaseKind::Integral { reference, slope } => (0..self.grid.nodes)
                .map(|i| (0..n).map(|j| (z[i * m + j] - reference.get(i, j)) * slope.get(i, j)).sum())
                .collect(),
            _ => Vec::new(),
        }
    }

    #[inline]
    fn y_at(&self, z: &[f64], i: isize, j: usize) -> f64 {
        if i < 0 {
            self.end_minus[j]
        } else if i as usize >= self.grid.nodes {
            self.end_plus[j]
        } else {
            z[i as usize * self.block + j]
        }
    }

    #[inline]
    fn first_diff(&self, j: usize, c: f64) -> [f64; 5] {
        self.scheme.weights(self.model.diffusion[j], c, self.grid.h)
    }

    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let (n, m) = (self.model.n, self.block);
        let h2 = self.grid.h * self.grid.h;
        let nodes = self.grid.nodes;
        let p = self.phase.node;
        let mut g = vec![0.0; self.size()];
        let mut r = vec![0.0; n];
        let phi = self.integrand(z);
        for i in 0..nodes {
            let ii = i as isize;
            let c = z[i * m + n];
            self.model.eval_into(&z[i * m..i * m + n], &mut r);
            for j in 0..n {
                let (lo, mid, hi) = (self.y_at(z, ii - 1, j), z[i * m + j], self.y_at(z, ii + 1, j));
                let w = self.first_diff(j, c);
                let dx: f64 = (-2..=2).map(|k| w[(k + 2) as usize] * self.y_at(z, ii + k, j)).sum();
                g[i * m + j] = self.model.diffusion[j] * (hi - 2.0 * mid + lo) / h2 + c * dx + r[j];
            }
            g[i * m + n] = match (i.cmp(&p), &self.phase.kind) {
                (std::cmp::Ordering::Less, _) => z[(i + 1) * m + n] - c,
                (std::cmp::Ordering::Greater, _) => c - z[(i - 1) * m + n],
                (std::cmp::Ordering::Equal, PhaseKind::Pin { comp, value, first, w }) => {
                    let mut s = -value;
                    for (k, wk) in w.iter().enumerate() {
                        s += wk * self.y_at(z, first + k as isize, *comp);
                    }
                    s
                }
                (std::cmp::Ordering::Equal, PhaseKind::Integral { .. }) => z[i * m + n + 1],
            };
            if m == n + 2 {
                g[i * m + n + 1] = if i == 0 {
                    z[n + 1]
                } else {
                    z[i * m + n + 1] - z[(i - 1) * m + n + 1] - 0.5 * self.grid.h * (phi[i] + phi[i - 1])
                };
            }
        }
        g
    }

    fn jacobian(&self, z: &[f64]) -> Result<BandedMatrix> {
        let (n, m) = (self.model.n, self.block);
        let h = self.grid.h;
        let h2 = h * h;
        let nodes = self.grid.nodes;
        let p = self.phase.node;
        let band = 3 * m;
        let mut jac = BandedMatrix::zeros(self.size(), band, band)?;
        let mut dr = vec![0.0; n * n];
        for i in 0..nodes {
            let ii = i as isize;
            let c = z[i * m + n];
            self.model.jacobian_into(&z[i * m..i * m + n], &mut dr);
            for j in 0..n {
                let row = i * m + j;
                let d = self.model.diffusion[j];
                let w = self.first_diff(j, c);
                jac.add_to(row, i * m + j, -2.0 * d / h2);
                if i > 0 {
                    jac.add_to(row, (i - 1) * m + j, d / h2);
                }
                if i + 1 < nodes {
                    jac.add_to(row, (i + 1) * m + j, d / h2);
                }
                let mut dx = 0.0;
                for k in -2..=2isize {
                    let wk = w[(k + 2) as usize];
                    if wk == 0.0 {
                        continue;
                    }
                    dx += wk * self.y_at(z, ii + k, j);
                    let node = ii + k;
                    if node >= 0 && (node as usize) < nodes {
                        jac.add_to(row, node as usize * m + j, c * wk);
                    }
                }
                for k in 0..n {
                    jac.add_to(row, i * m + k, dr[j * n + k]);
                }
                jac.add_to(row, i * m + n, dx);
            }
            let row = i * m + n;
            match i.cmp(&p) {
                std::cmp::Ordering::Less => {
                    jac.add_to(row, (i + 1) * m + n, 1.0);
                    jac.add_to(row, i * m + n, -1.0);
                }
                std::cmp::Ordering::Greater => {
                    jac.add_to(row, i * m + n, 1.0);
                    jac.add_to(row, (i - 1) * m + n, -1.0);
                }
                std::cmp::Ordering::Equal => match &self.phase.kind {
                    PhaseKind::Pin { comp, first, w, .. } => {
                        for (k, wk) in w.iter().enumerate() {
                            let node = first + k as isize;
                            if node >= 0 && (node as usize) < nodes {
                                jac.add_to(row, node as usize * m + comp, *wk);
                            }
                        }
                    }
                    PhaseKind::Integral { .. } => jac.add_to(row, i * m + n + 1, 1.0),
                },
            }
            if let PhaseKind::Integral { slope, .. } = &self.phase.kind {
                let row = i * m + n + 1;
                jac.add_to(row, row, 1.0);
                if i > 0 {
                    jac.add_to(row, (i - 1) * m + n + 1, -1.0);
                    for j in 0..n {
                        jac.add_to(row, i * m + j, -0.5 * h * slope.get(i, j));
                        jac.add_to(row, (i - 1) * m + j, -0.5 * h * slope.get(i - 1, j));
                    }
                }
            }
        }
        Ok(jac)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct NewtonOutcome {
    y: GridField,
    c: f64,
    residual: f64,
    iterations: usize,
    damping: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn newton(
    model: &ReactionModel,
    grid: SpatialGrid,
    end_minus: &[f64],
    end_plus: &[f64],
    guess: &GridField,
    c_guess: f64,
    phase: Phase,
    opts: &FrontOptions,
) -> Result<NewtonOutcome> {
    let sys = FrontSystem::new(model, grid, end_minus, end_plus, guess, phase, opts.transport)?;
    let mut z = sys.pack(guess, c_guess);
    let mut g = sys.residual(&z);
    let mut damping = Vec::new();
    let mut iterations = 0;
    while inf_norm(&g) > opts.tol {
        if iterations >= opts.max_iterations {
            return Err(Error::NewtonNonConvergence {
                residual: inf_norm(&g),
                iterations,
                damping,
            });
        }
        iterations += 1;
        let jac = sys.jacobian(&z)?;
        let mut step: Vec<f64> = g.iter().map(|v| -v).collect();
        jac.factor()?.solve_in_place(&mut step);
        let g0 = l2(&g);
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + lambda * b).collect();
            let gt = sys.residual(&trial);
            let ok = gt.iter().all(|v| v.is_finite()) && l2(&gt) <= (1.0 - 1e-4 * lambda) * g0;
            if ok || lambda <= opts.min_damping {
                if !gt.iter().all(|v| v.is_finite()) {
                    return Err(Error::NewtonNonConvergence {
                        residual: inf_norm(&g),
                        iterations,
                        damping,
                    });
                }
                // Near round-off the Armijo test can fail on noise; accept the
                // full step if it does not make things worse in max norm.
                if !ok && inf_norm(&gt) > inf_norm(&g) {
                    damping.push(lambda);
                    return Err(Error::NewtonNonConvergence {
                        residual: inf_norm(&g),
                        iterations,
                        damping,
                    });
                }
                z = trial;
                g = gt;
                damping.push(lambda);
                break;
            }
            lambda *= 0.5;
        }
    }
    let (y, c) = sys.unpack(&z);
    Ok(NewtonOutcome {
        y,
        c,
        residual: inf_norm(&g),
        iterations,
        damping,
    })
}

/// Solves `D Y'' + c Y' + R(Y) = 0` for `(Y, c)` by damped Newton.
pub fn solve_front(
    model: &ReactionModel,
    grid: &SpatialGrid,
    guess: &GridField,
    c_guess: f64,
    phase: Phase,
    opts: &FrontOptions,
) -> Result<FrontProfile> {
    if guess.components != model.n || guess.nodes() != grid.nodes {
        return Err(Error::DimensionMismatch {
            expected: grid.nodes * model.n,
            got: guess.values.len(),
        });
    }
    if !(opts.tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    let end_minus = model.end_minus.clone();
    let end_plus = model.end_plus.clone();
    if end_minus == end_plus {
        return degenerate_front(model, grid, c_guess, phase);
    }
    let out = newton(model, *grid, &end_minus, &end_plus, guess, c_guess, phase, opts)?;
    let c_extrapolated = if opts.richardson { extrapolate_speed(model, grid, &out, phase, opts) } else { None };
    let mut p = finish_profile(
        grid,
        out.y,
        out.c,
        c_extrapolated,
        end_minus,
        end_plus,
        0.0,
        phase,
        out.residual,
        out.iterations,
        out.damping,
    );
    p.transport = opts.transport;
    Ok(p)
}

/// Speed extrapolated to `h → 0` from coarsened copies of the solution:
/// `(32 c_h - 12 c_2h + c_4h) / 21` cancels the `h²` and `h³` terms, and
/// `(4 c_h - c_2h) / 3` is used when only one coarsening is possible.
fn extrapolate_speed(model: &ReactionModel, grid: &SpatialGrid, fine: &NewtonOutcome, phase: Phase, opts: &FrontOptions) -> Option<f64> {
    let mut copts = opts.clone();
    copts.richardson = false;
    let mut speeds = vec![fine.c];
    let mut y = fine.y.clone();
    let mut g = *grid;
    while speeds.len() < 3 && g.nodes >= 9 && (g.nodes - 1) % 2 == 0 {
        let coarse = SpatialGrid::new(g.half_width, (g.nodes + 1) / 2).ok()?;
        let mut guess = GridField::zeros(coarse.nodes, model.n);
        for i in 0..coarse.nodes {
            for j in 0..model.n {
                guess.set(i, j, y.get(2 * i, j));
            }
        }
        let Ok(out) = newton(model, coarse, &model.end_minus, &model.end_plus, &guess, fine.c, phase, &copts) else {
            break;
        };
        speeds.push(out.c);
        y = out.y;
        g = coarse;
    }
    match speeds[..] {
        [c1, c2, c4] => Some((32.0 * c1 - 12.0 * c2 + c4) / 21.0),
        [c1, c2] => Some((4.0 * c1 - c2) / 3.0),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_profile(
    grid: &SpatialGrid,
    y0: GridField,
    c: f64,
    c_extrapolated: Option<f64>,
    end_minus: Vec<f64>,
    end_plus: Vec<f64>,
    shift: f64,
    phase: Phase,
    residual: f64,
    newton_iterations: usize,
    damping_history: Vec<f64>,
) -> FrontProfile {
    let y0prime = derivative(&y0, grid.h, &end_minus, &end_plus);
    let decay = fit_tails(grid, &y0, &end_minus, &end_plus);
    FrontProfile {
        grid: *grid,
        y0,
        c,
        c_extrapolated,
        end_minus,
        end_plus,
        omega_minus: decay.omega_minus,
        omega_plus: decay.omega_plus,
        decay,
        y0prime,
        shift,
        phase,
        residual,
        degenerate: false,
        newton_iterations,
        damping_history,
        transport: TransportScheme::default(),
    }
}

fn degenerate_front(model: &ReactionModel, grid: &SpatialGrid, c: f64, phase: Phase) -> Result<FrontProfile> {
    let y0 = GridField::from_fn(grid, model.n, |_, j| model.end_minus[j]);
    let residual = steady_residual(model, grid, &y0, c, &model.end_minus, &model.end_plus, TransportScheme::default()).max_abs();
    if !(residual <= 1e-12) {
        return Err(Error::NewtonNonConvergence {
            residual,
            iterations: 0,
            damping: Vec::new(),
        });
    }
    let mut p = finish_profile(
        grid,
        y0,
        c,
        None,
        model.end_minus.clone(),
        model.end_plus.clone(),
        0.0,
        phase,
        residual,
        0,
        Vec::new(),
    );
    p.degenerate = true;
    Ok(p)
}

/// Result of a natural-parameter sweep.
#[derive(Debug, Clone)]
pub struct Continuation {
    pub parameters: Vec<f64>,
    pub profiles: Vec<FrontProfile>,
    /// Why the sweep stopped early, if it did.
    pub stopped: Option<String>,
}

/// Continues `seed` along `family(p)` for each `p` in `parameters`,
/// warm-starting every solve from the previous profile.
pub fn continue_front(
    family: impl Fn(f64) -> Result<ReactionModel>,
    parameters: &[f64],
    seed: &FrontProfile,
    opts: &FrontOptions,
) -> Result<Continuation> {
    let mut profiles: Vec<FrontProfile> = Vec::with_capacity(parameters.len());
    let mut stopped = None;
    for (k, &p) in parameters.iter().enumerate() {
        let prev = profiles.last().unwrap_or(seed);
        let attempt = family(p).and_then(|model| {
            // End states move with the parameter; rescale the previous
            // profile onto the new ones componentwise.
            let mut guess = prev.y0.clone();
            for j in 0..model.n {
                let (a0, b0) = (prev.end_minus[j], prev.end_plus[j]);
                let (a1, b1) = (model.end_minus[j], model.end_plus[j]);
                for i in 0..guess.nodes() {
                    let v = prev.y0.get(i, j);
                    let s = if b0 != a0 { (v - a0) / (b0 - a0) } else { 0.0 };
                    guess.set(i, j, a1 + s * (b1 - a1) + if b0 == a0 { v - a0 } else { 0.0 });
                }
            }
            solve_front(&model, &prev.grid, &guess, prev.c, prev.phase, opts)
        });
        match attempt {
            Ok(profile) => profiles.push(profile),
            Err(e) if k == 0 => return Err(Error::ContinuationStart(Box::new(e))),
            Err(e) => {
                stopped = Some(format!("parameter {p}: {e}"));
                break;
            }
        }
    }
    Ok(Continuation {
        parameters: parameters[..profiles.len()].to_vec(),
        profiles,
        stopped,
    })
}

fn tail_distance(y: &GridField, i: usize, end: &[f64]) -> f64 {
    y.node(i).iter().zip(end).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

struct SideFit {
    omega: f64,
    prefactor: f64,
    undetermined: bool,
    non_monotone: bool,
}

/// Least-squares line through `(x, log d)` on the given nodes.
fn fit_side(grid: &SpatialGrid, d: &[f64], idx: &[usize]) -> SideFit {
    let pts: Vec<(f64, f64)> = idx
        .iter()
        .filter(|&&i| d[i] > NOISE_FLOOR)
        .map(|&i| (grid.x(i), d[i].ln()))
        .collect();
    if pts.len() < 3 {
        return SideFit {
            omega: f64::NAN,
            prefactor: f64::NAN,
            undetermined: true,
            non_monotone: false,
        };
    }
    let nf = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let diffs: Vec<f64> = pts.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let non_monotone = !(diffs.iter().all(|v| *v <= 0.0) || diffs.iter().all(|v| *v >= 0.0));
    SideFit {
        omega: -slope,
        prefactor: intercept.exp(),
        undetermined: slope.abs() < 1e-8 || !slope.is_finite(),
        non_monotone,
    }
}

fn fit_tails(grid: &SpatialGrid, y: &GridField, end_minus: &[f64], end_plus: &[f64]) -> DecayFit {
    let nodes = grid.nodes;
    let c = grid.center();
    let dm: Vec<f64> = (0..nodes).map(|i| tail_distance(y, i, end_minus)).collect();
    let dp: Vec<f64> = (0..nodes).map(|i| tail_distance(y, i, end_plus)).collect();
    let skip = 5.min(c / 4);
    // Outer quarter of each half, or of the part of it above the noise floor.
    let left_end = (0..c).find(|&i| dm[i] > NOISE_FLOOR).unwrap_or(c).max(skip);
    let left_len = c - left_end;
    let left: Vec<usize> = (left_end..left_end + (left_len / 4).max(3).min(left_len)).collect();
    let right_end = (c..nodes).rev().find(|&i| dp[i] > NOISE_FLOOR).unwrap_or(c).min(nodes - 1 - skip);
    let right_len = right_end.saturating_sub(c);
    let right: Vec<usize> = (right_end + 1 - (right_len / 4).max(3).min(right_len + 1)..=right_end).collect();
    let l = fit_side(grid, &dm, &left);
    let r = fit_side(grid, &dp, &right);
    DecayFit {
        omega_minus: l.omega,
        omega_plus: r.omega,
        c_minus: l.prefactor,
        c_plus: r.prefactor,
        minus_undetermined: l.undetermined,
        plus_undetermined: r.undetermined,
        minus_non_monotone: l.non_monotone,
        plus_non_monotone: r.non_monotone,
    }
}

/// Log-linear tail fits `|Y₀ - Y_±| ≈ C_± e^{-ω_± x}` on the outer quarters.
pub fn fit_decay_rates(profile: &FrontProfile) -> DecayFit {
    fit_tails(&profile.grid, &profile.y0, &profile.end_minus, &profile.end_plus)
}

impl FrontProfile {
    /// `|D Y₀'' + c Y₀' + R(Y₀)|_∞` on the grid.
    pub fn steady_residual(&self, model: &ReactionModel) -> f64 {
        steady_residual(model, &self.grid, &self.y0, self.c, &self.end_minus, &self.end_plus, self.transport).max_abs()
    }

    /// JSON header line followed by CSV samples.
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            c: f64,
            c_extrapolated: Option<f64>,
            end_minus: &'a [f64],
            end_plus: &'a [f64],
            omega_minus: f64,
            omega_plus: f64,
            decay: &'a DecayFit,
            grid: &'a SpatialGrid,
            shift: f64,
            phase: &'a Phase,
            residual: f64,
            degenerate: bool,
            transport: TransportScheme,
        }
        let header = Header {
            c: self.c,
            c_extrapolated: self.c_extrapolated,
            end_minus: &self.end_minus,
            end_plus: &self.end_plus,
            omega_minus: self.omega_minus,
            omega_plus: self.omega_plus,
            decay: &self.decay,
            grid: &self.grid,
            shift: self.shift,
            phase: &self.phase,
            residual: self.residual,
            degenerate: self.degenerate,
            transport: self.transport,
        };
        let mut s = serde_json::to_string(&header).expect("header serializes");
        s.push('\n');
        s.push_str(&self.y0.to_csv(&self.grid));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            c: f64,
            c_extrapolated: Option<f64>,
            end_minus: Vec<f64>,
            end_plus: Vec<f64>,
            omega_minus: f64,
            omega_plus: f64,
            decay: DecayFit,
            grid: SpatialGrid,
            shift: f64,
            phase: Phase,
            residual: f64,
            degenerate: bool,
            #[serde(default)]
            transport: TransportScheme,
        }
        let (head, body) = text.split_once('\n').ok_or_else(|| Error::Parse("missing header line".into()))?;
        let h: Header = serde_json::from_str(head).map_err(|e| Error::Parse(format!("front header: {e}")))?;
        let y0 = GridField::from_csv(body)?;
        if y0.nodes() != h.grid.nodes {
            return Err(Error::DimensionMismatch {
                expected: h.grid.nodes,
                got: y0.nodes(),
            });
        }
        let y0prime = derivative(&y0, h.grid.h, &h.end_minus, &h.end_plus);
        Ok(Self {
            grid: h.grid,
            y0,
            c: h.c,
            c_extrapolated: h.c_extrapolated,
            end_minus: h.end_minus,
            end_plus: h.end_plus,
            omega_minus: h.omega_minus,
            omega_plus: h.omega_plus,
            decay: h.decay,
            y0prime,
            shift: h.shift,
            phase: h.phase,
            residual: h.residual,
            degenerate: h.degenerate,
            newton_iterations: 0,
            damping_history: Vec::new(),
            transport: h.transport,
        })
    }
}

/// The translate `Y_q(x) = Y₀(x - q)`.
///
/// The cubic interpolant is polished by Newton with the phase moved to
/// `x = q`, so the result is again an exact steady state of the discrete
/// problem and the family `q ↦ Y_q` is exactly translation-covariant on the
/// grid up to the solver tolerance.
pub fn shift_front(model: &ReactionModel, profile: &FrontProfile, q: f64, opts: &FrontOptions) -> Result<FrontProfile> {
    let g = profile.grid;
    if q.abs() > g.half_width / 10.0 {
        return Err(Error::param("q", format!("|q| = {} exceeds X/10 = {}", q.abs(), g.half_width / 10.0)));
    }
    if q == 0.0 {
        return Ok(profile.clone());
    }
    let guess = interpolate_shift(&profile.y0, &g, &profile.end_minus, &profile.end_plus, q);
    if profile.degenerate {
        let mut p = profile.clone();
        p.shift += q;
        return Ok(p);
    }
    let phase = match profile.phase {
        Phase::PinComponent { index, value, at } => Phase::PinComponent {
            index,
            value: Some(value.unwrap_or(0.5 * (profile.end_minus[index] + profile.end_plus[index]))),
            at: at + q,
        },
        Phase::Orthogonality => Phase::Orthogonality,
    };
    let mut popts = opts.clone();
    popts.richardson = false;
    popts.transport = profile.transport;
    let out = newton(model, g, &profile.end_minus, &profile.end_plus, &guess, profile.c, phase, &popts)?;
    let mut p = finish_profile(
        &g,
        out.y,
        out.c,
        profile.c_extrapolated,
        profile.end_minus.clone(),
        profile.end_plus.clone(),
        profile.shift + q,
        phase,
        out.residual,
        out.iterations,
        out.damping,
    );
    p.omega_minus = profile.omega_minus;
    p.omega_plus = profile.omega_plus;
    p.decay = profile.decay;
    p.transport = profile.transport;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, custom_model, CustomSpec, ModelName, Params};
    use approx::assert_relative_eq;

    fn gasless(beta: f64) -> ReactionModel {
        let mut p = Params::new();
        p.insert("beta".into(), beta);
        builtin_model(ModelName::GaslessCombustion, &p).unwrap()
    }

    fn solve(model: &ReactionModel, x: f64, n: usize) -> FrontProfile {
        let g = SpatialGrid::new(x, n).unwrap();
        let guess = model_guess(model, &g, 0.5);
        solve_front(model, &g, &guess, 0.5, Phase::default(), &FrontOptions::default()).unwrap()
    }

    #[test]
    fn guess_properties() {
        let g = SpatialGrid::new(10.0, 101).unwrap();
        let y = initial_guess(&[1.0, 2.0], &[1.0, 2.0], &g, 1.0).unwrap();
        assert!(y.values.chunks(2).all(|v| v == [1.0, 2.0]));
        let y = initial_guess(&[0.0, 4.0], &[-2.0, 1.0], &g, 0.8).unwrap();
        assert_eq!(y.node(g.center()), &[-1.0, 2.5]);
        let tol = (-2.0f64 * 0.8 * 10.0).exp() * 4.0;
        assert!((y.get(0, 0) - 0.0).abs() <= tol && (y.get(100, 1) - 1.0).abs() <= tol);
    }

    #[test]
    fn gasless_front_converges() {
        let m = gasless(0.5);
        let p = solve(&m, 40.0, 801);
        assert!(p.residual < 1e-10);
        assert!(p.steady_residual(&m) < 1e-10);
        assert!(p.c > 0.7 && p.c < 0.75, "c = {}", p.c);
        assert!(!p.degenerate);
        assert!(p.omega_minus < 0.0 && p.omega_plus > 0.0);
        let ext = p.c_extrapolated.unwrap();
        assert!((ext - p.c).abs() < 1e-3);
    }

    #[test]
    fn orthogonality_phase_gives_same_speed() {
        let m = gasless(0.5);
        let p = solve(&m, 40.0, 401);
        let g = p.grid;
        let guess = interpolate_shift(&p.y0, &g, &p.end_minus, &p.end_plus, 0.7);
        let o = solve_front(
            &m,
            &g,
            &guess,
            0.6,
            Phase::Orthogonality,
            &FrontOptions {
                richardson: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((o.c - p.c).abs() < 1e-8);
    }

    #[test]
    fn constant_profile_is_degenerate() {
        let spec = CustomSpec {
            n1: 1,
            n2: 1,
            diffusion: vec![1.0, 1.0],
            a1: vec![0.0],
            end_plus: vec![0.0, 0.0],
            reaction: Box::new(|_, out| out.fill(0.0)),
            jacobian: Box::new(|_, out| out.fill(0.0)),
        };
        let m = custom_model(spec).unwrap();
        let g = SpatialGrid::new(5.0, 21).unwrap();
        let guess = model_guess(&m, &g, 1.0);
        let p = solve_front(&m, &g, &guess, 0.3, Phase::default(), &FrontOptions::default()).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.y0prime.max_abs(), 0.0);
    }

    #[test]
    fn flat_pin_component_is_degenerate() {
        let spec = CustomSpec {
            n1: 1,
            n2: 1,
            diffusion: vec![1.0, 1.0],
            a1: vec![0.0],
            end_plus: vec![1.0, 0.0],
            reaction: Box::new(|_, out| out.fill(0.0)),
            jacobian: Box::new(|_, out| out.fill(0.0)),
        };
        let m = custom_model(spec).unwrap();
        let g = SpatialGrid::new(5.0, 21).unwrap();
        let guess = model_guess(&m, &g, 1.0);
        let phase = Phase::PinComponent {
            index: 1,
            value: None,
            at: 0.0,
        };
        match solve_front(&m, &g, &guess, 0.3, phase, &FrontOptions::default()) {
            Err(Error::PhaseDegenerate(_)) => {}
            other => panic!("expected phase degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn newton_failure_reports_history() {
        let m = gasless(0.5);
        let g = SpatialGrid::new(20.0, 201).unwrap();
        let guess = model_guess(&m, &g, 0.5);
        let opts = FrontOptions {
            max_iterations: 1,
            ..Default::default()
        };
        match solve_front(&m, &g, &guess, 0.1, Phase::default(), &opts) {
            Err(Error::NewtonNonConvergence { iterations, damping, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(damping.len(), 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    fn synthetic(g: &SpatialGrid, f: impl Fn(f64) -> f64) -> FrontProfile {
        let y0 = GridField::from_fn(g, 1, |x, _| if x > 0.0 { f(x) } else { 1.0 - f(-x) });
        finish_profile(g, y0, 1.0, None, vec![1.0], vec![0.0], 0.0, Phase::default(), 0.0, 0, Vec::new())
    }

    #[test]
    fn exact_exponential_tail() {
        let g = SpatialGrid::new(12.0, 481).unwrap();
        let p = synthetic(&g, |x| (-2.0 * x).exp());
        let fit = fit_decay_rates(&p);
        assert_relative_eq!(fit.omega_plus, 2.0, epsilon = 1e-6);
        assert_relative_eq!(fit.c_plus, 1.0, epsilon = 1e-6);
        assert_relative_eq!(fit.omega_minus, -2.0, epsilon = 1e-6);
    }

    #[test]
    fn two_rate_tail_fit_tracks_slow_rate() {
        let g = SpatialGrid::new(20.0, 801).unwrap();
        let f = |x: f64| (-x).exp() + (-3.0 * x).exp();
        let p = synthetic(&g, f);
        let fit = fit_decay_rates(&p);
        // Independent least-squares line through the same window.
        let xs: Vec<f64> = (0..g.nodes).map(|i| g.x(i)).filter(|&x| x >= 15.0 - 1e-9 && x <= 20.0 - 5.0 * g.h + 1e-9).collect();
        let n = xs.len() as f64;
        let ys: Vec<f64> = xs.iter().map(|&x| f(x).ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((fit.omega_plus + slope).abs() < 1e-3);
        assert!(fit.omega_plus > 1.0 && fit.omega_plus < 1.05);
    }

    #[test]
    fn constant_tail_is_undetermined() {
        let g = SpatialGrid::new(10.0, 201).unwrap();
        let p = synthetic(&g, |_| 0.0);
        assert!(fit_decay_rates(&p).plus_undetermined);
        let p = synthetic(&g, |_| 0.25);
        assert!(fit_decay_rates(&p).plus_undetermined);
    }

    #[test]
    fn cubic_shift_is_fourth_order() {
        let f = |x: f64| 0.5 * (1.0 - (0.8 * x).tanh());
        let mut errs = Vec::new();
        for n in [201, 401, 801, 1601] {
            let g = SpatialGrid::new(20.0, n).unwrap();
            let y = GridField::from_fn(&g, 1, |x, _| f(x));
            let fwd = interpolate_shift(&y, &g, &[1.0], &[0.0], 0.37);
            let back = interpolate_shift(&fwd, &g, &[1.0], &[0.0], -0.37);
            errs.push(back.sub(&y).max_abs());
        }
        // The cell fraction of the shift changes with h, so compare the
        // overall slope rather than individual ratios.
        let slope = (errs[0] / errs[3]).log2() / 3.0;
        assert!(slope > 3.7, "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn shift_front_is_steady_and_invertible() {
        let m = gasless(0.5);
        let p = solve(&m, 40.0, 801);
        let opts = FrontOptions::default();
        assert_eq!(shift_front(&m, &p, 0.0, &opts).unwrap(), p);
        let s = shift_front(&m, &p, 0.3, &opts).unwrap();
        assert!(s.steady_residual(&m) < 1e-10);
        assert!((s.c - p.c).abs() < 1e-10);
        assert_eq!(s.omega_plus, p.omega_plus);
        let back = shift_front(&m, &s, -0.3, &opts).unwrap();
        assert!(back.y0.sub(&p.y0).max_abs() < 1e-8);
        assert!(shift_front(&m, &p, 4.5, &opts).is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = gasless(0.5);
        let p = solve(&m, 20.0, 201);
        let back = FrontProfile::from_text(&p.to_text()).unwrap();
        assert_eq!(back.c.to_bits(), p.c.to_bits());
        assert_eq!(back.end_plus, p.end_plus);
        assert_eq!(back.omega_plus.to_bits(), p.omega_plus.to_bits());
        assert!(back.y0.sub(&p.y0).max_abs() <= 1e-15);
    }

    #[test]
    fn continuation_prefix_semantics() {
        let m = gasless(0.5);
        let p = solve(&m, 30.0, 301);
        let opts = FrontOptions::default();
        let family = |b: f64| m.with_param("beta", b);
        let one = continue_front(family, &[0.5], &p, &opts).unwrap();
        assert_eq!(one.profiles.len(), 1);
        assert!((one.profiles[0].c - p.c).abs() < 1e-10);
        let bad = |b: f64| if b < 0.45 { Err(Error::param("beta", "out of family")) } else { m.with_param("beta", b) };
        let part = continue_front(bad, &[0.5, 0.48, 0.4, 0.3], &p, &opts).unwrap();
        assert_eq!(part.profiles.len(), 2);
        assert!(part.stopped.is_some());
        assert!(continue_front(bad, &[0.3], &p, &opts).is_err());
    }
}
