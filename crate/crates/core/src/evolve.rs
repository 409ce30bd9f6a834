//! Time stepping on the grid: Crank–Nicolson for the linear semigroups, the
//! nonlinearity `F_q`, IMEX integration of the perturbation equation and a
//! direct integrator for the full moving-frame equation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::front::FrontProfile;
use crate::grid::{random_bumps, GridField, Norms, SpatialGrid, TransportScheme, Weight};
use crate::linalg::{gauss_legendre_unit, BandedLu, BandedMatrix};
use crate::model::ReactionModel;
use crate::spectrum::{assemble_matrix, limit_operator, ProjectionPair, Side, WeightedOperator};

/// `y_{k+1} = (I - dt/2 L)⁻¹ ((I + dt/2 L) y_k + dt f_k)` with a single
/// factorization.
#[derive(Debug, Clone)]
pub struct CrankNicolson {
    implicit: BandedLu,
    explicit: BandedMatrix,
    pub dt: f64,
}

impl CrankNicolson {
    pub fn new(l: &BandedMatrix, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::param("dt", "must be positive"));
        }
        let implicit = l.scaled_plus_identity(-0.5 * dt, 1.0).factor()?;
        let explicit = l.scaled_plus_identity(0.5 * dt, 1.0);
        Ok(Self { implicit, explicit, dt })
    }

    pub fn dim(&self) -> usize {
        self.explicit.dim()
    }

    /// Advances `y` in place; `forcing` is the time-averaged source.
    pub fn step(&self, y: &mut [f64], forcing: Option<&[f64]>, scratch: &mut Vec<f64>) {
        scratch.resize(y.len(), 0.0);
        self.explicit.matvec(y, scratch);
        if let Some(f) = forcing {
            for (s, fi) in scratch.iter_mut().zip(f) {
                *s += self.dt * fi;
            }
        }
        self.implicit.solve_in_place(scratch);
        y.copy_from_slice(scratch);
    }

    /// Solution of `w' = L w + f(t)` with `f` sampled on the step grid and
    /// averaged by the trapezoid rule over each step.
    pub fn forced_sweep(&self, w0: &[f64], forcing: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(forcing.len().max(1));
        let mut w = w0.to_vec();
        let mut scratch = Vec::new();
        let mut avg = vec![0.0; w.len()];
        out.push(w.clone());
        for k in 1..forcing.len() {
            for ((a, f0), f1) in avg.iter_mut().zip(&forcing[k - 1]).zip(&forcing[k]) {
                *a = 0.5 * (f0 + f1);
            }
            self.step(&mut w, Some(&avg), &mut scratch);
            out.push(w.clone());
        }
        out
    }
}

/// Which integrator produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    CrankNicolson,
    ImexCn,
    FullImexCn,
}

/// Sampled states on a uniform time grid `t_k = k · dt · stride`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridField>,
    pub q: f64,
    pub dt: f64,
    pub weight: Weight,
    pub scheme: Scheme,
}

/// One row of the trajectory norm table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormRow {
    pub t: f64,
    pub zero: f64,
    pub alpha: f64,
    pub v_zero: f64,
}

impl Trajectory {
    pub fn last(&self) -> &GridField {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn norm_rows(&self, norms: &Norms, n1: usize) -> Vec<NormRow> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(&t, y)| NormRow {
                t,
                zero: norms.zero(y),
                alpha: norms.alpha(y),
                v_zero: norms.tail_zero(y, n1),
            })
            .collect()
    }

    /// CSV with columns `t, |y|_0, |y|_alpha, |v|_0`.
    pub fn to_csv(&self, norms: &Norms, n1: usize) -> String {
        rows_to_csv(&self.norm_rows(norms, n1))
    }
}

pub fn rows_to_csv(rows: &[NormRow]) -> String {
    let mut s = String::from("t,norm_zero,norm_alpha,v_norm_zero\n");
    for r in rows {
        s.push_str(&format!("{:.6},{:.12e},{:.12e},{:.12e}\n", r.t, r.zero, r.alpha, r.v_zero));
    }
    s
}

fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be positive"));
    }
    if !(t_final >= dt) {
        return Err(Error::param("T", "must be at least dt"));
    }
    let steps = (t_final / dt).round() as usize;
    if ((steps as f64) * dt - t_final).abs() > 1e-9 * t_final {
        return Err(Error::param("T", "must be an integer multiple of dt"));
    }
    Ok(steps)
}

/// Crank–Nicolson flow of `y' = L y` for an arbitrary banded generator,
/// keeping every `stride`-th state.
pub fn propagate_matrix(l: &BandedMatrix, y0: &[f64], t_final: f64, dt: f64, stride: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if y0.len() != l.dim() {
        return Err(Error::DimensionMismatch {
            expected: l.dim(),
            got: y0.len(),
        });
    }
    let steps = step_count(t_final, dt)?;
    let stride = stride.max(1);
    let cn = CrankNicolson::new(l, dt)?;
    let mut y = y0.to_vec();
    let mut scratch = Vec::new();
    let mut times = vec![0.0];
    let mut states = vec![y.clone()];
    for k in 1..=steps {
        cn.step(&mut y, None, &mut scratch);
        if k % stride == 0 || k == steps {
            times.push(k as f64 * dt);
            states.push(y.clone());
        }
    }
    Ok((times, states))
}

/// `T_q(t) y₀` on `[0, T]` by Crank–Nicolson with the unweighted matrix.
pub fn propagate_linear(op: &WeightedOperator, y0: &GridField, t_final: f64, dt: f64) -> Result<Trajectory> {
    let (times, raw) = propagate_matrix(&op.l, &y0.values, t_final, dt, 1)?;
    let states = raw
        .into_iter()
        .map(|v| GridField::from_values(y0.components, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        times,
        states,
        q: op.q,
        dt,
        weight: op.weight,
        scheme: Scheme::CrankNicolson,
    })
}

/// Least-squares slope and intercept of `(t, log v)` for `t ≥ t_from`,
/// skipping non-positive values; also returns `R²`.
fn log_fit(times: &[f64], values: &[f64], t_from: f64) -> Option<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= t_from && **v > 0.0 && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let (mt, ml) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let (mut stt, mut stl, mut sll) = (0.0, 0.0, 0.0);
    for (t, l) in &pts {
        stt += (t - mt) * (t - mt);
        stl += (t - mt) * (l - ml);
        sll += (l - ml) * (l - ml);
    }
    if stt == 0.0 {
        return None;
    }
    let slope = stl / stt;
    let r2 = if sll > 0.0 { stl * stl / (stt * sll) } else { 1.0 };
    Some((slope, ml - slope * mt, r2))
}

/// Fitted exponential decay of a sampled norm history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub rate: f64,
    pub prefactor: f64,
    pub r_squared: f64,
}

/// Rate from the second half of `[0, T]`; the prefactor is the smallest `C`
/// with `v(t) ≤ C e^{-rate t} v(0)` on the whole window.
pub fn fit_decay(times: &[f64], values: &[f64]) -> Option<RateFit> {
    let t_end = *times.last()?;
    let (slope, _, r2) = log_fit(times, values, 0.5 * t_end)?;
    let rate = -slope;
    let v0 = values[0];
    let prefactor = times
        .iter()
        .zip(values)
        .map(|(t, v)| v * (rate * t).exp() / v0)
        .fold(0.0, f64::max);
    Some(RateFit {
        rate,
        prefactor,
        r_squared: r2,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SemigroupDecay {
    /// Slowest fitted rate over the samples.
    pub nu_hat: f64,
    /// Largest prefactor over the samples.
    pub c_hat: f64,
    pub rates: Vec<f64>,
    /// Largest relative rise of `e^{ν̂ t}|y(t)|_α` on the fit window.
    pub ripple: f64,
    pub poor_fit: bool,
}

/// Decay of `T_q(t) P_q^s` in `|·|_α` measured on random unit data.
pub fn semigroup_decay_rate(
    op: &WeightedOperator,
    pair: &ProjectionPair,
    norms: &Norms,
    t_final: f64,
    dt: f64,
    samples: usize,
    seed: u64,
) -> Result<SemigroupDecay> {
    let steps = step_count(t_final, dt)?;
    let cn = CrankNicolson::new(&op.l, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = Vec::with_capacity(samples);
    let mut c_hat = 0.0f64;
    let mut ripple = 0.0f64;
    let mut poor_fit = false;
    let mut scratch = Vec::new();
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    for _ in 0..samples.max(1) {
        let raw = random_bumps(&op.grid, op.n, &mut rng, 10.0, 4);
        let y0 = pair.stable(&raw);
        let y0 = y0.scaled(1.0 / norms.alpha(&y0));
        let mut y = y0.values.clone();
        let mut hist = Vec::with_capacity(steps + 1);
        let mut field = y0.clone();
        hist.push(1.0);
        for _ in 0..steps {
            cn.step(&mut y, None, &mut scratch);
            field.values.copy_from_slice(&y);
            hist.push(norms.alpha(&field));
        }
        match fit_decay(&times, &hist) {
            Some(fit) => {
                if fit.r_squared < 0.98 {
                    poor_fit = true;
                }
                rates.push(fit.rate);
                c_hat = c_hat.max(fit.prefactor);
                let mut running_min = f64::INFINITY;
                for (t, v) in times.iter().zip(&hist) {
                    if *t < 0.5 * t_final {
                        continue;
                    }
                    let g = v * (fit.rate * t).exp();
                    running_min = running_min.min(g);
                    ripple = ripple.max(g / running_min - 1.0);
                }
            }
            None => {
                poor_fit = true;
                rates.push(f64::NAN);
            }
        }
    }
    let nu_hat = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SemigroupDecay {
        nu_hat,
        c_hat,
        rates,
        ripple,
        poor_fit,
    })
}

/// `sup_t |T_q(t) y|_β / |y|_β` over random unprojected data.
pub fn semigroup_bound(op: &WeightedOperator, norms: &Norms, t_final: f64, dt: f64, samples: usize, seed: u64) -> Result<f64> {
    let steps = step_count(t_final, dt)?;
    let cn = CrankNicolson::new(&op.l, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut scratch = Vec::new();
    for _ in 0..samples.max(1) {
        let y0 = random_bumps(&op.grid, op.n, &mut rng, 10.0, 4);
        let b0 = norms.beta(&y0);
        let mut field = y0.clone();
        let mut y = y0.values.clone();
        for _ in 0..steps {
            cn.step(&mut y, None, &mut scratch);
            field.values.copy_from_slice(&y);
            worst = worst.max(norms.beta(&field) / b0);
        }
    }
    Ok(worst)
}

/// Measured constants of the limit semigroups at the left end state.
#[derive(Debug, Clone, Serialize)]
pub struct LimitSemigroupReport {
    /// `sup_t |S₁(t) u|₀ / |u|₀`.
    pub s1_bound: f64,
    /// Fitted decay rate `ρ̂` of `S₂` in `|·|₀`.
    pub s2_rate: f64,
    pub s2_prefactor: f64,
    /// `sup_t |S(t) y|₀ / |y|₀`.
    pub s_bound: f64,
    /// Relative mismatch between the `(1,2)` block of `S(t)` and the
    /// quadrature of `∫ S₁(t-s) ∂_V R₁(0,0) S₂(s) ds`.
    pub convolution_error: f64,
    pub convolution_time: f64,
    pub pass: bool,
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn limit_semigroup_check(
    model: &ReactionModel,
    profile: &FrontProfile,
    weight: &Weight,
    t_final: f64,
    dt: f64,
    samples: usize,
    seed: u64,
) -> Result<LimitSemigroupReport> {
    let lim = limit_operator(model, profile, Side::Minus, weight)?;
    let (n1, n2, n) = (model.n1, model.n2, model.n);
    let grid = profile.grid;
    let steps = step_count(t_final, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = Vec::new();
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();

    let mut s1_bound = 0.0f64;
    if let (Some(l1), true) = (&lim.l1, n1 > 0) {
        let cn = CrankNicolson::new(l1, dt)?;
        for _ in 0..samples.max(1) {
            let mut u = random_bumps(&grid, n1, &mut rng, 10.0, 4).values;
            let u0 = sup_abs(&u);
            for _ in 0..steps {
                cn.step(&mut u, None, &mut scratch);
                s1_bound = s1_bound.max(sup_abs(&u) / u0);
            }
        }
    }

    let mut s2_rate = f64::INFINITY;
    let mut s2_prefactor = 0.0f64;
    if let (Some(l2), true) = (&lim.l2, n2 > 0) {
        let cn = CrankNicolson::new(l2, dt)?;
        for _ in 0..samples.max(1) {
            let mut v = random_bumps(&grid, n2, &mut rng, 10.0, 4).values;
            let mut hist = vec![sup_abs(&v)];
            for _ in 0..steps {
                cn.step(&mut v, None, &mut scratch);
                hist.push(sup_abs(&v));
            }
            if let Some(fit) = fit_decay(&times, &hist) {
                s2_rate = s2_rate.min(fit.rate);
                s2_prefactor = s2_prefactor.max(fit.prefactor);
            } else {
                s2_rate = f64::NAN;
            }
        }
    }

    let full = CrankNicolson::new(&lim.op.l, dt)?;
    let mut s_bound = 0.0f64;
    for _ in 0..samples.max(1) {
        let mut y = random_bumps(&grid, n, &mut rng, 10.0, 4).values;
        let y0 = sup_abs(&y);
        for _ in 0..steps {
            full.step(&mut y, None, &mut scratch);
            s_bound = s_bound.max(sup_abs(&y) / y0);
        }
    }

    let (convolution_error, convolution_time) = match (&lim.l1, &lim.l2) {
        (Some(l1), Some(l2)) if n1 > 0 && n2 > 0 => {
            let tc = (2.0f64).min(t_final);
            let k = (tc / dt).round() as usize;
            let v0 = random_bumps(&grid, n2, &mut rng, 10.0, 4).values;
            convolution_check(&lim.op.l, l1, l2, &lim.coupling, n1, n2, grid.nodes, &v0, k, dt)?
        }
        _ => (0.0, 0.0),
    };

    let pass = s1_bound <= 1.01 && s2_rate > 0.0 && s_bound.is_finite() && convolution_error < 1e-2;
    Ok(LimitSemigroupReport {
        s1_bound,
        s2_rate,
        s2_prefactor,
        s_bound,
        convolution_error,
        convolution_time,
        pass,
    })
}

#[allow(clippy::too_many_arguments)]
fn convolution_check(
    l: &BandedMatrix,
    l1: &BandedMatrix,
    l2: &BandedMatrix,
    coupling: &[f64],
    n1: usize,
    n2: usize,
    nodes: usize,
    v0: &[f64],
    steps: usize,
    dt: f64,
) -> Result<(f64, f64)> {
    let n = n1 + n2;
    let cn1 = CrankNicolson::new(l1, dt)?;
    let cn2 = CrankNicolson::new(l2, dt)?;
    let cn = CrankNicolson::new(l, dt)?;
    let mut scratch = Vec::new();

    let mut v = v0.to_vec();
    let mut coupled = Vec::with_capacity(steps + 1);
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; nodes * n1];
        for i in 0..nodes {
            for a in 0..n1 {
                out[i * n1 + a] = (0..n2).map(|b| coupling[a * n2 + b] * v[i * n2 + b]).sum();
            }
        }
        out
    };
    coupled.push(apply(&v));
    for _ in 0..steps {
        cn2.step(&mut v, None, &mut scratch);
        coupled.push(apply(&v));
    }
    let mut q = vec![0.0; nodes * n1];
    for (k, c) in coupled.iter().enumerate() {
        let mut w = c.clone();
        for _ in k..steps {
            cn1.step(&mut w, None, &mut scratch);
        }
        let wt = if k == 0 || k == steps { 0.5 * dt } else { dt };
        for (qi, wi) in q.iter_mut().zip(&w) {
            *qi += wt * wi;
        }
    }

    let mut y = vec![0.0; nodes * n];
    for i in 0..nodes {
        for b in 0..n2 {
            y[i * n + n1 + b] = v0[i * n2 + b];
        }
    }
    for _ in 0..steps {
        cn.step(&mut y, None, &mut scratch);
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..nodes {
        for a in 0..n1 {
            diff = diff.max((y[i * n + a] - q[i * n1 + a]).abs());
            scale = scale.max(q[i * n1 + a].abs());
        }
    }
    Ok((if scale > 0.0 { diff / scale } else { diff }, steps as f64 * dt))
}

/// How `F_q` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FqPath {
    /// `R(Y_q + y) - R(Y_q) - ∂R(Y_q) y`.
    #[default]
    ClosedForm,
    /// `∫₀¹ (∂R(Y_q + t y) - ∂R(Y_q)) y dt` by 16-point Gauss–Legendre.
    Quadrature,
}

/// `F_q` with `R(Y_q)` and `∂R(Y_q)` cached per node.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    model: ReactionModel,
    yq: GridField,
    rq: Vec<f64>,
    jq: Vec<f64>,
    pub q: f64,
}

impl Nonlinearity {
    pub fn new(model: &ReactionModel, profile: &FrontProfile) -> Self {
        let n = model.n;
        let nodes = profile.grid.nodes;
        let mut rq = vec![0.0; nodes * n];
        let mut jq = vec![0.0; nodes * n * n];
        for i in 0..nodes {
            model.eval_into(profile.y0.node(i), &mut rq[i * n..(i + 1) * n]);
            model.jacobian_into(profile.y0.node(i), &mut jq[i * n * n..(i + 1) * n * n]);
        }
        Self {
            model: model.clone(),
            yq: profile.y0.clone(),
            rq,
            jq,
            q: profile.shift,
        }
    }

    pub fn components(&self) -> usize {
        self.model.n
    }

    /// Closed-form `F_q` on a raw node-major vector.
    pub fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        let n = self.model.n;
        let mut state = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..self.yq.nodes() {
            let yi = &y[i * n..(i + 1) * n];
            for (s, (a, b)) in state.iter_mut().zip(self.yq.node(i).iter().zip(yi)) {
                *s = a + b;
            }
            self.model.eval_into(&state, &mut r);
            let j = &self.jq[i * n * n..(i + 1) * n * n];
            for a in 0..n {
                let lin: f64 = (0..n).map(|b| j[a * n + b] * yi[b]).sum();
                out[i * n + a] = r[a] - self.rq[i * n + a] - lin;
            }
        }
    }

    pub fn eval(&self, y: &GridField, path: FqPath) -> GridField {
        let n = self.model.n;
        let mut out = GridField::zeros(self.yq.nodes(), n);
        match path {
            FqPath::ClosedForm => self.eval_into(&y.values, &mut out.values),
            FqPath::Quadrature => {
                let (nodes, weights) = gauss_legendre_unit(16);
                let mut state = vec![0.0; n];
                let mut jt = vec![0.0; n * n];
                for i in 0..self.yq.nodes() {
                    let yi = y.node(i);
                    let j0 = &self.jq[i * n * n..(i + 1) * n * n];
                    for (t, w) in nodes.iter().zip(&weights) {
                        for (s, (a, b)) in state.iter_mut().zip(self.yq.node(i).iter().zip(yi)) {
                            *s = a + t * b;
                        }
                        self.model.jacobian_into(&state, &mut jt);
                        for a in 0..n {
                            let v: f64 = (0..n).map(|b| (jt[a * n + b] - j0[a * n + b]) * yi[b]).sum();
                            out.values[i * n + a] += w * v;
                        }
                    }
                }
            }
        }
        out
    }
}

/// `F_q(y)` for the profile's shift.
pub fn eval_fq(model: &ReactionModel, profile: &FrontProfile, y: &GridField, path: FqPath) -> GridField {
    Nonlinearity::new(model, profile).eval(y, path)
}

/// Maxima of the four ratios
/// `|F(y)|₀ / (|y|₀(|y|_α + |v|₀))`, `|F(y)|_α / (|y|₀|y|_α)`,
/// `|F(y)-F(ȳ)|₀ / (|y-ȳ|₀(|y|_α+|ȳ|_α) + |y-ȳ|₀|v|₀ + |ȳ|₀|v-v̄|₀)` and
/// `|F(y)-F(ȳ)|_α / (|y-ȳ|_α(|y|₀+|ȳ|₀))` over random pairs in the `δ`-ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonlinearityRatios {
    pub delta: f64,
    pub max: [f64; 4],
}

pub fn check_nonlinearity_estimates(
    nl: &Nonlinearity,
    norms: &Norms,
    n1: usize,
    delta: f64,
    samples: usize,
    seed: u64,
) -> NonlinearityRatios {
    let n = nl.components();
    let grid = norms.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = [0.0f64; 4];
    let path = FqPath::ClosedForm;
    for _ in 0..samples.max(1) {
        let draw = |rng: &mut ChaCha8Rng| {
            let y = random_bumps(&grid, n, rng, 15.0, 4);
            let s: f64 = rand::Rng::gen_range(rng, 0.25..1.0);
            y.scaled(delta * s / norms.beta(&y))
        };
        let y = draw(&mut rng);
        let yb = draw(&mut rng);
        let (fy, fb) = (nl.eval(&y, path), nl.eval(&yb, path));
        let (y0, ya, v0) = (norms.zero(&y), norms.alpha(&y), norms.tail_zero(&y, n1));
        let (b0, ba) = (norms.zero(&yb), norms.alpha(&yb));
        let d = y.sub(&yb);
        let (d0, da, dv) = (norms.zero(&d), norms.alpha(&d), norms.tail_zero(&d, n1));
        let df = fy.sub(&fb);
        let r = [
            norms.zero(&fy) / (y0 * (ya + v0)),
            norms.alpha(&fy) / (y0 * ya),
            norms.zero(&df) / (d0 * (ya + ba) + d0 * v0 + b0 * dv),
            norms.alpha(&df) / (da * (y0 + b0)),
        ];
        for (m, v) in max.iter_mut().zip(r) {
            if v.is_finite() {
                *m = m.max(v);
            }
        }
    }
    NonlinearityRatios { delta, max }
}

#[derive(Debug, Clone, Serialize)]
pub struct NonlinearityLadder {
    pub rows: Vec<NonlinearityRatios>,
    /// `max/min - 1` of each ratio across the ladder.
    pub variation: [f64; 4],
    pub pass: bool,
}

/// The four ratio maxima on a `δ`-ladder, drawn from the same seed so the
/// samples at different `δ` are rescaled copies.
pub fn nonlinearity_ladder(nl: &Nonlinearity, norms: &Norms, n1: usize, deltas: &[f64], samples: usize, seed: u64) -> NonlinearityLadder {
    let rows: Vec<NonlinearityRatios> = deltas
        .iter()
        .map(|&d| check_nonlinearity_estimates(nl, norms, n1, d, samples, seed))
        .collect();
    let mut variation = [0.0; 4];
    for (k, v) in variation.iter_mut().enumerate() {
        let hi = rows.iter().map(|r| r.max[k]).fold(f64::MIN, f64::max);
        let lo = rows.iter().map(|r| r.max[k]).fold(f64::MAX, f64::min);
        *v = hi / lo - 1.0;
    }
    let finite = rows.iter().all(|r| r.max.iter().all(|m| m.is_finite() && *m > 0.0));
    let pass = finite && variation.iter().all(|v| *v < 0.5);
    NonlinearityLadder { rows, variation, pass }
}

/// Log-log slope of `|F_q(ε y)|₀` against `ε`.
pub fn quadratic_scaling_slope(nl: &Nonlinearity, norms: &Norms, y: &GridField, eps: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .map(|&e| (e.ln(), norms.zero(&nl.eval(&y.scaled(e), FqPath::ClosedForm)).ln()))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// IMEX integration of `y' = L_q y + F_q(y)`: Crank–Nicolson for `L_q`,
/// Heun for `F_q`.
pub fn evolve_semilinear(
    op: &WeightedOperator,
    nl: &Nonlinearity,
    y0: &GridField,
    t_final: f64,
    dt: f64,
    stride: usize,
) -> Result<Trajectory> {
    if y0.values.len() != op.l.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.l.dim(),
            got: y0.values.len(),
        });
    }
    let steps = step_count(t_final, dt)?;
    let stride = stride.max(1);
    let cn = CrankNicolson::new(&op.l, dt)?;
    let norms = Norms::new(&op.grid, &op.weight, crate::grid::NormKind::Sup);
    let bound = 10.0 * norms.beta(y0);
    let m = y0.values.len();
    let mut y = y0.values.clone();
    let mut pred = vec![0.0; m];
    let mut f0 = vec![0.0; m];
    let mut f1 = vec![0.0; m];
    let mut scratch = Vec::new();
    let mut times = vec![0.0];
    let mut states = vec![y0.clone()];
    for k in 1..=steps {
        nl.eval_into(&y, &mut f0);
        pred.copy_from_slice(&y);
        cn.step(&mut pred, Some(&f0), &mut scratch);
        nl.eval_into(&pred, &mut f1);
        for (a, b) in f1.iter_mut().zip(&f0) {
            *a = 0.5 * (*a + b);
        }
        cn.step(&mut y, Some(&f1), &mut scratch);
        let size = sup_abs(&y);
        if !(size <= bound) && !(size == 0.0 && bound == 0.0) {
            return Err(Error::BlowUp {
                time: k as f64 * dt,
                norm: size,
                bound,
            });
        }
        if k % stride == 0 || k == steps {
            times.push(k as f64 * dt);
            states.push(GridField::from_values(y0.components, y.clone())?);
        }
    }
    Ok(Trajectory {
        times,
        states,
        q: op.q,
        dt,
        weight: op.weight,
        scheme: Scheme::ImexCn,
    })
}

/// Largest `|·|_β` gap between a stride-1 trajectory and the discrete
/// variation-of-constants formula driven by `F_q` along it.
pub fn duhamel_residual(op: &WeightedOperator, nl: &Nonlinearity, traj: &Trajectory, norms: &Norms) -> Result<f64> {
    let cn = CrankNicolson::new(&op.l, traj.dt)?;
    let m = op.l.dim();
    let forcing: Vec<Vec<f64>> = traj
        .states
        .iter()
        .map(|y| {
            let mut f = vec![0.0; m];
            nl.eval_into(&y.values, &mut f);
            f
        })
        .collect();
    let w = cn.forced_sweep(&traj.states[0].values, &forcing);
    let n = nl.components();
    let mut worst = 0.0f64;
    for (wk, yk) in w.into_iter().zip(&traj.states) {
        let d = GridField::from_values(n, wk)?.sub(yk);
        worst = worst.max(norms.beta(&d));
    }
    Ok(worst)
}

/// `D Y_xx + c Y_x` on the grid plus the constant contribution of the
/// end-state ghosts.
fn full_linear_part(model: &ReactionModel, grid: &SpatialGrid, c: f64, scheme: TransportScheme, end_minus: &[f64], end_plus: &[f64]) -> Result<(BandedMatrix, Vec<f64>)> {
    let n = model.n;
    let zero = vec![0.0; n * n];
    let a = assemble_matrix(grid, n, &model.diffusion, c, scheme, |_| zero.clone())?;
    let h = grid.h;
    let nodes = grid.nodes;
    let mut ghost = vec![0.0; nodes * n];
    for i in 0..nodes {
        for j in 0..n {
            let d = model.diffusion[j];
            let w = scheme.weights(d, c, h);
            let mut s = 0.0;
            for k in -2..=2isize {
                let node = i as isize + k;
                let mut coef = c * w[(k + 2) as usize];
                if k.abs() == 1 {
                    coef += d / (h * h);
                }
                if node < 0 {
                    s += coef * end_minus[j];
                } else if node as usize >= nodes {
                    s += coef * end_plus[j];
                }
            }
            ghost[i * n + j] = s;
        }
    }
    Ok((a, ghost))
}

/// Direct IMEX integration of `Y_t = D Y_xx + c Y_x + R(Y)` for the full
/// state with end-state boundary values.
pub fn evolve_full(model: &ReactionModel, profile: &FrontProfile, state0: &GridField, t_final: f64, dt: f64, stride: usize) -> Result<Trajectory> {
    let grid = profile.grid;
    let n = model.n;
    if state0.components != n || state0.nodes() != grid.nodes {
        return Err(Error::DimensionMismatch {
            expected: grid.nodes * n,
            got: state0.values.len(),
        });
    }
    let steps = step_count(t_final, dt)?;
    let stride = stride.max(1);
    let (a, ghost) = full_linear_part(model, &grid, profile.c, profile.transport, &profile.end_minus, &profile.end_plus)?;
    let cn = CrankNicolson::new(&a, dt)?;
    let m = state0.values.len();
    let react = |y: &[f64], out: &mut [f64]| {
        for i in 0..grid.nodes {
            model.eval_into(&y[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        for (o, g) in out.iter_mut().zip(&ghost) {
            *o += g;
        }
    };
    let mut y = state0.values.clone();
    let mut pred = vec![0.0; m];
    let mut f0 = vec![0.0; m];
    let mut f1 = vec![0.0; m];
    let mut scratch = Vec::new();
    let mut times = vec![0.0];
    let mut states = vec![state0.clone()];
    for k in 1..=steps {
        react(&y, &mut f0);
        pred.copy_from_slice(&y);
        cn.step(&mut pred, Some(&f0), &mut scratch);
        react(&pred, &mut f1);
        for (a, b) in f1.iter_mut().zip(&f0) {
            *a = 0.5 * (*a + b);
        }
        cn.step(&mut y, Some(&f1), &mut scratch);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp {
                time: k as f64 * dt,
                norm: f64::INFINITY,
                bound: f64::MAX,
            });
        }
        if k % stride == 0 || k == steps {
            times.push(k as f64 * dt);
            states.push(GridField::from_values(n, y.clone())?);
        }
    }
    Ok(Trajectory {
        times,
        states,
        q: profile.shift,
        dt,
        weight: Weight::unit(),
        scheme: Scheme::FullImexCn,
    })
}

/// Rates with `0 < ω < ρ < ν`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateBundle {
    pub omega: f64,
    pub rho: f64,
    pub nu: f64,
}

impl RateBundle {
    pub fn new(omega: f64, rho: f64, nu: f64) -> Result<Self> {
        if !(0.0 < omega && omega < rho && rho < nu) {
            return Err(Error::param(
                "rates",
                format!("need 0 < omega < rho < nu, got omega = {omega}, rho = {rho}, nu = {nu}"),
            ));
        }
        Ok(Self { omega, rho, nu })
    }

    /// `ν = ν̂`, `ρ = min(ρ̂, 3ν̂/4)` and `ω = min(ρ̂, ν̂)/2`.
    pub fn from_measured(rho_hat: f64, nu_hat: f64) -> Result<Self> {
        if !(rho_hat > 0.0 && nu_hat > 0.0) {
            return Err(Error::param(
                "rates",
                format!("measured rates must be positive, got rho = {rho_hat}, nu = {nu_hat}"),
            ));
        }
        let rho = rho_hat.min(0.75 * nu_hat);
        let omega = 0.5 * rho_hat.min(nu_hat);
        Self::new(omega.min(0.9 * rho), rho, nu_hat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::front::{model_guess, solve_front, FrontOptions, Phase};
    use crate::grid::{make_weight, NormKind};
    use crate::model::{builtin_model, ModelName, Params};
    use crate::spectrum::{adjoint_zero_mode, assemble_linearization};
    use approx::assert_relative_eq;

    fn setup(x: f64, nodes: usize) -> (ReactionModel, FrontProfile, Weight) {
        let mut p = Params::new();
        p.insert("beta".into(), 0.5);
        let m = builtin_model(ModelName::GaslessCombustion, &p).unwrap();
        let g = SpatialGrid::new(x, nodes).unwrap();
        let guess = model_guess(&m, &g, 0.5);
        let f = solve_front(&m, &g, &guess, 0.5, Phase::default(), &FrontOptions::default()).unwrap();
        let w = make_weight((-0.5 * f.omega_minus, 0.5 * f.omega_plus), 5.0).unwrap();
        (m, f, w)
    }

    fn scalar(lambda: f64) -> BandedMatrix {
        let mut a = BandedMatrix::zeros(1, 0, 0).unwrap();
        a.set(0, 0, lambda);
        a
    }

    #[test]
    fn scalar_mode_decays_like_exponential() {
        let (t, s) = propagate_matrix(&scalar(-1.0), &[1.0], 2.0, 0.01, 1).unwrap();
        for (ti, si) in t.iter().zip(&s) {
            assert!((si[0] - (-ti).exp()).abs() < 0.01f64.powi(2));
        }
    }

    #[test]
    fn crank_nicolson_is_second_order() {
        let err = |dt: f64| {
            let (_, s) = propagate_matrix(&scalar(-1.0), &[1.0], 1.0, dt, 1).unwrap();
            (s.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 0.8, "{ratio}");
    }

    #[test]
    fn forced_sweep_matches_closed_form() {
        // w' = -w + 1, w(0) = 0  =>  w = 1 - e^{-t}.
        let cn = CrankNicolson::new(&scalar(-1.0), 0.01).unwrap();
        let forcing = vec![vec![1.0]; 101];
        let w = cn.forced_sweep(&[0.0], &forcing);
        assert!((w[100][0] - (1.0 - (-1.0f64).exp())).abs() < 1e-5);
    }

    #[test]
    fn step_count_validation() {
        assert!(step_count(1.0, 0.0).is_err());
        assert!(step_count(0.001, 0.01).is_err());
        assert!(step_count(1.005, 0.01).is_err());
        assert_eq!(step_count(1.0, 0.01).unwrap(), 100);
    }

    #[test]
    fn rate_bundle_policy() {
        let r = RateBundle::from_measured(0.3, 0.1).unwrap();
        assert_relative_eq!(r.nu, 0.1);
        assert_relative_eq!(r.rho, 0.075);
        assert_relative_eq!(r.omega, 0.05);
        let r = RateBundle::from_measured(0.04, 0.1).unwrap();
        assert_relative_eq!(r.rho, 0.04);
        assert!(r.omega < r.rho);
        assert!(RateBundle::new(0.1, 0.05, 0.2).is_err());
        assert!(RateBundle::from_measured(-1.0, 0.1).is_err());
    }

    #[test]
    fn fq_paths_agree_and_vanish_at_zero() {
        let (m, f, w) = setup(30.0, 601);
        let nl = Nonlinearity::new(&m, &f);
        let zero = GridField::zeros(f.grid.nodes, 2);
        assert_eq!(nl.eval(&zero, FqPath::ClosedForm).max_abs(), 0.0);
        assert_eq!(nl.eval(&zero, FqPath::Quadrature).max_abs(), 0.0);
        let norms = Norms::new(&f.grid, &w, NormKind::Sup);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let y = random_bumps(&f.grid, 2, &mut rng, 10.0, 4).scaled(0.1);
            let a = nl.eval(&y, FqPath::ClosedForm);
            let b = nl.eval(&y, FqPath::Quadrature);
            let y0 = norms.zero(&y);
            assert!(a.sub(&b).max_abs() <= 1e-10 * (1.0 + y0 * y0));
        }
        let y = random_bumps(&f.grid, 2, &mut rng, 10.0, 4);
        let slope = quadratic_scaling_slope(&nl, &norms, &y, &[1e-2, 5e-3, 2.5e-3, 1.25e-3]);
        assert!((1.9..=2.1).contains(&slope), "{slope}");
    }

    #[test]
    fn quadratic_ratio_fades_into_the_left_tail() {
        let (m, f, w) = setup(30.0, 601);
        let nl = Nonlinearity::new(&m, &f);
        let norms = Norms::new(&f.grid, &w, NormKind::Sup);
        let bump = |at: f64| GridField::from_fn(&f.grid, 2, |x, j| if j == 0 { 0.05 * (-(x - at) * (x - at)).exp() } else { 0.0 });
        let r = |y: &GridField| norms.zero(&nl.eval(y, FqPath::ClosedForm)) / (norms.zero(y) * norms.alpha(y));
        let ratios: Vec<f64> = [0.0, -10.0, -20.0].iter().map(|&a| r(&bump(a))).collect();
        assert!(ratios[1] < ratios[0] && ratios[2] < 0.2 * ratios[1], "{ratios:?}");
    }

    #[test]
    fn semilinear_zero_stays_zero_and_linear_limit() {
        let (m, f, w) = setup(30.0, 601);
        let op = assemble_linearization(&m, &f, &w).unwrap();
        let nl = Nonlinearity::new(&m, &f);
        let zero = GridField::zeros(f.grid.nodes, 2);
        let t = evolve_semilinear(&op, &nl, &zero, 1.0, 0.05, 1).unwrap();
        assert!(t.states.iter().all(|s| s.max_abs() == 0.0));
        // Tiny data: the nonlinear trajectory matches the linear one to O(|y|²).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y0 = random_bumps(&f.grid, 2, &mut rng, 10.0, 4).scaled(1e-6);
        let a = evolve_semilinear(&op, &nl, &y0, 2.0, 0.05, 1).unwrap();
        let b = propagate_linear(&op, &y0, 2.0, 0.05).unwrap();
        assert!(a.last().sub(b.last()).max_abs() < 1e-10);
    }

    #[test]
    fn semilinear_duhamel_consistency() {
        let (m, f, w) = setup(30.0, 601);
        let op = assemble_linearization(&m, &f, &w).unwrap();
        let nl = Nonlinearity::new(&m, &f);
        let norms = Norms::new(&f.grid, &w, NormKind::Sup);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y0 = random_bumps(&f.grid, 2, &mut rng, 8.0, 4).scaled(0.02);
        let res = |dt: f64| {
            let t = evolve_semilinear(&op, &nl, &y0, 2.0, dt, 1).unwrap();
            duhamel_residual(&op, &nl, &t, &norms).unwrap()
        };
        let (r1, r2) = (res(0.1), res(0.05));
        assert!(r1 < 1e-4 && r2 < r1 / 3.0, "{r1} {r2}");
    }

    #[test]
    fn full_equation_oracle_matches_perturbation_flow() {
        let (m, f, w) = setup(30.0, 601);
        let op = assemble_linearization(&m, &f, &w).unwrap();
        let nl = Nonlinearity::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y0 = random_bumps(&f.grid, 2, &mut rng, 8.0, 4).scaled(0.02);
        let gap = |dt: f64| {
            let a = evolve_semilinear(&op, &nl, &y0, 2.0, dt, 1).unwrap();
            let b = evolve_full(&m, &f, &f.y0.axpy(1.0, &y0), 2.0, dt, 1).unwrap();
            b.last().sub(&f.y0).sub(a.last()).max_abs()
        };
        let (g1, g2) = (gap(0.1), gap(0.05));
        assert!(g1 < 1e-5 && g2 < g1 / 3.0, "{g1} {g2}");
    }

    #[test]
    fn projected_data_decays_and_center_mode_is_stationary() {
        let (m, f, w) = setup(40.0, 801);
        let op = assemble_linearization(&m, &f, &w).unwrap();
        let pair = adjoint_zero_mode(&op).unwrap();
        let norms = Norms::new(&f.grid, &w, NormKind::Sup);
        let d = semigroup_decay_rate(&op, &pair, &norms, 40.0, 0.1, 3, 1).unwrap();
        assert!(d.nu_hat > 0.08, "{d:?}");
        let t = propagate_linear(&op, &pair.yqprime, 10.0, 0.1).unwrap();
        assert!(t.last().sub(&pair.yqprime).max_abs() < 1e-9);
        let b = semigroup_bound(&op, &norms, 20.0, 0.1, 3, 1).unwrap();
        assert!(b.is_finite() && b < 50.0);
    }

    #[test]
    fn limit_semigroups_of_gasless_model() {
        let (m, f, w) = setup(30.0, 601);
        let r = limit_semigroup_check(&m, &f, &w, 20.0, 0.05, 3, 5).unwrap();
        assert!(r.pass, "{r:?}");
        let expected = 0.5 * (-0.5f64).exp();
        assert!((r.s2_rate - expected).abs() < 0.02 * expected, "{r:?}");
    }

    #[test]
    fn trajectory_csv_layout() {
        let (m, f, w) = setup(20.0, 201);
        let op = assemble_linearization(&m, &f, &w).unwrap();
        let t = propagate_linear(&op, &f.y0prime, 0.2, 0.1).unwrap();
        let csv = t.to_csv(&Norms::new(&f.grid, &w, NormKind::Sup), 1);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,norm_zero,norm_alpha,v_norm_zero");
        assert_eq!(lines.len(), 4);
    }
}
