//! Lyapunov–Perron construction of the stable manifolds `M_q^s`, the
//! foliation of a neighbourhood of the front by them, and the checks of the
//! stability and foliation statements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roots::{find_root_brent, SimpleConvergency};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolve::{evolve_semilinear, fit_decay, CrankNicolson, Nonlinearity, RateBundle, Scheme, Trajectory};
use crate::front::{shift_front, FrontOptions, FrontProfile};
use crate::grid::{random_bumps, GridField, NormKind, Norms, Weight};
use crate::model::ReactionModel;
use crate::spectrum::{adjoint_zero_mode, assemble_linearization, ProjectionPair, WeightedOperator};

/// Horizon, step, radii and rates of the fixed-point problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LpConfig {
    pub t_final: f64,
    pub dt: f64,
    /// Picard iteration stops once `‖yᵏ⁺¹ - yᵏ‖ ≤ tol · ‖yᵏ⁺¹‖`.
    pub tol_fixed_point: f64,
    /// Radius of the trajectory ball in `‖·‖`.
    pub delta: f64,
    /// Radius of the data ball in `|·|_β`.
    pub delta0: f64,
    /// Shifts are searched in `[-q0, q0]`.
    pub q0: f64,
    /// Radius of the foliated neighbourhood of `Y_0` in `|·|_β`.
    pub eta: f64,
    pub max_iterations: usize,
    /// Horizon of the evolution used by the asymptotic-phase method.
    pub phase_horizon: f64,
    pub rates: RateBundle,
}

impl LpConfig {
    /// Defaults with the horizon chosen as the smallest multiple of `dt`
    /// satisfying `e^{-2ωT} ≤ tol`.
    pub fn from_rates(rates: RateBundle, dt: f64, tol_fixed_point: f64) -> Result<Self> {
        if !(tol_fixed_point > 0.0 && tol_fixed_point < 1.0) {
            return Err(Error::param("tol_fixed_point", "must lie in (0, 1)"));
        }
        if !(dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        let horizon = (1.0 / tol_fixed_point).ln() / (2.0 * rates.omega);
        let t_final = (horizon / dt).ceil() * dt;
        let delta0 = 0.01;
        let cfg = Self {
            t_final,
            dt,
            tol_fixed_point,
            delta: 0.05,
            delta0,
            q0: 0.5,
            eta: 0.5 * delta0,
            max_iterations: 40,
            phase_horizon: 100.0,
            rates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("delta0", self.delta0),
            ("q0", self.q0),
            ("eta", self.eta),
            ("dt", self.dt),
            ("phase_horizon", self.phase_horizon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        let steps = (self.t_final / self.dt).round();
        if steps < 2.0 || (steps * self.dt - self.t_final).abs() > 1e-9 * self.t_final {
            return Err(Error::param("T", "must be a multiple of dt with at least two steps"));
        }
        let truncation = (-2.0 * self.rates.omega * self.t_final).exp();
        if truncation > self.tol_fixed_point * (1.0 + 1e-12) {
            return Err(Error::param(
                "T",
                format!(
                    "exp(-2 omega T) = {truncation:.3e} exceeds tol_fixed_point = {:.3e}; lengthen the horizon",
                    self.tol_fixed_point
                ),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Everything attached to one shift `q`: the translate `Y_q`, its weighted
/// linearization, the projections, `F_q` and the factorized propagator.
#[derive(Debug, Clone)]
pub struct Leaf {
    pub q: f64,
    pub profile: FrontProfile,
    pub op: WeightedOperator,
    pub pair: ProjectionPair,
    pub nl: Nonlinearity,
    pub norms: Norms,
    pub n1: usize,
    cn: CrankNicolson,
}

impl Leaf {
    /// `base` is the unshifted front; `q` is absolute.
    pub fn new(model: &ReactionModel, base: &FrontProfile, weight: &Weight, q: f64, dt: f64) -> Result<Self> {
        let profile = if q == base.shift {
            base.clone()
        } else {
            let opts = FrontOptions {
                transport: base.transport,
                richardson: false,
                ..FrontOptions::default()
            };
            shift_front(model, base, q - base.shift, &opts)?
        };
        let op = assemble_linearization(model, &profile, weight)?;
        let pair = adjoint_zero_mode(&op)?;
        let nl = Nonlinearity::new(model, &profile);
        let cn = CrankNicolson::new(&op.l, dt)?;
        let norms = Norms::new(&profile.grid, weight, NormKind::Sup);
        Ok(Self {
            q,
            profile,
            op,
            pair,
            nl,
            norms,
            n1: model.n1,
            cn,
        })
    }

    pub fn dt(&self) -> f64 {
        self.cn.dt
    }

    /// `|Y_q'|_β` for the normalized zero mode.
    pub fn zero_mode_beta(&self) -> f64 {
        self.norms.beta(&self.pair.yqprime)
    }

    fn state_norm(&self, y: &GridField, decay: f64) -> f64 {
        (decay * self.norms.alpha(y)).max(self.norms.zero(y)).max(decay * self.norms.tail_zero(y, self.n1))
    }

    /// `‖y‖ = sup_t max(e^{ωt}|y|_α, |y|₀, e^{ωt}|v|₀)` on the time grid.
    pub fn path_norm(&self, times: &[f64], states: &[GridField], omega: f64) -> f64 {
        times
            .iter()
            .zip(states)
            .map(|(t, y)| self.state_norm(y, (omega * t).exp()))
            .fold(0.0, f64::max)
    }

    /// `‖a - b‖` without materializing the difference trajectory.
    pub fn path_distance(&self, times: &[f64], a: &[GridField], b: &[GridField], omega: f64) -> f64 {
        times
            .iter()
            .zip(a.iter().zip(b))
            .map(|(t, (x, y))| self.state_norm(&x.sub(y), (omega * t).exp()))
            .fold(0.0, f64::max)
    }

    fn zero_trajectory(&self, cfg: &LpConfig) -> Trajectory {
        let zero = GridField::zeros(self.profile.grid.nodes, self.op.n);
        Trajectory {
            times: cfg.times(),
            states: vec![zero; cfg.steps() + 1],
            q: self.q,
            dt: cfg.dt,
            weight: self.op.weight,
            scheme: Scheme::CrankNicolson,
        }
    }
}

/// One application of `Φ_q`.
#[derive(Debug, Clone)]
pub struct LpStep {
    pub y: Trajectory,
    /// `-∫₀^∞ π_q(F_q(y_in(τ))) dτ`.
    pub phi_coeff: f64,
    /// Extrapolated `∫_T^∞ π_q(F_q) dτ`.
    pub tail_ext: f64,
    /// `c e^{-2ωT}/(2ω)` with `c` fitted on the last tenth of the window.
    pub tail_bound: f64,
    /// The samples of `π_q(F_q)` on the last tenth neither decay cleanly nor
    /// sit at round-off (nine orders below their peak).
    pub tail_flagged: bool,
}

fn tail_extrapolation(times: &[f64], pis: &[f64], omega: f64) -> (f64, f64, bool) {
    let n = pis.len();
    let start = n - (n / 10).max(3).min(n);
    let window = &pis[start..];
    let last = pis[n - 1];
    if window.iter().all(|p| *p == 0.0) {
        return (0.0, 0.0, false);
    }
    let t_end = times[n - 1];
    let c = times[start..]
        .iter()
        .zip(window)
        .map(|(t, p)| p.abs() * (2.0 * omega * t).exp())
        .fold(0.0, f64::max);
    let bound = c * (-2.0 * omega * t_end).exp() / (2.0 * omega);
    let peak = pis.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let floor = window.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    if floor <= 1e-9 * peak {
        return (last / (2.0 * omega), bound, false);
    }
    let same_sign = window.iter().all(|p| p.signum() == last.signum() && *p != 0.0);
    let abs: Vec<f64> = window.iter().map(|p| p.abs()).collect();
    let rate = if same_sign {
        fit_decay(&times[start..], &abs).map(|f| f.rate).filter(|r| *r > 0.0)
    } else {
        None
    };
    match rate {
        Some(r) => (last / r, bound, false),
        None => (last / (2.0 * omega), bound, true),
    }
}

/// `Φ_q(y_in, z0)`: the stable part as one forced Crank–Nicolson sweep
/// `w' = L_q w + P_s F_q(y_in)`, `w(0) = P_s z0`, and the centre part as the
/// backward integral of `π_q(F_q(y_in))` times `Y_q'`.
pub fn lp_apply(leaf: &Leaf, y_in: &Trajectory, z0: &GridField, cfg: &LpConfig) -> Result<LpStep> {
    let steps = cfg.steps();
    if y_in.states.len() != steps + 1 || (y_in.dt - cfg.dt).abs() > 1e-12 || (leaf.dt() - cfg.dt).abs() > 1e-12 {
        return Err(Error::param("y_in", "trajectory does not live on the configured time grid"));
    }
    let m = leaf.op.l.dim();
    if z0.values.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: z0.values.len(),
        });
    }
    let yp = &leaf.pair.yqprime.values;
    let mut forcing = Vec::with_capacity(steps + 1);
    let mut pis = Vec::with_capacity(steps + 1);
    for s in &y_in.states {
        let mut f = vec![0.0; m];
        leaf.nl.eval_into(&s.values, &mut f);
        let p = leaf.pair.pi_slice(&f);
        for (fi, yi) in f.iter_mut().zip(yp) {
            *fi -= p * yi;
        }
        pis.push(p);
        forcing.push(f);
    }
    let w0 = leaf.pair.stable(z0);
    let w = leaf.cn.forced_sweep(&w0.values, &forcing);
    let times = cfg.times();
    let (tail_ext, tail_bound, tail_flagged) = tail_extrapolation(&times, &pis, cfg.rates.omega);
    let mut tail = vec![0.0; steps + 1];
    tail[steps] = tail_ext;
    for k in (0..steps).rev() {
        tail[k] = tail[k + 1] + 0.5 * cfg.dt * (pis[k] + pis[k + 1]);
    }
    let n = z0.components;
    let states = w
        .into_iter()
        .zip(&tail)
        .map(|(mut wk, ck)| {
            for (a, b) in wk.iter_mut().zip(yp) {
                *a -= ck * b;
            }
            GridField::from_values(n, wk)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LpStep {
        y: Trajectory {
            times,
            states,
            q: leaf.q,
            dt: cfg.dt,
            weight: leaf.op.weight,
            scheme: Scheme::CrankNicolson,
        },
        phi_coeff: -tail[0],
        tail_ext,
        tail_bound,
        tail_flagged,
    })
}

/// The fixed point `y^q_{z0}` of `Φ_q(·, z0)` and what it yields.
#[derive(Debug, Clone, Serialize)]
pub struct LpSolution {
    pub q: f64,
    #[serde(skip)]
    pub z0: GridField,
    #[serde(skip)]
    pub y: Trajectory,
    /// `φ_q(z0) = phi_coeff · Y_q'`.
    pub phi_coeff: f64,
    /// `‖Δᵏ⁺¹‖ / ‖Δᵏ‖`.
    pub contraction_factors: Vec<f64>,
    /// `‖yᵏ⁺¹ - yᵏ‖`.
    pub increments: Vec<f64>,
    pub iterations: usize,
    pub data_norm: f64,
    /// `‖y‖`.
    pub norm: f64,
    /// Last increment, i.e. `‖Φ_q(y, z0) - y‖` for the previous iterate.
    pub fixed_point_residual: f64,
    pub tail_bound: f64,
    pub tail_flagged: bool,
}

impl LpSolution {
    /// Estimated distance to the exact discrete fixed point.
    pub fn error_estimate(&self) -> f64 {
        let k = self.contraction_factors.last().copied().unwrap_or(0.5).clamp(0.0, 0.9);
        self.fixed_point_residual * k / (1.0 - k)
    }
}

/// Picard iteration `y ← Φ_q(y, z0)`, by default from `y ≡ 0`.
pub fn lp_fixed_point(leaf: &Leaf, z0: &GridField, cfg: &LpConfig, warm: Option<&Trajectory>) -> Result<LpSolution> {
    let data_norm = leaf.norms.beta(z0);
    let center = leaf.pair.pi(z0);
    if center.abs() > 1e-10 * data_norm.max(1.0) {
        return Err(Error::param("z0", format!("must lie in the stable range, pi_q(z0) = {center:.3e}")));
    }
    if data_norm > cfg.delta0 * (1.0 + 1e-9) {
        return Err(Error::param(
            "z0",
            format!("|z0|_beta = {data_norm:.3e} exceeds delta0 = {:.3e}", cfg.delta0),
        ));
    }
    let omega = cfg.rates.omega;
    let times = cfg.times();
    let mut y = match warm {
        Some(t) if t.states.len() == cfg.steps() + 1 => t.clone(),
        _ => leaf.zero_trajectory(cfg),
    };
    let mut increments = Vec::new();
    let mut factors = Vec::new();
    let mut stalled = 0;
    for it in 1..=cfg.max_iterations {
        let step = lp_apply(leaf, &y, z0, cfg)?;
        let delta = leaf.path_distance(&times, &step.y.states, &y.states, omega);
        let norm = leaf.path_norm(&times, &step.y.states, omega);
        if let Some(prev) = increments.last().copied() {
            let f: f64 = if prev > 0.0 { delta / prev } else { 0.0 };
            factors.push(f);
            stalled = if f >= 1.0 { stalled + 1 } else { 0 };
            if stalled >= 3 {
                return Err(Error::NonContraction { factors });
            }
        }
        increments.push(delta);
        if norm > cfg.delta {
            return Err(Error::BallEscape { norm, delta: cfg.delta });
        }
        y = step.y;
        if delta <= cfg.tol_fixed_point * norm {
            return Ok(LpSolution {
                q: leaf.q,
                z0: z0.clone(),
                y,
                phi_coeff: step.phi_coeff,
                contraction_factors: factors,
                increments,
                iterations: it,
                data_norm,
                norm,
                fixed_point_residual: delta,
                tail_bound: step.tail_bound,
                tail_flagged: step.tail_flagged,
            });
        }
    }
    Err(Error::NonContraction { factors })
}

/// `‖y - VOCF(y)‖` where `VOCF(y)` is the discrete variation-of-constants
/// formula started from `y(0)` and driven by `F_q(y)`.
pub fn duhamel_defect(leaf: &Leaf, sol: &LpSolution, cfg: &LpConfig) -> Result<f64> {
    let m = leaf.op.l.dim();
    let forcing: Vec<Vec<f64>> = sol
        .y
        .states
        .iter()
        .map(|s| {
            let mut f = vec![0.0; m];
            leaf.nl.eval_into(&s.values, &mut f);
            f
        })
        .collect();
    let w = leaf.cn.forced_sweep(&sol.y.states[0].values, &forcing);
    let n = sol.z0.components;
    let w = w.into_iter().map(|v| GridField::from_values(n, v)).collect::<Result<Vec<_>>>()?;
    Ok(leaf.path_distance(&sol.y.times, &w, &sol.y.states, cfg.rates.omega))
}

/// `Y_q + z0 + φ_q(z0)`.
pub fn manifold_point(leaf: &Leaf, sol: &LpSolution) -> GridField {
    leaf.profile.y0.axpy(1.0, &sol.z0).axpy(sol.phi_coeff, &leaf.pair.yqprime)
}

/// Distance of a state from `M_q^s` along the centre direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Membership {
    pub q: f64,
    /// `π_q(Y - Y_q)`.
    pub center: f64,
    pub phi_coeff: f64,
    /// `|π_q(Y - Y_q) - phi_coeff| · |Y_q'|_β`.
    pub residual: f64,
    /// Resolution of `residual` set by the fixed-point stopping rule.
    pub floor: f64,
    pub data_norm: f64,
}

/// `g(q) = π_q(Y - Y_q) - φ_q(P_q^s(Y - Y_q))` together with the solve.
pub fn matching_function(leaf: &Leaf, state: &GridField, cfg: &LpConfig, warm: Option<&Trajectory>) -> Result<(f64, LpSolution)> {
    let y0 = state.sub(&leaf.profile.y0);
    let z0 = leaf.pair.stable(&y0);
    let center = leaf.pair.pi(&y0);
    let sol = lp_fixed_point(leaf, &z0, cfg, warm)?;
    Ok((center - sol.phi_coeff, sol))
}

pub fn membership(leaf: &Leaf, state: &GridField, cfg: &LpConfig) -> Result<Membership> {
    let y0 = state.sub(&leaf.profile.y0);
    let (g, sol) = matching_function(leaf, state, cfg, None)?;
    let scale = leaf.zero_mode_beta();
    Ok(Membership {
        q: leaf.q,
        center: leaf.pair.pi(&y0),
        phi_coeff: sol.phi_coeff,
        residual: g.abs() * scale,
        floor: sol.error_estimate(),
        data_norm: sol.data_norm,
    })
}

/// A random `z0 ∈ ran P_q^s` with `|z0|_β = size`.
pub fn random_stable_data(leaf: &Leaf, size: f64, seed: u64) -> GridField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = random_bumps(&leaf.profile.grid, leaf.op.n, &mut rng, 10.0, 4);
    let z = leaf.pair.stable(&raw);
    let z = z.scaled(size / leaf.norms.beta(&z));
    leaf.pair.stable(&z)
}

/// Log-log slope of `|phi_coeff|` against the data size.
#[derive(Debug, Clone, Serialize)]
pub struct TangencyCheck {
    pub sizes: Vec<f64>,
    pub phi: Vec<f64>,
    pub slope: f64,
    /// First contraction factor of each solve.
    pub first_factors: Vec<f64>,
    /// Log-log slope of the first contraction factor against the data size.
    pub factor_slope: f64,
}

fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a.ln(), b.abs().ln())).collect();
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

pub fn tangency_check(leaf: &Leaf, z_unit: &GridField, sizes: &[f64], cfg: &LpConfig) -> Result<TangencyCheck> {
    let base = leaf.norms.beta(z_unit);
    let mut phi = Vec::with_capacity(sizes.len());
    let mut first_factors = Vec::with_capacity(sizes.len());
    for s in sizes {
        let z = leaf.pair.stable(&z_unit.scaled(s / base));
        let sol = lp_fixed_point(leaf, &z, cfg, None)?;
        phi.push(sol.phi_coeff);
        first_factors.push(sol.contraction_factors.first().copied().unwrap_or(0.0));
    }
    Ok(TangencyCheck {
        sizes: sizes.to_vec(),
        slope: loglog_slope(sizes, &phi),
        factor_slope: loglog_slope(sizes, &first_factors),
        phi,
        first_factors,
    })
}

/// `‖y_evolved - y*‖ / ‖y*‖` where `y_evolved` is the semilinear flow started
/// from the fixed point's initial value.
pub fn trajectory_equivalence(leaf: &Leaf, sol: &LpSolution, cfg: &LpConfig) -> Result<f64> {
    let traj = evolve_semilinear(&leaf.op, &leaf.nl, &sol.y.states[0], cfg.t_final, cfg.dt, 1)?;
    let d = leaf.path_distance(&sol.y.times, &traj.states, &sol.y.states, cfg.rates.omega);
    Ok(if sol.norm > 0.0 { d / sol.norm } else { d })
}

/// Difference quotients of `q ↦ φ_q(P_q^s z)` against the first ladder entry.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftLipschitz {
    pub shifts: Vec<f64>,
    pub phi: Vec<f64>,
    pub ratios: Vec<f64>,
    pub variation: f64,
    pub bounded: bool,
}

pub fn lipschitz_in_q_check(
    model: &ReactionModel,
    base: &FrontProfile,
    weight: &Weight,
    z_base: &GridField,
    shifts: &[f64],
    cfg: &LpConfig,
) -> Result<ShiftLipschitz> {
    if shifts.len() < 2 {
        return Err(Error::param("shifts", "need at least two shifts"));
    }
    if shifts.iter().any(|q| q.abs() > cfg.q0) {
        return Err(Error::param("shifts", "ladder must lie in [-q0, q0]"));
    }
    let mut phi = Vec::with_capacity(shifts.len());
    for &q in shifts {
        let leaf = Leaf::new(model, base, weight, q, cfg.dt)?;
        let z = leaf.pair.stable(z_base);
        phi.push(lp_fixed_point(&leaf, &z, cfg, None)?.phi_coeff);
    }
    let ratios: Vec<f64> = shifts[1..]
        .iter()
        .zip(&phi[1..])
        .map(|(q, p)| (p - phi[0]).abs() / (q - shifts[0]).abs())
        .collect();
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let variation = if lo > 0.0 { hi / lo } else if hi == 0.0 { 1.0 } else { f64::INFINITY };
    Ok(ShiftLipschitz {
        shifts: shifts.to_vec(),
        phi,
        ratios,
        variation,
        bounded: variation.is_finite() && variation < 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoliationMethod {
    #[default]
    RootFind,
    AsymptoticPhase,
}

/// A sample of the matching function; `None` where the fixed point could not
/// be computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchingSample {
    pub q: f64,
    pub g: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoliationResult {
    pub q_star: f64,
    /// `g(q_star)` for root finding, `|Y(T) - Y_{q_star}|_α` for the phase.
    pub residual: f64,
    pub bracket: (f64, f64),
    pub method: FoliationMethod,
    pub scan: Vec<MatchingSample>,
    pub sign_changes: usize,
    pub evaluations: usize,
}

/// Shared state for repeated foliation solves around one base front.
pub struct Foliator<'a> {
    pub model: &'a ReactionModel,
    pub base: &'a FrontProfile,
    pub weight: Weight,
    pub cfg: LpConfig,
    pub scan_points: usize,
    scan: Vec<Leaf>,
    norms: Norms,
}

impl<'a> Foliator<'a> {
    pub fn new(model: &'a ReactionModel, base: &'a FrontProfile, weight: &Weight, cfg: &LpConfig) -> Result<Self> {
        cfg.validate()?;
        let scan_points = 9;
        let scan = (0..scan_points)
            .map(|i| {
                let q = -cfg.q0 + 2.0 * cfg.q0 * i as f64 / (scan_points - 1) as f64;
                Leaf::new(model, base, weight, q, cfg.dt)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            base,
            weight: *weight,
            cfg: *cfg,
            scan_points,
            scan,
            norms: Norms::new(&base.grid, weight, NormKind::Sup),
        })
    }

    pub fn leaf(&self, q: f64) -> Result<Leaf> {
        Leaf::new(self.model, self.base, &self.weight, q, self.cfg.dt)
    }

    fn check_radius(&self, state: &GridField) -> Result<()> {
        let r = self.norms.beta(&state.sub(&self.base.y0));
        if r > self.cfg.eta {
            return Err(Error::param(
                "state",
                format!("|Y - Y_0|_beta = {r:.3e} exceeds eta = {:.3e}", self.cfg.eta),
            ));
        }
        Ok(())
    }

    /// Samples of `g` on the uniform scan of `[-q0, q0]`.
    pub fn scan(&self, state: &GridField) -> Vec<MatchingSample> {
        self.scan
            .iter()
            .map(|leaf| MatchingSample {
                q: leaf.q,
                g: matching_function(leaf, state, &self.cfg, None).ok().map(|(g, _)| g),
            })
            .collect()
    }

    pub fn foliate(&self, state: &GridField, method: FoliationMethod) -> Result<FoliationResult> {
        self.check_radius(state)?;
        match method {
            FoliationMethod::RootFind => self.root_find(state),
            FoliationMethod::AsymptoticPhase => self.asymptotic_phase(state),
        }
    }

    fn root_find(&self, state: &GridField) -> Result<FoliationResult> {
        let scan = self.scan(state);
        let evaluated: Vec<usize> = (0..scan.len()).filter(|&i| scan[i].g.is_some()).collect();
        let mut brackets: Vec<(usize, usize)> = Vec::new();
        for w in evaluated.windows(2) {
            let (a, b) = (scan[w[0]].g.unwrap_or(0.0), scan[w[1]].g.unwrap_or(0.0));
            let root_at_left = a == 0.0 && brackets.last().is_none_or(|&(_, hi)| hi != w[0]);
            if root_at_left || (a != 0.0 && b != 0.0 && a.signum() != b.signum()) || (a != 0.0 && b == 0.0) {
                brackets.push((w[0], w[1]));
            }
        }
        if let Some(&last) = evaluated.last() {
            if scan[last].g == Some(0.0) && brackets.last().is_none_or(|&(_, hi)| hi != last) {
                brackets.push((last, last));
            }
        }
        let sign_changes = brackets.len();
        let &(lo, hi) = brackets.first().ok_or_else(|| Error::NoSignChange {
            lo: -self.cfg.q0,
            hi: self.cfg.q0,
            samples: scan.iter().map(|s| (s.q, s.g.unwrap_or(f64::NAN))).collect(),
        })?;
        let (a, b) = (scan[lo].q, scan[hi].q);
        let (ga, gb) = (scan[lo].g.unwrap_or(0.0), scan[hi].g.unwrap_or(0.0));
        let mut evaluations = 0usize;
        let mut failure: Option<Error> = None;
        let mut warm: Option<Trajectory> = None;
        let mut last = (f64::NAN, f64::NAN);
        let g = |p: f64| -> f64 {
            if p == a {
                return ga;
            }
            if p == b {
                return gb;
            }
            if failure.is_some() {
                return f64::NAN;
            }
            evaluations += 1;
            let result = self
                .leaf(p)
                .and_then(|leaf| matching_function(&leaf, state, &self.cfg, warm.as_ref()));
            match result {
                Ok((v, sol)) => {
                    warm = Some(sol.y);
                    last = (p, v);
                    v
                }
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        };
        let mut conv = SimpleConvergency {
            eps: 1e-9,
            max_iter: 40,
        };
        let root = find_root_brent(a, b, g, &mut conv);
        if let Some(e) = failure {
            return Err(e);
        }
        let q_star = root.map_err(|_| Error::NoSignChange {
            lo: a,
            hi: b,
            samples: vec![(a, ga), (b, gb)],
        })?;
        let residual = if last.0 == q_star {
            last.1
        } else if q_star == a {
            ga
        } else if q_star == b {
            gb
        } else {
            let leaf = self.leaf(q_star)?;
            evaluations += 1;
            matching_function(&leaf, state, &self.cfg, None)?.0
        };
        Ok(FoliationResult {
            q_star,
            residual,
            bracket: (a, b),
            method: FoliationMethod::RootFind,
            scan,
            sign_changes,
            evaluations,
        })
    }

    /// Evolves the perturbation of `Y_0` to `phase_horizon` and minimizes
    /// `|Y(T) - Y_p|_α` over `p`, first on a grid and then by golden section.
    fn asymptotic_phase(&self, state: &GridField) -> Result<FoliationResult> {
        let dt = self.cfg.dt;
        let horizon = (self.cfg.phase_horizon / dt).round() * dt;
        let stride = (horizon / dt).round() as usize;
        let origin = self
            .scan
            .iter()
            .find(|l| l.q == self.base.shift)
            .ok_or_else(|| Error::param("scan_points", "scan must contain the unshifted front"))?;
        let y0 = state.sub(&self.base.y0);
        let traj = evolve_semilinear(&origin.op, &origin.nl, &y0, horizon, dt, stride)?;
        let end = traj.last().clone();
        let mut evaluations = 0usize;
        let mut distance = |p: f64| -> Result<f64> {
            evaluations += 1;
            let leaf_profile = if p == self.base.shift {
                self.base.clone()
            } else {
                let opts = FrontOptions {
                    transport: self.base.transport,
                    richardson: false,
                    ..FrontOptions::default()
                };
                shift_front(self.model, self.base, p - self.base.shift, &opts)?
            };
            Ok(self.norms.alpha(&end.sub(&leaf_profile.y0.sub(&self.base.y0))))
        };
        let points = 4 * (self.scan_points - 1) + 1;
        let grid: Vec<f64> = (0..points)
            .map(|i| -self.cfg.q0 + 2.0 * self.cfg.q0 * i as f64 / (points - 1) as f64)
            .collect();
        let mut values = Vec::with_capacity(points);
        for &p in &grid {
            values.push(distance(p)?);
        }
        let best = values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.total_cmp(y.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let mut lo = grid[best.saturating_sub(1)];
        let mut hi = grid[(best + 1).min(points - 1)];
        let bracket = (lo, hi);
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let mut f1 = distance(x1)?;
        let mut f2 = distance(x2)?;
        while hi - lo > 1e-7 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = distance(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = distance(x2)?;
            }
        }
        let (q_star, residual) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        Ok(FoliationResult {
            q_star,
            residual,
            bracket,
            method: FoliationMethod::AsymptoticPhase,
            scan: Vec::new(),
            sign_changes: 1,
            evaluations,
        })
    }
}

/// Decay of a manifold point under the semilinear flow.
#[derive(Debug, Clone, Serialize)]
pub struct DecayCheck {
    pub q: f64,
    pub data_norm: f64,
    /// Fitted rate of `|Y(t) - Y_q|_α`.
    pub alpha_rate: f64,
    /// `sup_t |π₁(Y(t) - Y_q)|₀ / |Y(0) - Y_q|_β`.
    pub u_constant: f64,
    /// Fitted rate of `|π₂(Y(t) - Y_q)|₀`.
    pub v_rate: f64,
    pub omega: f64,
    pub pass: bool,
}

pub fn decay_check(leaf: &Leaf, point: &GridField, omega: f64, t_final: f64, dt: f64) -> Result<DecayCheck> {
    let y0 = point.sub(&leaf.profile.y0);
    let data_norm = leaf.norms.beta(&y0);
    let traj = evolve_semilinear(&leaf.op, &leaf.nl, &y0, t_final, dt, 1)?;
    let n1 = leaf.n1;
    let n = leaf.op.n;
    let mut alpha = Vec::with_capacity(traj.states.len());
    let mut v = Vec::with_capacity(traj.states.len());
    let mut u_max = 0.0f64;
    for s in &traj.states {
        alpha.push(leaf.norms.alpha(s));
        v.push(leaf.norms.tail_zero(s, n1));
        if n1 > 0 {
            let u = (0..s.nodes())
                .flat_map(|i| (0..n1).map(move |j| (i, j)))
                .fold(0.0f64, |m, (i, j)| m.max(s.get(i, j).abs()));
            u_max = u_max.max(u);
        }
    }
    let alpha_rate = fit_decay(&traj.times, &alpha).map(|f| f.rate).unwrap_or(f64::NAN);
    let v_rate = if n1 < n {
        fit_decay(&traj.times, &v).map(|f| f.rate).unwrap_or(f64::NAN)
    } else {
        f64::INFINITY
    };
    let u_constant = if data_norm > 0.0 { u_max / data_norm } else { 0.0 };
    let pass = alpha_rate >= omega && v_rate >= omega && u_constant < 20.0;
    Ok(DecayCheck {
        q: leaf.q,
        data_norm,
        alpha_rate,
        u_constant,
        v_rate,
        omega,
        pass,
    })
}

/// Membership residual of a manifold point before and after evolving it.
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceCheck {
    pub q: f64,
    pub t0: f64,
    pub original: Membership,
    pub evolved: Membership,
    /// `evolved.residual / max(original.residual, original.floor)`.
    pub ratio: f64,
    pub pass: bool,
}

pub fn forward_invariance(leaf: &Leaf, point: &GridField, t0: f64, cfg: &LpConfig) -> Result<InvarianceCheck> {
    let original = membership(leaf, point, cfg)?;
    let y0 = point.sub(&leaf.profile.y0);
    let traj = evolve_semilinear(&leaf.op, &leaf.nl, &y0, t0, cfg.dt, usize::MAX)?;
    let moved = leaf.profile.y0.axpy(1.0, traj.last());
    let evolved = membership(leaf, &moved, cfg)?;
    let reference = original.residual.max(original.floor);
    let ratio = if reference > 0.0 { evolved.residual / reference } else { f64::INFINITY };
    Ok(InvarianceCheck {
        q: leaf.q,
        t0,
        original,
        evolved,
        ratio,
        pass: ratio <= 10.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::front::{model_guess, solve_front, Phase};
    use crate::grid::{make_weight, SpatialGrid};
    use crate::model::{builtin_model, ModelName, Params};

    #[test]
    fn tail_extrapolation_cases() {
        let times: Vec<f64> = (0..=100).map(|k| 0.1 * k as f64).collect();
        let clean: Vec<f64> = times.iter().map(|t| 2.0 * (-0.3 * t).exp()).collect();
        let (ext, bound, flagged) = tail_extrapolation(&times, &clean, 0.1);
        assert!(!flagged);
        assert!((ext - 2.0 * (-3.0f64).exp() / 0.3).abs() < 1e-6, "{ext}");
        assert!(bound > 0.0);

        let noisy: Vec<f64> = times.iter().enumerate().map(|(k, t)| (-0.3 * t).exp() * if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(tail_extrapolation(&times, &noisy, 0.1).2);

        let mut roundoff = clean.clone();
        for (k, p) in roundoff.iter_mut().enumerate().skip(90) {
            *p = if k % 2 == 0 { 1e-18 } else { -1e-18 };
        }
        assert!(!tail_extrapolation(&times, &roundoff, 0.1).2);
        assert_eq!(tail_extrapolation(&times, &vec![0.0; 101], 0.1), (0.0, 0.0, false));
    }

    fn setup() -> (ReactionModel, FrontProfile, Weight) {
        let mut p = Params::new();
        p.insert("beta".into(), 0.5);
        let m = builtin_model(ModelName::GaslessCombustion, &p).unwrap();
        let g = SpatialGrid::new(30.0, 601).unwrap();
        let guess = model_guess(&m, &g, 0.5);
        let f = solve_front(&m, &g, &guess, 0.5, Phase::default(), &FrontOptions::default()).unwrap();
        let w = make_weight((-0.5 * f.omega_minus, 0.5 * f.omega_plus), 5.0).unwrap();
        (m, f, w)
    }

    fn config() -> LpConfig {
        LpConfig::from_rates(RateBundle::new(0.05, 0.1, 0.13).unwrap(), 0.1, 1e-4).unwrap()
    }

    #[test]
    fn horizon_follows_tolerance() {
        let cfg = config();
        assert!((-2.0 * 0.05 * cfg.t_final).exp() <= 1e-4);
        assert!((-2.0 * 0.05 * (cfg.t_final - cfg.dt)).exp() > 1e-4);
        let mut bad = cfg;
        bad.t_final = 10.0;
        assert!(bad.validate().is_err());
        bad = cfg;
        bad.delta0 = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_data_gives_zero_fixed_point() {
        let (m, f, w) = setup();
        let cfg = config();
        let leaf = Leaf::new(&m, &f, &w, 0.0, cfg.dt).unwrap();
        let zero = GridField::zeros(f.grid.nodes, 2);
        let sol = lp_fixed_point(&leaf, &zero, &cfg, None).unwrap();
        assert_eq!(sol.phi_coeff, 0.0);
        assert_eq!(sol.iterations, 1);
        assert!(sol.y.states.iter().all(|s| s.max_abs() == 0.0));
        assert_eq!(manifold_point(&leaf, &sol), f.y0);
    }

    #[test]
    fn zero_input_reproduces_linear_flow() {
        let (m, f, w) = setup();
        let cfg = config();
        let leaf = Leaf::new(&m, &f, &w, 0.0, cfg.dt).unwrap();
        let z0 = random_stable_data(&leaf, 0.01, 3);
        let step = lp_apply(&leaf, &leaf.zero_trajectory(&cfg), &z0, &cfg).unwrap();
        assert_eq!(step.phi_coeff, 0.0);
        let lin = crate::evolve::propagate_linear(&leaf.op, &z0, cfg.t_final, cfg.dt).unwrap();
        for (a, b) in step.y.states.iter().zip(&lin.states) {
            assert!(a.sub(b).max_abs() < 1e-14);
        }
    }

    #[test]
    fn centre_component_matches_backward_quadrature() {
        let (m, f, w) = setup();
        let cfg = config();
        let leaf = Leaf::new(&m, &f, &w, 0.0, cfg.dt).unwrap();
        let z0 = random_stable_data(&leaf, 0.01, 5);
        let lin = lp_apply(&leaf, &leaf.zero_trajectory(&cfg), &z0, &cfg).unwrap();
        let step = lp_apply(&leaf, &lin.y, &z0, &cfg).unwrap();
        // Independent Simpson quadrature of the same samples of π(F(y)).
        let pis: Vec<f64> = lin.y.states.iter().map(|s| leaf.pair.pi(&leaf.nl.eval(s, crate::evolve::FqPath::Quadrature))).collect();
        let steps = cfg.steps();
        let k = steps - steps % 2;
        let mut simpson = 0.0;
        for i in (0..k).step_by(2) {
            simpson += cfg.dt / 3.0 * (pis[i] + 4.0 * pis[i + 1] + pis[i + 2]);
        }
        if k < steps {
            simpson += 0.5 * cfg.dt * (pis[k] + pis[k + 1]);
        }
        let expected = -(simpson + step.tail_ext);
        let err = (step.phi_coeff - expected).abs();
        assert!(err <= 1e-3 * expected.abs() + 1e-14, "{} vs {expected}", step.phi_coeff);
        let centre = leaf.pair.pi(&step.y.states[0]);
        assert!((centre - step.phi_coeff).abs() < 1e-12);
    }

    #[test]
    fn small_data_contracts_and_satisfies_duhamel() {
        let (m, f, w) = setup();
        let cfg = config();
        let leaf = Leaf::new(&m, &f, &w, 0.0, cfg.dt).unwrap();
        let z0 = random_stable_data(&leaf, 0.01, 7);
        let sol = lp_fixed_point(&leaf, &z0, &cfg, None).unwrap();
        assert!(sol.contraction_factors.iter().all(|f| *f < 0.5), "{:?}", sol.contraction_factors);
        assert!(sol.norm <= cfg.delta);
        assert!(duhamel_defect(&leaf, &sol, &cfg).unwrap() < 1e-4);
        let p = manifold_point(&leaf, &sol);
        let r = membership(&leaf, &p, &cfg).unwrap();
        assert!(r.residual <= r.floor + 1e-14, "{r:?}");
    }

    #[test]
    fn data_outside_the_ball_or_range_is_rejected() {
        let (m, f, w) = setup();
        let cfg = config();
        let leaf = Leaf::new(&m, &f, &w, 0.0, cfg.dt).unwrap();
        let big = random_stable_data(&leaf, 0.5, 1);
        assert!(matches!(lp_fixed_point(&leaf, &big, &cfg, None), Err(Error::InvalidParameter { .. })));
        let centre = leaf.pair.yqprime.scaled(1e-3);
        assert!(matches!(lp_fixed_point(&leaf, &centre, &cfg, None), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn translate_is_found_on_its_own_leaf() {
        let (m, f, w) = setup();
        let mut cfg = config();
        cfg.q0 = 0.2;
        cfg.eta = 1.0;
        cfg.delta0 = 1.0;
        cfg.delta = 1.0;
        let fol = Foliator::new(&m, &f, &w, &cfg).unwrap();
        let leaf = fol.leaf(0.05).unwrap();
        let r = fol.foliate(&leaf.profile.y0, FoliationMethod::RootFind).unwrap();
        assert!((r.q_star - 0.05).abs() < 1e-6, "{r:?}");
        assert_eq!(r.sign_changes, 1);
    }
}
