//! Batch front-end: experiment configs, the staged pipeline and its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{
    limit_semigroup_check, nonlinearity_ladder, propagate_linear, quadratic_scaling_slope, semigroup_bound,
    semigroup_decay_rate, LimitSemigroupReport, Nonlinearity, NonlinearityLadder, RateBundle, SemigroupDecay,
};
use crate::front::{model_guess, shift_front, solve_front, FrontOptions, FrontProfile, Phase};
use crate::grid::{make_weight, random_bumps, NormKind, Norms, SpatialGrid, Weight};
use crate::manifold::{
    decay_check, duhamel_defect, forward_invariance, lipschitz_in_q_check, lp_fixed_point, manifold_point,
    random_stable_data, tangency_check, trajectory_equivalence, DecayCheck, FoliationMethod, Foliator, InvarianceCheck,
    Leaf, LpConfig, ShiftLipschitz, TangencyCheck,
};
use crate::model::{builtin_model, ModelName, Params, ReactionModel};
use crate::spectrum::{
    adjoint_zero_mode, apply_projections, assemble_linearization, assemble_unchecked, default_k_grid,
    default_shift_options, point_spectrum, projection_lipschitz_check, ProjectionPair, SpectralDecomposition,
    WeightedOperator,
};

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Front,
    Spectrum,
    Decay,
    Manifold,
    Foliate,
    Verify,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Front,
        Experiment::Spectrum,
        Experiment::Decay,
        Experiment::Manifold,
        Experiment::Foliate,
        Experiment::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Front => "front",
            Experiment::Spectrum => "spectrum",
            Experiment::Decay => "decay",
            Experiment::Manifold => "manifold",
            Experiment::Foliate => "foliate",
            Experiment::Verify => "verify",
        }
    }

    pub fn requires(self) -> Option<Experiment> {
        match self {
            Experiment::Front => None,
            Experiment::Spectrum => Some(Experiment::Front),
            Experiment::Decay => Some(Experiment::Spectrum),
            Experiment::Manifold => Some(Experiment::Decay),
            Experiment::Foliate => Some(Experiment::Manifold),
            Experiment::Verify => Some(Experiment::Foliate),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_width: f64,
    pub nodes: usize,
}

/// Omitted exponents are placed mid-window: `α₋ = -ω₋/2`, `α₊ = ω₊/2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSection {
    pub alpha_minus: Option<f64>,
    pub alpha_plus: Option<f64>,
    #[serde(default = "default_x0")]
    pub x0: f64,
}

fn default_x0() -> f64 {
    5.0
}

impl Default for WeightSection {
    fn default() -> Self {
        Self {
            alpha_minus: None,
            alpha_plus: None,
            x0: default_x0(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontSection {
    pub speed_guess: f64,
    pub steepness: f64,
}

impl Default for FrontSection {
    fn default() -> Self {
        Self {
            speed_guess: 0.5,
            steepness: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePolicy {
    /// `ν = ν̂`, `ρ = min(ρ̂, 3ν̂/4)`, `ω = min(ρ̂, ν̂)/2` from the decay stage.
    #[default]
    Measured,
    Fixed,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesSection {
    pub policy: RatePolicy,
    pub omega: Option<f64>,
    pub rho: Option<f64>,
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveSection {
    pub dt: f64,
    pub t_final: f64,
    pub samples: usize,
    pub nonlinearity_samples: usize,
}

impl Default for EvolveSection {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_final: 50.0,
            samples: 5,
            nonlinearity_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpSection {
    pub dt: f64,
    pub tol_fixed_point: f64,
    pub delta: f64,
    pub delta0: f64,
    pub q0: f64,
    pub eta: Option<f64>,
    pub max_iterations: usize,
    pub phase_horizon: f64,
}

impl Default for LpSection {
    fn default() -> Self {
        Self {
            dt: 0.1,
            tol_fixed_point: 1e-5,
            delta: 0.05,
            delta0: 0.01,
            q0: 0.5,
            eta: None,
            max_iterations: 40,
            phase_horizon: 100.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub shifts: Vec<f64>,
    pub draws: usize,
    /// `|z0|_β` of the manifold samples.
    pub size: f64,
    /// Forward-invariance time.
    pub t0: f64,
    pub tangency: Vec<f64>,
    pub lipschitz_shifts: Vec<f64>,
    pub projection_shifts: Vec<f64>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            shifts: vec![-0.2, 0.0, 0.2],
            draws: 3,
            size: 0.01,
            t0: 5.0,
            tangency: vec![0.01, 0.005, 0.0025, 0.00125],
            lipschitz_shifts: vec![0.0, 0.025, 0.05, 0.1],
            projection_shifts: vec![0.025, 0.05, 0.1],
        }
    }
}

/// A parsed experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    #[serde(default)]
    pub weight: WeightSection,
    #[serde(default)]
    pub front: FrontSection,
    #[serde(default)]
    pub rates: RatesSection,
    #[serde(default)]
    pub evolve: EvolveSection,
    #[serde(default)]
    pub lp: LpSection,
    #[serde(default)]
    pub samples: SampleSection,
    pub experiments: Vec<Experiment>,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn config_error(path: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_error("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let reason = e.into_inner().message().to_string();
            config_error(&path, reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() {
            return Err(config_error("experiments", "at least one experiment is required"));
        }
        let positive = [
            ("grid.half_width", self.grid.half_width),
            ("weight.x0", self.weight.x0),
            ("evolve.dt", self.evolve.dt),
            ("evolve.t_final", self.evolve.t_final),
            ("lp.dt", self.lp.dt),
            ("lp.tol_fixed_point", self.lp.tol_fixed_point),
            ("lp.delta", self.lp.delta),
            ("lp.delta0", self.lp.delta0),
            ("lp.q0", self.lp.q0),
            ("lp.phase_horizon", self.lp.phase_horizon),
            ("samples.size", self.samples.size),
            ("samples.t0", self.samples.t0),
        ];
        for (path, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_error(path, format!("must be positive, got {v}")));
            }
        }
        if self.grid.nodes < 5 {
            return Err(config_error("grid.nodes", "need at least 5 nodes"));
        }
        if self.samples.shifts.iter().any(|q| q.abs() > self.lp.q0) {
            return Err(config_error("samples.shifts", "shifts must lie in [-q0, q0]"));
        }
        if self.samples.draws == 0 || self.evolve.samples == 0 {
            return Err(config_error("samples.draws", "sample counts must be positive"));
        }
        if self.samples.tangency.len() < 2 {
            return Err(config_error("samples.tangency", "need at least two sizes"));
        }
        if self.rates.policy == RatePolicy::Fixed {
            for (path, v) in [("rates.omega", self.rates.omega), ("rates.rho", self.rates.rho), ("rates.nu", self.rates.nu)] {
                if v.is_none() {
                    return Err(config_error(path, "required by the fixed rate policy"));
                }
            }
        }
        self.model_name()?;
        Ok(())
    }

    fn model_name(&self) -> Result<ModelName> {
        self.model.name.parse().map_err(|e: Error| config_error("model.name", e.to_string()))
    }

    /// The requested stages closed under their prerequisites.
    pub fn stages(&self) -> Vec<Experiment> {
        let last = self.experiments.iter().copied().max().unwrap_or(Experiment::Front);
        Experiment::ALL.iter().copied().filter(|e| *e <= last).collect()
    }
}

/// One pass/fail line of the run.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub stage: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub value: f64,
    pub threshold: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontSummary {
    pub c: f64,
    pub c_extrapolated: Option<f64>,
    pub omega_minus: f64,
    pub omega_plus: f64,
    pub residual: f64,
    pub newton_iterations: usize,
    pub alpha_minus: f64,
    pub alpha_plus: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionSummary {
    pub pi_of_zero_mode: f64,
    pub idempotence: f64,
    pub complement: f64,
    pub lipschitz_beta: Vec<f64>,
    pub lipschitz_alpha: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumSummary {
    #[serde(flatten)]
    pub decomposition: SpectralDecomposition,
    pub unweighted_ess_sup_real: f64,
    pub hypothesis_pass: bool,
    pub projections: ProjectionSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecaySummary {
    pub semigroup: SemigroupDecay,
    pub center_drift: f64,
    pub beta_bound: f64,
    pub limit: LimitSemigroupReport,
    pub nonlinearity: NonlinearityLadder,
    pub quadratic_slope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LpSummary {
    pub q: f64,
    pub phi_coeff: f64,
    pub contraction_factors: Vec<f64>,
    pub iterations: usize,
    pub norm: f64,
    pub fixed_point_residual: f64,
    pub duhamel_defect: f64,
    pub tail_bound: f64,
    pub tail_flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifoldSummary {
    pub config: LpConfig,
    pub solutions: Vec<LpSummary>,
    pub tangency: TangencyCheck,
    pub lipschitz_in_q: ShiftLipschitz,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoliationRow {
    pub sample_id: usize,
    pub q_true: f64,
    pub q_root_find: f64,
    pub q_asymptotic: f64,
    pub residual: f64,
    pub sign_changes: usize,
    pub unevaluated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub decay: Vec<DecayCheck>,
    pub invariance: Vec<InvarianceCheck>,
    pub equivalence: Vec<f64>,
}

/// Everything written to `summary.json`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Summary {
    pub model: String,
    pub params: Params,
    pub grid: Option<GridSection>,
    pub seed: u64,
    pub stages: Vec<Experiment>,
    pub front: Option<FrontSummary>,
    pub spectrum: Option<SpectrumSummary>,
    pub decay: Option<DecaySummary>,
    pub rates: Option<RateBundle>,
    pub manifold: Option<ManifoldSummary>,
    pub foliation: Vec<FoliationRow>,
    pub verify: Option<VerifySummary>,
    pub checks: Vec<Check>,
    pub runtime_seconds: Vec<(String, f64)>,
    pub pass: bool,
}

/// Outcome of `run`.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output: PathBuf,
    pub summary: Summary,
    pub pass: bool,
}

struct Manifold {
    leaves: Vec<Leaf>,
    lp: LpConfig,
}

struct Pipeline<'c> {
    cfg: &'c ExperimentConfig,
    out: PathBuf,
    model: ReactionModel,
    summary: Summary,
    manifest: Vec<(Experiment, String, Vec<String>)>,
    front: Option<FrontProfile>,
    weight: Option<Weight>,
    op: Option<WeightedOperator>,
    pair: Option<ProjectionPair>,
    spectral_nu: f64,
    rates: Option<RateBundle>,
    manifold: Option<Manifold>,
    points: Vec<(usize, f64, crate::grid::GridField)>,
}

fn seed_for(base: u64, stream: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

impl<'c> Pipeline<'c> {
    fn check(&mut self, stage: Experiment, name: &'static str, pass: bool, value: f64, threshold: impl Into<String>) {
        self.summary.checks.push(Check {
            stage: stage.name(),
            name,
            pass,
            value,
            threshold: threshold.into(),
        });
    }

    fn write(&self, name: &str, body: &str) -> Result<String> {
        fs::write(self.out.join(name), body)?;
        Ok(name.to_string())
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = String::new();
        for stage in self.cfg.stages() {
            match self.manifest.iter().find(|(e, _, _)| *e == stage) {
                Some((_, status, files)) => {
                    let _ = writeln!(text, "{} {} {}", stage.name(), status, files.join(" "));
                }
                None => {
                    let _ = writeln!(text, "{} pending", stage.name());
                }
            }
        }
        fs::write(self.out.join("MANIFEST"), text)?;
        Ok(())
    }

    fn front(&self) -> &FrontProfile {
        self.front.as_ref().expect("front stage ran")
    }

    fn run_front(&mut self) -> Result<Vec<String>> {
        let g = SpatialGrid::new(self.cfg.grid.half_width, self.cfg.grid.nodes)?;
        let guess = model_guess(&self.model, &g, self.cfg.front.steepness);
        let profile = solve_front(
            &self.model,
            &g,
            &guess,
            self.cfg.front.speed_guess,
            Phase::default(),
            &FrontOptions::default(),
        )?;
        let ws = self.cfg.weight;
        let weight = make_weight(
            (
                ws.alpha_minus.unwrap_or(-0.5 * profile.omega_minus),
                ws.alpha_plus.unwrap_or(0.5 * profile.omega_plus),
            ),
            ws.x0,
        )?;
        self.check(Experiment::Front, "front_residual", profile.residual <= 1e-10, profile.residual, "<= 1e-10");
        self.summary.front = Some(FrontSummary {
            c: profile.c,
            c_extrapolated: profile.c_extrapolated,
            omega_minus: profile.omega_minus,
            omega_plus: profile.omega_plus,
            residual: profile.residual,
            newton_iterations: profile.newton_iterations,
            alpha_minus: weight.alpha_minus,
            alpha_plus: weight.alpha_plus,
        });
        let file = self.write("front.csv", &profile.y0.to_csv(&g))?;
        self.front = Some(profile);
        self.weight = Some(weight);
        Ok(vec![file])
    }

    fn run_spectrum(&mut self) -> Result<Vec<String>> {
        let front = self.front().clone();
        let weight = self.weight.expect("front stage ran");
        let op = assemble_linearization(&self.model, &front, &weight)?;
        let k_grid = default_k_grid();
        let ess = op.essential_spectrum(&k_grid);
        let dec = point_spectrum(&op, 6, &default_shift_options())?;
        let unweighted = assemble_unchecked(&self.model, &front, &Weight::unit())?.essential_spectrum(&k_grid);
        let pair = adjoint_zero_mode(&op)?;
        let norms = Norms::new(&front.grid, &weight, NormKind::Sup);

        let pi_one = pair.pi(&pair.yqprime);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.cfg.seed, 1));
        let (mut idem, mut compl) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let y = random_bumps(&front.grid, self.model.n, &mut rng, 10.0, 4);
            let (pc, ps, _) = apply_projections(&pair, &y);
            let scale = y.max_abs().max(1e-300);
            idem = idem.max(pair.center(&pc).sub(&pc).max_abs() / scale);
            compl = compl.max(pc.axpy(1.0, &ps).sub(&y).max_abs() / scale).max(pair.center(&ps).max_abs() / scale);
        }
        let mut lip_beta = Vec::new();
        let mut lip_alpha = Vec::new();
        let opts = FrontOptions {
            transport: front.transport,
            richardson: false,
            ..FrontOptions::default()
        };
        for (k, &dq) in self.cfg.samples.projection_shifts.iter().enumerate() {
            let shifted = shift_front(&self.model, &front, dq, &opts)?;
            let pq = adjoint_zero_mode(&assemble_linearization(&self.model, &shifted, &weight)?)?;
            let r = projection_lipschitz_check(&pq, &pair, &norms, 100, seed_for(self.cfg.seed, 10 + k as u64));
            lip_beta.push(r.beta);
            lip_alpha.push(r.alpha);
        }
        let spread = |v: &[f64]| {
            let hi = v.iter().copied().fold(0.0, f64::max);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        };

        let s = Experiment::Spectrum;
        self.check(s, "essential_spectrum_negative", ess.ess_sup_real < 0.0, ess.ess_sup_real, "< 0");
        let zero_ok = dec.lambda0.norm() <= 1e-4 * dec.nu;
        self.check(s, "zero_eigenvalue", zero_ok, dec.lambda0.norm(), format!("<= 1e-4 nu = {:.3e}", 1e-4 * dec.nu));
        self.check(s, "zero_mode_cosine", dec.cosine >= 0.999, dec.cosine, ">= 0.999");
        self.check(s, "simple_zero_eigenvalue", dec.hypothesis_b, dec.separation, "simple, isolated");
        self.check(
            s,
            "unweighted_touches_axis",
            unweighted.ess_sup_real.abs() <= 1e-8,
            unweighted.ess_sup_real,
            "|sup Re| <= 1e-8",
        );
        self.check(s, "projection_normalized", (pi_one - 1.0).abs() <= 1e-10, pi_one, "= 1 within 1e-10");
        self.check(s, "projection_idempotent", idem <= 1e-10, idem, "<= 1e-10");
        self.check(s, "projection_complementary", compl <= 1e-10, compl, "<= 1e-10");
        let sb = spread(&lip_beta).max(spread(&lip_alpha));
        self.check(s, "projection_lipschitz", sb < 2.0, sb, "variation < 2");

        let hypothesis_pass = dec.hypothesis_a && dec.hypothesis_b && ess.pass;
        self.spectral_nu = dec.nu;
        self.summary.spectrum = Some(SpectrumSummary {
            decomposition: dec,
            unweighted_ess_sup_real: unweighted.ess_sup_real,
            hypothesis_pass,
            projections: ProjectionSummary {
                pi_of_zero_mode: pi_one,
                idempotence: idem,
                complement: compl,
                lipschitz_beta: lip_beta,
                lipschitz_alpha: lip_alpha,
            },
        });
        let file = self.write("curves.csv", &ess.to_csv())?;
        self.op = Some(op);
        self.pair = Some(pair);
        Ok(vec![file])
    }

    fn run_decay(&mut self) -> Result<Vec<String>> {
        let ev = self.cfg.evolve;
        let front = self.front().clone();
        let weight = self.weight.expect("front stage ran");
        let op = self.op.as_ref().expect("spectrum stage ran");
        let pair = self.pair.as_ref().expect("spectrum stage ran");
        let norms = Norms::new(&front.grid, &weight, NormKind::Sup);
        let seed = self.cfg.seed;

        let semigroup = semigroup_decay_rate(op, pair, &norms, ev.t_final, ev.dt, ev.samples, seed_for(seed, 2))?;
        let center = propagate_linear(op, &pair.yqprime, ev.t_final, ev.dt)?;
        let center_drift = center.last().sub(&pair.yqprime).max_abs() / pair.yqprime.max_abs();
        let beta_bound = semigroup_bound(op, &norms, ev.t_final, ev.dt, ev.samples, seed_for(seed, 3))?;
        let limit = limit_semigroup_check(&self.model, &front, &weight, ev.t_final, ev.dt, ev.samples, seed_for(seed, 4))?;
        let nl = Nonlinearity::new(&self.model, &front);
        let nonlinearity = nonlinearity_ladder(
            &nl,
            &norms,
            self.model.n1,
            &[0.1, 0.05, 0.025],
            ev.nonlinearity_samples,
            seed_for(seed, 5),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 6));
        let probe = random_bumps(&front.grid, self.model.n, &mut rng, 10.0, 4);
        let quadratic_slope = quadratic_scaling_slope(&nl, &norms, &probe, &[1e-2, 5e-3, 2.5e-3, 1.25e-3]);

        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, 7));
        let sample = pair.stable(&random_bumps(&front.grid, self.model.n, &mut rng, 10.0, 4));
        let sample = sample.scaled(1.0 / norms.alpha(&sample));
        let traj = propagate_linear(op, &sample, ev.t_final, ev.dt)?;
        let file = self.write("trajectory.csv", &traj.to_csv(&norms, self.model.n1))?;

        let d = Experiment::Decay;
        let nu = self.spectral_nu;
        self.check(d, "semigroup_rate", semigroup.nu_hat >= 0.9 * nu, semigroup.nu_hat, format!(">= 0.9 nu = {:.4}", 0.9 * nu));
        let h = front.grid.h;
        let drift_tol = (h * h + ev.dt * ev.dt) * ev.t_final;
        self.check(d, "center_mode_stationary", center_drift <= drift_tol, center_drift, format!("<= {drift_tol:.3e}"));
        self.check(d, "semigroup_bounded", beta_bound.is_finite(), beta_bound, "finite");
        self.check(d, "limit_semigroups", limit.pass, limit.s2_rate, "S1 <= 1.01, rho > 0, convolution < 1e-2");
        let var = nonlinearity.variation.iter().copied().fold(0.0, f64::max);
        self.check(d, "nonlinearity_ratios", nonlinearity.pass, var, "variation < 0.5");
        self.check(
            d,
            "quadratic_remainder",
            (1.9..=2.1).contains(&quadratic_slope),
            quadratic_slope,
            "in [1.9, 2.1]",
        );

        let rates = match self.cfg.rates.policy {
            RatePolicy::Measured => RateBundle::from_measured(limit.s2_rate, semigroup.nu_hat)?,
            RatePolicy::Fixed => RateBundle::new(
                self.cfg.rates.omega.unwrap_or(0.0),
                self.cfg.rates.rho.unwrap_or(0.0),
                self.cfg.rates.nu.unwrap_or(0.0),
            )?,
        };
        self.rates = Some(rates);
        self.summary.rates = Some(rates);
        self.summary.decay = Some(DecaySummary {
            semigroup,
            center_drift,
            beta_bound,
            limit,
            nonlinearity,
            quadratic_slope,
        });
        Ok(vec![file])
    }

    fn lp_config(&self) -> Result<LpConfig> {
        let l = self.cfg.lp;
        let mut cfg = LpConfig::from_rates(self.rates.expect("decay stage ran"), l.dt, l.tol_fixed_point)?;
        cfg.delta = l.delta;
        cfg.delta0 = l.delta0;
        cfg.q0 = l.q0;
        cfg.eta = l.eta.unwrap_or(0.5 * l.delta0);
        cfg.max_iterations = l.max_iterations;
        cfg.phase_horizon = l.phase_horizon;
        cfg.validate()?;
        Ok(cfg)
    }

    fn run_manifold(&mut self) -> Result<Vec<String>> {
        let lp = self.lp_config()?;
        let front = self.front().clone();
        let weight = self.weight.expect("front stage ran");
        let seed = self.cfg.seed;
        let samples = self.cfg.samples.clone();
        let mut leaves = Vec::new();
        let mut solutions = Vec::new();
        let mut files = Vec::new();
        for (k, &q) in samples.shifts.iter().enumerate() {
            let leaf = Leaf::new(&self.model, &front, &weight, q, lp.dt)?;
            let z0 = random_stable_data(&leaf, samples.size, seed_for(seed, 100 + k as u64));
            let sol = lp_fixed_point(&leaf, &z0, &lp, None)?;
            let defect = duhamel_defect(&leaf, &sol, &lp)?;
            if k == 0 {
                let body = sol.y.to_csv(&leaf.norms, self.model.n1);
                files.push(self.write("manifold_trajectory.csv", &body)?);
            }
            solutions.push(LpSummary {
                q,
                phi_coeff: sol.phi_coeff,
                contraction_factors: sol.contraction_factors.clone(),
                iterations: sol.iterations,
                norm: sol.norm,
                fixed_point_residual: sol.fixed_point_residual,
                duhamel_defect: defect,
                tail_bound: sol.tail_bound,
                tail_flagged: sol.tail_flagged,
            });
            leaves.push(leaf);
        }
        let origin = Leaf::new(&self.model, &front, &weight, 0.0, lp.dt)?;
        let z_unit = random_stable_data(&origin, 1.0, seed_for(seed, 200));
        let tangency = tangency_check(&origin, &z_unit, &samples.tangency, &lp)?;
        let z_base = random_stable_data(&origin, samples.size, seed_for(seed, 201));
        let lipschitz = lipschitz_in_q_check(&self.model, &front, &weight, &z_base, &samples.lipschitz_shifts, &lp)?;

        let m = Experiment::Manifold;
        let worst_factor = solutions
            .iter()
            .flat_map(|s| s.contraction_factors.iter().copied())
            .fold(0.0, f64::max);
        self.check(m, "contraction", worst_factor < 0.5, worst_factor, "< 0.5");
        let worst_defect = solutions.iter().map(|s| s.duhamel_defect).fold(0.0, f64::max);
        self.check(m, "duhamel_identity", worst_defect <= 1e-4, worst_defect, "<= 1e-4");
        self.check(m, "phi_tangency", (1.8..=2.2).contains(&tangency.slope), tangency.slope, "in [1.8, 2.2]");
        self.check(m, "contraction_scales_with_size", tangency.factor_slope > 0.0, tangency.factor_slope, "> 0");
        self.check(m, "phi_lipschitz_in_q", lipschitz.bounded, lipschitz.variation, "variation < 2");
        let flagged = solutions.iter().filter(|s| s.tail_flagged).count();
        self.check(m, "tail_extrapolation", flagged == 0, flagged as f64, "no flagged tails");

        self.summary.manifold = Some(ManifoldSummary {
            config: lp,
            solutions,
            tangency,
            lipschitz_in_q: lipschitz,
        });
        self.manifold = Some(Manifold { leaves, lp });
        Ok(files)
    }

    fn run_foliate(&mut self) -> Result<Vec<String>> {
        let front = self.front().clone();
        let weight = self.weight.expect("front stage ran");
        let seed = self.cfg.seed;
        let samples = self.cfg.samples.clone();
        let manifold = self.manifold.as_ref().expect("manifold stage ran");
        let lp = manifold.lp;
        let foliator = Foliator::new(&self.model, &front, &weight, &lp)?;
        let mut rows = Vec::new();
        let mut points = Vec::new();
        let mut id = 0;
        for (k, leaf) in manifold.leaves.iter().enumerate() {
            for d in 0..samples.draws {
                let z0 = random_stable_data(leaf, samples.size, seed_for(seed, 1000 + (k * samples.draws + d) as u64));
                let sol = lp_fixed_point(leaf, &z0, &lp, None)?;
                let point = manifold_point(leaf, &sol);
                let root = foliator.foliate(&point, FoliationMethod::RootFind)?;
                let phase = foliator.foliate(&point, FoliationMethod::AsymptoticPhase)?;
                rows.push(FoliationRow {
                    sample_id: id,
                    q_true: leaf.q,
                    q_root_find: root.q_star,
                    q_asymptotic: phase.q_star,
                    residual: root.residual,
                    sign_changes: root.sign_changes,
                    unevaluated: root.scan.iter().filter(|s| s.g.is_none()).count(),
                });
                points.push((k, leaf.q, point));
                id += 1;
            }
        }
        let f = Experiment::Foliate;
        let recover = rows.iter().map(|r| (r.q_root_find - r.q_true).abs()).fold(0.0, f64::max);
        self.check(f, "root_find_recovers_shift", recover <= 1e-3, recover, "<= 1e-3");
        let agree = rows.iter().map(|r| (r.q_root_find - r.q_asymptotic).abs()).fold(0.0, f64::max);
        self.check(f, "methods_agree", agree <= 5e-3, agree, "<= 5e-3");
        let unique = rows.iter().all(|r| r.sign_changes == 1 && r.unevaluated == 0);
        let worst = rows.iter().map(|r| r.sign_changes).max().unwrap_or(0);
        self.check(f, "unique_sign_change", unique, worst as f64, "exactly one, full scan");

        let mut csv = String::from("sample_id,q_true,q_root_find,q_asymptotic,residual\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{:.6},{:.12e},{:.12e},{:.6e}",
                r.sample_id, r.q_true, r.q_root_find, r.q_asymptotic, r.residual
            );
        }
        self.summary.foliation = rows;
        self.points = points;
        Ok(vec![self.write("foliation.csv", &csv)?])
    }

    fn run_verify(&mut self) -> Result<Vec<String>> {
        let ev = self.cfg.evolve;
        let t0 = self.cfg.samples.t0;
        let manifold = self.manifold.as_ref().expect("manifold stage ran");
        let lp = manifold.lp;
        let omega = lp.rates.omega;
        let mut decay = Vec::new();
        let mut invariance = Vec::new();
        let mut equivalence = Vec::new();
        let mut seen = Vec::new();
        for (k, _, point) in &self.points {
            let leaf = &manifold.leaves[*k];
            decay.push(decay_check(leaf, point, omega, ev.t_final, ev.dt)?);
            if !seen.contains(k) {
                seen.push(*k);
                invariance.push(forward_invariance(leaf, point, t0, &lp)?);
                let z0 = leaf.pair.stable(&point.sub(&leaf.profile.y0));
                let sol = lp_fixed_point(leaf, &z0, &lp, None)?;
                equivalence.push(trajectory_equivalence(leaf, &sol, &lp)?);
            }
        }
        let mut csv = String::from("sample_id,q,data_norm,alpha_rate,u_constant,v_rate\n");
        for (i, d) in decay.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{},{:.6},{:.12e},{:.12e},{:.12e},{:.12e}",
                i, d.q, d.data_norm, d.alpha_rate, d.u_constant, d.v_rate
            );
        }
        let v = Experiment::Verify;
        let slowest = decay.iter().map(|d| d.alpha_rate.min(d.v_rate)).fold(f64::INFINITY, f64::min);
        self.check(v, "manifold_decay_rates", decay.iter().all(|d| d.alpha_rate >= omega && d.v_rate >= omega), slowest, format!(">= omega = {omega:.4}"));
        let cu = decay.iter().map(|d| d.u_constant).fold(0.0, f64::max);
        self.check(v, "u_component_bounded", cu < 20.0, cu, "< 20");
        let ratio = invariance.iter().map(|c| c.ratio).fold(0.0, f64::max);
        self.check(v, "forward_invariance", invariance.iter().all(|c| c.pass), ratio, "<= 10");
        let eq = equivalence.iter().copied().fold(0.0, f64::max);
        self.check(v, "trajectory_equivalence", eq <= 1e-3, eq, "<= 1e-3");
        self.summary.verify = Some(VerifySummary {
            decay,
            invariance,
            equivalence,
        });
        Ok(vec![self.write("decay.csv", &csv)?])
    }

    fn run_stage(&mut self, stage: Experiment) -> Result<Vec<String>> {
        match stage {
            Experiment::Front => self.run_front(),
            Experiment::Spectrum => self.run_spectrum(),
            Experiment::Decay => self.run_decay(),
            Experiment::Manifold => self.run_manifold(),
            Experiment::Foliate => self.run_foliate(),
            Experiment::Verify => self.run_verify(),
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.summary.pass = self.summary.checks.iter().all(|c| c.pass);
        let json = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(self.out.join("summary.json"), json)?;
        self.write_manifest()
    }
}

/// Runs the stages of `cfg` and writes the artifacts into `output`.
///
/// A stage that errors is recorded as failed in the MANIFEST together with
/// the summary of the stages before it, and the error is returned.
pub fn run_config(cfg: &ExperimentConfig, output: &Path) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(output)?;
    let model = builtin_model(cfg.model_name()?, &cfg.model.params).map_err(|e| match e {
        Error::InvalidParameter { name, reason } => config_error(&format!("model.params.{name}"), reason),
        other => other,
    })?;
    let mut p = Pipeline {
        cfg,
        out: output.to_path_buf(),
        model,
        summary: Summary {
            model: cfg.model.name.clone(),
            params: cfg.model.params.clone(),
            grid: Some(cfg.grid),
            seed: cfg.seed,
            stages: cfg.stages(),
            ..Summary::default()
        },
        manifest: Vec::new(),
        front: None,
        weight: None,
        op: None,
        pair: None,
        spectral_nu: 0.0,
        rates: None,
        manifold: None,
        points: Vec::new(),
    };
    for stage in cfg.stages() {
        let start = Instant::now();
        match p.run_stage(stage) {
            Ok(files) => {
                p.summary.runtime_seconds.push((stage.name().to_string(), start.elapsed().as_secs_f64()));
                p.manifest.push((stage, "complete".to_string(), files));
                p.write_manifest()?;
            }
            Err(e) => {
                p.manifest.push((stage, format!("failed: {e}"), Vec::new()));
                p.finish()?;
                return Err(e);
            }
        }
    }
    p.finish()?;
    let pass = p.summary.pass;
    Ok(RunReport {
        output: output.to_path_buf(),
        summary: p.summary,
        pass,
    })
}

/// Loads `path` and runs it; `output` overrides the configured directory,
/// which is otherwise resolved relative to the config file.
pub fn run(path: &Path, output: Option<&Path>) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(path)?;
    let dir = match output {
        Some(o) => o.to_path_buf(),
        None if cfg.output.is_absolute() => cfg.output.clone(),
        None => path.parent().unwrap_or_else(|| Path::new(".")).join(&cfg.output),
    };
    run_config(&cfg, &dir)
}

pub const TOPICS: [&str; 4] = ["config", "pipeline", "outputs", "models"];

const CONFIG_DOC: &str = "\
Experiment config (TOML)

seed = <u64>                        all random sampling derives from it (default 0)
output = \"<dir>\"                    relative to the config file
experiments = [\"front\" | \"spectrum\" | \"decay\" | \"manifold\" | \"foliate\" | \"verify\", ...]

[model]
name = \"gasless_combustion\" | \"exo_endo\"
params = { beta = 0.5 }             gasless: beta (required), epsilon (default 0)
                                    exo_endo: a2 (default 2), d2 d3 (default 0.1), sigma (default 0.5),
                                    a3 b2 b3 tau (default 1)

[grid]
half_width = <X>                    domain [-X, X]
nodes = <N>

[weight]                            optional
alpha_minus = <f64>                 default -omega_minus / 2; must satisfy 0 < alpha_minus < -omega_minus
alpha_plus = <f64>                  default omega_plus / 2; must satisfy 0 <= alpha_plus < omega_plus
x0 = <f64>                          blend half-width (default 5)

[front]                             optional
speed_guess = 0.5
steepness = 0.5

[rates]                             optional
policy = \"measured\" | \"fixed\"       measured: nu = nu_hat, rho = min(rho_hat, 0.75 nu_hat), omega = min(rho_hat, nu_hat) / 2
omega, rho, nu                      required by the fixed policy, 0 < omega < rho < nu

[evolve]                            optional
dt = 0.01, t_final = 50, samples = 5, nonlinearity_samples = 100

[lp]                                optional
dt = 0.1                            step of the fixed-point trajectories
tol_fixed_point = 1e-5              stop when the increment is below tol times the trajectory norm;
                                    the horizon is the smallest T with exp(-2 omega T) <= tol
delta = 0.05, delta0 = 0.01         trajectory-ball and data-ball radii
q0 = 0.5, eta = delta0 / 2          shift range and foliated radius
max_iterations = 40, phase_horizon = 100

[samples]                           optional
shifts = [-0.2, 0.0, 0.2], draws = 3, size = 0.01, t0 = 5
tangency = [0.01, 0.005, 0.0025, 0.00125]
lipschitz_shifts = [0.0, 0.025, 0.05, 0.1]
projection_shifts = [0.025, 0.05, 0.1]
";

const PIPELINE_DOC: &str = "\
front     Newton solve of the moving-frame profile, speed and tail rates
  -> spectrum  weighted linearization, essential curves, zero eigenvalue, projections
  -> decay     semigroup rates, limit semigroups, nonlinearity estimates, rates bundle
  -> manifold  Lyapunov-Perron fixed points, Duhamel identity, tangency, Lipschitz in q
  -> foliate   manifold points, root finding and asymptotic phase for every sample
  -> verify    decay of manifold points, forward invariance, trajectory equivalence

Requesting a stage runs every stage before it.
";

const OUTPUTS_DOC: &str = "\
summary.json               model, front, spectrum, decay, rates, manifold, foliation, verify, checks, pass
MANIFEST                   one line per stage: name, status, files
front.csv                  x, component_1, ..., component_n
curves.csv                 k, side, branch, re_lambda, im_lambda
trajectory.csv             t, norm_zero, norm_alpha, v_norm_zero (linear flow of stable data)
manifold_trajectory.csv    same columns for the first fixed point
foliation.csv              sample_id, q_true, q_root_find, q_asymptotic, residual
decay.csv                  sample_id, q, data_norm, alpha_rate, u_constant, v_rate

Exit status: 0 when every check passes, 1 when a check fails, 2 on errors.
";

const MODELS_DOC: &str = "\
gasless_combustion   u_t = u_xx + v g(u), v_t = eps v_xx - beta v g(u); parameters beta, epsilon
exo_endo             one temperature and two reactant fractions; parameters a2 a3 b2 b3 d2 d3 sigma tau
";

pub fn describe(topic: &str) -> Result<&'static str> {
    match topic {
        "config" => Ok(CONFIG_DOC),
        "pipeline" => Ok(PIPELINE_DOC),
        "outputs" => Ok(OUTPUTS_DOC),
        "models" => Ok(MODELS_DOC),
        other => Err(Error::param(
            "topic",
            format!("unknown topic `{other}`; valid topics: {}", TOPICS.join(", ")),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiments = ["spectrum"]
output = "out"
[model]
name = "gasless_combustion"
params = { beta = 0.5 }
[grid]
half_width = 30.0
nodes = 601
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.stages(), vec![Experiment::Front, Experiment::Spectrum]);
        assert_eq!(cfg.lp.tol_fixed_point, 1e-5);
        assert_eq!(cfg.samples.shifts, vec![-0.2, 0.0, 0.2]);
    }

    #[test]
    fn schema_errors_carry_field_paths() {
        let bad = MINIMAL.replace("nodes = 601", "nodes = \"many\"");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "grid.nodes"),
            other => panic!("{other:?}"),
        }
        let unknown = MINIMAL.replace("[grid]", "[grid]\nspacing = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::Config { .. })));
        let missing = MINIMAL.replace("experiments = [\"spectrum\"]\n", "");
        match ExperimentConfig::from_toml(&missing) {
            Err(Error::Config { reason, .. }) => assert!(reason.contains("experiments"), "{reason}"),
            other => panic!("{other:?}"),
        }
        let stage = MINIMAL.replace("\"spectrum\"", "\"bogus\"");
        assert!(matches!(ExperimentConfig::from_toml(&stage), Err(Error::Config { .. })));
    }

    #[test]
    fn fixed_rates_need_all_three_values() {
        let cfg = MINIMAL.to_string() + "[rates]\npolicy = \"fixed\"\nomega = 0.05\n";
        match ExperimentConfig::from_toml(&cfg) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "rates.rho"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_model_parameter_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(&MINIMAL.replace("params = { beta = 0.5 }", "")).unwrap();
        match run_config(&cfg, dir.path()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.params.beta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn describe_topics() {
        assert!(describe("config").unwrap().contains("[lp]"));
        assert!(describe("pipeline").unwrap().contains("foliate"));
        let err = describe("bogus").unwrap_err().to_string();
        for t in TOPICS {
            assert!(err.contains(t));
        }
    }

    #[test]
    fn spectrum_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let report = run_config(&cfg, dir.path()).unwrap();
        assert!(report.pass, "{:?}", report.summary.checks);
        for f in ["summary.json", "MANIFEST", "front.csv", "curves.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let manifest = fs::read_to_string(dir.path().join("MANIFEST")).unwrap();
        assert!(manifest.starts_with("front complete front.csv\nspectrum complete curves.csv"));
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(curves.starts_with("k,side,branch,re_lambda,im_lambda\n"));
    }

    #[test]
    fn inadmissible_weight_names_the_condition() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.to_string() + "[weight]\nalpha_minus = 5.0\n";
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let err = run_config(&cfg, dir.path()).unwrap_err().to_string();
        assert!(err.contains("0 < alpha_minus < -omega_minus"), "{err}");
        let manifest = fs::read_to_string(dir.path().join("MANIFEST")).unwrap();
        assert!(manifest.contains("front complete") && manifest.contains("spectrum failed"));
    }
}
