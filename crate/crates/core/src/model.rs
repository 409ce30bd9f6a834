//! Reaction-diffusion models with the product structure `R(U, 0) = (A₁U, 0)`.
//!
//! Every model is stored in shifted coordinates: the left end state is the
//! origin and the components are ordered `(U, V)` with `U ∈ ℝ^{n1}`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Params = BTreeMap<String, f64>;

/// Reaction term and its Jacobian (row-major `n × n`).
pub trait Reaction: Send + Sync {
    fn eval(&self, y: &[f64], out: &mut [f64]);
    fn jacobian(&self, y: &[f64], out: &mut [f64]);
}

/// `e^{-b/u}` for `u > 0`, zero otherwise, with an underflow guard.
#[inline]
pub fn ignition(u: f64, b: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let e = -b / u;
    if e < f64::MIN_POSITIVE.ln() {
        0.0
    } else {
        e.exp()
    }
}

/// Derivative of [`ignition`] in `u`.
#[inline]
pub fn ignition_prime(u: f64, b: f64) -> f64 {
    let g = ignition(u, b);
    if g == 0.0 {
        0.0
    } else {
        g * b / (u * u)
    }
}

struct Gasless {
    beta: f64,
    u_minus: f64,
}

impl Reaction for Gasless {
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        let g = ignition(y[0] + self.u_minus, 1.0);
        out[0] = y[1] * g;
        out[1] = -self.beta * y[1] * g;
    }

    fn jacobian(&self, y: &[f64], out: &mut [f64]) {
        let u = y[0] + self.u_minus;
        let g = ignition(u, 1.0);
        let dg = ignition_prime(u, 1.0);
        out[0] = y[1] * dg;
        out[1] = g;
        out[2] = -self.beta * y[1] * dg;
        out[3] = -self.beta * g;
    }
}

struct ExoEndo {
    a: [f64; 2],
    b: [f64; 2],
    sigma: f64,
    tau: f64,
    u_minus: f64,
}

impl Reaction for ExoEndo {
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        let u = y[0] + self.u_minus;
        let f2 = self.a[0] * ignition(u, self.b[0]);
        let f3 = self.a[1] * ignition(u, self.b[1]);
        out[0] = y[1] * f2 - self.sigma * y[2] * f3;
        out[1] = -y[1] * f2;
        out[2] = -self.tau * y[2] * f3;
    }

    fn jacobian(&self, y: &[f64], out: &mut [f64]) {
        let u = y[0] + self.u_minus;
        let f2 = self.a[0] * ignition(u, self.b[0]);
        let f3 = self.a[1] * ignition(u, self.b[1]);
        let d2 = self.a[0] * ignition_prime(u, self.b[0]);
        let d3 = self.a[1] * ignition_prime(u, self.b[1]);
        out[0] = y[1] * d2 - self.sigma * y[2] * d3;
        out[1] = f2;
        out[2] = -self.sigma * f3;
        out[3] = -y[1] * d2;
        out[4] = -f2;
        out[5] = 0.0;
        out[6] = -self.tau * y[2] * d3;
        out[7] = 0.0;
        out[8] = -self.tau * f3;
    }
}

type VecFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

struct UserReaction {
    reaction: VecFn,
    jacobian: VecFn,
}

impl Reaction for UserReaction {
    fn eval(&self, y: &[f64], out: &mut [f64]) {
        (self.reaction)(y, out)
    }
    fn jacobian(&self, y: &[f64], out: &mut [f64]) {
        (self.jacobian)(y, out)
    }
}

/// Named model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    GaslessCombustion,
    ExoEndo,
    CustomSpec,
}

impl FromStr for ModelName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gasless_combustion" => Ok(Self::GaslessCombustion),
            "exo_endo" => Ok(Self::ExoEndo),
            "custom_spec" => Ok(Self::CustomSpec),
            other => Err(Error::param(
                "model",
                format!("unknown model `{other}` (expected gasless_combustion, exo_endo or custom_spec)"),
            )),
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaslessCombustion => "gasless_combustion",
            Self::ExoEndo => "exo_endo",
            Self::CustomSpec => "custom_spec",
        })
    }
}

/// A user-supplied model bundle in already shifted coordinates.
pub struct CustomSpec {
    pub n1: usize,
    pub n2: usize,
    pub diffusion: Vec<f64>,
    /// `n1 × n1`, row-major.
    pub a1: Vec<f64>,
    /// Right end state; the left one is the origin.
    pub end_plus: Vec<f64>,
    pub reaction: VecFn,
    pub jacobian: VecFn,
}

/// An immutable reaction-diffusion model `Y_t = D Y_xx + R(Y)`.
#[derive(Clone)]
pub struct ReactionModel {
    pub name: ModelName,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub diffusion: Vec<f64>,
    /// `n1 × n1`, row-major.
    pub a1: Vec<f64>,
    pub params: Params,
    /// Unshifted left end state; the shift subtracted from every state.
    pub origin: Vec<f64>,
    pub end_minus: Vec<f64>,
    pub end_plus: Vec<f64>,
    reaction: Arc<dyn Reaction>,
}

impl fmt::Debug for ReactionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReactionModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("n1", &self.n1)
            .field("diffusion", &self.diffusion)
            .field("params", &self.params)
            .field("end_plus", &self.end_plus)
            .finish()
    }
}

fn positive(params: &Params, key: &str, default: Option<f64>) -> Result<f64> {
    let v = match (params.get(key), default) {
        (Some(&v), _) => v,
        (None, Some(d)) => d,
        (None, None) => return Err(Error::param(key, "missing required parameter")),
    };
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::param(key, format!("must be positive, got {v}")));
    }
    Ok(v)
}

fn reject_unknown(params: &Params, known: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !known.contains(&k.as_str()) {
            return Err(Error::param(k, format!("unknown parameter (expected one of {known:?})")));
        }
    }
    Ok(())
}

/// Builds a named model in shifted coordinates.
///
/// `gasless_combustion` needs `beta`; `epsilon` (fuel diffusion, default 0)
/// is optional. `exo_endo` takes `a2, a3, b2, b3, d2, d3, sigma, tau` with
/// defaults `a2 = 2`, `d2 = d3 = 0.1`, `sigma = 0.5` and 1 otherwise.
pub fn builtin_model(name: ModelName, params: &Params) -> Result<ReactionModel> {
    match name {
        ModelName::GaslessCombustion => {
            reject_unknown(params, &["beta", "epsilon"])?;
            let beta = positive(params, "beta", None)?;
            let epsilon = params.get("epsilon").copied().unwrap_or(0.0);
            if !(epsilon >= 0.0) || !epsilon.is_finite() {
                return Err(Error::param("epsilon", "must be nonnegative"));
            }
            let u_minus = 1.0 / beta;
            let mut stored = Params::new();
            stored.insert("beta".into(), beta);
            stored.insert("epsilon".into(), epsilon);
            Ok(ReactionModel {
                name,
                n: 2,
                n1: 1,
                n2: 1,
                diffusion: vec![1.0, epsilon],
                a1: vec![0.0],
                params: stored,
                origin: vec![u_minus, 0.0],
                end_minus: vec![0.0, 0.0],
                end_plus: vec![-u_minus, 1.0],
                reaction: Arc::new(Gasless { beta, u_minus }),
            })
        }
        ModelName::ExoEndo => {
            let keys = ["a2", "a3", "b2", "b3", "d2", "d3", "sigma", "tau"];
            reject_unknown(params, &keys)?;
            let mut stored = Params::new();
            for k in keys {
                let d = match k {
                    "a2" => 2.0,
                    "d2" | "d3" => 0.1,
                    "sigma" => 0.5,
                    _ => 1.0,
                };
                stored.insert(k.to_string(), positive(params, k, Some(d))?);
            }
            let (sigma, tau) = (stored["sigma"], stored["tau"]);
            let u_minus = 1.0 - sigma / tau;
            Ok(ReactionModel {
                name,
                n: 3,
                n1: 1,
                n2: 2,
                diffusion: vec![1.0, stored["d2"], stored["d3"]],
                a1: vec![0.0],
                origin: vec![u_minus, 0.0, 0.0],
                end_minus: vec![0.0; 3],
                end_plus: vec![-u_minus, 1.0, 1.0],
                reaction: Arc::new(ExoEndo {
                    a: [stored["a2"], stored["a3"]],
                    b: [stored["b2"], stored["b3"]],
                    sigma,
                    tau,
                    u_minus,
                }),
                params: stored,
            })
        }
        ModelName::CustomSpec => Err(Error::param(
            "model",
            "custom_spec needs a full (R, dR, A1, D) bundle; build it with custom_model",
        )),
    }
}

/// Builds a user model and validates its product structure.
pub fn custom_model(spec: CustomSpec) -> Result<ReactionModel> {
    let n = spec.n1 + spec.n2;
    if spec.n1 == 0 || n == 0 {
        return Err(Error::param("n1", "U block must be nonempty"));
    }
    if spec.diffusion.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: spec.diffusion.len(),
        });
    }
    if spec.diffusion.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::param("D", "diffusion coefficients must be nonnegative"));
    }
    if spec.a1.len() != spec.n1 * spec.n1 {
        return Err(Error::DimensionMismatch {
            expected: spec.n1 * spec.n1,
            got: spec.a1.len(),
        });
    }
    if spec.end_plus.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: spec.end_plus.len(),
        });
    }
    let model = ReactionModel {
        name: ModelName::CustomSpec,
        n,
        n1: spec.n1,
        n2: spec.n2,
        diffusion: spec.diffusion,
        a1: spec.a1,
        params: Params::new(),
        origin: vec![0.0; n],
        end_minus: vec![0.0; n],
        end_plus: spec.end_plus,
        reaction: Arc::new(UserReaction {
            reaction: spec.reaction,
            jacobian: spec.jacobian,
        }),
    };
    let report = check_product_structure(&model, 64, 0)?;
    if !report.pass {
        return Err(Error::ProductStructure {
            violation: report.max_violation,
        });
    }
    let r0 = model.eval(&vec![0.0; n]);
    if r0.iter().any(|v| v.abs() > 1e-12) {
        return Err(Error::param("R", "R(0) must vanish in shifted coordinates"));
    }
    let j0 = model.jacobian(&vec![0.0; n]);
    for i in 0..model.n1 {
        for j in 0..model.n1 {
            let a = model.a1[i * model.n1 + j];
            if (j0[i * n + j] - a).abs() > 1e-8 * (1.0 + a.abs()) {
                return Err(Error::param("A1", "A1 disagrees with the U-block of dR(0)"));
            }
        }
    }
    Ok(model)
}

impl ReactionModel {
    pub fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        self.reaction.eval(y, out)
    }

    pub fn jacobian_into(&self, y: &[f64], out: &mut [f64]) {
        self.reaction.jacobian(y, out)
    }

    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.reaction.eval(y, &mut out);
        out
    }

    pub fn jacobian(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        self.reaction.jacobian(y, &mut out);
        out
    }

    /// Unshifted to shifted coordinates.
    pub fn to_shifted(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.origin).map(|(a, b)| a - b).collect()
    }

    pub fn to_unshifted(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.origin).map(|(a, b)| a + b).collect()
    }

    /// Rebuilds a named model with one parameter replaced.
    pub fn with_param(&self, key: &str, value: f64) -> Result<Self> {
        let mut p = self.params.clone();
        p.insert(key.to_string(), value);
        builtin_model(self.name, &p)
    }

    /// Max-norm gap between `dR(y)` and centered differences of `R` with step `step`.
    pub fn jacobian_fd_error(&self, y: &[f64], step: f64) -> f64 {
        let n = self.n;
        let j = self.jacobian(y);
        let mut err = 0.0f64;
        let mut yp = y.to_vec();
        for k in 0..n {
            yp[k] = y[k] + step;
            let rp = self.eval(&yp);
            yp[k] = y[k] - step;
            let rm = self.eval(&yp);
            yp[k] = y[k];
            for i in 0..n {
                let fd = (rp[i] - rm[i]) / (2.0 * step);
                err = err.max((fd - j[i * n + k]).abs());
            }
        }
        err
    }
}

/// `R(Y)` for a model.
pub fn eval_reaction(model: &ReactionModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.n {
        return Err(Error::DimensionMismatch {
            expected: model.n,
            got: y.len(),
        });
    }
    Ok(model.eval(y))
}

/// `∂R(Y)`, row-major.
pub fn eval_jacobian(model: &ReactionModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.n {
        return Err(Error::DimensionMismatch {
            expected: model.n,
            got: y.len(),
        });
    }
    Ok(model.jacobian(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProductReport {
    pub max_violation: f64,
    pub pass: bool,
}

/// Samples `U` uniformly in `[-2, 2]^{n1}` and measures `|R(U, 0) - (A₁U, 0)|_∞`.
pub fn check_product_structure(model: &ReactionModel, sample_count: usize, seed: u64) -> Result<ProductReport> {
    if sample_count == 0 {
        return Err(Error::param("sample_count", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, n1) = (model.n, model.n1);
    let mut y = vec![0.0; n];
    let mut max_violation = 0.0f64;
    let mut pass = true;
    for _ in 0..sample_count {
        for v in y.iter_mut().take(n1) {
            *v = rng.gen_range(-2.0..2.0);
        }
        let r = model.eval(&y);
        let mut a1u_norm = 0.0f64;
        let mut violation = 0.0f64;
        for i in 0..n {
            let target = if i < n1 {
                (0..n1).map(|j| model.a1[i * n1 + j] * y[j]).sum::<f64>()
            } else {
                0.0
            };
            a1u_norm = a1u_norm.max(target.abs());
            violation = violation.max((r[i] - target).abs());
        }
        if !(violation <= 1e-12 * (1.0 + a1u_norm)) {
            pass = false;
        }
        max_violation = max_violation.max(violation);
    }
    Ok(ProductReport { max_violation, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gasless(beta: f64) -> ReactionModel {
        let mut p = Params::new();
        p.insert("beta".into(), beta);
        builtin_model(ModelName::GaslessCombustion, &p).unwrap()
    }

    fn exo_endo(extra: &[(&str, f64)]) -> ReactionModel {
        let mut p = Params::new();
        for (k, v) in extra {
            p.insert(k.to_string(), *v);
        }
        builtin_model(ModelName::ExoEndo, &p).unwrap()
    }

    #[test]
    fn gasless_end_states() {
        let m = gasless(0.5);
        assert_eq!(m.origin, vec![2.0, 0.0]);
        assert_eq!(m.to_unshifted(&m.end_plus), vec![0.0, 1.0]);
        assert_eq!(m.diffusion, vec![1.0, 0.0]);
        assert_eq!((m.n, m.n1, m.n2), (2, 1, 1));
    }

    #[test]
    fn exo_endo_left_state_when_sigma_equals_tau() {
        let m = exo_endo(&[("sigma", 0.7), ("tau", 0.7)]);
        assert_eq!(m.origin, vec![0.0, 0.0, 0.0]);
        let m = exo_endo(&[]);
        assert_eq!(m.origin, vec![0.5, 0.0, 0.0]);
        assert_eq!(m.to_unshifted(&m.end_plus), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut p = Params::new();
        p.insert("beta".into(), -1.0);
        assert!(builtin_model(ModelName::GaslessCombustion, &p).is_err());
        assert!(builtin_model(ModelName::GaslessCombustion, &Params::new()).is_err());
        let mut p = Params::new();
        p.insert("tau".into(), 0.0);
        assert!(builtin_model(ModelName::ExoEndo, &p).is_err());
        let mut p = Params::new();
        p.insert("gamma".into(), 1.0);
        assert!(builtin_model(ModelName::ExoEndo, &p).is_err());
        assert!(builtin_model(ModelName::CustomSpec, &Params::new()).is_err());
    }

    #[test]
    fn gasless_reaction_values() {
        let m = gasless(0.5);
        assert_eq!(m.eval(&m.to_shifted(&[5.0, 0.0])), vec![0.0, 0.0]);
        let r = m.eval(&m.to_shifted(&[1.0, 1.0]));
        let e = (-1.0f64).exp();
        assert_relative_eq!(r[0], e, max_relative = 1e-15);
        assert_relative_eq!(r[1], -0.5 * e, max_relative = 1e-15);
        assert_eq!(m.eval(&m.to_shifted(&[-3.0, 7.0])), vec![0.0, 0.0]);
        assert_eq!(m.eval(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn jacobians_vanish_at_cold_state() {
        let m = gasless(0.5);
        assert!(m.jacobian(&m.end_plus).iter().all(|v| *v == 0.0));
        let m = exo_endo(&[]);
        assert!(m.jacobian(&m.end_plus).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smooth_ignition() {
        for m in [gasless(0.5), exo_endo(&[])] {
            let mut y = m.end_plus.clone();
            y[0] += 1e-6;
            assert!(m.jacobian(&y).iter().all(|v| v.abs() < 1e-6));
        }
        assert_eq!(ignition(1e-300, 1.0), 0.0);
        assert_eq!(ignition_prime(-1.0, 1.0), 0.0);
    }

    #[test]
    fn product_structure_builtins() {
        let r = check_product_structure(&gasless(0.5), 200, 1).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_violation, 0.0);
        assert!(check_product_structure(&exo_endo(&[]), 200, 1).unwrap().pass);
    }

    fn square_spec() -> CustomSpec {
        CustomSpec {
            n1: 1,
            n2: 1,
            diffusion: vec![1.0, 1.0],
            a1: vec![0.0],
            end_plus: vec![1.0, 1.0],
            reaction: Box::new(|y, out| {
                out[0] = y[0] * y[0];
                out[1] = 0.0;
            }),
            jacobian: Box::new(|y, out| {
                out[0] = 2.0 * y[0];
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = 0.0;
            }),
        }
    }

    #[test]
    fn custom_violation_rejected() {
        match custom_model(square_spec()) {
            Err(Error::ProductStructure { violation }) => assert!(violation > 0.0),
            other => panic!("expected product-structure error, got {other:?}"),
        }
    }

    #[test]
    fn custom_bilinear_accepted() {
        let spec = CustomSpec {
            n1: 1,
            n2: 1,
            diffusion: vec![1.0, 0.5],
            a1: vec![-0.25],
            end_plus: vec![1.0, 1.0],
            reaction: Box::new(|y, out| {
                out[0] = -0.25 * y[0] + y[0] * y[1];
                out[1] = -y[1] * (1.0 + y[0]);
            }),
            jacobian: Box::new(|y, out| {
                out[0] = -0.25 + y[1];
                out[1] = y[0];
                out[2] = -y[1];
                out[3] = -(1.0 + y[0]);
            }),
        };
        let m = custom_model(spec).unwrap();
        assert!(check_product_structure(&m, 50, 3).unwrap().pass);
        assert!(m.jacobian_fd_error(&[0.3, -0.7], 1e-5) < 1e-8);
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(u in -3.0f64..1.0, v in -1.0f64..2.0, w in -1.0f64..2.0) {
            let g = gasless(0.5);
            let y = [u, v];
            // Centered differences have O(step²) error with a model-dependent constant.
            let e1 = g.jacobian_fd_error(&y, 1e-3);
            prop_assert!(e1 <= 50.0 * 1e-6, "gasless fd error {e1}");
            let m = exo_endo(&[]);
            let y = [u.max(-1.0), v, w];
            let e2 = m.jacobian_fd_error(&y, 1e-3);
            prop_assert!(e2 <= 50.0 * 1e-6, "exo_endo fd error {e2}");
        }

        #[test]
        fn product_structure_exact(u in -5.0f64..5.0) {
            for m in [gasless(0.3), exo_endo(&[("sigma", 0.2)])] {
                let mut y = vec![0.0; m.n];
                y[0] = u;
                let r = m.eval(&y);
                prop_assert!(r.iter().all(|v| *v == 0.0));
            }
        }
    }
}
