//! Property tests of the structural invariants on a coarse gasless front.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frontlab::evolve::{eval_fq, propagate_linear, FqPath, RateBundle};
use frontlab::front::{interpolate_at, model_guess, solve_front, FrontOptions, FrontProfile, Phase};
use frontlab::grid::{make_weight, random_bumps, GridField, NormKind, Norms, SpatialGrid, Weight};
use frontlab::manifold::{lp_fixed_point, random_stable_data, Leaf, LpConfig};
use frontlab::model::{builtin_model, ModelName, Params, ReactionModel};

struct Fixture {
    model: ReactionModel,
    front: FrontProfile,
    weight: Weight,
    leaf: Leaf,
    lp: LpConfig,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut p = Params::new();
        p.insert("beta".into(), 0.5);
        let model = builtin_model(ModelName::GaslessCombustion, &p).unwrap();
        let g = SpatialGrid::new(30.0, 601).unwrap();
        let guess = model_guess(&model, &g, 0.5);
        let front = solve_front(&model, &g, &guess, 0.5, Phase::default(), &FrontOptions::default()).unwrap();
        let weight = make_weight((-0.5 * front.omega_minus, 0.5 * front.omega_plus), 5.0).unwrap();
        let leaf = Leaf::new(&model, &front, &weight, 0.0, 0.1).unwrap();
        let mut lp = LpConfig::from_rates(RateBundle::new(0.06, 0.09, 0.12).unwrap(), 0.1, 1e-5).unwrap();
        lp.delta0 = 0.3;
        lp.delta = 0.5;
        Fixture {
            model,
            front,
            weight,
            leaf,
            lp,
        }
    })
}

fn bumps(seed: u64) -> GridField {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_bumps(&f.front.grid, f.model.n, &mut rng, 10.0, 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projections_are_complementary_idempotent_and_orthogonal(seed in any::<u64>()) {
        let pair = &fixture().leaf.pair;
        let y = bumps(seed);
        let scale = y.max_abs();
        let pc = pair.center(&y);
        let ps = pair.stable(&y);
        prop_assert!(pair.center(&pc).sub(&pc).max_abs() <= 1e-10 * scale);
        prop_assert!(pc.axpy(1.0, &ps).sub(&y).max_abs() <= 1e-10 * scale);
        prop_assert!(pair.center(&ps).max_abs() <= 1e-10 * scale);
        prop_assert!(pair.stable(&pc).max_abs() <= 1e-10 * scale);
    }

    #[test]
    fn stable_projection_commutes_with_the_flow(seed in any::<u64>()) {
        let f = fixture();
        let (t, dt) = (2.0, 0.01);
        let y = bumps(seed);
        let a = propagate_linear(&f.leaf.op, &f.leaf.pair.stable(&y), t, dt).unwrap();
        let b = propagate_linear(&f.leaf.op, &y, t, dt).unwrap();
        let gap = f.leaf.pair.stable(b.last()).sub(a.last()).max_abs() / y.max_abs();
        let h = f.front.grid.h;
        prop_assert!(gap <= (h * h + dt * dt), "gap {gap:e}");
    }

    #[test]
    fn remainder_is_quadratic(seed in any::<u64>()) {
        let f = fixture();
        let y = bumps(seed);
        let big = eval_fq(&f.model, &f.front, &y.scaled(1e-2), FqPath::ClosedForm).max_abs();
        let small = eval_fq(&f.model, &f.front, &y.scaled(1e-3), FqPath::ClosedForm).max_abs();
        prop_assume!(big > 0.0);
        let slope = (big / small).log10();
        prop_assert!((1.9..=2.1).contains(&slope), "slope {slope}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fixed_points_are_lipschitz_in_the_data(seed in any::<u64>(), size in 0.002f64..0.02) {
        let f = fixture();
        let z = random_stable_data(&f.leaf, size, seed);
        let zbar = random_stable_data(&f.leaf, size, seed.wrapping_add(1));
        let a = lp_fixed_point(&f.leaf, &z, &f.lp, None).unwrap();
        let b = lp_fixed_point(&f.leaf, &zbar, &f.lp, None).unwrap();
        let times = f.lp.times();
        let omega = f.lp.rates.omega;
        let dist = f.leaf.path_distance(&times, &a.y.states, &b.y.states, omega);
        let data = f.leaf.norms.beta(&z.sub(&zbar));
        prop_assert!(dist <= 10.0 * data, "ratio {}", dist / data);
    }

    #[test]
    fn speed_is_independent_of_the_guess_position(shift in -3.0f64..3.0, steepness in 0.3f64..1.0) {
        let f = fixture();
        let g = f.front.grid;
        let base = model_guess(&f.model, &g, steepness);
        let mut guess = GridField::zeros(g.nodes, f.model.n);
        let mut node = vec![0.0; f.model.n];
        for i in 0..g.nodes {
            interpolate_at(&base, &g, &f.model.end_minus, &f.model.end_plus, g.x(i) - shift, &mut node);
            for (j, v) in node.iter().enumerate() {
                guess.set(i, j, *v);
            }
        }
        let opts = FrontOptions { richardson: false, ..FrontOptions::default() };
        let moved = solve_front(&f.model, &g, &guess, 0.5, Phase::default(), &opts).unwrap();
        prop_assert!((moved.c - f.front.c).abs() <= 1e-8 * f.front.c);
    }
}

#[test]
fn weighted_norm_dominates_on_fixture() {
    let f = fixture();
    let norms = Norms::new(&f.front.grid, &f.weight, NormKind::Sup);
    let y = bumps(11);
    assert!(norms.beta(&y) >= norms.alpha(&y).max(norms.zero(&y)) - 1e-15);
}
