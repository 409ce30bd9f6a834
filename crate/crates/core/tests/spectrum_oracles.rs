use frontlab::front::{interpolate_shift, model_guess, shift_front, solve_front, FrontOptions, FrontProfile, Phase};
use frontlab::grid::{make_weight, GridField, NormKind, Norms, SpatialGrid, Weight};
use frontlab::linalg::{eigs_rightmost_banded, BandedMatrix, ShiftInvertOptions};
use frontlab::model::{builtin_model, ModelName, Params, ReactionModel};
use frontlab::spectrum::{
    adjoint_zero_mode, assemble_linearization, default_shift_options, point_spectrum, projection_lipschitz_check,
};
use num_complex::Complex64;

fn gasless() -> ReactionModel {
    let mut p = Params::new();
    p.insert("beta".into(), 0.5);
    builtin_model(ModelName::GaslessCombustion, &p).unwrap()
}

fn front(m: &ReactionModel, x: f64, n: usize) -> FrontProfile {
    let g = SpatialGrid::new(x, n).unwrap();
    let guess = model_guess(m, &g, 0.5);
    solve_front(m, &g, &guess, 0.5, Phase::default(), &FrontOptions::default()).unwrap()
}

/// `D (w'' - 2η'w' + (η'² - η'')w) + c (w' - η'w) + J w` discretized directly.
fn product_rule_operator(m: &ReactionModel, f: &FrontProfile, w: &Weight) -> BandedMatrix {
    let g = f.grid;
    let (n, h) = (m.n, g.h);
    let mut a = BandedMatrix::zeros(g.nodes * n, 2 * n, 2 * n).unwrap();
    for i in 0..g.nodes {
        let (_, e1, e2) = w.exponent(g.x(i));
        let jac = m.jacobian(f.y0.node(i));
        for comp in 0..n {
            let row = i * n + comp;
            let d = m.diffusion[comp];
            a.add_to(row, row, -2.0 * d / (h * h) + d * (e1 * e1 - e2) - f.c * e1);
            if i > 0 {
                a.add_to(row, row - n, d / (h * h) + d * e1 / h);
            }
            if i + 1 < g.nodes {
                a.add_to(row, row + n, d / (h * h) - d * e1 / h);
            }
            let st = f.transport.weights(d, f.c, h);
            for k in -2..=2isize {
                let node = i as isize + k;
                if node >= 0 && (node as usize) < g.nodes && st[(k + 2) as usize] != 0.0 {
                    a.add_to(row, node as usize * n + comp, f.c * st[(k + 2) as usize]);
                }
            }
            for b in 0..n {
                a.add_to(row, i * n + b, jac[comp * n + b]);
            }
        }
    }
    a
}

fn near_zero_shift() -> ShiftInvertOptions {
    ShiftInvertOptions {
        shifts: vec![Complex64::new(0.05, 0.0)],
        ..Default::default()
    }
}

#[test]
fn conjugated_matrix_matches_product_rule_assembly() {
    let m = gasless();
    let f = front(&m, 30.0, 4801);
    let w = make_weight((0.2, 0.36), 5.0).unwrap();
    let op = assemble_linearization(&m, &f, &w).unwrap();
    let direct = product_rule_operator(&m, &f, &w);
    let a = eigs_rightmost_banded(&op.lw, 4, &near_zero_shift()).unwrap();
    let b = eigs_rightmost_banded(&direct, 4, &near_zero_shift()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.value - y.value).norm() < 1e-6, "{} vs {}", x.value, y.value);
    }
}

#[test]
fn translated_front_has_the_same_spectrum_and_translated_adjoint_density() {
    let m = gasless();
    let f = front(&m, 60.0, 2401);
    let w = make_weight((-0.5 * f.omega_minus, 0.5 * f.omega_plus), 5.0).unwrap();
    let op0 = assemble_linearization(&m, &f, &w).unwrap();
    let s0 = point_spectrum(&op0, 6, &default_shift_options()).unwrap();
    let pair0 = adjoint_zero_mode(&op0).unwrap();
    assert!(pair0.boundary_ratio() <= 1e-6);

    let q = 0.2;
    let fq = shift_front(&m, &f, q, &FrontOptions::default()).unwrap();
    let opq = assemble_linearization(&m, &fq, &w).unwrap();
    let sq = point_spectrum(&opq, 6, &default_shift_options()).unwrap();
    let isolated = |s: &frontlab::spectrum::SpectralDecomposition| -> Vec<Complex64> {
        s.eigenvalues.iter().copied().filter(|z| z.re > s.ess_sup_real).collect()
    };
    let (i0, iq) = (isolated(&s0), isolated(&sq));
    assert_eq!(i0.len(), iq.len());
    for (a, b) in i0.iter().zip(&iq) {
        assert!((a - b).norm() < 1e-6, "{a} vs {b}");
    }
    assert!((s0.nu - sq.nu).abs() < 1e-6);
    let pairq = adjoint_zero_mode(&opq).unwrap();
    let zero = vec![0.0; m.n];
    let gamma = w.samples(&f.grid);
    let weighted = |z: &GridField| GridField::from_fn(&f.grid, m.n, |x, j| {
        let i = ((x + f.grid.half_width) / f.grid.h).round() as usize;
        gamma[i] * z.get(i, j)
    });
    let moved = interpolate_shift(&weighted(&pair0.zq), &f.grid, &zero, &zero, q);
    let target = weighted(&pairq.zq);
    let mut worst = 0.0f64;
    for i in 0..f.grid.nodes {
        if f.grid.x(i).abs() <= 0.5 * f.grid.half_width {
            for j in 0..m.n {
                worst = worst.max((moved.get(i, j) - target.get(i, j)).abs());
            }
        }
    }
    let rel = worst / target.max_abs();
    assert!(rel < 1e-3, "relative translation mismatch {rel}");
}

#[test]
fn zero_eigenvalue_is_stable_under_refinement() {
    let m = gasless();
    let mut gaps = Vec::new();
    for (x, n) in [(60.0, 2401), (60.0, 4801), (120.0, 4801)] {
        let f = front(&m, x, n);
        let w = make_weight((-0.5 * f.omega_minus, 0.5 * f.omega_plus), 5.0).unwrap();
        let op = assemble_linearization(&m, &f, &w).unwrap();
        let s = point_spectrum(&op, 6, &default_shift_options()).unwrap();
        assert!(s.hypothesis_a && s.hypothesis_b);
        assert!(s.lambda0.norm() <= 1e-4 * s.nu);
        gaps.push(s.nu);
    }
    for g in &gaps {
        assert!((g - gaps[0]).abs() < 0.05 * gaps[0], "{gaps:?}");
    }
}

#[test]
fn projection_difference_scales_linearly_in_shift() {
    let m = gasless();
    let f = front(&m, 60.0, 2401);
    let w = make_weight((-0.5 * f.omega_minus, 0.5 * f.omega_plus), 5.0).unwrap();
    let pair0 = adjoint_zero_mode(&assemble_linearization(&m, &f, &w).unwrap()).unwrap();
    let norms = Norms::new(&f.grid, &w, NormKind::Sup);
    let mut beta = Vec::new();
    let mut alpha = Vec::new();
    for dq in [0.1, 0.05, 0.025] {
        let fq = shift_front(&m, &f, dq, &FrontOptions::default()).unwrap();
        let pq = adjoint_zero_mode(&assemble_linearization(&m, &fq, &w).unwrap()).unwrap();
        let r = projection_lipschitz_check(&pq, &pair0, &norms, 100, 11);
        beta.push(r.beta);
        alpha.push(r.alpha);
    }
    for v in [&beta, &alpha] {
        let hi = v.iter().copied().fold(f64::MIN, f64::max);
        let lo = v.iter().copied().fold(f64::MAX, f64::min);
        assert!(lo > 0.0 && hi < 2.0 * lo, "{v:?}");
    }
}
