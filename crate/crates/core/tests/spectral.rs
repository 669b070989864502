use isochron::models::random_coeffs;
use isochron::spectral::{
    gap_constant_of, h_norm, make_operator, trace_constant, Basis, Boundary, Field, Grid, SpectralOperator,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn periodic(n: usize, len: f64) -> Grid {
    Grid::new(n, len, Boundary::Periodic).unwrap()
}

#[test]
fn cosine_mode_is_an_eigenfunction_with_closed_form_decay() {
    let len = 2.0 * PI;
    let op = make_operator(periodic(64, len), 0.3, 10).unwrap();
    let basis = op.basis().clone();
    let pts = basis.grid().unwrap().points();
    // cos(3x) sampled on the grid, pushed through the semigroup.
    let vals: Vec<f64> = pts.iter().map(|x| (3.0 * x).cos()).collect();
    let f = Field::from_values(&basis, &vals);
    let t = 0.2;
    let g = op.semigroup(t, &f).unwrap();
    let decay = (-(9.0 + 0.3) * t).exp();
    for (gi, vi) in g.values.iter().zip(&vals) {
        assert!((gi - decay * vi).abs() < 1e-12, "{gi} vs {}", decay * vi);
    }
}

#[test]
fn dirichlet_sine_mode_decays_at_its_eigenvalue() {
    let len = 3.0;
    let grid = Grid::new(64, len, Boundary::Dirichlet).unwrap();
    let op = make_operator(grid, 0.0, 20).unwrap();
    let basis = op.basis().clone();
    let pts = basis.grid().unwrap().points();
    let k = 2.0 * PI / len;
    let vals: Vec<f64> = pts.iter().map(|x| (k * x).sin()).collect();
    let f = Field::from_values(&basis, &vals);
    let g = op.semigroup(0.1, &f).unwrap();
    let decay = (-k * k * 0.1).exp();
    for (gi, vi) in g.values.iter().zip(&vals) {
        assert!((gi - decay * vi).abs() < 1e-10);
    }
}

#[test]
fn gap_constant_matches_distinct_level_formula() {
    let len = 2.0 * PI;
    let op = make_operator(periodic(128, len), 0.1, 21).unwrap();
    // Levels k² + 0.1 for k = 0..=21; the expression is largest at the bottom.
    let levels: Vec<f64> = (0..=21).map(|k| (k * k) as f64 + 0.1).collect();
    let want = levels
        .windows(2)
        .map(|w| (w[1] / w[0]).ln() / (w[1] - w[0]))
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((op.gap_constant().unwrap() - want).abs() < 1e-12);
    assert!((want - (11.0f64).ln()).abs() < 1e-12);
}

#[test]
fn gap_constant_rejects_repeated_levels() {
    assert!(gap_constant_of(&[1.0, 1.0, 2.0]).is_err());
    assert!(gap_constant_of(&[0.0, 1.0]).is_err());
}

#[test]
fn trace_constant_sums_are_cauchy_in_k() {
    let op = make_operator(periodic(256, 2.0 * PI), 0.1, 100).unwrap();
    let (s, r) = (0.5, 1.0);
    let at = |k| op.trace_constant_truncated(s, r, k).unwrap().partial;
    let (a, b, c) = (at(50), at(100), at(200.min(op.dim())));
    assert!((b - a).abs() / b < 1e-10, "{a} {b}");
    assert!((c - b).abs() / c < 1e-12);
    let full = trace_constant(&op, s, r).unwrap();
    assert!((full - c).abs() < 1e-12);
    let tail = op.trace_constant_truncated(s, r, 50).unwrap().tail_bound.unwrap();
    assert!(tail >= c - a - 1e-15);
}

#[test]
fn operator_rejects_negative_diffusion() {
    let b = Basis::on_grid(periodic(32, 1.0), 1, 8).unwrap();
    assert!(SpectralOperator::new(b, &[-1.0], &[0.0]).is_err());
}

fn random_field(basis: &Basis, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_coeffs(basis, random_coeffs(basis, &mut rng, 0.5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficient_value_round_trip(seed in any::<u64>(), comps in 1usize..3, periodic_bc in any::<bool>()) {
        let grid = if periodic_bc { periodic(64, 5.0) } else { Grid::new(64, 5.0, Boundary::Dirichlet).unwrap() };
        let basis = Basis::on_grid(grid, comps, 30).unwrap();
        let f = random_field(&basis, seed);
        let g = Field::from_values(&basis, &f.values);
        let scale = h_norm(&f.coeffs);
        for (a, b) in f.coeffs.iter().zip(&g.coeffs) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn semigroup_composes(seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let op = make_operator(periodic(64, 2.0 * PI), 0.2, 20).unwrap();
        let f = random_field(op.basis(), seed);
        let once = op.semigroup(t1 + t2, &f).unwrap();
        let twice = op.semigroup(t2, &op.semigroup(t1, &f).unwrap()).unwrap();
        for (a, b) in once.coeffs.iter().zip(&twice.coeffs) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn semigroup_contracts_at_rate_omega(seed in any::<u64>(), ti in 0usize..3) {
        let t = [0.01, 0.1, 1.0][ti];
        let op = make_operator(periodic(64, 2.0 * PI), 0.2, 20).unwrap();
        let f = random_field(op.basis(), seed);
        let g = op.semigroup(t, &f).unwrap();
        prop_assert!(g.h_norm() <= (-op.omega() * t).exp() * f.h_norm() * (1.0 + 1e-12));
    }
}
