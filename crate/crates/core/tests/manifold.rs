mod common;

use common::{max_abs, nagumo, oracle, sub};
use isochron::manifold::{audit_manifold, wrap_centered, Phase, WaveFamily};
use isochron::models::random_direction;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn nagumo_wave_speed_and_residual() {
    let fx = nagumo();
    assert!(fx.fam.residual() < 1e-10);
    assert!((fx.fam.period() - 2.0 * std::f64::consts::PI).abs() < 1e-14);
    // Plane wave A e^{i(kx ± ct)}: ρ = A² is the upper root of
    // s(1−ρ)(ρ−b) = a + k², and the rotation rate qρ gives |c| = ρ at k = q = 1.
    let (s, b, a, k): (f64, f64, f64, f64) = (20.0, 0.25, 0.1, 1.0);
    let disc = ((1.0 + b) * s).powi(2) - 4.0 * s * (s * b + a + k * k);
    let rho = ((1.0 + b) * s + disc.sqrt()) / (2.0 * s);
    let amp = fx.fam.profile().e_norm();
    assert!((amp - rho.sqrt()).abs() < 1e-8, "{amp} vs {}", rho.sqrt());
    assert!((fx.fam.speed().abs() - rho).abs() < 1e-8, "{} vs {rho}", fx.fam.speed());
}

#[test]
fn oracle_family_is_the_unit_circle() {
    let fx = oracle();
    assert!((fx.fam.speed() - 1.0).abs() < 1e-12);
    for j in 0..8 {
        let a = j as f64 * 0.7;
        let g = fx.fam.gamma(fx.fam.phase(a));
        assert!((g.coeffs[0] - a.cos()).abs() < 1e-12 && (g.coeffs[1] - a.sin()).abs() < 1e-12);
    }
}

#[test]
fn gamma_is_periodic() {
    let fx = nagumo();
    let d = fx.fam.model().dim();
    let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
    fx.fam.gamma_coeffs(0.0, &mut a);
    fx.fam.gamma_coeffs(fx.fam.period(), &mut b);
    assert!(max_abs(&sub(&a, &b)) < 1e-12);
}

#[test]
fn projection_recovers_the_phase_of_points_on_gamma() {
    let fx = nagumo();
    for j in 0..10 {
        let a = fx.fam.period() * (j as f64 + 0.3) / 10.0;
        let p = fx.fam.project(&fx.fam.gamma(fx.fam.phase(a)).coeffs).unwrap();
        assert!(p.phase.distance(fx.fam.phase(a)) < 1e-10);
        assert!(p.distance_e < 1e-10);
    }
}

#[test]
fn manifold_is_invariant_and_attracting() {
    let fx = nagumo();
    let prop = fx.pm.propagator();
    let basis = fx.fam.model().basis();
    let mut fw = prop.work();
    let mut x = fx.fam.profile().coeffs.clone();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        prop.advance(&mut x, 1.0, &mut fw).unwrap();
        worst = worst.max(fx.fam.project(&x).unwrap().distance_e);
    }
    assert!(worst <= 1e-6, "invariance {worst}");

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let v = random_direction(basis, &mut rng, 2.0);
        let mut y = common::axpy(&fx.fam.profile().coeffs, 0.05, &v.coeffs);
        prop.advance(&mut y, 20.0, &mut fw).unwrap();
        assert!(fx.fam.project(&y).unwrap().distance_e <= 1e-4);
    }
}

#[test]
fn manifold_audit_reports_bilipschitz_tangent() {
    let fx = nagumo();
    let a = audit_manifold(&fx.fam, fx.pm.propagator(), 8, 2).unwrap();
    for (_, lo, hi) in &a.bilipschitz_e {
        assert!(*lo > 0.1 && *hi < 10.0);
    }
    assert!(a.invariance < 1e-6 && a.stability < 1e-4);
    assert!(a.min_dgamma_e > 0.5);
}

#[test]
fn wave_text_round_trip() {
    let fx = nagumo();
    let text = fx.fam.to_text();
    let back = WaveFamily::from_text(fx.fam.model().clone(), &text).unwrap();
    assert_eq!(back.speed(), fx.fam.speed());
    assert_eq!(back.profile().coeffs, fx.fam.profile().coeffs);
}

#[test]
fn wave_text_for_another_model_is_rejected() {
    let fx = nagumo();
    let other = oracle();
    assert!(WaveFamily::from_text(other.fam.model().clone(), &fx.fam.to_text()).is_err());
}

#[test]
fn field_values_of_gamma_shift_with_phase() {
    let fx = nagumo();
    let basis = fx.fam.model().basis();
    let n = basis.grid().unwrap().n_points;
    let g0 = fx.fam.gamma(fx.fam.phase(0.0));
    // One grid spacing of phase is a one-point shift of the wave.
    let h = basis.grid().unwrap().spacing();
    let g1 = fx.fam.gamma(fx.fam.phase(h));
    let shifted: Vec<f64> = (0..2 * n).map(|i| g0.values[(i / n) * n + (i % n + n - 1) % n]).collect();
    let err = max_abs(&sub(&g1.values, &shifted));
    let alt: Vec<f64> = (0..2 * n).map(|i| g0.values[(i / n) * n + (i % n + 1) % n]).collect();
    assert!(err < 1e-10 || max_abs(&sub(&g1.values, &alt)) < 1e-10);
}

proptest! {
    #[test]
    fn phase_values_stay_in_range(v in -1e3f64..1e3, p in 0.1f64..100.0) {
        let ph = Phase::new(v, p);
        prop_assert!(ph.value() >= 0.0 && ph.value() < p);
    }

    #[test]
    fn shift_then_diff_recovers_small_offsets(v in -50.0f64..50.0, d in -0.49f64..0.49, p in 1.0f64..10.0) {
        let a = Phase::new(v, p);
        let b = a.shift(d * p);
        prop_assert!((b.diff(a) - d * p).abs() <= 1e-9 * p.max(v.abs()));
    }

    #[test]
    fn wrap_is_centered_and_congruent(x in -1e3f64..1e3, p in 0.5f64..20.0) {
        let w = wrap_centered(x, p);
        prop_assert!(w >= -p / 2.0 && w < p / 2.0);
        let k = ((x - w) / p).round();
        prop_assert!((x - w - k * p).abs() <= 1e-9 * x.abs().max(1.0));
    }
}
