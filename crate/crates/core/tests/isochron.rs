mod common;

use common::{nagumo, oracle, tube_points};
use isochron::models::{random_direction, ModelKind, OracleSpec};
use isochron::par::Exec;
use isochron::spectral::{dot, Field};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn oracle_spec(fx: &common::Fixture) -> OracleSpec {
    match fx.fam.model().kind() {
        ModelKind::OracleOscillator(s) => s.clone(),
        _ => unreachable!(),
    }
}

#[test]
fn isochron_of_gamma_is_its_phase() {
    let fx = nagumo();
    for j in 0..6 {
        let a = fx.fam.phase(j as f64 * 1.1);
        let p = fx.pm.isochron(&fx.fam.gamma(a).coeffs).unwrap();
        assert!(p.distance(a) < 1e-8);
    }
}

#[test]
fn equivariance_along_the_flow() {
    let fx = nagumo();
    let prop = fx.pm.propagator();
    let c = fx.fam.speed();
    for x in tube_points(&fx.fam, 6, 0.2, 41) {
        let p0 = fx.pm.isochron(&x.coeffs).unwrap();
        for t in [0.5, 1.0, 2.0] {
            let mut y = x.coeffs.clone();
            prop.advance(&mut y, t, &mut prop.work()).unwrap();
            let err = fx.pm.isochron(&y).unwrap().distance(p0.shift(c * t));
            assert!(err <= 1e-5 * fx.fam.period(), "{err}");
        }
    }
}

#[test]
fn difference_and_adjoint_gradients_agree() {
    let fx = nagumo();
    let basis = fx.fam.model().basis();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..20 {
        let x = common::tube_point(&fx.fam, 0.2, &mut rng);
        let v = random_direction(basis, &mut rng, 2.0);
        let t = fx.pm.horizon(&x.coeffs).unwrap();
        let fd = fx.pm.dpi_fd(&x.coeffs, &v.coeffs, t).unwrap();
        let adj = dot(&fx.pm.grad_at(&x.coeffs, t).unwrap(), &v.coeffs);
        assert!((fd - adj).abs() <= 1e-4 * adj.abs().max(1e-2), "{fd} vs {adj}");
    }
}

#[test]
fn phase_is_stable_under_longer_horizons() {
    let fx = nagumo();
    let tol = fx.pm.tol_gamma();
    for x in tube_points(&fx.fam, 5, 0.2, 44) {
        let r = fx.pm.resolve(&x.coeffs).unwrap();
        let a = fx.pm.at_horizon(&x.coeffs, r.time).unwrap();
        let b = fx.pm.at_horizon(&x.coeffs, r.time + 10.0).unwrap();
        let d = isochron::manifold::wrap_centered(a - b, fx.fam.period()).abs();
        assert!(d <= tol, "{d} > {tol}");
    }
}

#[test]
fn phase_rate_on_gamma_is_the_speed() {
    let fx = nagumo();
    for j in 0..4 {
        let g = fx.fam.gamma(fx.fam.phase(j as f64));
        assert!((fx.pm.dpi_v(&g.coeffs).unwrap() - fx.fam.speed()).abs() < 1e-6);
    }
}

#[test]
fn isochron_trace_sums_are_finite_and_first_order_sums_settle() {
    let fx = nagumo();
    let x = &tube_points(&fx.fam, 1, 0.2, 45)[0];
    let k = fx.fam.model().dim();
    let s = fx.pm.pi_trace_sums(&x.coeffs, k, Exec::Parallel).unwrap();
    let (full, half) = (s.partial(k), s.partial(k / 2));
    assert!(full.iter().all(|v| v.is_finite()));
    assert!((full[1] - half[1]).abs() / full[1] < 1e-3);
    assert!((full[2] - half[2]).abs() / full[2] < 1e-6);
}

#[test]
fn dpi_l_partial_sums_accumulate_in_eigen_order() {
    let fx = nagumo();
    let basis = fx.fam.model().basis();
    let x = &tube_points(&fx.fam, 1, 0.2, 46)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let y = random_direction(basis, &mut rng, 4.0);
    let k = fx.fam.model().dim();
    let sums = fx.pm.dpi_l(&x.coeffs, &y.coeffs, k).unwrap();
    let t = fx.pm.horizon(&x.coeffs).unwrap();
    let g = fx.pm.grad_at(&x.coeffs, t).unwrap();
    let op = fx.fam.model().operator().unwrap();
    let mut ly = vec![0.0; k];
    op.apply(&y.coeffs, &mut ly);
    assert!((sums[k - 1] - dot(&g, &ly)).abs() < 1e-10 * (1.0 + sums[k - 1].abs()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn oracle_phase_gradient_and_hessian_are_closed_form(r in 0.5f64..2.0, th in 0.0f64..6.283) {
        let fx = oracle();
        let spec = oracle_spec(&fx);
        let (x, y) = (r * th.cos(), r * th.sin());
        let p = fx.pm.isochron(&[x, y]).unwrap();
        let want = isochron::manifold::Phase::new(spec.phase(x, y), p.period());
        prop_assert!(p.distance(want) <= 1e-6);
        let g = fx.pm.grad_pi(&Field::from_coeffs(fx.fam.model().basis(), vec![x, y])).unwrap();
        let ga = spec.phase_gradient(x, y);
        prop_assert!((g.grad.coeffs[0] - ga[0]).abs() <= 1e-5 && (g.grad.coeffs[1] - ga[1]).abs() <= 1e-5);
        let h = spec.phase_hessian(x, y);
        let e = [[1.0, 0.0], [0.0, 1.0]];
        for a in 0..2 {
            for b in 0..2 {
                prop_assert!((fx.pm.d2pi(&[x, y], &e[a], &e[b]).unwrap() - h[a][b]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn oracle_phase_is_constant_along_isochrons(r in 0.6f64..1.8, th in 0.0f64..6.283) {
        // Θ = θ − κ ln r is constant on the log spiral θ = κ ln r + const.
        let fx = oracle();
        let k = oracle_spec(&fx).kappa;
        let base = fx.pm.isochron(&[th.cos(), th.sin()]).unwrap();
        let a = th + k * r.ln();
        let p = fx.pm.isochron(&[r * a.cos(), r * a.sin()]).unwrap();
        prop_assert!(p.distance(base) <= 1e-6);
    }
}
