mod common;

use common::{axpy, max_abs, nagumo, oracle, sub, tube_points};
use isochron::flow::{d2flow, dflow, flow, flow_trace_sums, phi_functions, FlowConfig, Scheme};
use isochron::models::{lipschitz_audit, random_direction};
use isochron::par::Exec;
use isochron::spectral::{dot, Field};
use isochron::stochastic::fit_slope;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn phi_functions_match_closed_forms_across_the_switch() {
    for z in [-3.0, -0.6, -0.49, -1e-3, 0.0, 1e-3, 0.3] {
        let p = phi_functions(z);
        let (e, z2, z3) = (f64::exp(z), z * z, z * z * z);
        if z != 0.0 && z.abs() > 1e-2 {
            assert!((p[1] - (e - 1.0) / z).abs() < 1e-13);
            assert!((p[2] - (e - 1.0 - z) / z2).abs() < 1e-12);
            assert!((p[3] - (e - 1.0 - z - z2 / 2.0) / z3).abs() < 1e-11);
        }
        assert!((p[0] - e).abs() < 1e-14);
    }
    let p = phi_functions(0.0);
    assert_eq!(p, [1.0, 1.0, 0.5, 1.0 / 6.0]);
}

#[test]
fn nonlinearity_is_locally_lipschitz() {
    let fx = nagumo();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = lipschitz_audit(fx.fam.model(), fx.fam.profile(), 0.2, 1000, &mut rng).unwrap();
    assert!(k.is_finite() && k > 0.0 && k < 1e3, "{k}");
}

#[test]
fn nonlinearity_derivatives_have_second_order_difference_consistency() {
    let fx = nagumo();
    let m = fx.fam.model();
    let basis = m.basis();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = fx.fam.profile();
    let v = random_direction(basis, &mut rng, 2.0);
    let w = random_direction(basis, &mut rng, 2.0);
    let dn = m.d_nonlinearity(x, &v).unwrap();
    let d2n = m.d2_nonlinearity(x, &v, &w).unwrap();
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    for eps in [1e-1, 5e-2, 2.5e-2, 1.25e-2] {
        let at = |s: f64, u: &Field| Field::from_coeffs(basis, axpy(&x.coeffs, s, &u.coeffs));
        let np = m.nonlinearity(&at(eps, &v)).unwrap();
        let nm = m.nonlinearity(&at(-eps, &v)).unwrap();
        let fd: Vec<f64> = np.coeffs.iter().zip(&nm.coeffs).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        e1.push((eps.ln(), max_abs(&sub(&fd, &dn.coeffs)).ln()));
        let dp = m.d_nonlinearity(&at(eps, &w), &v).unwrap();
        let dm = m.d_nonlinearity(&at(-eps, &w), &v).unwrap();
        let fd2: Vec<f64> = dp.coeffs.iter().zip(&dm.coeffs).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        e2.push((eps.ln(), max_abs(&sub(&fd2, &d2n.coeffs)).ln()));
    }
    let (s1, s2) = (fit_slope(&e1), fit_slope(&e2));
    assert!((s1 - 2.0).abs() < 0.2, "DN slope {s1}");
    assert!((s2 - 2.0).abs() < 0.2, "D2N slope {s2}");
}

#[test]
fn oracle_unit_circle_has_no_radial_velocity() {
    let fx = oracle();
    let m = fx.fam.model();
    for j in 0..16 {
        let th = j as f64 * 0.4;
        let x = Field::from_coeffs(m.basis(), vec![th.cos(), th.sin()]);
        let v = m.vector_field(&x).unwrap();
        assert!(dot(&x.coeffs, &v.coeffs).abs() < 1e-12);
    }
}

fn step_halving_errors(scheme: Scheme, x0: &Field, dts: &[f64], graded_start: bool) -> Vec<(f64, f64)> {
    let fx = nagumo();
    let m = fx.fam.model();
    let sols: Vec<Field> = dts
        .iter()
        .map(|&dt| flow(m, x0, 1.0, &FlowConfig { dt, scheme, graded_start, ..FlowConfig::default() }).unwrap())
        .collect();
    (0..dts.len() - 1)
        .map(|i| {
            let d = Field::from_coeffs(m.basis(), sub(&sols[i].coeffs, &sols[i + 1].coeffs));
            (dts[i].ln(), d.e_norm().ln())
        })
        .collect()
}

#[test]
fn schemes_show_their_order_under_step_halving() {
    let fx = nagumo();
    let dts = [0.02, 0.01, 0.005, 0.0025, 0.00125];
    for scheme in [Scheme::ExponentialEuler, Scheme::EtdRk2, Scheme::EtdRk4] {
        let pts = step_halving_errors(scheme, fx.fam.profile(), &dts, true);
        let slope = fit_slope(&pts);
        assert!((slope - scheme.order() as f64).abs() <= 0.2, "{scheme:?}: observed order {slope}, {pts:?}");
    }
}

#[test]
fn graded_start_reduces_the_error_on_rough_data() {
    let fx = nagumo();
    let x0 = &tube_points(&fx.fam, 1, 0.2, 9)[0];
    let dts = [0.04, 0.02, 0.01];
    let graded = step_halving_errors(Scheme::EtdRk4, x0, &dts, true);
    let plain = step_halving_errors(Scheme::EtdRk4, x0, &dts, false);
    for (g, p) in graded.iter().zip(&plain) {
        assert!(g.1 < p.1, "{graded:?} vs {plain:?}");
    }
    assert!((fit_slope(&plain) - 4.0).abs() <= 0.7);
}

#[test]
fn flow_trace_sums_share_one_bound_and_vary_lipschitz() {
    let fx = nagumo();
    let prop = fx.pm.propagator();
    let k = fx.fam.model().dim();
    let basis = fx.fam.model().basis();
    let xs = tube_points(&fx.fam, 4, 0.2, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut sup = 0.0f64;
    let mut lip = 0.0f64;
    for x in &xs {
        let v = random_direction(basis, &mut rng, 2.0);
        let y = Field::from_coeffs(basis, axpy(&x.coeffs, 0.02, &v.coeffs));
        let dist = Field::from_coeffs(basis, sub(&x.coeffs, &y.coeffs)).e_norm();
        for s in [0.1, 0.5, 1.0] {
            let a = flow_trace_sums(prop, x, s, k, Exec::Sequential).unwrap();
            let b = flow_trace_sums(prop, &y, s, k, Exec::Sequential).unwrap();
            sup = sup.max(a.first).max(a.first_sq).max(a.second);
            lip = lip.max((a.first - b.first).abs() / dist).max((a.second - b.second).abs() / dist);
        }
    }
    assert!(sup.is_finite() && sup < 1e3, "{sup}");
    assert!(lip.is_finite() && lip < 1e3, "{lip}");
}

#[test]
fn parallel_and_sequential_trace_sums_agree() {
    let fx = nagumo();
    let x = &tube_points(&fx.fam, 1, 0.2, 4)[0];
    let k = 24;
    let a = flow_trace_sums(fx.pm.propagator(), x, 0.5, k, Exec::Parallel).unwrap();
    let b = flow_trace_sums(fx.pm.propagator(), x, 0.5, k, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tangent_flow_is_linear_and_matches_differences(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let fx = nagumo();
        let m = fx.fam.model();
        let basis = m.basis();
        let cfg = fx.cfg.flow.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::tube_point(&fx.fam, 0.2, &mut rng);
        let v = random_direction(basis, &mut rng, 2.0);
        let w = random_direction(basis, &mut rng, 2.0);
        let t = 0.5;
        let comb = Field::from_coeffs(basis, v.coeffs.iter().zip(&w.coeffs).map(|(p, q)| a * p + b * q).collect());
        let lhs = dflow(m, &x, &comb, t, &cfg).unwrap();
        let dv = dflow(m, &x, &v, t, &cfg).unwrap();
        let dw = dflow(m, &x, &w, t, &cfg).unwrap();
        let rhs: Vec<f64> = dv.coeffs.iter().zip(&dw.coeffs).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_abs(&sub(&lhs.coeffs, &rhs)) <= 1e-10);

        let eps = 1e-5;
        let fp = flow(m, &Field::from_coeffs(basis, axpy(&x.coeffs, eps, &v.coeffs)), t, &cfg).unwrap();
        let fm = flow(m, &Field::from_coeffs(basis, axpy(&x.coeffs, -eps, &v.coeffs)), t, &cfg).unwrap();
        let fd: Vec<f64> = fp.coeffs.iter().zip(&fm.coeffs).map(|(p, q)| (p - q) / (2.0 * eps)).collect();
        prop_assert!(max_abs(&sub(&fd, &dv.coeffs)) <= 1e-7);
    }

    #[test]
    fn second_variation_is_symmetric(seed in any::<u64>()) {
        let fx = nagumo();
        let m = fx.fam.model();
        let basis = m.basis();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::tube_point(&fx.fam, 0.2, &mut rng);
        let v = random_direction(basis, &mut rng, 2.0);
        let w = random_direction(basis, &mut rng, 2.0);
        let cfg = fx.cfg.flow.clone();
        let vw = d2flow(m, &x, &v, &w, 0.5, &cfg).unwrap();
        let wv = d2flow(m, &x, &w, &v, 0.5, &cfg).unwrap();
        prop_assert!(max_abs(&sub(&vw.coeffs, &wv.coeffs)) <= 1e-10);
    }

    #[test]
    fn adjoint_is_the_transpose_of_the_tangent(seed in any::<u64>()) {
        let fx = nagumo();
        let prop = fx.pm.propagator();
        let basis = fx.fam.model().basis();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::tube_point(&fx.fam, 0.2, &mut rng);
        let v = random_direction(basis, &mut rng, 2.0);
        let g = random_direction(basis, &mut rng, 1.0);
        let traj = prop.trajectory(&x.coeffs, 0.7).unwrap();
        let lhs = dot(&prop.tangent(&traj, &v.coeffs), &g.coeffs);
        let rhs = dot(&v.coeffs, &prop.adjoint(&traj, &g.coeffs));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}
