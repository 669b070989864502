mod common;

use common::{nagumo, sub};
use isochron::audit::NoiseSpec;
use isochron::config::bundled;
use isochron::ledger::mean_se;
use isochron::models::random_coeffs;
use isochron::par::Exec;
use isochron::spectral::Field;
use isochron::stochastic::{
    exit_statistics, fit_slope, regularity_probe, ExitFlag, Increments, NoiseLaw, NoiseModel, NoiseStream, Spde,
};
use isochron::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn stream_pairs_are_addressable_out_of_order() {
    let s = NoiseStream::new(99, 5);
    let seq = s.path(3, 40);
    for (step, mode) in [(39, 4), (0, 0), (17, 2), (5, 4)] {
        assert_eq!(s.pair(3, step as u64, mode), seq[step * 5 + mode]);
    }
    assert_ne!(s.path(4, 1)[0], seq[0]);
}

#[test]
fn normals_have_unit_variance_and_are_uncorrelated() {
    let s = NoiseStream::new(1, 1);
    let z = s.path(0, 200_000);
    let n = z.len() as f64;
    let (m1, m2) = (z.iter().map(|p| p.0).sum::<f64>() / n, z.iter().map(|p| p.1).sum::<f64>() / n);
    let v1 = z.iter().map(|p| p.0 * p.0).sum::<f64>() / n;
    let c = z.iter().map(|p| p.0 * p.1).sum::<f64>() / n;
    let se = 1.0 / n.sqrt();
    assert!(m1.abs() < 4.0 * se && m2.abs() < 4.0 * se);
    assert!((v1 - 1.0).abs() < 4.0 * 2f64.sqrt() * se);
    assert!(c.abs() < 4.0 * se);
}

#[test]
fn brownian_quadratic_variation_matches_elapsed_time() {
    let lams = vec![1.0; 8];
    let t_max = 1.0;
    let n = 400;
    let mut ratios = Vec::new();
    for p in 0..16 {
        let inc = Increments::sample(&NoiseStream::new(5, 8), p, &lams, t_max / n as f64, n);
        ratios.extend(inc.quadratic_variation().iter().map(|q| q / t_max));
    }
    let (m, se) = mean_se(&ratios);
    assert!((m - 1.0).abs() <= 3.0 * se, "{m} ± {se}");
}

#[test]
fn stochastic_convolution_has_the_ou_variance() {
    let lam = 50.0;
    let h = 0.01;
    let inc = Increments::sample(&NoiseStream::new(8, 1), 0, &[lam], h, 100_000);
    let v = inc.xi.iter().map(|x| x * x).sum::<f64>() / inc.xi.len() as f64;
    let want = (1.0 - (-2.0 * lam * h).exp()) / (2.0 * lam);
    assert!((v / want - 1.0).abs() < 0.02, "{v} vs {want}");
    // Covariance with the Brownian increment: (1 − e^{−λh})/λ.
    let c = inc.xi.iter().zip(&inc.dw).map(|(a, b)| a * b).sum::<f64>() / inc.xi.len() as f64;
    let cw = (1.0 - (-lam * h).exp()) / lam;
    assert!((c / cw - 1.0).abs() < 0.02);
}

#[test]
fn coarsening_adds_brownian_increments_and_discounts_convolutions() {
    let lams = [0.5, 30.0];
    let inc = Increments::sample(&NoiseStream::new(2, 2), 1, &lams, 0.01, 8);
    let c = inc.coarsen(4, &lams).unwrap();
    assert_eq!(c.n_steps(), 2);
    assert!((c.h - 0.04).abs() < 1e-15);
    for q in 0..2 {
        let s: f64 = (0..4).map(|j| inc.dw[j * 2 + q]).sum();
        assert!((c.dw[q] - s).abs() < 1e-15);
        let x: f64 = (0..4).map(|j| (-lams[q] * 0.01 * (3 - j) as f64).exp() * inc.xi[j * 2 + q]).sum();
        assert!((c.xi[q] - x).abs() < 1e-15);
    }
    assert!(inc.coarsen(3, &lams).is_err());
}

#[test]
fn white_noise_is_accepted_for_reaction_diffusion_and_rejected_for_neural_fields() {
    let nag = bundled("nagumo_wave").unwrap();
    let m = nag.build_model().unwrap();
    let w = NoiseModel::new(&m, 0.01, NoiseLaw::White, None).unwrap();
    assert!(!w.trace_class);
    assert_eq!(w.n_noise_modes, m.dim());

    let am = bundled("amari_bump").unwrap();
    let m = am.build_model().unwrap();
    let spec = NoiseSpec { sigma: 0.01, law: NoiseLaw::White, n_modes: None };
    assert!(matches!(spec.build(&m), Err(Error::NoiseNotTraceClass(_))));
    assert!(NoiseModel::new(&m, 0.01, NoiseLaw::PowerDecay { p: 2.0 }, Some(10)).unwrap().trace_class);
}

#[test]
fn noise_model_rejects_bad_parameters() {
    let m = bundled("nagumo_wave").unwrap().build_model().unwrap();
    assert!(NoiseModel::new(&m, -1.0, NoiseLaw::White, None).is_err());
    assert!(NoiseModel::new(&m, 0.1, NoiseLaw::White, Some(0)).is_err());
    assert!(NoiseModel::new(&m, 0.1, NoiseLaw::Explicit { multipliers: vec![1.0] }, Some(2)).is_err());
}

#[test]
fn simulation_is_deterministic_and_execution_independent() {
    let fx = nagumo();
    let noise = fx.cfg.noise_model(fx.fam.model()).unwrap();
    let spde = Spde::new(&fx.fam, &noise, fx.cfg.delta(&fx.fam)).unwrap();
    let x0 = &fx.fam.profile().coeffs;
    let a = spde.ensemble(x0, 0.1, 0.01, 7, 4, Exec::Parallel).unwrap();
    let b = spde.ensemble(x0, 0.1, 0.01, 7, 4, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let c = spde.simulate(x0, 0.1, 0.01, 8, 0).unwrap();
    assert_ne!(c.states, a[0].states);
}

#[test]
fn exponential_euler_converges_strongly_at_order_one() {
    let fx = nagumo();
    let m = fx.fam.model();
    let noise = fx.cfg.noise_model(m).unwrap();
    let spde = Spde::new(&fx.fam, &noise, fx.cfg.delta(&fx.fam)).unwrap();
    let lams = spde.noise_rates();
    let x0 = &fx.fam.profile().coeffs;
    let fine = 1.0 / 1280.0;
    let factors = [16, 8, 4, 2, 1];
    let mut errs = vec![Vec::new(); factors.len() - 1];
    for p in 0..4 {
        let inc = spde.increments(3, p, fine, 1280);
        let ends: Vec<Vec<f64>> = factors
            .iter()
            .map(|&f| {
                let s = spde.simulate_with(x0, inc.coarsen(f, &lams).unwrap(), 3, p).unwrap();
                s.states.last().unwrap().clone()
            })
            .collect();
        for i in 0..factors.len() - 1 {
            errs[i].push(Field::from_coeffs(m.basis(), sub(&ends[i], &ends[i + 1])).e_norm());
        }
    }
    let pts: Vec<(f64, f64)> = factors[..4]
        .iter()
        .zip(&errs)
        .map(|(&f, e)| ((fine * f as f64).ln(), (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt().ln()))
        .collect();
    let order = fit_slope(&pts);
    assert!(order >= 0.9, "observed order {order}");
}

#[test]
fn paths_without_noise_track_the_wave() {
    let fx = nagumo();
    let noise = NoiseModel::new(fx.fam.model(), 0.0, NoiseLaw::PowerDecay { p: 2.0 }, Some(4)).unwrap();
    let spde = Spde::new(&fx.fam, &noise, fx.cfg.delta(&fx.fam)).unwrap();
    let s = spde.simulate(&fx.fam.profile().coeffs, 1.0, 0.01, 1, 0).unwrap();
    assert_eq!(s.exit_flag, ExitFlag::None);
    assert!(s.tube.iter().all(|(_, d)| *d < 1e-3));
}

#[test]
fn large_noise_leaves_the_tube_and_exit_statistics_count_it() {
    let fx = nagumo();
    let noise = NoiseModel::new(fx.fam.model(), 3.0, NoiseLaw::PowerDecay { p: 1.0 }, Some(14)).unwrap();
    let mut spde = Spde::new(&fx.fam, &noise, 0.05).unwrap();
    spde.stop_on_exit = true;
    let samples = spde.ensemble(&fx.fam.profile().coeffs, 0.5, 0.01, 2, 6, Exec::Sequential).unwrap();
    let st = exit_statistics(&samples, 0.5).unwrap();
    assert_eq!(st.n, 6);
    assert!(st.n_exit >= 1);
    assert!(st.mean <= 0.5 && st.median <= 0.5);
    assert!(st.survival.windows(2).all(|w| w[1].1 <= w[0].1));
    for s in samples.iter().filter(|s| s.exit_time.is_some()) {
        assert_eq!(s.times.last().copied(), s.exit_time);
    }
}

#[test]
fn regularity_probe_separates_smooth_paths_from_white_data() {
    let fx = nagumo();
    let op = fx.fam.model().operator().unwrap();
    let h = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
    let smooth = regularity_probe(&[fx.fam.profile().coeffs.clone()], op, &h).unwrap();
    assert!(smooth.decays(0.25), "{smooth:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rough = random_coeffs(op.basis(), &mut rng, 0.0);
    let white = regularity_probe(&[rough], op, &h).unwrap();
    assert!(!white.decays(0.25), "{white:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coarsened_quadratic_variation_never_exceeds_cauchy_schwarz(seed in any::<u64>(), m in 1usize..5) {
        let lams = [1.0, 2.0, 3.0];
        let inc = Increments::sample(&NoiseStream::new(seed, 3), 0, &lams, 0.01, 60);
        let c = inc.coarsen(m, &lams).unwrap();
        let (qf, qc) = (inc.quadratic_variation(), c.quadratic_variation());
        for k in 0..3 {
            prop_assert!(qc[k] <= m as f64 * qf[k] * (1.0 + 1e-12));
        }
    }
}
