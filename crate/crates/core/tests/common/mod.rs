#![allow(dead_code)]

use std::sync::Arc;

use isochron::config::{bundled, ExperimentConfig};
use isochron::isochron::PhaseMap;
use isochron::manifold::WaveFamily;
use isochron::models::random_direction;
use isochron::spectral::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub fam: Arc<WaveFamily>,
    pub pm: PhaseMap,
}

pub fn fixture(name: &str) -> Fixture {
    let cfg = bundled(name).unwrap();
    let model = cfg.build_model().unwrap();
    let fam = Arc::new(cfg.find_wave(model).unwrap());
    let pm = cfg.phase_map(fam.clone()).unwrap();
    Fixture { cfg, fam, pm }
}

pub fn nagumo() -> Fixture {
    fixture("nagumo_wave")
}

pub fn oracle() -> Fixture {
    fixture("oracle_sl")
}

/// `γ_α + ρ v`, `α` uniform, `v` a random unit E-direction.
pub fn tube_point(fam: &WaveFamily, rho: f64, rng: &mut ChaCha8Rng) -> Field {
    let basis = fam.model().basis();
    let a = rng.gen::<f64>() * fam.period();
    let v = random_direction(basis, rng, 2.0);
    let g = fam.gamma(fam.phase(a));
    Field::from_coeffs(basis, g.coeffs.iter().zip(&v.coeffs).map(|(a, b)| a + rho * b).collect())
}

pub fn tube_points(fam: &WaveFamily, n: usize, rho: f64, seed: u64) -> Vec<Field> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| tube_point(fam, rho, &mut rng)).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn axpy(x: &[f64], s: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + s * b).collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
