//! Additive-noise SPDE driver: truncated cylindrical Wiener noise, the mild
//! exponential Euler scheme with exact per-mode stochastic convolutions, exit
//! times and the regularity probe.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::phi_functions;
use crate::manifold::WaveFamily;
use crate::models::{Model, ModelKind};
use crate::par::{self, Exec};
use crate::spectral::{sup_norm, Basis, SpectralOperator};

/// Law of the diagonal noise multipliers `b_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum NoiseLaw {
    /// `b_k = 1`, space-time white noise.
    White,
    /// `b_k = (1 + j_k)^{−p}` with `j_k` the wavenumber of `e_k`.
    PowerDecay { p: f64 },
    /// `b_k` listed in eigen order.
    Explicit { multipliers: Vec<f64> },
}

/// `σ B W` with `B e_k = b_k e_k` for the first `K_W` eigenfunctions.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub law: NoiseLaw,
    /// `b_k` in eigen order, length `K_W`.
    pub multipliers: Vec<f64>,
    pub n_noise_modes: usize,
    pub trace_class: bool,
    /// `M_B = sup_k b_k²`.
    pub m_b: f64,
}

impl NoiseModel {
    pub fn new(model: &Model, sigma: f64, law: NoiseLaw, n_noise_modes: Option<usize>) -> Result<NoiseModel> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return invalid(format!("sigma must be finite and non-negative, got {sigma}"));
        }
        let dim = model.dim();
        let kw = match (&law, n_noise_modes) {
            (_, Some(k)) => k,
            (NoiseLaw::Explicit { multipliers }, None) => multipliers.len(),
            _ => dim,
        };
        if kw == 0 || kw > dim {
            return invalid(format!("K_W = {kw} must lie in 1..={dim}"));
        }
        let basis = model.basis();
        let order = model.order();
        let wavenumber = |k: usize| basis.functions()[order[k]].wavenumber as f64;
        let multipliers: Vec<f64> = match &law {
            NoiseLaw::White => vec![1.0; kw],
            NoiseLaw::PowerDecay { p } => {
                if !(*p >= 0.0) {
                    return invalid("power-decay exponent must be non-negative");
                }
                (0..kw).map(|k| (1.0 + wavenumber(k)).powf(-p)).collect()
            }
            NoiseLaw::Explicit { multipliers } => {
                if multipliers.len() < kw {
                    return invalid(format!("{} multipliers listed, K_W = {kw}", multipliers.len()));
                }
                if multipliers.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
                    return invalid("multipliers must be finite and non-negative");
                }
                multipliers[..kw].to_vec()
            }
        };
        let finite_dim = basis.grid().is_none();
        let trace_class = finite_dim
            || match &law {
                NoiseLaw::White => false,
                NoiseLaw::PowerDecay { p } => 2.0 * p > basis.grid().map_or(0.0, |_| 1.0),
                NoiseLaw::Explicit { .. } => true,
            };
        if matches!(model.kind(), ModelKind::NeuralField(_)) && !trace_class {
            return Err(Error::NoiseNotTraceClass(
                "neural field equations need trace-class noise; white noise was requested".into(),
            ));
        }
        let m_b = multipliers.iter().map(|b| b * b).fold(0.0, f64::max);
        Ok(NoiseModel { sigma, law, multipliers, n_noise_modes: kw, trace_class, m_b })
    }

    /// `Σ_k b_k²` over the retained modes.
    pub fn trace_sum(&self) -> f64 {
        self.multipliers.iter().map(|b| b * b).sum()
    }
}

/// Counter-addressable standard normals: the pair for `(path, step, mode)` is
/// a pure function of the seed, independent of evaluation order.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    n_modes: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, n_modes: usize) -> NoiseStream {
        NoiseStream { seed, n_modes }
    }

    fn rng(&self, path: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(path);
        r
    }

    /// Two independent standard normals by Box–Muller from a fixed four-word
    /// slot of the stream.
    pub fn pair(&self, path: u64, step: u64, mode: usize) -> (f64, f64) {
        let mut r = self.rng(path);
        r.set_word_pos(((step * self.n_modes as u64 + mode as u64) * 4) as u128);
        box_muller(&mut r)
    }

    /// All pairs of one path for steps `0..n_steps`, read sequentially.
    pub fn path(&self, path: u64, n_steps: usize) -> Vec<(f64, f64)> {
        let mut r = self.rng(path);
        (0..n_steps * self.n_modes).map(|_| box_muller(&mut r)).collect()
    }
}

fn box_muller<R: RngCore>(r: &mut R) -> (f64, f64) {
    let u1 = 1.0 - r.gen::<f64>();
    let u2: f64 = r.gen();
    let rad = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
    (rad * c, rad * s)
}

/// Brownian increments `ΔW_k` and exact stochastic convolutions
/// `ξ_k = ∫ e^{−λ_k(t_{n+1}−s)} dβ^k_s` per step, indexed `[step·K_W + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    pub h: f64,
    pub n_modes: usize,
    pub dw: Vec<f64>,
    pub xi: Vec<f64>,
}

fn ou_coeffs(lam: f64, h: f64) -> (f64, f64) {
    let c = h * phi_functions(-lam * h)[1];
    let v = if lam * h < 1e-8 { h * (1.0 - lam * h) } else { -(-2.0 * lam * h).exp_m1() / (2.0 * lam) };
    (c, v)
}

impl Increments {
    /// Sample `n_steps` steps of size `h` for the modes with rates `lams`.
    pub fn sample(stream: &NoiseStream, path: u64, lams: &[f64], h: f64, n_steps: usize) -> Increments {
        let k = lams.len();
        assert_eq!(k, stream.n_modes, "stream and rate vector disagree on K_W");
        let z = stream.path(path, n_steps);
        let coef: Vec<(f64, f64)> = lams.iter().map(|&l| ou_coeffs(l, h)).collect();
        let mut dw = vec![0.0; n_steps * k];
        let mut xi = vec![0.0; n_steps * k];
        for n in 0..n_steps {
            for m in 0..k {
                let (z1, z2) = z[n * k + m];
                let (c, v) = coef[m];
                let w = h.sqrt() * z1;
                dw[n * k + m] = w;
                xi[n * k + m] = (c / h) * w + (v - c * c / h).max(0.0).sqrt() * z2;
            }
        }
        Increments { h, n_modes: k, dw, xi }
    }

    pub fn n_steps(&self) -> usize {
        self.dw.len() / self.n_modes
    }

    /// Aggregate `m` consecutive steps: `ΔW` adds, `ξ` adds with the decay of
    /// the remaining sub-steps.
    pub fn coarsen(&self, m: usize, lams: &[f64]) -> Result<Increments> {
        let n = self.n_steps();
        if m == 0 || n % m != 0 {
            return invalid(format!("cannot coarsen {n} steps by a factor {m}"));
        }
        let k = self.n_modes;
        let nc = n / m;
        let mut dw = vec![0.0; nc * k];
        let mut xi = vec![0.0; nc * k];
        for c in 0..nc {
            for q in 0..k {
                for j in 0..m {
                    let f = (c * m + j) * k + q;
                    dw[c * k + q] += self.dw[f];
                    xi[c * k + q] += (-lams[q] * self.h * (m - 1 - j) as f64).exp() * self.xi[f];
                }
            }
        }
        Ok(Increments { h: self.h * m as f64, n_modes: k, dw, xi })
    }

    /// `Σ_n ΔW_{n,k}²` per mode.
    pub fn quadratic_variation(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.n_modes];
        for (i, w) in self.dw.iter().enumerate() {
            q[i % self.n_modes] += w * w;
        }
        q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitFlag {
    None,
    TubeExit,
    BasinExit,
    BlowUp,
}

impl ExitFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitFlag::None => "none",
            ExitFlag::TubeExit => "tube_exit",
            ExitFlag::BasinExit => "basin_exit",
            ExitFlag::BlowUp => "blow_up",
        }
    }
}

/// One simulated path, recorded at every step up to and including exit.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub times: Vec<f64>,
    /// Spectral coefficients of `X_t`.
    pub states: Vec<Vec<f64>>,
    /// Projection phase and E-distance to `Γ` per recorded state.
    pub tube: Vec<(f64, f64)>,
    pub increments: Increments,
    pub seed: u64,
    pub path: u64,
    pub exit_flag: ExitFlag,
    pub exit_time: Option<f64>,
}

/// Exponential Euler for `dX = (LX + N(X))dt + σB dW`.
#[derive(Clone, Debug)]
pub struct Spde<'a> {
    family: &'a WaveFamily,
    noise: &'a NoiseModel,
    pub delta: f64,
    pub blowup_bound: f64,
    pub stop_on_exit: bool,
}

impl<'a> Spde<'a> {
    pub fn new(family: &'a WaveFamily, noise: &'a NoiseModel, delta: f64) -> Result<Spde<'a>> {
        if !(delta > 0.0) {
            return invalid("tube radius must be positive");
        }
        if noise.n_noise_modes > family.model().dim() {
            return invalid("noise has more modes than the model basis");
        }
        Ok(Spde { family, noise, delta, blowup_bound: 1e3, stop_on_exit: true })
    }

    pub fn model(&self) -> &Model {
        self.family.model()
    }

    /// Rates `λ_k` of the noise modes in eigen order.
    pub fn noise_rates(&self) -> Vec<f64> {
        let m = self.model();
        (0..self.noise.n_noise_modes).map(|k| m.rates()[m.order()[k]]).collect()
    }

    pub fn stream(&self, seed: u64) -> NoiseStream {
        NoiseStream::new(seed, self.noise.n_noise_modes)
    }

    pub fn increments(&self, seed: u64, path: u64, dt: f64, n_steps: usize) -> Increments {
        Increments::sample(&self.stream(seed), path, &self.noise_rates(), dt, n_steps)
    }

    /// Simulate with prescribed increments.
    pub fn simulate_with(&self, x0: &[f64], inc: Increments, seed: u64, path: u64) -> Result<PathSample> {
        let model = self.model();
        let basis: &Basis = model.basis();
        let d = model.dim();
        if x0.len() != d {
            return invalid("initial state does not live on the model basis");
        }
        let h = inc.h;
        let rates = model.rates();
        let e: Vec<f64> = rates.iter().map(|l| (-l * h).exp()).collect();
        let p1: Vec<f64> = rates.iter().map(|l| h * phi_functions(-l * h)[1]).collect();
        let order = model.order();
        let (sigma, b) = (self.noise.sigma, &self.noise.multipliers);
        let mut ws = model.workspace();
        let mut ps = self.family.projection_scratch();
        let mut vals = vec![0.0; basis.n_values()];
        let mut nx = vec![0.0; d];
        let mut x = x0.to_vec();
        let mut out = PathSample {
            times: vec![],
            states: vec![],
            tube: vec![],
            increments: inc.clone(),
            seed,
            path,
            exit_flag: ExitFlag::None,
            exit_time: None,
        };
        let n_steps = inc.n_steps();
        for n in 0..=n_steps {
            let t = n as f64 * h;
            basis.to_values(&x, &mut vals, &mut ws.scratch);
            let blown = !(sup_norm(&vals) <= self.blowup_bound);
            let (flag, tube) = if blown {
                (ExitFlag::BlowUp, (f64::NAN, f64::INFINITY))
            } else {
                match self.family.project_with(&x, &mut ps) {
                    Ok(p) if p.distance_e >= self.delta => (ExitFlag::TubeExit, (p.phase.value(), p.distance_e)),
                    Ok(p) => (ExitFlag::None, (p.phase.value(), p.distance_e)),
                    Err(_) => (ExitFlag::BasinExit, (f64::NAN, f64::INFINITY)),
                }
            };
            out.times.push(t);
            out.states.push(x.clone());
            out.tube.push(tube);
            if flag != ExitFlag::None && out.exit_flag == ExitFlag::None {
                out.exit_flag = flag;
                out.exit_time = Some(t);
                if self.stop_on_exit || flag == ExitFlag::BlowUp {
                    break;
                }
            }
            if n == n_steps {
                break;
            }
            model.eval_n(&vals, &mut nx, &mut ws);
            for i in 0..d {
                x[i] = e[i] * x[i] + p1[i] * nx[i];
            }
            let row = &inc.xi[n * inc.n_modes..(n + 1) * inc.n_modes];
            for (k, xi) in row.iter().enumerate() {
                x[order[k]] += sigma * b[k] * xi;
            }
        }
        Ok(out)
    }

    pub fn simulate(&self, x0: &[f64], t_max: f64, dt: f64, seed: u64, path: u64) -> Result<PathSample> {
        let n = steps_for(t_max, dt)?;
        self.simulate_with(x0, self.increments(seed, path, dt, n), seed, path)
    }

    pub fn ensemble(
        &self,
        x0: &[f64],
        t_max: f64,
        dt: f64,
        seed: u64,
        n_paths: usize,
        exec: Exec,
    ) -> Result<Vec<PathSample>> {
        par::try_map(exec, n_paths, |p| self.simulate(x0, t_max, dt, seed, p as u64))
    }
}

/// Number of steps of size `dt` in `t_max`, requiring an integer ratio.
pub fn steps_for(t_max: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_max > 0.0) {
        return invalid("dt and t_max must be positive");
    }
    let n = (t_max / dt).round();
    if ((n * dt) - t_max).abs() > 1e-9 * t_max {
        return invalid(format!("t_max = {t_max} is not a multiple of dt = {dt}"));
    }
    Ok(n as usize)
}

/// `sup_s h^{−1/2}‖(Λ_h − I)X_s‖_E` per `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularityReport {
    pub rows: Vec<(f64, f64)>,
    /// Least-squares slope of `ln value` against `ln h`.
    pub slope: f64,
    /// Values decrease strictly as `h` decreases.
    pub monotone: bool,
}

impl RegularityReport {
    pub fn decays(&self, min_slope: f64) -> bool {
        self.monotone && self.slope >= min_slope
    }
}

pub fn regularity_probe(states: &[Vec<f64>], op: &SpectralOperator, h_list: &[f64]) -> Result<RegularityReport> {
    if states.is_empty() || h_list.is_empty() {
        return invalid("regularity probe needs a non-empty path and h list");
    }
    let basis = op.basis();
    let rates = op.rates();
    let mut sc = basis.scratch();
    let mut vals = vec![0.0; basis.n_values()];
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        if !(h > 0.0) {
            return invalid("probe steps must be positive");
        }
        let mut sup = 0.0f64;
        for x in states {
            let y: Vec<f64> = x.iter().zip(rates).map(|(c, l)| (-l * h).exp_m1() * c).collect();
            basis.to_values(&y, &mut vals, &mut sc);
            sup = sup.max(sup_norm(&vals));
        }
        rows.push((h, sup / h.sqrt()));
    }
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let monotone = sorted.windows(2).all(|w| w[1].1 < w[0].1);
    let pts: Vec<(f64, f64)> =
        sorted.iter().filter(|r| r.1 > 0.0).map(|r| (r.0.ln(), r.1.ln())).collect();
    let slope = fit_slope(&pts);
    Ok(RegularityReport { rows, slope, monotone })
}

/// Least-squares slope through `(x, y)` points; NaN for fewer than two.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Empirical distribution of `τ_δ ∧ t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitStatistics {
    pub n: usize,
    pub n_exit: usize,
    pub exit_fraction: f64,
    pub mean: f64,
    pub median: f64,
    /// `(t, P(τ_δ > t))` at each observed exit time.
    pub survival: Vec<(f64, f64)>,
}

pub fn exit_statistics(samples: &[PathSample], t_max: f64) -> Result<ExitStatistics> {
    if samples.len() < 2 {
        return invalid("exit statistics need at least two samples");
    }
    let n = samples.len();
    let mut taus: Vec<f64> = samples.iter().map(|s| s.exit_time.unwrap_or(t_max).min(t_max)).collect();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_exit = samples.iter().filter(|s| s.exit_time.map_or(false, |t| t < t_max)).count();
    let mean = taus.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { taus[n / 2] } else { 0.5 * (taus[n / 2 - 1] + taus[n / 2]) };
    let mut survival = vec![(0.0, 1.0)];
    let mut alive = n;
    for &t in taus.iter().filter(|&&t| t < t_max) {
        alive -= 1;
        survival.push((t, alive as f64 / n as f64));
    }
    Ok(ExitStatistics { n, n_exit, exit_fraction: n_exit as f64 / n as f64, mean, median, survival })
}

/// Resampling indices for bootstrap intervals, one stream per round.
pub fn bootstrap_indices(n: usize, seed: u64, round: u64) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(round);
    (0..n).map(|_| r.gen_range(0..n)).collect()
}
