//! Term-by-term bookkeeping of the Itô formula for the isochronal phase along
//! simulated paths, the coupled mesh-refinement sweep of its residual, and the
//! six-term partition of the phase increment.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use crate::error::{invalid, Result};
use crate::isochron::PhaseMap;
use crate::manifold::wrap_centered;
use crate::models::ModelKind;
use crate::par::{self, Exec};
use crate::spectral::dot;
use crate::stochastic::{fit_slope, Increments, NoiseModel, PathSample, Spde};

/// Isochron data at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDerivs {
    /// `π(x)` in `[0, P)`.
    pub pi: f64,
    /// Horizon of the fixed-horizon map used for derivatives.
    pub horizon: f64,
    /// `ψ_T(x)` at that horizon.
    pub center: f64,
    /// Riesz representative of `Dπ(x)` in coefficients.
    pub grad: Vec<f64>,
    /// `Dπ(x)V(x)`.
    pub drift: f64,
    /// `D²π(x)[e_k, e_k]` for the traced modes.
    pub d2: Vec<f64>,
}

/// Computes and memoizes [`StateDerivs`] keyed by the bits of the state.
pub struct Ledger<'a> {
    pm: &'a PhaseMap,
    noise: &'a NoiseModel,
    k_trace: usize,
    cache: Mutex<HashMap<u64, Arc<StateDerivs>>>,
}

fn state_key(x: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in x {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

impl<'a> Ledger<'a> {
    /// `k_trace` truncates `Σ_k b_k² D²π[e_k,e_k]`; it is capped at `K_W`.
    pub fn new(pm: &'a PhaseMap, noise: &'a NoiseModel, k_trace: usize) -> Result<Ledger<'a>> {
        if k_trace == 0 {
            return invalid("trace truncation must be positive");
        }
        let k_trace = k_trace.min(noise.n_noise_modes);
        Ok(Ledger { pm, noise, k_trace, cache: Mutex::new(HashMap::new()) })
    }

    pub fn phase_map(&self) -> &PhaseMap {
        self.pm
    }

    pub fn noise(&self) -> &NoiseModel {
        self.noise
    }

    pub fn k_trace(&self) -> usize {
        self.k_trace
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn derivs(&self, x: &[f64]) -> Result<Arc<StateDerivs>> {
        let key = state_key(x);
        if let Some(d) = self.cache.lock().unwrap().get(&key) {
            return Ok(d.clone());
        }
        let pm = self.pm;
        let r = pm.resolve(x)?;
        let horizon = pm.horizon_for(r.time);
        let center = pm.at_horizon(x, horizon)?;
        let grad = pm.grad_at(x, horizon)?;
        let model = pm.family().model();
        let mut ws = model.workspace();
        let mut v = vec![0.0; x.len()];
        model.eval_vector_field(x, &mut v, &mut ws);
        let drift = dot(&grad, &v);
        let order = model.order();
        let d2 = (0..self.k_trace)
            .map(|k| {
                if self.noise.multipliers[k] == 0.0 || self.noise.sigma == 0.0 {
                    return Ok(0.0);
                }
                let mut e = vec![0.0; x.len()];
                e[order[k]] = 1.0;
                pm.d2pi_diag_at(x, &e, horizon, center)
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = Arc::new(StateDerivs { pi: r.phase.value(), horizon, center, grad, drift, d2 });
        self.cache.lock().unwrap().insert(key, d.clone());
        Ok(d)
    }

    /// `(σ²/2) Σ_k b_k² D²π[e_k,e_k]` at a state.
    pub fn trace_rate(&self, d: &StateDerivs) -> f64 {
        let b = &self.noise.multipliers;
        0.5 * self.noise.sigma.powi(2) * d.d2.iter().zip(b).map(|(v, b)| b * b * v).sum::<f64>()
    }

    /// `σ Σ_k b_k Dπ e_k ΔW_k` for one step.
    pub fn martingale_step(&self, d: &StateDerivs, dw: &[f64]) -> f64 {
        let order = self.pm.family().model().order();
        let b = &self.noise.multipliers;
        self.noise.sigma * dw.iter().enumerate().map(|(k, w)| b[k] * d.grad[order[k]] * w).sum::<f64>()
    }

    /// `σ² Σ_k b_k² (Dπ e_k)²`, the instantaneous quadratic-variation rate.
    pub fn qv_rate(&self, d: &StateDerivs) -> f64 {
        let order = self.pm.family().model().order();
        let b = &self.noise.multipliers;
        self.noise.sigma.powi(2) * b.iter().enumerate().map(|(k, b)| (b * d.grad[order[k]]).powi(2)).sum::<f64>()
    }

    pub fn decompose(&self, sample: &PathSample, exec: Exec) -> Result<ItoLedger> {
        let n = sample.states.len();
        if n == 0 {
            return invalid("empty path");
        }
        let derivs = par::try_map(exec, n, |i| self.derivs(&sample.states[i]).map_err(|e| e.at(sample.times[i])))?;
        let period = self.pm.family().period();
        let h = sample.increments.h;
        let kw = sample.increments.n_modes;
        let mut led = ItoLedger::with_capacity(n, period);
        let (mut pi, mut dr, mut tr, mut ma, mut qv, mut pq) = (derivs[0].pi, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if i > 0 {
                let a = &derivs[i - 1];
                pi += wrap_centered(derivs[i].pi - a.pi, period);
                let dm = self.martingale_step(a, &sample.increments.dw[(i - 1) * kw..i * kw]);
                dr += a.drift * h;
                tr += self.trace_rate(a) * h;
                ma += dm;
                qv += dm * dm;
                pq += self.qv_rate(a) * h;
            }
            led.times.push(sample.times[i]);
            led.pi.push(pi);
            led.drift.push(dr);
            led.trace.push(tr);
            led.martingale.push(ma);
            led.residual.push(pi - (led.pi[0] + dr + tr + ma));
            led.quad_var.push(qv);
            led.predicted_qv.push(pq);
        }
        led.drift_rates = derivs.iter().map(|d| d.drift).collect();
        led.trace_rates = derivs.iter().map(|d| self.trace_rate(d)).collect();
        Ok(led)
    }
}

/// Running terms of the Itô formula along one path. `pi` is unwrapped.
#[derive(Clone, Debug, PartialEq)]
pub struct ItoLedger {
    pub period: f64,
    pub times: Vec<f64>,
    pub pi: Vec<f64>,
    pub drift: Vec<f64>,
    pub trace: Vec<f64>,
    pub martingale: Vec<f64>,
    pub residual: Vec<f64>,
    /// `Σ (ΔM)²`.
    pub quad_var: Vec<f64>,
    /// `∫ σ² Σ_k b_k² (Dπ e_k)² ds`.
    pub predicted_qv: Vec<f64>,
    /// `Dπ V` per state.
    pub drift_rates: Vec<f64>,
    /// `(σ²/2) Σ_k b_k² D²π[e_k,e_k]` per state.
    pub trace_rates: Vec<f64>,
}

impl ItoLedger {
    fn with_capacity(n: usize, period: f64) -> ItoLedger {
        let v = || Vec::with_capacity(n);
        ItoLedger {
            period,
            times: v(),
            pi: v(),
            drift: v(),
            trace: v(),
            martingale: v(),
            residual: v(),
            quad_var: v(),
            predicted_qv: v(),
            drift_rates: v(),
            trace_rates: v(),
        }
    }

    pub fn sup_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn last(&self) -> usize {
        self.times.len() - 1
    }
}

pub fn ito_decompose(ledger: &Ledger, sample: &PathSample, exec: Exec) -> Result<ItoLedger> {
    ledger.decompose(sample, exec)
}

/// Mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Decreasing steps; each an integer multiple of the last.
    pub dt_list: Vec<f64>,
    pub n_paths: usize,
    pub t_max: f64,
    pub seed: u64,
}

/// Ensemble statistics at one mesh.
#[derive(Clone, Debug)]
pub struct SweepLevel {
    pub dt: f64,
    pub rms_sup_residual: f64,
    pub martingale_mean: f64,
    pub martingale_se: f64,
    /// `Σ_paths Σ(ΔM)² / Σ_paths ∫σ²Σ b_k²(Dπ e_k)² ds`.
    pub qv_ratio: f64,
    pub samples: Vec<PathSample>,
    pub ledgers: Vec<ItoLedger>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub levels: Vec<SweepLevel>,
    pub period: f64,
    /// Least-squares slope of `ln rms` against `ln dt`.
    pub slope: f64,
    pub monotone: bool,
}

impl SweepReport {
    pub fn pass(&self) -> bool {
        self.slope >= 0.5 && self.monotone
    }

    pub fn finest(&self) -> &SweepLevel {
        self.levels.last().unwrap()
    }
}

/// Runs the ledger on coupled paths at every mesh of `cfg.dt_list`; the
/// increments of coarse meshes aggregate those of the finest.
pub fn residual_order_sweep(
    ledger: &Ledger,
    spde: &Spde,
    x0: &[f64],
    cfg: &SweepConfig,
    exec: Exec,
) -> Result<SweepReport> {
    let dts = &cfg.dt_list;
    if dts.is_empty() || dts.windows(2).any(|w| !(w[1] < w[0])) {
        return invalid("dt_list must be non-empty and strictly decreasing");
    }
    if cfg.n_paths < 2 {
        return invalid("the sweep needs at least two paths");
    }
    let fine = *dts.last().unwrap();
    let factors: Vec<usize> = dts
        .iter()
        .map(|dt| {
            let m = (dt / fine).round();
            if (m * fine - dt).abs() > 1e-9 * dt {
                invalid(format!("dt = {dt} is not a multiple of {fine}"))
            } else {
                Ok(m as usize)
            }
        })
        .collect::<Result<_>>()?;
    let n_fine = crate::stochastic::steps_for(cfg.t_max, fine)?;
    let lams = spde.noise_rates();
    let fine_inc: Vec<Increments> = par::map(exec, cfg.n_paths, |p| spde.increments(cfg.seed, p as u64, fine, n_fine));
    let mut levels = Vec::with_capacity(dts.len());
    for (&dt, &m) in dts.iter().zip(&factors) {
        let per_path = par::try_map(exec, cfg.n_paths, |p| {
            let inc = fine_inc[p].coarsen(m, &lams)?;
            let s = spde.simulate_with(x0, inc, cfg.seed, p as u64)?;
            let l = ledger.decompose(&s, Exec::Sequential)?;
            Ok::<_, crate::Error>((s, l))
        })?;
        let (samples, ledgers): (Vec<_>, Vec<_>) = per_path.into_iter().unzip();
        let sups: Vec<f64> = ledgers.iter().map(|l| l.sup_residual()).collect();
        let rms = (sups.iter().map(|s| s * s).sum::<f64>() / sups.len() as f64).sqrt();
        let finals: Vec<f64> = ledgers.iter().map(|l| l.martingale[l.last()]).collect();
        let (mm, mse) = mean_se(&finals);
        let qv: f64 = ledgers.iter().map(|l| l.quad_var[l.last()]).sum();
        let pq: f64 = ledgers.iter().map(|l| l.predicted_qv[l.last()]).sum();
        levels.push(SweepLevel {
            dt,
            rms_sup_residual: rms,
            martingale_mean: mm,
            martingale_se: mse,
            qv_ratio: qv / pq,
            samples,
            ledgers,
        });
    }
    let pts: Vec<(f64, f64)> = levels.iter().map(|l| (l.dt.ln(), l.rms_sup_residual.ln())).collect();
    let slope = fit_slope(&pts);
    let monotone = levels.windows(2).all(|w| w[1].rms_sup_residual < w[0].rms_sup_residual);
    Ok(SweepReport { levels, period: ledger.pm.family().period(), slope, monotone })
}

/// The six partition sums at mesh `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionDiagnostics {
    pub h: f64,
    /// `I … VI`.
    pub terms: [f64; 6],
    /// `π(X_t) ⊖ π(X_0)`, unwrapped.
    pub increment: f64,
}

impl PartitionDiagnostics {
    pub fn identity_error(&self) -> f64 {
        (self.terms.iter().sum::<f64>() - self.increment).abs()
    }
}

/// Splits each increment `X_{t_{i+1}} − X_{t_i} = U¹ + U² + σU³` on the mesh
/// `h = m·dt`, with `U¹ = (Λ_h − I)X_{t_i}`, `U³` the stochastic convolution
/// and `U²` the rest, and evaluates
/// `I = ΣDπ[U¹]`, `II = ΣDπ[U²]`, `III = σΣDπ[U³]`, `V = σΣD²π[U¹+U², U³]`,
/// `VI = ½σ²ΣD²π[U³,U³]` at the left state. `IV` closes the identity: it holds
/// `½ΣD²π[U¹+U², U¹+U²]` plus every higher-order Taylor remainder.
pub fn partition_terms(ledger: &Ledger, spde: &Spde, sample: &PathSample, m: usize) -> Result<PartitionDiagnostics> {
    let pm = ledger.pm;
    let model = pm.family().model();
    let period = pm.family().period();
    let inc = sample.increments.coarsen(m, &spde.noise_rates())?;
    let n_int = inc.n_steps();
    if sample.states.len() < n_int * m + 1 {
        return invalid("partition needs a path that did not exit early");
    }
    let h = inc.h;
    let sigma = ledger.noise.sigma;
    let (rates, order) = (model.rates(), model.order());
    let b = &ledger.noise.multipliers;
    let mut terms = [0.0; 6];
    let mut increment = 0.0;
    for i in 0..n_int {
        let xa = &sample.states[i * m];
        let xb = &sample.states[(i + 1) * m];
        let da = ledger.derivs(xa)?;
        let db = ledger.derivs(xb)?;
        let dpi = wrap_centered(db.pi - da.pi, period);
        increment += dpi;
        let u1: Vec<f64> = xa.iter().zip(rates).map(|(x, l)| (-l * h).exp_m1() * x).collect();
        let mut u3 = vec![0.0; xa.len()];
        for k in 0..inc.n_modes {
            u3[order[k]] += b[k] * inc.xi[i * inc.n_modes + k];
        }
        let u2: Vec<f64> = (0..xa.len()).map(|j| xb[j] - xa[j] - u1[j] - sigma * u3[j]).collect();
        let u12: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a + b).collect();
        let t1 = dot(&da.grad, &u1);
        let t2 = dot(&da.grad, &u2);
        let t3 = sigma * dot(&da.grad, &u3);
        let noisy = sigma > 0.0 && u3.iter().any(|v| *v != 0.0);
        let t5 = if noisy && u12.iter().any(|v| *v != 0.0) {
            sigma * pm.d2pi_cross_at(xa, &u12, &u3, da.horizon)?
        } else {
            0.0
        };
        let t6 = if noisy { 0.5 * sigma * sigma * pm.d2pi_diag_at(xa, &u3, da.horizon, da.center)? } else { 0.0 };
        let t4 = dpi - (t1 + t2 + t3 + t5 + t6);
        for (acc, v) in terms.iter_mut().zip([t1, t2, t3, t4, t5, t6]) {
            *acc += v;
        }
    }
    Ok(PartitionDiagnostics { h, terms, increment })
}

/// Comparison of ledger rates with the closed-form phase equation of the
/// planar oracle, `dΘ = dt + σ∇Θ·dW`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSdeCheck {
    /// `max |Dπ V + trace rate − 1|` over all visited states.
    pub drift_error: f64,
    /// Per path: realized `Σ(Δπ − (drift + trace)h)²` minus `∫σ²(1+κ²)/r² ds`.
    pub qv_differences: Vec<f64>,
    pub qv_mean: f64,
    pub qv_se: f64,
    /// Mean analytic quadratic variation, for scale.
    pub qv_scale: f64,
}

impl OracleSdeCheck {
    pub fn z_score(&self) -> f64 {
        self.qv_mean.abs() / self.qv_se
    }
}

pub fn oracle_sde_check(ledger: &Ledger, samples: &[PathSample], ledgers: &[ItoLedger]) -> Result<OracleSdeCheck> {
    let spec = match ledger.pm.family().model().kind() {
        ModelKind::OracleOscillator(s) => s.clone(),
        _ => return invalid("the closed-form phase equation exists only for the oracle model"),
    };
    let sigma = ledger.noise.sigma;
    let mut drift_error = 0.0f64;
    let mut diffs = Vec::with_capacity(samples.len());
    let mut scale = 0.0;
    for (s, l) in samples.iter().zip(ledgers) {
        let h = s.increments.h;
        let mut realized = 0.0;
        let mut analytic = 0.0;
        for i in 0..l.times.len() {
            let rate = l.drift_rates[i] + l.trace_rates[i];
            drift_error = drift_error.max((rate - 1.0).abs());
            if i + 1 < l.times.len() {
                let dm = l.pi[i + 1] - l.pi[i] - rate * h;
                realized += dm * dm;
                let (x, y) = (s.states[i][0], s.states[i][1]);
                analytic += sigma * sigma * (1.0 + spec.kappa * spec.kappa) / (x * x + y * y) * h;
            }
        }
        diffs.push(realized - analytic);
        scale += analytic / samples.len() as f64;
    }
    let (m, se) = mean_se(&diffs);
    Ok(OracleSdeCheck { drift_error, qv_differences: diffs, qv_mean: m, qv_se: se, qv_scale: scale })
}

/// Partition sums at each mesh `factor·dt`, accumulated over every path that
/// ran to the end.
pub fn partition_ensemble(
    ledger: &Ledger,
    spde: &Spde,
    samples: &[PathSample],
    factors: &[usize],
    exec: Exec,
) -> Result<Vec<PartitionDiagnostics>> {
    let full: Vec<&PathSample> = samples.iter().filter(|s| s.exit_time.is_none()).collect();
    if full.is_empty() {
        return invalid("no path ran to the end");
    }
    factors
        .iter()
        .map(|&m| {
            let parts = par::try_map(exec, full.len(), |i| partition_terms(ledger, spde, full[i], m))?;
            let mut out = PartitionDiagnostics { h: parts[0].h, terms: [0.0; 6], increment: 0.0 };
            for p in &parts {
                for (a, b) in out.terms.iter_mut().zip(p.terms) {
                    *a += b;
                }
                out.increment += p.increment;
            }
            Ok(out)
        })
        .collect()
}

/// Paths and their ledgers at a single step.
pub fn ledger_ensemble(
    ledger: &Ledger,
    spde: &Spde,
    x0: &[f64],
    t_max: f64,
    dt: f64,
    seed: u64,
    n_paths: usize,
    exec: Exec,
) -> Result<(Vec<PathSample>, Vec<ItoLedger>)> {
    let out = par::try_map(exec, n_paths, |p| {
        let s = spde.simulate(x0, t_max, dt, seed, p as u64)?;
        let l = ledger.decompose(&s, Exec::Sequential)?;
        Ok::<_, crate::Error>((s, l))
    })?;
    Ok(out.into_iter().unzip())
}
