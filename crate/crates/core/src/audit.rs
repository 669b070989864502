//! Numerical certification of the standing hypotheses for a configured model
//! and wave family, gathered into one machine-readable report.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::flow_trace_sums;
use crate::isochron::PhaseMap;
use crate::manifold::audit_manifold;
use crate::models::{random_direction, ModelKind};
use crate::par::{self, Exec};
use crate::spectral::{sup_norm, Field};
use crate::stochastic::{regularity_probe, steps_for, ExitFlag, NoiseLaw, NoiseModel, Spde};

/// Requested noise, validated against the model by the audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub law: NoiseLaw,
    /// `K_W`; all modes when absent.
    #[serde(default)]
    pub n_modes: Option<usize>,
}

impl NoiseSpec {
    pub fn build(&self, model: &crate::models::Model) -> Result<NoiseModel> {
        NoiseModel::new(model, self.sigma, self.law.clone(), self.n_modes)
    }
}

/// Thresholds and sample sizes of the audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: u64,
    pub semigroup_samples: usize,
    pub semigroup_times: Vec<f64>,
    /// Allowed excess of `‖Λ_t x‖/‖x‖` over `e^{−ωt}`, relative.
    pub decay_slack: f64,
    pub trace_window: [f64; 2],
    /// Relative change of the `K_{s,r}` partial sum between half and full truncation.
    pub trace_cauchy_tol: f64,
    pub gap_max: f64,
    pub smoothness_tol: f64,
    pub manifold_samples: usize,
    pub bilipschitz_max: f64,
    pub tangent_min_ratio: f64,
    pub tangent_tol: f64,
    /// Lower bound on `min_α‖Dγ_α‖_E`, relative to `min_α‖γ_α‖_E`.
    pub dgamma_min: f64,
    pub invariance_tol: f64,
    pub stability_tol: f64,
    pub regularity_t: f64,
    pub regularity_dt: f64,
    pub regularity_h: Vec<f64>,
    pub regularity_min_slope: f64,
    pub trace_points: usize,
    pub flow_trace_times: Vec<f64>,
    pub trace_bound: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 1,
            semigroup_samples: 100,
            semigroup_times: vec![0.01, 0.1, 1.0],
            decay_slack: 1e-10,
            trace_window: [0.5, 1.0],
            trace_cauchy_tol: 1e-10,
            gap_max: 1e3,
            smoothness_tol: 1e-6,
            manifold_samples: 16,
            bilipschitz_max: 10.0,
            tangent_min_ratio: 0.5,
            tangent_tol: 1e-6,
            dgamma_min: 1e-6,
            invariance_tol: 1e-6,
            stability_tol: 1e-4,
            regularity_t: 0.5,
            regularity_dt: 1e-3,
            regularity_h: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3],
            regularity_min_slope: 0.25,
            trace_points: 3,
            flow_trace_times: vec![0.1, 0.25, 0.5, 1.0],
            trace_bound: 1e6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotApplicable => "NOT-APPLICABLE",
        }
    }

    fn of(ok: bool) -> Status {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// One audited clause.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// The hypothesis the check certifies.
    pub clause: &'static str,
    pub statement: String,
    pub measured: f64,
    pub threshold: f64,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<Check>,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `key = value` lines, one block per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "timestamp = {}", self.timestamp);
        let _ = writeln!(s, "overall = {}", if self.pass() { "PASS" } else { "FAIL" });
        for c in &self.checks {
            let _ = writeln!(s, "check.{}.clause = {}", c.name, c.clause);
            let _ = writeln!(s, "check.{}.statement = {}", c.name, c.statement);
            let _ = writeln!(s, "check.{}.measured = {:e}", c.name, c.measured);
            let _ = writeln!(s, "check.{}.threshold = {:e}", c.name, c.threshold);
            let _ = writeln!(s, "check.{}.status = {}", c.name, c.status.as_str());
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>13} {:>13}  {}", "check", "measured", "threshold", "status");
        for c in &self.checks {
            let _ = writeln!(s, "{:<28} {:>13.4e} {:>13.4e}  {}", c.name, c.measured, c.threshold, c.status.as_str());
        }
        let _ = writeln!(s, "overall: {}", if self.pass() { "PASS" } else { "FAIL" });
        s
    }
}

struct Builder(Vec<Check>);

impl Builder {
    fn upper(&mut self, name: &'static str, clause: &'static str, statement: String, measured: f64, threshold: f64) {
        let status = Status::of(measured.is_finite() && measured <= threshold);
        self.0.push(Check { name, clause, statement, measured, threshold, status });
    }

    fn lower(&mut self, name: &'static str, clause: &'static str, statement: String, measured: f64, threshold: f64) {
        let status = Status::of(measured.is_finite() && measured >= threshold);
        self.0.push(Check { name, clause, statement, measured, threshold, status });
    }

    fn not_applicable(&mut self, name: &'static str, clause: &'static str, statement: String) {
        self.0.push(Check { name, clause, statement, measured: f64::NAN, threshold: f64::NAN, status: Status::NotApplicable });
    }

    fn fail(&mut self, name: &'static str, clause: &'static str, statement: String) {
        self.0.push(Check { name, clause, statement, measured: f64::NAN, threshold: f64::NAN, status: Status::Fail });
    }
}

const C_SMOOTH: &str = "nonlinearity is C^4 on E";
const C_DECAY: &str = "L generates a semigroup with |Λ_t| <= exp(-ωt) on H and E";
const C_TRACE: &str = "eigenbasis with K_{s,r} = sup_t Σ|Λ_t e_k|_E finite";
const C_GAP: &str = "(λ_{k+1} - λ_k)^{-1} ln(λ_{k+1}/λ_k) <= C_λ uniformly in k";
const C_BILIP: &str = "φ_t bi-Lipschitz on Γ uniformly in t";
const C_TANGENT: &str = "Dφ_t(γ_α) invertible with bounded inverse";
const C_PARAM: &str = "α -> γ_α is C^1 with invertible derivative";
const C_STABLE: &str = "Γ is a stable invariant manifold";
const C_MILD: &str = "unique E-valued mild solution";
const C_REG: &str = "sup_s h^{-1/2}|(Λ_h - I)X_s|_E -> 0 as h -> 0";

/// Runs every check; failures are recorded, only construction errors abort.
pub fn run_audit(pm: &PhaseMap, noise: &NoiseSpec, cfg: &AuditConfig, config_hash: &str, exec: Exec) -> Result<AuditReport> {
    let family = pm.family();
    let model = family.model();
    let prop = pm.propagator();
    let basis = model.basis();
    let nfe = matches!(model.kind(), ModelKind::NeuralField(_));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = Builder(Vec::new());

    let x0 = family.profile();
    let mut smooth = 0.0f64;
    for _ in 0..4 {
        let v = random_direction(basis, &mut rng, 1.0);
        let w = random_direction(basis, &mut rng, 1.0);
        let eps = 1e-5;
        let shift = |s: f64, d: &Field| {
            Field::from_coeffs(basis, x0.coeffs.iter().zip(&d.coeffs).map(|(a, b)| a + s * b).collect())
        };
        let np = model.nonlinearity(&shift(eps, &v))?;
        let nm = model.nonlinearity(&shift(-eps, &v))?;
        let dn = model.d_nonlinearity(x0, &v)?;
        let fd: Vec<f64> = np.values.iter().zip(&nm.values).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
        let scale = sup_norm(&dn.values).max(1.0);
        smooth = smooth.max(fd.iter().zip(&dn.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
        let dp = model.d_nonlinearity(&shift(eps, &v), &w)?;
        let dm = model.d_nonlinearity(&shift(-eps, &v), &w)?;
        let d2 = model.d2_nonlinearity(x0, &v, &w)?;
        let fd2: Vec<f64> = dp.values.iter().zip(&dm.values).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
        let scale = sup_norm(&d2.values).max(1.0);
        smooth = smooth.max(fd2.iter().zip(&d2.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    }
    b.upper(
        "nonlinearity-smoothness",
        C_SMOOTH,
        "max relative mismatch of DN and D2N against central differences of N and DN".into(),
        smooth,
        cfg.smoothness_tol,
    );

    match model.operator() {
        None => {
            b.not_applicable("semigroup-decay", C_DECAY, "no linear part".into());
            b.not_applicable("eigenbasis-trace", C_TRACE, "no linear part".into());
            b.not_applicable("eigenvalue-gap", C_GAP, "no linear part".into());
        }
        Some(op) => {
            let omega = op.omega();
            let mut worst = f64::NEG_INFINITY;
            for _ in 0..cfg.semigroup_samples {
                let x = random_direction(basis, &mut rng, 1.0);
                for &t in &cfg.semigroup_times {
                    let y = op.semigroup(t, &x)?;
                    let env = (-omega * t).exp();
                    let rh = y.h_norm() / x.h_norm() / env - 1.0;
                    let re = y.e_norm() / x.e_norm() / env - 1.0;
                    worst = worst.max(rh).max(re);
                }
            }
            b.upper(
                "semigroup-decay",
                C_DECAY,
                format!("max over samples of |Λ_t x|/(exp(-ωt)|x|) - 1 in H and E, ω = {omega:.6}"),
                worst,
                cfg.decay_slack,
            );
            if nfe {
                b.not_applicable(
                    "eigenbasis-trace",
                    C_TRACE,
                    "neural field: the linear part is not smoothing and the noise is trace class, so the clause is not needed".into(),
                );
                b.not_applicable(
                    "eigenvalue-gap",
                    C_GAP,
                    "neural field: the clause is only needed for non-trace-class noise".into(),
                );
            } else {
                let [s, r] = cfg.trace_window;
                let full = op.trace_constant_truncated(s, r, op.dim())?;
                let half = op.trace_constant_truncated(s, r, op.dim() / 2)?;
                let rel = (full.partial - half.partial).abs() / full.partial;
                let tail = full.tail_bound.map_or(String::new(), |t| format!(", tail bound {t:.3e}"));
                b.upper(
                    "eigenbasis-trace",
                    C_TRACE,
                    format!("K_{{{s},{r}}} = {:.6e}; relative change from K/2 to K modes{tail}", full.partial),
                    rel,
                    cfg.trace_cauchy_tol,
                );
                match op.gap_constant() {
                    Ok(c) => b.upper("eigenvalue-gap", C_GAP, format!("C_λ = {c:.6}"), c, cfg.gap_max),
                    Err(e) => b.fail("eigenvalue-gap", C_GAP, e.to_string()),
                }
            }
        }
    }

    let ma = audit_manifold(family, prop, cfg.manifold_samples, cfg.seed)?;
    let c = ma
        .bilipschitz_e
        .iter()
        .chain(&ma.bilipschitz_h)
        .map(|&(_, mn, mx)| mx.max(1.0 / mn))
        .fold(0.0, f64::max);
    b.upper(
        "manifold-bilipschitz",
        C_BILIP,
        "largest sampled Lipschitz constant of φ_t and its inverse on Γ, t in {1, 5, 10}, E and H norms".into(),
        c,
        cfg.bilipschitz_max,
    );
    let ratio = ma.tangent.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let err = ma.tangent.iter().map(|t| t.2).fold(0.0, f64::max);
    b.lower(
        "tangent-invertibility",
        C_TANGENT,
        format!(
            "min |Dφ_t Dγ_α|_E/|Dγ_α|_E along the tangent only (max |Dφ_t Dγ_α - Dγ_(α+ct)|_E = {err:.3e}); \
             invertibility on all of E is not numerically certifiable"
        ),
        if err <= cfg.tangent_tol { ratio } else { f64::NAN },
        cfg.tangent_min_ratio,
    );
    b.lower(
        "parametrization-derivative",
        C_PARAM,
        "min_α |Dγ_α|_E relative to min_α |γ_α|_E".into(),
        ma.min_dgamma_e / family.min_profile_e(),
        cfg.dgamma_min,
    );
    b.upper("manifold-invariance", C_STABLE, "sup_{t<=10} dist_E(φ_t(γ_0), Γ)".into(), ma.invariance, cfg.invariance_tol);
    b.upper(
        "manifold-stability",
        C_STABLE,
        "max dist_E(φ_20(γ_0 + 0.05 v), Γ) over 20 unit directions v".into(),
        ma.stability,
        cfg.stability_tol,
    );

    match noise.build(model) {
        Err(e) => {
            b.fail("mild-solution", C_MILD, format!("noise rejected: {e}; trace class required"));
            b.fail("regularity", C_REG, "not evaluated: no admissible noise".into());
        }
        Ok(nm) => {
            let mut spde = Spde::new(family, &nm, family.default_delta())?;
            spde.stop_on_exit = false;
            let n = steps_for(cfg.regularity_t, cfg.regularity_dt)?;
            let inc = spde.increments(cfg.seed, 0, cfg.regularity_dt, n);
            let sample = spde.simulate_with(&x0.coeffs, inc, cfg.seed, 0)?;
            let finite = sample.exit_flag != ExitFlag::BlowUp && sample.states.iter().flatten().all(|v| v.is_finite());
            let kind = if nm.trace_class { "trace class" } else { "white, admissible for this model" };
            b.lower(
                "mild-solution",
                C_MILD,
                format!("noise is {kind}; simulated path stays finite up to t = {}", cfg.regularity_t),
                if finite { 1.0 } else { 0.0 },
                1.0,
            );
            match model.operator() {
                None => b.not_applicable("regularity", C_REG, "no linear part".into()),
                Some(op) => {
                    let rep = regularity_probe(&sample.states, op, &cfg.regularity_h)?;
                    let rows: Vec<String> = rep.rows.iter().map(|(h, v)| format!("{h:e}:{v:.4e}")).collect();
                    b.lower(
                        "regularity",
                        C_REG,
                        format!(
                            "log-log slope of the probe over h (monotone = {}; {})",
                            rep.monotone,
                            rows.join(" ")
                        ),
                        if rep.monotone { rep.slope } else { f64::NAN },
                        cfg.regularity_min_slope,
                    );
                }
            }
        }
    }

    let points: Vec<Field> = (0..cfg.trace_points)
        .map(|_| {
            let a = rng.gen::<f64>() * family.period();
            let v = random_direction(basis, &mut rng, 2.0);
            let g = family.gamma(family.phase(a));
            let s = 0.5 * family.default_delta();
            Field::from_coeffs(basis, g.coeffs.iter().zip(&v.coeffs).map(|(a, b)| a + s * b).collect())
        })
        .collect();
    if nfe || model.operator().is_none() {
        let why = if nfe { "neural field: the trace bounds rest on the eigenbasis clause" } else { "no linear part" };
        b.not_applicable("flow-trace-bounds", C_TRACE, why.into());
        b.not_applicable("isochron-trace-bounds", C_TRACE, why.into());
    } else {
        let k = model.dim();
        let mut flow_max = 0.0f64;
        for x in &points {
            for &s in &cfg.flow_trace_times {
                let ts = flow_trace_sums(prop, x, s, k, exec)?;
                flow_max = flow_max.max(ts.first).max(ts.first_sq).max(ts.second);
            }
        }
        b.upper(
            "flow-trace-bounds",
            C_TRACE,
            format!("max of the three flow trace sums over {} tube points and s in {:?}, K = {k}", points.len(), cfg.flow_trace_times),
            flow_max,
            cfg.trace_bound,
        );
        let pi_max = par::try_map(Exec::Sequential, points.len(), |i| {
            let ts = pm.pi_trace_sums(&points[i].coeffs, k, exec)?;
            Ok::<_, crate::Error>(ts.first.max(ts.first_sq).max(ts.second))
        })?
        .into_iter()
        .fold(0.0, f64::max);
        b.upper(
            "isochron-trace-bounds",
            C_TRACE,
            format!("max of the three isochron trace sums over {} tube points, K = {k}", points.len()),
            pi_max,
            cfg.trace_bound,
        );
    }

    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    Ok(AuditReport { checks: b.0, config_hash: config_hash.to_string(), timestamp })
}
