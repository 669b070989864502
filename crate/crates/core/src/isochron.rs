//! The isochron map `π(x) = lim_{t→∞} γ⁻¹(φ_t(x)) ⊖ ct` and its derivatives.
//!
//! `π` is resolved by integrating until the state is within `tol_gamma` of
//! `Γ`, projecting, and rewinding the on-manifold drift. Derivatives are taken
//! of the fixed-horizon map `ψ_T(x) = β(φ_T(x)) − cT`, with `T` chosen from the
//! base point, so that every stencil evaluates the same smooth function.
//! The horizon is never shorter than the settling time of an order-one
//! transverse perturbation, so that derivatives have converged even at points
//! that start on `Γ`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{FlowConfig, Propagator};
use crate::manifold::{wrap_centered, Phase, WaveFamily};
use crate::models::random_coeffs;
use crate::par::{self, Exec};
use crate::spectral::{dot, h_norm, Field};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsochronConfig {
    /// Distance (E-norm) to `Γ` at which the limit counts as resolved;
    /// `None` selects `1e-6·min_α‖γ_α‖_E`.
    pub tol_gamma: Option<f64>,
    /// Maximal forward time; `None` selects `50/ω`.
    pub t_cap: Option<f64>,
    /// Step of first-order central differences.
    pub fd_eps: f64,
    /// Step of second-order stencils.
    pub fd_eps2: f64,
    /// Use the adjoint for gradients instead of finite differences.
    pub adjoint: bool,
    /// Spacing of the distance checks in the adaptive limit.
    pub check_interval: f64,
    /// Extra time added to the resolved horizon for derivative evaluations.
    pub margin: f64,
}

impl Default for IsochronConfig {
    fn default() -> Self {
        IsochronConfig {
            tol_gamma: None,
            t_cap: None,
            fd_eps: 1e-5,
            fd_eps2: 1e-3,
            adjoint: true,
            check_interval: 0.5,
            margin: 1.0,
        }
    }
}

impl IsochronConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: Option<f64>| v.map_or(true, |v| v > 0.0);
        if !pos(self.tol_gamma) || !pos(self.t_cap) {
            return invalid("tol_gamma and t_cap must be positive");
        }
        if !(self.fd_eps > 0.0) || !(self.fd_eps2 > 0.0) {
            return invalid("finite-difference steps must be positive");
        }
        if !(self.check_interval > 0.0) || !(self.margin >= 0.0) {
            return invalid("check_interval must be positive and margin non-negative");
        }
        Ok(())
    }
}

/// Riesz representative of `Dπ(x)` in `H`.
#[derive(Clone, Debug)]
pub struct PhaseGradient {
    pub grad: Field,
    pub at: Field,
    pub horizon: f64,
}

/// Outcome of the adaptive limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resolved {
    pub phase: Phase,
    /// First check time at which `dist_E(φ_T(x), Γ) ≤ tol_gamma`.
    pub time: f64,
    pub distance: f64,
}

/// Partial sums `Σ|D²π[e_k,e_k]|`, `Σ|Dπ e_k|`, `Σ|Dπ e_k|²` over the first
/// `K` eigenfunctions, with signed per-mode values `(Dπ e_k, D²π[e_k,e_k])`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiTraceSums {
    pub k: usize,
    pub second: f64,
    pub first: f64,
    pub first_sq: f64,
    pub per_mode: Vec<(f64, f64)>,
}

impl PiTraceSums {
    pub fn partial(&self, k: usize) -> [f64; 3] {
        let mut s = [0.0; 3];
        for &(d1, d2) in &self.per_mode[..k.min(self.per_mode.len())] {
            s[0] += d2.abs();
            s[1] += d1.abs();
            s[2] += d1 * d1;
        }
        s
    }
}

/// The isochron map of a wave family under a discretized flow.
#[derive(Clone, Debug)]
pub struct PhaseMap {
    family: Arc<WaveFamily>,
    prop: Propagator,
    cfg: IsochronConfig,
    tol: f64,
    t_cap: f64,
    settle: f64,
}

impl PhaseMap {
    pub fn new(family: Arc<WaveFamily>, flow: FlowConfig, cfg: IsochronConfig) -> Result<PhaseMap> {
        cfg.validate()?;
        let prop = Propagator::new(family.model().clone(), flow)?;
        let tol = cfg.tol_gamma.unwrap_or(1e-6 * family.min_profile_e());
        let omega = family.model().operator().map_or(1.0, |op| op.omega());
        let t_cap = cfg.t_cap.unwrap_or(50.0 / omega);
        let mut pm = PhaseMap { family, prop, cfg, tol, t_cap, settle: 0.0 };
        pm.settle = pm.resolve(&pm.transverse_probe())?.time;
        Ok(pm)
    }

    /// `γ_0` plus a fixed pseudo-random direction with no tangent component,
    /// at E-distance half the projection radius.
    fn transverse_probe(&self) -> Vec<f64> {
        let fam = &self.family;
        let basis = fam.model().basis();
        let mut v = random_coeffs(basis, &mut ChaCha8Rng::seed_from_u64(0x5e77), 1.0);
        let mut dg = vec![0.0; v.len()];
        fam.dgamma_coeffs(0.0, &mut dg);
        let a = dot(&v, &dg) / dot(&dg, &dg);
        for (vi, gi) in v.iter_mut().zip(&dg) {
            *vi -= a * gi;
        }
        let s = 0.5 * fam.projection_radius() / Field::from_coeffs(basis, v.clone()).e_norm();
        fam.profile().coeffs.iter().zip(&v).map(|(g, v)| g + s * v).collect()
    }

    pub fn family(&self) -> &Arc<WaveFamily> {
        &self.family
    }

    pub fn propagator(&self) -> &Propagator {
        &self.prop
    }

    pub fn config(&self) -> &IsochronConfig {
        &self.cfg
    }

    pub fn tol_gamma(&self) -> f64 {
        self.tol
    }

    pub fn t_cap(&self) -> f64 {
        self.t_cap
    }

    /// Time for the transverse probe to reach `tol_gamma`; lower bound of
    /// every derivative horizon.
    pub fn settle_time(&self) -> f64 {
        self.settle
    }

    /// Derivative horizon for a point resolved at `time`.
    pub fn horizon_for(&self, time: f64) -> f64 {
        time.max(self.settle) + self.cfg.margin
    }

    fn period(&self) -> f64 {
        self.family.period()
    }

    /// Adaptive evaluation of the limit.
    pub fn resolve(&self, x: &[f64]) -> Result<Resolved> {
        let fam = &self.family;
        let mut y = x.to_vec();
        let mut fw = self.prop.work();
        let mut ps = fam.projection_scratch();
        let mut t = 0.0;
        let mut last = f64::INFINITY;
        loop {
            if let Ok(p) = fam.project_with(&y, &mut ps) {
                last = p.distance_e;
                if p.distance_e <= self.tol {
                    return Ok(Resolved {
                        phase: p.phase.shift(-fam.speed() * t),
                        time: t,
                        distance: p.distance_e,
                    });
                }
            }
            if t >= self.t_cap {
                return Err(Error::BasinEscape { t_cap: self.t_cap, distance: last });
            }
            let dt = self.cfg.check_interval.min(self.t_cap - t);
            self.prop.advance(&mut y, dt, &mut fw)?;
            t += dt;
        }
    }

    pub fn isochron(&self, x: &[f64]) -> Result<Phase> {
        Ok(self.resolve(x)?.phase)
    }

    /// Horizon used for derivatives at `x`.
    pub fn horizon(&self, x: &[f64]) -> Result<f64> {
        Ok(self.horizon_for(self.resolve(x)?.time))
    }

    /// `ψ_T(x) = β(φ_T(x)) − cT` as a real number (not reduced mod P).
    pub fn at_horizon(&self, x: &[f64], t: f64) -> Result<f64> {
        let mut y = x.to_vec();
        let mut fw = self.prop.work();
        self.prop.advance(&mut y, t, &mut fw)?;
        let beta = self.family.nearest_phase(&y)?;
        Ok(beta - self.family.speed() * t)
    }

    fn shifted(x: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
        let mut y = x.to_vec();
        for &(a, v) in terms {
            for (yi, vi) in y.iter_mut().zip(v) {
                *yi += a * vi;
            }
        }
        y
    }

    fn step_for(&self, eps: f64, v: &[f64]) -> Result<f64> {
        let n = h_norm(v);
        if !(n > 0.0) {
            return invalid("direction must be non-zero");
        }
        Ok(eps.min(self.period() / 100.0) / n)
    }

    /// `Dπ(x)v` by central differences of `ψ_T` with modular unwrapping.
    pub fn dpi_fd(&self, x: &[f64], v: &[f64], t: f64) -> Result<f64> {
        let e = self.step_for(self.cfg.fd_eps, v)?;
        let p = self.at_horizon(&Self::shifted(x, &[(e, v)]), t)?;
        let m = self.at_horizon(&Self::shifted(x, &[(-e, v)]), t)?;
        Ok(wrap_centered(p - m, self.period()) / (2.0 * e))
    }

    pub fn dpi(&self, x: &[f64], v: &[f64]) -> Result<f64> {
        let t = self.horizon(x)?;
        self.dpi_fd(x, v, t)
    }

    /// Adjoint transport of the exact projection gradient at `φ_T(x)`.
    pub fn grad_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut fw = self.prop.work();
        let traj = self.prop.trajectory_with(x, t, &mut fw)?;
        let beta = self.family.nearest_phase(&traj.end)?;
        let g = self.family.projection_gradient(&traj.end, beta);
        Ok(self.prop.adjoint_with(&traj, &g, &mut fw))
    }

    pub fn grad_pi(&self, x: &Field) -> Result<PhaseGradient> {
        let t = self.horizon(&x.coeffs)?;
        let basis = self.family.model().basis();
        let grad = if self.cfg.adjoint {
            self.grad_at(&x.coeffs, t)?
        } else {
            let d = x.coeffs.len();
            let mut g = vec![0.0; d];
            for (k, gk) in g.iter_mut().enumerate() {
                let mut e = vec![0.0; d];
                e[k] = 1.0;
                *gk = self.dpi_fd(&x.coeffs, &e, t)?;
            }
            g
        };
        Ok(PhaseGradient { grad: Field::from_coeffs(basis, grad), at: x.clone(), horizon: t })
    }

    /// `D²π(x)[v,v]` by the three-point stencil at horizon `t`, given `ψ_T(x)`.
    pub fn d2pi_diag_at(&self, x: &[f64], v: &[f64], t: f64, center: f64) -> Result<f64> {
        let e = self.step_for(self.cfg.fd_eps2, v)?;
        let p = self.at_horizon(&Self::shifted(x, &[(e, v)]), t)?;
        let m = self.at_horizon(&Self::shifted(x, &[(-e, v)]), t)?;
        let per = self.period();
        Ok((wrap_centered(p - center, per) + wrap_centered(m - center, per)) / (e * e))
    }

    /// `D²π(x)[v,w]` by the four-point stencil at horizon `t`.
    pub fn d2pi_cross_at(&self, x: &[f64], v: &[f64], w: &[f64], t: f64) -> Result<f64> {
        let ev = self.step_for(self.cfg.fd_eps2, v)?;
        let ew = self.step_for(self.cfg.fd_eps2, w)?;
        let f = |a: f64, b: f64| self.at_horizon(&Self::shifted(x, &[(a * ev, v), (b * ew, w)]), t);
        let pp = f(1.0, 1.0)?;
        let per = self.period();
        let pm = wrap_centered(f(1.0, -1.0)? - pp, per);
        let mp = wrap_centered(f(-1.0, 1.0)? - pp, per);
        let mm = wrap_centered(f(-1.0, -1.0)? - pp, per);
        Ok((mm - pm - mp) / (4.0 * ev * ew))
    }

    pub fn d2pi(&self, x: &[f64], v: &[f64], w: &[f64]) -> Result<f64> {
        let t = self.horizon(x)?;
        let same = v.iter().zip(w).all(|(a, b)| a == b);
        if same {
            let c = self.at_horizon(x, t)?;
            self.d2pi_diag_at(x, v, t, c)
        } else {
            self.d2pi_cross_at(x, v, w, t)
        }
    }

    /// `(Dπ(x)e_k, D²π(x)[e_k,e_k])` for the first `k` eigenfunctions,
    /// with `Dπ` from `grad` when supplied.
    pub fn mode_derivatives(
        &self,
        x: &[f64],
        k: usize,
        t: f64,
        grad: Option<&[f64]>,
        exec: Exec,
    ) -> Result<Vec<(f64, f64)>> {
        let model = self.family.model();
        if k > model.dim() {
            return invalid(format!("K = {k} exceeds the {} basis functions", model.dim()));
        }
        let center = self.at_horizon(x, t)?;
        let order = model.order();
        let d = model.dim();
        par::try_map(exec, k, |m| {
            let mut e = vec![0.0; d];
            e[order[m]] = 1.0;
            let d1 = match grad {
                Some(g) => g[order[m]],
                None => self.dpi_fd(x, &e, t)?,
            };
            let d2 = self.d2pi_diag_at(x, &e, t, center)?;
            Ok((d1, d2))
        })
    }

    pub fn pi_trace_sums(&self, x: &[f64], k: usize, exec: Exec) -> Result<PiTraceSums> {
        let t = self.horizon(x)?;
        let grad = if self.cfg.adjoint { Some(self.grad_at(x, t)?) } else { None };
        let per_mode = self.mode_derivatives(x, k, t, grad.as_deref(), exec)?;
        let mut out = PiTraceSums { k, second: 0.0, first: 0.0, first_sq: 0.0, per_mode };
        let s = out.partial(k);
        out.second = s[0];
        out.first = s[1];
        out.first_sq = s[2];
        Ok(out)
    }

    /// `Dπ(x)V(x)`, the deterministic phase rate.
    pub fn dpi_v(&self, x: &[f64]) -> Result<f64> {
        let model = self.family.model();
        let mut ws = model.workspace();
        let mut v = vec![0.0; x.len()];
        model.eval_vector_field(x, &mut v, &mut ws);
        let t = self.horizon(x)?;
        if self.cfg.adjoint {
            Ok(dot(&self.grad_at(x, t)?, &v))
        } else {
            self.dpi_fd(x, &v, t)
        }
    }

    /// Partial sums of `Dπ(x)[Ly] = −Σ_k λ_k y_k Dπ(x)e_k` in eigen order.
    pub fn dpi_l(&self, x: &[f64], y: &[f64], k: usize) -> Result<Vec<f64>> {
        let model = self.family.model();
        if k > model.dim() || y.len() != model.dim() {
            return invalid("dpi_L truncation or direction does not fit the basis");
        }
        let t = self.horizon(x)?;
        let g = self.grad_at(x, t)?;
        let (rates, order) = (model.rates(), model.order());
        let mut acc = 0.0;
        Ok(order[..k]
            .iter()
            .map(|&i| {
                acc -= rates[i] * y[i] * g[i];
                acc
            })
            .collect())
    }
}
