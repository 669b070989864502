//! Deterministic flow `φ_t` by exponential time differencing, with its first
//! and second variations and the adjoint of the first variation.
//!
//! Every scheme is written as an exponential Runge–Kutta tableau with diagonal
//! coefficients,
//!
//! ```text
//! Y_i = e^{-λ c_i h} x + Σ_{j<i} A_ij N(Y_j),     x⁺ = e^{-λ h} x + Σ_i B_i N(Y_i),
//! ```
//!
//! and the variational flows apply the same tableau to the augmented system.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{Model, Workspace};
use crate::par::{self, Exec};
use crate::spectral::{sup_norm, Field};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ExponentialEuler,
    EtdRk2,
    EtdRk4,
}

impl Scheme {
    pub fn order(self) -> usize {
        match self {
            Scheme::ExponentialEuler => 1,
            Scheme::EtdRk2 => 2,
            Scheme::EtdRk4 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub t_max: f64,
    pub tol_invariant: f64,
    pub blowup_bound: f64,
    /// Start with geometrically growing steps when `λ_max·dt > 1`.
    pub graded_start: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { dt: 0.05, scheme: Scheme::EtdRk4, t_max: 100.0, tol_invariant: 1e-6, blowup_bound: 1e3, graded_start: true }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.t_max >= self.dt) {
            return invalid(format!("need 0 < dt ≤ t_max, got dt = {}, t_max = {}", self.dt, self.t_max));
        }
        if !(self.tol_invariant > 0.0) || !(self.blowup_bound > 0.0) {
            return invalid("tolerances must be positive");
        }
        Ok(())
    }
}

/// `φ_k(z)` for `k = 0..=3`.
pub fn phi_functions(z: f64) -> [f64; 4] {
    if z.abs() < 0.5 {
        let mut out = [0.0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let mut term = 1.0;
            for j in 1..=k {
                term /= j as f64;
            }
            let mut sum = term;
            for m in 1..30 {
                term *= z / (m + k) as f64;
                sum += term;
                if term.abs() < 1e-18 * sum.abs() {
                    break;
                }
            }
            *o = sum;
        }
        out
    } else {
        let p0 = z.exp();
        let p1 = (p0 - 1.0) / z;
        let p2 = (p1 - 1.0) / z;
        let p3 = (p2 - 0.5) / z;
        [p0, p1, p2, p3]
    }
}

#[derive(Clone, Debug)]
struct Tableau {
    h: f64,
    ec: Vec<Option<Vec<f64>>>,
    a: Vec<Vec<(usize, Vec<f64>)>>,
    e: Vec<f64>,
    b: Vec<Vec<f64>>,
}

impl Tableau {
    fn new(rates: &[f64], h: f64, scheme: Scheme) -> Tableau {
        let ph: Vec<[f64; 4]> = rates.iter().map(|l| phi_functions(-l * h)).collect();
        let e: Vec<f64> = ph.iter().map(|p| p[0]).collect();
        let col = |f: &dyn Fn(&[f64; 4]) -> f64| -> Vec<f64> { ph.iter().map(f).collect() };
        match scheme {
            Scheme::ExponentialEuler => {
                Tableau { h, ec: vec![None], a: vec![vec![]], e, b: vec![col(&|p| h * p[1])] }
            }
            Scheme::EtdRk2 => Tableau {
                h,
                ec: vec![None, Some(e.clone())],
                a: vec![vec![], vec![(0, col(&|p| h * p[1]))]],
                b: vec![col(&|p| h * (p[1] - p[2])), col(&|p| h * p[2])],
                e,
            },
            Scheme::EtdRk4 => {
                let half: Vec<[f64; 4]> = rates.iter().map(|l| phi_functions(-l * h / 2.0)).collect();
                let e2: Vec<f64> = half.iter().map(|p| p[0]).collect();
                let q: Vec<f64> = half.iter().map(|p| 0.5 * h * p[1]).collect();
                let a41: Vec<f64> = q.iter().zip(&e2).map(|(q, e2)| q * (e2 - 1.0)).collect();
                let a43: Vec<f64> = q.iter().map(|q| 2.0 * q).collect();
                let b1 = col(&|p| h * (p[1] - 3.0 * p[2] + 4.0 * p[3]));
                let b23 = col(&|p| h * (2.0 * p[2] - 4.0 * p[3]));
                let b4 = col(&|p| h * (-p[2] + 4.0 * p[3]));
                Tableau {
                    h,
                    ec: vec![None, Some(e2.clone()), Some(e2), Some(e.clone())],
                    a: vec![vec![], vec![(0, q.clone())], vec![(1, q)], vec![(0, a41), (2, a43)]],
                    b: vec![b1, b23.clone(), b23, b4],
                    e,
                }
            }
        }
    }

    fn stages(&self) -> usize {
        self.b.len()
    }

    /// One step with a generic stage evaluator `eval(i, Y_i, N_i)`.
    fn step(
        &self,
        x: &[f64],
        out: &mut [f64],
        y: &mut [Vec<f64>],
        nv: &mut [Vec<f64>],
        mut eval: impl FnMut(usize, &[f64], &mut [f64]),
    ) {
        for i in 0..self.stages() {
            let yi = &mut y[i];
            match &self.ec[i] {
                None => yi.copy_from_slice(x),
                Some(ec) => {
                    for ((o, a), b) in yi.iter_mut().zip(x).zip(ec) {
                        *o = a * b;
                    }
                }
            }
            for (j, coef) in &self.a[i] {
                for ((o, c), n) in yi.iter_mut().zip(coef).zip(&nv[*j]) {
                    *o += c * n;
                }
            }
            eval(i, &y[i], &mut nv[i]);
        }
        for ((o, a), e) in out.iter_mut().zip(x).zip(&self.e) {
            *o = a * e;
        }
        for i in 0..self.stages() {
            for ((o, c), n) in out.iter_mut().zip(&self.b[i]).zip(&nv[i]) {
                *o += c * n;
            }
        }
    }

    /// Transpose of a linearized step: `ybar` is the adjoint of the output,
    /// `jt(i, g, out)` applies the transposed stage Jacobian.
    fn step_adjoint(
        &self,
        ybar: &[f64],
        out: &mut [f64],
        g: &mut Vec<f64>,
        hat: &mut [Vec<f64>],
        mut jt: impl FnMut(usize, &[f64], &mut [f64]),
    ) {
        let s = self.stages();
        for i in (0..s).rev() {
            for ((o, b), y) in g.iter_mut().zip(&self.b[i]).zip(ybar) {
                *o = b * y;
            }
            for m in (i + 1)..s {
                for (j, coef) in &self.a[m] {
                    if *j == i {
                        for ((o, c), h) in g.iter_mut().zip(coef).zip(&hat[m]) {
                            *o += c * h;
                        }
                    }
                }
            }
            jt(i, g, &mut hat[i]);
        }
        for ((o, y), e) in out.iter_mut().zip(ybar).zip(&self.e) {
            *o = y * e;
        }
        for i in 0..s {
            match &self.ec[i] {
                None => {
                    for (o, h) in out.iter_mut().zip(&hat[i]) {
                        *o += h;
                    }
                }
                Some(ec) => {
                    for ((o, c), h) in out.iter_mut().zip(ec).zip(&hat[i]) {
                        *o += c * h;
                    }
                }
            }
        }
    }
}

/// Per-thread buffers for stepping.
pub struct FlowWork {
    ws: Workspace,
    y: Vec<Vec<f64>>,
    nv: Vec<Vec<f64>>,
    vals: Vec<f64>,
    tmp: Vec<f64>,
    aux: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum StepKind {
    Main,
    Ramp(usize),
    Remainder,
}

/// Stage values of one step, kept for the variational and adjoint passes.
#[derive(Clone, Debug)]
struct StepRecord {
    kind: StepKind,
    stage_values: Vec<f64>,
}

/// A stored base trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub t: f64,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    steps: Vec<StepRecord>,
    remainder: Option<Tableau>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Time stepper bound to a model and a configuration.
#[derive(Clone, Debug)]
pub struct Propagator {
    model: Arc<Model>,
    cfg: FlowConfig,
    main: Tableau,
    ramp: Vec<Tableau>,
}

impl Propagator {
    pub fn new(model: Arc<Model>, cfg: FlowConfig) -> Result<Propagator> {
        cfg.validate()?;
        let main = Tableau::new(model.rates(), cfg.dt, cfg.scheme);
        let stiff = model.rates().iter().cloned().fold(0.0, f64::max) * cfg.dt;
        let m = if cfg.graded_start && stiff > 1.0 { stiff.log2().ceil() as i32 } else { 0 };
        let ramp = (1..=m).rev().map(|i| Tableau::new(model.rates(), cfg.dt * 0.5f64.powi(i), cfg.scheme)).collect();
        Ok(Propagator { model, cfg, main, ramp })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn dt(&self) -> f64 {
        self.cfg.dt
    }

    pub fn work(&self) -> FlowWork {
        let d = self.model.dim();
        let s = self.main.stages();
        FlowWork {
            ws: self.model.workspace(),
            y: vec![vec![0.0; d]; s],
            nv: vec![vec![0.0; d]; s],
            vals: vec![0.0; self.model.basis().n_values()],
            tmp: vec![0.0; d],
            aux: vec![vec![0.0; d]; 2 * s],
        }
    }

    /// Number of graded start-up steps `dt/2^m, …, dt/2` taken before the
    /// regular steps, so that stiff modes are resolved while they decay.
    pub fn ramp_len(&self) -> usize {
        self.ramp.len()
    }

    /// Split `t` into start-up steps, whole steps and an optional shorter
    /// final step.
    fn schedule(&self, t: f64) -> Result<(usize, usize, Option<f64>)> {
        if !(t >= 0.0) || !t.is_finite() {
            return invalid(format!("flow time {t} must be finite and non-negative"));
        }
        let dt = self.cfg.dt;
        let (r, rest) = if t >= dt && !self.ramp.is_empty() {
            let m = self.ramp.len();
            (m, t - dt * (1.0 - 0.5f64.powi(m as i32)))
        } else {
            (0, t)
        };
        let n = (rest / dt + 1e-9).floor() as usize;
        let rem = rest - n as f64 * dt;
        Ok(if rem > 1e-12 * t.max(1.0) { (r, n, Some(rem)) } else { (r, n, None) })
    }

    fn plan(&self, r: usize, n: usize, rem: bool) -> impl Iterator<Item = StepKind> {
        (0..r).map(StepKind::Ramp).chain((0..n).map(|_| StepKind::Main)).chain(rem.then_some(StepKind::Remainder))
    }

    fn base_step(&self, tab: &Tableau, x: &mut Vec<f64>, fw: &mut FlowWork, record: Option<&mut Vec<f64>>) {
        let model = &*self.model;
        let basis = model.basis();
        let nvals = basis.n_values();
        let FlowWork { ws, y, nv, vals, tmp, .. } = fw;
        let mut rec = record;
        tab.step(x, tmp, y, nv, |i, yi, out| {
            basis.to_values(yi, vals, &mut ws.scratch);
            if let Some(r) = rec.as_deref_mut() {
                r[i * nvals..(i + 1) * nvals].copy_from_slice(vals);
            }
            model.eval_n(vals, out, ws);
        });
        std::mem::swap(x, tmp);
    }

    fn guard(&self, x: &[f64], time: f64, fw: &mut FlowWork) -> Result<()> {
        self.model.basis().to_values(x, &mut fw.vals, &mut fw.ws.scratch);
        let s = sup_norm(&fw.vals);
        if !(s <= self.cfg.blowup_bound) {
            return Err(Error::BlowUp { time, bound: self.cfg.blowup_bound });
        }
        Ok(())
    }

    /// Advance a coefficient vector by `n` whole steps starting at time `t0`.
    pub fn advance_steps(&self, x: &mut Vec<f64>, n: usize, t0: f64, fw: &mut FlowWork) -> Result<()> {
        for k in 0..n {
            self.base_step(&self.main, x, fw, None);
            if k % 8 == 7 || k + 1 == n {
                self.guard(x, t0 + (k + 1) as f64 * self.cfg.dt, fw)?;
            }
        }
        Ok(())
    }

    /// Advance a coefficient vector by time `t`.
    pub fn advance(&self, x: &mut Vec<f64>, t: f64, fw: &mut FlowWork) -> Result<()> {
        let (r, n, rem) = self.schedule(t)?;
        for tab in &self.ramp[..r] {
            self.base_step(tab, x, fw, None);
        }
        let t0 = t - n as f64 * self.cfg.dt - rem.unwrap_or(0.0);
        self.advance_steps(x, n, t0, fw)?;
        if let Some(h) = rem {
            let tab = Tableau::new(self.model.rates(), h, self.cfg.scheme);
            self.base_step(&tab, x, fw, None);
            self.guard(x, t, fw)?;
        }
        Ok(())
    }

    pub fn trajectory(&self, x0: &[f64], t: f64) -> Result<Trajectory> {
        let mut fw = self.work();
        self.trajectory_with(x0, t, &mut fw)
    }

    pub fn trajectory_with(&self, x0: &[f64], t: f64, fw: &mut FlowWork) -> Result<Trajectory> {
        let (r, n, rem) = self.schedule(t)?;
        let nvals = self.model.basis().n_values();
        let s = self.main.stages();
        let mut x = x0.to_vec();
        let mut steps = Vec::with_capacity(r + n + 1);
        let remainder = rem.map(|h| Tableau::new(self.model.rates(), h, self.cfg.scheme));
        let mut time = 0.0;
        for kind in self.plan(r, n, rem.is_some()) {
            let tab = match kind {
                StepKind::Main => &self.main,
                StepKind::Ramp(i) => &self.ramp[i],
                StepKind::Remainder => remainder.as_ref().unwrap(),
            };
            let mut rec = vec![0.0; s * nvals];
            self.base_step(tab, &mut x, fw, Some(&mut rec));
            if !(sup_norm(&rec[..nvals]) <= self.cfg.blowup_bound) {
                return Err(Error::BlowUp { time, bound: self.cfg.blowup_bound });
            }
            time += tab.h;
            steps.push(StepRecord { kind, stage_values: rec });
        }
        self.guard(&x, t, fw)?;
        Ok(Trajectory { t, start: x0.to_vec(), end: x, steps, remainder })
    }

    fn tab<'a>(&'a self, traj: &'a Trajectory, rec: &StepRecord) -> &'a Tableau {
        match rec.kind {
            StepKind::Main => &self.main,
            StepKind::Ramp(i) => &self.ramp[i],
            StepKind::Remainder => traj.remainder.as_ref().unwrap(),
        }
    }

    /// `Dφ_t(x0) v` along a stored trajectory.
    pub fn tangent(&self, traj: &Trajectory, v: &[f64]) -> Vec<f64> {
        let mut fw = self.work();
        self.tangent_with(traj, v, &mut fw)
    }

    pub fn tangent_with(&self, traj: &Trajectory, v: &[f64], fw: &mut FlowWork) -> Vec<f64> {
        let model = &*self.model;
        let nvals = model.basis().n_values();
        let mut x = v.to_vec();
        for rec in &traj.steps {
            let tab = self.tab(traj, rec);
            let FlowWork { ws, y, nv, tmp, .. } = fw;
            tab.step(&x, tmp, y, nv, |i, yi, out| {
                model.eval_dn(&rec.stage_values[i * nvals..(i + 1) * nvals], yi, out, ws);
            });
            std::mem::swap(&mut x, tmp);
        }
        x
    }

    /// `D²φ_t(x0)[v, w]` along a stored trajectory.
    pub fn second(&self, traj: &Trajectory, v: &[f64], w: &[f64]) -> Vec<f64> {
        let mut fw = self.work();
        self.second_with(traj, v, w, &mut fw)
    }

    pub fn second_with(&self, traj: &Trajectory, v: &[f64], w: &[f64], fw: &mut FlowWork) -> Vec<f64> {
        let model = &*self.model;
        let nvals = model.basis().n_values();
        let s = self.main.stages();
        let d = model.dim();
        let same = v == w;
        let mut tv = v.to_vec();
        let mut tw = w.to_vec();
        let mut z = vec![0.0; d];
        let mut yv: Vec<Vec<f64>> = vec![vec![0.0; d]; s];
        let mut yw: Vec<Vec<f64>> = vec![vec![0.0; d]; s];
        let mut extra = vec![0.0; d];
        for rec in &traj.steps {
            let tab = self.tab(traj, rec);
            let sv = |i: usize| &rec.stage_values[i * nvals..(i + 1) * nvals];
            {
                let FlowWork { ws, nv, tmp, .. } = &mut *fw;
                tab.step(&tv, tmp, &mut yv, nv, |i, yi, out| model.eval_dn(sv(i), yi, out, ws));
                std::mem::swap(&mut tv, tmp);
                if !same {
                    tab.step(&tw, tmp, &mut yw, nv, |i, yi, out| model.eval_dn(sv(i), yi, out, ws));
                    std::mem::swap(&mut tw, tmp);
                }
            }
            let yw_ref = if same { &yv } else { &yw };
            let FlowWork { ws, y, nv, tmp, .. } = &mut *fw;
            tab.step(&z, tmp, y, nv, |i, yi, out| {
                model.eval_dn(sv(i), yi, out, ws);
                model.eval_d2n(sv(i), &yv[i], &yw_ref[i], &mut extra, ws);
                for (o, e) in out.iter_mut().zip(&extra) {
                    *o += e;
                }
            });
            std::mem::swap(&mut z, tmp);
        }
        z
    }

    /// `Dφ_t(x0)ᵀ g`: pulls a covector at `φ_t(x0)` back to `x0`.
    pub fn adjoint(&self, traj: &Trajectory, g: &[f64]) -> Vec<f64> {
        let mut fw = self.work();
        self.adjoint_with(traj, g, &mut fw)
    }

    pub fn adjoint_with(&self, traj: &Trajectory, g: &[f64], fw: &mut FlowWork) -> Vec<f64> {
        let model = &*self.model;
        let nvals = model.basis().n_values();
        let mut lam = g.to_vec();
        for rec in traj.steps.iter().rev() {
            let tab = self.tab(traj, rec);
            let FlowWork { ws, tmp, aux, nv, .. } = fw;
            let (gbuf, hat) = aux.split_at_mut(1);
            let g0 = &mut gbuf[0];
            tab.step_adjoint(&lam, tmp, g0, &mut hat[..tab.stages()], |i, gi, out| {
                model.eval_dn_adjoint(&rec.stage_values[i * nvals..(i + 1) * nvals], gi, out, ws);
            });
            let _ = nv;
            std::mem::swap(&mut lam, tmp);
        }
        lam
    }
}

pub fn flow(model: &Arc<Model>, x0: &Field, t: f64, cfg: &FlowConfig) -> Result<Field> {
    let p = Propagator::new(model.clone(), cfg.clone())?;
    let mut x = x0.coeffs.clone();
    let mut fw = p.work();
    p.advance(&mut x, t, &mut fw)?;
    Ok(Field::from_coeffs(model.basis(), x))
}

pub fn dflow(model: &Arc<Model>, x0: &Field, v: &Field, t: f64, cfg: &FlowConfig) -> Result<Field> {
    let p = Propagator::new(model.clone(), cfg.clone())?;
    let traj = p.trajectory(&x0.coeffs, t)?;
    Ok(Field::from_coeffs(model.basis(), p.tangent(&traj, &v.coeffs)))
}

pub fn d2flow(model: &Arc<Model>, x0: &Field, v: &Field, w: &Field, t: f64, cfg: &FlowConfig) -> Result<Field> {
    let p = Propagator::new(model.clone(), cfg.clone())?;
    let traj = p.trajectory(&x0.coeffs, t)?;
    Ok(Field::from_coeffs(model.basis(), p.second(&traj, &v.coeffs, &w.coeffs)))
}

/// Partial sums `Σ‖Dφ_t e_k‖_E`, `Σ‖Dφ_t e_k‖²_E`, `Σ‖D²φ_t[e_k,e_k]‖_E` over the
/// first `K` eigenfunctions, with the per-mode summands.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTraceSums {
    pub k: usize,
    pub first: f64,
    pub first_sq: f64,
    pub second: f64,
    pub per_mode: Vec<[f64; 3]>,
}

impl FlowTraceSums {
    /// The three partial sums truncated at `k ≤ self.k`.
    pub fn partial(&self, k: usize) -> [f64; 3] {
        let mut s = [0.0; 3];
        for m in &self.per_mode[..k.min(self.per_mode.len())] {
            s[0] += m[0];
            s[1] += m[0] * m[0];
            s[2] += m[2];
        }
        s
    }
}

pub fn flow_trace_sums(
    prop: &Propagator,
    x0: &Field,
    t: f64,
    k: usize,
    exec: Exec,
) -> Result<FlowTraceSums> {
    let model = prop.model();
    if k > model.dim() {
        return invalid(format!("K = {k} exceeds the {} basis functions", model.dim()));
    }
    let traj = prop.trajectory(&x0.coeffs, t)?;
    let basis = model.basis();
    let order = model.order();
    let per_mode = par::map(exec, k, |m| {
        let mut fw = prop.work();
        let mut e = vec![0.0; model.dim()];
        e[order[m]] = 1.0;
        let d1 = prop.tangent_with(&traj, &e, &mut fw);
        let d2 = prop.second_with(&traj, &e, &e, &mut fw);
        let mut vals = vec![0.0; basis.n_values()];
        let mut sc = basis.scratch();
        basis.to_values(&d1, &mut vals, &mut sc);
        let n1 = sup_norm(&vals);
        basis.to_values(&d2, &mut vals, &mut sc);
        let n2 = sup_norm(&vals);
        [n1, n1 * n1, n2]
    });
    let mut out = FlowTraceSums { k, first: 0.0, first_sq: 0.0, second: 0.0, per_mode };
    let s = out.partial(k);
    out.first = s[0];
    out.first_sq = s[1];
    out.second = s[2];
    Ok(out)
}
