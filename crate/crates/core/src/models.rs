//! Nonlinearities `N` with their first and second derivatives.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::spectral::{sup_norm, Basis, Boundary, Field, Grid, Scratch, SpectralOperator};

/// Local reaction terms of reaction–diffusion systems.
#[derive(Clone, Debug, PartialEq)]
pub enum Reaction {
    /// Scalar bistable cubic `u(1−u)(u−b)`.
    Cubic { b: f64 },
    /// Two-component rotating kinetics whose squared amplitude `ρ = u² + v²`
    /// obeys the bistable cubic: `N = Λ(ρ)(u, v) + Ω(ρ)(−v, u)` with
    /// `Λ(ρ) = rate·(1−ρ)(ρ−b)` and `Ω(ρ) = omega0 − shear·ρ`.
    AmplitudeNagumo { rate: f64, b: f64, omega0: f64, shear: f64 },
}

impl Reaction {
    pub fn n_components(&self) -> usize {
        match self {
            Reaction::Cubic { .. } => 1,
            Reaction::AmplitudeNagumo { .. } => 2,
        }
    }
}

/// Two-population neural field `x_t = −x + ω∗f(x) − g·y`, `y_t = −y/ε + x`
/// with a difference-of-Gaussians kernel and sigmoid gain.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField {
    pub amp_exc: f64,
    pub width_exc: f64,
    pub amp_inh: f64,
    pub width_inh: f64,
    pub gain: f64,
    pub threshold: f64,
    pub epsilon: f64,
    pub coupling: f64,
}

impl NeuralField {
    pub fn kernel(&self, z: f64) -> f64 {
        let g = |a: f64, s: f64| a * (-z * z / (2.0 * s * s)).exp();
        g(self.amp_exc, self.width_exc) - g(self.amp_inh, self.width_inh)
    }

    pub fn rate(&self, u: f64) -> f64 {
        1.0 / (1.0 + (-self.gain * (u - self.threshold)).exp())
    }

    fn rate_derivs(&self, u: f64) -> (f64, f64, f64) {
        let f = self.rate(u);
        let b = self.gain;
        let f1 = b * f * (1.0 - f);
        let f2 = b * f1 * (1.0 - 2.0 * f);
        (f, f1, f2)
    }
}

/// Planar oscillator `ṙ = r(1−r²)`, `θ̇ = 1 + κ(1−r²)` with asymptotic phase
/// `Θ = θ − κ ln r`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub kappa: f64,
    pub sigma: f64,
}

impl OracleSpec {
    pub fn phase(&self, x: f64, y: f64) -> f64 {
        let r = x.hypot(y);
        y.atan2(x) - self.kappa * r.ln()
    }

    pub fn phase_gradient(&self, x: f64, y: f64) -> [f64; 2] {
        let r2 = x * x + y * y;
        [(-y - self.kappa * x) / r2, (x - self.kappa * y) / r2]
    }

    pub fn phase_hessian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let r4 = (x * x + y * y).powi(2);
        let k = self.kappa;
        let hxx = 2.0 * x * y / r4 - k * (y * y - x * x) / r4;
        let hyy = -2.0 * x * y / r4 - k * (x * x - y * y) / r4;
        let hxy = (y * y - x * x) / r4 + k * 2.0 * x * y / r4;
        [[hxx, hxy], [hxy, hyy]]
    }

    /// Radius at time `t` from radius `r0`.
    pub fn radius(&self, r0: f64, t: f64) -> f64 {
        (1.0 + (r0.powi(-2) - 1.0) * (-2.0 * t).exp()).powf(-0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelKind {
    ReactionDiffusion(Reaction),
    NeuralField(NeuralField),
    OracleOscillator(OracleSpec),
}

/// `Λ(ρ) = l0 + l1 ρ + l2 ρ²`, `Ω(ρ) = o0 + o1 ρ` acting on `(u, v)`.
#[derive(Clone, Copy, Debug)]
struct Polar {
    l: [f64; 3],
    o: [f64; 2],
}

impl Polar {
    #[inline]
    fn lam(&self, r: f64) -> (f64, f64, f64) {
        (self.l[0] + r * (self.l[1] + r * self.l[2]), self.l[1] + 2.0 * r * self.l[2], 2.0 * self.l[2])
    }

    #[inline]
    fn om(&self, r: f64) -> (f64, f64) {
        (self.o[0] + self.o[1] * r, self.o[1])
    }

    #[inline]
    fn jac(&self, u: f64, v: f64) -> [[f64; 2]; 2] {
        let r = u * u + v * v;
        let (l, l1, _) = self.lam(r);
        let (o, o1) = self.om(r);
        [
            [l + 2.0 * l1 * u * u - 2.0 * o1 * u * v, 2.0 * l1 * u * v - o - 2.0 * o1 * v * v],
            [2.0 * l1 * u * v + o + 2.0 * o1 * u * u, l + 2.0 * l1 * v * v + 2.0 * o1 * u * v],
        ]
    }
}

/// Scratch space for nonlinearity evaluations.
pub struct Workspace {
    pub(crate) scratch: Scratch,
    pub(crate) v1: Vec<f64>,
    pub(crate) v2: Vec<f64>,
    pub(crate) v3: Vec<f64>,
    pub(crate) c1: Vec<f64>,
}

#[derive(Debug)]
pub struct Model {
    kind: ModelKind,
    basis: Arc<Basis>,
    operator: Option<SpectralOperator>,
    kernel: Option<Vec<f64>>,
    rates: Vec<f64>,
    order: Vec<usize>,
    polar: Option<Polar>,
}

impl Model {
    pub fn reaction_diffusion(
        grid: Grid,
        n_modes: usize,
        reaction: Reaction,
        diffusion: &[f64],
        damping: &[f64],
    ) -> Result<Model> {
        let basis = Basis::on_grid(grid, reaction.n_components(), n_modes)?;
        let op = SpectralOperator::new(basis.clone(), diffusion, damping)?;
        let polar = match reaction {
            Reaction::AmplitudeNagumo { rate, b, omega0, shear } => {
                Some(Polar { l: [-rate * b, rate * (1.0 + b), -rate], o: [omega0, -shear] })
            }
            Reaction::Cubic { .. } => None,
        };
        Ok(Model::assemble(ModelKind::ReactionDiffusion(reaction), basis, Some(op), None, polar))
    }

    pub fn neural_field(grid: Grid, n_modes: usize, nf: NeuralField) -> Result<Model> {
        if grid.boundary != Boundary::Periodic {
            return invalid("neural field models need a periodic domain");
        }
        if !(nf.epsilon > 0.0) {
            return invalid("epsilon must be positive");
        }
        let basis = Basis::on_grid(grid.clone(), 2, n_modes)?;
        let op = SpectralOperator::new(basis.clone(), &[0.0, 0.0], &[1.0, 1.0 / nf.epsilon])?;
        let kernel = kernel_multipliers(&grid, n_modes, |z| nf.kernel(z));
        Ok(Model::assemble(ModelKind::NeuralField(nf), basis, Some(op), Some(kernel), None))
    }

    pub fn oracle(spec: OracleSpec) -> Model {
        let polar = Polar { l: [1.0, -1.0, 0.0], o: [1.0 + spec.kappa, -spec.kappa] };
        Model::assemble(ModelKind::OracleOscillator(spec), Basis::point(2), None, None, Some(polar))
    }

    fn assemble(
        kind: ModelKind,
        basis: Arc<Basis>,
        operator: Option<SpectralOperator>,
        kernel: Option<Vec<f64>>,
        polar: Option<Polar>,
    ) -> Model {
        let (rates, order) = match &operator {
            Some(op) => (op.rates().to_vec(), op.order().to_vec()),
            None => (vec![0.0; basis.dim()], (0..basis.dim()).collect()),
        };
        Model { kind, basis, operator, kernel, rates, order, polar }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    pub fn operator(&self) -> Option<&SpectralOperator> {
        self.operator.as_ref()
    }

    /// Decay rates per coefficient (`L e = −λ e`); zero without an operator.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Layout indices in eigen-order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn kernel_multipliers(&self) -> Option<&[f64]> {
        self.kernel.as_deref()
    }

    pub fn parameters(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: f64| {
            m.insert(k.to_string(), v);
        };
        match &self.kind {
            ModelKind::ReactionDiffusion(Reaction::Cubic { b }) => put("b", *b),
            ModelKind::ReactionDiffusion(Reaction::AmplitudeNagumo { rate, b, omega0, shear }) => {
                put("rate", *rate);
                put("b", *b);
                put("omega0", *omega0);
                put("shear", *shear);
            }
            ModelKind::NeuralField(nf) => {
                put("amp_exc", nf.amp_exc);
                put("width_exc", nf.width_exc);
                put("amp_inh", nf.amp_inh);
                put("width_inh", nf.width_inh);
                put("gain", nf.gain);
                put("threshold", nf.threshold);
                put("epsilon", nf.epsilon);
                put("coupling", nf.coupling);
            }
            ModelKind::OracleOscillator(o) => {
                put("kappa", o.kappa);
                put("sigma", o.sigma);
            }
        }
        if let Some(op) = &self.operator {
            for (c, (d, a)) in op.diffusion().iter().zip(op.damping()).enumerate() {
                put(&format!("diffusion_{c}"), *d);
                put(&format!("damping_{c}"), *a);
            }
        }
        m
    }

    /// Canonical text description; the model hash is its digest.
    pub fn describe(&self) -> String {
        let kind = match &self.kind {
            ModelKind::ReactionDiffusion(Reaction::Cubic { .. }) => "reaction_diffusion/cubic",
            ModelKind::ReactionDiffusion(Reaction::AmplitudeNagumo { .. }) => {
                "reaction_diffusion/amplitude_nagumo"
            }
            ModelKind::NeuralField(_) => "neural_field",
            ModelKind::OracleOscillator(_) => "oracle_oscillator",
        };
        let mut s = format!("kind={kind}\n");
        if let Some(g) = self.basis.grid() {
            s += &format!(
                "grid={:?},{},{:.16e}\nn_modes={}\n",
                g.boundary,
                g.n_points,
                g.length,
                self.basis.n_modes()
            );
        }
        for (k, v) in self.parameters() {
            s += &format!("{k}={v:.16e}\n");
        }
        s
    }

    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.describe().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn workspace(&self) -> Workspace {
        let nv = self.basis.n_values();
        let d = self.dim();
        Workspace {
            scratch: self.basis.scratch(),
            v1: vec![0.0; nv],
            v2: vec![0.0; nv],
            v3: vec![0.0; nv],
            c1: vec![0.0; d],
        }
    }

    fn n_pts(&self) -> usize {
        self.basis.points_per_component()
    }

    /// `P N(x)` from the collocation values of `x`.
    pub fn eval_n(&self, xv: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let n = self.n_pts();
        match &self.kind {
            ModelKind::ReactionDiffusion(Reaction::Cubic { b }) => {
                for (o, &u) in ws.v1.iter_mut().zip(xv) {
                    *o = u * (1.0 - u) * (u - b);
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
            }
            ModelKind::ReactionDiffusion(_) | ModelKind::OracleOscillator(_) => {
                let p = self.polar.unwrap();
                let (u, v) = xv.split_at(n);
                let (ou, ov) = ws.v1.split_at_mut(n);
                for i in 0..n {
                    let r = u[i] * u[i] + v[i] * v[i];
                    let (l, _, _) = p.lam(r);
                    let (o, _) = p.om(r);
                    ou[i] = l * u[i] - o * v[i];
                    ov[i] = l * v[i] + o * u[i];
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
            }
            ModelKind::NeuralField(nf) => {
                let (x, y) = xv.split_at(n);
                let (fx, xx) = ws.v1.split_at_mut(n);
                for i in 0..n {
                    fx[i] = nf.rate(x[i]);
                }
                xx.copy_from_slice(x);
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
                let b = self.basis.block();
                let w = self.kernel.as_ref().unwrap();
                for j in 0..b {
                    out[j] *= w[j];
                }
                if nf.coupling != 0.0 {
                    let (a, yy) = ws.v1.split_at_mut(n);
                    a.copy_from_slice(y);
                    yy.copy_from_slice(y);
                    self.basis.to_coeffs(&ws.v1, &mut ws.c1, &mut ws.scratch);
                    for j in 0..b {
                        out[j] -= nf.coupling * ws.c1[j];
                    }
                }
            }
        }
    }

    /// `P DN(x) v` for coefficient vector `v`.
    pub fn eval_dn(&self, xv: &[f64], v: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let n = self.n_pts();
        match &self.kind {
            ModelKind::NeuralField(nf) => {
                let b = self.basis.block();
                self.basis.to_values(v, &mut ws.v2, &mut ws.scratch);
                for i in 0..n {
                    let (_, f1, _) = nf.rate_derivs(xv[i]);
                    ws.v1[i] = f1 * ws.v2[i];
                    ws.v1[n + i] = 0.0;
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
                let w = self.kernel.as_ref().unwrap();
                for j in 0..b {
                    out[j] = w[j] * out[j] - nf.coupling * v[b + j];
                    out[b + j] = v[j];
                }
            }
            _ => {
                self.basis.to_values(v, &mut ws.v2, &mut ws.scratch);
                self.pointwise_dn(xv, false, ws);
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
            }
        }
    }

    /// `(P DN(x))ᵀ g`, the adjoint with respect to the coefficient inner product.
    pub fn eval_dn_adjoint(&self, xv: &[f64], g: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let n = self.n_pts();
        match &self.kind {
            ModelKind::NeuralField(nf) => {
                let b = self.basis.block();
                let w = self.kernel.as_ref().unwrap();
                for j in 0..b {
                    ws.c1[j] = w[j] * g[j];
                    ws.c1[b + j] = 0.0;
                }
                self.basis.to_values(&ws.c1, &mut ws.v2, &mut ws.scratch);
                for i in 0..n {
                    let (_, f1, _) = nf.rate_derivs(xv[i]);
                    ws.v1[i] = f1 * ws.v2[i];
                    ws.v1[n + i] = 0.0;
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
                for j in 0..b {
                    out[j] += g[b + j];
                    out[b + j] = -nf.coupling * g[j];
                }
            }
            _ => {
                self.basis.to_values(g, &mut ws.v2, &mut ws.scratch);
                self.pointwise_dn(xv, true, ws);
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
            }
        }
    }

    /// Pointwise Jacobian (or its transpose) of `ws.v2`, written to `ws.v1`.
    fn pointwise_dn(&self, xv: &[f64], transpose: bool, ws: &mut Workspace) {
        let n = self.n_pts();
        match &self.kind {
            ModelKind::ReactionDiffusion(Reaction::Cubic { b }) => {
                for i in 0..xv.len() {
                    let u = xv[i];
                    ws.v1[i] = (-3.0 * u * u + 2.0 * (1.0 + b) * u - b) * ws.v2[i];
                }
            }
            _ => {
                let p = self.polar.unwrap();
                for i in 0..n {
                    let j = p.jac(xv[i], xv[n + i]);
                    let (a, c) = (ws.v2[i], ws.v2[n + i]);
                    if transpose {
                        ws.v1[i] = j[0][0] * a + j[1][0] * c;
                        ws.v1[n + i] = j[0][1] * a + j[1][1] * c;
                    } else {
                        ws.v1[i] = j[0][0] * a + j[0][1] * c;
                        ws.v1[n + i] = j[1][0] * a + j[1][1] * c;
                    }
                }
            }
        }
    }

    /// `P D²N(x)[v, w]` for coefficient vectors `v`, `w`.
    pub fn eval_d2n(&self, xv: &[f64], v: &[f64], w: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let n = self.n_pts();
        self.basis.to_values(v, &mut ws.v2, &mut ws.scratch);
        self.basis.to_values(w, &mut ws.v3, &mut ws.scratch);
        match &self.kind {
            ModelKind::ReactionDiffusion(Reaction::Cubic { b }) => {
                for i in 0..xv.len() {
                    ws.v1[i] = (-6.0 * xv[i] + 2.0 * (1.0 + b)) * ws.v2[i] * ws.v3[i];
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
            }
            ModelKind::NeuralField(nf) => {
                for i in 0..n {
                    let (_, _, f2) = nf.rate_derivs(xv[i]);
                    ws.v1[i] = f2 * ws.v2[i] * ws.v3[i];
                    ws.v1[n + i] = 0.0;
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
                let b = self.basis.block();
                let k = self.kernel.as_ref().unwrap();
                for j in 0..b {
                    out[j] *= k[j];
                    out[b + j] = 0.0;
                }
            }
            _ => {
                let p = self.polar.unwrap();
                for i in 0..n {
                    let (u, v) = (xv[i], xv[n + i]);
                    let (du, dv) = (ws.v2[i], ws.v2[n + i]);
                    let (eu, ev) = (ws.v3[i], ws.v3[n + i]);
                    let r = u * u + v * v;
                    let (_, l1, l2) = p.lam(r);
                    let (_, o1) = p.om(r);
                    let dr = 2.0 * (u * du + v * dv);
                    let er = 2.0 * (u * eu + v * ev);
                    let der = 2.0 * (du * eu + dv * ev);
                    ws.v1[i] = l2 * er * dr * u + l1 * der * u + l1 * dr * eu + l1 * er * du
                        - o1 * der * v
                        - o1 * dr * ev
                        - o1 * er * dv;
                    ws.v1[n + i] = l2 * er * dr * v + l1 * der * v + l1 * dr * ev + l1 * er * dv
                        + o1 * der * u
                        + o1 * dr * eu
                        + o1 * er * du;
                }
                self.basis.to_coeffs(&ws.v1, out, &mut ws.scratch);
            }
        }
    }

    /// `V(x) = Lx + N(x)` in coefficients, from coefficients.
    pub fn eval_vector_field(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let mut xv = vec![0.0; self.basis.n_values()];
        self.basis.to_values(x, &mut xv, &mut ws.scratch);
        self.eval_n(&xv, out, ws);
        for ((o, c), l) in out.iter_mut().zip(x).zip(&self.rates) {
            *o -= l * c;
        }
    }

    fn check(&self, x: &Field) -> Result<()> {
        if x.coeffs.len() != self.dim() {
            return invalid("field does not live on the model basis");
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("nonlinearity"));
        }
        Ok(())
    }

    pub fn nonlinearity(&self, x: &Field) -> Result<Field> {
        self.check(x)?;
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim()];
        self.eval_n(&x.values, &mut out, &mut ws);
        Ok(Field::from_coeffs(&self.basis, out))
    }

    pub fn d_nonlinearity(&self, x: &Field, v: &Field) -> Result<Field> {
        self.check(x)?;
        self.check(v)?;
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim()];
        self.eval_dn(&x.values, &v.coeffs, &mut out, &mut ws);
        Ok(Field::from_coeffs(&self.basis, out))
    }

    pub fn d2_nonlinearity(&self, x: &Field, v: &Field, w: &Field) -> Result<Field> {
        self.check(x)?;
        self.check(v)?;
        self.check(w)?;
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim()];
        self.eval_d2n(&x.values, &v.coeffs, &w.coeffs, &mut out, &mut ws);
        Ok(Field::from_coeffs(&self.basis, out))
    }

    pub fn vector_field(&self, x: &Field) -> Result<Field> {
        self.check(x)?;
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim()];
        self.eval_vector_field(&x.coeffs, &mut out, &mut ws);
        Ok(Field::from_coeffs(&self.basis, out))
    }
}

/// Fourier multipliers of circular convolution with a periodized even kernel
/// under the trapezoid rule, one per coefficient of a component block.
pub fn kernel_multipliers(grid: &Grid, n_modes: usize, kernel: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = grid.n_points;
    let h = grid.spacing();
    let l = grid.length;
    let samples: Vec<f64> = (0..n)
        .map(|m| {
            let z = m as f64 * h;
            (-3..=3).map(|p| kernel(z + p as f64 * l)).sum()
        })
        .collect();
    let mut out = Vec::with_capacity(2 * n_modes + 1);
    for j in 0..=n_modes {
        let w: f64 =
            samples.iter().enumerate().map(|(m, s)| s * (2.0 * PI * (j * m) as f64 / n as f64).cos()).sum::<f64>()
                * h;
        if j == 0 {
            out.push(w);
        } else {
            out.push(w);
            out.push(w);
        }
    }
    out
}

/// Random field with coefficients `N(0,1)·(1+j)^{-p}` (wavenumber `j`).
pub fn random_coeffs<R: Rng>(basis: &Basis, rng: &mut R, p: f64) -> Vec<f64> {
    basis
        .functions()
        .iter()
        .map(|f| rng.sample::<f64, _>(StandardNormal) * (1.0 + f.wavenumber as f64).powf(-p))
        .collect()
}

/// Random direction of unit E-norm with algebraically decaying spectrum.
pub fn random_direction<R: Rng>(basis: &Basis, rng: &mut R, p: f64) -> Field {
    let c = random_coeffs(basis, rng, p);
    let f = Field::from_coeffs(basis, c);
    let s = 1.0 / f.e_norm();
    Field::from_coeffs(basis, f.coeffs.iter().map(|v| v * s).collect())
}

/// Sampled local Lipschitz constant of `N` in the E-norm over `n_pairs`
/// random pairs in the `delta`-ball around `reference`.
pub fn lipschitz_audit<R: Rng>(
    model: &Model,
    reference: &Field,
    delta: f64,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    let basis = model.basis();
    let mut best = 0.0f64;
    for _ in 0..n_pairs {
        let mut pt = || -> Field {
            let d = random_direction(basis, rng, 1.0);
            let s = delta * rng.gen::<f64>();
            Field::from_coeffs(basis, reference.coeffs.iter().zip(&d.coeffs).map(|(a, b)| a + s * b).collect())
        };
        let (x, y) = (pt(), pt());
        let nx = model.nonlinearity(&x)?;
        let ny = model.nonlinearity(&y)?;
        let num: Vec<f64> = nx.values.iter().zip(&ny.values).map(|(a, b)| a - b).collect();
        let den: Vec<f64> = x.values.iter().zip(&y.values).map(|(a, b)| a - b).collect();
        let d = sup_norm(&den);
        if d > 0.0 {
            best = best.max(sup_norm(&num) / d);
        }
    }
    Ok(best)
}
