//! The invariant circle `Γ = {γ_α}` of group translates of a relative
//! equilibrium, its parameterization and the nearest-point phase projection.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::flow::Propagator;
use crate::models::{random_direction, Model};
use crate::spectral::{dot, h_norm, sup_norm, Basis, BasisKind, Boundary, Field, Scratch};

/// A point of the circle `ℝ / Pℤ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    value: f64,
    period: f64,
}

impl Phase {
    pub fn new(value: f64, period: f64) -> Phase {
        assert!(period > 0.0, "phase period must be positive");
        let mut v = value.rem_euclid(period);
        if v >= period {
            v = 0.0;
        }
        Phase { value: v, period }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    pub fn period(self) -> f64 {
        self.period
    }

    /// `self ⊕ d`.
    pub fn shift(self, d: f64) -> Phase {
        Phase::new(self.value + d, self.period)
    }

    /// Minimal representative of `self ⊖ other` in `[−P/2, P/2)`.
    pub fn diff(self, other: Phase) -> f64 {
        wrap_centered(self.value - other.value, self.period)
    }

    pub fn distance(self, other: Phase) -> f64 {
        self.diff(other).abs()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.12} (mod {:.12})", self.value, self.period)
    }
}

/// Representative of `x mod P` in `[−P/2, P/2)`.
pub fn wrap_centered(x: f64, period: f64) -> f64 {
    let r = (x + 0.5 * period).rem_euclid(period) - 0.5 * period;
    if r >= 0.5 * period {
        r - period
    } else {
        r
    }
}

/// One-parameter rotation group acting on coefficient pairs, `R(α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Symmetry {
    pairs: Vec<(usize, usize, f64)>,
    period: f64,
}

impl Symmetry {
    /// Spatial translation on periodic grids; rotation of the plane for the
    /// two-dimensional point space.
    pub fn for_basis(basis: &Basis) -> Result<Symmetry> {
        match basis.grid() {
            None if basis.dim() == 2 => Ok(Symmetry { pairs: vec![(0, 1, 1.0)], period: 2.0 * PI }),
            None => Err(Error::Unsupported("no rotation symmetry for this point space".into())),
            Some(g) if g.boundary == Boundary::Dirichlet => {
                Err(Error::Unsupported("Dirichlet domains carry no translation symmetry".into()))
            }
            Some(g) => {
                let fs = basis.functions();
                let pairs = (0..fs.len())
                    .filter(|&i| fs[i].kind == BasisKind::Cos)
                    .map(|i| (i, i + 1, g.wavenumber(fs[i].wavenumber)))
                    .collect();
                Ok(Symmetry { pairs, period: g.length })
            }
        }
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// `out = R(α) x`. For translations `R(α)f = f(· − α)`.
    pub fn act(&self, x: &[f64], alpha: f64, out: &mut [f64]) {
        out.copy_from_slice(x);
        for &(a, b, nu) in &self.pairs {
            let (s, c) = (nu * alpha).sin_cos();
            out[a] = c * x[a] - s * x[b];
            out[b] = s * x[a] + c * x[b];
        }
    }

    /// `out = G x` with `G = d/dα R(α)|_{α=0}`.
    pub fn generator(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(a, b, nu) in &self.pairs {
            out[a] = -nu * x[b];
            out[b] = nu * x[a];
        }
    }

    /// `⟨y, R(α)p⟩` and its first two α-derivatives.
    fn correlation(&self, y: &[f64], p: &[f64], alpha: f64, fixed: f64) -> (f64, f64, f64) {
        let (mut c0, mut c1, mut c2) = (fixed, 0.0, 0.0);
        for &(a, b, nu) in &self.pairs {
            let aa = y[a] * p[a] + y[b] * p[b];
            let bb = y[b] * p[a] - y[a] * p[b];
            let (s, c) = (nu * alpha).sin_cos();
            c0 += aa * c + bb * s;
            c1 += nu * (-aa * s + bb * c);
            c2 += -nu * nu * (aa * c + bb * s);
        }
        (c0, c1, c2)
    }

    fn fixed_part(&self, y: &[f64], p: &[f64]) -> f64 {
        let mut moved = vec![false; y.len()];
        for &(a, b, _) in &self.pairs {
            moved[a] = true;
            moved[b] = true;
        }
        (0..y.len()).filter(|&i| !moved[i]).map(|i| y[i] * p[i]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-10, max_iter: 50 }
    }
}

/// Result of the nearest-point projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub phase: Phase,
    pub distance_h: f64,
    pub distance_e: f64,
}

/// `Γ = {γ_α = R(α)γ̂}` with on-manifold motion `α ↦ α + ct`.
#[derive(Clone, Debug)]
pub struct WaveFamily {
    model: Arc<Model>,
    symmetry: Symmetry,
    profile: Field,
    dprofile: Field,
    speed: f64,
    residual: f64,
    min_dgamma_e: f64,
    min_profile_e: f64,
    projection_radius: f64,
}

impl WaveFamily {
    /// Builds the family from a profile and speed without solving; the
    /// residual is evaluated and stored.
    pub fn from_profile(model: Arc<Model>, profile: Vec<f64>, speed: f64) -> Result<WaveFamily> {
        let basis = model.basis().clone();
        if profile.len() != basis.dim() {
            return invalid("profile does not live on the model basis");
        }
        let symmetry = Symmetry::for_basis(&basis)?;
        let mut g = vec![0.0; basis.dim()];
        symmetry.generator(&profile, &mut g);
        let residual = relative_equilibrium_residual(&model, &symmetry, &profile, speed);
        let dprofile: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut fam = WaveFamily {
            profile: Field::from_coeffs(&basis, profile),
            dprofile: Field::from_coeffs(&basis, dprofile),
            model,
            symmetry,
            speed,
            residual,
            min_dgamma_e: 0.0,
            min_profile_e: 0.0,
            projection_radius: 0.0,
        };
        let (mut md, mut mp) = (f64::INFINITY, f64::INFINITY);
        for m in 0..64 {
            let a = Phase::new(fam.period() * m as f64 / 64.0, fam.period());
            md = md.min(fam.dgamma(a).e_norm());
            mp = mp.min(fam.gamma(a).e_norm());
        }
        fam.min_dgamma_e = md;
        fam.min_profile_e = mp;
        fam.projection_radius = 0.5 * mp;
        Ok(fam)
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn symmetry(&self) -> &Symmetry {
        &self.symmetry
    }

    pub fn profile(&self) -> &Field {
        &self.profile
    }

    /// `γ̂′`, so that `Dγ_α = −R(α)γ̂′`.
    pub fn dprofile(&self) -> &Field {
        &self.dprofile
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn period(&self) -> f64 {
        self.symmetry.period
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn min_dgamma_e(&self) -> f64 {
        self.min_dgamma_e
    }

    pub fn min_profile_e(&self) -> f64 {
        self.min_profile_e
    }

    /// Default tube radius `δ = 0.1·min_α ‖γ_α‖_E`.
    pub fn default_delta(&self) -> f64 {
        0.1 * self.min_profile_e
    }

    pub fn projection_radius(&self) -> f64 {
        self.projection_radius
    }

    pub fn with_projection_radius(mut self, r: f64) -> WaveFamily {
        self.projection_radius = r;
        self
    }

    pub fn phase(&self, alpha: f64) -> Phase {
        Phase::new(alpha, self.period())
    }

    pub fn gamma_coeffs(&self, alpha: f64, out: &mut [f64]) {
        self.symmetry.act(&self.profile.coeffs, alpha, out);
    }

    pub fn dgamma_coeffs(&self, alpha: f64, out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.gamma_coeffs(alpha, &mut tmp);
        self.symmetry.generator(&tmp, out);
    }

    pub fn d2gamma_coeffs(&self, alpha: f64, out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.dgamma_coeffs(alpha, &mut tmp);
        self.symmetry.generator(&tmp, out);
    }

    pub fn gamma(&self, alpha: Phase) -> Field {
        let mut c = vec![0.0; self.profile.coeffs.len()];
        self.gamma_coeffs(alpha.value(), &mut c);
        Field::from_coeffs(self.model.basis(), c)
    }

    pub fn dgamma(&self, alpha: Phase) -> Field {
        let mut c = vec![0.0; self.profile.coeffs.len()];
        self.dgamma_coeffs(alpha.value(), &mut c);
        Field::from_coeffs(self.model.basis(), c)
    }

    /// Phase `β` of the nearest translate in the H-norm, found by a coarse scan
    /// at spacing `P/64` followed by Newton on `g(α) = ⟨y − γ_α, Dγ_α⟩`.
    pub fn nearest_phase(&self, y: &[f64]) -> Result<f64> {
        let p = &self.profile.coeffs;
        let fixed = self.symmetry.fixed_part(y, p);
        let period = self.period();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for m in 0..64 {
            let a = period * m as f64 / 64.0;
            let (c0, _, _) = self.symmetry.correlation(y, p, a, fixed);
            if c0 > best.0 {
                best = (c0, a);
            }
        }
        let mut alpha = best.1;
        let scale = h_norm(y) * h_norm(&self.dprofile.coeffs).max(1.0);
        for _ in 0..60 {
            let (_, c1, c2) = self.symmetry.correlation(y, p, alpha, fixed);
            if !(c2 < 0.0) {
                break;
            }
            let step = c1 / c2;
            alpha -= step;
            if step.abs() <= 4.0 * f64::EPSILON * period {
                return Ok(alpha.rem_euclid(period));
            }
        }
        let (_, c1, c2) = self.symmetry.correlation(y, p, alpha, fixed);
        if c2 < 0.0 && c1.abs() <= 1e-12 * scale {
            return Ok(alpha.rem_euclid(period));
        }
        Err(Error::OutOfTube { distance: f64::NAN, radius: self.projection_radius })
    }

    /// Nearest-point projection with the distances to `γ_β`.
    pub fn project_with(&self, y: &[f64], sc: &mut ProjectionScratch) -> Result<Projection> {
        let beta = self.nearest_phase(y)?;
        self.gamma_coeffs(beta, &mut sc.c);
        for (d, v) in sc.c.iter_mut().zip(y) {
            *d = v - *d;
        }
        let basis = self.model.basis();
        basis.to_values(&sc.c, &mut sc.v, &mut sc.scratch);
        let de = sup_norm(&sc.v);
        let dh = h_norm(&sc.c);
        if de > self.projection_radius {
            return Err(Error::OutOfTube { distance: de, radius: self.projection_radius });
        }
        Ok(Projection { phase: self.phase(beta), distance_h: dh, distance_e: de })
    }

    pub fn project(&self, y: &[f64]) -> Result<Projection> {
        self.project_with(y, &mut self.projection_scratch())
    }

    pub fn projection_scratch(&self) -> ProjectionScratch {
        let b = self.model.basis();
        ProjectionScratch { scratch: b.scratch(), c: vec![0.0; b.dim()], v: vec![0.0; b.n_values()] }
    }

    /// Gradient of the projection phase `y ↦ β(y)` (exact, including the
    /// curvature of `Γ`): `Dγ_β / (‖Dγ_β‖² − ⟨y − γ_β, D²γ_β⟩)`.
    pub fn projection_gradient(&self, y: &[f64], beta: f64) -> Vec<f64> {
        let d = y.len();
        let (mut g0, mut g1, mut g2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        self.gamma_coeffs(beta, &mut g0);
        self.dgamma_coeffs(beta, &mut g1);
        self.d2gamma_coeffs(beta, &mut g2);
        let diff: Vec<f64> = y.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let den = dot(&g1, &g1) - dot(&diff, &g2);
        g1.iter().map(|v| v / den).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("isochron-wave-family v1\n");
        s += &format!("model_hash {}\n", self.model.hash());
        s += &format!("speed {:.16e}\n", self.speed);
        s += &format!("period {:.16e}\n", self.period());
        s += &format!("residual {:.16e}\n", self.residual);
        s += &format!("projection_radius {:.16e}\n", self.projection_radius);
        s += &format!("dim {}\n", self.profile.coeffs.len());
        s += "profile\n";
        for c in &self.profile.coeffs {
            s += &format!("{c:.16e}\n");
        }
        s
    }

    pub fn from_text(model: Arc<Model>, text: &str) -> Result<WaveFamily> {
        let mut lines = text.lines();
        let perr = |m: &str| Error::Parse(m.to_string());
        if lines.next().map(str::trim) != Some("isochron-wave-family v1") {
            return Err(perr("missing or unsupported wave family header"));
        }
        let mut field = |key: &str| -> Result<String> {
            let l = lines.next().ok_or_else(|| perr("truncated wave family"))?;
            let (k, v) = l.split_once(' ').ok_or_else(|| perr("malformed line"))?;
            if k != key {
                return Err(Error::Parse(format!("expected {key}, found {k}")));
            }
            Ok(v.trim().to_string())
        };
        let hash = field("model_hash")?;
        if hash != model.hash() {
            return Err(Error::Parse(format!(
                "wave family was computed for model {hash}, configured model is {}",
                model.hash()
            )));
        }
        let num = |s: String| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
        let speed = num(field("speed")?)?;
        let _period = num(field("period")?)?;
        let _residual = num(field("residual")?)?;
        let radius = num(field("projection_radius")?)?;
        let dim: usize = field("dim")?.parse().map_err(|_| perr("bad dim"))?;
        if lines.next().map(str::trim) != Some("profile") {
            return Err(perr("missing profile block"));
        }
        let profile: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        if profile.len() != dim {
            return Err(perr("profile length does not match dim"));
        }
        Ok(WaveFamily::from_profile(model, profile, speed)?.with_projection_radius(radius))
    }
}

pub struct ProjectionScratch {
    scratch: Scratch,
    c: Vec<f64>,
    v: Vec<f64>,
}

fn relative_equilibrium_residual(model: &Model, sym: &Symmetry, profile: &[f64], speed: f64) -> f64 {
    let d = profile.len();
    let mut ws = model.workspace();
    let mut f = vec![0.0; d];
    model.eval_vector_field(profile, &mut f, &mut ws);
    let mut g = vec![0.0; d];
    sym.generator(profile, &mut g);
    f.iter().zip(&g).map(|(a, b)| (a - speed * b).powi(2)).sum::<f64>().sqrt()
}

/// Newton solve of `Lγ̂ + N(γ̂) + cγ̂′ = 0` with the phase condition
/// `⟨γ̂ − guess, guess′⟩ = 0`, using a dense LU factorization.
pub fn find_relative_equilibrium(
    model: Arc<Model>,
    guess: &Field,
    guess_speed: f64,
    opts: NewtonOptions,
) -> Result<WaveFamily> {
    let basis = model.basis().clone();
    let sym = Symmetry::for_basis(&basis)?;
    let d = basis.dim();
    if guess.coeffs.len() != d {
        return invalid("guess does not live on the model basis");
    }
    let mut ws = model.workspace();
    let mut gg = vec![0.0; d];
    sym.generator(&guess.coeffs, &mut gg);
    let mut z = guess.coeffs.clone();
    let mut c = guess_speed;
    let mut vals = vec![0.0; basis.n_values()];
    let mut res = f64::INFINITY;
    for it in 0..=opts.max_iter {
        let mut f = vec![0.0; d];
        model.eval_vector_field(&z, &mut f, &mut ws);
        let mut gz = vec![0.0; d];
        sym.generator(&z, &mut gz);
        for i in 0..d {
            f[i] -= c * gz[i];
        }
        let phase: f64 = z.iter().zip(&guess.coeffs).zip(&gg).map(|((a, b), g)| (a - b) * g).sum();
        res = h_norm(&f);
        if !res.is_finite() {
            break;
        }
        if res <= opts.tol && phase.abs() <= opts.tol.max(1e-14 * h_norm(&z)) {
            let fam = WaveFamily::from_profile(model.clone(), z, c)?;
            return Ok(fam);
        }
        if it == opts.max_iter {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(d + 1, d + 1);
        basis.to_values(&z, &mut vals, &mut ws.scratch);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        let mut gcol = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            model.eval_dn(&vals, &e, &mut col, &mut ws);
            sym.generator(&e, &mut gcol);
            for i in 0..d {
                jac[(i, j)] = col[i] - c * gcol[i];
            }
            jac[(j, j)] -= model.rates()[j];
            jac[(d, j)] = gg[j];
        }
        for i in 0..d {
            jac[(i, d)] = -gz[i];
        }
        let mut rhs = DVector::<f64>::zeros(d + 1);
        for i in 0..d {
            rhs[i] = -f[i];
        }
        rhs[d] = -phase;
        let lu = jac.lu();
        let step = lu.solve(&rhs).ok_or(Error::SingularJacobian(it))?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularJacobian(it));
        }
        for i in 0..d {
            z[i] += step[i];
        }
        c += step[d];
    }
    Err(Error::NewtonDiverged { iterations: opts.max_iter, residual: res })
}

/// Estimate the drift speed of a near-relative-equilibrium state by matching
/// `φ_τ(x)` against translates of `x`.
pub fn estimate_speed(prop: &Propagator, x: &Field, tau: f64) -> Result<f64> {
    let sym = Symmetry::for_basis(prop.model().basis())?;
    let fam = WaveFamily::from_profile(prop.model().clone(), x.coeffs.clone(), 0.0)?;
    let mut y = x.coeffs.clone();
    let mut fw = prop.work();
    prop.advance(&mut y, tau, &mut fw)?;
    let a = fam.nearest_phase(&y)?;
    Ok(wrap_centered(a, sym.period()) / tau)
}

/// Report of the manifold audit.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldAudit {
    /// `(t, min, max)` of `‖φ_t(x) − φ_t(y)‖/‖x − y‖` for pairs on `Γ`, E-norm.
    pub bilipschitz_e: Vec<(f64, f64, f64)>,
    /// Same ratios in the H-norm.
    pub bilipschitz_h: Vec<(f64, f64, f64)>,
    /// `(t, min ratio ‖Dφ_t(γ_α)Dγ_α‖_E/‖Dγ_α‖_E, max ‖Dφ_t(γ_α)Dγ_α − Dγ_{α+ct}‖_E)`.
    pub tangent: Vec<(f64, f64, f64)>,
    pub min_dgamma_e: f64,
    /// `sup_{t≤10} dist_E(φ_t(γ_0), Γ)`.
    pub invariance: f64,
    /// Largest distance to `Γ` at `t = 20` over perturbed starts at distance 0.05.
    pub stability: f64,
}

pub fn audit_manifold(family: &WaveFamily, prop: &Propagator, samples: usize, seed: u64) -> Result<ManifoldAudit> {
    let period = family.period();
    let d = family.profile.coeffs.len();
    let basis = family.model.basis().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fw = prop.work();
    let times = [1.0, 5.0, 10.0];
    let pairs: Vec<(f64, f64)> =
        (0..samples.max(1)).map(|_| (rng.gen::<f64>() * period, rng.gen::<f64>() * period)).collect();
    let mut bl_e = Vec::new();
    let mut bl_h = Vec::new();
    let e_norm = |c: &[f64]| Field::from_coeffs(&basis, c.to_vec()).e_norm();
    for &t in &times {
        let (mut mn, mut mx, mut mnh, mut mxh) = (f64::INFINITY, 0.0f64, f64::INFINITY, 0.0f64);
        for &(a, b) in &pairs {
            let mut x = vec![0.0; d];
            let mut y = vec![0.0; d];
            family.gamma_coeffs(a, &mut x);
            family.gamma_coeffs(b, &mut y);
            let d0: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
            prop.advance(&mut x, t, &mut fw)?;
            prop.advance(&mut y, t, &mut fw)?;
            let d1: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
            let (r, rh) = (e_norm(&d1) / e_norm(&d0), h_norm(&d1) / h_norm(&d0));
            mn = mn.min(r);
            mx = mx.max(r);
            mnh = mnh.min(rh);
            mxh = mxh.max(rh);
        }
        bl_e.push((t, mn, mx));
        bl_h.push((t, mnh, mxh));
    }
    let mut tangent = Vec::new();
    for &t in &times {
        let (mut mn, mut err) = (f64::INFINITY, 0.0f64);
        for &(a, _) in pairs.iter().take(4) {
            let mut x = vec![0.0; d];
            family.gamma_coeffs(a, &mut x);
            let traj = prop.trajectory_with(&x, t, &mut fw)?;
            let mut dg = vec![0.0; d];
            family.dgamma_coeffs(a, &mut dg);
            let pushed = prop.tangent_with(&traj, &dg, &mut fw);
            mn = mn.min(e_norm(&pushed) / e_norm(&dg));
            let mut target = vec![0.0; d];
            family.dgamma_coeffs(a + family.speed * t, &mut target);
            let diff: Vec<f64> = pushed.iter().zip(&target).map(|(p, q)| p - q).collect();
            err = err.max(e_norm(&diff));
        }
        tangent.push((t, mn, err));
    }
    let mut x = family.profile.coeffs.clone();
    let mut invariance = 0.0f64;
    for _ in 0..10 {
        prop.advance(&mut x, 1.0, &mut fw)?;
        invariance = invariance.max(family.project(&x)?.distance_e);
    }
    let mut stability = 0.0f64;
    for _ in 0..20 {
        let v = random_direction(&basis, &mut rng, 2.0);
        let mut x: Vec<f64> = family.profile.coeffs.iter().zip(&v.coeffs).map(|(a, b)| a + 0.05 * b).collect();
        prop.advance(&mut x, 20.0, &mut fw)?;
        let dist = family.project(&x).map(|p| p.distance_e).unwrap_or(f64::INFINITY);
        stability = stability.max(dist);
    }
    Ok(ManifoldAudit {
        bilipschitz_e: bl_e,
        bilipschitz_h: bl_h,
        tangent,
        min_dgamma_e: family.min_dgamma_e,
        invariance,
        stability,
    })
}
