//! Diagonal representation of the linear part: bases, transforms, fields and
//! the semigroup `Λ_t = e^{tL}`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub n_points: usize,
    pub length: f64,
    pub boundary: Boundary,
}

impl Grid {
    pub fn new(n_points: usize, length: f64, boundary: Boundary) -> Result<Grid> {
        if n_points < 8 || !n_points.is_power_of_two() {
            return invalid(format!("n_points = {n_points} must be a power of two and at least 8"));
        }
        if !(length.is_finite() && length > 0.0) {
            return invalid(format!("domain length {length} must be positive"));
        }
        Ok(Grid { n_points, length, boundary })
    }

    /// Quadrature weight of the collocation rule.
    pub fn spacing(&self) -> f64 {
        match self.boundary {
            Boundary::Periodic => self.length / self.n_points as f64,
            Boundary::Dirichlet => self.length / (self.n_points + 1) as f64,
        }
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        match self.boundary {
            Boundary::Periodic => (0..self.n_points).map(|i| i as f64 * h).collect(),
            Boundary::Dirichlet => (1..=self.n_points).map(|i| i as f64 * h).collect(),
        }
    }

    /// Largest admissible number of modes per component. Periodic grids keep
    /// only complete cosine/sine pairs, so the unpaired Nyquist cosine is left out.
    pub fn max_modes(&self) -> usize {
        match self.boundary {
            Boundary::Periodic => self.n_points / 2 - 1,
            Boundary::Dirichlet => self.n_points,
        }
    }

    /// Wavenumber `κ_j` of mode `j`.
    pub fn wavenumber(&self, j: usize) -> f64 {
        match self.boundary {
            Boundary::Periodic => 2.0 * PI * j as f64 / self.length,
            Boundary::Dirichlet => PI * j as f64 / self.length,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BasisKind {
    Constant,
    Cos,
    Sin,
    Coordinate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BasisFunction {
    pub component: usize,
    pub wavenumber: usize,
    pub kind: BasisKind,
}

enum Transform {
    Fourier { forward: Arc<dyn Fft<f64>>, inverse: Arc<dyn Fft<f64>>, scratch_len: usize },
    Sine { matrix: Vec<f64> },
    Identity,
}

/// Orthonormal basis of the truncated state space together with the
/// coefficient/collocation transforms. Coefficients are stored per component
/// in contiguous blocks: `[c0, a1, b1, a2, b2, ...]` for periodic grids and
/// `[s1, s2, ...]` for Dirichlet grids.
pub struct Basis {
    grid: Option<Grid>,
    n_components: usize,
    n_modes: usize,
    block: usize,
    functions: Vec<BasisFunction>,
    transform: Transform,
}

impl fmt::Debug for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Basis")
            .field("grid", &self.grid)
            .field("n_components", &self.n_components)
            .field("n_modes", &self.n_modes)
            .finish()
    }
}

/// Per-thread scratch buffers for transforms.
pub struct Scratch {
    buf: Vec<Complex64>,
    fft: Vec<Complex64>,
}

impl Basis {
    pub fn on_grid(grid: Grid, n_components: usize, n_modes: usize) -> Result<Arc<Basis>> {
        if n_components == 0 {
            return invalid("at least one component is required");
        }
        if n_modes == 0 || n_modes > grid.max_modes() {
            return invalid(format!(
                "n_modes = {n_modes} exceeds the {} resolvable modes of the grid",
                grid.max_modes()
            ));
        }
        let n = grid.n_points;
        let (block, kinds): (usize, Vec<(usize, BasisKind)>) = match grid.boundary {
            Boundary::Periodic => {
                let mut k = vec![(0, BasisKind::Constant)];
                for j in 1..=n_modes {
                    k.push((j, BasisKind::Cos));
                    k.push((j, BasisKind::Sin));
                }
                (2 * n_modes + 1, k)
            }
            Boundary::Dirichlet => (n_modes, (1..=n_modes).map(|j| (j, BasisKind::Sin)).collect()),
        };
        let functions = (0..n_components)
            .flat_map(|c| {
                kinds.iter().map(move |&(wavenumber, kind)| BasisFunction { component: c, wavenumber, kind })
            })
            .collect();
        let transform = match grid.boundary {
            Boundary::Periodic => {
                let mut planner = FftPlanner::new();
                let forward = planner.plan_fft_forward(n);
                let inverse = planner.plan_fft_inverse(n);
                let scratch_len =
                    forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
                Transform::Fourier { forward, inverse, scratch_len }
            }
            Boundary::Dirichlet => {
                let s = (2.0 / grid.length).sqrt();
                let x = grid.points();
                let mut matrix = vec![0.0; n * n_modes];
                for i in 0..n {
                    for j in 0..n_modes {
                        matrix[i * n_modes + j] = s * (grid.wavenumber(j + 1) * x[i]).sin();
                    }
                }
                Transform::Sine { matrix }
            }
        };
        Ok(Arc::new(Basis { grid: Some(grid), n_components, n_modes, block, functions, transform }))
    }

    /// Finite-dimensional state space with the identity as "transform".
    pub fn point(dim: usize) -> Arc<Basis> {
        let functions = (0..dim)
            .map(|c| BasisFunction { component: c, wavenumber: 0, kind: BasisKind::Coordinate })
            .collect();
        Arc::new(Basis {
            grid: None,
            n_components: dim,
            n_modes: 1,
            block: 1,
            functions,
            transform: Transform::Identity,
        })
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.grid.as_ref()
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dim(&self) -> usize {
        self.block * self.n_components
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn points_per_component(&self) -> usize {
        self.grid.as_ref().map_or(1, |g| g.n_points)
    }

    pub fn n_values(&self) -> usize {
        self.points_per_component() * self.n_components
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    /// Exact sup norm of a basis function.
    pub fn sup_norm(&self, k: usize) -> f64 {
        match (&self.grid, self.functions[k].kind) {
            (None, _) | (_, BasisKind::Coordinate) => 1.0,
            (Some(g), BasisKind::Constant) => 1.0 / g.length.sqrt(),
            (Some(g), _) => (2.0 / g.length).sqrt(),
        }
    }

    pub fn scratch(&self) -> Scratch {
        let (n, s) = match &self.transform {
            Transform::Fourier { scratch_len, .. } => (self.points_per_component(), *scratch_len),
            _ => (0, 0),
        };
        Scratch { buf: vec![Complex64::new(0.0, 0.0); n], fft: vec![Complex64::new(0.0, 0.0); s] }
    }

    /// Synthesis: collocation values from coefficients.
    pub fn to_values(&self, coeffs: &[f64], values: &mut [f64], ws: &mut Scratch) {
        debug_assert_eq!(coeffs.len(), self.dim());
        debug_assert_eq!(values.len(), self.n_values());
        match &self.transform {
            Transform::Identity => values.copy_from_slice(coeffs),
            Transform::Sine { matrix } => {
                let n = self.points_per_component();
                let k = self.n_modes;
                for c in 0..self.n_components {
                    let cb = &coeffs[c * k..(c + 1) * k];
                    for i in 0..n {
                        let row = &matrix[i * k..(i + 1) * k];
                        values[c * n + i] = row.iter().zip(cb).map(|(a, b)| a * b).sum();
                    }
                }
            }
            Transform::Fourier { inverse, .. } => {
                let g = self.grid.as_ref().unwrap();
                let n = g.n_points;
                let half = 0.5 * (2.0 / g.length).sqrt();
                let c0 = 1.0 / g.length.sqrt();
                let mut c = 0;
                while c < self.n_components {
                    let pair = c + 1 < self.n_components;
                    let z = &mut ws.buf;
                    z.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    let u = &coeffs[c * self.block..(c + 1) * self.block];
                    let w = if pair { &coeffs[(c + 1) * self.block..(c + 2) * self.block] } else { u };
                    let wf = if pair { 1.0 } else { 0.0 };
                    z[0] = Complex64::new(c0 * u[0], wf * c0 * w[0]);
                    for j in 1..=self.n_modes {
                        let fu = Complex64::new(half * u[2 * j - 1], -half * u[2 * j]);
                        let fw = Complex64::new(half * w[2 * j - 1], -half * w[2 * j]) * wf;
                        let i = Complex64::new(0.0, 1.0);
                        z[j] = fu + i * fw;
                        z[n - j] = fu.conj() + i * fw.conj();
                    }
                    inverse.process_with_scratch(z, &mut ws.fft);
                    for p in 0..n {
                        values[c * n + p] = z[p].re;
                        if pair {
                            values[(c + 1) * n + p] = z[p].im;
                        }
                    }
                    c += 2;
                }
            }
        }
    }

    /// Analysis: orthogonal projection of collocation values onto the basis.
    pub fn to_coeffs(&self, values: &[f64], coeffs: &mut [f64], ws: &mut Scratch) {
        debug_assert_eq!(coeffs.len(), self.dim());
        debug_assert_eq!(values.len(), self.n_values());
        match &self.transform {
            Transform::Identity => coeffs.copy_from_slice(values),
            Transform::Sine { matrix } => {
                let g = self.grid.as_ref().unwrap();
                let h = g.spacing();
                let n = g.n_points;
                let k = self.n_modes;
                for c in 0..self.n_components {
                    let out = &mut coeffs[c * k..(c + 1) * k];
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..n {
                        let v = values[c * n + i] * h;
                        let row = &matrix[i * k..(i + 1) * k];
                        for j in 0..k {
                            out[j] += row[j] * v;
                        }
                    }
                }
            }
            Transform::Fourier { forward, .. } => {
                let g = self.grid.as_ref().unwrap();
                let n = g.n_points;
                let nf = n as f64;
                let s0 = g.length.sqrt() / nf;
                let s1 = (2.0 * g.length).sqrt() / nf;
                let mut c = 0;
                while c < self.n_components {
                    let pair = c + 1 < self.n_components;
                    let z = &mut ws.buf;
                    for p in 0..n {
                        let im = if pair { values[(c + 1) * n + p] } else { 0.0 };
                        z[p] = Complex64::new(values[c * n + p], im);
                    }
                    forward.process_with_scratch(z, &mut ws.fft);
                    let b = self.block;
                    for j in 0..=self.n_modes {
                        let zj = z[j];
                        let zc = z[(n - j) % n].conj();
                        let u = (zj + zc) * 0.5;
                        let w = (zj - zc) * Complex64::new(0.0, -0.5);
                        if j == 0 {
                            coeffs[c * b] = s0 * u.re;
                            if pair {
                                coeffs[(c + 1) * b] = s0 * w.re;
                            }
                        } else {
                            coeffs[c * b + 2 * j - 1] = s1 * u.re;
                            coeffs[c * b + 2 * j] = -s1 * u.im;
                            if pair {
                                coeffs[(c + 1) * b + 2 * j - 1] = s1 * w.re;
                                coeffs[(c + 1) * b + 2 * j] = -s1 * w.im;
                            }
                        }
                    }
                    c += 2;
                }
            }
        }
    }
}

/// A state held both as coefficients and as collocation values.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub coeffs: Vec<f64>,
    pub values: Vec<f64>,
    pub n_components: usize,
}

impl Field {
    pub fn from_coeffs(basis: &Basis, coeffs: Vec<f64>) -> Field {
        assert_eq!(coeffs.len(), basis.dim(), "coefficient vector has the wrong length");
        let mut values = vec![0.0; basis.n_values()];
        basis.to_values(&coeffs, &mut values, &mut basis.scratch());
        Field { coeffs, values, n_components: basis.n_components() }
    }

    /// Projects arbitrary collocation values; the stored values are the
    /// synthesis of the projection so both representations agree.
    pub fn from_values(basis: &Basis, values: &[f64]) -> Field {
        assert_eq!(values.len(), basis.n_values(), "value vector has the wrong length");
        let mut coeffs = vec![0.0; basis.dim()];
        basis.to_coeffs(values, &mut coeffs, &mut basis.scratch());
        Field::from_coeffs(basis, coeffs)
    }

    pub fn zeros(basis: &Basis) -> Field {
        Field::from_coeffs(basis, vec![0.0; basis.dim()])
    }

    /// The basis function with layout index `k`.
    pub fn unit(basis: &Basis, k: usize) -> Field {
        let mut c = vec![0.0; basis.dim()];
        c[k] = 1.0;
        Field::from_coeffs(basis, c)
    }

    pub fn h_norm(&self) -> f64 {
        h_norm(&self.coeffs)
    }

    pub fn e_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().chain(&self.values).all(|v| v.is_finite())
    }
}

pub fn h_norm(c: &[f64]) -> f64 {
    c.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Partial sum with a bound on everything left out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedSum {
    pub partial: f64,
    pub tail_bound: Option<f64>,
}

/// `L = diag(D_c Δ − a_c)` on a grid basis, or the zero operator on a point basis.
#[derive(Clone, Debug)]
pub struct SpectralOperator {
    basis: Arc<Basis>,
    diffusion: Vec<f64>,
    damping: Vec<f64>,
    rates: Vec<f64>,
    order: Vec<usize>,
    omega: f64,
}

impl SpectralOperator {
    /// Per-component diffusion coefficients `D_c ≥ 0` and damping `a_c ≥ 0`.
    pub fn new(basis: Arc<Basis>, diffusion: &[f64], damping: &[f64]) -> Result<SpectralOperator> {
        let nc = basis.n_components();
        if diffusion.len() != nc || damping.len() != nc {
            return invalid("one diffusion and one damping coefficient per component");
        }
        if diffusion.iter().chain(damping).any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("diffusion and damping must be finite and non-negative");
        }
        let rates: Vec<f64> = basis
            .functions()
            .iter()
            .map(|f| {
                let kappa = basis.grid().map_or(0.0, |g| g.wavenumber(f.wavenumber));
                diffusion[f.component] * kappa * kappa + damping[f.component]
            })
            .collect();
        let mut order: Vec<usize> = (0..rates.len()).collect();
        let fs = basis.functions();
        order.sort_by(|&i, &j| {
            rates[i]
                .total_cmp(&rates[j])
                .then(fs[i].wavenumber.cmp(&fs[j].wavenumber))
                .then(fs[i].component.cmp(&fs[j].component))
                .then((fs[i].kind as u8).cmp(&(fs[j].kind as u8)))
        });
        let omega = rates[order[0]];
        Ok(SpectralOperator {
            basis,
            diffusion: diffusion.to_vec(),
            damping: damping.to_vec(),
            rates,
            order,
            omega,
        })
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    pub fn damping(&self) -> &[f64] {
        &self.damping
    }

    /// Decay rates `λ` in coefficient layout order (`L e = −λ e`).
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Layout indices of the basis functions sorted by eigenvalue: `e_1, e_2, ...`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Eigenvalues `λ_1 ≤ λ_2 ≤ ...`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.order.iter().map(|&i| self.rates[i]).collect()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn n_modes(&self) -> usize {
        self.basis.n_modes()
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    pub fn semigroup_coeffs(&self, t: f64, coeffs: &mut [f64]) {
        for (c, l) in coeffs.iter_mut().zip(&self.rates) {
            *c *= (-l * t).exp();
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), l) in out.iter_mut().zip(x).zip(&self.rates) {
            *o = -l * v;
        }
    }

    pub fn semigroup(&self, t: f64, x: &Field) -> Result<Field> {
        if !(t >= 0.0) {
            return invalid(format!("semigroup time {t} must be non-negative"));
        }
        let mut c = x.coeffs.clone();
        self.semigroup_coeffs(t, &mut c);
        Ok(Field::from_coeffs(&self.basis, c))
    }

    /// `Σ_{k<K} ‖Λ_t e_k‖_E` over the first `K` functions in eigen-order.
    pub fn trace_sum(&self, t: f64, k: usize) -> f64 {
        self.order[..k.min(self.order.len())]
            .iter()
            .map(|&i| (-self.rates[i] * t).exp() * self.basis.sup_norm(i))
            .sum()
    }

    /// Bound on `Σ_{k≥K} ‖Λ_t e_k‖_E` over the whole (untruncated) eigenbasis.
    /// Exact inside the truncation, geometric majorant beyond it. `None` if the
    /// spectrum does not grow (some component has no diffusion).
    pub fn trace_tail_bound(&self, t: f64, k: usize) -> Option<f64> {
        let g = self.basis.grid()?;
        let dmin = self.diffusion.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(dmin > 0.0) || !(t > 0.0) {
            return None;
        }
        let amin = self.damping.iter().cloned().fold(f64::INFINITY, f64::min);
        let inside: f64 = self.order[k.min(self.order.len())..]
            .iter()
            .map(|&i| (-self.rates[i] * t).exp() * self.basis.sup_norm(i))
            .sum();
        let per_level = match g.boundary {
            Boundary::Periodic => 2.0,
            Boundary::Dirichlet => 1.0,
        } * self.basis.n_components() as f64;
        let alpha = dmin * g.wavenumber(1).powi(2);
        let j0 = (self.basis.n_modes() + 1) as f64;
        let ratio = (-t * alpha * (2.0 * j0 + 1.0)).exp();
        let beyond = per_level * (2.0 / g.length).sqrt() * (-t * amin).exp() * (-t * alpha * j0 * j0).exp()
            / (1.0 - ratio);
        Some(inside + beyond)
    }

    /// Truncated estimate of `K_{s,r} = sup_{t∈[s,r]} Σ_k ‖Λ_t e_k‖_E`.
    pub fn trace_constant(&self, s: f64, r: f64) -> Result<f64> {
        Ok(self.trace_constant_truncated(s, r, self.dim())?.partial)
    }

    pub fn trace_constant_truncated(&self, s: f64, r: f64, k: usize) -> Result<TruncatedSum> {
        if !(s > 0.0) || !(r > s) {
            return invalid(format!("trace constant needs 0 < s < r, got s = {s}, r = {r}"));
        }
        const MESH: usize = 64;
        let mut best = f64::NEG_INFINITY;
        let mut best_t = s;
        for m in 0..=MESH {
            let t = s + (r - s) * m as f64 / MESH as f64;
            let v = self.trace_sum(t, k);
            if v > best {
                best = v;
                best_t = t;
            }
        }
        Ok(TruncatedSum { partial: best, tail_bound: self.trace_tail_bound(best_t, k) })
    }

    /// `C_λ = max_k (λ_{k+1} − λ_k)^{-1} ln(λ_{k+1}/λ_k)` over the distinct
    /// eigenvalue levels. Multiplicities from cosine/sine pairs and identical
    /// components are structural and collapse into one level.
    pub fn gap_constant(&self) -> Result<f64> {
        let mut levels: Vec<f64> = Vec::new();
        for l in self.eigenvalues() {
            match levels.last() {
                Some(&p) if (l - p).abs() <= 1e-12 * l.abs().max(1.0) => {}
                _ => levels.push(l),
            }
        }
        gap_constant_of(&levels)
    }
}

/// Gap expression over an explicit ascending eigenvalue list.
pub fn gap_constant_of(eigenvalues: &[f64]) -> Result<f64> {
    if eigenvalues.len() < 2 {
        return invalid("gap constant needs at least two modes");
    }
    if eigenvalues[0] <= 0.0 {
        return invalid(format!("gap constant needs positive eigenvalues, got {}", eigenvalues[0]));
    }
    let mut best = f64::NEG_INFINITY;
    for w in eigenvalues.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b == a {
            return Err(Error::DegenerateSpectrum(a));
        }
        if b < a {
            return invalid("eigenvalues must be ascending");
        }
        best = best.max((b / a).ln() / (b - a));
    }
    Ok(best)
}

/// `L = Δ − a` on a scalar field.
pub fn make_operator(grid: Grid, damping: f64, n_modes: usize) -> Result<SpectralOperator> {
    if !(grid.length > 0.0) {
        return invalid("domain length must be positive");
    }
    let basis = Basis::on_grid(grid, 1, n_modes)?;
    SpectralOperator::new(basis, &[1.0], &[damping])
}

pub fn semigroup_apply(op: &SpectralOperator, t: f64, x: &Field) -> Result<Field> {
    op.semigroup(t, x)
}

pub fn trace_constant(op: &SpectralOperator, s: f64, r: f64) -> Result<f64> {
    op.trace_constant(s, r)
}

pub fn gap_constant(op: &SpectralOperator) -> Result<f64> {
    op.gap_constant()
}
