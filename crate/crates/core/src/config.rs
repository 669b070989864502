//! Declarative experiment configuration in TOML, and the bundled fixtures.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{AuditConfig, NoiseSpec};
use crate::error::{invalid, Error, Result};
use crate::flow::FlowConfig;
use crate::isochron::{IsochronConfig, PhaseMap};
use crate::ledger::SweepConfig;
use crate::manifold::{find_relative_equilibrium, NewtonOptions, WaveFamily};
use crate::models::{Model, NeuralField, OracleSpec, Reaction};
use crate::spectral::{Boundary, Field, Grid};
use crate::stochastic::NoiseModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelBlock,
    #[serde(default)]
    pub grid: Option<GridBlock>,
    pub manifold: ManifoldBlock,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub isochron: IsochronConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelBlock {
    ReactionDiffusion { reaction: ReactionBlock, diffusion: Vec<f64>, damping: Vec<f64> },
    NeuralField {
        amp_exc: f64,
        width_exc: f64,
        amp_inh: f64,
        width_inh: f64,
        gain: f64,
        threshold: f64,
        epsilon: f64,
        #[serde(default)]
        coupling: f64,
    },
    OracleOscillator { kappa: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReactionBlock {
    Cubic { b: f64 },
    AmplitudeNagumo { rate: f64, b: f64, omega0: f64, shear: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n_points: usize,
    pub length: f64,
    pub boundary: Boundary,
    pub n_modes: usize,
}

/// Initial guess for the Newton solve of the profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum Guess {
    /// `(A cos κx, A sin κx)` with `κ = 2π·wavenumber/ℓ`.
    PlaneWave { amplitude: f64, wavenumber: usize },
    /// `a_c exp(−(x − center)²/(2 width²))` for each component `c`.
    Gaussian { amplitudes: Vec<f64>, center: f64, width: f64 },
    /// Explicit coefficients.
    Coefficients { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldBlock {
    pub guess: Guess,
    pub speed_guess: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_iter")]
    pub newton_max_iter: usize,
    /// E-distance beyond which projection fails; half the profile norm when absent.
    #[serde(default)]
    pub projection_radius: Option<f64>,
    /// Tube radius; a tenth of the profile norm when absent.
    #[serde(default)]
    pub delta: Option<f64>,
}

fn default_newton_tol() -> f64 {
    NewtonOptions::default().tol
}

fn default_newton_iter() -> usize {
    NewtonOptions::default().max_iter
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunBlock {
    /// Step of the stochastic scheme.
    pub dt: f64,
    pub t_max: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Truncation of the trace term; `K_W` when absent.
    pub k_trace: Option<usize>,
    /// Truncation of the trace-sum tables; the full basis when absent.
    pub k_tables: Option<usize>,
    pub sweep_dt: Vec<f64>,
    pub sweep_t_max: f64,
    /// Partition meshes as multiples of the finest sweep step.
    pub partition: Vec<usize>,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            dt: 2.5e-3,
            t_max: 0.05,
            n_paths: 64,
            seed: 7,
            k_trace: None,
            k_tables: None,
            sweep_dt: vec![1e-2, 5e-3, 2.5e-3],
            sweep_t_max: 0.05,
            partition: vec![4, 2, 1],
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    /// Root for run folders; the environment or `runs` when absent.
    pub directory: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the materialized config.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model, &self.grid) {
            (ModelBlock::OracleOscillator { .. }, Some(_)) => return invalid("the oracle model takes no grid block"),
            (ModelBlock::OracleOscillator { .. }, None) => {}
            (_, None) => return invalid("spatial models need a grid block"),
            _ => {}
        }
        self.flow.validate()?;
        self.isochron.validate()?;
        let r = &self.run;
        if !(r.dt > 0.0) || !(r.t_max >= r.dt) || r.n_paths == 0 {
            return invalid("run needs 0 < dt ≤ t_max and n_paths ≥ 1");
        }
        if r.sweep_dt.is_empty() || r.sweep_dt.windows(2).any(|w| !(w[1] < w[0])) || !(r.sweep_dt[0] > 0.0) {
            return invalid("sweep_dt must be positive and strictly decreasing");
        }
        if r.partition.is_empty() || r.partition.contains(&0) {
            return invalid("partition factors must be positive");
        }
        if r.threads == Some(0) {
            return invalid("threads must be positive");
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Arc<Model>> {
        let grid = || {
            let g = self.grid.as_ref().expect("validated");
            Grid::new(g.n_points, g.length, g.boundary).map(|grid| (grid, g.n_modes))
        };
        let m = match &self.model {
            ModelBlock::ReactionDiffusion { reaction, diffusion, damping } => {
                let (grid, k) = grid()?;
                let reaction = match *reaction {
                    ReactionBlock::Cubic { b } => Reaction::Cubic { b },
                    ReactionBlock::AmplitudeNagumo { rate, b, omega0, shear } => {
                        Reaction::AmplitudeNagumo { rate, b, omega0, shear }
                    }
                };
                Model::reaction_diffusion(grid, k, reaction, diffusion, damping)?
            }
            &ModelBlock::NeuralField { amp_exc, width_exc, amp_inh, width_inh, gain, threshold, epsilon, coupling } => {
                let (grid, k) = grid()?;
                let nf = NeuralField { amp_exc, width_exc, amp_inh, width_inh, gain, threshold, epsilon, coupling };
                Model::neural_field(grid, k, nf)?
            }
            &ModelBlock::OracleOscillator { kappa } => Model::oracle(OracleSpec { kappa, sigma: self.noise.sigma }),
        };
        Ok(Arc::new(m))
    }

    pub fn initial_guess(&self, model: &Model) -> Result<Field> {
        let basis = model.basis();
        match &self.manifold.guess {
            Guess::Coefficients { values } => {
                if values.len() != basis.dim() {
                    return invalid(format!("{} guess coefficients for a basis of dimension {}", values.len(), basis.dim()));
                }
                Ok(Field::from_coeffs(basis, values.clone()))
            }
            Guess::PlaneWave { amplitude, wavenumber } => {
                let grid = basis.grid().ok_or_else(|| Error::Invalid("plane-wave guess needs a grid".into()))?;
                if basis.n_components() != 2 {
                    return invalid("plane-wave guess needs two components");
                }
                let k = 2.0 * PI * *wavenumber as f64 / grid.length;
                let pts = grid.points();
                let mut v: Vec<f64> = pts.iter().map(|x| amplitude * (k * x).cos()).collect();
                v.extend(pts.iter().map(|x| amplitude * (k * x).sin()));
                Ok(Field::from_values(basis, &v))
            }
            Guess::Gaussian { amplitudes, center, width } => {
                let grid = basis.grid().ok_or_else(|| Error::Invalid("gaussian guess needs a grid".into()))?;
                if amplitudes.len() != basis.n_components() {
                    return invalid("one gaussian amplitude per component");
                }
                let pts = grid.points();
                let v: Vec<f64> = amplitudes
                    .iter()
                    .flat_map(|a| pts.iter().map(move |x| a * (-(x - center).powi(2) / (2.0 * width * width)).exp()))
                    .collect();
                Ok(Field::from_values(basis, &v))
            }
        }
    }

    pub fn newton_options(&self) -> NewtonOptions {
        NewtonOptions { tol: self.manifold.newton_tol, max_iter: self.manifold.newton_max_iter }
    }

    /// Newton solve for the profile from the configured guess.
    pub fn find_wave(&self, model: Arc<Model>) -> Result<WaveFamily> {
        let guess = self.initial_guess(&model)?;
        let fam = find_relative_equilibrium(model, &guess, self.manifold.speed_guess, self.newton_options())?;
        Ok(self.finish_family(fam))
    }

    /// Applies the configured projection radius.
    pub fn finish_family(&self, fam: WaveFamily) -> WaveFamily {
        match self.manifold.projection_radius {
            Some(r) => fam.with_projection_radius(r),
            None => fam,
        }
    }

    pub fn delta(&self, fam: &WaveFamily) -> f64 {
        self.manifold.delta.unwrap_or_else(|| fam.default_delta())
    }

    pub fn phase_map(&self, fam: Arc<WaveFamily>) -> Result<PhaseMap> {
        PhaseMap::new(fam, self.flow.clone(), self.isochron.clone())
    }

    pub fn noise_model(&self, model: &Model) -> Result<NoiseModel> {
        self.noise.build(model)
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            dt_list: self.run.sweep_dt.clone(),
            n_paths: self.run.n_paths,
            t_max: self.run.sweep_t_max,
            seed: self.run.seed,
        }
    }

    /// Truncation of the trace term.
    pub fn k_trace(&self, noise: &NoiseModel) -> usize {
        self.run.k_trace.unwrap_or(noise.n_noise_modes)
    }
}

pub const BUNDLED: [&str; 3] = ["nagumo_wave", "amari_bump", "oracle_sl"];

/// Text of a bundled fixture config.
pub fn bundled_text(name: &str) -> Option<&'static str> {
    match name {
        "nagumo_wave" => Some(include_str!("../../../configs/nagumo_wave.toml")),
        "amari_bump" => Some(include_str!("../../../configs/amari_bump.toml")),
        "oracle_sl" => Some(include_str!("../../../configs/oracle_sl.toml")),
        _ => None,
    }
}

pub fn bundled(name: &str) -> Result<ExperimentConfig> {
    let text = bundled_text(name).ok_or_else(|| Error::Invalid(format!("no bundled config named {name}")))?;
    ExperimentConfig::from_toml(text)
}
