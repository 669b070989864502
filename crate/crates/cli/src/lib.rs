//! Subcommands of the `isochron` driver. Each writes one append-only run
//! folder holding its outputs, the materialized config and a manifest.

pub mod output;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use isochron::audit::run_audit;
use isochron::config::{bundled_text, ExperimentConfig};
use isochron::flow::flow_trace_sums;
use isochron::isochron::PhaseMap;
use isochron::ledger::{
    oracle_sde_check, partition_ensemble, residual_order_sweep, Ledger, PartitionDiagnostics, SweepReport,
};
use isochron::manifold::WaveFamily;
use isochron::models::{random_direction, Model, ModelKind};
use isochron::par::Exec;
use isochron::spectral::Field;
use isochron::stochastic::{exit_statistics, Spde};
use isochron::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use output::RunDir;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Numerical(String),
    MissingArtifact(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> CliError {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reads a config file, or a bundled fixture when no such file exists.
pub fn load_config(spec: &str) -> CliResult<ExperimentConfig> {
    let path = Path::new(spec);
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| CliError::io(path, e))?
    } else if let Some(t) = bundled_text(spec) {
        t.to_string()
    } else {
        return Err(CliError::Config(format!("{spec}: no such file or bundled config")));
    };
    Ok(ExperimentConfig::from_toml(&text)?)
}

/// Output root: explicit, else the config's, else `$ISOCHRON_OUT`, else `runs`.
pub fn output_root(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.directory.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("ISOCHRON_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub summary: String,
}

pub struct Session {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub exec: Exec,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn row(vals: &[f64]) -> Vec<String> {
    vals.iter().map(|v| num(*v)).collect()
}

impl Session {
    pub fn new(cfg: ExperimentConfig, root: PathBuf) -> Session {
        Session { cfg, root, exec: Exec::Parallel }
    }

    fn model(&self) -> CliResult<Arc<Model>> {
        Ok(self.cfg.build_model()?)
    }

    /// The wave family from `wave` (a file or a find-wave folder), or from the
    /// newest compatible find-wave folder under the output root.
    pub fn load_wave(&self, model: &Arc<Model>, wave: Option<&Path>) -> CliResult<WaveFamily> {
        let read = |p: &Path| -> CliResult<WaveFamily> {
            let file = if p.is_dir() { p.join("wave.txt") } else { p.to_path_buf() };
            let text = fs::read_to_string(&file)
                .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", file.display())))?;
            let fam = WaveFamily::from_text(model.clone(), &text)
                .map_err(|e| CliError::MissingArtifact(format!("{}: {e}", file.display())))?;
            Ok(self.cfg.finish_family(fam))
        };
        if let Some(p) = wave {
            return read(p);
        }
        let mut dirs: Vec<(u64, PathBuf)> = fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let n = name.strip_prefix("find-wave_")?.rsplit('_').next()?.parse().ok()?;
                Some((n, e.path()))
            })
            .collect();
        dirs.sort_by(|a, b| b.cmp(a));
        dirs.iter().find_map(|(_, d)| read(d).ok()).ok_or_else(|| {
            CliError::MissingArtifact(format!(
                "no wave family for this model under {}; run find-wave first",
                self.root.display()
            ))
        })
    }

    fn open(&self, command: &str, cfg: &ExperimentConfig) -> CliResult<RunDir> {
        let mut dir = RunDir::create(&self.root, command, &cfg.hash())?;
        dir.write_str("config.toml", &cfg.to_toml())?;
        Ok(dir)
    }

    fn materialized(&self, fam: &WaveFamily, pm: Option<&PhaseMap>) -> ExperimentConfig {
        let mut cfg = self.cfg.clone();
        cfg.manifold.projection_radius = Some(fam.projection_radius());
        cfg.manifold.delta = Some(self.cfg.delta(fam));
        if let Some(pm) = pm {
            cfg.isochron.tol_gamma = Some(pm.tol_gamma());
            cfg.isochron.t_cap = Some(pm.t_cap());
        }
        cfg
    }

    pub fn find_wave(&self) -> CliResult<Outcome> {
        let model = self.model()?;
        let fam = self.cfg.find_wave(model.clone())?;
        let cfg = self.materialized(&fam, None);
        let mut dir = self.open("find-wave", &cfg)?;
        dir.write_str("wave.txt", &fam.to_text())?;
        let mut rep = String::new();
        let _ = writeln!(rep, "model_hash = {}", model.hash());
        let _ = writeln!(rep, "speed = {:e}", fam.speed());
        let _ = writeln!(rep, "period = {:e}", fam.period());
        let _ = writeln!(rep, "residual = {:e}", fam.residual());
        let _ = writeln!(rep, "min_dgamma_e = {:e}", fam.min_dgamma_e());
        let _ = writeln!(rep, "min_profile_e = {:e}", fam.min_profile_e());
        let _ = writeln!(rep, "projection_radius = {:e}", fam.projection_radius());
        dir.write_str("report.txt", &rep)?;
        if let Some(grid) = model.basis().grid() {
            let nc = model.basis().n_components();
            let n = grid.n_points;
            let vals = &fam.profile().values;
            let rows: Vec<Vec<String>> = grid
                .points()
                .iter()
                .enumerate()
                .map(|(i, x)| std::iter::once(*x).chain((0..nc).map(|c| vals[c * n + i])).map(num).collect())
                .collect();
            let header: Vec<String> = std::iter::once("x".to_string()).chain((0..nc).map(|c| format!("u{c}"))).collect();
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            dir.write_csv("profile.csv", &h, &rows)?;
        }
        Ok(Outcome { dir: dir.finish()?, summary: rep })
    }

    pub fn isochron(&self, wave: Option<&Path>, state: &Path) -> CliResult<Outcome> {
        let model = self.model()?;
        let fam = Arc::new(self.load_wave(&model, wave)?);
        let text = fs::read_to_string(state).map_err(|e| CliError::MissingArtifact(format!("{}: {e}", state.display())))?;
        let vals: Vec<f64> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| CliError::Config(format!("state file: {s}: {e}"))))
            .collect::<CliResult<_>>()?;
        let basis = model.basis();
        let x = if vals.len() == basis.dim() {
            Field::from_coeffs(basis, vals)
        } else if vals.len() == basis.n_values() {
            Field::from_values(basis, &vals)
        } else {
            return Err(CliError::Config(format!(
                "state has {} entries; expected {} coefficients or {} grid values",
                vals.len(),
                basis.dim(),
                basis.n_values()
            )));
        };
        let pm = self.cfg.phase_map(fam.clone())?;
        let r = pm.resolve(&x.coeffs)?;
        let t = pm.horizon_for(r.time);
        let grad = pm.grad_at(&x.coeffs, t)?;
        let drift = pm.dpi_v(&x.coeffs)?;
        let cfg = self.materialized(&fam, Some(&pm));
        let mut dir = self.open("isochron", &cfg)?;
        let mut rep = String::new();
        let _ = writeln!(rep, "phase = {:e}", r.phase.value());
        let _ = writeln!(rep, "period = {:e}", r.phase.period());
        let _ = writeln!(rep, "resolve_time = {:e}", r.time);
        let _ = writeln!(rep, "terminal_distance = {:e}", r.distance);
        let _ = writeln!(rep, "horizon = {:e}", t);
        let _ = writeln!(rep, "dpi_v = {:e}", drift);
        let _ = writeln!(rep, "gradient_h_norm = {:e}", grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        dir.write_str("phase.txt", &rep)?;
        let rows: Vec<Vec<String>> = grad.iter().enumerate().map(|(i, g)| vec![i.to_string(), num(*g)]).collect();
        dir.write_csv("gradient.csv", &["index", "dpi"], &rows)?;
        Ok(Outcome { dir: dir.finish()?, summary: rep })
    }

    pub fn simulate(&self) -> CliResult<Outcome> {
        let model = self.model()?;
        let fam = Arc::new(self.load_wave(&model, None)?);
        self.simulate_with(fam)
    }

    pub fn simulate_with(&self, fam: Arc<WaveFamily>) -> CliResult<Outcome> {
        let noise = self.cfg.noise_model(fam.model())?;
        let spde = Spde::new(&fam, &noise, self.cfg.delta(&fam))?;
        let r = &self.cfg.run;
        let x0 = fam.profile().coeffs.clone();
        let samples = spde.ensemble(&x0, r.t_max, r.dt, r.seed, r.n_paths, self.exec)?;
        let cfg = self.materialized(&fam, None);
        let mut dir = self.open("simulate", &cfg)?;
        for s in &samples {
            let rows: Vec<Vec<String>> = s
                .times
                .iter()
                .zip(&s.tube)
                .map(|(t, (p, d))| {
                    let flag = if s.exit_time.map_or(false, |te| *t >= te) { s.exit_flag.as_str() } else { "none" };
                    vec![num(*t), num(*p), num(*d), flag.to_string()]
                })
                .collect();
            dir.write_csv(&format!("path_{:04}.csv", s.path), &["time", "phase", "tube_distance", "exit_flag"], &rows)?;
        }
        let st = exit_statistics(&samples, r.t_max)?;
        let mut rep = String::new();
        let _ = writeln!(rep, "paths = {}", st.n);
        let _ = writeln!(rep, "exits = {}", st.n_exit);
        let _ = writeln!(rep, "exit_fraction = {}", st.exit_fraction);
        let _ = writeln!(rep, "mean_exit_time_capped = {:e}", st.mean);
        let _ = writeln!(rep, "median_exit_time_capped = {:e}", st.median);
        dir.write_str("exit_stats.txt", &rep)?;
        Ok(Outcome { dir: dir.finish()?, summary: rep })
    }

    pub fn ito_check(&self) -> CliResult<Outcome> {
        let model = self.model()?;
        let fam = Arc::new(self.load_wave(&model, None)?);
        let pm = self.cfg.phase_map(fam.clone())?;
        let noise = self.cfg.noise_model(&model)?;
        let ledger = Ledger::new(&pm, &noise, self.cfg.k_trace(&noise))?;
        let spde = Spde::new(&fam, &noise, self.cfg.delta(&fam))?;
        let x0 = fam.profile().coeffs.clone();
        let sweep = residual_order_sweep(&ledger, &spde, &x0, &self.cfg.sweep(), self.exec)?;
        let fin = sweep.finest();
        let parts = partition_ensemble(&ledger, &spde, &fin.samples, &self.cfg.run.partition, self.exec)?;
        let oracle = if matches!(model.kind(), ModelKind::OracleOscillator(_)) {
            Some(oracle_sde_check(&ledger, &fin.samples, &fin.ledgers)?)
        } else {
            None
        };
        let cfg = self.materialized(&fam, Some(&pm));
        let mut dir = self.open("ito-check", &cfg)?;
        let rows: Vec<Vec<String>> = sweep
            .levels
            .iter()
            .map(|l| row(&[l.dt, l.rms_sup_residual, l.martingale_mean, l.martingale_se, l.qv_ratio]))
            .collect();
        dir.write_csv(
            "sweep.csv",
            &["dt", "rms_sup_residual", "martingale_mean", "martingale_se", "qv_ratio"],
            &rows,
        )?;
        for (s, l) in fin.samples.iter().zip(&fin.ledgers) {
            let rows: Vec<Vec<String>> = (0..l.times.len())
                .map(|i| row(&[l.times[i], l.pi[i], l.drift[i], l.trace[i], l.martingale[i], l.residual[i]]))
                .collect();
            dir.write_csv(
                &format!("ledger_{:04}.csv", s.path),
                &["time", "pi", "drift_cum", "trace_cum", "martingale_cum", "residual"],
                &rows,
            )?;
        }
        let rows: Vec<Vec<String>> = parts
            .iter()
            .map(|p| {
                let t = p.terms;
                row(&[p.h, t[0], t[1], t[2], t[3], t[4], t[5], p.increment, p.identity_error()])
            })
            .collect();
        dir.write_csv(
            "partition.csv",
            &["h", "I", "II", "III", "IV", "V", "VI", "increment", "identity_error"],
            &rows,
        )?;
        let trace_total: f64 = fin.ledgers.iter().map(|l| l.trace[l.last()]).sum();
        let mut rep = ito_summary(&sweep, &parts, trace_total);
        if let Some(o) = &oracle {
            let _ = writeln!(rep, "oracle_drift_error = {:e}", o.drift_error);
            let _ = writeln!(rep, "oracle_qv_z = {:.3}", o.z_score());
            let _ = writeln!(rep, "oracle_drift: {}", verdict(o.drift_error <= 1e-3));
            let _ = writeln!(rep, "oracle_diffusion: {}", verdict(o.z_score() <= 3.0));
        }
        dir.write_str("summary.txt", &rep)?;
        Ok(Outcome { dir: dir.finish()?, summary: rep })
    }

    pub fn traces(&self) -> CliResult<Outcome> {
        let model = self.model()?;
        let fam = Arc::new(self.load_wave(&model, None)?);
        let pm = self.cfg.phase_map(fam.clone())?;
        let k = self.cfg.run.k_tables.unwrap_or(model.dim()).min(model.dim());
        let basis = model.basis();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.run.seed);
        let v = random_direction(basis, &mut rng, 2.0);
        let s = 0.5 * self.cfg.delta(&fam);
        let x = Field::from_coeffs(basis, fam.profile().coeffs.iter().zip(&v.coeffs).map(|(a, b)| a + s * b).collect());
        let mut ks: Vec<usize> = (0..).map(|i| 1usize << i).take_while(|&m| m < k).collect();
        ks.push(k);
        let mut flow_rows = Vec::new();
        for &t in &[0.1, 0.25, 0.5, 1.0] {
            let ts = flow_trace_sums(pm.propagator(), &x, t, k, self.exec)?;
            for &kk in &ks {
                let p = ts.partial(kk);
                flow_rows.push(row(&[t, kk as f64, p[0], p[1], p[2]]));
            }
        }
        let pis = pm.pi_trace_sums(&x.coeffs, k, self.exec)?;
        let pi_rows: Vec<Vec<String>> = ks
            .iter()
            .map(|&kk| {
                let p = pis.partial(kk);
                row(&[kk as f64, p[0], p[1], p[2]])
            })
            .collect();
        let order = model.order();
        let mode_rows: Vec<Vec<String>> = pis
            .per_mode
            .iter()
            .enumerate()
            .map(|(m, (d1, d2))| {
                let f = &basis.functions()[order[m]];
                row(&[m as f64, f.wavenumber as f64, model.rates()[order[m]], *d1, *d2])
            })
            .collect();
        let cfg = self.materialized(&fam, Some(&pm));
        let mut dir = self.open("traces", &cfg)?;
        dir.write_csv("flow_traces.csv", &["s", "k", "sum_d1", "sum_d1_sq", "sum_d2"], &flow_rows)?;
        dir.write_csv("pi_traces.csv", &["k", "sum_abs_d2", "sum_abs_d1", "sum_d1_sq"], &pi_rows)?;
        dir.write_csv("pi_modes.csv", &["mode", "wavenumber", "rate", "dpi", "d2pi"], &mode_rows)?;
        let full = pis.partial(k);
        let half = pis.partial(k / 2);
        let mut rep = String::new();
        for (i, name) in ["sum_abs_d2", "sum_abs_d1", "sum_d1_sq"].iter().enumerate() {
            let _ = writeln!(rep, "{name}(K={k}) = {:e}", full[i]);
            let _ = writeln!(rep, "{name}_rel_change_from_K/2 = {:e}", (full[i] - half[i]).abs() / full[i].abs());
        }
        dir.write_str("summary.txt", &rep)?;
        Ok(Outcome { dir: dir.finish()?, summary: rep })
    }

    pub fn audit(&self) -> CliResult<Outcome> {
        let model = self.model()?;
        let fam = Arc::new(self.load_wave(&model, None)?);
        let pm = self.cfg.phase_map(fam.clone())?;
        let cfg = self.materialized(&fam, Some(&pm));
        let rep = run_audit(&pm, &self.cfg.noise, &self.cfg.audit, &cfg.hash(), self.exec)?;
        let mut dir = self.open("audit", &cfg)?;
        dir.write_str("audit.txt", &rep.to_text())?;
        let summary = rep.summary();
        dir.write_str("summary.txt", &summary)?;
        Ok(Outcome { dir: dir.finish()?, summary })
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// PASS/FAIL lines of the ledger checks.
pub fn ito_summary(sweep: &SweepReport, parts: &[PartitionDiagnostics], trace_total: f64) -> String {
    let fin = sweep.finest();
    let mut s = String::new();
    let _ = writeln!(s, "slope = {:.4}", sweep.slope);
    let _ = writeln!(s, "monotone = {}", sweep.monotone);
    let _ = writeln!(s, "finest_rms_sup_residual = {:e}", fin.rms_sup_residual);
    let _ = writeln!(s, "finest_residual_over_period = {:e}", fin.rms_sup_residual / sweep.period);
    let _ = writeln!(s, "residual_order: {}", verdict(sweep.pass()));
    let _ = writeln!(
        s,
        "martingale_mean: {} ({:e} ± {:e})",
        verdict(fin.martingale_mean.abs() <= 3.0 * fin.martingale_se),
        fin.martingale_mean,
        fin.martingale_se
    );
    let _ = writeln!(s, "quadratic_variation: {} (ratio {:.4})", verdict((fin.qv_ratio - 1.0).abs() <= 0.1), fin.qv_ratio);
    let id = parts.iter().map(|p| p.identity_error()).fold(0.0, f64::max);
    let _ = writeln!(s, "partition_identity: {} (max error {id:e})", verdict(id <= 1e-10));
    let mut sorted: Vec<&PartitionDiagnostics> = parts.iter().collect();
    sorted.sort_by(|a, b| b.h.partial_cmp(&a.h).unwrap());
    for (name, idx) in [("IV", 3), ("V", 4)] {
        let ratios: Vec<f64> = sorted.windows(2).map(|w| w[1].terms[idx].abs() / w[0].terms[idx].abs()).collect();
        let ok = !ratios.is_empty() && ratios.iter().all(|r| *r <= 0.5);
        let txt: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
        let _ = writeln!(s, "partition_{name}_halving: {} (ratios {})", verdict(ok), txt.join(", "));
    }
    if let Some(last) = sorted.last() {
        let rel = (last.terms[5] - trace_total).abs() / trace_total.abs();
        let _ = writeln!(s, "partition_VI_vs_trace: {} (relative difference {rel:.4})", verdict(rel <= 0.05));
    }
    s
}
