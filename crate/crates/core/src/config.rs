//! Plain-text run configuration: one `key = value` per line, `#` starts a comment.
//!
//! ```
//! let cfg = crfv::config::load_config("box_n = 2\nT = 0.5\ndt = h\n").unwrap();
//! assert_eq!(cfg.box_n, [2, 2, 2]);
//! assert!(cfg.warnings.is_empty());
//! ```

use std::collections::BTreeSet;
use std::path::PathBuf;

use thiserror::Error;

use crate::linalg::SolverOptions;
use crate::mesh::{structured_box_mesh, MeshError, TetMesh, Vec3};
use crate::physics::{PressureLaw, RegularizationParams};
use crate::scheme::{SchemeError, SchemeParams};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    Fixed(f64),
    /// `Δt = h` with `h` the mesh size.
    MeshSize,
}

/// Initial and boundary data of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Constant,
    Transport,
    Channel,
    /// Smooth random data drawn from `seed`.
    Random,
    /// Random data with `u_B = 0`.
    RandomClosed,
}

impl DataSource {
    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Constant => "constant",
            DataSource::Transport => "transport",
            DataSource::Channel => "channel",
            DataSource::Random => "random",
            DataSource::RandomClosed => "random_closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Mesh file; overrides the structured box when set.
    pub mesh: Option<PathBuf>,
    pub box_n: [usize; 3],
    pub box_lo: Vec3,
    pub box_hi: Vec3,
    pub dt: TimeStep,
    pub final_time: f64,
    pub mu: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub kappa_tilde: f64,
    pub omega: f64,
    pub eta: f64,
    pub a: f64,
    pub gamma: f64,
    pub abar: Option<f64>,
    pub aunder: Option<f64>,
    pub tol_fp: f64,
    pub max_fp: usize,
    pub damping: f64,
    pub anderson: usize,
    pub tol_lin: f64,
    pub dense_threshold: usize,
    pub gmres_restart: usize,
    pub max_lin: usize,
    /// Write a VTK snapshot every this many steps; 0 disables snapshots.
    pub output_every: usize,
    pub output_dir: PathBuf,
    pub data: DataSource,
    /// Momentum forcing of the manufactured case (defaults to on for the channel case).
    pub forcing: Option<bool>,
    pub seed: u64,
    pub consistency: bool,
    pub energy_tol: f64,
    /// Ceiling for the monitored a-priori bounds.
    pub estimate_ceiling: f64,
    /// Refinement levels (cells per edge) for `convergence`.
    pub levels: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mesh: None,
            box_n: [4, 4, 4],
            box_lo: Vec3::zeros(),
            box_hi: Vec3::new(1.0, 1.0, 1.0),
            dt: TimeStep::MeshSize,
            final_time: 1.0,
            mu: 1.0,
            lambda: 0.0,
            kappa: 0.0,
            kappa_tilde: 0.0,
            omega: 1.0,
            eta: 0.4,
            a: 1.0,
            gamma: 2.0,
            abar: None,
            aunder: None,
            tol_fp: 1e-9,
            max_fp: 200,
            damping: 1.0,
            anderson: 5,
            tol_lin: 1e-12,
            dense_threshold: 300,
            gmres_restart: 60,
            max_lin: 3000,
            output_every: 0,
            output_dir: PathBuf::from("out"),
            data: DataSource::Constant,
            forcing: None,
            seed: 0,
            consistency: true,
            energy_tol: 1e-8,
            estimate_ceiling: 1e6,
            levels: vec![3, 4, 6, 8],
            warnings: Vec::new(),
        }
    }
}

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CRFV_OUTPUT_DIR";

const KEYS: &[&str] = &[
    "mesh",
    "box_n",
    "box_lo",
    "box_hi",
    "dt",
    "T",
    "mu",
    "lambda",
    "kappa",
    "kappa_tilde",
    "omega",
    "eta",
    "law",
    "a",
    "gamma",
    "abar",
    "aunder",
    "tol_fp",
    "max_fp",
    "damping",
    "anderson",
    "tol_lin",
    "dense_threshold",
    "gmres_restart",
    "max_lin",
    "output_every",
    "output_dir",
    "case",
    "forcing",
    "seed",
    "consistency",
    "energy_tol",
    "estimate_ceiling",
    "levels",
];

fn num(line: usize, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>().map_err(|_| ConfigError::Parse { line, message: format!("`{v}` is not a number") })
}

fn int(line: usize, v: &str) -> Result<usize, ConfigError> {
    v.parse::<usize>().map_err(|_| ConfigError::Parse { line, message: format!("`{v}` is not a nonnegative integer") })
}

fn list(v: &str) -> Vec<&str> {
    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()
}

fn vec3(line: usize, v: &str) -> Result<Vec3, ConfigError> {
    let parts = list(v);
    if parts.len() != 3 {
        return Err(ConfigError::Parse { line, message: format!("expected three numbers, got `{v}`") });
    }
    Ok(Vec3::new(num(line, parts[0])?, num(line, parts[1])?, num(line, parts[2])?))
}

fn boolean(line: usize, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Parse { line, message: format!("`{v}` is not a boolean") }),
    }
}

/// Parses and validates a configuration.
pub fn load_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap().trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse { line, message: format!("expected `key = value`, got `{body}`") })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { line, key: key.into() });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate { line, key: key.into() });
        }
        if value.is_empty() {
            return Err(ConfigError::Parse { line, message: format!("`{key}` has no value") });
        }
        match key {
            "mesh" => cfg.mesh = Some(PathBuf::from(value)),
            "box_n" => {
                let parts = list(value);
                cfg.box_n = match parts.len() {
                    1 => [int(line, parts[0])?; 3],
                    3 => [int(line, parts[0])?, int(line, parts[1])?, int(line, parts[2])?],
                    _ => return Err(ConfigError::Parse { line, message: "box_n takes one or three integers".into() }),
                };
            }
            "box_lo" => cfg.box_lo = vec3(line, value)?,
            "box_hi" => cfg.box_hi = vec3(line, value)?,
            "dt" => cfg.dt = if value == "h" { TimeStep::MeshSize } else { TimeStep::Fixed(num(line, value)?) },
            "T" => cfg.final_time = num(line, value)?,
            "mu" => cfg.mu = num(line, value)?,
            "lambda" => cfg.lambda = num(line, value)?,
            "kappa" => cfg.kappa = num(line, value)?,
            "kappa_tilde" => cfg.kappa_tilde = num(line, value)?,
            "omega" => cfg.omega = num(line, value)?,
            "eta" => cfg.eta = num(line, value)?,
            "law" => {
                if value != "isentropic" {
                    return Err(ConfigError::Parse { line, message: format!("unsupported law `{value}`") });
                }
            }
            "a" => cfg.a = num(line, value)?,
            "gamma" => cfg.gamma = num(line, value)?,
            "abar" => cfg.abar = Some(num(line, value)?),
            "aunder" => cfg.aunder = Some(num(line, value)?),
            "tol_fp" => cfg.tol_fp = num(line, value)?,
            "max_fp" => cfg.max_fp = int(line, value)?,
            "damping" => cfg.damping = num(line, value)?,
            "anderson" => cfg.anderson = int(line, value)?,
            "tol_lin" => cfg.tol_lin = num(line, value)?,
            "dense_threshold" => cfg.dense_threshold = int(line, value)?,
            "gmres_restart" => cfg.gmres_restart = int(line, value)?,
            "max_lin" => cfg.max_lin = int(line, value)?,
            "output_every" => cfg.output_every = int(line, value)?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            "case" => {
                cfg.data = match value {
                    "constant" | "a" => DataSource::Constant,
                    "transport" | "b" => DataSource::Transport,
                    "channel" | "c" => DataSource::Channel,
                    "random" => DataSource::Random,
                    "random_closed" => DataSource::RandomClosed,
                    _ => return Err(ConfigError::Parse { line, message: format!("unknown case `{value}`") }),
                }
            }
            "forcing" => cfg.forcing = Some(boolean(line, value)?),
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| ConfigError::Parse { line, message: format!("`{value}` is not a seed") })?
            }
            "consistency" => cfg.consistency = boolean(line, value)?,
            "energy_tol" => cfg.energy_tol = num(line, value)?,
            "estimate_ceiling" => cfg.estimate_ceiling = num(line, value)?,
            "levels" => cfg.levels = list(value).into_iter().map(|v| int(line, v)).collect::<Result<_, _>>()?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    cfg.validate()?;
    cfg.warnings = cfg.regularization(1.0).warnings();
    Ok(cfg)
}

impl RunConfig {
    pub fn law(&self) -> Result<PressureLaw, ConfigError> {
        let law = PressureLaw::isentropic(self.a, self.gamma).map_err(|e| invalid("gamma", e.to_string()))?;
        match (self.aunder, self.abar) {
            (None, None) => Ok(law),
            (lo, hi) => {
                let (dlo, dhi) = law.constants();
                law.with_constants(lo.unwrap_or(dlo), hi.unwrap_or(dhi))
                    .map_err(|e| invalid(if lo.is_some() { "aunder" } else { "abar" }, e.to_string()))
            }
        }
    }

    pub fn regularization(&self, h: f64) -> RegularizationParams {
        RegularizationParams { kappa_tilde: self.kappa_tilde, eta: self.eta, kappa: self.kappa, omega: self.omega, h }
    }

    pub fn linear(&self) -> SolverOptions {
        SolverOptions { tol: self.tol_lin, dense_threshold: self.dense_threshold, restart: self.gmres_restart, max_iter: self.max_lin }
    }

    /// Forcing is on for the channel case unless switched off.
    pub fn forcing_enabled(&self) -> bool {
        self.forcing.unwrap_or(self.data == DataSource::Channel)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.box_n.iter().any(|&n| n == 0) {
            return Err(invalid("box_n", "needs at least one cell per direction"));
        }
        if (0..3).any(|i| !(self.box_hi[i] > self.box_lo[i])) {
            return Err(invalid("box_hi", "must exceed box_lo in every direction"));
        }
        if !(self.final_time > 0.0) {
            return Err(invalid("T", "must be positive"));
        }
        if !(self.energy_tol > 0.0) {
            return Err(invalid("energy_tol", "must be positive"));
        }
        if !(self.kappa >= 0.0) {
            return Err(invalid("kappa", "must be nonnegative"));
        }
        if !(self.kappa_tilde >= 0.0) {
            return Err(invalid("kappa_tilde", "must be nonnegative"));
        }
        if !(self.omega > 0.0) {
            return Err(invalid("omega", "must be positive"));
        }
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(invalid("levels", "needs positive cell counts"));
        }
        if self.dense_threshold == 0 && self.gmres_restart == 0 {
            return Err(invalid("gmres_restart", "must be positive"));
        }
        if self.forcing == Some(true) && matches!(self.data, DataSource::Random | DataSource::RandomClosed) {
            return Err(invalid("forcing", "random data has no manufactured forcing"));
        }
        self.law()?;
        // dt and mesh independent scheme constraints, checked with a unit mesh size
        let mut p = SchemeParams {
            dt: 1.0,
            mu: self.mu,
            lambda: self.lambda,
            law: self.law()?,
            reg: self.regularization(1.0),
            tol_fp: self.tol_fp,
            max_fp: self.max_fp,
            damping: self.damping,
            anderson: self.anderson,
            linear: self.linear(),
        };
        if let TimeStep::Fixed(dt) = self.dt {
            p.dt = dt;
        }
        p.validate().map_err(|e| match e {
            SchemeError::Param { key, message } => invalid(key, message),
            other => invalid("scheme", other.to_string()),
        })
    }

    /// The mesh: the file if given, else the structured box.
    pub fn build_mesh(&self) -> Result<TetMesh, MeshError> {
        match &self.mesh {
            Some(p) => TetMesh::read(p),
            None => Ok(structured_box_mesh(self.box_n, self.box_lo, self.box_hi)),
        }
    }

    /// `(params, steps)` on `mesh`. The step count is `round(T/Δt)` and the step
    /// is adjusted to `T / steps` so the run ends exactly at `T`.
    pub fn scheme_params(&self, mesh: &TetMesh) -> Result<(SchemeParams, usize), ConfigError> {
        let h = mesh.h();
        let target = match self.dt {
            TimeStep::Fixed(dt) => dt,
            TimeStep::MeshSize => h,
        };
        let steps = ((self.final_time / target).round() as usize).max(1);
        let p = SchemeParams {
            dt: self.final_time / steps as f64,
            mu: self.mu,
            lambda: self.lambda,
            law: self.law()?,
            reg: self.regularization(h),
            tol_fp: self.tol_fp,
            max_fp: self.max_fp,
            damping: self.damping,
            anderson: self.anderson,
            linear: self.linear(),
        };
        Ok((p, steps))
    }

    /// `output_dir`, unless overridden by the environment.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }
}
