//! Problem configuration files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kamtori::io::TorusFile;
use kamtori::poisson::registry::{lookup, Params, SystemRegistryEntry};
use kamtori::poisson::PoissonSystem;
use kamtori::solver::{ConstantMode, ConstantTracker, NormMode, Schedule, SolverOptions};
use kamtori::{Embedding, Frequency, TorusState};
use serde::{Deserialize, Serialize};

/// Invalid or unreadable configuration, tagged with the offending field.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { field: field.into(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TorusKind {
    /// The registry's initial guess for the system.
    #[default]
    Default,
    /// `K(theta) = (theta, omega)`.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialTorus {
    Kind(TorusKind),
    /// Coefficient file, relative to the configuration file.
    File { file: PathBuf },
}

impl Default for InitialTorus {
    fn default() -> Self {
        Self::Kind(TorusKind::Default)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub target: f64,
    pub max_iter: usize,
    pub damping: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self { target: d.target, max_iter: d.max_iter, damping: d.step.damping }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateConfig {
    pub c_mode: ConstantMode,
    /// Required when `c_mode` is `user`.
    pub c: Option<f64>,
    pub r: f64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self { c_mode: ConstantMode::Heuristic, c: None, r: 1.0 }
    }
}

fn default_k_check() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub system: SystemSpec,
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub sigma: f64,
    #[serde(default = "default_k_check")]
    pub k_check: usize,
    #[serde(default)]
    pub initial_torus: InitialTorus,
    /// Fourier cutoff per torus direction.
    pub modes: Vec<usize>,
    pub rho_0: f64,
    /// Defaults to `min(1, rho_0 / 12)`.
    #[serde(default)]
    pub delta_0: Option<f64>,
    #[serde(default)]
    pub norm_mode: NormMode,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub certificate: CertificateConfig,
    /// Directory of the file the configuration was read from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A configuration whose every field has been checked.
#[derive(Debug)]
pub struct Problem {
    pub config: ProblemConfig,
    pub entry: &'static SystemRegistryEntry,
    pub params: Params,
    pub system: Arc<dyn PoissonSystem>,
    pub frequency: Frequency,
    pub schedule: Schedule,
}

impl ProblemConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            let field = e.path().to_string();
            let field = if field == "." { String::new() } else { field };
            ConfigError::new(field, format!("{inner} (line {}, column {})", inner.line(), inner.column()))
        })
    }

    pub fn delta_0(&self) -> f64 {
        self.delta_0.unwrap_or_else(|| (self.rho_0 / 12.0).min(1.0))
    }

    pub fn solver_options(&self) -> SolverOptions {
        let mut opts = SolverOptions {
            target: self.solver.target,
            max_iter: self.solver.max_iter,
            norm_mode: self.norm_mode,
            ..Default::default()
        };
        opts.step.damping = self.solver.damping;
        opts
    }

    pub fn validate(self) -> Result<Problem, ConfigError> {
        let entry = lookup(&self.system.name).map_err(|e| ConfigError::new("system.name", e))?;
        let params = entry.resolve(&self.system.params).map_err(|e| ConfigError::new("system.params", e))?;
        let system = (entry.build)(&params).map_err(|e| ConfigError::new("system.params", e))?;
        let n = entry.torus_dim;
        if self.omega.len() != n {
            return Err(ConfigError::new("omega", format!("{} has torus dimension {n}, got {} frequencies", entry.name, self.omega.len())));
        }
        if self.modes.len() != n {
            return Err(ConfigError::new("modes", format!("expected {n} cutoffs, got {}", self.modes.len())));
        }
        if let Some(m) = self.modes.iter().find(|m| **m < 4) {
            return Err(ConfigError::new("modes", format!("every cutoff must be at least 4, got {m}")));
        }
        let frequency = Frequency::new(self.omega.clone(), self.gamma, self.sigma).map_err(|e| ConfigError::new("omega", e))?;
        if self.k_check == 0 {
            return Err(ConfigError::new("k_check", "must be at least 1"));
        }
        let certified = frequency.is_certified(self.k_check).map_err(|e| ConfigError::new("omega", e))?;
        if !certified {
            return Err(ConfigError::new(
                "gamma",
                format!("omega is not (gamma, sigma)-Diophantine over 0 < |k|_1 <= {}", self.k_check),
            ));
        }
        let schedule = Schedule::new(self.rho_0, self.delta_0()).map_err(|e| {
            ConfigError::new("delta_0", format!("{e}; the schedule requires 0 < delta_0 <= min(1, rho_0/12)"))
        })?;
        if !(self.solver.target > 0.0) {
            return Err(ConfigError::new("solver.target", "must be positive"));
        }
        if self.certificate.c_mode == ConstantMode::User && !self.certificate.c.is_some_and(|c| c > 0.0) {
            return Err(ConfigError::new("certificate.c", "a positive c is required when c_mode is user"));
        }
        if !(self.certificate.r > 0.0) {
            return Err(ConfigError::new("certificate.r", "must be positive"));
        }
        Ok(Problem { config: self, entry, params, system, frequency, schedule })
    }
}

/// Reads a coefficient file.
pub fn load_torus(path: &Path) -> Result<TorusFile, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))
}

impl Problem {
    /// Initial embedding named by the configuration.
    pub fn initial_embedding(&self) -> Result<Embedding, ConfigError> {
        let cfg = &self.config;
        match &cfg.initial_torus {
            InitialTorus::Kind(TorusKind::Flat) => Ok(Embedding::flat(&cfg.omega, &cfg.modes)),
            InitialTorus::Kind(TorusKind::Default) => {
                (self.entry.initial_torus)(&self.params, &cfg.omega, &cfg.modes).map_err(|e| ConfigError::new("initial_torus", e))
            }
            InitialTorus::File { file } => {
                let path = cfg.base_dir.join(file);
                let emb = load_torus(&path)?.to_embedding().map_err(|e| ConfigError::new("initial_torus.file", e))?;
                self.check_shape(&emb, "initial_torus.file")?;
                Ok(emb)
            }
        }
    }

    /// Fails unless `emb` lives on this problem's torus and phase space.
    pub fn check_shape(&self, emb: &Embedding, field: &str) -> Result<(), ConfigError> {
        let n = self.entry.torus_dim;
        if emb.torus_dim() != n || emb.phase_dim() != 2 * n {
            return Err(ConfigError::new(
                field,
                format!("torus is {} -> {}, {} needs {n} -> {}", emb.torus_dim(), emb.phase_dim(), self.entry.name, 2 * n),
            ));
        }
        Ok(())
    }

    pub fn state(&self, emb: Embedding) -> Result<TorusState, ConfigError> {
        TorusState::new(self.system.clone(), emb, self.frequency.clone(), 0.0).map_err(|e| ConfigError::new("initial_torus", e))
    }

    pub fn tracker(&self, initial: &TorusState) -> Result<ConstantTracker, ConfigError> {
        match self.config.certificate.c_mode {
            ConstantMode::User => Ok(ConstantTracker::user(self.config.certificate.c.unwrap_or(f64::NAN))),
            ConstantMode::Heuristic => ConstantTracker::heuristic(initial, &self.schedule).map_err(|e| ConfigError::new("certificate", e)),
        }
    }
}
