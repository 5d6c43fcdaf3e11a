//! Run configuration: a versioned TOML tree under the top-level key
//! `pfconf_v1`.

use crate::fields::Aabb;
use crate::flow::{JacobianMode, PatchShape, Scheme, TimeIntegratorConfig};
use crate::kernels::{builtin_kernel, KernelError, KernelSpec};
use crate::singular::QuadratureConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Deserialize)]
struct ConfigFile {
    pfconf_v1: RunConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dimension: usize,
    pub kernel: KernelConfig,
    pub gamma: f64,
    pub grid: GridConfig,
    pub initial_density: DensityConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub quadrature: QuadratureSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub seed: u64,
    /// Optional material tracers (reference positions at t = 0).
    #[serde(default)]
    pub tracers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub name: String,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: f64,
    pub extent_lo: Vec<f64>,
    pub extent_hi: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    BallPatch {
        center: Vec<f64>,
        radius: f64,
    },
    Annulus {
        center: Vec<f64>,
        inner: f64,
        outer: f64,
    },
    CustomSamples {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_jacobian")]
    pub jacobian_mode: String,
}

fn default_scheme() -> String {
    "rk4".to_string()
}

fn default_jacobian() -> String {
    "variational".to_string()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSection {
    #[serde(default = "default_pv_cells")]
    pub pv_exclusion_cells: usize,
    #[serde(default = "default_refinement")]
    pub near_field_refinement: usize,
}

fn default_pv_cells() -> usize {
    1
}

fn default_refinement() -> usize {
    4
}

impl Default for QuadratureSection {
    fn default() -> Self {
        QuadratureSection {
            pv_exclusion_cells: default_pv_cells(),
            near_field_refinement: default_refinement(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "default_every")]
    pub every_n_steps: usize,
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_every() -> usize {
    1
}

fn default_slack() -> f64 {
    1.0 + 1e-2
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            every_n_steps: default_every(),
            slack: default_slack(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_outdir")]
    pub dir: PathBuf,
    /// Snapshot cadence in steps; 0 disables intermediate snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_outdir() -> PathBuf {
    PathBuf::from("patchflow_out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_outdir(),
            snapshot_every: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ConfigFile = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = file.pfconf_v1;
        cfg.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    fn validate(&self, base: &Path) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.grid.h <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "grid.h must be positive, got {}",
                self.grid.h
            )));
        }
        if self.time.dt == 0.0 {
            return Err(ConfigError::Invalid("time.dt must be nonzero".to_string()));
        }
        if self.grid.extent_lo.len() != self.dimension
            || self.grid.extent_hi.len() != self.dimension
        {
            return Err(ConfigError::Invalid(
                "grid extent length does not match dimension".to_string(),
            ));
        }
        if let DensityConfig::CustomSamples { path } = &self.initial_density {
            let resolved = self.resolve_samples_path(base);
            if !resolved.exists() {
                return Err(ConfigError::Invalid(format!(
                    "custom samples file {} does not exist",
                    path.display()
                )));
            }
        }
        for tr in &self.tracers {
            if tr.len() != self.dimension {
                return Err(ConfigError::Invalid(
                    "tracer length does not match dimension".to_string(),
                ));
            }
        }
        self.scheme()?;
        self.jacobian_mode()?;
        Ok(())
    }

    fn resolve_samples_path(&self, base: &Path) -> PathBuf {
        match &self.initial_density {
            DensityConfig::CustomSamples { path } if path.is_relative() => base.join(path),
            DensityConfig::CustomSamples { path } => path.clone(),
            _ => PathBuf::new(),
        }
    }

    pub fn kernel(&self) -> Result<KernelSpec<f64>, ConfigError> {
        let name = self.kernel.name.as_str();
        if name == "mixed2d" {
            let a = self.kernel.a.unwrap_or(1.0);
            let b = self.kernel.b.unwrap_or(1.0);
            if self.dimension != 2 {
                return Err(ConfigError::Invalid(
                    "mixed2d kernel requires dimension 2".to_string(),
                ));
            }
            return Ok(KernelSpec::mixed2d(a, b));
        }
        Ok(builtin_kernel(name, self.dimension)?)
    }

    pub fn extent(&self) -> Aabb<f64> {
        Aabb::new(self.grid.extent_lo.clone(), self.grid.extent_hi.clone())
    }

    pub fn patch_shape(&self) -> Option<PatchShape<f64>> {
        match &self.initial_density {
            DensityConfig::BallPatch { center, radius } => Some(PatchShape::Ball {
                center: center.clone(),
                radius: *radius,
            }),
            DensityConfig::Annulus {
                center,
                inner,
                outer,
            } => Some(PatchShape::Annulus {
                center: center.clone(),
                inner: *inner,
                outer: *outer,
            }),
            DensityConfig::CustomSamples { .. } => None,
        }
    }

    pub fn scheme(&self) -> Result<Scheme, ConfigError> {
        match self.time.scheme.as_str() {
            "rk4" => Ok(Scheme::Rk4),
            "euler" => Ok(Scheme::Euler),
            "picard" => Ok(Scheme::Picard),
            other => Err(ConfigError::Invalid(format!("unknown scheme {other:?}"))),
        }
    }

    pub fn jacobian_mode(&self) -> Result<JacobianMode, ConfigError> {
        match self.time.jacobian_mode.as_str() {
            "variational" => Ok(JacobianMode::Variational),
            "finite_difference" => Ok(JacobianMode::FiniteDifference),
            other => Err(ConfigError::Invalid(format!(
                "unknown jacobian mode {other:?}"
            ))),
        }
    }

    pub fn integrator(&self) -> Result<TimeIntegratorConfig<f64>, ConfigError> {
        Ok(TimeIntegratorConfig {
            dt: self.time.dt,
            scheme: self.scheme()?,
            picard_iterations: 8,
            jacobian_mode: self.jacobian_mode()?,
        })
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        QuadratureConfig {
            pv_exclusion_cells: self.quadrature.pv_exclusion_cells,
            near_field_refinement: self.quadrature.near_field_refinement,
            ..QuadratureConfig::default()
        }
    }

    /// Initial state from the configured density; custom samples are read
    /// from a `x1..xn,value` CSV.
    pub fn initial_state(&self, base: &Path) -> Result<crate::flow::FlowState<f64>, ConfigError> {
        match &self.initial_density {
            DensityConfig::CustomSamples { .. } => {
                let path = self.resolve_samples_path(base);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let n = self.dimension;
                let mut points = Vec::new();
                let mut values = Vec::new();
                for (ln, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() != n + 1 {
                        return Err(ConfigError::Invalid(format!(
                            "{}:{}: expected {} columns",
                            path.display(),
                            ln + 1,
                            n + 1
                        )));
                    }
                    for c in &cells[..n] {
                        points.push(c.trim().parse::<f64>().map_err(|e| {
                            ConfigError::Invalid(format!("{}:{}: {e}", path.display(), ln + 1))
                        })?);
                    }
                    values.push(cells[n].trim().parse::<f64>().map_err(|e| {
                        ConfigError::Invalid(format!("{}:{}: {e}", path.display(), ln + 1))
                    })?);
                }
                Ok(crate::flow::FlowState::init_from_samples(
                    n,
                    self.grid.h,
                    points,
                    values,
                ))
            }
            _ => {
                let shape = self.patch_shape().unwrap();
                let mut s = crate::flow::FlowState::init_patch(
                    self.dimension,
                    self.grid.h,
                    &self.extent(),
                    shape,
                    8,
                );
                for tr in &self.tracers {
                    s.add_tracer(tr);
                }
                Ok(s)
            }
        }
    }
}
