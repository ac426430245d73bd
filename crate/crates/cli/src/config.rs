//! Experiment configuration: a JSON document describing the grid, controls,
//! loss and algorithm settings, and its assembly into solver inputs.
//!
//! Relative paths are resolved against the directory holding the config
//! file. The echoed config in every report carries absolute paths, so it can
//! be re-run from anywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seldyn::control::TrainConfig;
use seldyn::dynamics::{ControlParams, RankOneSpec};
use seldyn::io;
use seldyn::objective::{ClassifierParams, LossSpec, Stencil};
use seldyn::{Activation, Field, Grid, Interval, KernelSlice, TimeGrid};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub activation: String,
    pub initial_field: FieldSource,
    #[serde(default)]
    pub controls: ControlsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckConfig>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(default)]
    pub y_lo: f64,
    #[serde(default = "one")]
    pub y_hi: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(rename = "T")]
    pub t_final: f64,
    pub steps: usize,
}

/// A number broadcast to every node, or a field CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSource {
    Constant(f64),
    Path(PathBuf),
}

/// A number, a bias-series CSV, or `{"field": path}` held constant in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiasSource {
    Constant(f64),
    Series(PathBuf),
    Field { field: PathBuf },
}

/// A number, a kernel-series CSV, `{"kernel": path}` held constant in time,
/// or a rank-one kernel `b(y,z) = ψ(y)φ(z)` with bias `a = a0·ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSource {
    Constant(f64),
    Series(PathBuf),
    Kernel { kernel: PathBuf },
    RankOne { rank_one: RankOneConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankOneConfig {
    pub phi: FieldSource,
    pub psi: FieldSource,
    #[serde(default)]
    pub a0: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<BiasSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<KernelSource>,
}

/// A number broadcast to every entry, or a kernel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSource {
    Constant(f64),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    Tracking {
        target: FieldSource,
        #[serde(default)]
        lambda: f64,
    },
    Classification {
        label: FieldSource,
        #[serde(default)]
        lambda: f64,
        classifier: ClassifierConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub w: MatrixSource,
    pub mu: FieldSource,
    #[serde(default = "logistic")]
    pub link: String,
}

fn logistic() -> String {
    "logistic".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Number of singular pairs used for the Gram-matrix test; defaults to
    /// the node count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub h: f64,
    pub stencil: Stencil,
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 8e-3,
            stencil: Stencil::Central4,
            threshold: 1e-5,
        }
    }
}

impl ExperimentConfig {
    /// Reads and parses `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| CliError::config(format!("{}: {e}", base.display())))?;
        cfg.resolve(&base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_field = |s: &mut FieldSource| {
            if let FieldSource::Path(p) = s {
                fix(p)
            }
        };
        fix_field(&mut self.initial_field);
        match &mut self.controls.a {
            Some(BiasSource::Series(p)) | Some(BiasSource::Field { field: p }) => fix(p),
            _ => {}
        }
        match &mut self.controls.b {
            Some(KernelSource::Series(p)) | Some(KernelSource::Kernel { kernel: p }) => fix(p),
            Some(KernelSource::RankOne { rank_one }) => {
                fix_field(&mut rank_one.phi);
                fix_field(&mut rank_one.psi);
            }
            _ => {}
        }
        match &mut self.loss {
            Some(LossConfig::Tracking { target, .. }) => fix_field(target),
            Some(LossConfig::Classification { label, classifier, .. }) => {
                fix_field(label);
                fix_field(&mut classifier.mu);
                if let MatrixSource::Path(p) = &mut classifier.w {
                    fix(p);
                }
            }
            None => {}
        }
        fix(&mut self.output);
    }

    pub fn activation(&self) -> Result<Activation, CliError> {
        self.activation
            .parse()
            .map_err(|e| CliError::config(format!("activation: {e}")))
    }

    /// Builds grids, controls, initial data and loss, reading every
    /// referenced file.
    pub fn assemble(&self) -> Result<Setup, CliError> {
        let grid = Grid::uniform(self.grid.n, Interval::new(self.grid.y_lo, self.grid.y_hi)?)?;
        let time = TimeGrid::new(self.time.t_final, self.time.steps)?;
        let act = self.activation()?;
        let f_init = load_field(&self.initial_field, &grid)?;
        let (n, steps) = (grid.len(), time.steps());

        let mut rank_one = None;
        let b = match &self.controls.b {
            None => vec![KernelSlice::zeros(n); steps],
            Some(KernelSource::Constant(c)) => vec![KernelSlice::constant(n, *c); steps],
            Some(KernelSource::Series(p)) => io::read_kernel_series(p, &grid, &time)?,
            Some(KernelSource::Kernel { kernel }) => vec![io::read_kernel(kernel, &grid)?; steps],
            Some(KernelSource::RankOne { rank_one: r }) => {
                let spec = RankOneSpec::new(
                    load_field(&r.phi, &grid)?,
                    load_field(&r.psi, &grid)?,
                    r.a0,
                    f_init.clone(),
                    &grid,
                )?;
                let kernel = spec.kernel();
                rank_one = Some(spec);
                vec![kernel; steps]
            }
        };
        let a = match (&self.controls.a, &rank_one) {
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "controls.a must be omitted with a rank_one kernel (the bias is a0·psi)",
                ))
            }
            (None, Some(spec)) => vec![spec.bias(); steps],
            (None, None) => vec![Field::zeros(n); steps],
            (Some(BiasSource::Constant(c)), None) => vec![Field::constant(n, *c); steps],
            (Some(BiasSource::Series(p)), None) => io::read_bias_series(p, &grid, &time)?,
            (Some(BiasSource::Field { field }), None) => vec![io::read_field(field, &grid)?; steps],
        };
        let params = ControlParams::new(a, b)?;

        let loss = match &self.loss {
            None => None,
            Some(LossConfig::Tracking { target, lambda }) => {
                Some(LossSpec::tracking(load_field(target, &grid)?).with_lambda(*lambda)?)
            }
            Some(LossConfig::Classification {
                label,
                lambda,
                classifier,
            }) => {
                let w = match &classifier.w {
                    MatrixSource::Constant(c) => KernelSlice::constant(n, *c),
                    MatrixSource::Path(p) => io::read_kernel(p, &grid)?,
                };
                let link = classifier
                    .link
                    .parse()
                    .map_err(|e| CliError::config(format!("classifier link: {e}")))?;
                let cls = ClassifierParams {
                    w,
                    mu: load_field(&classifier.mu, &grid)?,
                    link,
                };
                Some(LossSpec::classification(load_field(label, &grid)?, cls).with_lambda(*lambda)?)
            }
        };
        Ok(Setup {
            grid,
            time,
            act,
            f_init,
            params,
            rank_one,
            loss,
        })
    }
}

fn load_field(src: &FieldSource, grid: &Grid) -> Result<Field, CliError> {
    match src {
        FieldSource::Constant(c) => Ok(Field::constant(grid.len(), *c)),
        FieldSource::Path(p) => Ok(io::read_field(p, grid)?),
    }
}

/// Solver inputs built from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: Grid,
    pub time: TimeGrid,
    pub act: Activation,
    pub f_init: Field,
    pub params: ControlParams,
    pub rank_one: Option<RankOneSpec>,
    pub loss: Option<LossSpec>,
}
