//! TOML run configuration for the command-line interface.
//!
//! A run config names one of the built-in studies, optionally overrides its
//! physical and numerical parameters, picks the solver settings, and lists
//! the artifacts to write. Every run manifest embeds the resolved config, so
//! a run can be reproduced from its manifest alone.

use crate::bloch::DEFAULT_RK4_STEPS;
use crate::solver::SolverConfig;
use crate::studies::{
    recommended_solver, CostChoice, StudyName, StudySpec, Sweep, ThreeStageMode,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Artifacts a `solve` run may write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    PulseCsv,
    RobustnessCsv,
    ConvergenceCsv,
    ManifestJson,
    PhysicalPulseCsv,
}

fn default_formats() -> Vec<OutputFormat> {
    vec![
        OutputFormat::PulseCsv,
        OutputFormat::RobustnessCsv,
        OutputFormat::ConvergenceCsv,
        OutputFormat::ManifestJson,
    ]
}

/// The `[study]` section: a study name plus optional overrides of the
/// built-in defaults. Unset fields keep the named study's values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub name: StudyName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Enable or disable the ω(t) = sin(t) frequency profile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_varying_frequency: Option<bool>,
    /// Collocation orders (N, N_ω, N_ε).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orders: Option<[usize; 3]>,
    /// Cost weights (terminal, energy, time).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_weights: Option<[f64; 3]>,
    /// Validation lattice sizes (ω points, ε points).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_grid: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rk4_steps: Option<usize>,
    /// Three-stage sequence mode; defaults to simultaneous.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ThreeStageMode>,
    /// Running-cost choice for the time-varying study; defaults to energy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostChoice>,
    /// Sweep axes for the convergence study.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

impl StudySection {
    /// Resolve to a full study spec: named defaults with overrides applied.
    pub fn to_spec(&self) -> StudySpec {
        let mut spec = match self.name {
            StudyName::RobustPi => StudySpec::robust_pi(),
            StudyName::ThreeStage => StudySpec::three_stage(),
            StudyName::TimeVarying => StudySpec::time_varying(),
            StudyName::Convergence => StudySpec::convergence(),
        };
        if let Some(b) = self.b {
            spec.bloch.b = b;
        }
        if let Some(delta) = self.delta {
            spec.bloch.delta = delta;
        }
        if let Some(a) = self.amplitude_bound {
            spec.bloch.amplitude_bound = a;
        }
        if let Some(t) = self.duration {
            spec.bloch.duration = t;
        }
        if let Some(tv) = self.time_varying_frequency {
            spec.bloch.frequency_profile = tv.then(|| {
                Arc::new(f64::sin) as Arc<dyn Fn(f64) -> f64 + Send + Sync>
            });
        }
        if let Some([n, n_omega, n_eps]) = self.orders {
            spec.orders = (n, n_omega, n_eps);
        }
        if let Some([wt, we, wti]) = self.cost_weights {
            spec.cost_weights = (wt, we, wti);
        }
        if let Some([om, ep]) = self.validation_grid {
            spec.validation_grid = (om, ep);
        }
        spec.rk4_steps = self.rk4_steps.unwrap_or(DEFAULT_RK4_STEPS);
        if let Some(sweep) = &self.sweep {
            spec.sweep = Some(sweep.clone());
        }
        spec
    }

    pub fn mode(&self) -> ThreeStageMode {
        self.mode.unwrap_or(ThreeStageMode::Simultaneous)
    }

    pub fn cost(&self) -> CostChoice {
        self.cost.unwrap_or(CostChoice::Energy)
    }
}

/// The `[solver]` section: optional overrides applied on top of
/// [`recommended_solver`], the settings sized for study-scale programs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feasibility_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimality_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_inner: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_init: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_growth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SolverSection {
    pub fn to_config(&self) -> SolverConfig {
        let base = recommended_solver();
        SolverConfig {
            feasibility_tol: self.feasibility_tol.unwrap_or(base.feasibility_tol),
            optimality_tol: self.optimality_tol.unwrap_or(base.optimality_tol),
            max_outer: self.max_outer.unwrap_or(base.max_outer),
            max_inner: self.max_inner.unwrap_or(base.max_inner),
            penalty_init: self.penalty_init.unwrap_or(base.penalty_init),
            penalty_growth: self.penalty_growth.unwrap_or(base.penalty_growth),
            fd_step: self.fd_step.unwrap_or(base.fd_step),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub study: StudySection,
    #[serde(default)]
    pub solver: SolverSection,
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    /// Scaling for the physical-unit export; required iff
    /// `physical_pulse_csv` is requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_amplitude_hz: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field validation; individual sections validate via their owning
    /// types so error messages carry their field paths.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.solver.to_config().validate().map_err(ConfigError::Invalid)?;
        let spec = self.study.to_spec();
        spec.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.formats.is_empty() {
            return Err(ConfigError::Invalid("formats must not be empty".into()));
        }
        let physical = self.formats.contains(&OutputFormat::PhysicalPulseCsv);
        match self.nominal_amplitude_hz {
            Some(a) if a <= 0.0 => {
                return Err(ConfigError::Invalid(format!(
                    "nominal_amplitude_hz must be positive, got {a}"
                )));
            }
            None if physical => {
                return Err(ConfigError::Invalid(
                    "nominal_amplitude_hz is required when formats includes \
                     physical_pulse_csv"
                        .into(),
                ));
            }
            _ => {}
        }
        if self.formats.contains(&OutputFormat::ConvergenceCsv)
            && self.formats.len() == 1
            && spec.name != StudyName::Convergence
        {
            return Err(ConfigError::Invalid(format!(
                "formats requests only convergence_csv but study.name is {:?}",
                spec.name
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        output_dir = "out"
        [study]
        name = "robust_pi"
    "#;

    #[test]
    fn minimal_config_resolves_to_study_defaults() {
        let config: RunConfig = toml::from_str(MINIMAL).unwrap();
        config.validate().unwrap();
        let spec = config.study.to_spec();
        let defaults = StudySpec::robust_pi();
        assert_eq!(spec.orders, defaults.orders);
        assert_eq!(spec.bloch.duration, defaults.bloch.duration);
        assert_eq!(config.solver.to_config().max_outer, recommended_solver().max_outer);
        assert!(config.formats.contains(&OutputFormat::ManifestJson));
    }

    #[test]
    fn overrides_apply() {
        let config: RunConfig = toml::from_str(
            r#"
            output_dir = "out"
            formats = ["pulse_csv"]
            [study]
            name = "robust_pi"
            delta = 0.05
            orders = [16, 6, 2]
            validation_grid = [31, 7]
            [solver]
            max_outer = 12
            "#,
        )
        .unwrap();
        config.validate().unwrap();
        let spec = config.study.to_spec();
        assert_eq!(spec.bloch.delta, 0.05);
        assert_eq!(spec.orders, (16, 6, 2));
        assert_eq!(spec.validation_grid, (31, 7));
        let solver = config.solver.to_config();
        assert_eq!(solver.max_outer, 12);
        assert_eq!(solver.max_inner, recommended_solver().max_inner);
    }

    #[test]
    fn invalid_delta_names_the_field() {
        let config: RunConfig = toml::from_str(
            r#"
            output_dir = "out"
            [study]
            name = "robust_pi"
            delta = 1.2
            "#,
        )
        .unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("bloch.delta"), "message: {err}");
    }

    #[test]
    fn physical_export_requires_amplitude() {
        let config: RunConfig = toml::from_str(
            r#"
            output_dir = "out"
            formats = ["pulse_csv", "physical_pulse_csv"]
            [study]
            name = "robust_pi"
            "#,
        )
        .unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("nominal_amplitude_hz"), "message: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>(
            r#"
            output_dir = "out"
            nominal_amplitude = 1.0
            [study]
            name = "robust_pi"
            "#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("nominal_amplitude"), "message: {err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config: RunConfig = toml::from_str(
            r#"
            output_dir = "artifacts/run1"
            formats = ["pulse_csv", "manifest_json"]
            nominal_amplitude_hz = 10000.0
            [study]
            name = "time_varying"
            cost = "time"
            [solver]
            max_inner = 4000
            "#,
        )
        .unwrap();
        let text = toml::to_string(&config).unwrap();
        let again: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(again.output_dir, config.output_dir);
        assert_eq!(again.formats, config.formats);
        assert_eq!(again.study.cost(), CostChoice::Time);
        assert_eq!(again.solver.to_config().max_inner, 4000);
    }
}
