//! Run configuration file: a preset plus overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use uqsep::problems::{robot_problem, toy_problem, Problem, RegionSpec};
use uqsep::separation::{toml_parse_error, SeparationConfig, ThresholdMode};
use uqsep::surrogates::SurrogateConfig;
use uqsep::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Robot,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_low: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_high: Option<Vec<f64>>,
    /// Replaces the preset's regions; an empty list removes them all.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<RegionSpec>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold_mode: Option<ThresholdMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_acquire: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_resolution: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub problem: ProblemSection,
    /// Replaces the preset's surrogate settings as a whole.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateConfig>,
    pub separation: SeparationSection,
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("uqsep-out"))
    }
}

/// A parsed config and, when it came from a file, the file's text.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: Option<String>,
    pub path: Option<PathBuf>,
}

pub fn load(path: &Path) -> Result<LoadedConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let config = toml::from_str(&text).map_err(|e| toml_parse_error(path, &text, &e))?;
    Ok(LoadedConfig {
        config,
        source: Some(text),
        path: Some(path.to_path_buf()),
    })
}

impl LoadedConfig {
    pub fn from_defaults() -> Self {
        Self {
            config: RunConfig::default(),
            source: None,
            path: None,
        }
    }

    /// Problem and loop settings after applying overrides to the preset.
    pub fn resolve(&self) -> Result<(Problem, SeparationConfig), Error> {
        let c = &self.config;
        let (mut problem, mut sep) = match c.problem.preset {
            Preset::Toy => (toy_problem(), SeparationConfig::default()),
            Preset::Robot => (robot_problem(), SeparationConfig::robot()),
        };
        if let Some(low) = &c.problem.domain_low {
            problem.domain_low = low.clone();
        }
        if let Some(high) = &c.problem.domain_high {
            problem.domain_high = high.clone();
        }
        if let Some(regions) = &c.problem.regions {
            problem.regions = regions.clone();
        }
        if let Some(n) = c.problem.n_points {
            if n == 0 {
                return Err(self.config_error("n_points must be positive"));
            }
            sep.n_initial = n;
        }
        let s = &c.separation;
        sep.iterations = s.iterations.unwrap_or(sep.iterations);
        sep.threshold = s.threshold.unwrap_or(sep.threshold);
        sep.threshold_mode = s.threshold_mode.unwrap_or(sep.threshold_mode);
        sep.n_acquire = s.n_acquire.or(sep.n_acquire);
        sep.grid_resolution = s.grid_resolution.unwrap_or(sep.grid_resolution);
        if let Some(surrogate) = &c.surrogate {
            sep.surrogate = surrogate.clone();
        }
        sep.seed = c.seed;
        problem.validate().map_err(|e| self.locate(e))?;
        sep.validate().map_err(|e| self.locate(e))?;
        Ok((problem, sep))
    }

    fn config_error(&self, message: &str) -> Error {
        self.locate(Error::Config(message.to_string()))
    }

    /// Prefix a configuration error with `file:line` when its leading word
    /// names a key that appears in the file.
    fn locate(&self, e: Error) -> Error {
        let (Error::Config(message), Some(text), Some(path)) = (&e, &self.source, &self.path) else {
            return e;
        };
        let key = message.split_whitespace().next().unwrap_or("");
        let line = text.lines().position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        });
        match line {
            Some(n) if !key.is_empty() => Error::Config(format!("{}:{}: {message}", path.display(), n + 1)),
            _ => Error::Config(format!("{}: {message}", path.display())),
        }
    }
}
