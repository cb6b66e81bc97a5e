//! Run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{FilterSpec, SchemaMap};
use crate::design::{Response, Structure};
use crate::error::{MmoError, Result};
use crate::metrics::{GridConfig, Measure};
use crate::mixed::FitConfig;
use crate::normalize::NormalizationPool;

/// One way of obtaining the distributions whose overlap is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "raw", alias = "empirical_raw")]
    Raw,
    #[serde(rename = "averaged", alias = "empirical_averaged")]
    Averaged,
    #[serde(rename = "minimal-uni")]
    MinimalUni,
    #[serde(rename = "minimal-multi")]
    MinimalMulti,
    #[serde(rename = "expanded-uni")]
    ExpandedUni,
    #[serde(rename = "expanded-multi")]
    ExpandedMulti,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Raw,
        Variant::Averaged,
        Variant::MinimalUni,
        Variant::MinimalMulti,
        Variant::ExpandedUni,
        Variant::ExpandedMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::Averaged => "averaged",
            Variant::MinimalUni => "minimal-uni",
            Variant::MinimalMulti => "minimal-multi",
            Variant::ExpandedUni => "expanded-uni",
            Variant::ExpandedMulti => "expanded-multi",
        }
    }

    /// Model structure and response, or `None` for the empirical variants.
    pub fn model(self) -> Option<(Structure, Response)> {
        match self {
            Variant::Raw | Variant::Averaged => None,
            Variant::MinimalUni => Some((Structure::Minimal, Response::Univariate)),
            Variant::MinimalMulti => Some((Structure::Minimal, Response::Multivariate)),
            Variant::ExpandedUni => Some((Structure::Expanded, Response::Univariate)),
            Variant::ExpandedMulti => Some((Structure::Expanded, Response::Multivariate)),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MmoError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || format!("empirical_{}", v.name()) == s)
            .ok_or_else(|| MmoError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    /// Token CSV; relative paths resolve against the config file's directory.
    Path(PathBuf),
    /// Canned synthetic scenario generated with the run seed.
    Synth(String),
}

fn default_filter() -> FilterSpec {
    FilterSpec::new(("IH", "EH"), ("nasal", "oral"))
}

fn default_measures() -> Vec<Measure> {
    vec![Measure::Bhattacharyya]
}

fn default_reps() -> usize {
    100
}

fn default_draws() -> usize {
    1000
}

fn default_quantile() -> f64 {
    0.1
}

fn default_max_bad() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputSpec,
    pub seed: u64,
    pub variants: Vec<Variant>,
    #[serde(default = "default_measures")]
    pub measures: Vec<Measure>,
    #[serde(default = "default_filter")]
    pub filter: FilterSpec,
    /// Defaults to the full inventory for CSV input and to the generator's
    /// own coordinates for synthetic input.
    #[serde(default)]
    pub normalization: Option<NormalizationPool>,
    #[serde(default)]
    pub schema: SchemaMap,
    #[serde(default = "default_max_bad")]
    pub max_bad_percent: f64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_draws")]
    pub draws_per_rep: usize,
    #[serde(default = "default_quantile")]
    pub ellipse_quantile: f64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(input: InputSpec, seed: u64, variants: Vec<Variant>) -> Self {
        RunConfig {
            input,
            seed,
            variants,
            measures: default_measures(),
            filter: default_filter(),
            normalization: None,
            schema: SchemaMap::default(),
            max_bad_percent: default_max_bad(),
            reps: default_reps(),
            draws_per_rep: default_draws(),
            ellipse_quantile: default_quantile(),
            grid: GridConfig::default(),
            fit: FitConfig::default(),
            output_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MmoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MmoError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(MmoError::Config("at least one variant is required".into()));
        }
        if self.measures.is_empty() {
            return Err(MmoError::Config("at least one measure is required".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(MmoError::Config(format!("variant `{v}` listed twice")));
            }
        }
        if self.reps == 0 {
            return Err(MmoError::Config("reps must be at least 1".into()));
        }
        if self.draws_per_rep < 2 {
            return Err(MmoError::Config("draws_per_rep must be at least 2".into()));
        }
        if !(self.ellipse_quantile > 0.0 && self.ellipse_quantile < 1.0) {
            return Err(MmoError::Config("ellipse_quantile must lie in (0, 1)".into()));
        }
        if self.grid.resolution < 16 || !(self.grid.padding > 0.0) {
            return Err(MmoError::Config("grid needs resolution ≥ 16 and positive padding".into()));
        }
        self.filter.validate()
    }

    pub fn normalization_pool(&self) -> NormalizationPool {
        self.normalization.unwrap_or(match self.input {
            InputSpec::Path(_) => NormalizationPool::FullInventory,
            InputSpec::Synth(_) => NormalizationPool::Precomputed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_toml() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 7
            variants = ["empirical_raw", "averaged", "minimal-multi"]
            measures = ["bhattacharyya", "euclidean"]
            [input]
            synth = "us-south-like"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.variants, vec![Variant::Raw, Variant::Averaged, Variant::MinimalMulti]);
        assert_eq!(cfg.reps, 100);
        assert_eq!(cfg.draws_per_rep, 1000);
        assert_eq!(cfg.filter.vowels, ("IH".to_string(), "EH".to_string()));
        assert_eq!(cfg.normalization_pool(), NormalizationPool::Precomputed);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_invalid_configs() {
        let no_variants = "seed = 1\nvariants = []\n[input]\nsynth = \"x\"\n";
        assert!(matches!(RunConfig::from_toml(no_variants), Err(MmoError::Config(_))));
        let no_seed = "variants = [\"raw\"]\n[input]\nsynth = \"x\"\n";
        assert!(RunConfig::from_toml(no_seed).is_err());
        let unknown = "seed = 1\nvariants = [\"fancy\"]\n[input]\nsynth = \"x\"\n";
        assert!(RunConfig::from_toml(unknown).is_err());
        let mut cfg = RunConfig::new(InputSpec::Synth("x".into()), 1, vec![Variant::Raw]);
        cfg.measures.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("empirical_averaged".parse::<Variant>().unwrap(), Variant::Averaged);
    }
}
