//! Numeric encoding of the two supported model structures.
//!
//! Factors use ±0.5 sum coding: the first level of each ordered pair is
//! +0.5, the second −0.5, so the intercept is the grand mean of the four
//! cell means and a cell mean is `cell_row · β`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::TokenTable;
use crate::error::{MmoError, Result};

pub const LOG_DURATION_CENTER: &str = "log_duration_center";
/// Control value for a cell's log-duration offset from the corpus center.
pub const LOG_DURATION_OFFSET: &str = "log_duration_offset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Minimal,
    Expanded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    /// F1 and F2 fitted jointly with correlated residuals and random effects.
    Multivariate,
    /// F1 and F2 fitted as two separate models.
    Univariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub structure: Structure,
    pub response: Response,
    pub vowel_levels: (String, String),
    pub context_levels: (String, String),
    #[serde(default)]
    pub control_values: BTreeMap<String, f64>,
}

impl ModelSpec {
    pub fn new(structure: Structure, response: Response, vowels: (&str, &str), contexts: (&str, &str)) -> Self {
        ModelSpec {
            structure,
            response,
            vowel_levels: (vowels.0.into(), vowels.1.into()),
            context_levels: (contexts.0.into(), contexts.1.into()),
            control_values: BTreeMap::new(),
        }
    }

    /// Number of fixed-effect columns.
    pub fn n_fixed(&self) -> usize {
        match self.structure {
            Structure::Minimal => 4,
            Structure::Expanded => 8,
        }
    }

    /// Number of variance-model columns (1 = homogeneous residual covariance).
    pub fn n_variance(&self) -> usize {
        match self.structure {
            Structure::Minimal => 1,
            Structure::Expanded => 4,
        }
    }

    pub fn vowel_code(&self, vowel: &str) -> Option<f64> {
        code(&self.vowel_levels, vowel)
    }

    pub fn context_code(&self, context: &str) -> Option<f64> {
        code(&self.context_levels, context)
    }

    /// Short name of this variant, e.g. `minimal-multi`.
    pub fn variant_name(&self) -> &'static str {
        match (self.structure, self.response) {
            (Structure::Minimal, Response::Univariate) => "minimal-uni",
            (Structure::Minimal, Response::Multivariate) => "minimal-multi",
            (Structure::Expanded, Response::Univariate) => "expanded-uni",
            (Structure::Expanded, Response::Multivariate) => "expanded-multi",
        }
    }
}

fn code(levels: &(String, String), label: &str) -> Option<f64> {
    if label == levels.0 {
        Some(0.5)
    } else if label == levels.1 {
        Some(-0.5)
    } else {
        None
    }
}

/// Fixed-effect row for a token or cell.
pub fn fixed_row(structure: Structure, vowel: f64, context: f64, log_dur: f64) -> Vec<f64> {
    let inter = vowel * context;
    match structure {
        Structure::Minimal => vec![1.0, vowel, context, inter],
        Structure::Expanded => vec![
            1.0,
            vowel,
            context,
            inter,
            log_dur,
            log_dur * vowel,
            log_dur * context,
            log_dur * inter,
        ],
    }
}

/// Random-slope row for the by-speaker effects (intercept, vowel, context, interaction).
pub fn speaker_row(vowel: f64, context: f64) -> [f64; 4] {
    [1.0, vowel, context, vowel * context]
}

/// Variance-model row.
pub fn variance_row(structure: Structure, vowel: f64, context: f64) -> Vec<f64> {
    match structure {
        Structure::Minimal => vec![1.0],
        Structure::Expanded => vec![1.0, vowel, context, vowel * context],
    }
}

/// A grouping factor: dense 0-based level index per row plus the level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub index: Vec<usize>,
    pub labels: Vec<String>,
}

impl Grouping {
    fn from_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Self {
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut names = Vec::new();
        let index = labels
            .map(|l| {
                *lookup.entry(l).or_insert_with(|| {
                    names.push(l.to_string());
                    names.len() - 1
                })
            })
            .collect();
        Grouping { index, labels: names }
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    /// The spec with `log_duration_center` recorded.
    pub spec: ModelSpec,
    /// n × p fixed effects.
    pub x: DMatrix<f64>,
    /// n × 4 by-speaker random design.
    pub z_speaker: DMatrix<f64>,
    pub speaker: Grouping,
    /// Word random intercepts (Z_word is a column of ones).
    pub word: Grouping,
    /// Following-segment random intercepts, expanded structure only.
    pub following: Option<Grouping>,
    /// n × 2 normalized (F1, F2).
    pub y: DMatrix<f64>,
    /// n × m variance-model design.
    pub v: DMatrix<f64>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

pub fn build_design(table: &TokenTable, spec: &ModelSpec) -> Result<DesignMatrices> {
    let n = table.len();
    let (v0, v1) = &spec.vowel_levels;
    let (c0, c1) = &spec.context_levels;
    for (factor, level, present) in [
        ("vowel", v0, table.tokens.iter().any(|t| &t.vowel == v0)),
        ("vowel", v1, table.tokens.iter().any(|t| &t.vowel == v1)),
        ("context", c0, table.tokens.iter().any(|t| &t.context == c0)),
        ("context", c1, table.tokens.iter().any(|t| &t.context == c1)),
    ] {
        if !present {
            return Err(MmoError::MissingLevel {
                factor: factor.into(),
                level: level.clone(),
            });
        }
    }

    let mut spec = spec.clone();
    let center = match (spec.structure, spec.control_values.get(LOG_DURATION_CENTER)) {
        (Structure::Expanded, None) => {
            let c = table.tokens.iter().map(|t| t.duration_s.ln()).sum::<f64>() / n as f64;
            spec.control_values.insert(LOG_DURATION_CENTER.into(), c);
            c
        }
        (_, Some(&c)) => c,
        (Structure::Minimal, None) => 0.0,
    };

    let p = spec.n_fixed();
    let m = spec.n_variance();
    let mut x = DMatrix::zeros(n, p);
    let mut z = DMatrix::zeros(n, 4);
    let mut y = DMatrix::zeros(n, 2);
    let mut v = DMatrix::zeros(n, m);
    for (i, t) in table.tokens.iter().enumerate() {
        let vc = spec.vowel_code(&t.vowel).ok_or_else(|| MmoError::MissingLevel {
            factor: "vowel".into(),
            level: t.vowel.clone(),
        })?;
        let cc = spec.context_code(&t.context).ok_or_else(|| MmoError::MissingLevel {
            factor: "context".into(),
            level: t.context.clone(),
        })?;
        let [f1, f2] = t
            .norm()
            .ok_or_else(|| MmoError::Config(format!("token {i} is not normalized")))?;
        let ld = t.duration_s.ln() - center;
        for (j, val) in fixed_row(spec.structure, vc, cc, ld).into_iter().enumerate() {
            x[(i, j)] = val;
        }
        for (j, val) in speaker_row(vc, cc).into_iter().enumerate() {
            z[(i, j)] = val;
        }
        for (j, val) in variance_row(spec.structure, vc, cc).into_iter().enumerate() {
            v[(i, j)] = val;
        }
        y[(i, 0)] = f1;
        y[(i, 1)] = f2;
    }

    let speaker = Grouping::from_labels(table.tokens.iter().map(|t| t.speaker.as_str()));
    let word = Grouping::from_labels(table.tokens.iter().map(|t| t.word.as_str()));
    let following = match spec.structure {
        Structure::Expanded => Some(Grouping::from_labels(
            table.tokens.iter().map(|t| t.following_segment.as_str()),
        )),
        Structure::Minimal => None,
    };

    Ok(DesignMatrices {
        spec,
        x,
        z_speaker: z,
        speaker,
        word,
        following,
        y,
        v,
    })
}
