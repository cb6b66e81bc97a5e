//! Predictive F1×F2 distributions per vowel-by-context cell.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{fixed_row, speaker_row, variance_row, ModelSpec, LOG_DURATION_OFFSET};
use crate::error::{MmoError, Result};
use crate::mixed::{FittedModel, ParamDraw, SPEAKER_COEFS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub vowel: String,
    pub context: String,
    /// Control predictors; a missing log-duration offset means the corpus mean.
    #[serde(default)]
    pub control_values: BTreeMap<String, f64>,
}

impl CellSpec {
    pub fn new(vowel: &str, context: &str) -> Self {
        CellSpec {
            vowel: vowel.into(),
            context: context.into(),
            control_values: BTreeMap::new(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.vowel, self.context)
    }

    fn codes(&self, spec: &ModelSpec) -> Result<(f64, f64)> {
        let v = spec.vowel_code(&self.vowel).ok_or_else(|| MmoError::MissingLevel {
            factor: "vowel".into(),
            level: self.vowel.clone(),
        })?;
        let c = spec.context_code(&self.context).ok_or_else(|| MmoError::MissingLevel {
            factor: "context".into(),
            level: self.context.clone(),
        })?;
        Ok((v, c))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    AverageSpeaker,
    BySpeaker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordPolicy {
    /// Add the word (and following-segment) variance to the cell covariance.
    Marginalize,
    /// Ignore word effects.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScopeSpec {
    pub kind: ScopeKind,
    pub word_policy: WordPolicy,
}

impl ScopeSpec {
    /// No random effects at all.
    pub fn average() -> Self {
        ScopeSpec {
            kind: ScopeKind::AverageSpeaker,
            word_policy: WordPolicy::Zero,
        }
    }

    /// One speaker's conditional modes, word effects marginalized.
    pub fn speaker(name: &str) -> Self {
        ScopeSpec {
            kind: ScopeKind::BySpeaker(name.into()),
            word_policy: WordPolicy::Marginalize,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ScopeKind::AverageSpeaker => "average".into(),
            ScopeKind::BySpeaker(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2D {
    /// Lower factor of `cov`; zero variances give zero rows.
    fn factor(&self) -> [[f64; 2]; 2] {
        let a = self.cov[0][0].max(0.0).sqrt();
        let b = if a > 0.0 { self.cov[1][0] / a } else { 0.0 };
        let c = (self.cov[1][1] - b * b).max(0.0).sqrt();
        [[a, 0.0], [b, c]]
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
        let l = self.factor();
        (0..n)
            .map(|_| {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                [self.mean[0] + l[0][0] * z1, self.mean[1] + l[1][0] * z1 + l[1][1] * z2]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample2D {
    /// (f1_norm, f2_norm) rows.
    pub points: Vec<[f64; 2]>,
    pub vowel: String,
    pub context: String,
    pub scope: String,
    pub rep: usize,
}

impl Sample2D {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Sample2D {
            points,
            vowel: String::new(),
            context: String::new(),
            scope: String::new(),
            rep: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let mut m = [0.0; 2];
        for p in &self.points {
            m[0] += p[0];
            m[1] += p[1];
        }
        [m[0] / n, m[1] / n]
    }

    /// Sample covariance (n − 1 divisor).
    pub fn cov(&self) -> [[f64; 2]; 2] {
        let m = self.mean();
        let mut s = [[0.0; 2]; 2];
        for p in &self.points {
            let d = [p[0] - m[0], p[1] - m[1]];
            for a in 0..2 {
                for b in 0..2 {
                    s[a][b] += d[a] * d[b];
                }
            }
        }
        let k = (self.points.len() as f64 - 1.0).max(1.0);
        s.map(|r| r.map(|v| v / k))
    }
}

/// Mean and covariance of a cell's predictive distribution under one
/// parameter set.
pub fn predictive_mean_cov(model: &FittedModel, cell: &CellSpec, scope: &ScopeSpec, draw: &ParamDraw) -> Result<Gaussian2D> {
    let spec = &model.spec;
    let (vc, cc) = cell.codes(spec)?;
    let log_dur = cell.control_values.get(LOG_DURATION_OFFSET).copied().unwrap_or(0.0);
    let x = fixed_row(spec.structure, vc, cc, log_dur);
    let mut mean = [0.0; 2];
    for (f, m) in mean.iter_mut().enumerate() {
        *m = x.iter().enumerate().map(|(j, v)| v * draw.beta[(j, f)]).sum();
    }
    if let ScopeKind::BySpeaker(name) = &scope.kind {
        let b = model
            .random_effects
            .speaker_effect(name)
            .ok_or_else(|| MmoError::UnknownSpeaker(name.clone()))?;
        let z = speaker_row(vc, cc);
        for (f, m) in mean.iter_mut().enumerate() {
            *m += (0..SPEAKER_COEFS).map(|j| z[j] * b[f * SPEAKER_COEFS + j]).sum::<f64>();
        }
    }
    let s = draw.sigma(&variance_row(spec.structure, vc, cc));
    let mut cov = [[s[(0, 0)], s[(0, 1)]], [s[(1, 0)], s[(1, 1)]]];
    if scope.word_policy == WordPolicy::Marginalize {
        for g in std::iter::once(&draw.g_word).chain(draw.g_following.as_ref()) {
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += g[(a, b)];
                }
            }
        }
    }
    Ok(Gaussian2D { mean, cov })
}

/// Generator for one stream of a seed; independent streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n_points` independent draws from the cell's predictive distribution.
pub fn simulate_cell(
    model: &FittedModel,
    cell: &CellSpec,
    scope: &ScopeSpec,
    n_points: usize,
    draw: &ParamDraw,
    seed: u64,
) -> Result<Sample2D> {
    if n_points < 2 {
        return Err(MmoError::Config("at least 2 points per simulated cell".into()));
    }
    let g = predictive_mean_cov(model, cell, scope, draw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Sample2D {
        points: g.sample(n_points, &mut rng),
        vowel: cell.vowel.clone(),
        context: cell.context.clone(),
        scope: scope.label(),
        rep: 0,
    })
}

/// CSV with columns f1, f2, vowel, context, scope, rep.
pub fn write_samples_csv<W: Write>(samples: &[Sample2D], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["f1", "f2", "vowel", "context", "scope", "rep"])?;
    for s in samples {
        let rep = s.rep.to_string();
        for p in &s.points {
            w.write_record([p[0].to_string().as_str(), &p[1].to_string(), &s.vowel, &s.context, &s.scope, &rep])?;
        }
    }
    w.flush()?;
    Ok(())
}
