//! Synthetic corpora with known generating parameters.
//!
//! Tokens are generated directly in normalized units from the minimal model
//! equation: cell mean, by-speaker slopes, a word intercept and a residual.
//! Word `k` belongs to cell `k mod 4` (cells ordered as in [`TruthSpec::cells`])
//! and each token picks its word from the frequency law over all words. Hz
//! values are a fixed monotone map of the normalized ones, so tables should
//! be analysed with the precomputed normalization.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{TokenTable, VowelToken};
use crate::design::{speaker_row, ModelSpec, Response, Structure};
use crate::error::{MmoError, Result};
use crate::linalg::psd_factor;
use crate::metrics::ba_gaussian;
use crate::mixed::SPEAKER_COEFS;
use crate::simulate::{stream_rng, Gaussian2D};

pub const TRUTH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordFrequency {
    Uniform,
    /// Weight of the word of rank `k` (from 1) is `k^-s`.
    Zipf(f64),
}

impl WordFrequency {
    pub fn weights(self, n_words: usize) -> Vec<f64> {
        (1..=n_words)
            .map(|k| match self {
                WordFrequency::Uniform => 1.0,
                WordFrequency::Zipf(s) => (k as f64).powf(-s),
            })
            .collect()
    }
}

/// Log-normal token durations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationLaw {
    pub log_mean: f64,
    pub log_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub vowels: (String, String),
    pub contexts: (String, String),
    /// Rows intercept, vowel, context, interaction (±0.5 coding); columns F1, F2.
    pub beta: [[f64; 2]; 4],
    /// By-speaker covariance, formant-major (F1 coefficients, then F2).
    pub g_speaker: [[f64; 8]; 8],
    pub g_word: [[f64; 2]; 2],
    /// Residual covariance per cell, in [`TruthSpec::cells`] order.
    pub sigma: [[[f64; 2]; 2]; 4],
    pub n_speakers: usize,
    pub n_words: usize,
    pub tokens_per_speaker: usize,
    pub word_frequency: WordFrequency,
    pub duration: DurationLaw,
}

fn cov2(sd1: f64, sd2: f64, rho: f64) -> [[f64; 2]; 2] {
    [[sd1 * sd1, rho * sd1 * sd2], [rho * sd1 * sd2, sd2 * sd2]]
}

/// Diagonal by-speaker covariance from per-coefficient sds, plus a
/// cross-formant intercept correlation.
fn speaker_cov(sd_f1: [f64; 4], sd_f2: [f64; 4], intercept_rho: f64) -> [[f64; 8]; 8] {
    let mut g = [[0.0; 8]; 8];
    for j in 0..4 {
        g[j][j] = sd_f1[j] * sd_f1[j];
        g[4 + j][4 + j] = sd_f2[j] * sd_f2[j];
    }
    g[0][4] = intercept_rho * sd_f1[0] * sd_f2[0];
    g[4][0] = g[0][4];
    g
}

/// β from the vowel differences (first minus second vowel) in each context
/// and the first vowel-by-context grand mean.
fn beta_from_differences(intercept: [f64; 2], context: [f64; 2], diff_first: [f64; 2], diff_second: [f64; 2]) -> [[f64; 2]; 4] {
    let vowel = [0.5 * (diff_first[0] + diff_second[0]), 0.5 * (diff_first[1] + diff_second[1])];
    let inter = [diff_first[0] - diff_second[0], diff_first[1] - diff_second[1]];
    [intercept, vowel, context, inter]
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            vowels: ("IH".into(), "EH".into()),
            contexts: ("nasal".into(), "oral".into()),
            beta: [[-0.4, 0.6], [-0.6, 0.3], [0.0, 0.1], [0.4, -0.2]],
            g_speaker: speaker_cov([0.3, 0.2, 0.15, 0.15], [0.3, 0.2, 0.15, 0.15], 0.3),
            g_word: cov2(0.3, 0.3, 0.0),
            sigma: [cov2(0.35, 0.35, 0.2); 4],
            n_speakers: 20,
            n_words: 100,
            tokens_per_speaker: 80,
            word_frequency: WordFrequency::Zipf(1.0),
            duration: DurationLaw {
                log_mean: 0.1f64.ln(),
                log_sd: 0.3,
            },
        }
    }
}

fn mat<const N: usize>(a: &[[f64; N]; N]) -> DMatrix<f64> {
    DMatrix::from_fn(N, N, |i, j| a[i][j])
}

fn check_cov(name: &str, g: &DMatrix<f64>) -> Result<()> {
    let asym = (g - g.transpose()).abs().max();
    let min_eig = g.clone().symmetric_eigen().eigenvalues.min();
    if asym > 1e-12 || min_eig < -1e-10 || g.iter().any(|v| !v.is_finite()) {
        return Err(MmoError::Config(format!("{name} is not a symmetric PSD covariance")));
    }
    Ok(())
}

impl TruthSpec {
    /// (vowel, context) cells: first vowel and second vowel in the first
    /// context, then the same in the second.
    pub fn cells(&self) -> [(String, String); 4] {
        let (v0, v1) = &self.vowels;
        let (c0, c1) = &self.contexts;
        [
            (v0.clone(), c0.clone()),
            (v1.clone(), c0.clone()),
            (v0.clone(), c1.clone()),
            (v1.clone(), c1.clone()),
        ]
    }

    fn codes(cell: usize) -> (f64, f64) {
        (if cell % 2 == 0 { 0.5 } else { -0.5 }, if cell < 2 { 0.5 } else { -0.5 })
    }

    /// Model specification whose coding matches the generator.
    pub fn model_spec(&self, structure: Structure, response: Response) -> ModelSpec {
        ModelSpec::new(
            structure,
            response,
            (&self.vowels.0, &self.vowels.1),
            (&self.contexts.0, &self.contexts.1),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.tokens_per_speaker == 0 {
            return Err(MmoError::Config("speaker and token counts must be at least 1".into()));
        }
        if self.n_words < 4 {
            return Err(MmoError::Config("at least one word per cell (4 words)".into()));
        }
        if self.vowels.0 == self.vowels.1 || self.contexts.0 == self.contexts.1 {
            return Err(MmoError::Config("vowel and context levels must be distinct".into()));
        }
        if let WordFrequency::Zipf(s) = self.word_frequency {
            if !(s > 0.0 && s.is_finite()) {
                return Err(MmoError::Config("zipf exponent must be positive".into()));
            }
        }
        if !(self.duration.log_sd >= 0.0 && self.duration.log_mean.is_finite()) {
            return Err(MmoError::Config("invalid duration law".into()));
        }
        if self.beta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MmoError::Config("beta must be finite".into()));
        }
        check_cov("g_speaker", &mat(&self.g_speaker))?;
        check_cov("g_word", &mat(&self.g_word))?;
        for s in &self.sigma {
            check_cov("sigma", &mat(s))?;
        }
        Ok(())
    }

    /// Population mean of a cell, `x_cell · β`.
    pub fn cell_mean(&self, cell: usize) -> [f64; 2] {
        let (v, c) = Self::codes(cell);
        let x = speaker_row(v, c);
        [0, 1].map(|f| (0..4).map(|j| x[j] * self.beta[j][f]).sum())
    }

    /// Average-speaker cell distribution: no speaker or word effects.
    pub fn average_cell(&self, cell: usize) -> Gaussian2D {
        Gaussian2D {
            mean: self.cell_mean(cell),
            cov: self.sigma[cell],
        }
    }

    /// One speaker's cell distribution over the word population.
    pub fn speaker_cell(&self, cell: usize, effect: &[f64; 8]) -> Gaussian2D {
        let (v, c) = Self::codes(cell);
        let z = speaker_row(v, c);
        let base = self.cell_mean(cell);
        let mean = [0, 1].map(|f| base[f] + (0..SPEAKER_COEFS).map(|j| z[j] * effect[f * SPEAKER_COEFS + j]).sum::<f64>());
        let s = self.sigma[cell];
        let w = self.g_word;
        Gaussian2D {
            mean,
            cov: [[s[0][0] + w[0][0], s[0][1] + w[0][1]], [s[1][0] + w[1][0], s[1][1] + w[1][1]]],
        }
    }

    /// Closed-form affinity of the two vowels in one context (0 or 1).
    pub fn average_overlap(&self, context: usize) -> Result<f64> {
        ba_gaussian(&self.average_cell(2 * context), &self.average_cell(2 * context + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCell {
    pub vowel: String,
    pub context: String,
    /// `average` or a speaker id.
    pub scope: String,
    pub gaussian: Gaussian2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueOverlap {
    pub context: String,
    pub scope: String,
    /// Absent when a cell covariance is singular.
    pub bhattacharyya: Option<f64>,
}

/// Everything known about a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    pub format_version: u32,
    pub seed: u64,
    pub spec: TruthSpec,
    #[serde(skip)]
    pub table: TokenTable,
    pub speaker_effects: BTreeMap<String, [f64; 8]>,
    pub word_effects: BTreeMap<String, [f64; 2]>,
    pub true_cells: Vec<TrueCell>,
    pub true_overlaps: Vec<TrueOverlap>,
}

impl TruthBundle {
    pub fn true_overlap(&self, context: &str, scope: &str) -> Option<f64> {
        self.true_overlaps
            .iter()
            .find(|o| o.context == context && o.scope == scope)
            .and_then(|o| o.bhattacharyya)
    }

    pub fn true_cell(&self, vowel: &str, context: &str, scope: &str) -> Option<&Gaussian2D> {
        self.true_cells
            .iter()
            .find(|c| c.vowel == vowel && c.context == context && c.scope == scope)
            .map(|c| &c.gaussian)
    }

    /// Truth sidecar (everything but the token table).
    pub fn write_truth_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

fn draw_normal<const N: usize>(factor: &DMatrix<f64>, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; N] {
    let z = DVector::from_fn(N, |_, _| StandardNormal.sample(rng));
    let v = factor * z;
    std::array::from_fn(|i| v[i])
}

const NASAL_SEGMENTS: [&str; 3] = ["N", "M", "NG"];
const ORAL_SEGMENTS: [&str; 3] = ["T", "D", "K"];

/// Hz corresponding to normalized coordinates.
pub fn hz_from_norm(f1: f64, f2: f64) -> (f64, f64) {
    (500.0 * (0.2 * f1).exp(), 1500.0 * (0.15 * f2).exp())
}

pub fn generate_corpus(spec: &TruthSpec, seed: u64) -> Result<TruthBundle> {
    spec.validate()?;
    let cells = spec.cells();
    let width = spec.n_speakers.to_string().len().max(2);
    let speakers: Vec<String> = (1..=spec.n_speakers).map(|i| format!("s{i:0width$}")).collect();
    let words: Vec<String> = (0..spec.n_words).map(|k| format!("w{k:03}")).collect();

    let mut rng = stream_rng(seed, 0);
    let l_speaker = psd_factor(&mat(&spec.g_speaker));
    let speaker_effects: Vec<[f64; 8]> = (0..spec.n_speakers).map(|_| draw_normal(&l_speaker, &mut rng)).collect();
    let mut rng = stream_rng(seed, 1);
    let l_word = psd_factor(&mat(&spec.g_word));
    let word_effects: Vec<[f64; 2]> = (0..spec.n_words).map(|_| draw_normal(&l_word, &mut rng)).collect();

    let picker = WeightedIndex::new(spec.word_frequency.weights(spec.n_words))
        .map_err(|e| MmoError::Config(format!("word frequencies: {e}")))?;
    let l_sigma: Vec<DMatrix<f64>> = spec.sigma.iter().map(|s| psd_factor(&mat(s))).collect();
    let mut rng = stream_rng(seed, 2);
    let mut tokens = Vec::with_capacity(spec.n_speakers * spec.tokens_per_speaker);
    for (s, name) in speakers.iter().enumerate() {
        for _ in 0..spec.tokens_per_speaker {
            let k = picker.sample(&mut rng);
            let cell = k % 4;
            let mean = spec.speaker_cell(cell, &speaker_effects[s]).mean;
            let e: [f64; 2] = draw_normal(&l_sigma[cell], &mut rng);
            let z: f64 = StandardNormal.sample(&mut rng);
            let f1 = mean[0] + word_effects[k][0] + e[0];
            let f2 = mean[1] + word_effects[k][1] + e[1];
            let (f1_hz, f2_hz) = hz_from_norm(f1, f2);
            let segments = if cell < 2 { NASAL_SEGMENTS } else { ORAL_SEGMENTS };
            tokens.push(VowelToken {
                speaker: name.clone(),
                word: words[k].clone(),
                vowel: cells[cell].0.clone(),
                context: cells[cell].1.clone(),
                f1_hz,
                f2_hz,
                duration_s: (spec.duration.log_mean + spec.duration.log_sd * z).exp(),
                following_segment: segments[(k / 4) % 3].into(),
                stressed: true,
                f1_norm: Some(f1),
                f2_norm: Some(f2),
            });
        }
    }

    let mut true_cells = Vec::new();
    let mut true_overlaps = Vec::new();
    let scopes = std::iter::once(("average".to_string(), None)).chain(speakers.iter().cloned().zip(speaker_effects.iter().map(Some)));
    for (scope, effect) in scopes {
        let g: Vec<Gaussian2D> = (0..4)
            .map(|c| match effect {
                None => spec.average_cell(c),
                Some(b) => spec.speaker_cell(c, b),
            })
            .collect();
        for (c, gauss) in g.iter().enumerate() {
            true_cells.push(TrueCell {
                vowel: cells[c].0.clone(),
                context: cells[c].1.clone(),
                scope: scope.clone(),
                gaussian: *gauss,
            });
        }
        for ctx in 0..2 {
            true_overlaps.push(TrueOverlap {
                context: cells[2 * ctx].1.clone(),
                scope: scope.clone(),
                bhattacharyya: ba_gaussian(&g[2 * ctx], &g[2 * ctx + 1]).ok(),
            });
        }
    }

    Ok(TruthBundle {
        format_version: TRUTH_FORMAT_VERSION,
        seed,
        spec: spec.clone(),
        table: TokenTable::new(tokens, format!("synth:{seed}")).with_step("precomputed"),
        speaker_effects: speakers.iter().cloned().zip(speaker_effects).collect(),
        word_effects: words.into_iter().zip(word_effects).collect(),
        true_cells,
        true_overlaps,
    })
}

/// Canned dialect-like scenarios, keyed by name.
pub fn four_dialect_scenarios() -> BTreeMap<String, TruthSpec> {
    let base = TruthSpec::default();
    let sd = [0.3, 0.2, 0.15, 0.15];
    let with = |diff_nasal: [f64; 2], diff_oral: [f64; 2], inter_sd: [f64; 2]| TruthSpec {
        beta: beta_from_differences(base.beta[0], base.beta[2], diff_nasal, diff_oral),
        g_speaker: speaker_cov([sd[0], sd[1], sd[2], inter_sd[0]], [sd[0], sd[1], sd[2], inter_sd[1]], 0.3),
        ..base.clone()
    };
    BTreeMap::from([
        ("us-south-like".to_string(), with([-0.05, 0.02], [-0.9, 0.45], [0.15, 0.15])),
        ("north-america-like".to_string(), with([-0.3, 0.15], [-0.8, 0.4], [0.5, 0.3])),
        ("southern-england-like".to_string(), with([-0.7, 0.35], [-0.72, 0.36], [0.05, 0.05])),
        ("scottish-like".to_string(), with([0.0, 0.1], [0.0, 0.12], [0.15, 0.15])),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zipf_head_share() {
        let spec = TruthSpec {
            n_speakers: 50,
            tokens_per_speaker: 400,
            ..TruthSpec::default()
        };
        let b = generate_corpus(&spec, 3).unwrap();
        let n = b.table.len() as f64;
        let harmonic: f64 = (1..=100).map(|k| 1.0 / k as f64).sum();
        let p = 1.0 / harmonic;
        assert!((p - 0.193).abs() < 5e-4);
        let share = b.table.tokens.iter().filter(|t| t.word == "w000").count() as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((share - p).abs() < 3.0 * se, "share {share} vs {p}");
    }

    #[test]
    fn cell_means_converge() {
        let spec = TruthSpec {
            n_speakers: 1,
            tokens_per_speaker: 1_000_000,
            g_speaker: [[0.0; 8]; 8],
            g_word: [[0.0; 2]; 2],
            word_frequency: WordFrequency::Uniform,
            ..TruthSpec::default()
        };
        let b = generate_corpus(&spec, 11).unwrap();
        let cells = spec.cells();
        for (c, (v, ctx)) in cells.iter().enumerate() {
            let pts: Vec<[f64; 2]> = b
                .table
                .tokens
                .iter()
                .filter(|t| &t.vowel == v && &t.context == ctx)
                .map(|t| t.norm().unwrap())
                .collect();
            let n = pts.len() as f64;
            let truth = spec.cell_mean(c);
            for f in 0..2 {
                let m = pts.iter().map(|p| p[f]).sum::<f64>() / n;
                assert!((m - truth[f]).abs() < 0.01, "cell {c} formant {f}: {m} vs {}", truth[f]);
            }
        }
    }

    #[test]
    fn zero_variance_tokens_sit_at_cell_means() {
        let spec = TruthSpec {
            g_speaker: [[0.0; 8]; 8],
            g_word: [[0.0; 2]; 2],
            sigma: [[[0.0; 2]; 2]; 4],
            ..TruthSpec::default()
        };
        let b = generate_corpus(&spec, 5).unwrap();
        let cells = spec.cells();
        for t in &b.table.tokens {
            let c = cells.iter().position(|(v, ctx)| v == &t.vowel && ctx == &t.context).unwrap();
            assert_eq!(t.norm().unwrap(), spec.cell_mean(c));
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let spec = TruthSpec::default();
        let a = generate_corpus(&spec, 9).unwrap();
        let b = generate_corpus(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.table, generate_corpus(&spec, 10).unwrap().table);
        assert_eq!(a.table.speakers().len(), 20);
        assert_eq!(a.table.len(), 1600);
        for o in &a.true_overlaps {
            let p = a.true_cell("IH", &o.context, &o.scope).unwrap();
            let q = a.true_cell("EH", &o.context, &o.scope).unwrap();
            assert!((ba_gaussian(p, q).unwrap() - o.bhattacharyya.unwrap()).abs() <= 1e-12);
        }
        let mut json = Vec::new();
        a.write_truth_json(&mut json).unwrap();
        let back: TruthBundle = serde_json::from_slice(&json).unwrap();
        assert_eq!(back.true_overlaps, a.true_overlaps);
        assert_eq!(back.spec, a.spec);
    }

    #[test]
    fn generated_words_stay_in_their_cells() {
        let b = generate_corpus(&TruthSpec::default(), 1).unwrap();
        let cells = b.spec.cells();
        for t in &b.table.tokens {
            let k: usize = t.word[1..].parse().unwrap();
            assert_eq!((&t.vowel, &t.context), (&cells[k % 4].0, &cells[k % 4].1));
            let nasal = ["N", "M", "NG"].contains(&t.following_segment.as_str());
            assert_eq!(nasal, t.context == "nasal");
        }
    }

    #[test]
    fn invalid_specs() {
        let bad_zipf = TruthSpec {
            word_frequency: WordFrequency::Zipf(0.0),
            ..TruthSpec::default()
        };
        assert!(bad_zipf.validate().is_err());
        let mut not_psd = TruthSpec::default();
        not_psd.g_word = [[0.01, 0.1], [0.1, 0.01]];
        assert!(not_psd.validate().is_err());
        let few_words = TruthSpec {
            n_words: 3,
            ..TruthSpec::default()
        };
        assert!(few_words.validate().is_err());
    }

    #[test]
    fn scenario_patterns() {
        let s = four_dialect_scenarios();
        assert_eq!(s.len(), 4);
        for spec in s.values() {
            spec.validate().unwrap();
        }
        let south = &s["us-south-like"];
        assert!(south.average_overlap(0).unwrap() > 0.9);
        assert!(south.average_overlap(1).unwrap() < 0.5);
        let scot = &s["scottish-like"];
        assert_eq!(scot.cell_mean(0)[0], scot.cell_mean(1)[0]);
        assert_eq!(scot.cell_mean(2)[0], scot.cell_mean(3)[0]);
        assert!(scot.average_overlap(0).unwrap() > 0.9 && scot.average_overlap(1).unwrap() > 0.9);
        let se = &s["southern-england-like"];
        assert!((se.average_overlap(0).unwrap() - se.average_overlap(1).unwrap()).abs() < 0.1);
        let na = &s["north-america-like"];
        assert!(na.g_speaker[3][3] > 10.0 * se.g_speaker[3][3]);
        let (n, o) = (na.average_overlap(0).unwrap(), na.average_overlap(1).unwrap());
        assert!(n > o && n < 0.95);
    }

    #[test]
    fn cell_means_from_differences() {
        let spec = &four_dialect_scenarios()["us-south-like"];
        let d = |a: [f64; 2], b: [f64; 2]| [a[0] - b[0], a[1] - b[1]];
        let nasal = d(spec.cell_mean(0), spec.cell_mean(1));
        let oral = d(spec.cell_mean(2), spec.cell_mean(3));
        for (got, want) in nasal.iter().chain(&oral).zip([-0.05, 0.02, -0.9, 0.45]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
