//! Lobanov (per-speaker z-score) normalization of F1 and F2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TokenTable;
use crate::error::{MmoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub speaker: String,
    pub mean_f1: f64,
    pub mean_f2: f64,
    pub sd_f1: f64,
    pub sd_f2: f64,
    pub n_tokens: usize,
}

/// Which tokens feed the per-speaker statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationPool {
    /// Every vowel of each speaker, before subsetting.
    #[default]
    FullInventory,
    /// Only the filtered analysis subset.
    Subset,
    /// Keep the normalized columns already present in the input.
    Precomputed,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Mean and sample standard deviation (n − 1 divisor) of each formant per speaker.
pub fn speaker_stats(table: &TokenTable) -> Result<BTreeMap<String, SpeakerStats>> {
    let mut by_speaker: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for t in &table.tokens {
        let e = by_speaker.entry(&t.speaker).or_default();
        e.0.push(t.f1_hz);
        e.1.push(t.f2_hz);
    }
    by_speaker
        .into_iter()
        .map(|(speaker, (f1, f2))| {
            if f1.len() < 2 {
                return Err(MmoError::DegenerateSpeaker(speaker.to_string()));
            }
            let (mean_f1, sd_f1) = mean_sd(&f1);
            let (mean_f2, sd_f2) = mean_sd(&f2);
            if sd_f1 <= 0.0 || sd_f2 <= 0.0 || !sd_f1.is_finite() || !sd_f2.is_finite() {
                return Err(MmoError::DegenerateSpeaker(speaker.to_string()));
            }
            Ok((
                speaker.to_string(),
                SpeakerStats {
                    speaker: speaker.to_string(),
                    mean_f1,
                    mean_f2,
                    sd_f1,
                    sd_f2,
                    n_tokens: f1.len(),
                },
            ))
        })
        .collect()
}

/// Fills `f1_norm`/`f2_norm` from the given speaker statistics. Hz values are kept.
pub fn lobanov_normalize(
    analysis: &TokenTable,
    stats: &BTreeMap<String, SpeakerStats>,
) -> Result<TokenTable> {
    let mut out = analysis.clone();
    for t in &mut out.tokens {
        let s = stats
            .get(&t.speaker)
            .ok_or_else(|| MmoError::UnknownSpeaker(t.speaker.clone()))?;
        t.f1_norm = Some((t.f1_hz - s.mean_f1) / s.sd_f1);
        t.f2_norm = Some((t.f2_hz - s.mean_f2) / s.sd_f2);
    }
    Ok(out.with_step("lobanov"))
}
