//! Replicated overlap estimates from a fitted model, and single-value
//! estimates from raw token distributions.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::measures::{ba_grid, euclidean_distance, mean_distance, pillai, GridConfig};
use crate::data::TokenTable;
use crate::error::{MmoError, Result};
use crate::mixed::{FittedModel, ParameterDraws};
use crate::simulate::{predictive_mean_cov, stream_rng, CellSpec, Sample2D, ScopeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Bhattacharyya,
    Euclidean,
    Pillai,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Bhattacharyya => "bhattacharyya",
            Measure::Euclidean => "euclidean",
            Measure::Pillai => "pillai",
        }
    }

    pub fn on_samples(self, p: &Sample2D, q: &Sample2D, grid: &GridConfig) -> Result<f64> {
        match self {
            Measure::Bhattacharyya => ba_grid(p, q, grid),
            Measure::Euclidean => euclidean_distance(p, q),
            Measure::Pillai => pillai(p, q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub measure: Measure,
    pub vowels: (String, String),
    pub context: String,
    /// `average` or a speaker id.
    pub scope: String,
    /// Variant that produced the estimate (`raw`, `averaged`, `minimal-multi`, ...).
    pub method: String,
    pub replicates: Vec<f64>,
    /// Median of the replicates.
    pub point: f64,
    /// Central 95% percentile interval; absent for single-value estimates.
    pub interval: Option<(f64, f64)>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl OverlapEstimate {
    pub fn from_replicates(
        measure: Measure,
        vowels: (&str, &str),
        context: &str,
        scope: &str,
        method: &str,
        replicates: Vec<f64>,
        with_interval: bool,
    ) -> Self {
        let mut sorted = replicates.clone();
        sorted.sort_by(f64::total_cmp);
        let point = quantile(&sorted, 0.5);
        let interval = with_interval.then(|| (quantile(&sorted, 0.025), quantile(&sorted, 0.975)));
        OverlapEstimate {
            measure,
            vowels: (vowels.0.into(), vowels.1.into()),
            context: context.into(),
            scope: scope.into(),
            method: method.into(),
            replicates,
            point,
            interval,
        }
    }
}

/// Largest tolerated share of failed replicates.
const MAX_FAILED_SHARE: f64 = 0.1;

/// One replicate per parameter draw. Bhattacharyya and Pillai simulate
/// `draws_per_rep` points per cell; Euclidean uses the drawn cell means.
#[allow(clippy::too_many_arguments)]
pub fn modelled_overlap(
    model: &FittedModel,
    draws: &ParameterDraws,
    measure: Measure,
    cells: (&CellSpec, &CellSpec),
    scope: &ScopeSpec,
    draws_per_rep: usize,
    seed: u64,
    grid: &GridConfig,
) -> Result<OverlapEstimate> {
    if draws.draws.is_empty() {
        return Err(MmoError::Config("no parameter draws".into()));
    }
    let (a, b) = cells;
    if a.context != b.context {
        return Err(MmoError::Config("cells of a pair must share the context".into()));
    }
    let results: Vec<Result<f64>> = draws
        .draws
        .par_iter()
        .enumerate()
        .map(|(r, draw)| {
            let ga = predictive_mean_cov(model, a, scope, draw)?;
            let gb = predictive_mean_cov(model, b, scope, draw)?;
            if measure == Measure::Euclidean {
                return Ok(mean_distance(ga.mean, gb.mean));
            }
            let pa = Sample2D::new(ga.sample(draws_per_rep, &mut stream_rng(seed, 2 * r as u64)));
            let pb = Sample2D::new(gb.sample(draws_per_rep, &mut stream_rng(seed, 2 * r as u64 + 1)));
            measure.on_samples(&pa, &pb, grid)
        })
        .collect();
    let total = results.len();
    let mut values = Vec::with_capacity(total);
    let mut first_error = None;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(MmoError::UnknownSpeaker(s)) => return Err(MmoError::UnknownSpeaker(s)),
            Err(MmoError::MissingLevel { factor, level }) => return Err(MmoError::MissingLevel { factor, level }),
            Err(e) => {
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let failed = total - values.len();
    if failed as f64 > MAX_FAILED_SHARE * total as f64 || values.is_empty() {
        return Err(MmoError::ReplicateFailures {
            failed,
            total,
            first: first_error.unwrap_or_default(),
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {total} replicates failed: {}", first_error.unwrap_or_default());
    }
    Ok(OverlapEstimate::from_replicates(
        measure,
        (&a.vowel, &b.vowel),
        &a.context,
        &scope.label(),
        model.spec.variant_name(),
        values,
        true,
    ))
}

/// Points of one speaker's vowel in a context, optionally replaced by
/// per-word means (in order of first occurrence).
pub fn speaker_cell_points(table: &TokenTable, speaker: &str, vowel: &str, context: &str, word_averaged: bool) -> Result<Vec<[f64; 2]>> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut by_word: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut raw = Vec::new();
    for t in &table.tokens {
        if t.speaker != speaker || t.vowel != vowel || t.context != context {
            continue;
        }
        let p = t
            .norm()
            .ok_or_else(|| MmoError::Config(format!("speaker {speaker}: token is not normalized")))?;
        raw.push(p);
        let k = *slot.entry(&t.word).or_insert_with(|| {
            by_word.push(Vec::new());
            by_word.len() - 1
        });
        by_word[k].push(p);
    }
    if !word_averaged {
        return Ok(raw);
    }
    Ok(by_word
        .iter()
        .map(|ps| {
            let n = ps.len() as f64;
            [ps.iter().map(|p| p[0]).sum::<f64>() / n, ps.iter().map(|p| p[1]).sum::<f64>() / n]
        })
        .collect())
}

/// The measure on one speaker's raw (or word-averaged) token distributions.
pub fn empirical_overlap(
    table: &TokenTable,
    measure: Measure,
    speaker: &str,
    vowels: (&str, &str),
    context: &str,
    word_averaged: bool,
    grid: &GridConfig,
) -> Result<OverlapEstimate> {
    let mut samples = Vec::with_capacity(2);
    for vowel in [vowels.0, vowels.1] {
        let pts = speaker_cell_points(table, speaker, vowel, context, word_averaged)?;
        if pts.len() < 2 {
            return Err(MmoError::InsufficientTokens {
                speaker: speaker.into(),
                cell: format!("{vowel}-{context}"),
            });
        }
        samples.push(Sample2D::new(pts));
    }
    let v = measure.on_samples(&samples[0], &samples[1], grid)?;
    let method = if word_averaged { "averaged" } else { "raw" };
    Ok(OverlapEstimate::from_replicates(measure, vowels, context, speaker, method, vec![v], false))
}

/// CSV with columns speaker, context, measure, point, lo, hi, method.
pub fn write_estimates_csv<W: Write>(estimates: &[OverlapEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["speaker", "context", "measure", "point", "lo", "hi", "method"])?;
    for e in estimates {
        let (lo, hi) = match e.interval {
            Some((l, h)) => (l.to_string(), h.to_string()),
            None => ("NA".into(), "NA".into()),
        };
        w.write_record([
            e.scope.as_str(),
            &e.context,
            e.measure.name(),
            &e.point.to_string(),
            &lo,
            &hi,
            &e.method,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VowelToken;

    fn tok(word: &str, vowel: &str, f1: f64, f2: f64) -> VowelToken {
        VowelToken {
            speaker: "s".into(),
            word: word.into(),
            vowel: vowel.into(),
            context: "nasal".into(),
            f1_hz: 500.0,
            f2_hz: 1500.0,
            duration_s: 0.1,
            following_segment: "N".into(),
            stressed: true,
            f1_norm: Some(f1),
            f2_norm: Some(f2),
        }
    }

    fn base() -> Vec<VowelToken> {
        let mut v = Vec::new();
        for k in 0..12 {
            let x = k as f64 * 0.1;
            v.push(tok(&format!("ih{k}"), "IH", x, 1.0 - 0.5 * x));
            v.push(tok(&format!("eh{k}"), "EH", 0.6 + x, 0.7 - 0.3 * x + 0.05 * (k % 3) as f64));
        }
        v
    }

    #[test]
    fn quantiles() {
        let xs: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.5), 50.0);
        assert_eq!(quantile(&xs, 0.025), 2.5);
        let e = OverlapEstimate::from_replicates(Measure::Pillai, ("a", "b"), "c", "s", "m", vec![3.0, 1.0, 2.0], true);
        assert_eq!(e.point, 2.0);
        assert_eq!(e.interval, Some((1.05, 2.95)));
    }

    #[test]
    fn single_token_words_average_to_raw() {
        let t = TokenTable::new(base(), "t");
        let g = GridConfig::default();
        for m in [Measure::Bhattacharyya, Measure::Euclidean, Measure::Pillai] {
            let raw = empirical_overlap(&t, m, "s", ("IH", "EH"), "nasal", false, &g).unwrap();
            let avg = empirical_overlap(&t, m, "s", ("IH", "EH"), "nasal", true, &g).unwrap();
            assert_eq!(raw.point, avg.point);
            assert!(raw.interval.is_none());
        }
    }

    #[test]
    fn duplicated_outlier_word() {
        let mut toks = base();
        let dedup = TokenTable::new(
            {
                let mut v = toks.clone();
                v.push(tok("outlier", "IH", 2.5, -1.0));
                v
            },
            "t",
        );
        for _ in 0..50 {
            toks.push(tok("outlier", "IH", 2.5, -1.0));
        }
        let t = TokenTable::new(toks, "t");
        let g = GridConfig::default();
        let raw = empirical_overlap(&t, Measure::Bhattacharyya, "s", ("IH", "EH"), "nasal", false, &g).unwrap();
        let avg = empirical_overlap(&t, Measure::Bhattacharyya, "s", ("IH", "EH"), "nasal", true, &g).unwrap();
        let once = empirical_overlap(&dedup, Measure::Bhattacharyya, "s", ("IH", "EH"), "nasal", false, &g).unwrap();
        assert!((raw.point - avg.point).abs() > 0.01);
        assert_eq!(avg.point, once.point);
    }

    #[test]
    fn insufficient_tokens() {
        let mut toks: Vec<_> = base().into_iter().filter(|t| t.vowel == "IH").collect();
        toks.push(tok("eh", "EH", 0.5, 0.5));
        let t = TokenTable::new(toks, "t");
        let err = empirical_overlap(&t, Measure::Bhattacharyya, "s", ("IH", "EH"), "nasal", false, &GridConfig::default()).unwrap_err();
        assert!(matches!(err, MmoError::InsufficientTokens { ref cell, .. } if cell == "EH-nasal"));
    }

    #[test]
    fn estimates_csv() {
        let e = OverlapEstimate::from_replicates(Measure::Bhattacharyya, ("IH", "EH"), "nasal", "average", "minimal-multi", vec![0.5, 0.7], true);
        let mut buf = Vec::new();
        write_estimates_csv(&[e], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("speaker,context,measure,point,lo,hi,method\naverage,nasal,bhattacharyya,0.6,"));
    }
}
