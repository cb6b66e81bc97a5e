//! End-to-end runs: ingest, normalize, fit, simulate, measure and report.
//!
//! Every random stream is derived from the run seed and a label naming its
//! use, so adding or removing a variant never changes the numbers of another.

mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{InputSpec, RunConfig, Variant};
pub use plot::{ellipse_svg, emit_ellipse, scatter_svg, Ellipse};

use crate::data::{filter_tokens, load_tokens, write_tokens, LoadOptions, TokenTable};
use crate::design::build_design;
use crate::error::{MmoError, Result};
use crate::metrics::{empirical_overlap, modelled_overlap, speaker_cell_points, write_estimates_csv, Measure, OverlapEstimate};
use crate::mixed::{draw_parameters, fit};
use crate::normalize::{lobanov_normalize, speaker_stats, NormalizationPool};
use crate::simulate::{simulate_cell, CellSpec, Sample2D, ScopeSpec};
use crate::synth::{four_dialect_scenarios, generate_corpus, TruthBundle, TruthSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// 64-bit seed for one named use of the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Truth spec of a named synthetic scenario (`default` or a dialect scenario).
pub fn scenario(name: &str) -> Result<TruthSpec> {
    if name == "default" {
        return Ok(TruthSpec::default());
    }
    four_dialect_scenarios()
        .remove(name)
        .ok_or_else(|| MmoError::Config(format!("unknown scenario `{name}`")))
}

/// Filters and normalizes a loaded table.
pub fn prepare_table(table: &TokenTable, cfg: &RunConfig) -> Result<TokenTable> {
    match cfg.normalization_pool() {
        NormalizationPool::FullInventory => {
            let stats = speaker_stats(table)?;
            let (subset, _) = filter_tokens(table, &cfg.filter)?;
            lobanov_normalize(&subset, &stats)
        }
        NormalizationPool::Subset => {
            let (subset, _) = filter_tokens(table, &cfg.filter)?;
            lobanov_normalize(&subset, &speaker_stats(&subset)?)
        }
        NormalizationPool::Precomputed => {
            let (subset, _) = filter_tokens(table, &cfg.filter)?;
            if let Some(i) = subset.tokens.iter().position(|t| t.norm().is_none()) {
                return Err(MmoError::Config(format!("token {i} lacks normalized values")));
            }
            Ok(subset)
        }
    }
}

/// Loads the configured input; synthetic input also returns its truth.
pub fn load_input(cfg: &RunConfig, base_dir: &Path) -> Result<(TokenTable, Option<TruthBundle>)> {
    match &cfg.input {
        InputSpec::Path(p) => {
            let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            let file = fs::File::open(&path)?;
            let opts = LoadOptions {
                max_bad_percent: cfg.max_bad_percent,
            };
            Ok((load_tokens(file, &path.display().to_string(), &cfg.schema, opts)?, None))
        }
        InputSpec::Synth(name) => {
            let bundle = generate_corpus(&scenario(name)?, derive_seed(cfg.seed, "synth"))?;
            Ok((bundle.table.clone(), Some(bundle)))
        }
    }
}

/// One speaker's values in the two contexts for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPair {
    pub speaker: String,
    pub measure: Measure,
    /// Point estimate in the first context of the filter.
    pub first: f64,
    /// Point estimate in the second context.
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSummary {
    pub vowel: String,
    pub context: String,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub ellipse: Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub estimates: Vec<OverlapEstimate>,
    pub speaker_pairs: Vec<SpeakerPair>,
    pub ellipses: Vec<EllipseSummary>,
    /// Speakers left out, with the reason.
    pub skipped: Vec<String>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// Input file checksum, for CSV input.
    pub input_sha256: Option<String>,
    /// Output file name → SHA-256.
    pub files: BTreeMap<String, String>,
    /// Variant name → error message.
    pub failures: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub variants: Vec<VariantReport>,
    pub manifest: Manifest,
}

impl ReportBundle {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn cells(cfg: &RunConfig) -> Vec<CellSpec> {
    let (v0, v1) = &cfg.filter.vowels;
    let (c0, c1) = &cfg.filter.contexts;
    [(c0, v0), (c0, v1), (c1, v0), (c1, v1)]
        .into_iter()
        .map(|(c, v)| CellSpec::new(v, c))
        .collect()
}

fn contexts(cfg: &RunConfig) -> [&str; 2] {
    [&cfg.filter.contexts.0, &cfg.filter.contexts.1]
}

fn pairs_from(estimates: &[OverlapEstimate], cfg: &RunConfig, speakers: &[String]) -> Vec<SpeakerPair> {
    let [c0, c1] = contexts(cfg);
    let mut out = Vec::new();
    for &m in &cfg.measures {
        for s in speakers {
            let get = |c: &str| {
                estimates
                    .iter()
                    .find(|e| e.measure == m && &e.scope == s && e.context == c)
                    .map(|e| e.point)
            };
            if let (Some(first), Some(second)) = (get(c0), get(c1)) {
                out.push(SpeakerPair {
                    speaker: s.clone(),
                    measure: m,
                    first,
                    second,
                });
            }
        }
    }
    out
}

fn summarize_ellipse(cell: &CellSpec, sample: &Sample2D, q: f64) -> Result<EllipseSummary> {
    Ok(EllipseSummary {
        vowel: cell.vowel.clone(),
        context: cell.context.clone(),
        mean: sample.mean(),
        cov: sample.cov(),
        ellipse: emit_ellipse(sample, q)?,
    })
}

fn run_empirical(table: &TokenTable, cfg: &RunConfig, averaged: bool) -> Result<VariantReport> {
    let variant = if averaged { Variant::Averaged } else { Variant::Raw };
    let speakers = table.speakers();
    let vowels = (cfg.filter.vowels.0.as_str(), cfg.filter.vowels.1.as_str());
    let mut estimates = Vec::new();
    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for s in &speakers {
        let mut mine = Vec::new();
        let mut failure = None;
        'outer: for &m in &cfg.measures {
            for c in contexts(cfg) {
                match empirical_overlap(table, m, s, vowels, c, averaged, &cfg.grid) {
                    Ok(e) => mine.push(e),
                    Err(e) => {
                        failure = Some(e.to_string());
                        break 'outer;
                    }
                }
            }
        }
        match failure {
            Some(reason) => skipped.push(format!("{s}: {reason}")),
            None => {
                estimates.extend(mine);
                kept.push(s.clone());
            }
        }
    }
    if kept.is_empty() {
        return Err(MmoError::Config(format!("{variant}: no speaker has enough tokens")));
    }
    let mut ellipses = Vec::new();
    for cell in cells(cfg) {
        let mut pts = Vec::new();
        for s in &kept {
            pts.extend(speaker_cell_points(table, s, &cell.vowel, &cell.context, averaged)?);
        }
        ellipses.push(summarize_ellipse(&cell, &Sample2D::new(pts), cfg.ellipse_quantile)?);
    }
    Ok(VariantReport {
        variant,
        speaker_pairs: pairs_from(&estimates, cfg, &kept),
        estimates,
        ellipses,
        skipped,
        converged: None,
    })
}

fn run_modelled(table: &TokenTable, cfg: &RunConfig, variant: Variant) -> Result<VariantReport> {
    let (structure, response) = variant.model().expect("modelled variant");
    let spec = crate::design::ModelSpec::new(
        structure,
        response,
        (&cfg.filter.vowels.0, &cfg.filter.vowels.1),
        (&cfg.filter.contexts.0, &cfg.filter.contexts.1),
    );
    let design = build_design(table, &spec)?;
    let model = fit(&design, &cfg.fit)?;
    let name = variant.name();
    let draws = draw_parameters(&model, &design, cfg.reps, derive_seed(cfg.seed, &format!("{name}/draws")))?;
    let speakers = model.random_effects.speaker_labels.clone();
    let cells = cells(cfg);
    let mut estimates = Vec::new();
    for &m in &cfg.measures {
        for (k, ctx) in contexts(cfg).into_iter().enumerate() {
            let pair = (&cells[2 * k], &cells[2 * k + 1]);
            let scopes = std::iter::once(ScopeSpec::average()).chain(speakers.iter().map(|s| ScopeSpec::speaker(s)));
            for scope in scopes {
                let label = format!("{name}/{}/{ctx}/{}", m.name(), scope.label());
                estimates.push(modelled_overlap(
                    &model,
                    &draws,
                    m,
                    pair,
                    &scope,
                    cfg.draws_per_rep,
                    derive_seed(cfg.seed, &label),
                    &cfg.grid,
                )?);
            }
        }
    }
    let point = model.estimate();
    let mut ellipses = Vec::new();
    for cell in &cells {
        let seed = derive_seed(cfg.seed, &format!("{name}/ellipse/{}", cell.label()));
        let sample = simulate_cell(&model, cell, &ScopeSpec::average(), cfg.draws_per_rep, &point, seed)?;
        ellipses.push(summarize_ellipse(cell, &sample, cfg.ellipse_quantile)?);
    }
    Ok(VariantReport {
        variant,
        speaker_pairs: pairs_from(&estimates, cfg, &speakers),
        estimates,
        ellipses,
        skipped: Vec::new(),
        converged: Some(model.converged),
    })
}

/// Runs one variant on a prepared table.
pub fn run_variant(table: &TokenTable, cfg: &RunConfig, variant: Variant) -> Result<VariantReport> {
    match variant {
        Variant::Raw => run_empirical(table, cfg, false),
        Variant::Averaged => run_empirical(table, cfg, true),
        v => run_modelled(table, cfg, v),
    }
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

fn csv_bytes<F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        f(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

fn variant_files(r: &VariantReport, cfg: &RunConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let name = r.variant.name();
    let [c0, c1] = contexts(cfg);
    let mut files = Vec::new();

    let mut buf = Vec::new();
    write_estimates_csv(&r.estimates, &mut buf)?;
    files.push((format!("overlap_{name}.csv"), buf));

    for &m in &cfg.measures {
        let pairs: Vec<&SpeakerPair> = r.speaker_pairs.iter().filter(|p| p.measure == m).collect();
        let csv = csv_bytes(|w| {
            w.write_record(["speaker", "measure", c0, c1, "method"])?;
            for p in &pairs {
                w.write_record([p.speaker.as_str(), m.name(), &p.first.to_string(), &p.second.to_string(), name])?;
            }
            Ok(())
        })?;
        files.push((format!("speakers_{name}_{}.csv", m.name()), csv));
        let pts: Vec<(String, f64, f64)> = pairs.iter().map(|p| (p.speaker.clone(), p.second, p.first)).collect();
        let title = format!("{name}: {} by speaker", m.name());
        files.push((
            format!("speakers_{name}_{}.svg", m.name()),
            scatter_svg(&title, c1, c0, &pts).into_bytes(),
        ));
    }

    let csv = csv_bytes(|w| {
        w.write_record([
            "vowel", "context", "mean_f1", "mean_f2", "var_f1", "cov_f1_f2", "var_f2", "semi_major", "semi_minor", "angle",
            "quantile", "method",
        ])?;
        for e in &r.ellipses {
            let nums = [
                e.mean[0],
                e.mean[1],
                e.cov[0][0],
                e.cov[0][1],
                e.cov[1][1],
                e.ellipse.semi_axes[0],
                e.ellipse.semi_axes[1],
                e.ellipse.angle,
                e.ellipse.quantile,
            ]
            .map(|v| v.to_string());
            let mut row = vec![e.vowel.clone(), e.context.clone()];
            row.extend(nums);
            row.push(name.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })?;
    files.push((format!("ellipses_{name}.csv"), csv));
    let items: Vec<(String, Ellipse)> = r
        .ellipses
        .iter()
        .map(|e| (format!("{} {}", e.vowel, e.context), e.ellipse))
        .collect();
    files.push((format!("ellipses_{name}.svg"), ellipse_svg(&format!("{name} cells"), &items).into_bytes()));
    Ok(files)
}

/// Executes every configured variant and writes the report files to `out`.
/// `base_dir` anchors a relative input path.
pub fn run_pipeline(cfg: &RunConfig, base_dir: &Path, out: &Path) -> Result<ReportBundle> {
    cfg.validate()?;
    let (raw, truth) = load_input(cfg, base_dir)?;
    let input_sha256 = match &cfg.input {
        InputSpec::Path(p) => {
            let path: PathBuf = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
            Some(sha256_hex(&fs::read(path)?))
        }
        InputSpec::Synth(_) => None,
    };
    let table = prepare_table(&raw, cfg)?;

    let results: Vec<(Variant, Result<VariantReport>)> = cfg
        .variants
        .par_iter()
        .map(|&v| (v, run_variant(&table, cfg, v)))
        .collect();

    fs::create_dir_all(out)?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut failures = BTreeMap::new();
    let mut variants = Vec::new();
    for (v, r) in results {
        match r {
            Ok(r) => {
                files.extend(variant_files(&r, cfg)?);
                variants.push(r);
            }
            Err(e) => {
                log::error!("variant {v} failed: {e}");
                failures.insert(v.name().to_string(), e.to_string());
            }
        }
    }
    let mut tokens = Vec::new();
    write_tokens(&table, &mut tokens)?;
    files.push(("tokens.csv".into(), tokens));
    if let Some(t) = &truth {
        let mut buf = Vec::new();
        t.write_truth_json(&mut buf)?;
        files.push(("truth.json".into(), buf));
    }
    #[derive(Serialize)]
    struct Report<'a> {
        schema_version: u32,
        variants: &'a [VariantReport],
        failures: &'a BTreeMap<String, String>,
    }
    let report = serde_json::to_vec_pretty(&Report {
        schema_version: REPORT_SCHEMA_VERSION,
        variants: &variants,
        failures: &failures,
    })?;
    files.push(("report.json".into(), report));

    for (name, bytes) in &files {
        write_atomic(out, name, bytes)?;
    }
    let manifest = Manifest {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: sha256_hex(&serde_json::to_vec(cfg)?),
        config: cfg.clone(),
        input_sha256,
        files: files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect(),
        failures,
    };
    write_atomic(out, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(ReportBundle {
        schema_version: REPORT_SCHEMA_VERSION,
        variants,
        manifest,
    })
}

/// Reruns the configuration stored in a manifest.
pub fn rerun_manifest(manifest_json: &str, base_dir: &Path, out: &Path) -> Result<ReportBundle> {
    let m: Manifest = serde_json::from_str(manifest_json)?;
    if m.schema_version != REPORT_SCHEMA_VERSION {
        return Err(MmoError::Config(format!("manifest schema {} is not supported", m.schema_version)));
    }
    run_pipeline(&m.config, base_dir, out)
}
