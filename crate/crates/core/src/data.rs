//! Token data model, CSV ingestion and analysis-subset filtering.
//!
//! One CSV row is one vowel token. Rows whose numeric fields fail to parse or
//! violate the token invariants are rejected; a load fails outright when the
//! rejected share exceeds the configured limit, otherwise the rejected count
//! is kept in the table's provenance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{MmoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VowelToken {
    pub speaker: String,
    pub word: String,
    pub vowel: String,
    pub context: String,
    pub f1_hz: f64,
    pub f2_hz: f64,
    pub duration_s: f64,
    pub following_segment: String,
    pub stressed: bool,
    pub f1_norm: Option<f64>,
    pub f2_norm: Option<f64>,
}

impl VowelToken {
    /// Normalized (F1, F2), if normalization has run.
    pub fn norm(&self) -> Option<[f64; 2]> {
        Some([self.f1_norm?, self.f2_norm?])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub rows_read: usize,
    pub rows_rejected: usize,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenTable {
    pub tokens: Vec<VowelToken>,
    pub provenance: Provenance,
}

impl TokenTable {
    pub fn new(tokens: Vec<VowelToken>, source: impl Into<String>) -> Self {
        let rows_read = tokens.len();
        TokenTable {
            tokens,
            provenance: Provenance {
                source: source.into(),
                rows_read,
                ..Provenance::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.tokens
            .iter()
            .filter(|t| seen.insert(t.speaker.as_str()))
            .map(|t| t.speaker.clone())
            .collect()
    }

    pub fn with_step(mut self, step: impl Into<String>) -> Self {
        self.provenance.steps.push(step.into());
        self
    }
}

/// Column names for each required field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMap {
    pub speaker: String,
    pub word: String,
    pub vowel: String,
    pub context: String,
    pub f1: String,
    pub f2: String,
    pub duration: String,
    pub following: String,
    pub stressed: String,
    /// Optional pre-normalized columns, read when present in the header.
    pub f1_norm: String,
    pub f2_norm: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            speaker: "speaker".into(),
            word: "word".into(),
            vowel: "vowel".into(),
            context: "context".into(),
            f1: "f1".into(),
            f2: "f2".into(),
            duration: "duration".into(),
            following: "following".into(),
            stressed: "stressed".into(),
            f1_norm: "f1_norm".into(),
            f2_norm: "f2_norm".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Largest tolerated share of rejected rows, in percent.
    pub max_bad_percent: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_bad_percent: 5.0,
        }
    }
}

struct ColumnIndex {
    speaker: usize,
    word: usize,
    vowel: usize,
    context: usize,
    f1: usize,
    f2: usize,
    duration: usize,
    following: usize,
    stressed: usize,
    f1_norm: Option<usize>,
    f2_norm: Option<usize>,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, schema: &SchemaMap) -> Result<Self> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let req = |name: &str| find(name).ok_or_else(|| MmoError::MissingColumn(name.to_string()));
        Ok(ColumnIndex {
            speaker: req(&schema.speaker)?,
            word: req(&schema.word)?,
            vowel: req(&schema.vowel)?,
            context: req(&schema.context)?,
            f1: req(&schema.f1)?,
            f2: req(&schema.f2)?,
            duration: req(&schema.duration)?,
            following: req(&schema.following)?,
            stressed: req(&schema.stressed)?,
            f1_norm: find(&schema.f1_norm),
            f2_norm: find(&schema.f2_norm),
        })
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" | "y" => Some(true),
        "0" | "false" | "f" | "no" | "n" => Some(false),
        _ => None,
    }
}

fn parse_row(rec: &csv::StringRecord, cols: &ColumnIndex) -> std::result::Result<VowelToken, String> {
    let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let raw = field(i);
        let v: f64 = raw.parse().map_err(|_| format!("unparseable {name} `{raw}`"))?;
        if !v.is_finite() {
            return Err(format!("non-finite {name}"));
        }
        Ok(v)
    };
    let opt_num = |i: Option<usize>, name: &str| -> std::result::Result<Option<f64>, String> {
        match i {
            Some(i) if !field(i).is_empty() && field(i) != "NA" => num(i, name).map(Some),
            _ => Ok(None),
        }
    };

    let f1_hz = num(cols.f1, "f1")?;
    let f2_hz = num(cols.f2, "f2")?;
    let duration_s = num(cols.duration, "duration")?;
    if f1_hz <= 0.0 || f2_hz <= 0.0 {
        return Err("nonpositive formant".into());
    }
    if duration_s <= 0.0 {
        return Err("nonpositive duration".into());
    }
    if f2_hz <= f1_hz {
        return Err("f2 not above f1".into());
    }
    let stressed = parse_bool(field(cols.stressed))
        .ok_or_else(|| format!("unparseable stressed `{}`", field(cols.stressed)))?;
    for (i, name) in [
        (cols.speaker, "speaker"),
        (cols.word, "word"),
        (cols.vowel, "vowel"),
        (cols.context, "context"),
    ] {
        if field(i).is_empty() {
            return Err(format!("empty {name}"));
        }
    }
    Ok(VowelToken {
        speaker: field(cols.speaker).to_string(),
        word: field(cols.word).to_string(),
        vowel: field(cols.vowel).to_string(),
        context: field(cols.context).to_string(),
        f1_hz,
        f2_hz,
        duration_s,
        following_segment: field(cols.following).to_string(),
        stressed,
        f1_norm: opt_num(cols.f1_norm, "f1_norm")?,
        f2_norm: opt_num(cols.f2_norm, "f2_norm")?,
    })
}

/// Reads a token CSV. Bad rows are dropped and counted unless they exceed
/// `opts.max_bad_percent` of the data rows.
pub fn load_tokens<R: Read>(
    source: R,
    source_name: &str,
    schema: &SchemaMap,
    opts: LoadOptions,
) -> Result<TokenTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let cols = ColumnIndex::resolve(reader.headers()?, schema)?;

    let mut tokens = Vec::new();
    let mut bad: Vec<MmoError> = Vec::new();
    let mut total = 0usize;
    for (i, rec) in reader.records().enumerate() {
        total += 1;
        // header is line 1
        let line = i + 2;
        match rec {
            Ok(rec) => match parse_row(&rec, &cols) {
                Ok(tok) => tokens.push(tok),
                Err(reason) => bad.push(MmoError::BadRow { line, reason }),
            },
            Err(e) => bad.push(MmoError::BadRow {
                line,
                reason: e.to_string(),
            }),
        }
    }

    if total > 0 && (bad.len() as f64) * 100.0 > opts.max_bad_percent * total as f64 {
        return Err(MmoError::TooManyBadRows {
            bad: bad.len(),
            total,
            limit: opts.max_bad_percent,
            first: bad[0].to_string(),
        });
    }
    if !bad.is_empty() {
        log::warn!("{source_name}: dropped {} of {} rows ({})", bad.len(), total, bad[0]);
    }
    Ok(TokenTable {
        tokens,
        provenance: Provenance {
            source: source_name.to_string(),
            rows_read: total,
            rows_rejected: bad.len(),
            steps: Vec::new(),
        },
    })
}

/// Writes tokens with the default column names. Floats use the shortest
/// representation that parses back to the identical value.
pub fn write_tokens<W: Write>(table: &TokenTable, sink: W) -> Result<()> {
    let schema = SchemaMap::default();
    let mut w = csv::Writer::from_writer(sink);
    let with_norm = table.tokens.iter().any(|t| t.norm().is_some());
    let mut header = vec![
        schema.speaker.as_str(),
        &schema.word,
        &schema.vowel,
        &schema.context,
        &schema.f1,
        &schema.f2,
        &schema.duration,
        &schema.following,
        &schema.stressed,
    ];
    if with_norm {
        header.push(&schema.f1_norm);
        header.push(&schema.f2_norm);
    }
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".to_string());
    for t in &table.tokens {
        let mut row = vec![
            t.speaker.clone(),
            t.word.clone(),
            t.vowel.clone(),
            t.context.clone(),
            t.f1_hz.to_string(),
            t.f2_hz.to_string(),
            t.duration_s.to_string(),
            t.following_segment.clone(),
            if t.stressed { "1" } else { "0" }.to_string(),
        ];
        if with_norm {
            row.push(opt(t.f1_norm));
            row.push(opt(t.f2_norm));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub vowels: (String, String),
    pub contexts: (String, String),
    #[serde(default = "default_true")]
    pub require_stressed: bool,
    #[serde(default)]
    pub word_allowlist: Option<BTreeSet<String>>,
}

fn default_true() -> bool {
    true
}

impl FilterSpec {
    pub fn new(vowels: (&str, &str), contexts: (&str, &str)) -> Self {
        FilterSpec {
            vowels: (vowels.0.into(), vowels.1.into()),
            contexts: (contexts.0.into(), contexts.1.into()),
            require_stressed: true,
            word_allowlist: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vowels.0 == self.vowels.1 {
            return Err(MmoError::InvalidFilter("vowels must differ".into()));
        }
        if self.contexts.0 == self.contexts.1 {
            return Err(MmoError::InvalidFilter("contexts must differ".into()));
        }
        Ok(())
    }

    pub fn matches(&self, t: &VowelToken) -> bool {
        (t.vowel == self.vowels.0 || t.vowel == self.vowels.1)
            && (t.context == self.contexts.0 || t.context == self.contexts.1)
            && (!self.require_stressed || t.stressed)
            && self
                .word_allowlist
                .as_ref()
                .is_none_or(|allow| allow.contains(&t.word))
    }

    fn describe(&self) -> String {
        format!(
            "filter vowels={}/{} contexts={}/{} stressed={} allowlist={}",
            self.vowels.0,
            self.vowels.1,
            self.contexts.0,
            self.contexts.1,
            self.require_stressed,
            self.word_allowlist.as_ref().map_or(0, |a| a.len())
        )
    }
}

/// A global vowel × context cell with no tokens after filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmptyCell {
    pub vowel: String,
    pub context: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    /// Token counts per (speaker, vowel, context).
    pub counts: BTreeMap<(String, String, String), usize>,
    pub empty_cells: Vec<EmptyCell>,
}

pub fn filter_tokens(table: &TokenTable, spec: &FilterSpec) -> Result<(TokenTable, FilterReport)> {
    spec.validate()?;
    let tokens: Vec<VowelToken> = table.tokens.iter().filter(|t| spec.matches(t)).cloned().collect();
    if tokens.is_empty() {
        return Err(MmoError::EmptyResult);
    }

    let mut report = FilterReport::default();
    for t in &tokens {
        *report
            .counts
            .entry((t.speaker.clone(), t.vowel.clone(), t.context.clone()))
            .or_default() += 1;
    }
    for v in [&spec.vowels.0, &spec.vowels.1] {
        for c in [&spec.contexts.0, &spec.contexts.1] {
            if !tokens.iter().any(|t| &t.vowel == v && &t.context == c) {
                log::warn!("no tokens for vowel {v} in context {c}");
                report.empty_cells.push(EmptyCell {
                    vowel: v.clone(),
                    context: c.clone(),
                });
            }
        }
    }

    let mut provenance = table.provenance.clone();
    let step = spec.describe();
    if provenance.steps.last() != Some(&step) {
        provenance.steps.push(step);
    }
    Ok((TokenTable { tokens, provenance }, report))
}
