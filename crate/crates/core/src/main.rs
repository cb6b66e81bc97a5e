//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use mmo::data::{write_tokens, FilterSpec, LoadOptions, SchemaMap};
use mmo::design::{build_design, ModelSpec, Response, Structure};
use mmo::metrics::{modelled_overlap, write_estimates_csv, GridConfig, Measure};
use mmo::mixed::{draw_parameters, fit, FitConfig, FittedModel};
use mmo::normalize::NormalizationPool;
use mmo::pipeline::{self, derive_seed, write_atomic, InputSpec, RunConfig, Variant};
use mmo::simulate::{simulate_cell, write_samples_csv, CellSpec, ScopeSpec};
use mmo::synth::generate_corpus;
use mmo::{MmoError, Result};

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.trim().into(), b.trim().into())),
        _ => Err(format!("expected two comma-separated labels, got `{s}`")),
    }
}

#[derive(Parser)]
#[command(name = "mmo", version, about = "Modelled multivariate overlap of vowel categories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured variant and write the report.
    Run {
        /// TOML run configuration.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        /// Manifest of an earlier run to reproduce.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic corpus and its truth sidecar.
    Synth {
        /// `default`, `us-south-like`, `north-america-like`, `southern-england-like` or `scottish-like`.
        #[arg(long, default_value = "default")]
        scenario: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        tokens_per_speaker: Option<usize>,
        /// Output directory for tokens.csv and truth.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load, filter and normalize a token CSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_pair, default_value = "IH,EH")]
        vowels: (String, String),
        #[arg(long, value_parser = parse_pair, default_value = "nasal,oral")]
        contexts: (String, String),
        #[arg(long, value_parser = parse_enum::<NormalizationPool>, default_value = "full_inventory")]
        normalization: NormalizationPool,
        /// Keep unstressed tokens.
        #[arg(long)]
        include_unstressed: bool,
        #[arg(long, default_value_t = 5.0)]
        max_bad_percent: f64,
    },
    /// Fit a model to normalized tokens.
    Fit {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_enum::<Structure>, default_value = "minimal")]
        structure: Structure,
        #[arg(long, value_parser = parse_enum::<Response>, default_value = "multivariate")]
        response: Response,
        #[arg(long, value_parser = parse_pair, default_value = "IH,EH")]
        vowels: (String, String),
        #[arg(long, value_parser = parse_pair, default_value = "nasal,oral")]
        contexts: (String, String),
    },
    /// Draw points from a cell's predictive distribution at the estimate.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vowel: String,
        #[arg(long)]
        context: String,
        /// Condition on this speaker's effects instead of the average speaker.
        #[arg(long)]
        speaker: Option<String>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicated overlap of the two vowels in each context.
    Measure {
        #[arg(long)]
        model: PathBuf,
        /// The tokens the model was fitted to.
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, value_parser = parse_enum::<Measure>, default_value = "bhattacharyya")]
        measure: Measure,
        #[arg(long)]
        speaker: Option<String>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_path(path: &Path) -> Result<(PathBuf, String)> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| MmoError::Config(format!("`{}` is not a file path", path.display())))?;
    fs::create_dir_all(dir)?;
    Ok((dir.to_path_buf(), name.to_string_lossy().into_owned()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let (dir, name) = split_path(path)?;
    write_atomic(&dir, &name, bytes)
}

fn read_tokens(path: &Path) -> Result<mmo::data::TokenTable> {
    mmo::data::load_tokens(fs::File::open(path)?, &path.display().to_string(), &SchemaMap::default(), LoadOptions::default())
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, manifest, out, seed } => {
            let (mut cfg, base) = match (config, manifest) {
                (Some(path), _) => (RunConfig::from_toml(&fs::read_to_string(&path)?)?, base_of(&path)),
                (None, Some(path)) => {
                    let m: pipeline::Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
                    (m.config, base_of(&path))
                }
                (None, None) => return Err(MmoError::Config("--config or --manifest is required".into())),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| MmoError::Config("no output directory (--out or output_dir)".into()))?;
            // pin the input to an absolute path so the manifest reruns from anywhere
            if let InputSpec::Path(p) = &cfg.input {
                if p.is_relative() {
                    cfg.input = InputSpec::Path(fs::canonicalize(base.join(p))?);
                }
            }
            let bundle = pipeline::run_pipeline(&cfg, &base, &out)?;
            for (variant, err) in &bundle.manifest.failures {
                eprintln!("variant {variant} failed: {err}");
            }
            println!("wrote {} files to {}", bundle.manifest.files.len() + 1, out.display());
            if bundle.variants.is_empty() {
                return Err(MmoError::Config("every variant failed".into()));
            }
            Ok(())
        }
        Command::Synth {
            scenario,
            seed,
            speakers,
            tokens_per_speaker,
            out,
        } => {
            let mut spec = pipeline::scenario(&scenario)?;
            spec.n_speakers = speakers.unwrap_or(spec.n_speakers);
            spec.tokens_per_speaker = tokens_per_speaker.unwrap_or(spec.tokens_per_speaker);
            let bundle = generate_corpus(&spec, seed)?;
            fs::create_dir_all(&out)?;
            let mut tokens = Vec::new();
            write_tokens(&bundle.table, &mut tokens)?;
            write_atomic(&out, "tokens.csv", &tokens)?;
            let mut truth = Vec::new();
            bundle.write_truth_json(&mut truth)?;
            write_atomic(&out, "truth.json", &truth)?;
            Ok(())
        }
        Command::Ingest {
            input,
            out,
            vowels,
            contexts,
            normalization,
            include_unstressed,
            max_bad_percent,
        } => {
            let mut cfg = RunConfig::new(InputSpec::Path(input.clone()), 0, vec![Variant::Raw]);
            cfg.filter = FilterSpec::new((&vowels.0, &vowels.1), (&contexts.0, &contexts.1));
            cfg.filter.require_stressed = !include_unstressed;
            cfg.normalization = Some(normalization);
            cfg.max_bad_percent = max_bad_percent;
            let (raw, _) = pipeline::load_input(&cfg, Path::new(""))?;
            let table = pipeline::prepare_table(&raw, &cfg)?;
            let mut buf = Vec::new();
            write_tokens(&table, &mut buf)?;
            write_file(&out, &buf)
        }
        Command::Fit {
            tokens,
            out,
            structure,
            response,
            vowels,
            contexts,
        } => {
            let table = read_tokens(&tokens)?;
            let spec = ModelSpec::new(structure, response, (&vowels.0, &vowels.1), (&contexts.0, &contexts.1));
            let design = build_design(&table, &spec)?;
            let model = fit(&design, &FitConfig::default())?;
            if !model.converged {
                eprintln!("warning: optimizer did not converge (gradient norm {:.3e})", model.gradient_norm);
            }
            write_file(&out, model.to_json()?.as_bytes())
        }
        Command::Simulate {
            model,
            vowel,
            context,
            speaker,
            n,
            seed,
            out,
        } => {
            let model = FittedModel::from_json(&fs::read_to_string(model)?)?;
            let scope = speaker.as_deref().map_or_else(ScopeSpec::average, ScopeSpec::speaker);
            let sample = simulate_cell(&model, &CellSpec::new(&vowel, &context), &scope, n, &model.estimate(), seed)?;
            let mut buf = Vec::new();
            write_samples_csv(&[sample], &mut buf)?;
            write_file(&out, &buf)
        }
        Command::Measure {
            model,
            tokens,
            measure,
            speaker,
            reps,
            draws,
            seed,
            out,
        } => {
            let model = FittedModel::from_json(&fs::read_to_string(model)?)?;
            let table = read_tokens(&tokens)?;
            let design = build_design(&table, &model.spec)?;
            let params = draw_parameters(&model, &design, reps, derive_seed(seed, "draws"))?;
            let scope = speaker.as_deref().map_or_else(ScopeSpec::average, ScopeSpec::speaker);
            let (v0, v1) = model.spec.vowel_levels.clone();
            let mut estimates = Vec::new();
            for ctx in [&model.spec.context_levels.0, &model.spec.context_levels.1] {
                let cells = (CellSpec::new(&v0, ctx), CellSpec::new(&v1, ctx));
                let label = format!("{}/{ctx}/{}", measure.name(), scope.label());
                estimates.push(modelled_overlap(
                    &model,
                    &params,
                    measure,
                    (&cells.0, &cells.1),
                    &scope,
                    draws,
                    derive_seed(seed, &label),
                    &GridConfig::default(),
                )?);
            }
            let mut buf = Vec::new();
            write_estimates_csv(&estimates, &mut buf)?;
            write_file(&out, &buf)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
