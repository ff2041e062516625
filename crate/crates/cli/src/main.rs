//! `gom`: tabulate records, fit a grade-of-membership model from moments,
//! predict conditional membership, synthesize data, and replay the worked
//! example.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use gom_core::estimator::{fit, predict, FitConfig, FittedModel, Normalization};
use gom_core::io::{read_sample_csv, to_json_pretty, write_sample_csv, ModelDoc, MomentTableFile, SchemeFile};
use gom_core::moment_matrix::{BasisSelection, RankSearch};
use gom_core::oracle::{exact_ell_moments, random_model, sample, three_point_model, DiscreteLatentModel, ModelFile};
use gom_core::tables::{check_summation, tabulate_parallel, to_frequencies, MomentTable};
use gom_core::verify::verify_example;
use gom_core::{Arithmetic, CellIndex, GomError, Rational, Scalar, Scheme};

const REPORT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "gom", version, about = "Moment-based grade-of-membership estimation")]
struct Cli {
    /// Worker threads for tabulation and per-cell solves.
    #[arg(long, global = true, env = "GOM_THREADS", default_value_t = 1)]
    threads: usize,
    /// Leave wall-clock fields out of the run report.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Write the run report here instead of stderr.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count cells of a record file and write the frequency table.
    Tabulate(TabulateArgs),
    /// Fit from records or a moment table and write the model.
    Fit(FitArgs),
    /// Conditional moments of G at one cell of a fitted model.
    Predict(PredictArgs),
    /// Draw records (and optionally exact moments) from a discrete model.
    Synth(SynthArgs),
    /// Recompute the three-point worked example and compare every value.
    VerifyExample(VerifyArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Record CSV with a header row.
    #[arg(long, conflicts_with = "moments")]
    input: Option<PathBuf>,
    /// Scheme JSON `{"outcomes": [..]}`; inferred from the data if absent.
    #[arg(long)]
    scheme: Option<PathBuf>,
    /// Moment or frequency table JSON instead of records.
    #[arg(long)]
    moments: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TabulateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_order: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    source: InputArgs,
    #[arg(long, default_value = "rational")]
    arithmetic: Arithmetic,
    /// Fix K instead of estimating the rank.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    refine: bool,
    #[arg(long, default_value_t = 50)]
    refine_max_iters: usize,
    #[arg(long, default_value = "lambda0")]
    normalization: Normalization,
    /// Basis columns as cells separated by `;`, e.g. `0,0,0;0,0,2`.
    #[arg(long)]
    basis_columns: Option<String>,
    #[arg(long, default_value_t = 3)]
    max_order: usize,
    #[arg(long, default_value_t = 2)]
    column_order: usize,
    #[arg(long)]
    rank_tol: Option<f64>,
    #[arg(long)]
    completion_tol: Option<f64>,
    #[arg(long)]
    lambda0_tol: Option<f64>,
    #[arg(long)]
    exhaustive_rank: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Outcome per measurement, 0 for unobserved, e.g. `1,0,0`.
    #[arg(long)]
    cell: String,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Latent model JSON (outcomes, points, weights).
    #[arg(long, conflicts_with_all = ["example", "random"])]
    model: Option<PathBuf>,
    /// The three-point model on outcomes (2,2,2).
    #[arg(long, conflicts_with = "random")]
    example: bool,
    /// A random general-position model; needs --outcomes and --k.
    #[arg(long, requires_all = ["outcomes", "k"])]
    random: bool,
    /// Outcome counts, e.g. `2,3,2`.
    #[arg(long)]
    outcomes: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Number of records; no sample is drawn without it.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample CSV destination (stdout if absent).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write exact moments up to --max-order here.
    #[arg(long)]
    moments_out: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_order: usize,
    /// Also write the latent model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Status {
    code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct RunReport {
    format_version: u32,
    command: String,
    args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    started_unix_ms: Option<u128>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_ms: Option<f64>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Value::is_null")]
    diagnostics: Value,
    status: Status,
}

/// What a command hands back to the report.
#[derive(Default)]
struct Outcome {
    config: Option<Value>,
    outputs: Vec<String>,
    diagnostics: Value,
    code: u8,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: GomError,
    diagnostics: Value,
}

impl From<GomError> for Failure {
    fn from(error: GomError) -> Self {
        let code = if error.is_identification_failure() { 3 } else { 2 };
        Failure {
            code,
            error,
            diagnostics: Value::Null,
        }
    }
}

type CmdResult = std::result::Result<Outcome, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = SystemTime::now();
    let clock = Instant::now();
    let (name, result) = match &cli.command {
        Command::Tabulate(a) => ("tabulate", cmd_tabulate(a, cli.threads)),
        Command::Fit(a) => ("fit", cmd_fit(a, cli.threads)),
        Command::Predict(a) => ("predict", cmd_predict(a)),
        Command::Synth(a) => ("synth", cmd_synth(a)),
        Command::VerifyExample(a) => ("verify-example", cmd_verify(a)),
    };
    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(f) => {
            eprintln!("error: {}", f.error);
            (
                Outcome {
                    diagnostics: f.diagnostics,
                    code: f.code,
                    ..Outcome::default()
                },
                Some(f.error.to_string()),
            )
        }
    };
    let report = RunReport {
        format_version: REPORT_VERSION,
        command: name.to_string(),
        args: std::env::args().skip(1).collect(),
        config: outcome.config,
        started_unix_ms: (!cli.no_timestamp)
            .then(|| started.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)),
        elapsed_ms: (!cli.no_timestamp).then(|| clock.elapsed().as_secs_f64() * 1e3),
        outputs: outcome.outputs,
        diagnostics: outcome.diagnostics,
        status: Status {
            code: outcome.code,
            error,
        },
    };
    match to_json_pretty(&report) {
        Ok(text) => match &cli.report {
            Some(path) => {
                if let Err(e) = fs::write(path, text) {
                    eprintln!("error: cannot write report {}: {e}", path.display());
                }
            }
            None => eprint!("{text}"),
        },
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(outcome.code)
}

/// Write to `path` or stdout; returns the path label for the report.
fn emit(path: Option<&Path>, text: &str) -> Result<Option<String>, GomError> {
    match path {
        Some(p) => {
            fs::write(p, text)?;
            Ok(Some(p.display().to_string()))
        }
        None => {
            print!("{text}");
            Ok(None)
        }
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, GomError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_scheme(path: Option<&PathBuf>) -> Result<Option<Scheme>, GomError> {
    path.map(|p| {
        let file: SchemeFile = read_json(p)?;
        Scheme::new(file.outcomes)
    })
    .transpose()
}

fn parse_list(s: &str) -> Result<Vec<usize>, GomError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| GomError::Parse(format!("bad list '{s}'")))
        })
        .collect()
}

fn cmd_tabulate(a: &TabulateArgs, threads: usize) -> CmdResult {
    let scheme = load_scheme(a.scheme.as_ref())?;
    let (sample, _) = read_sample_csv(fs::File::open(&a.input).map_err(GomError::from)?, scheme.as_ref())?;
    let order = a.max_order.min(sample.scheme().num_measurements());
    let ct = tabulate_parallel(&sample, order, threads)?;
    let summation = check_summation(&to_frequencies::<Rational>(&ct), 0.0);
    let diagnostics = json!({
        "records": ct.n,
        "cells": ct.counts.len(),
        "summation_checked": summation.checked,
        "summation_violations": summation.violations.len(),
    });
    let file = MomentTableFile::from_counts(&ct, Some(summation));
    let outputs = emit(a.output.as_deref(), &to_json_pretty(&file)?)?.into_iter().collect();
    Ok(Outcome {
        outputs,
        diagnostics,
        ..Outcome::default()
    })
}

fn fit_config(a: &FitArgs, threads: usize) -> Result<FitConfig, GomError> {
    let basis = match &a.basis_columns {
        Some(s) => BasisSelection::Columns(
            s.split(';')
                .map(|c| c.parse::<CellIndex>())
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => BasisSelection::Pivoted,
    };
    let cfg = FitConfig {
        k_override: a.k,
        rank_rel_tol: a.rank_tol,
        completion_tol: a.completion_tol,
        lambda0_tol: a.lambda0_tol,
        normalization: a.normalization,
        arithmetic: a.arithmetic,
        refine: a.refine,
        refine_max_iters: a.refine_max_iters,
        max_order: a.max_order,
        column_order: a.column_order,
        rank_search: if a.exhaustive_rank {
            RankSearch::Exhaustive
        } else {
            RankSearch::Greedy
        },
        basis,
        threads,
        ..FitConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_table<T: Scalar>(src: &InputArgs, cfg: &FitConfig) -> Result<MomentTable<T>, GomError> {
    match (&src.input, &src.moments) {
        (Some(input), None) => {
            let scheme = load_scheme(src.scheme.as_ref())?;
            let (sample, _) = read_sample_csv(fs::File::open(input)?, scheme.as_ref())?;
            let order = cfg.max_order.min(sample.scheme().num_measurements());
            let ct = tabulate_parallel(&sample, order, cfg.threads)?;
            Ok(to_frequencies::<T>(&ct))
        }
        (None, Some(path)) => {
            let file: MomentTableFile = read_json(path)?;
            file.to_table::<T>()
        }
        _ => Err(GomError::InvalidArgument("give exactly one of --input and --moments".into())),
    }
}

fn fit_as<T: Scalar>(a: &FitArgs, cfg: &FitConfig) -> CmdResult {
    let table = load_table::<T>(&a.source, cfg)?;
    let model: FittedModel<T> = fit(&table, cfg).map_err(|e| {
        let mut f = Failure::from(e);
        f.diagnostics = json!({ "stage_error": f.error.root().to_string() });
        f
    })?;
    let doc = ModelDoc::from_model(&model);
    let outputs = emit(a.output.as_deref(), &to_json_pretty(&doc)?)?.into_iter().collect();
    let d = &model.diagnostics;
    let diagnostics = json!({
        "k": model.k,
        "estimated_rank": d.estimated_rank,
        "completion_max_residual": d.completion_max_residual,
        "summation_violations": d.summation_violations,
        "main_system_residual": d.main_system_residual,
        "cells_solved": model.conditionals.len(),
        "not_identifiable": d.not_identifiable.len(),
        "zero_probability": d.zero_probability.len(),
        "negative_variance": d.negative_variance.len(),
        "refinement": d.refinement,
    });
    Ok(Outcome {
        config: Some(serde_json::to_value(cfg).map_err(GomError::from)?),
        outputs,
        diagnostics,
        code: 0,
    })
}

fn cmd_fit(a: &FitArgs, threads: usize) -> CmdResult {
    let cfg = fit_config(a, threads)?;
    match cfg.arithmetic {
        Arithmetic::Rational => fit_as::<Rational>(a, &cfg),
        Arithmetic::Float => fit_as::<f64>(a, &cfg),
    }
}

fn predict_as<T: Scalar>(doc: &ModelDoc, cell: &CellIndex) -> Result<Value, GomError> {
    let model: FittedModel<T> = doc.to_model()?;
    let p = predict(&model, cell)?;
    let reprs = |v: &[T]| v.iter().map(Scalar::to_repr).collect::<Vec<_>>();
    let floats = |v: &[T]| v.iter().map(Scalar::to_f64).collect::<Vec<_>>();
    Ok(json!({
        "cell": p.cell,
        "expectation": reprs(&p.expectation),
        "expectation_f64": floats(&p.expectation),
        "variance": p.variance.as_deref().map(reprs),
        "std_dev": p.std_dev(),
        "beta": reprs(&p.beta),
        "anchors": p.anchors.iter().map(|&(j, l)| [j + 1, l]).collect::<Vec<_>>(),
    }))
}

fn cmd_predict(a: &PredictArgs) -> CmdResult {
    let doc: ModelDoc = read_json(&a.model)?;
    let cell: CellIndex = a.cell.parse()?;
    let out = match doc.arithmetic {
        Arithmetic::Rational => predict_as::<Rational>(&doc, &cell),
        Arithmetic::Float => predict_as::<f64>(&doc, &cell),
    }
    .map_err(|e| {
        let code = match e.root() {
            GomError::CellNotIdentifiable { .. } | GomError::Precondition(_) | GomError::ZeroProbability(_) => 4,
            _ if e.is_identification_failure() => 3,
            _ => 2,
        };
        Failure {
            code,
            error: e,
            diagnostics: Value::Null,
        }
    })?;
    let outputs = emit(a.output.as_deref(), &to_json_pretty(&out)?)?.into_iter().collect();
    Ok(Outcome {
        outputs,
        ..Outcome::default()
    })
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let model: DiscreteLatentModel<Rational> = if let Some(path) = &a.model {
        let file: ModelFile = read_json(path)?;
        DiscreteLatentModel::from_file(&file)?
    } else if a.example {
        three_point_model()
    } else if a.random {
        let outcomes = parse_list(a.outcomes.as_deref().unwrap_or_default())?;
        let scheme = Scheme::new(outcomes)?;
        random_model(&scheme, a.k.unwrap_or(1), a.seed, true)?
    } else {
        return Err(GomError::InvalidArgument("give one of --model, --example, --random".into()).into());
    };
    let mut outputs = Vec::new();
    if let Some(path) = &a.model_out {
        fs::write(path, to_json_pretty(&model.to_file())?).map_err(GomError::from)?;
        outputs.push(path.display().to_string());
    }
    if let Some(path) = &a.moments_out {
        let order = a.max_order.min(model.scheme.num_measurements());
        let mt = exact_ell_moments(&model, order);
        fs::write(path, to_json_pretty(&MomentTableFile::from_table(&mt))?).map_err(GomError::from)?;
        outputs.push(path.display().to_string());
    }
    let mut diagnostics = json!({ "k": model.k(), "outcomes": model.scheme.outcomes() });
    if let Some(n) = a.n {
        let s = sample(&model, n, a.seed)?;
        let mut buf = Vec::new();
        write_sample_csv(&mut buf, &s, None)?;
        let text = String::from_utf8(buf).expect("csv is utf-8");
        outputs.extend(emit(a.output.as_deref(), &text)?);
        diagnostics["records"] = json!(n);
    }
    Ok(Outcome {
        outputs,
        diagnostics,
        ..Outcome::default()
    })
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let report = verify_example()?;
    let failures = report.failures();
    for c in &failures {
        eprintln!("MISMATCH {}: expected {}, computed {}", c.name, c.expected, c.computed);
    }
    for c in report.checks.iter().filter(|c| c.note.is_some()) {
        eprintln!("note {}: {}", c.name, c.note.as_deref().unwrap_or_default());
    }
    let diagnostics = json!({
        "checks": report.checks.len(),
        "failed": failures.len(),
    });
    let code = if failures.is_empty() { 0 } else { 1 };
    let outputs = emit(a.output.as_deref(), &to_json_pretty(&report)?)?.into_iter().collect();
    Ok(Outcome {
        outputs,
        diagnostics,
        code,
        ..Outcome::default()
    })
}
