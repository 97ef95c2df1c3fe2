//! Command-line surface shared by the `ctrisk` binary and its tests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Dataset, OutcomeKind};
use crate::eif::{StwcrQuery, StwcrveQuery};
use crate::error::{invalid, Error, Result};
use crate::estimators::{estimate_stwcr, estimate_stwcrve, make_folds, NuisanceSource};
use crate::io::{load_dataset, write_dataset, ColumnMap};
use crate::math::SmoothingParams;
use crate::nuisance::{FeatureSpec, ModelSpecs, PropensitySpec};
use crate::simulation::{
    gen_dataset, run_monte_carlo, run_replications, ScenarioSpec, Scenario, SimConfig, SimQuery, TruthCache,
    DEFAULT_TRUTH_MC_SIZE,
};

/// Version of the JSON documents written by every command.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ctrisk", version, about = "Trimmed, smoothed controlled-risk and vaccine-efficacy estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    EstimateStwcr,
    EstimateStwcrve,
    Simulate,
    Truth,
    EmitDraws,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-fitted STWCR(a, s) on a CSV dataset.
    EstimateStwcr(Options),
    /// Cross-fitted STWCRVE(a1, a0, s1, s0) on a CSV dataset.
    EstimateStwcrve(Options),
    /// Monte Carlo bias and coverage on a simulated scenario.
    Simulate(Options),
    /// Compute ground-truth values into the truth cache.
    Truth(Options),
    /// Write simulated draws as CSV.
    EmitDraws(Options),
}

impl Command {
    pub fn split(self) -> (CommandKind, Options) {
        match self {
            Command::EstimateStwcr(o) => (CommandKind::EstimateStwcr, o),
            Command::EstimateStwcrve(o) => (CommandKind::EstimateStwcrve, o),
            Command::Simulate(o) => (CommandKind::Simulate, o),
            Command::Truth(o) => (CommandKind::Truth, o),
            Command::EmitDraws(o) => (CommandKind::EmitDraws, o),
        }
    }
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::EstimateStwcr => "estimate-stwcr",
            CommandKind::EstimateStwcrve => "estimate-stwcrve",
            CommandKind::Simulate => "simulate",
            CommandKind::Truth => "truth",
            CommandKind::EmitDraws => "emit-draws",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Every option, usable as a flag or as a key of the `--config` JSON file.
/// Flags override the file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// JSON file with any of these options (kebab-case keys).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,

    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long)]
    pub a_col: Option<String>,
    #[arg(long)]
    pub s_col: Option<String>,
    #[arg(long)]
    pub b_col: Option<String>,
    /// Comma-separated covariate columns (default: every x<k> column).
    #[arg(long)]
    pub x_cols: Option<String>,
    #[arg(long, value_parser = parse_outcome_kind)]
    pub outcome_kind: Option<OutcomeKind>,

    #[arg(long)]
    pub a: Option<u8>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub a1: Option<u8>,
    #[arg(long)]
    pub a0: Option<u8>,
    #[arg(long)]
    pub s1: Option<f64>,
    #[arg(long)]
    pub s0: Option<f64>,

    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub h0: Option<f64>,
    #[arg(long)]
    pub h1: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub quad_nodes: Option<usize>,
    /// Kernel truncation radius in bandwidths.
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,

    /// Use this constant propensity P(A = 1).
    #[arg(long)]
    pub known_propensity: Option<f64>,
    /// Fit a logistic propensity on these features instead, e.g. "1,b,x1".
    #[arg(long)]
    pub logistic_propensity: Option<String>,
    #[arg(long)]
    pub density_spec: Option<String>,
    #[arg(long)]
    pub outcome_spec: Option<String>,

    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// `stwcr:a:s` or `stwcrve:a1:a0:s1:s0`; repeatable.
    #[arg(long = "query")]
    pub queries: Option<Vec<String>>,
    #[arg(long)]
    pub truth_cache: Option<PathBuf>,
    #[arg(long)]
    pub truth_mc_size: Option<usize>,
    #[arg(long)]
    pub truth_seed: Option<u64>,
    /// Also write per-replication estimates here (simulate).
    #[arg(long)]
    pub draws_out: Option<PathBuf>,
    /// Write every column instead of (b, s, a, x1) (emit-draws).
    #[arg(long)]
    pub all_columns: Option<bool>,

    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

fn parse_outcome_kind(s: &str) -> std::result::Result<OutcomeKind, String> {
    match s {
        "binary" => Ok(OutcomeKind::Binary),
        "continuous" => Ok(OutcomeKind::Continuous),
        other => Err(format!("expected binary or continuous, got '{other}'")),
    }
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($field:ident),+ $(,)?) => {
        Options { config: $hi.config, $($field: $hi.$field.or($lo.$field)),+ }
    };
}

impl Options {
    /// Fills unset fields from `file`.
    pub fn overlay(self, file: Options) -> Options {
        overlay!(
            self, file, threads, input, y_col, a_col, s_col, b_col, x_cols, outcome_kind, a, s, a1, a0, s1, s0, t,
            epsilon, h, h0, h1, alpha, quad_nodes, window, folds, seed, known_propensity, logistic_propensity,
            density_spec, outcome_spec, scenario, n, reps, queries, truth_cache, truth_mc_size, truth_seed,
            draws_out, all_columns, out, format,
        )
    }

    pub fn params(&self) -> Result<SmoothingParams> {
        let d = SmoothingParams::default();
        let p = SmoothingParams {
            t: self.t.unwrap_or(d.t),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            h: self.h.unwrap_or(d.h),
            h0: self.h0.unwrap_or(d.h0),
            h1: self.h1.unwrap_or(d.h1),
            alpha: self.alpha.unwrap_or(d.alpha),
            quad_nodes: self.quad_nodes.unwrap_or(d.quad_nodes),
            window_halfwidth_in_h: self.window.unwrap_or(d.window_halfwidth_in_h),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn models(&self) -> Result<ModelSpecs> {
        let d = ModelSpecs::default();
        let propensity = match (&self.known_propensity, &self.logistic_propensity) {
            (Some(_), Some(_)) => return Err(invalid("give either --known-propensity or --logistic-propensity")),
            (Some(p), None) => PropensitySpec::Known(*p),
            (None, Some(spec)) => PropensitySpec::Logistic(spec.parse()?),
            (None, None) => d.propensity,
        };
        let spec = |v: &Option<String>, fallback: FeatureSpec| -> Result<FeatureSpec> {
            v.as_deref().map(str::parse).transpose().map(|s| s.unwrap_or(fallback))
        };
        Ok(ModelSpecs {
            propensity,
            cond_density: spec(&self.density_spec, d.cond_density)?,
            outcome: spec(&self.outcome_spec, d.outcome)?,
            irls: d.irls,
        })
    }

    fn columns(&self) -> ColumnMap {
        let d = ColumnMap::default();
        ColumnMap {
            y: self.y_col.clone().unwrap_or(d.y),
            a: self.a_col.clone().unwrap_or(d.a),
            s: self.s_col.clone().unwrap_or(d.s),
            b: self.b_col.clone().unwrap_or(d.b),
            x: self
                .x_cols
                .as_ref()
                .map(|c| c.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()),
        }
    }

    fn queries(&self) -> Result<Vec<SimQuery>> {
        let raw = self.queries.as_ref().ok_or_else(|| invalid("at least one --query is required"))?;
        raw.iter().map(|q| q.parse()).collect()
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }
}

fn required<T: Copy>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| invalid(format!("missing required option --{flag}")))
}

/// A command with its options merged from flags and config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandKind,
    pub options: Options,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self> {
        let (command, flags) = cli.command.split();
        let options = match &flags.config {
            Some(path) => {
                let file: Options = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                flags.overlay(file)
            }
            None => flags,
        };
        Ok(Self { command, options })
    }
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn load_input(o: &Options) -> Result<(Dataset, PathBuf)> {
    let path = o.input.clone().ok_or_else(|| invalid("missing required option --input"))?;
    Ok((load_dataset(&path, &o.columns(), o.outcome_kind)?, path))
}

fn csv_rows(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn estimate_doc(cfg: &RunConfig, data: &Dataset, input: &Path, query: serde_json::Value, report: serde_json::Value) -> Result<serde_json::Value> {
    let o = &cfg.options;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command.name(),
        "timestamp": timestamp(),
        "input": input,
        "n": data.len(),
        "outcome_kind": data.outcome_kind(),
        "covariates": data.covariate_names(),
        "query": query,
        "params": o.params()?,
        "folds": o.folds.unwrap_or(5),
        "seed": o.seed(),
        "models": o.models()?,
        "report": report,
    }))
}

fn run_estimate_stwcr(cfg: &RunConfig) -> Result<String> {
    let o = &cfg.options;
    let q = StwcrQuery { a: required(o.a, "a")?, s: required(o.s, "s")? };
    let (data, input) = load_input(o)?;
    let params = o.params()?;
    let folds = make_folds(data.len(), o.folds.unwrap_or(5), o.seed())?;
    let r = estimate_stwcr(&data, &q, &params, &folds, &NuisanceSource::Fitted(o.models()?))?;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    match o.format.unwrap_or(Format::Json) {
        Format::Json => {
            let doc = estimate_doc(cfg, &data, &input, serde_json::to_value(q)?, serde_json::to_value(&r)?)?;
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        Format::Csv => csv_rows(
            &["a", "s", "tau_num_hat", "tau_den_hat", "tau_hat", "sigma1_sq_hat", "se", "ci_lo", "ci_hi", "n", "density_floor_hits", "degenerate_folds"],
            &[vec![
                q.a.to_string(),
                q.s.to_string(),
                r.tau_num_hat.to_string(),
                r.tau_den_hat.to_string(),
                r.tau_hat.to_string(),
                r.sigma1_sq_hat.to_string(),
                r.se.to_string(),
                r.ci.lo.to_string(),
                r.ci.hi.to_string(),
                r.n.to_string(),
                r.density_floor_hits.to_string(),
                r.degenerate_folds.to_string(),
            ]],
        ),
    }
}

fn run_estimate_stwcrve(cfg: &RunConfig) -> Result<String> {
    let o = &cfg.options;
    let q = StwcrveQuery {
        a1: required(o.a1, "a1")?,
        a0: required(o.a0, "a0")?,
        s1: required(o.s1, "s1")?,
        s0: required(o.s0, "s0")?,
    };
    let (data, input) = load_input(o)?;
    let params = o.params()?;
    let folds = make_folds(data.len(), o.folds.unwrap_or(5), o.seed())?;
    let r = estimate_stwcrve(&data, &q, &params, &folds, &NuisanceSource::Fitted(o.models()?))?;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    match o.format.unwrap_or(Format::Json) {
        Format::Json => {
            let doc = estimate_doc(cfg, &data, &input, serde_json::to_value(q)?, serde_json::to_value(&r)?)?;
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        Format::Csv => csv_rows(
            &["a1", "a0", "s1", "s0", "tau_num_hat", "tau_den_hat", "rho_hat", "delta_hat", "sigma2log_sq_hat", "rho_lo", "rho_hi", "delta_lo", "delta_hi", "sigma2_sq_hat", "n"],
            &[vec![
                q.a1.to_string(),
                q.a0.to_string(),
                q.s1.to_string(),
                q.s0.to_string(),
                r.tau_num_hat.to_string(),
                r.tau_den_hat.to_string(),
                r.rho_hat.to_string(),
                r.delta_hat.to_string(),
                r.sigma2log_sq_hat.to_string(),
                r.ci_rho.lo.to_string(),
                r.ci_rho.hi.to_string(),
                r.ci_delta.lo.to_string(),
                r.ci_delta.hi.to_string(),
                r.sigma2_sq_hat.to_string(),
                r.n.to_string(),
            ]],
        ),
    }
}

fn sim_config(o: &Options) -> Result<SimConfig> {
    let d = SimConfig::default();
    Ok(SimConfig {
        scenario: o.scenario.unwrap_or(d.scenario),
        n: o.n.unwrap_or(d.n),
        reps: o.reps.unwrap_or(d.reps),
        queries: o.queries()?,
        params: o.params()?,
        k_folds: o.folds.unwrap_or(d.k_folds),
        master_seed: o.seed(),
        truth_mc_size: o.truth_mc_size.unwrap_or(DEFAULT_TRUTH_MC_SIZE),
        truth_seed: o.truth_seed.unwrap_or(d.truth_seed),
        models: o.models()?,
    })
}

fn open_cache(o: &Options) -> Result<TruthCache> {
    match &o.truth_cache {
        Some(p) => TruthCache::open(p),
        None => Ok(TruthCache::in_memory()),
    }
}

fn run_simulate(cfg: &RunConfig) -> Result<String> {
    let o = &cfg.options;
    let config = sim_config(o)?;
    let mut cache = open_cache(o)?;
    let rows = run_monte_carlo(&config, &mut cache)?;
    cache.save()?;

    if let Some(path) = &o.draws_out {
        let outcomes = run_replications(&config)?;
        let mut lines = Vec::new();
        for (q, per_q) in config.queries.iter().zip(&outcomes) {
            for r in per_q {
                let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
                lines.push(vec![
                    q.to_string(),
                    r.rep.to_string(),
                    r.seed.to_string(),
                    f(r.estimate),
                    f(r.se),
                    f(r.ci.map(|c| c.lo)),
                    f(r.ci.map(|c| c.hi)),
                    r.error.clone().unwrap_or_default(),
                ]);
            }
        }
        let text = csv_rows(&["query", "rep", "seed", "estimate", "se", "ci_lo", "ci_hi", "error"], &lines)?;
        std::fs::write(path, text)?;
    }

    match o.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let lines: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.scenario.to_string(),
                        r.n.to_string(),
                        r.query.clone(),
                        r.truth.to_string(),
                        r.truth_mc_se.to_string(),
                        r.mean_estimate.to_string(),
                        r.pct_bias.to_string(),
                        r.coverage.to_string(),
                        r.mean_se.to_string(),
                        r.reps.to_string(),
                        r.failed.to_string(),
                    ]
                })
                .collect();
            csv_rows(
                &["scenario", "n", "query", "truth", "truth_mc_se", "mean_estimate", "pct_bias", "coverage", "mean_se", "reps", "failed"],
                &lines,
            )
        }
        Format::Json => {
            let doc = json!({
                "schema_version": SCHEMA_VERSION,
                "command": cfg.command.name(),
                "timestamp": timestamp(),
                "config": config,
                "rows": rows,
            });
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
    }
}

fn run_truth(cfg: &RunConfig) -> Result<String> {
    let o = &cfg.options;
    let scenario = o.scenario.unwrap_or(Scenario::I);
    let params = o.params()?;
    let mc_size = o.truth_mc_size.unwrap_or(DEFAULT_TRUTH_MC_SIZE);
    if mc_size < 100_000 {
        return Err(invalid(format!("truth-mc-size must be >= 100000, got {mc_size}")));
    }
    let seed = o.truth_seed.unwrap_or(SimConfig::default().truth_seed);
    let mut cache = open_cache(o)?;
    let mut entries = Vec::new();
    for q in o.queries()? {
        let e = cache.truth(scenario, &q, &params, mc_size, seed)?;
        entries.push(json!({ "query": q.to_string(), "truth": e.truth, "mc_se": e.mc_se, "mc_size": e.mc_size, "seed": e.seed }));
    }
    cache.save()?;
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command.name(),
        "timestamp": timestamp(),
        "scenario": scenario,
        "params": params,
        "truths": entries,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn run_emit_draws(cfg: &RunConfig) -> Result<String> {
    let o = &cfg.options;
    let spec = ScenarioSpec { scenario: o.scenario.unwrap_or(Scenario::I), n: o.n.unwrap_or(1000), seed: o.seed() };
    let data = gen_dataset(&spec)?;
    if o.all_columns.unwrap_or(false) {
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf)?;
        return Ok(String::from_utf8(buf).expect("csv output is utf-8"));
    }
    let rows: Vec<Vec<String>> = data
        .observations()
        .iter()
        .map(|d| vec![format!("{:?}", d.b), format!("{:?}", d.s), d.a.to_string(), format!("{:?}", d.x[0])])
        .collect();
    csv_rows(&["b", "s", "a", "x1"], &rows)
}

/// Runs one command and returns what it would write.
pub fn execute(cfg: &RunConfig) -> Result<String> {
    match cfg.command {
        CommandKind::EstimateStwcr => run_estimate_stwcr(cfg),
        CommandKind::EstimateStwcrve => run_estimate_stwcrve(cfg),
        CommandKind::Simulate => run_simulate(cfg),
        CommandKind::Truth => run_truth(cfg),
        CommandKind::EmitDraws => run_emit_draws(cfg),
    }
}

/// Runs one command, writing to `--out` or standard output.
pub fn run_command(cfg: &RunConfig) -> Result<()> {
    let text = execute(cfg)?;
    match &cfg.options.out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

/// Machine-readable error document.
pub fn error_json(err: &Error) -> String {
    json!({ "error": { "kind": err.kind(), "message": err.to_string() } }).to_string()
}
