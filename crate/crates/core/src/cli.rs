//! `pgbm` command-line frontend.
//!
//! Every setting can come from a `key = value` config file (`--config`) or
//! from the flag of the same name with dashes; flags win. Exit codes are 0 on
//! success, 2 for usage and config errors, 3 for data and model errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::boost::{train_with_report, BoostConfig, BoostError, Ensemble, PredictiveMoments, Rho, Validation};
use crate::data::{load_column, load_csv, load_features_csv, DataError};
use crate::dist::{sample, DistSpec, Family, SampleMatrix};
use crate::loss::{GradHessProvider, HierWmse, HierarchySpec, LossError, Mse};
use crate::metrics::{crps_mean, hierarchical_report, Forecast, Metric, MetricError, MetricReport};
use crate::model_io::{self, ModelIoError};
use crate::tree::TreeError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const DEFAULT_N_SAMPLES: usize = 1000;
/// Upper bound on sample columns written by `predict`.
pub const MAX_SAMPLE_COLUMNS: usize = 10_000;

/// Keys accepted in config files.
pub const CONFIG_KEYS: &[&str] = &[
    // boosting
    "max_bin",
    "max_leaves",
    "learning_rate",
    "n_estimators",
    "lambda",
    "min_split_gain",
    "min_data_in_leaf",
    "feature_fraction",
    "bagging_fraction",
    "seed",
    "early_stopping_rounds",
    "early_stopping_metric",
    "rho",
    // inputs and outputs
    "data",
    "valid",
    "target",
    "loss",
    "hierarchy",
    "model",
    "model_out",
    "out",
    "pred",
    "actual",
    // prediction and scoring
    "dist",
    "dists",
    "rhos",
    "n_samples",
    "metrics",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BoostError> for CliError {
    fn from(e: BoostError) -> Self {
        match e {
            BoostError::InvalidConfig(_) | BoostError::MissingValidation | BoostError::Tree(TreeError::InvalidConfig(_)) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Settings merged from a config file and command-line flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines. `#` starts a comment; unknown and repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(usage(format!("config line {}: unknown key `{k}`", i + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(usage(format!("config line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn with_flags(mut self, flags: Vec<(&'static str, Option<String>)>) -> Self {
        for (k, v) in flags {
            debug_assert!(CONFIG_KEYS.contains(&k));
            if let Some(v) = v {
                self.values.insert(k.to_string(), v);
            }
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| {
            usage(format!(
                "missing required --{} (or `{key} = ...` in the config file)",
                key.replace('_', "-")
            ))
        })
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("invalid {key} `{v}`: {e}"))))
            .transpose()
    }

    /// Boosting configuration with defaults for unset keys.
    pub fn boost_config(&self) -> Result<BoostConfig, CliError> {
        let mut c = BoostConfig::default();
        if let Some(v) = self.parsed("max_bin")? {
            c.tree.max_bins = v;
        }
        if let Some(v) = self.parsed("max_leaves")? {
            c.tree.max_leaves = v;
        }
        if let Some(v) = self.parsed("learning_rate")? {
            c.learning_rate = v;
        }
        if let Some(v) = self.parsed("n_estimators")? {
            c.n_estimators = v;
        }
        if let Some(v) = self.parsed("lambda")? {
            c.tree.lambda = v;
        }
        if let Some(v) = self.parsed("min_split_gain")? {
            c.tree.min_split_gain = v;
        }
        if let Some(v) = self.parsed("min_data_in_leaf")? {
            c.tree.min_data_in_leaf = v;
        }
        if let Some(v) = self.parsed("feature_fraction")? {
            c.tree.feature_fraction = v;
        }
        if let Some(v) = self.parsed("bagging_fraction")? {
            c.bagging_fraction = v;
        }
        if let Some(v) = self.parsed("seed")? {
            c.seed = v;
            c.tree.seed = v;
        }
        match self.get("early_stopping_rounds") {
            None | Some("none") => {}
            Some(_) => c.early_stopping_rounds = self.parsed("early_stopping_rounds")?,
        }
        if let Some(v) = self.parsed("early_stopping_metric")? {
            c.early_stopping_metric = v;
        }
        if let Some(v) = self.parsed("rho")? {
            c.rho = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pgbm", version, about = "Probabilistic gradient boosting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and save it.
    Train(TrainArgs),
    /// Predict mean, variance and samples for new rows.
    Predict(PredictArgs),
    /// Score predictions with CRPS and RMSE.
    Evaluate(EvaluateArgs),
    /// Score a grid of output distributions and correlations on labelled data.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct BoostFlags {
    #[arg(long, value_name = "N")]
    pub max_bin: Option<String>,
    #[arg(long, value_name = "N")]
    pub max_leaves: Option<String>,
    #[arg(long, value_name = "REAL")]
    pub learning_rate: Option<String>,
    #[arg(long, value_name = "N")]
    pub n_estimators: Option<String>,
    #[arg(long, value_name = "REAL")]
    pub lambda: Option<String>,
    #[arg(long, value_name = "REAL")]
    pub min_split_gain: Option<String>,
    #[arg(long, value_name = "N")]
    pub min_data_in_leaf: Option<String>,
    #[arg(long, value_name = "REAL")]
    pub feature_fraction: Option<String>,
    #[arg(long, value_name = "REAL")]
    pub bagging_fraction: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    #[arg(long, value_name = "N")]
    pub early_stopping_rounds: Option<String>,
    /// Validation metric for early stopping: rmse or crps.
    #[arg(long, value_name = "METRIC")]
    pub early_stopping_metric: Option<String>,
    /// Tree correlation stored in the model: a value in [-1, 1] or `auto`.
    #[arg(long, value_name = "RHO")]
    pub rho: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub data: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub valid: Option<String>,
    #[arg(long, value_name = "COLUMN")]
    pub target: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub model_out: Option<String>,
    /// mse or hierwmse
    #[arg(long, value_name = "LOSS")]
    pub loss: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub hierarchy: Option<String>,
    /// Do not print the per-iteration validation metric.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub boost: BoostFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub data: Option<String>,
    /// Column to drop from the input, if present.
    #[arg(long, value_name = "COLUMN")]
    pub target: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub out: Option<String>,
    #[arg(long, value_name = "FAMILY")]
    pub dist: Option<String>,
    /// Override the model's tree correlation: a value in [-1, 1] or `auto`.
    #[arg(long, value_name = "RHO")]
    pub rho: Option<String>,
    #[arg(long, value_name = "N")]
    pub n_samples: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    /// Write only `row,mu,var`.
    #[arg(long)]
    pub point_only: bool,
    /// Truncate continuous draws at zero.
    #[arg(long)]
    pub clamp_nonneg: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    /// Prediction CSV written by `predict`.
    #[arg(long, value_name = "CSV")]
    pub pred: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub actual: Option<String>,
    /// Column of the actual file holding the targets; optional if it has one column.
    #[arg(long, value_name = "COLUMN")]
    pub target: Option<String>,
    /// Comma list of crps and rmse.
    #[arg(long, value_name = "LIST")]
    pub metrics: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub hierarchy: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<String>,
    /// Labelled validation CSV.
    #[arg(long, value_name = "CSV")]
    pub data: Option<String>,
    #[arg(long, value_name = "COLUMN")]
    pub target: Option<String>,
    /// Comma list of distribution families.
    #[arg(long, value_name = "LIST")]
    pub dists: Option<String>,
    /// Comma list of correlations or an inclusive range `a:b:step`.
    #[arg(long, value_name = "LIST")]
    pub rhos: Option<String>,
    #[arg(long, value_name = "N")]
    pub n_samples: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub out: Option<String>,
    #[arg(long)]
    pub clamp_nonneg: bool,
}

impl BoostFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("max_bin", self.max_bin.clone()),
            ("max_leaves", self.max_leaves.clone()),
            ("learning_rate", self.learning_rate.clone()),
            ("n_estimators", self.n_estimators.clone()),
            ("lambda", self.lambda.clone()),
            ("min_split_gain", self.min_split_gain.clone()),
            ("min_data_in_leaf", self.min_data_in_leaf.clone()),
            ("feature_fraction", self.feature_fraction.clone()),
            ("bagging_fraction", self.bagging_fraction.clone()),
            ("seed", self.seed.clone()),
            ("early_stopping_rounds", self.early_stopping_rounds.clone()),
            ("early_stopping_metric", self.early_stopping_metric.clone()),
            ("rho", self.rho.clone()),
        ]
    }
}

fn settings(config: &Option<String>, flags: Vec<(&'static str, Option<String>)>) -> Result<RunConfig, CliError> {
    let base = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(base.with_flags(flags))
}

/// Parses `a,b,c` or the inclusive range `a:b:step`.
pub fn parse_rhos(s: &str) -> Result<Vec<Rho>, CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let num = |v: &str| -> Result<f64, CliError> {
            v.trim().parse().map_err(|_| usage(format!("invalid rho range `{s}`")))
        };
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || b < a {
            return Err(usage(format!("invalid rho range `{s}`: need a <= b and step > 0")));
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        return (0..count)
            .map(|i| {
                // snap to 12 decimals so 0.1 * 3 prints as 0.3
                let r = ((a + i as f64 * step) * 1e12).round() / 1e12;
                format!("{r}").parse::<Rho>().map_err(usage)
            })
            .collect();
    }
    if parts.len() != 1 {
        return Err(usage(format!("invalid rho list `{s}`")));
    }
    s.split(',').map(|v| v.parse::<Rho>().map_err(usage)).collect()
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| usage(format!("invalid {what}: {e}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(usage(format!("empty {what} list")));
    }
    Ok(items)
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut flags = vec![
        ("data", args.data.clone()),
        ("valid", args.valid.clone()),
        ("target", args.target.clone()),
        ("model_out", args.model_out.clone()),
        ("loss", args.loss.clone()),
        ("hierarchy", args.hierarchy.clone()),
    ];
    flags.extend(args.boost.pairs());
    let cfg = settings(&args.config, flags)?;
    let data_path = cfg.required("data")?;
    let target = cfg.required("target")?;
    let model_out = cfg.required("model_out")?;
    let config = cfg.boost_config()?;
    let valid_path = cfg.get("valid");
    if config.early_stopping_rounds.is_some() && valid_path.is_none() {
        return Err(usage("--early-stopping-rounds requires --valid"));
    }
    let loss_name = cfg.get("loss").unwrap_or("mse");
    if !matches!(loss_name, "mse" | "hierwmse") {
        return Err(usage(format!("unknown loss `{loss_name}` (expected mse or hierwmse)")));
    }
    let hierarchy_path = cfg.get("hierarchy");
    if loss_name == "hierwmse" && hierarchy_path.is_none() {
        return Err(usage("--loss hierwmse requires --hierarchy"));
    }

    let train = load_csv(data_path, target)?;
    let loss: Box<dyn GradHessProvider> = match hierarchy_path.filter(|_| loss_name == "hierwmse") {
        Some(path) => {
            let spec = HierarchySpec::load(path)?;
            spec.assignments(train.n_samples())?;
            Box::new(HierWmse { spec })
        }
        None => Box::new(Mse),
    };
    let valid = valid_path.map(|p| load_csv(p, target)).transpose()?;
    let metric = config.early_stopping_metric;
    let (model, report) = train_with_report(
        &train,
        loss.as_ref(),
        &config,
        valid.as_ref().map(|data| Validation { data, metric }),
        |k, v| {
            if !args.quiet {
                println!("[{k}] valid-{metric}: {v}");
            }
        },
    )?;
    model_io::save(&model, model_out)?;
    match report.valid_history.get(report.best_iteration.wrapping_sub(1)) {
        Some(best) if valid.is_some() => println!(
            "saved {} trees to {model_out} (best valid-{metric}: {best})",
            model.trees.len()
        ),
        _ => println!("saved {} trees to {model_out}", model.trees.len()),
    }
    Ok(())
}

fn load_model(path: &str) -> Result<Ensemble, CliError> {
    Ok(model_io::load(path)?)
}

fn prediction_rho(cfg: &RunConfig, model: &Ensemble) -> Result<f64, CliError> {
    Ok(match cfg.parsed::<Rho>("rho")? {
        Some(r) => r.resolve(model.n_train),
        None => model.rho,
    })
}

fn dist_spec(cfg: &RunConfig, clamp_nonneg: bool) -> Result<DistSpec, CliError> {
    let family = cfg.parsed::<Family>("dist")?.unwrap_or(Family::Normal);
    Ok(DistSpec { family, clamp_nonneg })
}

/// Writes `row,mu,var[,s0..]`.
pub fn write_predictions(
    out: &mut impl Write,
    moments: &PredictiveMoments,
    samples: Option<&SampleMatrix>,
) -> std::io::Result<()> {
    write!(out, "row,mu,var")?;
    let m = samples.map_or(0, SampleMatrix::n_samples);
    for s in 0..m {
        write!(out, ",s{s}")?;
    }
    writeln!(out)?;
    for i in 0..moments.len() {
        write!(out, "{i},{},{}", moments.mu[i], moments.var[i])?;
        if let Some(s) = samples {
            for x in s.row(i) {
                write!(out, ",{x}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let cfg = settings(
        &args.config,
        vec![
            ("model", args.model.clone()),
            ("data", args.data.clone()),
            ("target", args.target.clone()),
            ("out", args.out.clone()),
            ("dist", args.dist.clone()),
            ("rho", args.rho.clone()),
            ("n_samples", args.n_samples.clone()),
            ("seed", args.seed.clone()),
        ],
    )?;
    let model_path = cfg.required("model")?;
    let data_path = cfg.required("data")?;
    let out_path = cfg.required("out")?;
    let spec = dist_spec(&cfg, args.clamp_nonneg)?;
    let n_samples = cfg.parsed::<usize>("n_samples")?.unwrap_or(DEFAULT_N_SAMPLES);
    if !args.point_only && n_samples > MAX_SAMPLE_COLUMNS {
        return Err(usage(format!(
            "--n-samples {n_samples} exceeds {MAX_SAMPLE_COLUMNS}; use --point-only and sample downstream, or split the request"
        )));
    }
    if !args.point_only && n_samples == 0 {
        return Err(usage("--n-samples must be >= 1 (or use --point-only)"));
    }
    let seed_flag = cfg.parsed::<u64>("seed")?;

    let model = load_model(model_path)?;
    let rho = prediction_rho(&cfg, &model)?;
    let x = load_features_csv(data_path, cfg.get("target"))?;
    let moments = model.predict_moments_with_rho(&x, rho)?;
    let samples = (!args.point_only)
        .then(|| sample(&moments, &spec, n_samples, seed_flag.unwrap_or(model.config.seed)));
    if let Some(s) = samples.as_ref().filter(|s| s.fallback_rows > 0) {
        eprintln!(
            "warning: {} rows had moments outside the {} domain and were sampled from a normal",
            s.fallback_rows, spec.family
        );
    }
    let mut w = BufWriter::new(File::create(out_path)?);
    write_predictions(&mut w, &moments, samples.as_ref())?;
    w.flush()?;
    Ok(())
}

/// Contents of a prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub samples: Option<SampleMatrix>,
}

pub fn read_predictions(path: &str) -> Result<PredictionFile, CliError> {
    let bad = |m: String| CliError::Data(format!("{path}: {m}"));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let (mu_col, var_col) = (col("mu")?, col("var")?);
    let sample_cols: Vec<usize> = (0..)
        .map_while(|s| header.iter().position(|h| h == format!("s{s}")))
        .collect();
    let (mut mu, mut var, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |c: usize| -> Result<f64, CliError> {
            let v = rec.get(c).unwrap_or("");
            v.trim()
                .parse()
                .map_err(|_| bad(format!("cannot parse `{v}` at row {}, column {}", r + 1, c + 1)))
        };
        mu.push(num(mu_col)?);
        var.push(num(var_col)?);
        if !sample_cols.is_empty() {
            rows.push(sample_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>, _>>()?);
        }
    }
    let samples = (!sample_cols.is_empty()).then(|| SampleMatrix::from_rows(rows, 0));
    Ok(PredictionFile { mu, var, samples })
}

fn read_actual(path: &str, target: Option<&str>) -> Result<Vec<f64>, CliError> {
    if let Some(t) = target {
        return Ok(load_column(path, t)?);
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
    let header = rdr.headers().map_err(|e| CliError::Data(format!("{path}: {e}")))?;
    match header.len() {
        1 => {
            let name = header[0].to_string();
            Ok(load_column(path, &name)?)
        }
        k => Err(usage(format!("{path} has {k} columns; pass --target to pick one"))),
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = settings(
        &args.config,
        vec![
            ("pred", args.pred.clone()),
            ("actual", args.actual.clone()),
            ("target", args.target.clone()),
            ("metrics", args.metrics.clone()),
            ("hierarchy", args.hierarchy.clone()),
            ("out", args.out.clone()),
        ],
    )?;
    let pred_path = cfg.required("pred")?;
    let actual_path = cfg.required("actual")?;
    let requested = cfg.get("metrics").map(|m| parse_list::<Metric>(m, "metric")).transpose()?;

    let pred = read_predictions(pred_path)?;
    let y = read_actual(actual_path, cfg.get("target"))?;
    let metrics = match requested {
        Some(m) => m,
        None if pred.samples.is_some() => vec![Metric::Crps, Metric::Rmse],
        None => vec![Metric::Rmse],
    };
    let hierarchy = cfg.get("hierarchy").map(HierarchySpec::load).transpose()?;
    let mut reports = Vec::new();
    for metric in metrics {
        let forecast = match metric {
            Metric::Rmse => Forecast::Point(&pred.mu),
            Metric::Crps => Forecast::Samples(pred.samples.as_ref().ok_or_else(|| {
                usage("crps needs sample columns; rerun predict without --point-only")
            })?),
        };
        reports.push(hierarchical_report(&y, forecast, hierarchy.as_ref(), metric)?);
    }
    let csv = MetricReport::to_csv(&reports);
    print!("{csv}");
    if let Some(out) = cfg.get("out") {
        std::fs::write(out, &csv)?;
    }
    Ok(())
}

/// One cell of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub family: Family,
    pub rho: f64,
    pub crps: f64,
}

/// Sampling settings shared by every sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSampling {
    pub n_samples: usize,
    pub seed: u64,
    pub clamp_nonneg: bool,
}

/// Routes the rows once, then samples and scores every (family, rho) pair.
/// Cells are ordered by family, then rho.
pub fn sweep_grid(
    model: &Ensemble,
    x: &crate::data::FeatureMatrix,
    y: &[f64],
    families: &[Family],
    rhos: &[f64],
    sampling: SweepSampling,
) -> Result<Vec<SweepCell>, CliError> {
    let SweepSampling {
        n_samples,
        seed,
        clamp_nonneg,
    } = sampling;
    let paths = model.route_all(x)?;
    let moments: Vec<PredictiveMoments> = rhos.iter().map(|&r| model.accumulate(&paths, r)).collect();
    let mut grid = Vec::with_capacity(families.len() * rhos.len());
    for &family in families {
        let spec = DistSpec { family, clamp_nonneg };
        for (&rho, m) in rhos.iter().zip(&moments) {
            let s = sample(m, &spec, n_samples, seed);
            grid.push(SweepCell {
                family,
                rho,
                crps: crps_mean(&s, y)?,
            });
        }
    }
    Ok(grid)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg = settings(
        &args.config,
        vec![
            ("model", args.model.clone()),
            ("data", args.data.clone()),
            ("target", args.target.clone()),
            ("dists", args.dists.clone()),
            ("rhos", args.rhos.clone()),
            ("n_samples", args.n_samples.clone()),
            ("seed", args.seed.clone()),
            ("out", args.out.clone()),
        ],
    )?;
    let model_path = cfg.required("model")?;
    let data_path = cfg.required("data")?;
    let target = cfg.required("target")?;
    let families = parse_list::<Family>(cfg.required("dists")?, "distribution")?;
    let rhos = parse_rhos(cfg.required("rhos")?)?;
    let n_samples = cfg.parsed::<usize>("n_samples")?.unwrap_or(DEFAULT_N_SAMPLES);
    if n_samples == 0 {
        return Err(usage("--n-samples must be >= 1"));
    }
    let seed_flag = cfg.parsed::<u64>("seed")?;

    let model = load_model(model_path)?;
    let data = load_csv(data_path, target)?;
    let rhos: Vec<f64> = rhos.into_iter().map(|r| r.resolve(model.n_train)).collect();
    let seed = seed_flag.unwrap_or(model.config.seed);
    let sampling = SweepSampling {
        n_samples,
        seed,
        clamp_nonneg: args.clamp_nonneg,
    };
    let grid = sweep_grid(&model, &data.features, &data.target, &families, &rhos, sampling)?;

    let mut csv = String::from("dist,rho,crps\n");
    for c in &grid {
        csv.push_str(&format!("{},{},{}\n", c.family, c.rho, c.crps));
    }
    let best = grid
        .iter()
        .fold(None::<&SweepCell>, |b, c| match b {
            Some(b) if b.crps <= c.crps => Some(b),
            _ => Some(c),
        })
        .expect("grid is nonempty");
    let summary = format!("best: dist={} rho={} crps={}", best.family, best.rho, best.crps);
    match cfg.get("out") {
        Some(out) => {
            std::fs::write(out, &csv)?;
            println!("{summary}");
        }
        None => {
            print!("{csv}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("pgbm: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os())
}
