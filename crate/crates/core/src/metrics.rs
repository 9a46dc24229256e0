//! Probabilistic (CRPS) and point (RMSE) scores, globally and per
//! aggregation level.

use std::fmt::Write as _;

use statrs::function::erf::erf;
use thiserror::Error;

use crate::dist::SampleMatrix;
use crate::loss::{group_sums, HierarchySpec, LossError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no samples to score")]
    EmptySamples,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Hierarchy(#[from] LossError),
}

/// Sample-based CRPS in energy form:
/// `mean|x_i - y| - 1/(2 m^2) sum_ij |x_i - x_j|`.
///
/// The pairwise term is evaluated in `O(m log m)` from the sorted samples:
/// `sum_ij |x_i - x_j| = 2 sum_k (2k - m + 1) x_(k)`.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::EmptySamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(crps_sorted(&sorted, y))
}

fn crps_sorted(sorted: &[f64], y: f64) -> f64 {
    let m = sorted.len() as f64;
    let mut abs_err = 0.0;
    let mut pairwise = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        abs_err += (x - y).abs();
        pairwise += (2.0 * k as f64 - m + 1.0) * x;
    }
    // pairwise currently holds half of the double sum
    (abs_err / m - pairwise / (m * m)).max(0.0)
}

/// Mean CRPS over rows of a sample matrix.
pub fn crps_mean(samples: &SampleMatrix, y: &[f64]) -> Result<f64, MetricError> {
    if samples.n_rows() != y.len() {
        return Err(MetricError::LengthMismatch(samples.n_rows(), y.len()));
    }
    if y.is_empty() || samples.n_samples() == 0 {
        return Err(MetricError::EmptySamples);
    }
    let total: f64 = samples
        .rows()
        .zip(y)
        .map(|(row, &t)| crps_empirical(row, t).expect("nonempty row"))
        .sum();
    Ok(total / y.len() as f64)
}

/// Closed-form CRPS of a Normal(mu, sd) forecast.
pub fn crps_normal(mu: f64, sd: f64, y: f64) -> f64 {
    if sd <= 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sd;
    let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::EmptySamples);
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Crps,
    Rmse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Crps => "crps",
            Metric::Rmse => "rmse",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "crps" => Ok(Metric::Crps),
            "rmse" => Ok(Metric::Rmse),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Score of one aggregation level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScore {
    pub level: usize,
    pub value: f64,
    /// Number of groups scored.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub levels: Vec<LevelScore>,
}

impl MetricReport {
    /// CSV header used by [`MetricReport::to_csv`].
    pub const CSV_HEADER: &'static str = "metric,level,group,value,n";

    /// Rows `metric,level,group,value,n`: one per level, or a single global
    /// row (`all,all`) when no hierarchy was given.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        if self.levels.is_empty() {
            writeln!(s, "{},all,all,{:?},{}", self.name, self.value, self.n).unwrap();
        }
        for l in &self.levels {
            writeln!(s, "{},{},all,{:?},{}", self.name, l.level, l.value, l.n).unwrap();
        }
        s
    }

    pub fn to_csv(reports: &[MetricReport]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in reports {
            s.push_str(&r.csv_rows());
        }
        s
    }
}

/// Predictions to score: point estimates or sample paths.
#[derive(Debug, Clone, Copy)]
pub enum Forecast<'a> {
    Point(&'a [f64]),
    Samples(&'a SampleMatrix),
}

impl Forecast<'_> {
    fn n_rows(&self) -> usize {
        match self {
            Forecast::Point(p) => p.len(),
            Forecast::Samples(s) => s.n_rows(),
        }
    }
}

fn score(metric: Metric, y: &[f64], forecast: Forecast<'_>) -> Result<f64, MetricError> {
    match (metric, forecast) {
        (Metric::Rmse, Forecast::Point(p)) => rmse(y, p),
        (Metric::Rmse, Forecast::Samples(s)) => {
            let means: Vec<f64> = s.rows().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
            rmse(y, &means)
        }
        (Metric::Crps, Forecast::Samples(s)) => crps_mean(s, y),
        (Metric::Crps, Forecast::Point(p)) => {
            // a point forecast is a degenerate distribution
            if y.len() != p.len() {
                return Err(MetricError::LengthMismatch(y.len(), p.len()));
            }
            rmse(y, p)?;
            Ok(y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
        }
    }
}

/// Scores the metric globally and on every level of the hierarchy.
///
/// Targets and point predictions are summed per group. Sample paths are
/// summed per path index, so path `s` of a group is the sum of its members'
/// path `s`.
pub fn hierarchical_report(
    y: &[f64],
    forecast: Forecast<'_>,
    spec: Option<&HierarchySpec>,
    metric: Metric,
) -> Result<MetricReport, MetricError> {
    let n = y.len();
    if forecast.n_rows() != n {
        return Err(MetricError::LengthMismatch(n, forecast.n_rows()));
    }
    let value = score(metric, y, forecast)?;
    let mut levels = Vec::new();
    if let Some(spec) = spec {
        let assignments = spec.assignments(n)?;
        for (a, assign) in assignments.iter().enumerate() {
            let n_groups = spec.n_groups(a, n);
            let gy = group_sums(y, assign, n_groups);
            let v = match forecast {
                Forecast::Point(p) => score(metric, &gy, Forecast::Point(&group_sums(p, assign, n_groups)))?,
                Forecast::Samples(s) => {
                    let m = s.n_samples();
                    let mut agg = vec![vec![0.0; m]; n_groups];
                    for (row, &g) in s.rows().zip(assign) {
                        for (acc, &x) in agg[g].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    score(metric, &gy, Forecast::Samples(&SampleMatrix::from_rows(agg, s.seed)))?
                }
            };
            levels.push(LevelScore {
                level: a,
                value: v,
                n: n_groups,
            });
        }
    }
    Ok(MetricReport {
        name: metric.name().to_string(),
        value,
        n,
        levels,
    })
}
