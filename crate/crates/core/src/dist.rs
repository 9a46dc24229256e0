//! Output distributions parameterized by moment matching.
//!
//! After training, each row's predicted `(mu, var)` is mapped to the
//! parameters of a chosen family whose analytic mean and variance equal
//! those moments (Poisson only matches the mean). Rows whose moments are
//! outside a family's feasible domain fall back to a Normal.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal, StudentT};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::boost::PredictiveMoments;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const WEIBULL_K_RANGE: (f64, f64) = (0.1, 50.0);
const WEIBULL_MAX_ITER: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("moments (mu={mu}, var={var}) are infeasible for {family}")]
    InfeasibleMoments { family: Family, mu: f64, var: f64 },
    #[error("unknown distribution family `{0}`")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Normal,
    StudentT3,
    Logistic,
    Laplace,
    LogNormal,
    Gumbel,
    Weibull,
    Poisson,
    NegativeBinomial,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Normal,
        Family::StudentT3,
        Family::Logistic,
        Family::Laplace,
        Family::LogNormal,
        Family::Gumbel,
        Family::Weibull,
        Family::Poisson,
        Family::NegativeBinomial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::StudentT3 => "studentt3",
            Family::Logistic => "logistic",
            Family::Laplace => "laplace",
            Family::LogNormal => "lognormal",
            Family::Gumbel => "gumbel",
            Family::Weibull => "weibull",
            Family::Poisson => "poisson",
            Family::NegativeBinomial => "negativebinomial",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Family::Poisson | Family::NegativeBinomial)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = DistError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| DistError::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistSpec {
    pub family: Family,
    /// Truncate continuous draws at zero.
    pub clamp_nonneg: bool,
}

impl DistSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            clamp_nonneg: false,
        }
    }
}

/// Matched parameters of one family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistParams {
    Normal { loc: f64, scale: f64 },
    /// `loc + scale * T` with `T` Student's t on 3 degrees of freedom.
    StudentT3 { loc: f64, scale: f64 },
    Logistic { loc: f64, scale: f64 },
    Laplace { loc: f64, scale: f64 },
    /// `exp(N(m, sigma^2))`.
    LogNormal { m: f64, sigma: f64 },
    Gumbel { loc: f64, scale: f64 },
    Weibull { shape: f64, scale: f64 },
    Poisson { rate: f64 },
    /// Failures before the `r`-th success with success probability `p`.
    NegativeBinomial { r: f64, p: f64 },
}

impl DistParams {
    /// Analytic mean of the parameterized distribution.
    pub fn mean(&self) -> f64 {
        match *self {
            DistParams::Normal { loc, .. }
            | DistParams::StudentT3 { loc, .. }
            | DistParams::Logistic { loc, .. }
            | DistParams::Laplace { loc, .. } => loc,
            DistParams::LogNormal { m, sigma } => (m + sigma * sigma / 2.0).exp(),
            DistParams::Gumbel { loc, scale } => loc + scale * EULER_GAMMA,
            DistParams::Weibull { shape, scale } => scale * ln_gamma(1.0 + 1.0 / shape).exp(),
            DistParams::Poisson { rate } => rate,
            DistParams::NegativeBinomial { r, p } => r * (1.0 - p) / p,
        }
    }

    /// Analytic variance of the parameterized distribution.
    pub fn variance(&self) -> f64 {
        match *self {
            DistParams::Normal { scale, .. } => scale * scale,
            DistParams::StudentT3 { scale, .. } => 3.0 * scale * scale,
            DistParams::Logistic { scale, .. } => scale * scale * PI * PI / 3.0,
            DistParams::Laplace { scale, .. } => 2.0 * scale * scale,
            DistParams::LogNormal { m, sigma } => {
                let s2 = sigma * sigma;
                s2.exp_m1() * (2.0 * m + s2).exp()
            }
            DistParams::Gumbel { scale, .. } => PI * PI * scale * scale / 6.0,
            DistParams::Weibull { shape, scale } => {
                let g1 = ln_gamma(1.0 + 1.0 / shape).exp();
                let g2 = ln_gamma(1.0 + 2.0 / shape).exp();
                scale * scale * (g2 - g1 * g1)
            }
            DistParams::Poisson { rate } => rate,
            DistParams::NegativeBinomial { r, p } => r * (1.0 - p) / (p * p),
        }
    }

    /// One draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistParams::Normal { loc, scale } => {
                let z: f64 = StandardNormal.sample(rng);
                loc + scale * z
            }
            DistParams::StudentT3 { loc, scale } => {
                let t: f64 = StudentT::new(3.0).expect("3 dof").sample(rng);
                loc + scale * t
            }
            DistParams::Logistic { loc, scale } => {
                let u = open_unit(rng);
                loc + scale * (u / (1.0 - u)).ln()
            }
            DistParams::Laplace { loc, scale } => {
                let u = open_unit(rng) - 0.5;
                loc - scale * u.signum() * (-2.0 * u.abs()).ln_1p()
            }
            DistParams::LogNormal { m, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (m + sigma * z).exp()
            }
            DistParams::Gumbel { loc, scale } => loc - scale * (-open_unit(rng).ln()).ln(),
            DistParams::Weibull { shape, scale } => scale * (-open_unit(rng).ln()).powf(1.0 / shape),
            DistParams::Poisson { rate } => poisson_draw(rate, rng),
            DistParams::NegativeBinomial { r, p } => {
                let lambda = Gamma::new(r, (1.0 - p) / p).expect("positive gamma params").sample(rng);
                poisson_draw(lambda, rng)
            }
        }
    }
}

fn poisson_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate > 0.0 && rate.is_finite() {
        Poisson::new(rate).map_or(rate.round(), |p| p.sample(rng))
    } else {
        0.0
    }
}

/// Uniform draw on the open interval (0, 1).
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// `Gamma(1 + 2/k) / Gamma(1 + 1/k)^2 - 1`, the Weibull squared coefficient of
/// variation at shape `k`. Decreasing in `k`.
pub fn weibull_cv2(k: f64) -> f64 {
    (ln_gamma(1.0 + 2.0 / k) - 2.0 * ln_gamma(1.0 + 1.0 / k)).exp_m1()
}

/// Solves `weibull_cv2(k) = cv2` by bisection on the supported shape range.
fn weibull_shape(cv2: f64) -> Option<f64> {
    let (mut lo, mut hi) = WEIBULL_K_RANGE;
    if !(cv2 <= weibull_cv2(lo) && cv2 >= weibull_cv2(hi)) {
        return None;
    }
    for _ in 0..WEIBULL_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = weibull_cv2(mid) - cv2;
        if f == 0.0 {
            return Some(mid);
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Moment-matched parameters of `family` for mean `mu` and variance `var`.
pub fn match_params(family: Family, mu: f64, var: f64) -> Result<DistParams, DistError> {
    let infeasible = || DistError::InfeasibleMoments { family, mu, var };
    if !(mu.is_finite() && var.is_finite() && var >= 0.0) {
        return Err(infeasible());
    }
    let sd = var.sqrt();
    Ok(match family {
        Family::Normal => DistParams::Normal { loc: mu, scale: sd },
        Family::StudentT3 => DistParams::StudentT3 {
            loc: mu,
            scale: (var / 3.0).sqrt(),
        },
        Family::Logistic => DistParams::Logistic {
            loc: mu,
            scale: (3.0 * var).sqrt() / PI,
        },
        Family::Laplace => DistParams::Laplace {
            loc: mu,
            scale: (var / 2.0).sqrt(),
        },
        Family::Gumbel => {
            let scale = (6.0 * var).sqrt() / PI;
            DistParams::Gumbel {
                loc: mu - scale * EULER_GAMMA,
                scale,
            }
        }
        Family::LogNormal => {
            if mu <= 0.0 {
                return Err(infeasible());
            }
            let s2 = (var / (mu * mu)).ln_1p();
            DistParams::LogNormal {
                m: mu.ln() - s2 / 2.0,
                sigma: s2.sqrt(),
            }
        }
        Family::Weibull => {
            if mu <= 0.0 {
                return Err(infeasible());
            }
            let shape = weibull_shape(var / (mu * mu)).ok_or_else(infeasible)?;
            DistParams::Weibull {
                shape,
                scale: mu / ln_gamma(1.0 + 1.0 / shape).exp(),
            }
        }
        Family::Poisson => {
            if mu <= 0.0 {
                return Err(infeasible());
            }
            DistParams::Poisson { rate: mu }
        }
        Family::NegativeBinomial => {
            if mu <= 0.0 || var <= mu {
                return Err(infeasible());
            }
            DistParams::NegativeBinomial {
                r: mu * mu / (var - mu),
                p: mu / var,
            }
        }
    })
}

/// Draws per row, stored row-major: `n_samples` consecutive values per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    values: Vec<f64>,
    n_rows: usize,
    n_samples: usize,
    pub seed: u64,
    /// Rows that fell back to a Normal because their moments were infeasible.
    pub fallback_rows: usize,
}

impl SampleMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, seed: u64) -> Self {
        let n_rows = rows.len();
        let n_samples = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_samples), "ragged sample rows");
        Self {
            values: rows.into_iter().flatten().collect(),
            n_rows,
            n_samples,
            seed,
            fallback_rows: 0,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_samples.max(1)).take(self.n_rows)
    }
}

/// Per-row generator: the same `(seed, row)` always yields the same stream.
pub fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Draws `n_samples` values per row from the matched distribution.
pub fn sample(moments: &PredictiveMoments, spec: &DistSpec, n_samples: usize, seed: u64) -> SampleMatrix {
    let rows: Vec<(Vec<f64>, bool)> = moments
        .mu
        .par_iter()
        .zip(moments.var.par_iter())
        .enumerate()
        .map(|(i, (&mu, &var))| {
            let (params, fell_back) = match match_params(spec.family, mu, var) {
                Ok(p) => (p, false),
                Err(_) => (
                    DistParams::Normal {
                        loc: mu,
                        scale: var.max(0.0).sqrt(),
                    },
                    true,
                ),
            };
            let clamp = spec.clamp_nonneg && !spec.family.is_discrete();
            let mut rng = row_rng(seed, i);
            let draws = (0..n_samples)
                .map(|_| {
                    let x = params.sample(&mut rng);
                    if clamp {
                        x.max(0.0)
                    } else {
                        x
                    }
                })
                .collect();
            (draws, fell_back)
        })
        .collect();
    let fallback_rows = rows.iter().filter(|r| r.1).count();
    let mut m = SampleMatrix::from_rows(rows.into_iter().map(|r| r.0).collect(), seed);
    m.fallback_rows = fallback_rows;
    m
}
