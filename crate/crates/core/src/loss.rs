//! Gradient and hessian providers for training losses.
//!
//! Two analytic losses ship with the crate: squared error and a hierarchical
//! weighted squared error that couples samples through group sums. Any other
//! loss that is separable per sample can be plugged in through
//! [`NumericLoss`], which uses central finite differences.
//!
//! Squared error is `(y - yhat)^2` with no `1/2` factor, so `g = 2(yhat - y)`
//! and `h = 2`.
//!
//! For the hierarchical loss
//! `L = sum_a w_a sum_groups (sum_{i in group} (y_i - yhat_i))^2`,
//! differentiating with respect to `yhat_i` picks up the residual sum of the
//! one group containing `i` on every level:
//! `g_i = -2 sum_a w_a r_{a, group_a(i)}` and `h_i = 2 sum_a w_a`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: y has {y}, yhat has {yhat}")]
    LengthMismatch { y: usize, yhat: usize },
    #[error("sample index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("hierarchy level {level}: {reason}")]
    InvalidHierarchy { level: usize, reason: String },
    #[error("loss is not finite at sample {index}")]
    NonFiniteLoss { index: usize },
    #[error("hierarchy file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-sample first and second derivatives of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHess {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl GradHess {
    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }
}

/// Something that can produce gradients and hessians at the current estimate.
pub trait GradHessProvider: Sync {
    fn gradhess(&self, y: &[f64], yhat: &[f64]) -> Result<GradHess, LossError>;

    /// Total loss value, used for reporting.
    fn loss(&self, y: &[f64], yhat: &[f64]) -> Result<f64, LossError>;
}

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<(), LossError> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(LossError::LengthMismatch {
            y: y.len(),
            yhat: yhat.len(),
        });
    }
    Ok(())
}

pub fn mse_gradhess(y: &[f64], yhat: &[f64]) -> Result<GradHess, LossError> {
    check_lengths(y, yhat)?;
    let g = y.par_iter().zip(yhat).map(|(&y, &p)| 2.0 * (p - y)).collect();
    Ok(GradHess {
        g,
        h: vec![2.0; y.len()],
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Mse;

impl GradHessProvider for Mse {
    fn gradhess(&self, y: &[f64], yhat: &[f64]) -> Result<GradHess, LossError> {
        mse_gradhess(y, yhat)
    }

    fn loss(&self, y: &[f64], yhat: &[f64]) -> Result<f64, LossError> {
        check_lengths(y, yhat)?;
        Ok(y.iter().zip(yhat).map(|(y, p)| (y - p) * (y - p)).sum())
    }
}

/// Group membership of one aggregation level.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelGroups {
    /// Every sample is its own group.
    Identity,
    /// Named groups of sample indices.
    Explicit(Vec<(String, Vec<usize>)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub weight: f64,
    pub groups: LevelGroups,
}

/// Weighted aggregation levels over the samples of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySpec {
    levels: Vec<Level>,
}

impl HierarchySpec {
    pub fn new(levels: Vec<Level>) -> Result<Self, LossError> {
        if levels.is_empty() {
            return Err(LossError::InvalidHierarchy {
                level: 0,
                reason: "no levels".into(),
            });
        }
        for (a, level) in levels.iter().enumerate() {
            if !(level.weight.is_finite() && level.weight >= 0.0) {
                return Err(LossError::InvalidHierarchy {
                    level: a,
                    reason: format!("weight {} must be finite and nonnegative", level.weight),
                });
            }
        }
        if levels.iter().all(|l| l.weight == 0.0) {
            return Err(LossError::InvalidHierarchy {
                level: 0,
                reason: "all weights are zero".into(),
            });
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Sum of level weights; the hessian of every sample is twice this.
    pub fn total_weight(&self) -> f64 {
        self.levels.iter().map(|l| l.weight).sum()
    }

    /// Group index of every sample on every level, checking that each level
    /// partitions `0..n`.
    pub fn assignments(&self, n: usize) -> Result<Vec<Vec<usize>>, LossError> {
        self.levels
            .iter()
            .enumerate()
            .map(|(a, level)| match &level.groups {
                LevelGroups::Identity => Ok((0..n).collect()),
                LevelGroups::Explicit(groups) => {
                    let mut assign = vec![usize::MAX; n];
                    for (gi, (key, members)) in groups.iter().enumerate() {
                        for &i in members {
                            if i >= n {
                                return Err(LossError::IndexOutOfRange { index: i, n });
                            }
                            if assign[i] != usize::MAX {
                                return Err(LossError::InvalidHierarchy {
                                    level: a,
                                    reason: format!("sample {i} appears twice (group `{key}`)"),
                                });
                            }
                            assign[i] = gi;
                        }
                    }
                    if let Some(i) = assign.iter().position(|&g| g == usize::MAX) {
                        return Err(LossError::InvalidHierarchy {
                            level: a,
                            reason: format!("sample {i} is not in any group"),
                        });
                    }
                    Ok(assign)
                }
            })
            .collect()
    }

    /// Number of groups on a level for `n` samples.
    pub fn n_groups(&self, level: usize, n: usize) -> usize {
        match &self.levels[level].groups {
            LevelGroups::Identity => n,
            LevelGroups::Explicit(g) => g.len(),
        }
    }

    /// Group keys on a level.
    pub fn group_keys(&self, level: usize, n: usize) -> Vec<String> {
        match &self.levels[level].groups {
            LevelGroups::Identity => (0..n).map(|i| i.to_string()).collect(),
            LevelGroups::Explicit(g) => g.iter().map(|(k, _)| k.clone()).collect(),
        }
    }

    /// Parses the text format:
    ///
    /// ```text
    /// levels=2
    /// level 0 weight=0.5 identity
    /// level 1 weight=0.5
    /// group total: 0,1,2
    /// ```
    pub fn parse(text: &str) -> Result<Self, LossError> {
        let err = |line: usize, reason: &str| LossError::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (ln, first) = lines.next().ok_or_else(|| err(1, "empty hierarchy file"))?;
        let declared: usize = first
            .strip_prefix("levels=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| err(ln, "expected `levels=<k>`"))?;

        let mut levels: Vec<Level> = Vec::new();
        for (ln, line) in lines {
            if let Some(rest) = line.strip_prefix("level ") {
                let mut parts = rest.split_whitespace();
                let idx: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(ln, "bad level index"))?;
                if idx != levels.len() {
                    return Err(err(ln, "levels must be numbered consecutively from 0"));
                }
                let weight: f64 = parts
                    .next()
                    .and_then(|v| v.strip_prefix("weight="))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(ln, "expected `weight=<w>`"))?;
                let groups = match parts.next() {
                    None => LevelGroups::Explicit(Vec::new()),
                    Some("identity") => LevelGroups::Identity,
                    Some(other) => return Err(err(ln, &format!("unexpected token `{other}`"))),
                };
                levels.push(Level { weight, groups });
            } else if let Some(rest) = line.strip_prefix("group ") {
                let (key, members) = rest.split_once(':').ok_or_else(|| err(ln, "expected `group <key>: i1,i2,...`"))?;
                let members = members
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| err(ln, &format!("bad index `{s}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                match levels.last_mut() {
                    Some(Level {
                        groups: LevelGroups::Explicit(groups),
                        ..
                    }) => groups.push((key.trim().to_string(), members)),
                    Some(_) => return Err(err(ln, "identity level cannot list groups")),
                    None => return Err(err(ln, "group before any level")),
                }
            } else {
                return Err(err(ln, &format!("unrecognized line `{line}`")));
            }
        }
        if levels.len() != declared {
            return Err(err(ln, &format!("declared {declared} levels, found {}", levels.len())));
        }
        for (a, level) in levels.iter().enumerate() {
            if let LevelGroups::Explicit(groups) = &level.groups {
                let mut keys = HashSet::new();
                if let Some((k, _)) = groups.iter().find(|(k, _)| !keys.insert(k.as_str())) {
                    return Err(LossError::InvalidHierarchy {
                        level: a,
                        reason: format!("duplicate group key `{k}`"),
                    });
                }
            }
        }
        Self::new(levels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LossError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("levels={}\n", self.levels.len());
        for (a, level) in self.levels.iter().enumerate() {
            match &level.groups {
                LevelGroups::Identity => writeln!(s, "level {a} weight={:?} identity", level.weight).unwrap(),
                LevelGroups::Explicit(groups) => {
                    writeln!(s, "level {a} weight={:?}", level.weight).unwrap();
                    for (key, members) in groups {
                        let m: Vec<String> = members.iter().map(usize::to_string).collect();
                        writeln!(s, "group {key}: {}", m.join(",")).unwrap();
                    }
                }
            }
        }
        s
    }
}

/// Sums `values` per group given a sample-to-group assignment.
pub(crate) fn group_sums(values: &[f64], assign: &[usize], n_groups: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_groups];
    for (&v, &g) in values.iter().zip(assign) {
        sums[g] += v;
    }
    sums
}

pub fn hier_wmse_loss(y: &[f64], yhat: &[f64], spec: &HierarchySpec) -> Result<f64, LossError> {
    check_lengths(y, yhat)?;
    let n = y.len();
    let resid: Vec<f64> = y.iter().zip(yhat).map(|(y, p)| y - p).collect();
    let assignments = spec.assignments(n)?;
    let mut total = 0.0;
    for (a, (level, assign)) in spec.levels.iter().zip(&assignments).enumerate() {
        let sums = group_sums(&resid, assign, spec.n_groups(a, n));
        total += level.weight * sums.iter().map(|r| r * r).sum::<f64>();
    }
    Ok(total)
}

pub fn hier_wmse_gradhess(y: &[f64], yhat: &[f64], spec: &HierarchySpec) -> Result<GradHess, LossError> {
    check_lengths(y, yhat)?;
    let n = y.len();
    let resid: Vec<f64> = y.iter().zip(yhat).map(|(y, p)| y - p).collect();
    let assignments = spec.assignments(n)?;
    let mut g = vec![0.0; n];
    for (a, (level, assign)) in spec.levels.iter().zip(&assignments).enumerate() {
        let sums = group_sums(&resid, assign, spec.n_groups(a, n));
        g.par_iter_mut()
            .zip(assign.par_iter())
            .for_each(|(gi, &grp)| *gi += -2.0 * level.weight * sums[grp]);
    }
    Ok(GradHess {
        g,
        h: vec![2.0 * spec.total_weight(); n],
    })
}

/// Hierarchical weighted squared error over a fixed training set.
#[derive(Debug, Clone)]
pub struct HierWmse {
    pub spec: HierarchySpec,
}

impl GradHessProvider for HierWmse {
    fn gradhess(&self, y: &[f64], yhat: &[f64]) -> Result<GradHess, LossError> {
        hier_wmse_gradhess(y, yhat, &self.spec)
    }

    fn loss(&self, y: &[f64], yhat: &[f64]) -> Result<f64, LossError> {
        hier_wmse_loss(y, yhat, &self.spec)
    }
}

/// Default relative finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient and hessian of a per-sample loss `l(y, yhat)`.
/// The step is scaled by `max(1, |yhat|)`.
pub fn numeric_gradhess<F>(loss: F, y: &[f64], yhat: &[f64], step: f64) -> Result<GradHess, LossError>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    check_lengths(y, yhat)?;
    let pairs: Vec<Result<(f64, f64), LossError>> = y
        .par_iter()
        .zip(yhat)
        .enumerate()
        .map(|(i, (&y, &p))| {
            let d = step * p.abs().max(1.0);
            let (lp, l0, lm) = (loss(y, p + d), loss(y, p), loss(y, p - d));
            if !(lp.is_finite() && l0.is_finite() && lm.is_finite()) {
                return Err(LossError::NonFiniteLoss { index: i });
            }
            Ok(((lp - lm) / (2.0 * d), (lp - 2.0 * l0 + lm) / (d * d)))
        })
        .collect();
    let mut g = Vec::with_capacity(y.len());
    let mut h = Vec::with_capacity(y.len());
    for r in pairs {
        let (gi, hi) = r?;
        g.push(gi);
        h.push(hi);
    }
    Ok(GradHess { g, h })
}

/// Finite-difference provider for a separable per-sample loss.
pub struct NumericLoss<F> {
    pub loss: F,
    pub step: f64,
}

impl<F: Fn(f64, f64) -> f64 + Sync> NumericLoss<F> {
    pub fn new(loss: F) -> Self {
        Self {
            loss,
            step: DEFAULT_FD_STEP,
        }
    }
}

impl<F: Fn(f64, f64) -> f64 + Sync> GradHessProvider for NumericLoss<F> {
    fn gradhess(&self, y: &[f64], yhat: &[f64]) -> Result<GradHess, LossError> {
        numeric_gradhess(&self.loss, y, yhat, self.step)
    }

    fn loss(&self, y: &[f64], yhat: &[f64]) -> Result<f64, LossError> {
        check_lengths(y, yhat)?;
        Ok(y.iter().zip(yhat).map(|(&y, &p)| (self.loss)(y, p)).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_series() -> HierarchySpec {
        HierarchySpec::new(vec![
            Level {
                weight: 0.25,
                groups: LevelGroups::Explicit(vec![("s1".into(), vec![0]), ("s2".into(), vec![1])]),
            },
            Level {
                weight: 0.5,
                groups: LevelGroups::Explicit(vec![("total".into(), vec![0, 1])]),
            },
        ])
        .unwrap()
    }

    fn identity(w: f64) -> HierarchySpec {
        HierarchySpec::new(vec![Level {
            weight: w,
            groups: LevelGroups::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_gradhess(&[1.0], &[1.0]).unwrap(), GradHess { g: vec![0.0], h: vec![2.0] });
        assert_eq!(
            mse_gradhess(&[1.0, 2.0], &[0.0, 0.0]).unwrap(),
            GradHess {
                g: vec![-2.0, -4.0],
                h: vec![2.0, 2.0]
            }
        );
        assert_eq!(mse_gradhess(&[0.0], &[3.0]).unwrap().g, vec![6.0]);
        assert!(matches!(mse_gradhess(&[0.0], &[1.0, 2.0]), Err(LossError::LengthMismatch { .. })));
    }

    #[test]
    fn hier_loss_examples() {
        assert_eq!(hier_wmse_loss(&[1.0, 2.0], &[0.0, 0.0], &identity(1.0)).unwrap(), 5.0);
        assert_eq!(hier_wmse_loss(&[1.0, 2.0], &[0.0, 0.0], &two_series()).unwrap(), 5.75);
        assert_eq!(hier_wmse_loss(&[1.0, 2.0], &[1.0, 2.0], &two_series()).unwrap(), 0.0);
    }

    #[test]
    fn hier_gradhess_examples() {
        let gh = hier_wmse_gradhess(&[1.0, 2.0], &[0.0, 0.0], &two_series()).unwrap();
        assert_eq!(gh.g[0], -3.5);
        assert_eq!(gh.h[0], 1.5);
        // g_2 = -2*0.25*2 - 2*0.5*3
        assert_eq!(gh.g[1], -4.0);

        let y = [0.5, -1.0, 3.0];
        let p = [1.0, 1.0, 1.0];
        let a = hier_wmse_gradhess(&y, &p, &identity(1.0)).unwrap();
        assert_eq!(a, mse_gradhess(&y, &p).unwrap());

        let z = hier_wmse_gradhess(&y, &y, &two_series_three()).unwrap();
        assert!(z.g.iter().all(|&g| g == 0.0));
        assert!(z.h.iter().all(|&h| h == z.h[0]));
    }

    fn two_series_three() -> HierarchySpec {
        HierarchySpec::new(vec![
            Level {
                weight: 0.3,
                groups: LevelGroups::Identity,
            },
            Level {
                weight: 0.7,
                groups: LevelGroups::Explicit(vec![("a".into(), vec![0, 2]), ("b".into(), vec![1])]),
            },
        ])
        .unwrap()
    }

    #[test]
    fn out_of_range_and_partition_errors() {
        let spec = two_series();
        assert!(matches!(
            hier_wmse_loss(&[1.0], &[0.0], &spec),
            Err(LossError::IndexOutOfRange { index: 1, n: 1 })
        ));
        let bad = HierarchySpec::new(vec![Level {
            weight: 1.0,
            groups: LevelGroups::Explicit(vec![("a".into(), vec![0])]),
        }])
        .unwrap();
        assert!(matches!(bad.assignments(2), Err(LossError::InvalidHierarchy { .. })));
        assert!(HierarchySpec::new(vec![]).is_err());
        assert!(HierarchySpec::new(vec![Level {
            weight: 0.0,
            groups: LevelGroups::Identity
        }])
        .is_err());
    }

    #[test]
    fn numeric_examples() {
        let gh = numeric_gradhess(|y, p| (y - p) * (y - p), &[1.0], &[0.0], 1e-5).unwrap();
        assert!((gh.g[0] + 2.0).abs() < 1e-6);
        assert!((gh.h[0] - 2.0).abs() < 1e-3);

        let gh = numeric_gradhess(|y: f64, p: f64| (y - p).abs(), &[0.0], &[5.0], 1e-5).unwrap();
        assert!((gh.g[0] - 1.0).abs() < 1e-6);
        assert!(gh.h[0].abs() < 1e-3);

        let gh = numeric_gradhess(|_, _| 3.0, &[0.0, 1.0], &[5.0, -2.0], 1e-5).unwrap();
        assert_eq!(gh.g, vec![0.0, 0.0]);
        assert_eq!(gh.h, vec![0.0, 0.0]);

        let err = numeric_gradhess(|_, p: f64| if p > 0.0 { f64::NAN } else { 0.0 }, &[0.0], &[0.0], 1e-5);
        assert!(matches!(err, Err(LossError::NonFiniteLoss { index: 0 })));
    }

    #[test]
    fn parse_roundtrip() {
        let text = "levels=2\nlevel 0 weight=0.5 identity\n# total\nlevel 1 weight=0.5\ngroup total: 0, 1,2\n";
        let spec = HierarchySpec::parse(text).unwrap();
        assert_eq!(spec.levels()[0].groups, LevelGroups::Identity);
        assert_eq!(
            spec.levels()[1].groups,
            LevelGroups::Explicit(vec![("total".into(), vec![0, 1, 2])])
        );
        assert_eq!(HierarchySpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(HierarchySpec::parse(""), Err(LossError::Parse { .. })));
        assert!(matches!(
            HierarchySpec::parse("levels=2\nlevel 0 weight=1 identity\n"),
            Err(LossError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            HierarchySpec::parse("levels=1\ngroup a: 1\n"),
            Err(LossError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            HierarchySpec::parse("levels=1\nlevel 0 weight=1\ngroup a: 1,x\n"),
            Err(LossError::Parse { line: 3, .. })
        ));
    }

    fn random_spec(n: usize, cuts: &[usize]) -> HierarchySpec {
        // identity, a contiguous-block level, and a total level
        let mut blocks = Vec::new();
        let mut start = 0;
        for (k, &c) in cuts.iter().chain(std::iter::once(&n)).enumerate() {
            let end = c.min(n).max(start);
            if end > start {
                blocks.push((format!("b{k}"), (start..end).collect()));
            }
            start = end;
        }
        HierarchySpec::new(vec![
            Level {
                weight: 0.4,
                groups: LevelGroups::Identity,
            },
            Level {
                weight: 0.35,
                groups: LevelGroups::Explicit(blocks),
            },
            Level {
                weight: 0.25,
                groups: LevelGroups::Explicit(vec![("total".into(), (0..n).collect())]),
            },
        ])
        .unwrap()
    }

    proptest! {
        #[test]
        fn numeric_matches_mse(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30)
        ) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = mse_gradhess(&y, &p).unwrap();
            let n = numeric_gradhess(|y, p| (y - p) * (y - p), &y, &p, DEFAULT_FD_STEP).unwrap();
            for i in 0..y.len() {
                prop_assert!((a.g[i] - n.g[i]).abs() <= 1e-5 * a.g[i].abs().max(1.0));
                prop_assert!((a.h[i] - n.h[i]).abs() <= 1e-3 * a.h[i].abs());
                prop_assert!(a.h[i] > 0.0);
            }
        }

        #[test]
        fn hier_gradient_is_directional_derivative(
            data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -1.0f64..1.0), 2..25),
            cut in 1usize..24,
        ) {
            let n = data.len();
            let y: Vec<f64> = data.iter().map(|t| t.0).collect();
            let p: Vec<f64> = data.iter().map(|t| t.1).collect();
            let d: Vec<f64> = data.iter().map(|t| t.2).collect();
            let spec = random_spec(n, &[cut]);
            let gh = hier_wmse_gradhess(&y, &p, &spec).unwrap();
            prop_assert!(gh.h.iter().all(|&h| h > 0.0));
            let eps = 1e-4;
            let plus: Vec<f64> = p.iter().zip(&d).map(|(p, d)| p + eps * d).collect();
            let minus: Vec<f64> = p.iter().zip(&d).map(|(p, d)| p - eps * d).collect();
            let fd = (hier_wmse_loss(&y, &plus, &spec).unwrap() - hier_wmse_loss(&y, &minus, &spec).unwrap()) / (2.0 * eps);
            let dir: f64 = gh.g.iter().zip(&d).map(|(g, d)| g * d).sum();
            let scale = dir.abs().max(gh.g.iter().map(|g| g.abs()).sum::<f64>() * 1e-3).max(1e-3);
            prop_assert!((fd - dir).abs() <= 1e-6 * scale, "fd {} vs analytic {}", fd, dir);
        }
    }
}
