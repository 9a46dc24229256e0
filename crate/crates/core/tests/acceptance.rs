//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pgbm::boost::{predict_moments, train, train_with_report, BoostConfig, Ensemble, Validation, ValidationMetric};
use pgbm::data::{apply_bins, compute_bin_edges, load_csv, BinnedDataset, RawDataset};
use pgbm::dist::{match_params, sample, DistSpec, Family};
use pgbm::loss::{hier_wmse_gradhess, hier_wmse_loss, HierWmse, HierarchySpec, Level, LevelGroups, Mse};
use pgbm::metrics::{crps_mean, crps_normal, hierarchical_report, rmse, Forecast, Metric};
use pgbm::tree::{leaf_stats, TreeConfig};
use pgbm::PredictiveMoments;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Tolerances.
const LEAF_MU_MEDIAN_REL: f64 = 0.05;
const LEAF_VAR_MEDIAN_REL: f64 = 0.15;
const CLASSIC_REL: f64 = 1e-9;
const GRAD_REL: f64 = 1e-5;
const HESS_REL: f64 = 1e-3;
const ANALYTIC_REL: f64 = 1e-9;
const EMPIRICAL_SE: f64 = 3.0;
const HETERO_MIN_CORR: f64 = 0.8;
const HETERO_MIN_CRPS_GAIN: f64 = 0.10;
const WINE_RMSE: (f64, f64) = (0.60, 0.20);
const WINE_CRPS: (f64, f64) = (0.33, 0.20);
const SWEEP_MIN_ENDPOINT_GAP: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

// 1. Leaf moments against a resampling Monte-Carlo estimate.

fn leaf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let lambda = 1.0;
    let draws = 10_000;
    let sizes = [10usize, 100, 1000];
    let mut mu_err = vec![Vec::new(); 3];
    let mut var_err = vec![Vec::new(); 3];
    for leaf in 0..1000 {
        let which = leaf % 3;
        let n = sizes[which];
        let mean_g = rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sd_g = rng.random_range(0.2..1.0);
        let s = rng.random_range(0.05..0.2);
        let corr = rng.random_range(-0.8..0.8);
        let (mut g, mut h) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let (z1, z2) = (normal(&mut rng), normal(&mut rng));
            h.push((s * z1 - s * s / 2.0).exp());
            g.push(mean_g + sd_g * (corr * z1 + (1.0 - corr * corr).sqrt() * z2));
        }
        let st = leaf_stats(&g, &h, lambda).expect("leaf stats");
        let lb = lambda / n as f64;
        let xs: Vec<f64> = (0..draws)
            .map(|_| {
                let i = rng.random_range(0..n);
                g[i] / (h[i] + lb)
            })
            .collect();
        let m = xs.iter().sum::<f64>() / draws as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (draws - 1) as f64;
        mu_err[which].push(rel(st.mu, m));
        var_err[which].push(rel(st.var, v));
    }
    let all_mu = median(mu_err.concat());
    let all_var = median(var_err.concat());
    let per_n: Vec<String> = sizes
        .iter()
        .enumerate()
        .map(|(k, n)| {
            format!(
                "n={n}: {:.4}/{:.4}",
                median(mu_err[k].clone()),
                median(var_err[k].clone())
            )
        })
        .collect();
    Outcome {
        pass: all_mu <= LEAF_MU_MEDIAN_REL && all_var <= LEAF_VAR_MEDIAN_REL,
        detail: format!(
            "median rel err mu {all_mu:.4} (<= {LEAF_MU_MEDIAN_REL}), var {all_var:.4} (<= {LEAF_VAR_MEDIAN_REL}); mu/var by size [{}]",
            per_n.join(", ")
        ),
    }
}

// 2. Classic boosting equivalence under squared error.

struct RefSplit {
    feature: usize,
    threshold: u16,
    left: RefNode,
    right: RefNode,
}

enum RefNode {
    Split(Box<RefSplit>),
    Leaf(f64),
}

fn ref_route(node: &RefNode, b: &BinnedDataset, i: usize) -> f64 {
    match node {
        RefNode::Leaf(w) => *w,
        RefNode::Split(s) => {
            if b.bin(i, s.feature) <= s.threshold {
                ref_route(&s.left, b, i)
            } else {
                ref_route(&s.right, b, i)
            }
        }
    }
}

/// Exhaustive best split of one leaf: explicit sums for every threshold.
fn ref_best_split(b: &BinnedDataset, g: &[f64], h: &[f64], idx: &[usize], cfg: &TreeConfig) -> Option<(usize, u16, f64)> {
    let lambda = cfg.lambda;
    let gt: f64 = idx.iter().map(|&i| g[i]).sum();
    let ht: f64 = idx.iter().map(|&i| h[i]).sum();
    let parent = gt * gt / (ht + lambda);
    let mut best: Option<(usize, u16, f64)> = None;
    for j in 0..b.n_features() {
        for t in 0..b.n_bins(j).saturating_sub(1) {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0);
            for &i in idx {
                if b.bin(i, j) as usize <= t {
                    gl += g[i];
                    hl += h[i];
                    nl += 1;
                }
            }
            let nr = idx.len() - nl;
            if nl < cfg.min_data_in_leaf || nr < cfg.min_data_in_leaf {
                continue;
            }
            let (gr, hr) = (gt - gl, ht - hl);
            let (sl, sr) = (gl * gl / (hl + lambda), gr * gr / (hr + lambda));
            let gain = 0.5 * (sl + sr - parent);
            let floor = 1e-12 * (sl.abs() + sr.abs() + parent.abs());
            if gain > cfg.min_split_gain && gain > floor && best.is_none_or(|bb| gain > bb.2) {
                best = Some((j, t as u16, gain));
            }
        }
    }
    best
}

/// Best-first tree with classic leaf weights `-G / (H + lambda)`.
fn ref_tree(b: &BinnedDataset, g: &[f64], h: &[f64], cfg: &TreeConfig) -> RefNode {
    struct Work {
        idx: Vec<usize>,
        best: Option<(usize, u16, f64)>,
        path: Vec<bool>,
    }
    let all: Vec<usize> = (0..b.n_samples()).collect();
    let mut work = vec![Work {
        best: ref_best_split(b, g, h, &all, cfg),
        idx: all,
        path: vec![],
    }];
    let mut splits: Vec<(Vec<bool>, usize, u16)> = Vec::new();
    while work.len() < cfg.max_leaves {
        let mut pick: Option<(usize, f64)> = None;
        for (p, w) in work.iter().enumerate() {
            if let Some((_, _, gain)) = w.best {
                if pick.is_none_or(|(_, bg)| gain > bg) {
                    pick = Some((p, gain));
                }
            }
        }
        let Some((pos, _)) = pick else { break };
        let w = work.remove(pos);
        let (j, t, _) = w.best.unwrap();
        let left: Vec<usize> = w.idx.iter().copied().filter(|&i| b.bin(i, j) <= t).collect();
        let right: Vec<usize> = w.idx.iter().copied().filter(|&i| b.bin(i, j) > t).collect();
        splits.push((w.path.clone(), j, t));
        let mut lp = w.path.clone();
        lp.push(true);
        let mut rp = w.path;
        rp.push(false);
        work.insert(
            pos,
            Work {
                best: ref_best_split(b, g, h, &right, cfg),
                idx: right,
                path: rp,
            },
        );
        work.insert(
            pos,
            Work {
                best: ref_best_split(b, g, h, &left, cfg),
                idx: left,
                path: lp,
            },
        );
    }
    fn build(path: &mut Vec<bool>, splits: &[(Vec<bool>, usize, u16)], leaves: &[(Vec<bool>, f64)]) -> RefNode {
        if let Some((_, j, t)) = splits.iter().find(|s| &s.0 == path) {
            path.push(true);
            let left = build(path, splits, leaves);
            path.pop();
            path.push(false);
            let right = build(path, splits, leaves);
            path.pop();
            RefNode::Split(Box::new(RefSplit {
                feature: *j,
                threshold: *t,
                left,
                right,
            }))
        } else {
            RefNode::Leaf(leaves.iter().find(|l| &l.0 == path).expect("leaf").1)
        }
    }
    let leaves: Vec<(Vec<bool>, f64)> = work
        .into_iter()
        .map(|w| {
            let gs: f64 = w.idx.iter().map(|&i| g[i]).sum();
            let hs: f64 = w.idx.iter().map(|&i| h[i]).sum();
            (w.path, -gs / (hs + cfg.lambda))
        })
        .collect();
    build(&mut Vec::new(), &splits, &leaves)
}

fn classic_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for d in 0..5 {
        let n = rng.random_range(100..=500);
        let p = rng.random_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r[0].sin() * 2.0 + r[1] * r[1] * 0.3 + 0.5 * normal(&mut rng))
            .collect();
        let data = RawDataset::from_rows(&rows, y.clone()).unwrap();
        let cfg = BoostConfig {
            n_estimators: 40,
            learning_rate: 0.1,
            tree: TreeConfig {
                max_leaves: 8,
                max_bins: 32,
                lambda: 1.0,
                min_data_in_leaf: 1 + d,
                ..TreeConfig::default()
            },
            ..BoostConfig::default()
        };
        let model = train(&data, &Mse, &cfg, None).unwrap();
        let got = predict_moments(&model, &data.features).unwrap().mu;

        let edges = compute_bin_edges(&data, cfg.tree.max_bins).unwrap();
        let b = apply_bins(&data, &edges).unwrap();
        let mut pred = vec![y.iter().sum::<f64>() / n as f64; n];
        for _ in 0..cfg.n_estimators {
            let g: Vec<f64> = (0..n).map(|i| 2.0 * (pred[i] - y[i])).collect();
            let h = vec![2.0; n];
            let tree = ref_tree(&b, &g, &h, &cfg.tree);
            for (i, p) in pred.iter_mut().enumerate() {
                *p += cfg.learning_rate * ref_route(&tree, &b, i);
            }
        }
        for (a, r) in got.iter().zip(&pred) {
            worst = worst.max(rel(*a, *r));
        }
    }
    Outcome {
        pass: worst <= CLASSIC_REL,
        detail: format!("max rel diff over 5 datasets {worst:.3e} (<= {CLASSIC_REL:e})"),
    }
}

// 3. Hierarchical gradient against finite differences.

fn random_hierarchy(rng: &mut ChaCha8Rng, n: usize) -> HierarchySpec {
    let k = rng.random_range(2..=(n / 2).max(2));
    let mut mid: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        mid[if i < k { i } else { rng.random_range(0..k) }].push(i);
    }
    HierarchySpec::new(vec![
        Level {
            weight: rng.random_range(0.1..1.0),
            groups: LevelGroups::Identity,
        },
        Level {
            weight: rng.random_range(0.1..1.0),
            groups: LevelGroups::Explicit(mid.into_iter().enumerate().map(|(g, m)| (format!("g{g}"), m)).collect()),
        },
        Level {
            weight: rng.random_range(0.1..1.0),
            groups: LevelGroups::Explicit(vec![("total".into(), (0..n).collect())]),
        },
    ])
    .unwrap()
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(3..=50);
        let spec = random_hierarchy(&mut rng, n);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let yhat: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gh = hier_wmse_gradhess(&y, &yhat, &spec).unwrap();
        let loss = |p: &[f64]| hier_wmse_loss(&y, p, &spec).unwrap();
        let l0 = loss(&yhat);
        for i in 0..n {
            let shifted = |d: f64| {
                let mut p = yhat.clone();
                p[i] += d;
                loss(&p)
            };
            let dg = 1e-4;
            let fd_g = (shifted(dg) - shifted(-dg)) / (2.0 * dg);
            let dh = 1e-2;
            let fd_h = (shifted(dh) - 2.0 * l0 + shifted(-dh)) / (dh * dh);
            worst_g = worst_g.max(rel(gh.g[i], fd_g));
            worst_h = worst_h.max(rel(gh.h[i], fd_h));
        }
    }
    Outcome {
        pass: worst_g <= GRAD_REL && worst_h <= HESS_REL,
        detail: format!("max rel err gradient {worst_g:.3e} (<= {GRAD_REL:e}), hessian {worst_h:.3e} (<= {HESS_REL:e})"),
    }
}

// 4. Moment matching.

fn moment_matching() -> Outcome {
    let points = [(3.0, 4.0), (10.0, 30.0), (0.7, 0.02), (2.0, 9.0)];
    let draws = 100_000;
    let mut worst_analytic = 0.0f64;
    let mut worst_z = 0.0f64;
    let mut worst_at = String::new();
    for family in Family::ALL {
        for (k, &(mu, var)) in points.iter().enumerate() {
            if family == Family::NegativeBinomial && var <= mu {
                // underdispersed moments have no negative binomial
                continue;
            }
            let p = match_params(family, mu, var).unwrap();
            worst_analytic = worst_analytic.max(rel(p.mean(), mu));
            if family != Family::Poisson {
                worst_analytic = worst_analytic.max(rel(p.variance(), var));
            }
            let m = PredictiveMoments {
                mu: vec![mu],
                var: vec![var],
            };
            let s = sample(&m, &DistSpec::new(family), draws, 400 + k as u64);
            assert_eq!(s.fallback_rows, 0);
            let x = s.row(0);
            let nf = draws as f64;
            let mean = x.iter().sum::<f64>() / nf;
            let c2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
            let c4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
            let s2 = c2 * nf / (nf - 1.0);
            let z_mean = (mean - mu).abs() / (c2 / nf).sqrt();
            let mut z = z_mean;
            if family != Family::Poisson {
                let se_var = ((c4 - c2 * c2) / nf).sqrt();
                z = z.max((s2 - var).abs() / se_var);
            }
            if z > worst_z {
                worst_z = z;
                worst_at = format!("{family} at ({mu}, {var})");
            }
        }
    }
    Outcome {
        pass: worst_analytic <= ANALYTIC_REL && worst_z <= EMPIRICAL_SE,
        detail: format!(
            "max analytic rel err {worst_analytic:.3e} (<= {ANALYTIC_REL:e}); max empirical |z| {worst_z:.2} (<= {EMPIRICAL_SE}) from {worst_at}"
        ),
    }
}

// 5 and 7. Heteroscedastic synthetic data.

fn hetero_data(n: usize, seed: u64) -> (RawDataset, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-3.0..3.0);
        let s = 0.1 + x.abs();
        rows.push(vec![x]);
        y.push(x.sin() + s * normal(&mut rng));
        scale.push(s);
    }
    (RawDataset::from_rows(&rows, y).unwrap(), scale)
}

struct Hetero {
    model: Ensemble,
    train: RawDataset,
    test: RawDataset,
    test_scale: Vec<f64>,
}

fn hetero_setup() -> Hetero {
    let (train_set, _) = hetero_data(10_000, 505);
    let (test, test_scale) = hetero_data(5_000, 506);
    let cfg = BoostConfig {
        n_estimators: 500,
        learning_rate: 0.1,
        tree: TreeConfig {
            max_leaves: 16,
            max_bins: 64,
            lambda: 1.0,
            min_data_in_leaf: 1,
            ..TreeConfig::default()
        },
        ..BoostConfig::default()
    };
    let model = train(&train_set, &Mse, &cfg, None).unwrap();
    Hetero {
        model,
        train: train_set,
        test,
        test_scale,
    }
}

fn normal_crps(m: &PredictiveMoments, y: &[f64], seed: u64) -> f64 {
    crps_mean(&sample(m, &DistSpec::new(Family::Normal), 1000, seed), y).unwrap()
}

fn hetero_recovery(h: &Hetero) -> Outcome {
    let pred = predict_moments(&h.model, &h.test.features).unwrap();
    let corr = pearson(&pred.std(), &h.test_scale);
    let train_pred = predict_moments(&h.model, &h.train.features).unwrap();
    let resid_var = h
        .train
        .target
        .iter()
        .zip(&train_pred.mu)
        .map(|(y, m)| (y - m) * (y - m))
        .sum::<f64>()
        / h.train.n_samples() as f64;
    let baseline = PredictiveMoments {
        mu: pred.mu.clone(),
        var: vec![resid_var; pred.len()],
    };
    let crps_model = normal_crps(&pred, &h.test.target, 7);
    let crps_base = normal_crps(&baseline, &h.test.target, 7);
    let gain = 1.0 - crps_model / crps_base;
    // same comparison with the true noise scale, in closed form
    let closed = |sd: &dyn Fn(usize) -> f64| -> f64 {
        (0..pred.len())
            .map(|i| crps_normal(pred.mu[i], sd(i), h.test.target[i]))
            .sum::<f64>()
            / pred.len() as f64
    };
    let ceiling = 1.0 - closed(&|i| h.test_scale[i]) / closed(&|_| resid_var.sqrt());
    Outcome {
        pass: corr >= HETERO_MIN_CORR && gain >= HETERO_MIN_CRPS_GAIN,
        detail: format!(
            "corr(sigma, true scale) {corr:.4} (>= {HETERO_MIN_CORR}); CRPS {crps_model:.4} vs constant-variance {crps_base:.4}, gain {:.1}% (>= {:.0}%; true-scale ceiling {:.1}%); rho {:.4}",
            100.0 * gain,
            100.0 * HETERO_MIN_CRPS_GAIN,
            100.0 * ceiling,
            h.model.rho
        ),
    }
}

fn rho_sweep(h: &Hetero) -> Outcome {
    let paths = h.model.route_all(&h.test.features).unwrap();
    let curve: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let rho = k as f64 / 100.0;
            (rho, normal_crps(&h.model.accumulate(&paths, rho), &h.test.target, 7))
        })
        .collect();
    let (imin, &(rmin, cmin)) = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .unwrap();
    let gap0 = curve[0].1 / cmin - 1.0;
    let gap9 = curve[9].1 / cmin - 1.0;
    let shape: Vec<String> = curve.iter().map(|(_, c)| format!("{c:.4}")).collect();
    Outcome {
        pass: imin > 0 && imin < 9 && gap0 >= SWEEP_MIN_ENDPOINT_GAP && gap9 >= SWEEP_MIN_ENDPOINT_GAP,
        detail: format!(
            "argmin rho {rmin:.2}; endpoints worse by {:.1}% and {:.1}% (>= {:.0}%); curve [{}]",
            100.0 * gap0,
            100.0 * gap9,
            100.0 * SWEEP_MIN_ENDPOINT_GAP,
            shape.join(" ")
        ),
    }
}

// 6. Wine quality.

fn wine() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/winequality-red.csv");
    let all = load_csv(&path, "quality").unwrap();
    let n = all.n_samples();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let n_train = (0.9 * n as f64).round() as usize;
    let (train_idx, test_idx) = idx.split_at(n_train);
    let n_inner = (0.8 * n_train as f64).round() as usize;
    let (inner_idx, valid_idx) = train_idx.split_at(n_inner);

    let base = BoostConfig {
        n_estimators: 2000,
        learning_rate: 0.1,
        bagging_fraction: 1.0,
        tree: TreeConfig {
            max_leaves: 16,
            max_bins: 64,
            lambda: 1.0,
            min_split_gain: 0.0,
            min_data_in_leaf: 1,
            feature_fraction: 1.0,
            seed: 1,
        },
        seed: 1,
        early_stopping_rounds: Some(20),
        ..BoostConfig::default()
    };
    let inner = all.select_rows(inner_idx);
    let valid = all.select_rows(valid_idx);
    let (_, report) = train_with_report(
        &inner,
        &Mse,
        &base,
        Some(Validation {
            data: &valid,
            metric: ValidationMetric::Rmse,
        }),
        |_, _| {},
    )
    .unwrap();
    let cfg = BoostConfig {
        n_estimators: report.best_iteration.max(1),
        early_stopping_rounds: None,
        ..base
    };
    let train_set = all.select_rows(train_idx);
    let test = all.select_rows(test_idx);
    let model = train(&train_set, &Mse, &cfg, None).unwrap();
    let pred = predict_moments(&model, &test.features).unwrap();
    let r = rmse(&test.target, &pred.mu).unwrap();
    let c = normal_crps(&pred, &test.target, 1);
    let closed = pred
        .mu
        .iter()
        .zip(pred.std())
        .zip(&test.target)
        .map(|((m, s), y)| crps_normal(*m, s, *y))
        .sum::<f64>()
        / test.n_samples() as f64;
    let within = |v: f64, (t, tol): (f64, f64)| (v - t).abs() <= tol * t;
    Outcome {
        pass: within(r, WINE_RMSE) && within(c, WINE_CRPS),
        detail: format!(
            "RMSE {r:.4} (target {} +/- {:.0}%), CRPS {c:.4} (target {} +/- {:.0}%; closed form {closed:.4}); {} trees",
            WINE_RMSE.0,
            100.0 * WINE_RMSE.1,
            WINE_CRPS.0,
            100.0 * WINE_CRPS.1,
            model.trees.len()
        ),
    }
}

// 8. Hierarchical objective.

struct Panel {
    data: RawDataset,
    spec: HierarchySpec,
}

/// 20 series in 4 groups of 5. Rows are ordered by time, then series.
/// A common shock per time step makes the series move together; the
/// features (series, group, weekday) cannot predict it.
fn panel(t0: usize, steps: usize, seed: u64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level: Vec<f64> = (0..20).map(|s| 5.0 + (s % 7) as f64).collect();
    let amp: Vec<f64> = (0..20).map(|s| 0.5 + 0.1 * (s % 5) as f64).collect();
    let beta: Vec<f64> = (0..20).map(|s| 0.8 + 0.05 * (s % 4) as f64).collect();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for t in t0..t0 + steps {
        let shock = normal(&mut rng);
        let day = (t % 7) as f64;
        for s in 0..20 {
            rows.push(vec![s as f64, (s / 5) as f64, day]);
            let season = amp[s] * (2.0 * std::f64::consts::PI * day / 7.0).sin();
            y.push(level[s] + season + beta[s] * shock + 0.5 * normal(&mut rng));
        }
    }
    let groups = |f: &dyn Fn(usize) -> String| -> LevelGroups {
        let mut map: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
        for i in 0..rows.len() {
            map.entry(f(i)).or_default().push(i);
        }
        LevelGroups::Explicit(map.into_iter().collect())
    };
    let spec = HierarchySpec::new(vec![
        Level {
            weight: 1.0,
            groups: LevelGroups::Identity,
        },
        Level {
            weight: 1.0,
            groups: groups(&|i| format!("t{}g{}", i / 20, (i % 20) / 5)),
        },
        Level {
            weight: 1.0,
            groups: groups(&|i| format!("t{}", i / 20)),
        },
    ])
    .unwrap();
    Panel {
        data: RawDataset::from_rows(&rows, y).unwrap(),
        spec,
    }
}

fn hierarchy_effect() -> Outcome {
    let train_panel = panel(0, 300, 808);
    let test_panel = panel(300, 100, 809);
    let cfg = BoostConfig {
        n_estimators: 200,
        learning_rate: 0.1,
        tree: TreeConfig {
            max_leaves: 16,
            max_bins: 64,
            lambda: 1.0,
            ..TreeConfig::default()
        },
        ..BoostConfig::default()
    };
    let score = |model: &Ensemble| -> (f64, f64) {
        let pred = predict_moments(model, &test_panel.data.features).unwrap();
        let s = sample(&pred, &DistSpec::new(Family::Normal), 1000, 9);
        let y = &test_panel.data.target;
        let r = hierarchical_report(y, Forecast::Point(&pred.mu), Some(&test_panel.spec), Metric::Rmse).unwrap();
        let c = hierarchical_report(y, Forecast::Samples(&s), Some(&test_panel.spec), Metric::Crps).unwrap();
        (r.levels[2].value, c.levels[2].value)
    };
    let mse = train(&train_panel.data, &Mse, &cfg, None).unwrap();
    let wmse = train(
        &train_panel.data,
        &HierWmse {
            spec: train_panel.spec.clone(),
        },
        &cfg,
        None,
    )
    .unwrap();
    let (r_mse, c_mse) = score(&mse);
    let (r_w, c_w) = score(&wmse);
    Outcome {
        pass: r_w <= r_mse && c_w < c_mse,
        detail: format!(
            "total-level RMSE wmse {r_w:.4} vs mse {r_mse:.4} (no worse); total-level CRPS wmse {c_w:.4} vs mse {c_mse:.4} (strictly better)"
        ),
    }
}

// 9. Determinism through the command line.

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = hetero_data(3_000, 909);
    let mut csv = String::from("x1,x2,y\n");
    let mut rng = ChaCha8Rng::seed_from_u64(910);
    for i in 0..data.n_samples() {
        csv.push_str(&format!("{},{},{}\n", data.features.get(i, 0), rng.random_range(0.0..1.0), data.target[i]));
    }
    let data_path = dir.path().join("d.csv");
    std::fs::write(&data_path, csv).unwrap();
    let bin = env!("CARGO_BIN_EXE_pgbm");
    let run = |threads: usize, tag: &str| -> (Vec<u8>, Vec<u8>) {
        let model = dir.path().join(format!("m_{tag}.txt"));
        let pred = dir.path().join(format!("p_{tag}.csv"));
        let st = Command::new(bin)
            .env("RAYON_NUM_THREADS", threads.to_string())
            .args(["train", "--target", "y", "--n-estimators", "60", "--bagging-fraction", "0.7"])
            .args(["--feature-fraction", "0.5", "--seed", "3", "--quiet"])
            .arg("--data")
            .arg(&data_path)
            .arg("--model-out")
            .arg(&model)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(st.success());
        let st = Command::new(bin)
            .env("RAYON_NUM_THREADS", threads.to_string())
            .args(["predict", "--target", "y", "--n-samples", "200", "--seed", "5"])
            .arg("--model")
            .arg(&model)
            .arg("--data")
            .arg(&data_path)
            .arg("--out")
            .arg(&pred)
            .status()
            .unwrap();
        assert!(st.success());
        (std::fs::read(&model).unwrap(), std::fs::read(&pred).unwrap())
    };
    let runs = [run(1, "1a"), run(1, "1b"), run(4, "4a"), run(4, "4b")];
    let identical = runs.iter().all(|r| *r == runs[0]);
    let loaded = pgbm::model_io::load(dir.path().join("m_1a.txt")).unwrap();
    let reloaded = pgbm::model_io::to_text(&loaded).into_bytes() == runs[0].0;
    Outcome {
        pass: identical && reloaded,
        detail: format!(
            "model and prediction files byte-identical across 2 runs x {{1, 4}} threads: {identical}; save/load/save identical: {reloaded}"
        ),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} [{id}] {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "leaf moment oracle", &mut leaf_oracle);
    report(2, "classic boosting equivalence", &mut classic_equivalence);
    report(3, "hierarchical gradient fidelity", &mut gradient_fidelity);
    report(4, "moment matching round trip", &mut moment_matching);
    let hetero = hetero_setup();
    report(5, "heteroscedastic recovery", &mut || hetero_recovery(&hetero));
    report(6, "wine quality", &mut wine);
    report(7, "rho sweep shape", &mut || rho_sweep(&hetero));
    report(8, "hierarchical objective", &mut hierarchy_effect);
    report(9, "determinism and persistence", &mut determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
