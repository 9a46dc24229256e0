//! Text model format.
//!
//! ```text
//! pgbmfmt v1
//! y0=5.6
//! alpha=0.1
//! rho=0.0316
//! n_train=1439
//! n_features=11
//! n_trees=2
//! config.max_leaves=16
//! ...
//! edges 0: 7.1,7.9
//! tree 0 nodes=1 leaves=2
//! node 0 3 5 l0 l1 0.125
//! leaf 0 0.5 0.25 700
//! leaf 1 -0.5 0.25 739
//! end
//! ```
//!
//! Node lines are `node id feature threshold left right gain`; children are
//! written `n<id>` for split nodes and `l<id>` for leaves. Leaf lines are
//! `leaf id mu var n`. Reals use the shortest decimal that parses back to the
//! same double, so save/load/save is byte-identical.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::boost::{BoostConfig, Ensemble, Rho, ValidationMetric};
use crate::data::{BinEdges, BinIndex};
use crate::tree::{LeafStats, NodeRef, SplitNode, Tree, TreeConfig};

pub const HEADER: &str = "pgbmfmt v1";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported model format `{0}` (expected `{HEADER}`)")]
    VersionMismatch(String),
    #[error("corrupt model at line {line}: {reason}")]
    CorruptModel { line: usize, reason: String },
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn child(r: NodeRef) -> String {
    match r {
        NodeRef::Split(i) => format!("n{i}"),
        NodeRef::Leaf(i) => format!("l{i}"),
    }
}

/// Renders a model in the text format.
pub fn to_text(model: &Ensemble) -> String {
    let c = &model.config;
    let t = &c.tree;
    let mut s = String::new();
    writeln!(s, "{HEADER}").unwrap();
    writeln!(s, "y0={}", real(model.y0)).unwrap();
    writeln!(s, "alpha={}", real(model.alpha)).unwrap();
    writeln!(s, "rho={}", real(model.rho)).unwrap();
    writeln!(s, "n_train={}", model.n_train).unwrap();
    writeln!(s, "n_features={}", model.edges.n_features()).unwrap();
    writeln!(s, "n_trees={}", model.trees.len()).unwrap();
    writeln!(s, "config.n_estimators={}", c.n_estimators).unwrap();
    writeln!(s, "config.learning_rate={}", real(c.learning_rate)).unwrap();
    writeln!(s, "config.bagging_fraction={}", real(c.bagging_fraction)).unwrap();
    writeln!(s, "config.rho={}", c.rho).unwrap();
    let esr = c.early_stopping_rounds.map_or("none".to_string(), |r| r.to_string());
    writeln!(s, "config.early_stopping_rounds={esr}").unwrap();
    writeln!(s, "config.early_stopping_metric={}", c.early_stopping_metric).unwrap();
    writeln!(s, "config.seed={}", c.seed).unwrap();
    writeln!(s, "config.max_leaves={}", t.max_leaves).unwrap();
    writeln!(s, "config.max_bin={}", t.max_bins).unwrap();
    writeln!(s, "config.lambda={}", real(t.lambda)).unwrap();
    writeln!(s, "config.min_split_gain={}", real(t.min_split_gain)).unwrap();
    writeln!(s, "config.min_data_in_leaf={}", t.min_data_in_leaf).unwrap();
    writeln!(s, "config.feature_fraction={}", real(t.feature_fraction)).unwrap();
    for (j, e) in model.edges.iter().enumerate() {
        let vals: Vec<String> = e.iter().map(|&v| real(v)).collect();
        writeln!(s, "edges {j}: {}", vals.join(",")).unwrap();
    }
    for (k, tree) in model.trees.iter().enumerate() {
        writeln!(s, "tree {k} nodes={} leaves={}", tree.nodes().len(), tree.leaves().len()).unwrap();
        for (i, n) in tree.nodes().iter().enumerate() {
            writeln!(
                s,
                "node {i} {} {} {} {} {}",
                n.feature,
                n.threshold,
                child(n.left),
                child(n.right),
                real(n.gain)
            )
            .unwrap();
        }
        for (i, l) in tree.leaves().iter().enumerate() {
            writeln!(s, "leaf {i} {} {} {}", real(l.mu), real(l.var), l.n).unwrap();
        }
    }
    writeln!(s, "end").unwrap();
    s
}

pub fn save(model: &Ensemble, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Ensemble, ModelIoError> {
    from_text(&std::fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), ModelIoError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(corrupt(self.last + 1, "unexpected end of file")),
        }
    }
}

fn corrupt(line: usize, reason: impl Into<String>) -> ModelIoError {
    ModelIoError::CorruptModel {
        line,
        reason: reason.into(),
    }
}

fn parse<T: FromStr>(line: usize, what: &str, v: &str) -> Result<T, ModelIoError> {
    v.trim().parse().map_err(|_| corrupt(line, format!("invalid {what} `{v}`")))
}

fn parse_real(line: usize, what: &str, v: &str) -> Result<f64, ModelIoError> {
    let x: f64 = parse(line, what, v)?;
    if !x.is_finite() {
        return Err(corrupt(line, format!("non-finite {what}")));
    }
    Ok(x)
}

fn key_value<'a>(lines: &mut Lines<'a>, key: &str) -> Result<(usize, &'a str), ModelIoError> {
    let (ln, l) = lines.next()?;
    let value = l
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| corrupt(ln, format!("expected `{key}=...`")))?;
    Ok((ln, value))
}

fn parse_child(line: usize, v: &str) -> Result<NodeRef, ModelIoError> {
    if let Some(i) = v.strip_prefix('n') {
        Ok(NodeRef::Split(parse(line, "child", i)?))
    } else if let Some(i) = v.strip_prefix('l') {
        Ok(NodeRef::Leaf(parse(line, "child", i)?))
    } else {
        Err(corrupt(line, format!("invalid child `{v}`")))
    }
}

pub fn from_text(text: &str) -> Result<Ensemble, ModelIoError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (_, header) = lines.next().map_err(|_| ModelIoError::VersionMismatch(String::new()))?;
    if header.trim_end() != HEADER {
        return Err(ModelIoError::VersionMismatch(header.to_string()));
    }

    macro_rules! field {
        ($key:literal, real) => {{
            let (ln, v) = key_value(&mut lines, $key)?;
            parse_real(ln, $key, v)?
        }};
        ($key:literal, $t:ty) => {{
            let (ln, v) = key_value(&mut lines, $key)?;
            parse::<$t>(ln, $key, v)?
        }};
    }

    let y0 = field!("y0", real);
    let alpha = field!("alpha", real);
    let rho = field!("rho", real);
    let n_train = field!("n_train", usize);
    let n_features = field!("n_features", usize);
    let n_trees = field!("n_trees", usize);
    let n_estimators = field!("config.n_estimators", usize);
    let learning_rate = field!("config.learning_rate", real);
    let bagging_fraction = field!("config.bagging_fraction", real);
    let (ln, v) = key_value(&mut lines, "config.rho")?;
    let cfg_rho = Rho::from_str(v).map_err(|e| corrupt(ln, e))?;
    let (ln, v) = key_value(&mut lines, "config.early_stopping_rounds")?;
    let early_stopping_rounds = if v == "none" {
        None
    } else {
        Some(parse::<usize>(ln, "early_stopping_rounds", v)?)
    };
    let (ln, v) = key_value(&mut lines, "config.early_stopping_metric")?;
    let early_stopping_metric = ValidationMetric::from_str(v).map_err(|e| corrupt(ln, e))?;
    let seed = field!("config.seed", u64);
    let tree_cfg = TreeConfig {
        max_leaves: field!("config.max_leaves", usize),
        max_bins: field!("config.max_bin", usize),
        lambda: field!("config.lambda", real),
        min_split_gain: field!("config.min_split_gain", real),
        min_data_in_leaf: field!("config.min_data_in_leaf", usize),
        feature_fraction: field!("config.feature_fraction", real),
        seed,
    };
    let config = BoostConfig {
        n_estimators,
        learning_rate,
        bagging_fraction,
        tree: tree_cfg,
        rho: cfg_rho,
        early_stopping_rounds,
        early_stopping_metric,
        seed,
    };

    let mut edges = Vec::with_capacity(n_features);
    for j in 0..n_features {
        let (ln, l) = lines.next()?;
        let rest = l
            .strip_prefix(&format!("edges {j}:"))
            .ok_or_else(|| corrupt(ln, format!("expected `edges {j}: ...`")))?
            .trim();
        let vals = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|v| parse_real(ln, "edge", v))
                .collect::<Result<Vec<_>, _>>()?
        };
        edges.push(vals);
    }
    let edges_line = lines.last;
    let edges = BinEdges::new(edges).map_err(|e| corrupt(edges_line, e))?;

    let mut trees = Vec::with_capacity(n_trees);
    for k in 0..n_trees {
        let (ln, l) = lines.next()?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        let (n_nodes, n_leaves) = match parts.as_slice() {
            ["tree", idx, nodes, leaves] if parse::<usize>(ln, "tree index", idx)? == k => (
                parse::<usize>(ln, "node count", nodes.strip_prefix("nodes=").unwrap_or("?"))?,
                parse::<usize>(ln, "leaf count", leaves.strip_prefix("leaves=").unwrap_or("?"))?,
            ),
            _ => return Err(corrupt(ln, format!("expected `tree {k} nodes=<n> leaves=<n>`"))),
        };
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let (ln, l) = lines.next()?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 7 || p[0] != "node" || parse::<usize>(ln, "node id", p[1])? != i {
                return Err(corrupt(ln, format!("expected `node {i} feat thr left right gain`")));
            }
            let feature: usize = parse(ln, "feature", p[2])?;
            if feature >= n_features {
                return Err(corrupt(ln, format!("feature {feature} out of range")));
            }
            nodes.push(SplitNode {
                feature,
                threshold: parse::<BinIndex>(ln, "threshold", p[3])?,
                left: parse_child(ln, p[4])?,
                right: parse_child(ln, p[5])?,
                gain: parse_real(ln, "gain", p[6])?,
            });
        }
        let mut leaves = Vec::with_capacity(n_leaves);
        for i in 0..n_leaves {
            let (ln, l) = lines.next()?;
            let p: Vec<&str> = l.split_whitespace().collect();
            if p.len() != 5 || p[0] != "leaf" || parse::<usize>(ln, "leaf id", p[1])? != i {
                return Err(corrupt(ln, format!("expected `leaf {i} mu var n`")));
            }
            let var = parse_real(ln, "var", p[3])?;
            if var < 0.0 {
                return Err(corrupt(ln, "negative leaf variance"));
            }
            leaves.push(LeafStats {
                mu: parse_real(ln, "mu", p[2])?,
                var,
                n: parse(ln, "n", p[4])?,
            });
        }
        let tree_line = lines.last;
        trees.push(Tree::new(nodes, leaves).map_err(|e| corrupt(tree_line, e))?);
    }
    let (ln, l) = lines.next()?;
    if l.trim() != "end" {
        return Err(corrupt(ln, "expected `end`"));
    }
    if let Ok((ln, extra)) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(corrupt(ln, "trailing content after `end`"));
        }
    }

    Ok(Ensemble {
        trees,
        y0,
        alpha,
        rho,
        edges,
        config,
        n_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::{predict_moments, train};
    use crate::data::RawDataset;
    use crate::loss::Mse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, seed: u64) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0), 1.0])
            .collect();
        let y = rows.iter().map(|r| r[0].sin() + r[1] * 0.3 + rng.random_range(-0.1..0.1)).collect();
        RawDataset::from_rows(&rows, y).unwrap()
    }

    fn model(n_estimators: usize, max_leaves: usize) -> Ensemble {
        let cfg = BoostConfig {
            n_estimators,
            tree: TreeConfig {
                max_leaves,
                ..TreeConfig::default()
            },
            bagging_fraction: 0.8,
            ..BoostConfig::default()
        };
        train(&dataset(200, 1), &Mse, &cfg, None).unwrap()
    }

    #[test]
    fn empty_ensemble_has_no_tree_blocks() {
        let mut m = model(1, 4);
        m.trees.clear();
        let text = to_text(&m);
        assert!(text.starts_with("pgbmfmt v1\n"));
        assert!(!text.contains("\ntree "));
        assert_eq!(text.lines().filter(|l| l.starts_with("edges ")).count(), 3);
        assert_eq!(from_text(&text).unwrap(), m);
    }

    #[test]
    fn stump_has_one_leaf_line() {
        let m = model(1, 1);
        let text = to_text(&m);
        assert_eq!(text.lines().filter(|l| l.starts_with("tree ")).count(), 1);
        assert_eq!(text.lines().filter(|l| l.starts_with("leaf ")).count(), 1);
        assert_eq!(text.lines().filter(|l| l.starts_with("node ")).count(), 0);
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model(25, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_text(&back), std::fs::read_to_string(&path).unwrap());
        let test = dataset(100, 2);
        let a = predict_moments(&m, &test.features).unwrap();
        let b = predict_moments(&back, &test.features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_mismatch() {
        let text = to_text(&model(2, 4)).replacen("pgbmfmt v1", "pgbmfmt v2", 1);
        assert!(matches!(from_text(&text), Err(ModelIoError::VersionMismatch(_))));
        assert!(matches!(from_text(""), Err(ModelIoError::VersionMismatch(_))));
    }

    #[test]
    fn truncated_tree_block_reports_line() {
        let text = to_text(&model(3, 4));
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines.iter().rposition(|l| l.starts_with("leaf ")).unwrap();
        let truncated = lines[..cut].join("\n");
        match from_text(&truncated) {
            Err(ModelIoError::CorruptModel { line, .. }) => assert_eq!(line, cut + 1),
            other => panic!("expected corrupt model, got {other:?}"),
        }
    }

    #[test]
    fn structural_corruption_is_rejected() {
        let text = to_text(&model(2, 4));
        let bad_child = text.replacen(" l0 ", " l9 ", 1);
        assert!(matches!(from_text(&bad_child), Err(ModelIoError::CorruptModel { .. })));
        let line = text.lines().position(|l| l.starts_with("leaf 0")).unwrap();
        let neg: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| if i == line { "leaf 0 0.5 -1.0 3".to_string() } else { l.to_string() })
            .collect();
        match from_text(&neg.join("\n")) {
            Err(ModelIoError::CorruptModel { line: ln, .. }) => assert_eq!(ln, line + 1),
            other => panic!("expected corrupt model, got {other:?}"),
        }
    }
}
