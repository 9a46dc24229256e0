//! Histogram decision trees with stochastic leaf weights.
//!
//! Trees grow best-first: the leaf whose best candidate split has the largest
//! gain is expanded next, until `max_leaves` is reached or no leaf admits a
//! qualifying split. Each terminal node stores the approximate mean and
//! variance of `g_bar / (h_bar + lambda_bar)` over its instance set, computed
//! from the sample mean, Bessel-corrected variance and covariance of the
//! leaf's gradients and hessians (second-order Taylor expansion for the mean,
//! first-order for the variance).

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{BinIndex, BinnedDataset};
use crate::loss::GradHess;

/// Lower bound on `sum_h + lambda` (and `h_bar + lambda_bar`).
pub const HESSIAN_EPS: f64 = 1e-9;

/// Relative rounding floor under which a split gain counts as zero.
const GAIN_NOISE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("hessian denominator {0} is not positive")]
    NonPositiveHessianDenominator(f64),
    #[error("degenerate hessian in leaf: h_bar + lambda_bar = {0}")]
    DegenerateHessian(f64),
    #[error("empty gradient slice")]
    EmptyLeaf,
    #[error("sample mask is empty")]
    EmptyMask,
    #[error("gradient/hessian length {gh} does not match dataset size {n}")]
    LengthMismatch { gh: usize, n: usize },
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeConfig {
    pub max_leaves: usize,
    pub max_bins: usize,
    pub lambda: f64,
    pub min_split_gain: f64,
    pub min_data_in_leaf: usize,
    pub feature_fraction: f64,
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_leaves: 16,
            max_bins: 64,
            lambda: 1.0,
            min_split_gain: 0.0,
            min_data_in_leaf: 1,
            feature_fraction: 1.0,
            seed: 1,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: &str| Err(TreeError::InvalidConfig(m.to_string()));
        if self.max_leaves < 1 {
            return bad("max_leaves must be >= 1");
        }
        if !(2..=crate::data::MAX_BINS_LIMIT).contains(&self.max_bins) {
            return bad("max_bins must be in [2, 65536]");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.min_split_gain.is_finite() && self.min_split_gain >= 0.0) {
            return bad("min_split_gain must be finite and >= 0");
        }
        if self.min_data_in_leaf < 1 {
            return bad("min_data_in_leaf must be >= 1");
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad("feature_fraction must be in (0, 1]");
        }
        Ok(())
    }
}

#[inline]
fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

/// Objective reduction of splitting a node into left and right children.
pub fn split_gain(sum_gl: f64, sum_hl: f64, sum_gr: f64, sum_hr: f64, lambda: f64) -> Result<f64, TreeError> {
    let (g, h) = (sum_gl + sum_gr, sum_hl + sum_hr);
    for denom in [sum_hl + lambda, sum_hr + lambda, h + lambda] {
        if !(denom > 0.0) {
            return Err(TreeError::NonPositiveHessianDenominator(denom));
        }
    }
    Ok(0.5 * (score(sum_gl, sum_hl, lambda) + score(sum_gr, sum_hr, lambda) - score(g, h, lambda)))
}

/// Stochastic leaf weight: approximate mean and variance of the leaf ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafStats {
    pub mu: f64,
    pub var: f64,
    pub n: usize,
}

pub fn leaf_stats(g: &[f64], h: &[f64], lambda: f64) -> Result<LeafStats, TreeError> {
    if g.is_empty() || g.len() != h.len() {
        return Err(TreeError::EmptyLeaf);
    }
    let n = g.len();
    let nf = n as f64;
    let g_bar = g.iter().sum::<f64>() / nf;
    let h_bar = h.iter().sum::<f64>() / nf;
    let (mut var_g, mut var_h, mut cov_gh) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&gi, &hi) in g.iter().zip(h) {
            let (dg, dh) = (gi - g_bar, hi - h_bar);
            var_g += dg * dg;
            var_h += dh * dh;
            cov_gh += dg * dh;
        }
        let bessel = nf - 1.0;
        var_g /= bessel;
        var_h /= bessel;
        cov_gh /= bessel;
    }
    let d = h_bar + lambda / nf;
    if !(d > HESSIAN_EPS) {
        return Err(TreeError::DegenerateHessian(d));
    }
    let (d2, d3) = (d * d, d * d * d);
    let mu = g_bar / d - cov_gh / d2 + g_bar * var_h / d3;
    let var = var_g / d2 + g_bar * g_bar * var_h / (d2 * d2) - 2.0 * g_bar * cov_gh / d3;
    Ok(LeafStats {
        mu,
        var: var.max(0.0),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Split(usize),
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitNode {
    pub feature: usize,
    /// Samples with `bin <= threshold` go left.
    pub threshold: BinIndex,
    pub left: NodeRef,
    pub right: NodeRef,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<SplitNode>,
    leaves: Vec<LeafStats>,
}

impl Tree {
    /// Assembles a tree, checking that every node is reachable exactly once
    /// from the root and every leaf terminates exactly one path.
    pub fn new(nodes: Vec<SplitNode>, leaves: Vec<LeafStats>) -> Result<Self, String> {
        if leaves.is_empty() {
            return Err("tree has no leaves".into());
        }
        if leaves.len() != nodes.len() + 1 {
            return Err(format!("{} split nodes need {} leaves, found {}", nodes.len(), nodes.len() + 1, leaves.len()));
        }
        if let Some(l) = leaves.iter().find(|l| !(l.var >= 0.0) || !l.mu.is_finite() || !l.var.is_finite()) {
            return Err(format!("invalid leaf statistics {l:?}"));
        }
        let mut seen_nodes = vec![false; nodes.len()];
        let mut seen_leaves = vec![false; leaves.len()];
        let mut stack = vec![if nodes.is_empty() { NodeRef::Leaf(0) } else { NodeRef::Split(0) }];
        while let Some(r) = stack.pop() {
            match r {
                NodeRef::Split(i) => {
                    if i >= nodes.len() || std::mem::replace(&mut seen_nodes[i], true) {
                        return Err(format!("split node {i} missing or reached twice"));
                    }
                    stack.push(nodes[i].right);
                    stack.push(nodes[i].left);
                }
                NodeRef::Leaf(i) => {
                    if i >= leaves.len() || std::mem::replace(&mut seen_leaves[i], true) {
                        return Err(format!("leaf {i} missing or reached twice"));
                    }
                }
            }
        }
        Ok(Self { nodes, leaves })
    }

    pub fn nodes(&self) -> &[SplitNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[LeafStats] {
        &self.leaves
    }

    pub fn root(&self) -> NodeRef {
        if self.nodes.is_empty() {
            NodeRef::Leaf(0)
        } else {
            NodeRef::Split(0)
        }
    }

    /// Leaf reached by a row whose bin for feature `j` is `bin_of(j)`.
    #[inline]
    pub fn route(&self, bin_of: impl Fn(usize) -> BinIndex) -> usize {
        let mut cur = self.root();
        loop {
            match cur {
                NodeRef::Leaf(l) => return l,
                NodeRef::Split(i) => {
                    let node = &self.nodes[i];
                    cur = if bin_of(node.feature) <= node.threshold {
                        node.left
                    } else {
                        node.right
                    };
                }
            }
        }
    }

    pub fn route_row(&self, data: &BinnedDataset, row: usize) -> usize {
        self.route(|j| data.bin(row, j))
    }
}

/// Gradient/hessian sums and counts per bin of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHistogram {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub n: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeHistogram {
    pub features: Vec<usize>,
    pub bins: Vec<FeatureHistogram>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeTotals {
    pub g: f64,
    pub h: f64,
    pub n: usize,
}

impl NodeTotals {
    pub fn of(gh: &GradHess, indices: &[usize]) -> Self {
        let (mut g, mut h) = (0.0, 0.0);
        for &i in indices {
            g += gh.g[i];
            h += gh.h[i];
        }
        Self { g, h, n: indices.len() }
    }
}

/// Accumulates per-bin sums over `indices` for each candidate feature.
/// Features are processed independently and samples in index order, so the
/// result does not depend on the number of worker threads.
pub fn build_histogram(data: &BinnedDataset, gh: &GradHess, indices: &[usize], features: &[usize]) -> NodeHistogram {
    let bins = features
        .par_iter()
        .map(|&j| {
            let nb = data.n_bins(j);
            let col = data.feature_bins(j);
            let mut hist = FeatureHistogram {
                g: vec![0.0; nb],
                h: vec![0.0; nb],
                n: vec![0; nb],
            };
            for &i in indices {
                let b = col[i] as usize;
                hist.g[b] += gh.g[i];
                hist.h[b] += gh.h[i];
                hist.n[b] += 1;
            }
            hist
        })
        .collect();
    NodeHistogram {
        features: features.to_vec(),
        bins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: BinIndex,
    pub gain: f64,
}

fn best_in_feature(feature: usize, hist: &FeatureHistogram, totals: &NodeTotals, cfg: &TreeConfig) -> Option<SplitCandidate> {
    let lambda = cfg.lambda;
    let parent = score(totals.g, totals.h, lambda);
    let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
    let mut best: Option<SplitCandidate> = None;
    let last = hist.g.len().saturating_sub(1);
    for t in 0..last {
        gl += hist.g[t];
        hl += hist.h[t];
        nl += hist.n[t] as usize;
        let nr = totals.n - nl;
        if nl < cfg.min_data_in_leaf {
            continue;
        }
        if nr < cfg.min_data_in_leaf {
            break;
        }
        let (gr, hr) = (totals.g - gl, totals.h - hl);
        if !(hl + lambda > HESSIAN_EPS && hr + lambda > HESSIAN_EPS) {
            continue;
        }
        let (sl, sr) = (score(gl, hl, lambda), score(gr, hr, lambda));
        let gain = 0.5 * (sl + sr - parent);
        let noise = GAIN_NOISE * (sl.abs() + sr.abs() + parent.abs());
        if gain > cfg.min_split_gain && gain > noise && best.is_none_or(|b| gain > b.gain) {
            best = Some(SplitCandidate {
                feature,
                threshold: t as BinIndex,
                gain,
            });
        }
    }
    best
}

/// Best (feature, bin) split of a node, if any candidate qualifies.
/// Equal gains resolve to the lowest feature index, then the lowest bin.
pub fn find_best_split(hist: &NodeHistogram, totals: &NodeTotals, cfg: &TreeConfig) -> Option<SplitCandidate> {
    if !(totals.h + cfg.lambda > HESSIAN_EPS) || totals.n < 2 * cfg.min_data_in_leaf {
        return None;
    }
    let per_feature: Vec<Option<SplitCandidate>> = hist
        .features
        .par_iter()
        .zip(&hist.bins)
        .map(|(&j, h)| best_in_feature(j, h, totals, cfg))
        .collect();
    let mut order: Vec<SplitCandidate> = per_feature.into_iter().flatten().collect();
    order.sort_by_key(|c| c.feature);
    order
        .into_iter()
        .fold(None, |best: Option<SplitCandidate>, c| match best {
            Some(b) if b.gain >= c.gain => Some(b),
            _ => Some(c),
        })
}

/// Candidate feature subset for one tree.
pub fn sample_features(n_features: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..n_features).collect();
    }
    let k = ((fraction * n_features as f64).ceil() as usize).clamp(1, n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = sample_indices(&mut rng, n_features, k).into_vec();
    feats.sort_unstable();
    feats
}

#[derive(Debug)]
struct Growing {
    indices: Vec<usize>,
    best: Option<SplitCandidate>,
    /// Where this leaf hangs in its parent (node id, is_left).
    slot: Option<(usize, bool)>,
}

/// Tree plus the instance set of each leaf.
pub(crate) struct GrownTree {
    pub tree: Tree,
    #[cfg_attr(not(test), allow(dead_code))]
    pub partition: Vec<Vec<usize>>,
}

pub fn grow_tree(data: &BinnedDataset, gh: &GradHess, mask: &[usize], cfg: &TreeConfig) -> Result<Tree, TreeError> {
    grow(data, gh, mask, cfg).map(|g| g.tree)
}

pub(crate) fn grow(data: &BinnedDataset, gh: &GradHess, mask: &[usize], cfg: &TreeConfig) -> Result<GrownTree, TreeError> {
    cfg.validate()?;
    if mask.is_empty() {
        return Err(TreeError::EmptyMask);
    }
    if gh.len() != data.n_samples() || gh.h.len() != gh.g.len() {
        return Err(TreeError::LengthMismatch {
            gh: gh.len(),
            n: data.n_samples(),
        });
    }
    let features = sample_features(data.n_features(), cfg.feature_fraction, cfg.seed);
    let evaluate = |indices: &[usize]| -> Option<SplitCandidate> {
        if cfg.max_leaves < 2 {
            return None;
        }
        let totals = NodeTotals::of(gh, indices);
        let hist = build_histogram(data, gh, indices, &features);
        find_best_split(&hist, &totals, cfg)
    };

    let root_best = evaluate(mask);
    let mut work = vec![Growing {
        indices: mask.to_vec(),
        best: root_best,
        slot: None,
    }];
    let mut nodes: Vec<SplitNode> = Vec::new();

    while work.len() < cfg.max_leaves {
        let pick = work
            .iter()
            .enumerate()
            .filter_map(|(p, w)| w.best.map(|b| (p, b.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (p, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((p, g)),
            });
        let Some((pos, _)) = pick else { break };
        let leaf = work.remove(pos);
        let split = leaf.best.expect("picked leaf has a split");
        let col = data.feature_bins(split.feature);
        let (left, right): (Vec<usize>, Vec<usize>) =
            leaf.indices.iter().partition(|&&i| col[i] <= split.threshold);

        let id = nodes.len();
        nodes.push(SplitNode {
            feature: split.feature,
            threshold: split.threshold,
            left: NodeRef::Leaf(usize::MAX),
            right: NodeRef::Leaf(usize::MAX),
            gain: split.gain,
        });
        if let Some((parent, is_left)) = leaf.slot {
            set_child(&mut nodes[parent], is_left, NodeRef::Split(id));
        }
        let (lbest, rbest) = rayon::join(|| evaluate(&left), || evaluate(&right));
        work.insert(
            pos,
            Growing {
                indices: right,
                best: rbest,
                slot: Some((id, false)),
            },
        );
        work.insert(
            pos,
            Growing {
                indices: left,
                best: lbest,
                slot: Some((id, true)),
            },
        );
    }

    let mut leaves = Vec::with_capacity(work.len());
    let mut partition = Vec::with_capacity(work.len());
    for (l, w) in work.into_iter().enumerate() {
        let g: Vec<f64> = w.indices.iter().map(|&i| gh.g[i]).collect();
        let h: Vec<f64> = w.indices.iter().map(|&i| gh.h[i]).collect();
        leaves.push(leaf_stats(&g, &h, cfg.lambda)?);
        if let Some((parent, is_left)) = w.slot {
            set_child(&mut nodes[parent], is_left, NodeRef::Leaf(l));
        }
        partition.push(w.indices);
    }
    let tree = Tree::new(nodes, leaves).expect("grown tree is well formed");
    Ok(GrownTree { tree, partition })
}

fn set_child(node: &mut SplitNode, is_left: bool, child: NodeRef) {
    if is_left {
        node.left = child;
    } else {
        node.right = child;
    }
}
