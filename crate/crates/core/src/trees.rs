//! Regression trees and tree ensembles.
//!
//! Trees grow best-first: the frontier leaf whose best split removes the
//! most squared error is split next, so a `max_splits` bound keeps the most
//! useful splits rather than truncating by traversal order. Candidate
//! thresholds are midpoints between consecutive distinct feature values; ties
//! go to the lowest feature index, then the lowest threshold. Routing sends
//! `x[feature] < threshold` left and everything else right.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Samples;
use crate::numeric::KahanSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    /// Minimum number of training rows in every leaf.
    pub min_leaf: usize,
    /// Maximum number of internal nodes; `None` grows until no split helps.
    pub max_splits: Option<usize>,
    pub rng_seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            min_leaf: 6,
            max_splits: Some(50),
            rng_seed: 0,
        }
    }
}

impl TreeParams {
    pub fn unbounded() -> Self {
        Self {
            min_leaf: 1,
            max_splits: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_leaf == 0 {
            return Err(Error::Config("min_leaf must be >= 1".into()));
        }
        if self.max_splits == Some(0) {
            return Err(Error::Config("max_splits must be >= 1 or unbounded".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Reduction in training SSE achieved by this split.
        gain: f64,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    /// Node ids in the order they were split.
    split_order: Vec<usize>,
    n_features: usize,
}

impl RegressionTree {
    /// A single-leaf tree predicting `value`.
    pub fn constant(value: f64, count: usize, n_features: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, count }],
            split_order: Vec::new(),
            n_features,
        }
    }

    /// A one-split tree.
    pub fn stump(feature: usize, threshold: f64, left: f64, right: f64, n_features: usize) -> Self {
        Self {
            nodes: vec![
                Node::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                    gain: 0.0,
                },
                Node::Leaf { value: left, count: 0 },
                Node::Leaf { value: right, count: 0 },
            ],
            split_order: vec![0],
            n_features,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn split_order(&self) -> &[usize] {
        &self.split_order
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_splits(&self) -> usize {
        self.split_order.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Id of the leaf reached by `x`.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    id = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn predict_tree(tree: &RegressionTree, x: &[f64]) -> f64 {
    match tree.nodes[tree.leaf_of(x)] {
        Node::Leaf { value, .. } => value,
        Node::Split { .. } => unreachable!("leaf_of returns a leaf"),
    }
}

/// Per-feature row orderings for a multiset of training rows. Built once and
/// reused when the same rows are fitted repeatedly with different targets.
#[derive(Debug, Clone)]
pub struct Presorted {
    lists: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(samples: &Samples<'_>, rows: &[u32]) -> Self {
        let lists = (0..samples.n_features())
            .map(|f| {
                let mut l = rows.to_vec();
                l.sort_by(|&a, &b| {
                    samples
                        .value(a as usize, f)
                        .total_cmp(&samples.value(b as usize, f))
                        .then(a.cmp(&b))
                });
                l
            })
            .collect();
        Self { lists }
    }

    pub fn all(samples: &Samples<'_>) -> Self {
        let rows: Vec<u32> = (0..samples.n_rows() as u32).collect();
        Self::new(samples, &rows)
    }

    fn rows(&self) -> &[u32] {
        self.lists.first().map_or(&[], |l| l.as_slice())
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    /// Position in the feature's sorted list of the last row going left.
    pos: usize,
    threshold: f64,
    gain: f64,
}

struct Frontier {
    node: usize,
    lists: Vec<Vec<u32>>,
    best: Candidate,
}

struct HeapItem {
    gain: f64,
    seq: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn node_stats(rows: &[u32], y: &[f64]) -> (f64, f64, f64) {
    let mut s = KahanSum::new();
    for &r in rows {
        s.add(y[r as usize]);
    }
    let n = rows.len() as f64;
    let mean = s.total() / n;
    let mut sse = KahanSum::new();
    for &r in rows {
        let d = y[r as usize] - mean;
        sse.add(d * d);
    }
    (s.total(), mean, sse.total())
}

/// Best admissible split of a node, if any reduces SSE.
fn best_split(samples: &Samples<'_>, y: &[f64], lists: &[Vec<u32>], min_leaf: usize, total: f64, sse: f64) -> Option<Candidate> {
    let n = lists.first()?.len();
    if n < 2 * min_leaf || sse <= 0.0 {
        return None;
    }
    let min_gain = 1e-12 * sse;
    let mut best: Option<Candidate> = None;
    for (f, list) in lists.iter().enumerate() {
        let mut left_sum = 0.0;
        for pos in 0..n - 1 {
            let row = list[pos] as usize;
            left_sum += y[row];
            let nl = pos + 1;
            let nr = n - nl;
            if nl < min_leaf {
                continue;
            }
            if nr < min_leaf {
                break;
            }
            let a = samples.value(row, f);
            let b = samples.value(list[pos + 1] as usize, f);
            if !(a < b) {
                continue;
            }
            let (nlf, nrf) = (nl as f64, nr as f64);
            let diff = left_sum / nlf - (total - left_sum) / nrf;
            let gain = nlf * nrf / n as f64 * diff * diff;
            if gain > min_gain && best.is_none_or(|c| gain > c.gain) {
                let mut threshold = 0.5 * (a + b);
                if threshold <= a {
                    threshold = b;
                }
                best = Some(Candidate {
                    feature: f,
                    pos,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// Grows a tree on the rows in `presorted` against targets `y` (indexed by row).
pub fn grow_tree(samples: &Samples<'_>, y: &[f64], presorted: Presorted, params: &TreeParams) -> RegressionTree {
    let n_features = samples.n_features();
    let rows = presorted.rows();
    if rows.is_empty() {
        return RegressionTree::constant(0.0, 0, n_features);
    }
    let (total, mean, sse) = node_stats(rows, y);
    let mut tree = RegressionTree::constant(mean, rows.len(), n_features);
    if rows.len() < 2 * params.min_leaf {
        return tree;
    }
    let limit = params.max_splits.unwrap_or(usize::MAX);
    let mut pending: Vec<Option<Frontier>> = Vec::new();
    let mut heap = BinaryHeap::new();
    let push = |f: Frontier, pending: &mut Vec<Option<Frontier>>, heap: &mut BinaryHeap<HeapItem>| {
        heap.push(HeapItem {
            gain: f.best.gain,
            seq: pending.len(),
        });
        pending.push(Some(f));
    };
    if let Some(best) = best_split(samples, y, &presorted.lists, params.min_leaf, total, sse) {
        push(
            Frontier {
                node: 0,
                lists: presorted.lists,
                best,
            },
            &mut pending,
            &mut heap,
        );
    }
    let mut goes_left = vec![false; samples.n_rows()];
    while tree.split_order.len() < limit {
        let Some(item) = heap.pop() else { break };
        let f = pending[item.seq].take().expect("each frontier entry is popped once");
        let c = f.best;
        let left_rows = &f.lists[c.feature][..=c.pos];
        for &r in left_rows {
            goes_left[r as usize] = true;
        }
        let mut left_lists = Vec::with_capacity(n_features);
        let mut right_lists = Vec::with_capacity(n_features);
        for list in &f.lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.iter().partition(|&&r| goes_left[r as usize]);
            left_lists.push(l);
            right_lists.push(r);
        }
        for &r in left_rows {
            goes_left[r as usize] = false;
        }
        drop(f.lists);

        let left_id = tree.nodes.len();
        let right_id = left_id + 1;
        tree.nodes[f.node] = Node::Split {
            feature: c.feature,
            threshold: c.threshold,
            left: left_id,
            right: right_id,
            gain: c.gain,
        };
        tree.split_order.push(f.node);
        for (id, lists) in [(left_id, left_lists), (right_id, right_lists)] {
            let (total, mean, sse) = node_stats(&lists[0], y);
            tree.nodes.push(Node::Leaf {
                value: mean,
                count: lists[0].len(),
            });
            if let Some(best) = best_split(samples, y, &lists, params.min_leaf, total, sse) {
                push(Frontier { node: id, lists, best }, &mut pending, &mut heap);
            }
        }
    }
    tree
}

/// Fits a tree on every row of `samples`.
///
/// With fewer than `2 * min_leaf` rows the result is the single-leaf mean
/// predictor.
pub fn fit_tree(samples: &Samples<'_>, params: &TreeParams) -> RegressionTree {
    grow_tree(samples, samples.targets(), Presorted::all(samples), params)
}

/// Fits a tree on a multiset of rows (duplicates allowed).
pub fn fit_tree_on(samples: &Samples<'_>, rows: &[u32], params: &TreeParams) -> RegressionTree {
    grow_tree(samples, samples.targets(), Presorted::new(samples, rows), params)
}

/// Rows shuffled with `seed` and split into a training share and the rest.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let mut test = idx.split_off(cut.min(n));
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub params: TreeParams,
    pub fold_mae: Vec<f64>,
    pub fold_mse: Vec<f64>,
    pub mean_mae: f64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub rows: Vec<CvRow>,
    /// Index into `rows` of the lowest mean validation MAE.
    pub best: usize,
}

impl CvResult {
    pub fn best_params(&self) -> TreeParams {
        self.rows[self.best].params
    }
}

/// Random partition of `0..n` into `k` folds (round-robin over a seeded shuffle).
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold CV needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} rows cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (i, r) in idx.into_iter().enumerate() {
        folds[i % k].push(r);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// k-fold cross-validation of single trees over a parameter grid.
pub fn kfold_cv(samples: &Samples<'_>, grid: &[TreeParams], k: usize, seed: u64) -> Result<CvResult> {
    let folds = kfold_indices(samples.n_rows(), k, seed)?;
    cv_with_folds(samples, grid, &folds)
}

/// Cross-validation over caller-supplied validation folds. Each fold is
/// validated against a tree trained on every row outside it.
pub fn cv_with_folds(samples: &Samples<'_>, grid: &[TreeParams], folds: &[Vec<usize>]) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    for p in grid {
        p.validate()?;
    }
    if folds.len() < 2 || folds.iter().any(|f| f.is_empty()) {
        return Err(Error::InsufficientData("cross-validation needs at least two nonempty folds".into()));
    }
    let n = samples.n_rows();
    let presorted: Vec<Presorted> = folds
        .par_iter()
        .map(|fold| {
            let mut held = vec![false; n];
            for &r in fold {
                held[r] = true;
            }
            let train: Vec<u32> = (0..n as u32).filter(|&r| !held[r as usize]).collect();
            Presorted::new(samples, &train)
        })
        .collect();
    if presorted.iter().any(|p| p.rows().is_empty()) {
        return Err(Error::InsufficientData("a fold leaves no training rows".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..folds.len()).map(move |f| (g, f)))
        .collect();
    let scores: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(g, f)| {
            let tree = grow_tree(samples, samples.targets(), presorted[f].clone(), &grid[g]);
            let mut abs = KahanSum::new();
            let mut sq = KahanSum::new();
            for &r in &folds[f] {
                let e = samples.targets()[r] - predict_tree(&tree, samples.row(r));
                abs.add(e.abs());
                sq.add(e * e);
            }
            let m = folds[f].len() as f64;
            (abs.total() / m, sq.total() / m)
        })
        .collect();
    let k = folds.len();
    let rows: Vec<CvRow> = grid
        .iter()
        .enumerate()
        .map(|(g, p)| {
            let s = &scores[g * k..(g + 1) * k];
            let fold_mae: Vec<f64> = s.iter().map(|x| x.0).collect();
            let fold_mse: Vec<f64> = s.iter().map(|x| x.1).collect();
            CvRow {
                params: *p,
                mean_mae: fold_mae.iter().sum::<f64>() / k as f64,
                mean_mse: fold_mse.iter().sum::<f64>() / k as f64,
                fold_mae,
                fold_mse,
            }
        })
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.mean_mae < rows[b].mean_mae { i } else { b });
    Ok(CvResult { rows, best })
}

/// `n` draws with replacement from `0..n`, sorted.
pub fn bootstrap_indices(n: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut v: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
    v.sort_unstable();
    v
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedModel {
    pub trees: Vec<RegressionTree>,
    /// Sorted bootstrap multiset of each tree.
    pub inbag: Vec<Vec<u32>>,
    pub seed: u64,
}

impl BaggedModel {
    pub fn from_parts(trees: Vec<RegressionTree>, inbag: Vec<Vec<u32>>, seed: u64) -> Result<Self> {
        if trees.len() != inbag.len() || trees.is_empty() {
            return Err(Error::Config("bagged model needs one inbag set per tree".into()));
        }
        Ok(Self { trees, inbag, seed })
    }
}

/// Bags `b` unbounded trees (min_leaf 1) on independent bootstraps. Each
/// member's bootstrap comes from its own RNG stream, so the result does not
/// depend on thread scheduling.
pub fn fit_bagged(samples: &Samples<'_>, b: usize, seed: u64) -> Result<BaggedModel> {
    fit_bagged_with_params(samples, b, seed, &TreeParams::unbounded())
}

pub fn fit_bagged_with_params(samples: &Samples<'_>, b: usize, seed: u64, params: &TreeParams) -> Result<BaggedModel> {
    if b == 0 {
        return Err(Error::Config("bag size must be >= 1".into()));
    }
    if samples.n_rows() == 0 {
        return Err(Error::InsufficientData("cannot bag an empty training set".into()));
    }
    let n = samples.n_rows();
    let inbag: Vec<Vec<u32>> = (0..b)
        .map(|i| bootstrap_indices(n, &mut member_rng(seed, i)))
        .collect();
    fit_bagged_on(samples, inbag, seed, params)
}

/// Bags trees on explicit bootstrap multisets.
pub fn fit_bagged_on(samples: &Samples<'_>, inbag: Vec<Vec<u32>>, seed: u64, params: &TreeParams) -> Result<BaggedModel> {
    params.validate()?;
    let trees = inbag
        .par_iter()
        .map(|rows| fit_tree_on(samples, rows, params))
        .collect();
    BaggedModel::from_parts(trees, inbag, seed)
}

pub fn predict_bagged(model: &BaggedModel, x: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for t in &model.trees {
        acc.add(predict_tree(t, x));
    }
    acc.total() / model.trees.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OobReport {
    pub mae: f64,
    /// Rows out of bag for at least one tree.
    pub covered: usize,
    /// Rows that every tree trained on; excluded from the MAE.
    pub uncovered: usize,
}

fn out_of_bag_mask(inbag: &[u32], n: usize) -> Vec<bool> {
    let mut oob = vec![true; n];
    for &r in inbag {
        if let Some(slot) = oob.get_mut(r as usize) {
            *slot = false;
        }
    }
    oob
}

/// Out-of-bag MAE after each prefix of the bag: entry `k` uses trees `0..=k`.
pub fn oob_curve(model: &BaggedModel, samples: &Samples<'_>) -> Vec<Option<f64>> {
    let n = samples.n_rows();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    let mut out = Vec::with_capacity(model.trees.len());
    for (tree, inbag) in model.trees.iter().zip(&model.inbag) {
        let oob = out_of_bag_mask(inbag, n);
        for r in (0..n).filter(|&r| oob[r]) {
            sum[r] += predict_tree(tree, samples.row(r));
            count[r] += 1;
        }
        let mut abs = KahanSum::new();
        let mut covered = 0;
        for r in 0..n {
            if count[r] > 0 {
                abs.add((samples.targets()[r] - sum[r] / count[r] as f64).abs());
                covered += 1;
            }
        }
        out.push((covered > 0).then(|| abs.total() / covered as f64));
    }
    out
}

/// Each row is predicted by the average of the trees that did not train on it.
pub fn oob_error(model: &BaggedModel, samples: &Samples<'_>) -> Result<OobReport> {
    let n = samples.n_rows();
    let masks: Vec<Vec<bool>> = model.inbag.iter().map(|b| out_of_bag_mask(b, n)).collect();
    let mut abs = KahanSum::new();
    let mut covered = 0;
    for r in 0..n {
        let mut s = KahanSum::new();
        let mut c = 0;
        for (tree, oob) in model.trees.iter().zip(&masks) {
            if oob[r] {
                s.add(predict_tree(tree, samples.row(r)));
                c += 1;
            }
        }
        if c > 0 {
            abs.add((samples.targets()[r] - s.total() / c as f64).abs());
            covered += 1;
        }
    }
    if covered == 0 {
        return Err(Error::InsufficientData("no row is out of bag for any tree".into()));
    }
    Ok(OobReport {
        mae: abs.total() / covered as f64,
        covered,
        uncovered: n - covered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    /// Shrinkage, `0 < nu <= 1`.
    pub nu: f64,
    pub max_splits_weak: usize,
    pub iterations: usize,
    pub min_leaf: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            nu: 0.1,
            max_splits_weak: 16,
            iterations: 256,
            min_leaf: 1,
        }
    }
}

impl BoostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("learning rate must be in (0, 1], got {}", self.nu)));
        }
        if self.max_splits_weak == 0 || self.min_leaf == 0 {
            return Err(Error::Config("max_splits_weak and min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStage {
    pub tree: RegressionTree,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    /// Mean of the training targets.
    pub f0: f64,
    pub stages: Vec<BoostStage>,
    pub params: BoostParams,
    /// Training MAE after `i` stages (entry 0 is the mean predictor).
    pub train_mae: Vec<f64>,
    pub train_mse: Vec<f64>,
    /// Stages where the fitted tree would have raised training SSE and the
    /// zero tree was kept instead.
    pub zero_stages: usize,
}

fn abs_and_sq(residuals: &[f64]) -> (f64, f64) {
    let mut a = KahanSum::new();
    let mut s = KahanSum::new();
    for r in residuals {
        a.add(r.abs());
        s.add(r * r);
    }
    let n = residuals.len() as f64;
    (a.total() / n, s.total() / n)
}

/// Least-squares boosting: `F_0 = mean(y)`, then each stage fits a bounded
/// tree to the current residuals and adds it scaled by `nu`. A stage whose
/// tree would increase training SSE is replaced by the zero tree, so training
/// MSE never increases.
pub fn fit_lsboost(samples: &Samples<'_>, params: &BoostParams) -> Result<BoostedModel> {
    params.validate()?;
    let n = samples.n_rows();
    if n == 0 {
        return Err(Error::InsufficientData("cannot boost on an empty training set".into()));
    }
    let y = samples.targets();
    let mut acc = KahanSum::new();
    for v in y {
        acc.add(*v);
    }
    let f0 = acc.total() / n as f64;
    let mut residuals: Vec<f64> = y.iter().map(|v| v - f0).collect();
    let (mae0, mse0) = abs_and_sq(&residuals);
    let mut model = BoostedModel {
        f0,
        stages: Vec::with_capacity(params.iterations),
        params: *params,
        train_mae: vec![mae0],
        train_mse: vec![mse0],
        zero_stages: 0,
    };
    let presorted = Presorted::all(samples);
    let weak = TreeParams {
        min_leaf: params.min_leaf,
        max_splits: Some(params.max_splits_weak),
        rng_seed: 0,
    };
    let mut updated = vec![0.0; n];
    for _ in 0..params.iterations {
        let tree = grow_tree(samples, &residuals, presorted.clone(), &weak);
        for r in 0..n {
            updated[r] = residuals[r] - params.nu * predict_tree(&tree, samples.row(r));
        }
        let (mae, mse) = abs_and_sq(&updated);
        let prev_mse = *model.train_mse.last().expect("nonempty");
        if mse <= prev_mse {
            std::mem::swap(&mut residuals, &mut updated);
            model.stages.push(BoostStage { tree, nu: params.nu });
            model.train_mae.push(mae);
            model.train_mse.push(mse);
        } else {
            model.zero_stages += 1;
            model.stages.push(BoostStage {
                tree: RegressionTree::constant(0.0, n, samples.n_features()),
                nu: params.nu,
            });
            let last_mae = *model.train_mae.last().expect("nonempty");
            model.train_mae.push(last_mae);
            model.train_mse.push(prev_mse);
        }
    }
    Ok(model)
}

pub fn predict_boosted(model: &BoostedModel, x: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    acc.add(model.f0);
    for s in &model.stages {
        acc.add(s.nu * predict_tree(&s.tree, x));
    }
    acc.total()
}

/// MAE on `samples` after each number of stages `0..=m`.
pub fn staged_mae(model: &BoostedModel, samples: &Samples<'_>) -> Vec<f64> {
    let n = samples.n_rows();
    let mut pred = vec![model.f0; n];
    let mae = |pred: &[f64]| {
        let mut a = KahanSum::new();
        for (p, y) in pred.iter().zip(samples.targets()) {
            a.add((y - p).abs());
        }
        a.total() / n as f64
    };
    let mut out = vec![mae(&pred)];
    for s in &model.stages {
        for (r, p) in pred.iter_mut().enumerate() {
            *p += s.nu * predict_tree(&s.tree, samples.row(r));
        }
        out.push(mae(&pred));
    }
    out
}

/// Anything made of regression trees.
pub trait TreeEnsemble {
    fn members(&self) -> Vec<&RegressionTree>;
}

impl TreeEnsemble for RegressionTree {
    fn members(&self) -> Vec<&RegressionTree> {
        vec![self]
    }
}

impl TreeEnsemble for BaggedModel {
    fn members(&self) -> Vec<&RegressionTree> {
        self.trees.iter().collect()
    }
}

impl TreeEnsemble for BoostedModel {
    fn members(&self) -> Vec<&RegressionTree> {
        self.stages.iter().map(|s| &s.tree).collect()
    }
}

/// Share of internal nodes splitting on each feature, pooled over members.
/// All zeros when the model has no splits.
pub fn feature_importance(model: &impl TreeEnsemble) -> Vec<f64> {
    let members = model.members();
    let n_features = members.iter().map(|t| t.n_features()).max().unwrap_or(0);
    let mut counts = vec![0usize; n_features];
    for t in &members {
        for node in t.nodes() {
            if let Node::Split { feature, .. } = node {
                counts[*feature] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; n_features];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(n: usize, f: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let r = &x[i * f..(i + 1) * f];
                3.0 * r[0] + if r[f - 1] > 0.2 { 2.0 } else { -1.0 } + rng.random_range(-0.5..0.5)
            })
            .collect();
        (x, y)
    }

    fn sse_of(y: &[f64]) -> f64 {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        y.iter().map(|v| (v - m).powi(2)).sum()
    }

    #[test]
    fn perfect_stump() {
        let x = [0.0, 1.0];
        let y = [0.0, 1.0];
        let s = Samples::new(&x, 1, &y).unwrap();
        let t = fit_tree(&s, &TreeParams { min_leaf: 1, ..Default::default() });
        assert_eq!(t.n_splits(), 1);
        assert_eq!(predict_tree(&t, &[0.0]), 0.0);
        assert_eq!(predict_tree(&t, &[1.0]), 1.0);
        match &t.nodes()[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            _ => panic!("root should split"),
        }
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y = vec![4.0; 20];
        let t = fit_tree(&Samples::new(&x, 1, &y).unwrap(), &TreeParams::unbounded());
        assert_eq!(t.n_splits(), 0);
        assert_eq!(predict_tree(&t, &[3.0]), 4.0);
    }

    #[test]
    fn too_few_rows_give_mean_predictor() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 2.0, 6.0];
        let t = fit_tree(&Samples::new(&x, 1, &y).unwrap(), &TreeParams { min_leaf: 2, ..Default::default() });
        assert_eq!(t.n_splits(), 0);
        assert_eq!(predict_tree(&t, &[0.0]), 3.0);
    }

    #[test]
    fn routing_boundary_goes_right() {
        let t = RegressionTree::stump(0, 0.5, -1.0, 1.0, 1);
        assert_eq!(predict_tree(&t, &[0.4]), -1.0);
        assert_eq!(predict_tree(&t, &[0.5]), 1.0);
        let c = RegressionTree::constant(7.0, 3, 2);
        assert_eq!(predict_tree(&c, &[100.0, -3.0]), 7.0);
    }

    #[test]
    fn tie_break_prefers_lowest_feature() {
        // Both features separate the targets identically.
        let x = [0.0, 0.0, 1.0, 1.0];
        let y = [0.0, 1.0];
        let t = fit_tree(&Samples::new(&x, 2, &y).unwrap(), &TreeParams { min_leaf: 1, ..Default::default() });
        assert!(matches!(t.nodes()[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn leaves_respect_bounds() {
        let (x, y) = random_data(300, 4, 2);
        let s = Samples::new(&x, 4, &y).unwrap();
        let t = fit_tree(&s, &TreeParams { min_leaf: 7, max_splits: Some(12), rng_seed: 0 });
        assert_eq!(t.n_splits(), 12);
        for n in t.nodes() {
            if let Node::Leaf { count, .. } = n {
                assert!(*count >= 7);
            }
        }
        // Leaf values are means of the rows they receive.
        let mut sums = vec![(0.0, 0usize); t.nodes().len()];
        for r in 0..s.n_rows() {
            let l = t.leaf_of(s.row(r));
            sums[l].0 += y[r];
            sums[l].1 += 1;
        }
        for (id, n) in t.nodes().iter().enumerate() {
            if let Node::Leaf { value, count } = n {
                assert_eq!(*count, sums[id].1);
                assert!((value - sums[id].0 / *count as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn best_first_prefix_property() {
        let (x, y) = random_data(200, 3, 4);
        let s = Samples::new(&x, 3, &y).unwrap();
        let full = fit_tree(&s, &TreeParams { min_leaf: 5, max_splits: None, rng_seed: 0 });
        for limit in [1, 3, 8, 1000] {
            let t = fit_tree(&s, &TreeParams { min_leaf: 5, max_splits: Some(limit), rng_seed: 0 });
            assert_eq!(t.n_splits(), limit.min(full.n_splits()));
        }
    }

    #[test]
    fn exhaustive_split_search_agrees() {
        let (x, y) = random_data(50, 3, 9);
        let s = Samples::new(&x, 3, &y).unwrap();
        let min_leaf = 5;
        let t = fit_tree(&s, &TreeParams { min_leaf, max_splits: None, rng_seed: 0 });
        assert!(t.n_splits() > 0);
        for (id, node) in t.nodes().iter().enumerate() {
            let Node::Split { feature, threshold, .. } = node else { continue };
            let rows: Vec<usize> = (0..50).filter(|&r| reaches(&t, id, s.row(r))).collect();
            let mut best = (f64::INFINITY, 0, 0.0);
            for f in 0..3 {
                let mut vals: Vec<f64> = rows.iter().map(|&r| s.value(r, f)).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = 0.5 * (w[0] + w[1]);
                    let l: Vec<f64> = rows.iter().filter(|&&i| s.value(i, f) < thr).map(|&i| y[i]).collect();
                    let r: Vec<f64> = rows.iter().filter(|&&i| s.value(i, f) >= thr).map(|&i| y[i]).collect();
                    if l.len() < min_leaf || r.len() < min_leaf {
                        continue;
                    }
                    let c = sse_of(&l) + sse_of(&r);
                    if c < best.0 - 1e-12 {
                        best = (c, f, thr);
                    }
                }
            }
            assert_eq!((best.1, best.2), (*feature, *threshold), "node {id}");
        }
    }

    fn reaches(t: &RegressionTree, target: usize, x: &[f64]) -> bool {
        let mut id = 0;
        loop {
            if id == target {
                return true;
            }
            match &t.nodes()[id] {
                Node::Leaf { .. } => return false,
                Node::Split { feature, threshold, left, right, .. } => {
                    id = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    #[test]
    fn kfold_partitions_rows() {
        let folds = kfold_indices(23, 4, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 5 || f.len() == 6));
        assert!(kfold_indices(3, 4, 1).is_err());
        assert!(kfold_indices(10, 1, 1).is_err());
    }

    #[test]
    fn duplicated_halves_give_equal_fold_errors() {
        let (x, y) = random_data(40, 2, 5);
        let x2 = [x.clone(), x].concat();
        let y2 = [y.clone(), y].concat();
        let s = Samples::new(&x2, 2, &y2).unwrap();
        let folds = vec![(0..40).collect(), (40..80).collect()];
        let cv = cv_with_folds(&s, &[TreeParams::default(), TreeParams::unbounded()], &folds).unwrap();
        for row in &cv.rows {
            assert_eq!(row.fold_mae[0], row.fold_mae[1]);
            assert_eq!(row.fold_mse[0], row.fold_mse[1]);
        }
    }

    #[test]
    fn leave_one_out_averages_point_errors() {
        let (x, y) = random_data(10, 2, 6);
        let s = Samples::new(&x, 2, &y).unwrap();
        let p = TreeParams { min_leaf: 2, max_splits: Some(2), rng_seed: 0 };
        let cv = kfold_cv(&s, &[p], 10, 3).unwrap();
        assert_eq!(cv.rows[0].fold_mae.len(), 10);
        let mut expected = 0.0;
        for r in 0..10 {
            let rows: Vec<u32> = (0..10).filter(|&i| i != r).collect();
            let t = fit_tree_on(&s, &rows, &p);
            expected += (y[r as usize] - predict_tree(&t, s.row(r as usize))).abs();
        }
        assert!((cv.rows[0].mean_mae - expected / 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_tree_bag_matches_its_bootstrap_tree() {
        let (x, y) = random_data(60, 2, 7);
        let s = Samples::new(&x, 2, &y).unwrap();
        let bag = fit_bagged(&s, 1, 11).unwrap();
        let direct = fit_tree_on(&s, &bag.inbag[0], &TreeParams::unbounded());
        for r in 0..60 {
            assert_eq!(predict_bagged(&bag, s.row(r)), predict_tree(&direct, s.row(r)));
        }
        let oob = oob_error(&bag, &s).unwrap();
        let absent = (0..60u32).filter(|r| bag.inbag[0].binary_search(r).is_err()).count();
        assert_eq!(oob.covered, absent);
    }

    #[test]
    fn identical_bootstraps_average_to_either_tree() {
        let (x, y) = random_data(60, 2, 8);
        let s = Samples::new(&x, 2, &y).unwrap();
        let rows = bootstrap_indices(60, &mut ChaCha8Rng::seed_from_u64(1));
        let bag = fit_bagged_on(&s, vec![rows.clone(), rows], 0, &TreeParams::unbounded()).unwrap();
        for r in 0..60 {
            let p = predict_bagged(&bag, s.row(r));
            assert!((p - predict_tree(&bag.trees[0], s.row(r))).abs() < 1e-12);
        }
    }

    #[test]
    fn bagging_is_deterministic_and_seeded() {
        let (x, y) = random_data(80, 3, 10);
        let s = Samples::new(&x, 3, &y).unwrap();
        let a = fit_bagged(&s, 8, 5).unwrap();
        let b = fit_bagged(&s, 8, 5).unwrap();
        assert_eq!(a, b);
        let c = fit_bagged(&s, 8, 6).unwrap();
        assert_ne!(a.inbag, c.inbag);
    }

    #[test]
    fn bag_prediction_is_mean_of_members() {
        let t1 = RegressionTree::constant(2.0, 1, 1);
        let t2 = RegressionTree::constant(4.0, 1, 1);
        let bag = BaggedModel::from_parts(vec![t1, t2], vec![vec![], vec![]], 0).unwrap();
        assert_eq!(predict_bagged(&bag, &[0.0]), 3.0);
    }

    #[test]
    fn unique_fraction_of_bootstraps() {
        let n = 1000;
        let mut total = 0.0;
        for i in 0..200 {
            let b = bootstrap_indices(n, &mut member_rng(17, i));
            let mut u = b.clone();
            u.dedup();
            total += u.len() as f64 / n as f64;
        }
        let mean = total / 200.0;
        let expected = 1.0 - (1.0 - 1.0 / n as f64).powi(n as i32);
        // SE of the mean of 200 fractions is about 0.001.
        assert!((mean - expected).abs() < 0.005, "{mean} vs {expected}");
    }

    #[test]
    fn stump_boost_exact_fit() {
        let x = [0.0, 0.0, 1.0, 1.0];
        let y = [1.0, 1.0, 5.0, 5.0];
        let s = Samples::new(&x, 1, &y).unwrap();
        let p = BoostParams { nu: 1.0, max_splits_weak: 1, iterations: 1, min_leaf: 1 };
        let m = fit_lsboost(&s, &p).unwrap();
        assert_eq!(m.f0, 3.0);
        assert_eq!(*m.train_mse.last().unwrap(), 0.0);
        for r in 0..4 {
            assert_eq!(predict_boosted(&m, s.row(r)), y[r]);
        }
        let half = fit_lsboost(&s, &BoostParams { nu: 0.5, ..p }).unwrap();
        for r in 0..4 {
            let before = y[r] - half.f0;
            let after = y[r] - predict_boosted(&half, s.row(r));
            assert_eq!(after, 0.5 * before);
        }
    }

    #[test]
    fn zero_stage_model_predicts_mean() {
        let (x, y) = random_data(30, 2, 12);
        let s = Samples::new(&x, 2, &y).unwrap();
        let m = fit_lsboost(&s, &BoostParams { iterations: 0, ..Default::default() }).unwrap();
        assert_eq!(predict_boosted(&m, s.row(0)), m.f0);
        assert!(fit_lsboost(&s, &BoostParams { nu: 0.0, ..Default::default() }).is_err());
        assert!(fit_lsboost(&s, &BoostParams { nu: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn boosted_prediction_is_stagewise_sum() {
        let (x, y) = random_data(100, 3, 13);
        let s = Samples::new(&x, 3, &y).unwrap();
        let m = fit_lsboost(&s, &BoostParams { iterations: 20, max_splits_weak: 4, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
            let mut expected = m.f0;
            for st in &m.stages {
                expected += st.nu * predict_tree(&st.tree, &q);
            }
            assert!((predict_boosted(&m, &q) - expected).abs() < 1e-12);
        }
        let staged = staged_mae(&m, &s);
        assert_eq!(staged.len(), 21);
        assert!((staged[20] - m.train_mae[20]).abs() < 1e-9);
    }

    #[test]
    fn importance_shares() {
        let stump = RegressionTree::stump(2, 0.0, 0.0, 1.0, 3);
        assert_eq!(feature_importance(&stump), vec![0.0, 0.0, 1.0]);
        let a = RegressionTree::stump(0, 0.0, 0.0, 1.0, 2);
        let b = RegressionTree::stump(1, 0.0, 0.0, 1.0, 2);
        let bag = BaggedModel::from_parts(vec![a, b], vec![vec![], vec![]], 0).unwrap();
        assert_eq!(feature_importance(&bag), vec![0.5, 0.5]);
        assert_eq!(feature_importance(&RegressionTree::constant(1.0, 1, 2)), vec![0.0, 0.0]);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (tr, te) = train_test_split(100, 0.7, 3);
        assert_eq!(tr.len(), 70);
        assert_eq!(te.len(), 30);
        assert!(tr.iter().all(|i| te.binary_search(i).is_err()));
        assert_eq!(train_test_split(100, 0.7, 3), (tr, te));
    }

    #[test]
    fn tree_json_round_trip() {
        let (x, y) = random_data(50, 2, 14);
        let t = fit_tree(&Samples::new(&x, 2, &y).unwrap(), &TreeParams::default());
        let back: RegressionTree = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn boosting_never_increases_training_mse(seed in any::<u64>(), nu in 0.05f64..=1.0, splits in 1usize..8) {
            let (x, y) = random_data(60, 3, seed);
            let s = Samples::new(&x, 3, &y).unwrap();
            let m = fit_lsboost(&s, &BoostParams { nu, max_splits_weak: splits, iterations: 15, min_leaf: 2 }).unwrap();
            for w in m.train_mse.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }

        #[test]
        fn bag_prediction_invariant_under_tree_order(seed in any::<u64>()) {
            let (x, y) = random_data(40, 2, seed);
            let s = Samples::new(&x, 2, &y).unwrap();
            let bag = fit_bagged(&s, 5, seed).unwrap();
            let mut rev = bag.clone();
            rev.trees.reverse();
            rev.inbag.reverse();
            for r in 0..40 {
                prop_assert!((predict_bagged(&bag, s.row(r)) - predict_bagged(&rev, s.row(r))).abs() < 1e-12);
            }
        }
    }
}
