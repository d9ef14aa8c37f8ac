//! Gradient-boosted decision trees on raw tabular features.
//!
//! Binary logistic objective, second-order (Newton) leaf values with L2
//! smoothing, exact greedy splits over presorted feature values, and
//! missing values (NaN) routed to whichever side of each split yields the
//! higher gain. Hyperparameters are tuned by stratified k-fold cross
//! validation with seeded random search, or optionally by a small Gaussian
//! process with expected improvement over the same fold layout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::eval::{roc_auc, EvalError};

const LAMBDA: f64 = 1.0;
const MAX_FEATURES: usize = 1 << 16;
const MAX_TREES: usize = 100_000;
const MAX_NODES: usize = 1 << 20;
const MAX_TREE_DEPTH: usize = 64;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("gbdt config: {0}")]
    BadConfig(String),
    #[error("feature matrix: {0}")]
    BadFeatures(String),
    #[error("labels contain only one class")]
    SingleClass,
    #[error("expected {expected} features per row, found {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("ensemble: {0}")]
    BadEnsemble(String),
    #[error("ensemble json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tuning: {0}")]
    BadTuning(String),
    #[error("fold evaluation: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            max_depth: 3,
            learning_rate: 0.1,
            min_leaf: 5,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: String| Err(GbdtError::BadConfig(m));
        if self.rounds == 0 || self.rounds > MAX_TREES {
            return bad(format!("rounds {} outside 1..={MAX_TREES}", self.rounds));
        }
        if self.max_depth == 0 || self.max_depth > MAX_TREE_DEPTH {
            return bad(format!(
                "max_depth {} outside 1..={MAX_TREE_DEPTH}",
                self.max_depth
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate {} outside (0, 1]", self.learning_rate));
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be positive".into());
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad(format!("subsample {} outside (0, 1]", self.subsample));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Where rows with a missing value go.
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node 0 is the root; children always point forward in the vector.
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf_value(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let x = row[*feature];
                    let go_left = if x.is_nan() { *missing_left } else { x < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    fn max_depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize, d: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => d,
                TreeNode::Split { left, right, .. } => {
                    walk(nodes, *left, d + 1).max(walk(nodes, *right, d + 1))
                }
            }
        }
        walk(&self.nodes, 0, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub num_features: usize,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleFile {
    version: u32,
    #[serde(flatten)]
    ensemble: TreeEnsemble,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl TreeEnsemble {
    pub fn margin(&self, row: &[f64]) -> Result<f64, GbdtError> {
        if row.len() != self.num_features {
            return Err(GbdtError::WidthMismatch {
                expected: self.num_features,
                found: row.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.leaf_value(row)).sum();
        Ok(self.base_score + self.learning_rate * sum)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64, GbdtError> {
        Ok(sigmoid(self.margin(row)?))
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, GbdtError> {
        rows.iter().map(|r| self.predict_proba(r)).collect()
    }

    /// Structural validation for untrusted serialized ensembles: bounded
    /// sizes, forward-only child edges, in-range features, finite numbers.
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: String| Err(GbdtError::BadEnsemble(m));
        if self.num_features == 0 || self.num_features > MAX_FEATURES {
            return bad(format!("num_features {} outside 1..={MAX_FEATURES}", self.num_features));
        }
        if self.trees.is_empty() || self.trees.len() > MAX_TREES {
            return bad(format!("{} trees outside 1..={MAX_TREES}", self.trees.len()));
        }
        if !self.base_score.is_finite() || !self.learning_rate.is_finite() {
            return bad("base score and learning rate must be finite".into());
        }
        for (ti, tree) in self.trees.iter().enumerate() {
            if tree.nodes.is_empty() || tree.nodes.len() > MAX_NODES {
                return bad(format!("tree {ti} has {} nodes", tree.nodes.len()));
            }
            for (i, node) in tree.nodes.iter().enumerate() {
                match node {
                    TreeNode::Leaf { value } => {
                        if !value.is_finite() {
                            return bad(format!("tree {ti} node {i} has non-finite value"));
                        }
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        ..
                    } => {
                        if *feature >= self.num_features {
                            return bad(format!("tree {ti} node {i} splits feature {feature}"));
                        }
                        if !threshold.is_finite() {
                            return bad(format!("tree {ti} node {i} threshold not finite"));
                        }
                        // Forward-only edges rule out cycles by construction.
                        for &child in [left, right] {
                            if child <= i || child >= tree.nodes.len() {
                                return bad(format!(
                                    "tree {ti} node {i} child {child} out of order"
                                ));
                            }
                        }
                    }
                }
            }
            if tree.max_depth() > MAX_TREE_DEPTH {
                return bad(format!("tree {ti} deeper than {MAX_TREE_DEPTH}"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&EnsembleFile {
            version: 1,
            ensemble: self.clone(),
        })
        .expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GbdtError> {
        let file: EnsembleFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(GbdtError::BadEnsemble(format!(
                "unsupported ensemble version {}",
                file.version
            )));
        }
        file.ensemble.validate()?;
        Ok(file.ensemble)
    }
}

/// Fitted ensemble plus the full-batch training loss after each round.
#[derive(Debug)]
pub struct FitResult {
    pub ensemble: TreeEnsemble,
    pub train_loss: Vec<f64>,
}

fn validate_features(features: &[Vec<f64>], labels: &[u8]) -> Result<usize, GbdtError> {
    if features.is_empty() {
        return Err(GbdtError::BadFeatures("no rows".into()));
    }
    if features.len() != labels.len() {
        return Err(GbdtError::BadFeatures(format!(
            "{} rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let width = features[0].len();
    if width == 0 || width > MAX_FEATURES {
        return Err(GbdtError::BadFeatures(format!("row width {width}")));
    }
    for (i, row) in features.iter().enumerate() {
        if row.len() != width {
            return Err(GbdtError::BadFeatures(format!(
                "row {i} has {} values, expected {width}",
                row.len()
            )));
        }
        for &v in row {
            if v.is_infinite() {
                return Err(GbdtError::BadFeatures(format!(
                    "row {i} contains an infinite value; use NaN for missing"
                )));
            }
        }
    }
    for &l in labels {
        if l > 1 {
            return Err(GbdtError::BadFeatures(format!("label {l} is not 0 or 1")));
        }
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(GbdtError::SingleClass);
    }
    Ok(width)
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    missing_left: bool,
    gain: f64,
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    sorted: &'a [Vec<u32>],
    missing: &'a [Vec<u32>],
    min_leaf: usize,
    max_depth: usize,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    fn best_split(&self, rows: &[u32], in_node: &[bool]) -> Option<SplitChoice> {
        let (mut g_total, mut h_total) = (0.0, 0.0);
        for &r in rows {
            g_total += self.g[r as usize];
            h_total += self.h[r as usize];
        }
        let parent_score = g_total * g_total / (h_total + LAMBDA);
        let mut best: Option<SplitChoice> = None;
        for f in 0..self.features[0].len() {
            let (mut g_miss, mut h_miss, mut n_miss) = (0.0, 0.0, 0usize);
            for &r in &self.missing[f] {
                if in_node[r as usize] {
                    g_miss += self.g[r as usize];
                    h_miss += self.h[r as usize];
                    n_miss += 1;
                }
            }
            let n_present = rows.len() - n_miss;
            if n_present < 2 {
                continue;
            }
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            let mut prev_value = f64::NAN;
            for &r in &self.sorted[f] {
                let r = r as usize;
                if !in_node[r] {
                    continue;
                }
                let value = self.features[r][f];
                if nl > 0 && value > prev_value {
                    let threshold = prev_value + (value - prev_value) / 2.0;
                    // A midpoint can collapse onto the upper value when the
                    // two are adjacent floats; `< threshold` still separates
                    // them unless it collapsed onto the lower one.
                    if threshold > prev_value {
                        for missing_left in [true, false] {
                            let (ml_g, ml_h, ml_n) = if missing_left {
                                (g_miss, h_miss, n_miss)
                            } else {
                                (0.0, 0.0, 0)
                            };
                            let lg = gl + ml_g;
                            let lh = hl + ml_h;
                            let ln = nl + ml_n;
                            let rn = rows.len() - ln;
                            if ln < self.min_leaf || rn < self.min_leaf {
                                continue;
                            }
                            let rg = g_total - lg;
                            let rh = h_total - lh;
                            let gain = 0.5
                                * (lg * lg / (lh + LAMBDA) + rg * rg / (rh + LAMBDA)
                                    - parent_score);
                            if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                                best = Some(SplitChoice {
                                    feature: f,
                                    threshold,
                                    missing_left,
                                    gain,
                                });
                            }
                        }
                    }
                }
                gl += self.g[r];
                hl += self.h[r];
                nl += 1;
                prev_value = value;
            }
        }
        best
    }

    fn build(&mut self, rows: Vec<u32>, in_node: &mut [bool], depth: usize) -> usize {
        let choice = if depth < self.max_depth && rows.len() >= 2 * self.min_leaf {
            self.best_split(&rows, in_node)
        } else {
            None
        };
        match choice {
            None => {
                let (mut g, mut h) = (0.0, 0.0);
                for &r in &rows {
                    g += self.g[r as usize];
                    h += self.h[r as usize];
                }
                let idx = self.nodes.len();
                self.nodes.push(TreeNode::Leaf {
                    value: -g / (h + LAMBDA),
                });
                idx
            }
            Some(choice) => {
                let idx = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { value: 0.0 });
                let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
                for &r in &rows {
                    let x = self.features[r as usize][choice.feature];
                    let go_left = if x.is_nan() {
                        choice.missing_left
                    } else {
                        x < choice.threshold
                    };
                    if go_left {
                        left_rows.push(r);
                    } else {
                        right_rows.push(r);
                    }
                }
                for &r in &rows {
                    in_node[r as usize] = false;
                }
                for &r in &left_rows {
                    in_node[r as usize] = true;
                }
                let left = self.build(left_rows.clone(), in_node, depth + 1);
                for &r in &left_rows {
                    in_node[r as usize] = false;
                }
                for &r in &right_rows {
                    in_node[r as usize] = true;
                }
                let right = self.build(right_rows.clone(), in_node, depth + 1);
                for &r in &right_rows {
                    in_node[r as usize] = false;
                }
                self.nodes[idx] = TreeNode::Split {
                    feature: choice.feature,
                    threshold: choice.threshold,
                    missing_left: choice.missing_left,
                    left,
                    right,
                };
                idx
            }
        }
    }
}

fn log_loss(margins: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (&m, &y) in margins.iter().zip(labels) {
        let p = sigmoid(m).clamp(1e-15, 1.0 - 1e-15);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / margins.len() as f64
}

/// Train a boosted ensemble with the logistic objective.
pub fn fit(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &GbdtConfig,
) -> Result<FitResult, GbdtError> {
    cfg.validate()?;
    let width = validate_features(features, labels)?;
    let n = features.len();
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let base_rate = pos / n as f64;
    let base_score = (base_rate / (1.0 - base_rate)).ln();

    // Presort each feature once; missing rows kept separately.
    let mut sorted: Vec<Vec<u32>> = vec![Vec::new(); width];
    let mut missing: Vec<Vec<u32>> = vec![Vec::new(); width];
    for f in 0..width {
        for (r, row) in features.iter().enumerate() {
            if row[f].is_nan() {
                missing[f].push(r as u32);
            } else {
                sorted[f].push(r as u32);
            }
        }
        sorted[f].sort_by(|&a, &b| features[a as usize][f].total_cmp(&features[b as usize][f]));
    }

    let mut margins = vec![base_score; n];
    let mut trees = Vec::with_capacity(cfg.rounds);
    let mut train_loss = Vec::with_capacity(cfg.rounds);
    let mut in_node = vec![false; n];
    for round in 0..cfg.rounds as u64 {
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(margins[i]);
            g[i] = p - labels[i] as f64;
            h[i] = p * (1.0 - p);
        }
        let rows: Vec<u32> = if cfg.subsample < 1.0 {
            let take = ((n as f64 * cfg.subsample).floor() as usize).max(1);
            let mut order: Vec<u32> = (0..n as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(round);
            order.shuffle(&mut rng);
            order.truncate(take);
            order
        } else {
            (0..n as u32).collect()
        };
        for &r in &rows {
            in_node[r as usize] = true;
        }
        let mut builder = TreeBuilder {
            features,
            g: &g,
            h: &h,
            sorted: &sorted,
            missing: &missing,
            min_leaf: cfg.min_leaf,
            max_depth: cfg.max_depth,
            nodes: Vec::new(),
        };
        builder.build(rows.clone(), &mut in_node, 0);
        for &r in &rows {
            in_node[r as usize] = false;
        }
        let tree = Tree {
            nodes: builder.nodes,
        };
        for (i, row) in features.iter().enumerate() {
            margins[i] += cfg.learning_rate * tree.leaf_value(row);
        }
        trees.push(tree);
        train_loss.push(log_loss(&margins, labels));
    }
    Ok(FitResult {
        ensemble: TreeEnsemble {
            base_score,
            learning_rate: cfg.learning_rate,
            num_features: width,
            trees,
        },
        train_loss,
    })
}

/// Disjoint, covering folds with each label dealt round-robin, so per-fold
/// class balance stays within one sample of the global rate.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, GbdtError> {
    if k < 2 {
        return Err(GbdtError::BadTuning(format!("k {k} below 2")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.len() < k || neg.len() < k {
        return Err(GbdtError::BadTuning(format!(
            "need at least {k} samples of each class, have {} positive / {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for class in [pos, neg] {
        let mut class = class;
        class.shuffle(&mut rng);
        for (i, idx) in class.into_iter().enumerate() {
            folds[i % k].push(idx);
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneStrategy {
    RandomSearch,
    GpExpectedImprovement,
}

/// Hyperparameter ranges sampled during tuning (inclusive bounds; the
/// learning rate is drawn log-uniformly).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub rounds: (usize, usize),
    pub max_depth: (usize, usize),
    pub learning_rate: (f64, f64),
    pub min_leaf: (usize, usize),
    pub subsample: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            rounds: (20, 120),
            max_depth: (2, 5),
            learning_rate: (0.02, 0.3),
            min_leaf: (1, 20),
            subsample: (0.5, 1.0),
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<(), GbdtError> {
        let ok = self.rounds.0 >= 1
            && self.rounds.0 <= self.rounds.1
            && self.max_depth.0 >= 1
            && self.max_depth.0 <= self.max_depth.1
            && self.learning_rate.0 > 0.0
            && self.learning_rate.0 <= self.learning_rate.1
            && self.learning_rate.1 <= 1.0
            && self.min_leaf.0 >= 1
            && self.min_leaf.0 <= self.min_leaf.1
            && self.subsample.0 > 0.0
            && self.subsample.0 <= self.subsample.1
            && self.subsample.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(GbdtError::BadTuning("search space bounds are inverted or out of range".into()))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, seed: u64) -> GbdtConfig {
        let log_lr = rng.random_range(self.learning_rate.0.ln()..=self.learning_rate.1.ln());
        GbdtConfig {
            rounds: rng.random_range(self.rounds.0..=self.rounds.1),
            max_depth: rng.random_range(self.max_depth.0..=self.max_depth.1),
            learning_rate: log_lr.exp(),
            min_leaf: rng.random_range(self.min_leaf.0..=self.min_leaf.1),
            subsample: rng.random_range(self.subsample.0..=self.subsample.1),
            seed,
        }
    }

    /// Position of a config in the unit hypercube (for the GP surrogate).
    fn normalize(&self, cfg: &GbdtConfig) -> [f64; 5] {
        let unit = |v: f64, lo: f64, hi: f64| {
            if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            }
        };
        [
            unit(cfg.rounds as f64, self.rounds.0 as f64, self.rounds.1 as f64),
            unit(
                cfg.max_depth as f64,
                self.max_depth.0 as f64,
                self.max_depth.1 as f64,
            ),
            unit(
                cfg.learning_rate.ln(),
                self.learning_rate.0.ln(),
                self.learning_rate.1.ln(),
            ),
            unit(cfg.min_leaf as f64, self.min_leaf.0 as f64, self.min_leaf.1 as f64),
            unit(cfg.subsample, self.subsample.0, self.subsample.1),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRow {
    pub candidate: usize,
    pub config: GbdtConfig,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

#[derive(Debug)]
pub struct TuneOutcome {
    pub best: GbdtConfig,
    pub best_mean_auc: f64,
    pub table: Vec<TuneRow>,
}

fn cv_score(
    features: &[Vec<f64>],
    labels: &[u8],
    folds: &[Vec<usize>],
    cfg: &GbdtConfig,
) -> Result<Vec<f64>, GbdtError> {
    let mut fold_aucs = Vec::with_capacity(folds.len());
    for held_out in 0..folds.len() {
        let mut train_x = Vec::new();
        let mut train_y = Vec::new();
        for (f, fold) in folds.iter().enumerate() {
            if f == held_out {
                continue;
            }
            for &i in fold {
                train_x.push(features[i].clone());
                train_y.push(labels[i]);
            }
        }
        let fitted = fit(&train_x, &train_y, cfg)?;
        let mut scores = Vec::with_capacity(folds[held_out].len());
        let mut val_y = Vec::with_capacity(folds[held_out].len());
        for &i in &folds[held_out] {
            scores.push(fitted.ensemble.predict_proba(&features[i])?);
            val_y.push(labels[i]);
        }
        fold_aucs.push(roc_auc(&scores, &val_y)?);
    }
    Ok(fold_aucs)
}

/// Tiny Gaussian-process regressor with an RBF kernel, used only to rank
/// tuning candidates by expected improvement.
struct Gp {
    points: Vec<[f64; 5]>,
    alpha: Vec<f64>,
    chol: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
}

const GP_LENGTHSCALE: f64 = 0.4;
const GP_NOISE: f64 = 1e-6;

fn rbf(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * GP_LENGTHSCALE * GP_LENGTHSCALE)).exp()
}

fn cholesky(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= a[i][k] * a[j][k];
            }
            if i == j {
                a[i][j] = sum.max(1e-12).sqrt();
            } else {
                a[i][j] = sum / a[j][j];
            }
        }
        for j in (i + 1)..n {
            a[i][j] = 0.0;
        }
    }
    a
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

impl Gp {
    fn fit(points: Vec<[f64; 5]>, scores: &[f64]) -> Self {
        let n = points.len();
        let y_mean = scores.iter().sum::<f64>() / n as f64;
        let var = scores.iter().map(|s| (s - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = var.sqrt().max(1e-9);
        let y: Vec<f64> = scores.iter().map(|s| (s - y_mean) / y_std).collect();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = rbf(&points[i], &points[j]);
            }
            k[i][i] += GP_NOISE;
        }
        let chol = cholesky(k);
        let alpha = chol_solve(&chol, &y);
        Self {
            points,
            alpha,
            chol,
            y_mean,
            y_std,
        }
    }

    fn posterior(&self, x: &[f64; 5]) -> (f64, f64) {
        let kstar: Vec<f64> = self.points.iter().map(|p| rbf(p, x)).collect();
        let mu: f64 = kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        // Solve L v = k*; predictive variance = k(x,x) - v.v
        let n = self.points.len();
        let mut v = vec![0.0; n];
        for i in 0..n {
            let mut sum = kstar[i];
            for k in 0..i {
                sum -= self.chol[i][k] * v[k];
            }
            v[i] = sum / self.chol[i][i];
        }
        let var = (1.0 + GP_NOISE - v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
        (mu * self.y_std + self.y_mean, var.sqrt() * self.y_std)
    }

    fn expected_improvement(&self, x: &[f64; 5], best: f64) -> f64 {
        let (mu, sigma) = self.posterior(x);
        if sigma <= 1e-12 {
            return (mu - best).max(0.0);
        }
        let z = (mu - best) / sigma;
        let normal = Normal::new(0.0, 1.0).unwrap();
        (mu - best) * normal.cdf(z) + sigma * normal.pdf(z)
    }
}

/// Cross-validated hyperparameter search. Candidate 0 is always the default
/// config, so the returned best can never score below it on the shared
/// folds. Ties keep the earliest candidate.
pub fn kfold_tune(
    features: &[Vec<f64>],
    labels: &[u8],
    space: &SearchSpace,
    k: usize,
    budget: usize,
    seed: u64,
    strategy: TuneStrategy,
) -> Result<TuneOutcome, GbdtError> {
    space.validate()?;
    if budget == 0 {
        return Err(GbdtError::BadTuning("budget must be positive".into()));
    }
    validate_features(features, labels)?;
    let folds = stratified_kfold(labels, k, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);

    let mut table: Vec<TuneRow> = Vec::with_capacity(budget);
    let evaluate = |cfg: GbdtConfig,
                        table: &mut Vec<TuneRow>|
     -> Result<f64, GbdtError> {
        let fold_aucs = cv_score(features, labels, &folds, &cfg)?;
        let mean_auc = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
        table.push(TuneRow {
            candidate: table.len(),
            config: cfg,
            fold_aucs,
            mean_auc,
        });
        Ok(mean_auc)
    };

    evaluate(GbdtConfig { seed, ..GbdtConfig::default() }, &mut table)?;
    match strategy {
        TuneStrategy::RandomSearch => {
            while table.len() < budget {
                let cfg = space.sample(&mut rng, seed);
                evaluate(cfg, &mut table)?;
            }
        }
        TuneStrategy::GpExpectedImprovement => {
            // A few random probes first, then EI-guided picks.
            let init = (budget / 3).clamp(1, 8);
            while table.len() < budget.min(1 + init) {
                let cfg = space.sample(&mut rng, seed);
                evaluate(cfg, &mut table)?;
            }
            while table.len() < budget {
                let points: Vec<[f64; 5]> =
                    table.iter().map(|r| space.normalize(&r.config)).collect();
                let scores: Vec<f64> = table.iter().map(|r| r.mean_auc).collect();
                let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let gp = Gp::fit(points, &scores);
                let mut chosen: Option<(f64, GbdtConfig)> = None;
                for _ in 0..128 {
                    let cfg = space.sample(&mut rng, seed);
                    let ei = gp.expected_improvement(&space.normalize(&cfg), best);
                    if chosen.as_ref().is_none_or(|(b, _)| ei > *b) {
                        chosen = Some((ei, cfg));
                    }
                }
                evaluate(chosen.expect("candidate pool is nonempty").1, &mut table)?;
            }
        }
    }

    let best_row = table
        .iter()
        .max_by(|a, b| {
            a.mean_auc
                .partial_cmp(&b.mean_auc)
                .expect("fold AUCs are finite")
                .then(b.candidate.cmp(&a.candidate))
        })
        .expect("budget is at least 1");
    Ok(TuneOutcome {
        best: best_row.config.clone(),
        best_mean_auc: best_row.mean_auc,
        table: table.clone(),
    })
}

/// Tuning table as CSV: one row per candidate with per-fold AUCs.
pub fn write_tuning_csv<W: std::io::Write>(
    w: W,
    table: &[TuneRow],
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    let folds = table.first().map_or(0, |r| r.fold_aucs.len());
    let mut header = vec![
        "candidate".to_string(),
        "rounds".to_string(),
        "max_depth".to_string(),
        "learning_rate".to_string(),
        "min_leaf".to_string(),
        "subsample".to_string(),
    ];
    for f in 0..folds {
        header.push(format!("fold_{f}"));
    }
    header.push("mean_auc".to_string());
    wtr.write_record(&header)?;
    for row in table {
        let mut record = vec![
            row.candidate.to_string(),
            row.config.rounds.to_string(),
            row.config.max_depth.to_string(),
            row.config.learning_rate.to_string(),
            row.config.min_leaf.to_string(),
            row.config.subsample.to_string(),
        ];
        for auc in &row.fold_aucs {
            record.push(auc.to_string());
        }
        record.push(row.mean_auc.to_string());
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_data(n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let features: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i as f64 / n as f64 > 0.5) as u8).collect();
        (features, labels)
    }

    #[test]
    fn noiseless_step_function_is_separated_perfectly() {
        let (features, labels) = step_data(40);
        let cfg = GbdtConfig {
            rounds: 20,
            max_depth: 1,
            learning_rate: 0.5,
            min_leaf: 1,
            ..GbdtConfig::default()
        };
        let fitted = fit(&features, &labels, &cfg).unwrap();
        let scores = fitted.ensemble.predict_all(&features).unwrap();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_stump_matches_hand_computation() {
        // 4 points, base rate 1/2 so the initial margin is 0 and every
        // gradient is +-1/2 with hessian 1/4. The best stump splits between
        // 2 and 3; Newton leaves are -G/(H+1) = -+(2/3).
        let features = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let labels = vec![0, 0, 1, 1];
        let cfg = GbdtConfig {
            rounds: 1,
            max_depth: 1,
            learning_rate: 1.0,
            min_leaf: 1,
            ..GbdtConfig::default()
        };
        let fitted = fit(&features, &labels, &cfg).unwrap();
        let tree = &fitted.ensemble.trees[0];
        let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = &tree.nodes[0]
        else {
            panic!("expected a split at the root");
        };
        assert_eq!(*feature, 0);
        assert!(*threshold > 2.0 && *threshold < 3.0, "threshold {threshold}");
        let TreeNode::Leaf { value: lv } = tree.nodes[*left] else {
            panic!()
        };
        let TreeNode::Leaf { value: rv } = tree.nodes[*right] else {
            panic!()
        };
        assert!((lv - (-2.0 / 3.0)).abs() < 1e-12);
        assert!((rv - 2.0 / 3.0).abs() < 1e-12);
        let p = fitted.ensemble.predict_proba(&[4.0]).unwrap();
        assert!((p - sigmoid(2.0 / 3.0)).abs() < 1e-12);
        let p = fitted.ensemble.predict_proba(&[1.0]).unwrap();
        assert!((p - sigmoid(-2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_features_yield_base_rate_predictions() {
        let features = vec![vec![7.0]; 10];
        let labels = vec![1, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        let fitted = fit(&features, &labels, &GbdtConfig::default()).unwrap();
        for tree in &fitted.ensemble.trees {
            assert_eq!(tree.nodes.len(), 1, "no split gain exists");
        }
        let p = fitted.ensemble.predict_proba(&[7.0]).unwrap();
        assert!((p - 0.3).abs() < 1e-12);
    }

    #[test]
    fn input_contract_violations_are_rejected() {
        let (features, labels) = step_data(10);
        assert!(matches!(
            fit(&features, &vec![1; 10], &GbdtConfig::default()),
            Err(GbdtError::SingleClass)
        ));
        assert!(matches!(
            fit(&[], &[], &GbdtConfig::default()),
            Err(GbdtError::BadFeatures(_))
        ));
        let mut ragged = features.clone();
        ragged[3] = vec![1.0, 2.0];
        assert!(matches!(
            fit(&ragged, &labels, &GbdtConfig::default()),
            Err(GbdtError::BadFeatures(_))
        ));
        let mut infinite = features.clone();
        infinite[0][0] = f64::INFINITY;
        assert!(matches!(
            fit(&infinite, &labels, &GbdtConfig::default()),
            Err(GbdtError::BadFeatures(_))
        ));
        let bad_cfg = GbdtConfig {
            rounds: 0,
            ..GbdtConfig::default()
        };
        assert!(matches!(
            fit(&features, &labels, &bad_cfg),
            Err(GbdtError::BadConfig(_))
        ));
    }

    #[test]
    fn prediction_width_is_checked() {
        let (features, labels) = step_data(10);
        let fitted = fit(&features, &labels, &GbdtConfig::default()).unwrap();
        assert!(matches!(
            fitted.ensemble.predict_proba(&[0.1, 0.2]),
            Err(GbdtError::WidthMismatch {
                expected: 1,
                found: 2
            })
        ));
    }

    #[test]
    fn fitting_is_deterministic() {
        let (features, labels) = step_data(30);
        let cfg = GbdtConfig {
            subsample: 0.7,
            ..GbdtConfig::default()
        };
        let a = fit(&features, &labels, &cfg).unwrap();
        let b = fit(&features, &labels, &cfg).unwrap();
        assert_eq!(a.ensemble, b.ensemble);
        assert_eq!(a.train_loss, b.train_loss);
    }

    #[test]
    fn manually_built_monotone_ensemble_is_monotone() {
        let tree = |threshold: f64| Tree {
            nodes: vec![
                TreeNode::Split {
                    feature: 0,
                    threshold,
                    missing_left: true,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { value: -1.0 },
                TreeNode::Leaf { value: 1.0 },
            ],
        };
        let ensemble = TreeEnsemble {
            base_score: 0.0,
            learning_rate: 0.5,
            num_features: 1,
            trees: vec![tree(0.3), tree(0.6), tree(0.9)],
        };
        ensemble.validate().unwrap();
        let xs = [0.0, 0.2, 0.4, 0.5, 0.7, 0.95];
        let ps: Vec<f64> = xs
            .iter()
            .map(|&x| ensemble.predict_proba(&[x]).unwrap())
            .collect();
        for w in ps.windows(2) {
            assert!(w[1] >= w[0], "{ps:?}");
        }
    }

    #[test]
    fn missing_values_follow_the_gain_optimal_side() {
        // Missing rows are all positive; present values are all negative
        // class. The stump must send NaN toward the positive leaf.
        let mut features: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            features.push(vec![i as f64 / 10.0]);
            labels.push(0);
        }
        for _ in 0..10 {
            features.push(vec![f64::NAN]);
            labels.push(1);
        }
        let cfg = GbdtConfig {
            rounds: 5,
            max_depth: 1,
            learning_rate: 0.5,
            min_leaf: 1,
            ..GbdtConfig::default()
        };
        let fitted = fit(&features, &labels, &cfg).unwrap();
        let p_missing = fitted.ensemble.predict_proba(&[f64::NAN]).unwrap();
        let p_present = fitted.ensemble.predict_proba(&[0.3]).unwrap();
        assert!(
            p_missing > 0.8 && p_present < 0.2,
            "missing {p_missing}, present {p_present}"
        );
    }

    #[test]
    fn full_batch_training_loss_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let features: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels: Vec<u8> = features
            .iter()
            .map(|row| (row[0] + 0.3 * rng.random::<f64>() > 0.6) as u8)
            .collect();
        let cfg = GbdtConfig {
            rounds: 30,
            subsample: 1.0,
            min_leaf: 2,
            ..GbdtConfig::default()
        };
        let fitted = fit(&features, &labels, &cfg).unwrap();
        for w in fitted.train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", fitted.train_loss);
        }
    }

    #[test]
    fn depth_limit_is_respected() {
        let (features, labels) = step_data(64);
        for depth in [1, 2, 3] {
            let cfg = GbdtConfig {
                rounds: 3,
                max_depth: depth,
                min_leaf: 1,
                ..GbdtConfig::default()
            };
            let fitted = fit(&features, &labels, &cfg).unwrap();
            for tree in &fitted.ensemble.trees {
                assert!(tree.max_depth() <= depth);
            }
        }
    }

    #[test]
    fn ensemble_json_round_trips_and_validates() {
        let (features, labels) = step_data(20);
        let cfg = GbdtConfig {
            rounds: 3,
            ..GbdtConfig::default()
        };
        let fitted = fit(&features, &labels, &cfg).unwrap();
        let json = fitted.ensemble.to_json();
        let back = TreeEnsemble::from_json(&json).unwrap();
        assert_eq!(back, fitted.ensemble);

        assert!(TreeEnsemble::from_json("{}").is_err());
        let wrong_version = json.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(
            TreeEnsemble::from_json(&wrong_version),
            Err(GbdtError::BadEnsemble(_))
        ));
    }

    #[test]
    fn ensemble_validation_rejects_malformed_trees() {
        let leaf = TreeNode::Leaf { value: 0.5 };
        let base = TreeEnsemble {
            base_score: 0.0,
            learning_rate: 0.1,
            num_features: 2,
            trees: vec![Tree {
                nodes: vec![leaf.clone()],
            }],
        };
        base.validate().unwrap();

        let mut backward_edge = base.clone();
        backward_edge.trees[0].nodes = vec![
            TreeNode::Split {
                feature: 0,
                threshold: 0.5,
                missing_left: false,
                left: 0,
                right: 1,
            },
            leaf.clone(),
        ];
        assert!(backward_edge.validate().is_err());

        let mut bad_feature = base.clone();
        bad_feature.trees[0].nodes = vec![
            TreeNode::Split {
                feature: 9,
                threshold: 0.5,
                missing_left: false,
                left: 1,
                right: 2,
            },
            leaf.clone(),
            leaf.clone(),
        ];
        assert!(bad_feature.validate().is_err());

        let mut nan_leaf = base.clone();
        nan_leaf.trees[0].nodes = vec![TreeNode::Leaf { value: f64::NAN }];
        assert!(nan_leaf.validate().is_err());

        let mut no_trees = base.clone();
        no_trees.trees.clear();
        assert!(no_trees.validate().is_err());
    }

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 4 == 0) as u8).collect();
        let folds = stratified_kfold(&labels, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: Vec<usize> = folds.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
        let global_rate = 0.25;
        for fold in &folds {
            assert_eq!(fold.len(), 20);
            let pos = fold.iter().filter(|&&i| labels[i] == 1).count() as f64;
            assert!(
                (pos - fold.len() as f64 * global_rate).abs() <= 1.0,
                "fold positives {pos}"
            );
        }
        assert!(stratified_kfold(&labels, 1, 0).is_err());
        let few_pos: Vec<u8> = (0..20).map(|i| (i < 3) as u8).collect();
        assert!(stratified_kfold(&few_pos, 5, 0).is_err());
    }

    fn noisy_data(n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let labels: Vec<u8> = features
            .iter()
            .map(|row| (row[0] + row[1] + 0.6 * rng.random::<f64>() > 1.3) as u8)
            .collect();
        (features, labels)
    }

    #[test]
    fn budget_one_returns_the_default_candidate() {
        let (features, labels) = noisy_data(60);
        let out = kfold_tune(
            &features,
            &labels,
            &SearchSpace::default(),
            3,
            1,
            7,
            TuneStrategy::RandomSearch,
        )
        .unwrap();
        assert_eq!(out.table.len(), 1);
        assert_eq!(out.best.rounds, GbdtConfig::default().rounds);
        assert_eq!(out.best_mean_auc, out.table[0].mean_auc);
    }

    #[test]
    fn tuned_config_never_scores_below_the_default() {
        let (features, labels) = noisy_data(60);
        let small_space = SearchSpace {
            rounds: (5, 20),
            max_depth: (1, 3),
            ..SearchSpace::default()
        };
        for strategy in [TuneStrategy::RandomSearch, TuneStrategy::GpExpectedImprovement] {
            let out = kfold_tune(&features, &labels, &small_space, 3, 6, 9, strategy).unwrap();
            assert_eq!(out.table.len(), 6);
            let default_score = out.table[0].mean_auc;
            assert!(out.best_mean_auc >= default_score);
            for row in &out.table {
                assert_eq!(row.fold_aucs.len(), 3);
                assert!(row.mean_auc <= out.best_mean_auc);
            }
        }
    }

    #[test]
    fn tuning_is_deterministic_per_seed() {
        let (features, labels) = noisy_data(50);
        let space = SearchSpace {
            rounds: (5, 15),
            ..SearchSpace::default()
        };
        let run = |strategy| {
            kfold_tune(&features, &labels, &space, 3, 4, 11, strategy).unwrap()
        };
        for strategy in [TuneStrategy::RandomSearch, TuneStrategy::GpExpectedImprovement] {
            let a = run(strategy);
            let b = run(strategy);
            assert_eq!(a.best, b.best);
            assert_eq!(a.best_mean_auc, b.best_mean_auc);
            for (ra, rb) in a.table.iter().zip(&b.table) {
                assert_eq!(ra.config, rb.config);
                assert_eq!(ra.fold_aucs, rb.fold_aucs);
            }
        }
    }

    #[test]
    fn gp_surrogate_interpolates_its_observations() {
        let points = vec![
            [0.1, 0.2, 0.3, 0.4, 0.5],
            [0.9, 0.8, 0.7, 0.6, 0.5],
            [0.5, 0.5, 0.5, 0.5, 0.5],
        ];
        let scores = [0.6, 0.8, 0.7];
        let gp = Gp::fit(points.clone(), &scores);
        for (p, s) in points.iter().zip(&scores) {
            let (mu, sigma) = gp.posterior(p);
            assert!((mu - s).abs() < 1e-3, "mu {mu} vs {s}");
            assert!(sigma < 0.05, "sigma {sigma}");
        }
        // Far from data the posterior reverts toward the mean with wide
        // uncertainty, and EI stays nonnegative.
        let far = [0.0, 1.0, 0.0, 1.0, 0.0];
        let (_, sigma) = gp.posterior(&far);
        assert!(sigma > 0.05);
        assert!(gp.expected_improvement(&far, 0.8) >= 0.0);
    }

    #[test]
    fn tuning_csv_lists_every_candidate() {
        let (features, labels) = noisy_data(50);
        let space = SearchSpace {
            rounds: (5, 10),
            ..SearchSpace::default()
        };
        let out = kfold_tune(
            &features,
            &labels,
            &space,
            3,
            3,
            2,
            TuneStrategy::RandomSearch,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tuning_csv(&mut buf, &out.table).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("candidate,rounds,max_depth"));
        assert!(lines[0].ends_with("fold_0,fold_1,fold_2,mean_auc"));
    }
}
