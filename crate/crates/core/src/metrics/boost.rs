//! Gradient-boosted shallow regression trees, one-vs-rest, for the
//! predictor-matrix metric.
//!
//! Each class gets a stack of depth-limited trees fit to the logistic
//! residual with Newton leaf values (xgboost-style second-order steps).
//! Split quality is the usual gain `G_L²/H_L + G_R²/H_R − G²/H`; realized
//! gains accumulate per feature into the importance vector the metric
//! reads off. Everything is exhaustive and tie-broken deterministically,
//! so refits on identical data are identical.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Ridge term on leaf Newton steps; keeps empty-hessian leaves finite.
const LEAF_RIDGE: f64 = 1e-6;
/// Gains at or below this are noise; the node stays a leaf.
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 2,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_depth == 0 {
            return Err(Error::config("boosting needs rounds ≥ 1 and depth ≥ 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }
}

/// One-vs-rest boosted-tree classifier with split-gain importances.
#[derive(Debug, Clone)]
pub struct BoostedClassifier {
    n_classes: usize,
    n_features: usize,
    /// `trees[c]` is class c's additive stack.
    trees: Vec<Vec<Tree>>,
    feature_gain: Array1<f64>,
    config: BoostConfig,
}

impl BoostedClassifier {
    /// Fit on rows `x` with integer labels `y` in `0..n_classes`.
    pub fn fit(
        x: &Array2<f64>,
        y: &[usize],
        n_classes: usize,
        config: BoostConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::data("empty training matrix"));
        }
        if y.len() != n {
            return Err(Error::data(format!(
                "{} labels for {n} rows",
                y.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::data("need at least 2 classes"));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }

        // Row-major copies once; tree descent reads whole rows.
        let rows: Vec<&[f64]> = (0..n)
            .map(|i| x.row(i).to_slice().expect("standard layout"))
            .collect();
        // Per-feature index order, reused by every node of every tree.
        let mut sorted: Vec<Vec<usize>> = Vec::with_capacity(d);
        for f in 0..d {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
            sorted.push(idx);
        }

        let mut feature_gain = Array1::<f64>::zeros(d);
        let mut trees: Vec<Vec<Tree>> = vec![Vec::with_capacity(config.rounds); n_classes];
        let mut scores = vec![vec![0.0f64; n]; n_classes];
        let mut grad = vec![0.0f64; n];
        let mut hess = vec![0.0f64; n];
        let mut members = vec![true; n];

        for _ in 0..config.rounds {
            for c in 0..n_classes {
                for i in 0..n {
                    let p = sigmoid(scores[c][i]);
                    let t = if y[i] == c { 1.0 } else { 0.0 };
                    grad[i] = t - p;
                    hess[i] = (p * (1.0 - p)).max(1e-12);
                }
                members.fill(true);
                let mut builder = TreeBuilder {
                    x,
                    sorted: &sorted,
                    grad: &grad,
                    hess: &hess,
                    feature_gain: &mut feature_gain,
                    nodes: Vec::new(),
                };
                builder.grow(&mut members, config.max_depth);
                let tree = Tree {
                    nodes: builder.nodes,
                };
                for i in 0..n {
                    scores[c][i] += config.learning_rate * tree.predict_row(rows[i]);
                }
                trees[c].push(tree);
            }
        }

        Ok(BoostedClassifier {
            n_classes,
            n_features: d,
            trees,
            feature_gain,
            config,
        })
    }

    /// Per-class additive scores for each row.
    pub fn decision(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let (n, d) = x.dim();
        if d != self.n_features {
            return Err(Error::shape(format!(
                "expected {} features, got {d}",
                self.n_features
            )));
        }
        let mut out = Array2::<f64>::zeros((n, self.n_classes));
        for i in 0..n {
            let row = x.row(i);
            let row = row.to_slice().expect("standard layout");
            for c in 0..self.n_classes {
                let mut s = 0.0;
                for tree in &self.trees[c] {
                    s += self.config.learning_rate * tree.predict_row(row);
                }
                out[[i, c]] = s;
            }
        }
        Ok(out)
    }

    /// Argmax-score class per row (ties to the lowest class id).
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let scores = self.decision(x)?;
        Ok(scores
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0usize;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != y.len() {
            return Err(Error::data("label count mismatch"));
        }
        let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / y.len() as f64)
    }

    /// Total realized split gain per feature (unnormalized).
    pub fn feature_importances(&self) -> &Array1<f64> {
        &self.feature_gain
    }
}

struct TreeBuilder<'a> {
    x: &'a Array2<f64>,
    sorted: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
    feature_gain: &'a mut Array1<f64>,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    /// Grow a node over the rows flagged in `members`; returns its index.
    fn grow(&mut self, members: &mut [bool], depth_left: usize) -> usize {
        let (g, h, count) = sums(members, self.grad, self.hess);
        if depth_left == 0 || count < 2 {
            return self.push_leaf(g, h);
        }
        let Some(best) = self.best_split(members, g, h) else {
            return self.push_leaf(g, h);
        };
        self.feature_gain[best.feature] += best.gain;

        // Reserve the split slot, then carve members into the two sides.
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let mut right_members = vec![false; members.len()];
        for i in 0..members.len() {
            if members[i] && self.x[[i, best.feature]] > best.threshold {
                right_members[i] = true;
                members[i] = false;
            }
        }
        let left = self.grow(members, depth_left - 1);
        let right = self.grow(&mut right_members, depth_left - 1);
        self.nodes[at] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        at
    }

    fn push_leaf(&mut self, g: f64, h: f64) -> usize {
        self.nodes.push(Node::Leaf {
            value: g / (h + LEAF_RIDGE),
        });
        self.nodes.len() - 1
    }

    fn best_split(&self, members: &[bool], g_total: f64, h_total: f64) -> Option<BestSplit> {
        let parent = g_total * g_total / (h_total + LEAF_RIDGE);
        let mut best: Option<BestSplit> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let mut gl = 0.0;
            let mut hl = 0.0;
            let mut prev: Option<usize> = None;
            for &i in order {
                if !members[i] {
                    continue;
                }
                if let Some(p) = prev {
                    let lo = self.x[[p, f]];
                    let hi = self.x[[i, f]];
                    if hi > lo {
                        let gr = g_total - gl;
                        let hr = h_total - hl;
                        let gain = gl * gl / (hl + LEAF_RIDGE) + gr * gr / (hr + LEAF_RIDGE)
                            - parent;
                        if gain > MIN_GAIN
                            && best.as_ref().is_none_or(|b| gain > b.gain)
                        {
                            best = Some(BestSplit {
                                feature: f,
                                threshold: 0.5 * (lo + hi),
                                gain,
                            });
                        }
                    }
                }
                gl += self.grad[i];
                hl += self.hess[i];
                prev = Some(i);
            }
        }
        best
    }
}

fn sums(members: &[bool], grad: &[f64], hess: &[f64]) -> (f64, f64, usize) {
    let mut g = 0.0;
    let mut h = 0.0;
    let mut count = 0usize;
    for i in 0..members.len() {
        if members[i] {
            g += grad[i];
            h += hess[i];
            count += 1;
        }
    }
    (g, h, count)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
