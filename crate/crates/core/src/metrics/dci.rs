//! Disentanglement, completeness and informativeness from a predictor
//! importance matrix.
//!
//! One classifier per factor maps codes to factor values; its per-dimension
//! importances form a column of the matrix R. Disentanglement penalizes
//! dimensions that spread importance across factors, completeness penalizes
//! factors that spread across dimensions, and informativeness is held-out
//! accuracy. Entropies are normalized by the matrix side so both scores
//! live in the unit interval.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::data::GroundTruthDataset;
use crate::error::{Error, Result};
use crate::metrics::boost::{BoostConfig, BoostedClassifier};
use crate::metrics::{embed_indices, sample_indices, Representation};

/// Which per-factor predictor produces accuracies and importances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DciPredictor {
    /// Gradient-boosted shallow trees with split-gain importances.
    BoostedTrees,
    /// Multinomial logistic regression with absolute-weight importances.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DciConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub predictor: DciPredictor,
    #[serde(skip, default)]
    pub boost: BoostConfig,
    /// Images per embedding call.
    pub chunk: usize,
}

impl Default for DciConfig {
    fn default() -> Self {
        DciConfig {
            train_samples: 5000,
            test_samples: 2500,
            predictor: DciPredictor::BoostedTrees,
            boost: BoostConfig::default(),
            chunk: 256,
        }
    }
}

impl DciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_samples < 10 || self.test_samples < 10 {
            return Err(Error::config("need at least 10 train and test samples"));
        }
        if self.chunk == 0 {
            return Err(Error::config("chunk must be positive"));
        }
        self.boost.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DciOutcome {
    pub disentanglement: f64,
    pub completeness: f64,
    pub informativeness: f64,
    /// Column-normalized importances, `(dims × scored factors)`.
    pub importance: Array2<f64>,
    /// Factor ids with cardinality ≥ 2, in dataset order.
    pub scored_factors: Vec<usize>,
    /// Held-out accuracy per scored factor.
    pub accuracy: Vec<f64>,
}

/// Entropy of a distribution with logarithm base `base`.
fn entropy_base(p: &[f64], base: usize) -> f64 {
    let ln_base = (base as f64).ln();
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
        / ln_base
}

/// Disentanglement and completeness from a column-normalized importance
/// matrix. Factored out so closed-form matrices plug straight in.
pub fn dci_scores_from_importance(importance: &Array2<f64>) -> (f64, f64) {
    let (d, f) = importance.dim();
    let total: f64 = importance.sum();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    // Base max(side, 2) keeps single-row/column edge cases finite; for
    // side ≥ 2 it is exactly the matrix side.
    let mut disent = 0.0;
    for j in 0..d {
        let row: Vec<f64> = importance.row(j).to_vec();
        let row_sum: f64 = row.iter().sum();
        if row_sum <= 0.0 {
            continue;
        }
        let norm: Vec<f64> = row.iter().map(|v| v / row_sum).collect();
        let rho = row_sum / total;
        disent += rho * (1.0 - entropy_base(&norm, f.max(2)));
    }
    let mut complete = 0.0;
    for k in 0..f {
        let col: Vec<f64> = importance.column(k).to_vec();
        let col_sum: f64 = col.iter().sum();
        if col_sum <= 0.0 {
            continue;
        }
        let norm: Vec<f64> = col.iter().map(|v| v / col_sum).collect();
        let weight = col_sum / total;
        complete += weight * (1.0 - entropy_base(&norm, d.max(2)));
    }
    (disent.clamp(0.0, 1.0), complete.clamp(0.0, 1.0))
}

pub fn dci<R: Rng>(
    dataset: &GroundTruthDataset,
    rep: &dyn Representation,
    config: &DciConfig,
    rng: &mut R,
) -> Result<DciOutcome> {
    config.validate()?;
    let radices = dataset.radices();
    let scored_factors: Vec<usize> = (0..radices.len()).filter(|&f| radices[f] >= 2).collect();
    if scored_factors.len() < 2 {
        return Err(Error::data(format!(
            "predictor-matrix metric needs ≥ 2 non-degenerate factors, found {}",
            scored_factors.len()
        )));
    }

    let train_idx = sample_indices(dataset, config.train_samples, rng);
    let test_idx = sample_indices(dataset, config.test_samples, rng);
    let x_train = embed_indices(dataset, rep, &train_idx, config.chunk)?;
    let x_test = embed_indices(dataset, rep, &test_idx, config.chunk)?;
    let d = x_train.dim().1;

    let labels_of = |indices: &[usize], f: usize| -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| Ok(dataset.index_to_factors(i)?[f]))
            .collect()
    };

    let mut importance = Array2::<f64>::zeros((d, scored_factors.len()));
    let mut accuracy = Vec::with_capacity(scored_factors.len());
    for (slot, &f) in scored_factors.iter().enumerate() {
        let y_train = labels_of(&train_idx, f)?;
        let y_test = labels_of(&test_idx, f)?;
        let (imp, acc) = match config.predictor {
            DciPredictor::BoostedTrees => {
                let clf =
                    BoostedClassifier::fit(&x_train, &y_train, radices[f], config.boost)?;
                (clf.feature_importances().clone(), clf.accuracy(&x_test, &y_test)?)
            }
            DciPredictor::Logistic => {
                let clf = LogisticClassifier::fit(&x_train, &y_train, radices[f]);
                (clf.importances(), clf.accuracy(&x_test, &y_test))
            }
        };
        let sum = imp.sum();
        if sum > 0.0 {
            for j in 0..d {
                importance[[j, slot]] = imp[j] / sum;
            }
        }
        accuracy.push(acc);
    }

    let (disentanglement, completeness) = dci_scores_from_importance(&importance);
    let informativeness = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    Ok(DciOutcome {
        disentanglement,
        completeness,
        informativeness,
        importance,
        scored_factors,
        accuracy,
    })
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features; the fallback predictor.
struct LogisticClassifier {
    w: Array2<f64>,
    b: Array1<f64>,
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl LogisticClassifier {
    fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize) -> Self {
        let (n, d) = x.dim();
        let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;
        let mut scale = Array1::<f64>::zeros(d);
        for j in 0..d {
            let var = x
                .column(j)
                .iter()
                .map(|&v| (v - mean[j]) * (v - mean[j]))
                .sum::<f64>()
                / n as f64;
            scale[j] = var.sqrt().max(1e-8);
        }
        let xs = standardize(x, &mean, &scale);

        let mut w = Array2::<f64>::zeros((d, n_classes));
        let mut b = Array1::<f64>::zeros(n_classes);
        let lr = 0.5;
        for _ in 0..300 {
            let mut dw = Array2::<f64>::zeros((d, n_classes));
            let mut db = Array1::<f64>::zeros(n_classes);
            for i in 0..n {
                let row = xs.row(i);
                let mut logits: Vec<f64> =
                    (0..n_classes).map(|c| row.dot(&w.column(c)) + b[c]).collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - top).exp();
                    z += *l;
                }
                for c in 0..n_classes {
                    let p = logits[c] / z;
                    let err = p - if y[i] == c { 1.0 } else { 0.0 };
                    for j in 0..d {
                        dw[[j, c]] += err * row[j];
                    }
                    db[c] += err;
                }
            }
            let inv_n = 1.0 / n as f64;
            w.zip_mut_with(&dw, |wv, &g| *wv -= lr * g * inv_n);
            b.zip_mut_with(&db, |bv, &g| *bv -= lr * g * inv_n);
        }
        LogisticClassifier { w, b, mean, scale }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let xs = standardize(x, &self.mean, &self.scale);
        xs.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..self.b.len() {
                    let v = row.dot(&self.w.column(c)) + self.b[c];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
    }

    fn importances(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.w.dim().0, |j| {
            self.w.row(j).iter().map(|v| v.abs()).sum()
        })
    }
}

fn standardize(x: &Array2<f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for j in 0..row.len() {
            row[j] = (row[j] - mean[j]) / scale[j];
        }
    }
    out
}
