//! Prototypical pair network and its losses.
//!
//! The network maps a channel-concatenated image pair to (a) an
//! m-dimensional metric embedding and (b) a d-dimensional prediction of
//! the latent change magnitude. Both heads share one convolutional trunk
//! and differ only in their final dense layer.
//!
//! Losses: the *uniqueness* loss is a prototype-softmax NLL over intervened
//! dimensions, the *consistency* loss replaces prototypes with the same
//! example's own support embeddings, and the *isometry* loss is a squared
//! error on the change-magnitude head. The first two scale each query's
//! NLL by the (stop-gradient by default) mean KL of its intervened
//! dimension.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::{relu, relu_grad, Conv2d, Dense, ParamVisitor, Params};
use crate::vae::ModelDims;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Pair network: conv trunk over the 2C-channel pair, then one dense head
/// per task.
#[derive(Debug, Clone)]
pub struct ProtoNet<S: Scalar> {
    pub convs: Vec<Conv2d<S>>,
    /// Metric embedding head, width m.
    pub gamma_head: Dense<S>,
    /// Change-magnitude head, width d.
    pub psi_head: Dense<S>,
    dims: ModelDims,
    metric_dim: usize,
    pair_channels: usize,
    top_flat: usize,
}

/// Forward activations `ProtoNet::backward` needs.
#[derive(Debug)]
pub struct ProtoNetCache<S: Scalar> {
    input_dims: Vec<(usize, usize, usize, usize)>,
    cols: Vec<Array2<S>>,
    pres: Vec<Array4<S>>,
    flat: Array2<S>,
}

impl<S: Scalar> ProtoNet<S> {
    pub fn new<R: Rng>(dims: ModelDims, metric_dim: usize, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        if metric_dim == 0 {
            return Err(Error::config("metric_dim must be positive"));
        }
        let pair_channels = 2 * dims.channels;
        let mut convs = Vec::new();
        let mut c_in = pair_channels;
        for c_out in dims.channel_progression() {
            convs.push(Conv2d::new(c_in, c_out, KERNEL, STRIDE, PAD, rng));
            c_in = c_out;
        }
        let top_flat = dims.top_flat();
        let gamma_head = Dense::new(top_flat, metric_dim, rng);
        let psi_head = Dense::new(top_flat, dims.latent_dim, rng);
        Ok(ProtoNet {
            convs,
            gamma_head,
            psi_head,
            dims,
            metric_dim,
            pair_channels,
            top_flat,
        })
    }

    pub fn metric_dim(&self) -> usize {
        self.metric_dim
    }

    /// Embed pairs `(N, H, W, 2C)`; returns metric embeddings `(N, m)`,
    /// change-magnitude predictions `(N, d)` and the backward cache.
    pub fn forward(
        &self,
        pairs: &Array4<S>,
    ) -> Result<(Array2<S>, Array2<S>, ProtoNetCache<S>)> {
        let (n, h, w, c) = pairs.dim();
        if (h, w) != (self.dims.height, self.dims.width) || c != self.pair_channels {
            return Err(Error::shape(format!(
                "pair batch {h}x{w}x{c} does not match expected {}x{}x{}",
                self.dims.height, self.dims.width, self.pair_channels
            )));
        }
        let mut input_dims = Vec::new();
        let mut cols = Vec::new();
        let mut pres = Vec::new();
        let mut cur = pairs.clone();
        for conv in &self.convs {
            input_dims.push(cur.dim());
            let (pre, col) = conv.forward(&cur);
            cur = relu(&pre);
            cols.push(col);
            pres.push(pre);
        }
        let flat = cur
            .into_shape_with_order((n, self.top_flat))
            .expect("conv output contiguous");
        let emb = self.gamma_head.forward(&flat);
        let iso = self.psi_head.forward(&flat);
        Ok((
            emb,
            iso,
            ProtoNetCache {
                input_dims,
                cols,
                pres,
                flat,
            },
        ))
    }

    /// Accumulates parameter gradients; returns dL/d(pairs).
    pub fn backward(
        &mut self,
        cache: &ProtoNetCache<S>,
        d_emb: &Array2<S>,
        d_iso: &Array2<S>,
    ) -> Array4<S> {
        let d_flat = self.gamma_head.backward(&cache.flat, d_emb)
            + self.psi_head.backward(&cache.flat, d_iso);
        let top = *cache.input_dims.last().expect("at least one conv");
        let last = self.convs.last().expect("at least one conv");
        let (oh, ow) = last.out_spatial(top.1, top.2);
        let mut d_cur = d_flat
            .into_shape_with_order((top.0, oh, ow, last.c_out))
            .expect("flat gradient matches top grid");
        for i in (0..self.convs.len()).rev() {
            let d_pre = relu_grad(&cache.pres[i], &d_cur);
            d_cur = self.convs[i].backward(&cache.cols[i], cache.input_dims[i], &d_pre);
        }
        d_cur
    }

    pub fn zero_grads(&mut self) {
        for c in &mut self.convs {
            c.zero_grads();
        }
        self.gamma_head.zero_grads();
        self.psi_head.zero_grads();
    }
}

impl<S: Scalar> Params<S> for ProtoNet<S> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, S>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("proto.conv{i}"), f);
        }
        self.gamma_head.visit_params("proto.gamma", f);
        self.psi_head.visit_params("proto.psi", f);
    }
}

/// Mean of each support set's embeddings: input `(d, B, m)`, output
/// `(d, m)`.
pub fn compute_prototypes<S: Scalar>(support_embs: &Array3<S>) -> Result<Array2<S>> {
    let (d, b, _m) = support_embs.dim();
    if b == 0 || d == 0 {
        return Err(Error::shape("empty support set"));
    }
    let inv_b = S::from_f64(1.0 / b as f64);
    Ok(support_embs.sum_axis(Axis(1)) * inv_b)
}

/// Distance matrix between query rows and bank rows; squared Euclidean or
/// plain Euclidean.
fn distances<S: Scalar>(queries: &Array2<S>, bank: &Array2<S>, squared: bool) -> Array2<S> {
    let (n, _) = queries.dim();
    let (d, _) = bank.dim();
    let mut out = Array2::<S>::zeros((n, d));
    for i in 0..n {
        for l in 0..d {
            let mut acc = S::zero();
            for (&q, &c) in queries.row(i).iter().zip(bank.row(l)) {
                let diff = q - c;
                acc += diff * diff;
            }
            out[[i, l]] = if squared { acc } else { acc.sqrt() };
        }
    }
    out
}

/// Softmax over negated distances, one row per query, computed through a
/// shifted log-sum-exp.
pub fn probs_from_distances<S: Scalar>(dists: &Array2<S>) -> Array2<S> {
    let mut probs = Array2::<S>::zeros(dists.dim());
    for (mut prow, drow) in probs.rows_mut().into_iter().zip(dists.rows()) {
        // logits = -d; stable softmax shifts by the max logit = -min dist.
        let min_d = drow.iter().cloned().fold(S::infinity(), S::min);
        let mut denom = S::zero();
        for (&d, p) in drow.iter().zip(prow.iter_mut()) {
            *p = (min_d - d).exp();
            denom += *p;
        }
        prow.mapv_inplace(|p| p / denom);
    }
    probs
}

/// Class distribution of one query over the prototype bank.
pub fn class_probs<S: Scalar>(
    query: &Array1<S>,
    bank: &Array2<S>,
    squared: bool,
) -> Array1<S> {
    let q = query.view().insert_axis(Axis(0)).to_owned();
    let d = distances(&q, bank, squared);
    probs_from_distances(&d).index_axis(Axis(0), 0).to_owned()
}

/// Nearest-prototype classification (argmax class probability).
pub fn classify<S: Scalar>(queries: &Array2<S>, bank: &Array2<S>, squared: bool) -> Vec<usize> {
    let d = distances(queries, bank, squared);
    d.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite distances"))
                .map(|(i, _)| i)
                .expect("non-empty bank")
        })
        .collect()
}

/// Per-query weighted NLL core shared by the uniqueness and consistency
/// losses. Returns the scalar and gradients w.r.t. queries, reference rows
/// and weights.
///
/// `refs_of` maps a query index to its d reference embeddings (prototype
/// bank rows, or the example's own support embeddings).
struct SoftmaxNll<S: Scalar> {
    value: f64,
    d_query: Array2<S>,
    /// One gradient row per (query, class) reference embedding.
    d_refs: Array3<S>,
    d_weights: Array1<S>,
}

fn weighted_softmax_nll<S: Scalar>(
    queries: &Array2<S>,
    refs: &dyn Fn(usize) -> Array2<S>,
    labels: &[usize],
    kl_weights: &Array1<S>,
    squared: bool,
) -> Result<SoftmaxNll<S>> {
    let (n, m) = queries.dim();
    let d = kl_weights.len();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} queries",
            labels.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0f64;
    let mut d_query = Array2::<S>::zeros((n, m));
    let mut d_refs = Array3::<S>::zeros((n, d, m));
    let mut d_weights = Array1::<S>::zeros(d);
    for i in 0..n {
        let label = labels[i];
        if label >= d {
            return Err(Error::shape(format!(
                "label {label} out of range for {d} classes"
            )));
        }
        let bank = refs(i);
        if bank.dim() != (d, m) {
            return Err(Error::shape(format!(
                "reference bank {:?} does not match ({d}, {m})",
                bank.dim()
            )));
        }
        let q = queries.row(i).insert_axis(Axis(0)).to_owned();
        let sq_dists = distances(&q, &bank, true);
        let dists = if squared {
            sq_dists.clone()
        } else {
            sq_dists.mapv(|v| v.sqrt())
        };
        // NLL = logsumexp(-dists) + dist[label].
        let min_d = dists.iter().cloned().fold(S::infinity(), S::min);
        let exps: Vec<S> = dists.iter().map(|&v| (min_d - v).exp()).collect();
        let denom: S = exps.iter().fold(S::zero(), |a, &b| a + b);
        let log_denom = denom.ln().as_f64() - min_d.as_f64();
        let nll = log_denom + dists[[0, label]].as_f64();
        let w = kl_weights[label].as_f64();
        value += nll * w * inv_n;
        d_weights[label] += S::from_f64(nll * inv_n);

        // logit_l = -dist_l, so d nll / d dist_l = 1{l = label} - p_l.
        for l in 0..d {
            let p = (exps[l] / denom).as_f64();
            let d_dist = S::from_f64((if l == label { 1.0 } else { 0.0 } - p) * w * inv_n);
            // Chain to the embeddings through the chosen distance.
            let scale = if squared {
                d_dist + d_dist // d(sq)/d(emb diff) handled below with factor (q - c)
            } else {
                let dist = dists[[0, l]];
                if dist == S::zero() {
                    S::zero()
                } else {
                    d_dist / dist
                }
            };
            for j in 0..m {
                let diff = queries[[i, j]] - bank[[l, j]];
                let g = scale * diff;
                d_query[[i, j]] += g;
                d_refs[[i, l, j]] -= g;
            }
        }
    }
    Ok(SoftmaxNll {
        value,
        d_query,
        d_refs,
        d_weights,
    })
}

/// Uniqueness loss gradients.
#[derive(Debug)]
pub struct UniquenessGrads<S: Scalar> {
    pub value: f64,
    pub d_query: Array2<S>,
    pub d_bank: Array2<S>,
    /// Nonzero only when the KL weights are treated as differentiable.
    pub d_weights: Array1<S>,
}

/// Prototype-softmax NLL over intervened dimensions, each query scaled by
/// the mean KL of its true dimension.
pub fn uniqueness_loss<S: Scalar>(
    query_embs: &Array2<S>,
    bank: &Array2<S>,
    labels: &[usize],
    kl_weights: &Array1<S>,
    squared: bool,
) -> Result<UniquenessGrads<S>> {
    let (d, m) = bank.dim();
    if kl_weights.len() != d {
        return Err(Error::shape(format!(
            "{} kl weights for {d} prototypes",
            kl_weights.len()
        )));
    }
    let bank_owned = bank.clone();
    let core = weighted_softmax_nll(
        query_embs,
        &move |_i| bank_owned.clone(),
        labels,
        kl_weights,
        squared,
    )?;
    let mut d_bank = Array2::<S>::zeros((d, m));
    for i in 0..query_embs.dim().0 {
        for l in 0..d {
            for j in 0..m {
                d_bank[[l, j]] += core.d_refs[[i, l, j]];
            }
        }
    }
    Ok(UniquenessGrads {
        value: core.value,
        d_query: core.d_query,
        d_bank,
        d_weights: core.d_weights,
    })
}

/// Consistency loss gradients.
#[derive(Debug)]
pub struct ConsistencyGrads<S: Scalar> {
    pub value: f64,
    pub d_query: Array2<S>,
    /// `(d, B, m)`, aligned with the support embedding array.
    pub d_support: Array3<S>,
    pub d_weights: Array1<S>,
}

/// Same weighted NLL, but query `i` is scored against the `d` support
/// embeddings generated from example `i` itself.
pub fn consistency_loss<S: Scalar>(
    query_embs: &Array2<S>,
    support_embs: &Array3<S>,
    labels: &[usize],
    kl_weights: &Array1<S>,
    squared: bool,
) -> Result<ConsistencyGrads<S>> {
    let (d, b, m) = support_embs.dim();
    let n = query_embs.dim().0;
    if n != b {
        return Err(Error::shape(format!(
            "{n} queries but supports built from {b} examples; per-example alignment broken"
        )));
    }
    if kl_weights.len() != d {
        return Err(Error::shape(format!(
            "{} kl weights for {d} support sets",
            kl_weights.len()
        )));
    }
    let refs = |i: usize| -> Array2<S> {
        let mut own = Array2::<S>::zeros((d, m));
        for k in 0..d {
            own.row_mut(k)
                .assign(&support_embs.slice(ndarray::s![k, i, ..]));
        }
        own
    };
    let core = weighted_softmax_nll(query_embs, &refs, labels, kl_weights, squared)?;
    let mut d_support = Array3::<S>::zeros((d, b, m));
    for i in 0..n {
        for k in 0..d {
            for j in 0..m {
                d_support[[k, i, j]] += core.d_refs[[i, k, j]];
            }
        }
    }
    Ok(ConsistencyGrads {
        value: core.value,
        d_query: core.d_query,
        d_support,
        d_weights: core.d_weights,
    })
}

/// Combined prototypical loss: plain sum.
pub fn proto_loss(l_u: f64, l_c: f64) -> f64 {
    l_u + l_c
}

/// Mean squared error of change-magnitude predictions, summed over latent
/// dimensions, averaged over pairs. Returns the scalar plus gradients for
/// both arguments (targets depend on `z`, so their gradient matters too).
pub fn isometry_loss<S: Scalar>(
    preds: &Array2<S>,
    targets: &Array2<S>,
) -> Result<(f64, Array2<S>, Array2<S>)> {
    if preds.dim() != targets.dim() {
        return Err(Error::shape(format!(
            "predictions {:?} vs targets {:?}",
            preds.dim(),
            targets.dim()
        )));
    }
    let n = preds.dim().0;
    if n == 0 {
        return Err(Error::shape("empty isometry batch"));
    }
    let inv_n = S::from_f64(1.0 / n as f64);
    let diff = preds - targets;
    let value = diff.iter().map(|&v| (v * v).as_f64()).sum::<f64>() / n as f64;
    let two = S::from_f64(2.0);
    let d_pred = diff.mapv(|v| two * v * inv_n);
    let d_target = d_pred.mapv(|v| -v);
    Ok((value, d_pred, d_target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_flat;
    use crate::rng::{stream_rng, StreamId};
    use ndarray::{arr1, arr2, arr3};

    fn test_dims() -> ModelDims {
        ModelDims {
            height: 8,
            width: 8,
            channels: 1,
            latent_dim: 3,
            base_channels: 2,
            dense_width: 4,
        }
    }

    #[test]
    fn prototypes_are_support_means() {
        let embs = arr3(&[[[1.0f64, 3.0], [3.0, 5.0]]]);
        let bank = compute_prototypes(&embs).unwrap();
        assert_eq!(bank, arr2(&[[2.0, 4.0]]));
        // Single-element support set: prototype equals the embedding.
        let single = arr3(&[[[7.0f64, -1.0]]]);
        assert_eq!(compute_prototypes(&single).unwrap(), arr2(&[[7.0, -1.0]]));
    }

    #[test]
    fn prototypes_invariant_to_support_order() {
        let embs = arr3(&[[[1.0f64, 2.0], [5.0, -4.0], [0.0, 0.5]]]);
        let flipped = arr3(&[[[0.0f64, 0.5], [5.0, -4.0], [1.0, 2.0]]]);
        assert_eq!(
            compute_prototypes(&embs).unwrap(),
            compute_prototypes(&flipped).unwrap()
        );
    }

    #[test]
    fn prototypes_reject_empty_support() {
        let empty = Array3::<f64>::zeros((2, 0, 3));
        assert!(compute_prototypes(&empty).is_err());
    }

    #[test]
    fn class_probs_uniform_when_equidistant() {
        let bank = arr2(&[[1.0f64, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let q = arr1(&[0.0f64, 0.0]);
        let p = class_probs(&q, &bank, true);
        for &v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_probs_match_logistic_of_distance_gap() {
        // Squared distances (0, 1): p_0 = 1 / (1 + e^{-1}).
        let bank = arr2(&[[0.0f64], [1.0]]);
        let q = arr1(&[0.0f64]);
        let p = class_probs(&q, &bank, true);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p[0] - expect).abs() < 1e-12, "p0 = {}", p[0]);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn class_probs_limit_to_one_when_others_far() {
        let bank = arr2(&[[0.0f64], [1e4]]);
        let q = arr1(&[0.0f64]);
        let p = class_probs(&q, &bank, true);
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probs_invariant_under_distance_shift() {
        let d = arr2(&[[0.3f64, 1.7, 0.9]]);
        let p1 = probs_from_distances(&d);
        let p2 = probs_from_distances(&d.mapv(|v| v + 123.4));
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((p1.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniqueness_matches_hand_computed_value() {
        // d=2, m=1: query at 0, true prototype at 0 (dist 0), other at 1
        // (squared dist 1), weight 0.5 -> 0.5 ln(1 + e^{-1}).
        let queries = arr2(&[[0.0f64]]);
        let bank = arr2(&[[0.0f64], [1.0]]);
        let w = arr1(&[0.5f64, 0.5]);
        let out = uniqueness_loss(&queries, &bank, &[0], &w, true).unwrap();
        let expect = 0.5 * (1.0 + (-1.0f64).exp()).ln();
        assert!((out.value - expect).abs() < 1e-12, "got {}", out.value);
        assert!((out.value - 0.1566).abs() < 1e-4);
    }

    #[test]
    fn uniqueness_zero_when_weights_zero() {
        let queries = arr2(&[[0.3f64, -0.7], [1.2, 0.1]]);
        let bank = arr2(&[[0.0f64, 0.0], [1.0, 1.0], [2.0, -1.0]]);
        let w = arr1(&[0.0f64, 0.0, 0.0]);
        let out = uniqueness_loss(&queries, &bank, &[0, 2], &w, true).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.d_query.iter().all(|&v| v == 0.0));
        assert!(out.d_bank.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniqueness_limit_zero_at_own_prototype() {
        let queries = arr2(&[[0.0f64]]);
        let bank = arr2(&[[0.0f64], [200.0]]);
        let w = arr1(&[1.0f64, 1.0]);
        let out = uniqueness_loss(&queries, &bank, &[0], &w, true).unwrap();
        assert!(out.value.abs() < 1e-12, "got {}", out.value);
    }

    #[test]
    fn uniqueness_invariant_under_simultaneous_permutation() {
        let queries = arr2(&[[0.3f64, -0.7], [1.2, 0.1], [-0.5, 0.9]]);
        let bank = arr2(&[[0.0f64, 0.0], [1.0, 1.0], [2.0, -1.0]]);
        let w = arr1(&[0.4f64, 1.3, 0.7]);
        let labels = [0usize, 2, 1];
        let base = uniqueness_loss(&queries, &bank, &labels, &w, true).unwrap();
        // Permutation sigma = (2, 0, 1): class k moves to sigma[k].
        let sigma = [2usize, 0, 1];
        let mut bank_p = bank.clone();
        let mut w_p = w.clone();
        for k in 0..3 {
            bank_p.row_mut(sigma[k]).assign(&bank.row(k));
            w_p[sigma[k]] = w[k];
        }
        let labels_p: Vec<usize> = labels.iter().map(|&l| sigma[l]).collect();
        let perm = uniqueness_loss(&queries, &bank_p, &labels_p, &w_p, true).unwrap();
        assert!((base.value - perm.value).abs() < 1e-12);
    }

    #[test]
    fn uniqueness_gradients_match_finite_differences() {
        for &squared in &[true, false] {
            let queries = arr2(&[[0.3f64, -0.7], [1.2, 0.1]]);
            let bank = arr2(&[[0.1f64, 0.2], [0.9, 1.1], [2.0, -1.0]]);
            let w = arr1(&[0.4f64, 1.3, 0.7]);
            let labels = [0usize, 2];
            let out = uniqueness_loss(&queries, &bank, &labels, &w, squared).unwrap();
            for flat in 0..queries.len() {
                let g = central_diff_flat(&queries, flat, 1e-6, |qp| {
                    uniqueness_loss(qp, &bank, &labels, &w, squared).unwrap().value
                });
                let a = out.d_query.as_slice().unwrap()[flat];
                assert!(
                    (g - a).abs() / g.abs().max(a.abs()).max(1e-8) < 1e-6,
                    "squared={squared} d_query[{flat}]: analytic {a} fd {g}"
                );
            }
            for flat in 0..bank.len() {
                let g = central_diff_flat(&bank, flat, 1e-6, |bp| {
                    uniqueness_loss(&queries, bp, &labels, &w, squared).unwrap().value
                });
                let a = out.d_bank.as_slice().unwrap()[flat];
                assert!(
                    (g - a).abs() / g.abs().max(a.abs()).max(1e-8) < 1e-6,
                    "squared={squared} d_bank[{flat}]: analytic {a} fd {g}"
                );
            }
            // Weight gradient (used when the differentiable-KL switch is on).
            for flat in 0..w.len() {
                let g = central_diff_flat(&w, flat, 1e-6, |wp| {
                    uniqueness_loss(&queries, &bank, &labels, wp, squared).unwrap().value
                });
                let a = out.d_weights[flat];
                assert!(
                    (g - a).abs() / g.abs().max(a.abs()).max(1e-8) < 1e-6,
                    "squared={squared} d_w[{flat}]: analytic {a} fd {g}"
                );
            }
        }
    }

    #[test]
    fn consistency_uniform_when_supports_identical() {
        // All d same-example support embeddings identical -> r uniform ->
        // L_C = mean(w[label]) ln d.
        let (d, b, m) = (3usize, 2usize, 2usize);
        let mut support = Array3::<f64>::zeros((d, b, m));
        for k in 0..d {
            for i in 0..b {
                support[[k, i, 0]] = i as f64 * 0.3 + 5.0;
                support[[k, i, 1]] = -(i as f64);
            }
        }
        let queries = arr2(&[[0.1f64, 0.4], [0.0, -2.0]]);
        let w = arr1(&[0.5f64, 2.0, 1.0]);
        let labels = [1usize, 2];
        let out = consistency_loss(&queries, &support, &labels, &w, true).unwrap();
        let expect = (w[1] + w[2]) / 2.0 * (d as f64).ln();
        assert!((out.value - expect).abs() < 1e-12, "got {}", out.value);
    }

    #[test]
    fn consistency_zero_when_query_at_own_support() {
        let (d, b, m) = (2usize, 1usize, 1usize);
        let mut support = Array3::<f64>::zeros((d, b, m));
        support[[0, 0, 0]] = 0.0;
        support[[1, 0, 0]] = 300.0;
        let queries = arr2(&[[0.0f64]]);
        let w = arr1(&[1.0f64, 1.0]);
        let out = consistency_loss(&queries, &support, &[0], &w, true).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn consistency_rejects_misaligned_batch() {
        let support = Array3::<f64>::zeros((2, 3, 2));
        let queries = Array2::<f64>::zeros((4, 2));
        let w = arr1(&[1.0f64, 1.0]);
        assert!(consistency_loss(&queries, &support, &[0, 1, 0, 1], &w, true).is_err());
    }

    #[test]
    fn consistency_gradients_match_finite_differences() {
        let (d, b, m) = (3usize, 2usize, 2usize);
        let support = Array3::from_shape_fn((d, b, m), |(k, i, j)| {
            ((k * 5 + i * 3 + j * 7) % 11) as f64 / 11.0 - 0.3
        });
        let queries = arr2(&[[0.3f64, -0.7], [1.2, 0.1]]);
        let w = arr1(&[0.4f64, 1.3, 0.7]);
        let labels = [2usize, 0];
        let out = consistency_loss(&queries, &support, &labels, &w, true).unwrap();
        for flat in 0..queries.len() {
            let g = central_diff_flat(&queries, flat, 1e-6, |qp| {
                consistency_loss(qp, &support, &labels, &w, true).unwrap().value
            });
            let a = out.d_query.as_slice().unwrap()[flat];
            assert!(
                (g - a).abs() / g.abs().max(a.abs()).max(1e-8) < 1e-6,
                "d_query[{flat}]: analytic {a} fd {g}"
            );
        }
        for flat in 0..support.len() {
            let g = central_diff_flat(&support, flat, 1e-6, |sp| {
                consistency_loss(&queries, sp, &labels, &w, true).unwrap().value
            });
            let a = out.d_support.as_slice().unwrap()[flat];
            assert!(
                (g - a).abs() / g.abs().max(a.abs()).max(1e-8) < 1e-6,
                "d_support[{flat}]: analytic {a} fd {g}"
            );
        }
    }

    #[test]
    fn proto_loss_is_plain_sum() {
        assert_eq!(proto_loss(0.0, 0.0), 0.0);
        assert!((proto_loss(0.1566, 0.6931) - 0.8497).abs() < 1e-12);
    }

    #[test]
    fn isometry_loss_values() {
        let t = arr2(&[[0.5f64, 0.0, 1.0]]);
        let (v, _, _) = isometry_loss(&t, &t).unwrap();
        assert_eq!(v, 0.0);
        // Prediction = target + e_1: unit loss for a single pair.
        let mut p = t.clone();
        p[[0, 0]] += 1.0;
        let (v, dp, dt) = isometry_loss(&p, &t).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!((dp[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((dt[[0, 0]] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn isometry_gradients_match_finite_differences() {
        let preds = arr2(&[[0.5f64, -0.2], [1.5, 0.3], [0.0, 0.9]]);
        let targets = arr2(&[[0.1f64, 0.0], [1.0, 0.25], [0.4, 0.0]]);
        let (_, dp, dt) = isometry_loss(&preds, &targets).unwrap();
        for flat in 0..preds.len() {
            let g = central_diff_flat(&preds, flat, 1e-6, |pp| {
                isometry_loss(pp, &targets).unwrap().0
            });
            assert!((g - dp.as_slice().unwrap()[flat]).abs() < 1e-8);
        }
        for flat in 0..targets.len() {
            let g = central_diff_flat(&targets, flat, 1e-6, |tp| {
                isometry_loss(&preds, tp).unwrap().0
            });
            assert!((g - dt.as_slice().unwrap()[flat]).abs() < 1e-8);
        }
    }

    #[test]
    fn trunk_is_shared_heads_are_not() {
        let mut rng = stream_rng(5, StreamId::Init);
        let mut net = ProtoNet::<f64>::new(test_dims(), 4, &mut rng).unwrap();
        let pairs = Array4::from_shape_fn((2, 8, 8, 2), |(b, y, x, c)| {
            ((b * 3 + y * 5 + x * 7 + c) % 13) as f64 / 13.0
        });
        let (emb0, iso0, _) = net.forward(&pairs).unwrap();

        // Perturb a trunk bias (large enough to clear the ReLU): both heads
        // move. Save/restore exact bits so later comparisons see an
        // unmodified network.
        let orig = net.convs[0].b[0];
        net.convs[0].b[0] = orig + 5.0;
        let (emb1, iso1, _) = net.forward(&pairs).unwrap();
        assert_ne!(emb0, emb1, "trunk perturbation must reach the embedding");
        assert_ne!(iso0, iso1, "trunk perturbation must reach the magnitude head");
        net.convs[0].b[0] = orig;

        // Perturb the gamma head: embedding moves, magnitudes do not.
        let orig = net.gamma_head.b[0];
        net.gamma_head.b[0] = orig + 0.5;
        let (emb2, iso2, _) = net.forward(&pairs).unwrap();
        assert_ne!(emb0, emb2);
        assert_eq!(iso0, iso2);
        net.gamma_head.b[0] = orig;

        // Perturb the psi head: magnitudes move, embedding does not.
        let orig = net.psi_head.b[0];
        net.psi_head.b[0] = orig + 0.5;
        let (emb3, iso3, _) = net.forward(&pairs).unwrap();
        assert_eq!(emb0, emb3);
        assert_ne!(iso0, iso3);
    }

    #[test]
    fn identical_pairs_embed_identically() {
        let mut rng = stream_rng(6, StreamId::Init);
        let net = ProtoNet::<f32>::new(test_dims(), 4, &mut rng).unwrap();
        let one = Array4::from_shape_fn((1, 8, 8, 2), |(_, y, x, c)| {
            ((y * 3 + x + c * 5) % 7) as f32 / 7.0
        });
        let two = ndarray::concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
        let (emb, iso, _) = net.forward(&two).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
        assert_eq!(iso.row(0), iso.row(1));
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let mut rng = stream_rng(7, StreamId::Init);
        let net = ProtoNet::<f32>::new(test_dims(), 4, &mut rng).unwrap();
        // Single-channel input where the pair network expects 2 channels.
        let bad = Array4::<f32>::zeros((1, 8, 8, 1));
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn pair_pixel_gradients_match_finite_differences() {
        let mut rng = stream_rng(8, StreamId::Init);
        let mut net = ProtoNet::<f64>::new(test_dims(), 3, &mut rng).unwrap();
        let pairs = Array4::from_shape_fn((2, 8, 8, 2), |(b, y, x, c)| {
            ((b * 11 + y * 3 + x * 5 + c * 7) % 17) as f64 / 17.0 - 0.2
        });
        // Scalar loss touching both heads.
        let loss = |net: &ProtoNet<f64>, p: &Array4<f64>| -> f64 {
            let (emb, iso, _) = net.forward(p).unwrap();
            emb.iter().map(|v| v * v).sum::<f64>() + iso.iter().map(|v| 0.5 * v * v).sum::<f64>()
        };
        let (emb, iso, cache) = net.forward(&pairs).unwrap();
        let d_emb = emb.mapv(|v| 2.0 * v);
        let d_iso = iso.mapv(|v| v);
        net.zero_grads();
        let d_pairs = net.backward(&cache, &d_emb, &d_iso);
        for flat in (0..pairs.len()).step_by(13) {
            let g = central_diff_flat(&pairs, flat, 1e-6, |pp| loss(&net, pp));
            let a = d_pairs.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "d_pairs[{flat}]: analytic {a} fd {g} rel {rel}");
        }
    }

    #[test]
    fn clustered_embeddings_classify_perfectly() {
        // Well-separated synthetic clusters: accuracy 1 and tiny L_U.
        let (d, b, m) = (4usize, 8usize, 3usize);
        let mut rng = stream_rng(9, StreamId::Batch);
        let mut support = Array3::<f64>::zeros((d, b, m));
        let mut queries = Array2::<f64>::zeros((d * b, m));
        let mut labels = Vec::new();
        for k in 0..d {
            for i in 0..b {
                for j in 0..m {
                    let center = if j == k % m { 50.0 * (k + 1) as f64 } else { 0.0 };
                    let jitter: f64 = rng.random_range(-0.01..0.01);
                    support[[k, i, j]] = center + jitter;
                    queries[[k * b + i, j]] = center - jitter;
                }
                labels.push(k);
            }
        }
        let bank = compute_prototypes(&support).unwrap();
        let preds = classify(&queries, &bank, true);
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        assert_eq!(correct, d * b, "accuracy below 1");
        let w = Array1::<f64>::ones(d);
        let out = uniqueness_loss(&queries, &bank, &labels, &w, true).unwrap();
        assert!(out.value < 1e-6, "L_U = {}", out.value);
    }
}
