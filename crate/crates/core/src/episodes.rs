//! Self-supervised intervention episodes.
//!
//! An intervention replaces one coordinate of a latent code with another
//! example's value for that coordinate. Each batch yields `d` support sets
//! (one per latent dimension, every example intervened on that dimension)
//! and one query set (each example intervened on a uniformly drawn
//! dimension with an independent donor), all decoded in a single batched
//! generator call so the originals are reconstructed exactly once.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::sigmoid;
use crate::vae::{Decoder, DecoderCache};

/// One decoded (original, intervened) pair with its label data.
#[derive(Debug, Clone)]
pub struct InterventionPair<S: Scalar> {
    pub x_hat: Array3<S>,
    pub x_hat_k: Array3<S>,
    /// Intervened dimension.
    pub k: usize,
    /// `|z - ẑ_k|`, nonzero in at most component `k`.
    pub delta: Vec<S>,
}

/// Who donates what: one donor permutation shared by all support sets,
/// plus independently drawn dimensions and donors for the queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionPlan {
    /// `donor_permutation[i]` = batch row donating its coordinate to row `i`.
    pub donor_permutation: Vec<usize>,
    /// Intervened dimension per query example, uniform over `[0, d)`.
    pub query_dims: Vec<usize>,
    pub query_donor_permutation: Vec<usize>,
}

/// Fixed-point-free permutation: walk a uniformly shuffled cycle and let
/// every element donate to its successor.
fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(rng);
    let mut donor = vec![0usize; n];
    for j in 0..n {
        donor[cycle[j]] = cycle[(j + 1) % n];
    }
    donor
}

/// Draw a plan for a batch. Needs `batch >= 2` (an example cannot donate
/// to itself) and `latent_dim >= 1`.
pub fn make_plan<R: Rng>(batch: usize, latent_dim: usize, rng: &mut R) -> Result<InterventionPlan> {
    if batch < 2 {
        return Err(Error::data(format!(
            "interventions need at least 2 examples, got {batch} (no donor exists)"
        )));
    }
    if latent_dim == 0 {
        return Err(Error::data("latent_dim must be positive"));
    }
    let donor_permutation = derangement(batch, rng);
    let query_dims = (0..batch).map(|_| rng.random_range(0..latent_dim)).collect();
    let query_donor_permutation = derangement(batch, rng);
    Ok(InterventionPlan {
        donor_permutation,
        query_dims,
        query_donor_permutation,
    })
}

/// Replace coordinate `k` of every row with its donor's value:
/// `ẑ[i] = z[i]` except `ẑ[i][k] = z[donor[i]][k]`.
pub fn intervene<S: Scalar>(z: &Array2<S>, k: usize, donor: &[usize]) -> Result<Array2<S>> {
    let (b, d) = z.dim();
    if b < 2 {
        return Err(Error::data(format!(
            "interventions need at least 2 examples, got {b}"
        )));
    }
    if k >= d {
        return Err(Error::data(format!(
            "intervened dimension {k} out of range for latent_dim {d}"
        )));
    }
    if donor.len() != b {
        return Err(Error::shape(format!(
            "donor permutation length {} != batch {b}",
            donor.len()
        )));
    }
    let mut z_hat = z.clone();
    for i in 0..b {
        z_hat[[i, k]] = z[[donor[i], k]];
    }
    Ok(z_hat)
}

/// Row bookkeeping for the single batched decode: originals first, then
/// the `d` support sets, then the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeLayout {
    pub batch: usize,
    pub latent_dim: usize,
}

impl EpisodeLayout {
    pub fn original_row(&self, i: usize) -> usize {
        i
    }
    pub fn support_row(&self, k: usize, i: usize) -> usize {
        self.batch * (1 + k) + i
    }
    pub fn query_row(&self, i: usize) -> usize {
        self.batch * (1 + self.latent_dim) + i
    }
    pub fn total_rows(&self) -> usize {
        self.batch * (self.latent_dim + 2)
    }
}

/// Decoded episode: `d` support sets, one query set, query labels and
/// query isometry targets.
#[derive(Debug)]
pub struct Episode<S: Scalar> {
    pub layout: EpisodeLayout,
    /// Sigmoid reconstructions for every layout row, `(B(d+2), H, W, C)`.
    pub images: Array4<S>,
    /// `labels[i]` = intervened dimension of query `i`.
    pub labels: Vec<usize>,
    /// `(B, d)`; row `i` is nonzero in at most column `labels[i]`.
    pub isometry_targets: Array2<S>,
    /// `(d, B)`: `|z[i][k] − donor value|` for support pair `(k, i)`.
    pub support_deltas: Array2<S>,
}

impl<S: Scalar> Episode<S> {
    pub fn original_image(&self, i: usize) -> ndarray::ArrayView3<'_, S> {
        self.images.index_axis(Axis(0), self.layout.original_row(i))
    }

    pub fn support_pair(&self, k: usize, i: usize) -> InterventionPair<S> {
        let mut delta = vec![S::zero(); self.layout.latent_dim];
        delta[k] = self.support_deltas[[k, i]];
        InterventionPair {
            x_hat: self.original_image(i).to_owned(),
            x_hat_k: self
                .images
                .index_axis(Axis(0), self.layout.support_row(k, i))
                .to_owned(),
            k,
            delta,
        }
    }

    pub fn query_pair(&self, i: usize) -> InterventionPair<S> {
        InterventionPair {
            x_hat: self.original_image(i).to_owned(),
            x_hat_k: self
                .images
                .index_axis(Axis(0), self.layout.query_row(i))
                .to_owned(),
            k: self.labels[i],
            delta: self.isometry_targets.row(i).to_vec(),
        }
    }
}

/// [`Episode`] plus the tensors the trainer's backward pass needs.
#[derive(Debug)]
pub struct EpisodeBuild<S: Scalar> {
    pub episode: Episode<S>,
    /// All decoded codes, `(B(d+2), d)`, rows per [`EpisodeLayout`].
    pub codes: Array2<S>,
    /// Generator logits for every row (first `B` rows feed the ELBO).
    pub logits: Array4<S>,
    /// Generator cache for the batched decode.
    pub cache: DecoderCache<S>,
}

/// Build the support/query codes, decode all of them in one generator
/// call, and assemble the episode. Deterministic given `(z, plan)`.
pub fn build_episode<S: Scalar>(
    z: &Array2<S>,
    plan: &InterventionPlan,
    decoder: &Decoder<S>,
) -> Result<EpisodeBuild<S>> {
    let (b, d) = z.dim();
    if d != decoder.dims().latent_dim {
        return Err(Error::shape(format!(
            "latent width {d} does not match generator width {}",
            decoder.dims().latent_dim
        )));
    }
    if plan.donor_permutation.len() != b
        || plan.query_dims.len() != b
        || plan.query_donor_permutation.len() != b
    {
        return Err(Error::shape(format!(
            "plan sized for batch {}, got batch {b}",
            plan.donor_permutation.len()
        )));
    }
    let layout = EpisodeLayout {
        batch: b,
        latent_dim: d,
    };

    let mut codes = Array2::<S>::zeros((layout.total_rows(), d));
    codes.slice_mut(s![0..b, ..]).assign(z);
    let mut support_deltas = Array2::<S>::zeros((d, b));
    for k in 0..d {
        let z_hat = intervene(z, k, &plan.donor_permutation)?;
        for i in 0..b {
            support_deltas[[k, i]] = (z[[i, k]] - z_hat[[i, k]]).abs();
        }
        codes
            .slice_mut(s![layout.support_row(k, 0)..layout.support_row(k, 0) + b, ..])
            .assign(&z_hat);
    }
    let mut labels = Vec::with_capacity(b);
    let mut isometry_targets = Array2::<S>::zeros((b, d));
    {
        let qstart = layout.query_row(0);
        let mut qcodes = z.clone();
        for i in 0..b {
            let k = plan.query_dims[i];
            let donor_val = z[[plan.query_donor_permutation[i], k]];
            isometry_targets[[i, k]] = (z[[i, k]] - donor_val).abs();
            qcodes[[i, k]] = donor_val;
            labels.push(k);
        }
        codes.slice_mut(s![qstart..qstart + b, ..]).assign(&qcodes);
    }

    let (logits, cache) = decoder.forward(&codes);
    let images = sigmoid(&logits);
    Ok(EpisodeBuild {
        episode: Episode {
            layout,
            images,
            labels,
            isometry_targets,
            support_deltas,
        },
        codes,
        logits,
        cache,
    })
}

/// Adjoint of the code-assembly in [`build_episode`]: scatter a gradient
/// on the stacked codes back onto the batch codes `z`. The intervened
/// coordinate of each row routes to its donor; everything else routes to
/// the example itself.
pub fn scatter_code_grads<S: Scalar>(
    plan: &InterventionPlan,
    layout: &EpisodeLayout,
    dcodes: &Array2<S>,
) -> Array2<S> {
    let (b, d) = (layout.batch, layout.latent_dim);
    debug_assert_eq!(dcodes.dim(), (layout.total_rows(), d));
    let mut dz = Array2::<S>::zeros((b, d));
    for i in 0..b {
        let row = layout.original_row(i);
        for j in 0..d {
            dz[[i, j]] += dcodes[[row, j]];
        }
    }
    for k in 0..d {
        for i in 0..b {
            let row = layout.support_row(k, i);
            for j in 0..d {
                if j == k {
                    dz[[plan.donor_permutation[i], j]] += dcodes[[row, j]];
                } else {
                    dz[[i, j]] += dcodes[[row, j]];
                }
            }
        }
    }
    for i in 0..b {
        let row = layout.query_row(i);
        let k = plan.query_dims[i];
        for j in 0..d {
            if j == k {
                dz[[plan.query_donor_permutation[i], j]] += dcodes[[row, j]];
            } else {
                dz[[i, j]] += dcodes[[row, j]];
            }
        }
    }
    dz
}

/// Adjoint of the query isometry targets `t[i][k] = |z[i][k] − z[donor][k]|`
/// (subgradient 0 at exact ties).
pub fn isometry_target_backward<S: Scalar>(
    z: &Array2<S>,
    plan: &InterventionPlan,
    dtargets: &Array2<S>,
) -> Array2<S> {
    let (b, d) = z.dim();
    debug_assert_eq!(dtargets.dim(), (b, d));
    let mut dz = Array2::<S>::zeros((b, d));
    for i in 0..b {
        let k = plan.query_dims[i];
        let donor = plan.query_donor_permutation[i];
        let diff = z[[i, k]] - z[[donor, k]];
        let sign = if diff > S::zero() {
            S::one()
        } else if diff < S::zero() {
            -S::one()
        } else {
            S::zero()
        };
        let g = dtargets[[i, k]] * sign;
        dz[[i, k]] += g;
        dz[[donor, k]] -= g;
    }
    dz
}

/// Channel-axis concatenation of pair images, original first:
/// `(N, H, W, C) × (N, H, W, C) -> (N, H, W, 2C)`.
pub fn concat_pairs<S: Scalar>(x_hat: &Array4<S>, x_hat_k: &Array4<S>) -> Result<Array4<S>> {
    if x_hat.dim() != x_hat_k.dim() {
        return Err(Error::shape(format!(
            "pair halves differ in shape: {:?} vs {:?}",
            x_hat.dim(),
            x_hat_k.dim()
        )));
    }
    ndarray::concatenate(Axis(3), &[x_hat.view(), x_hat_k.view()])
        .map_err(|e| Error::shape(e.to_string()))
}
