//! Mutual information gap.
//!
//! Latent dimensions are discretized into equal-occupancy bins; discrete
//! mutual information between every (dimension, factor) pair comes from
//! plug-in joint counts. A factor's gap is the normalized margin between
//! its two most informative dimensions; the score averages gaps over
//! non-degenerate factors. Binning is rank-driven, so the score is exact
//! under any strictly monotone per-dimension transformation.

use ndarray::Array2;
use rand::Rng;

use crate::data::GroundTruthDataset;
use crate::error::{Error, Result};
use crate::metrics::{embed_indices, sample_indices, Representation};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MigConfig {
    pub samples: usize,
    pub bins: usize,
    /// Images per embedding call.
    pub chunk: usize,
}

impl Default for MigConfig {
    fn default() -> Self {
        MigConfig {
            samples: 10_000,
            bins: 20,
            chunk: 256,
        }
    }
}

impl MigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::config("need at least 2 bins"));
        }
        if self.samples < 10 * self.bins {
            return Err(Error::config(format!(
                "{} samples cannot fill {} bins; need at least {}",
                self.samples,
                self.bins,
                10 * self.bins
            )));
        }
        if self.chunk == 0 {
            return Err(Error::config("chunk must be positive"));
        }
        Ok(())
    }
}

/// Score plus everything needed to inspect it.
#[derive(Debug, Clone)]
pub struct MigOutcome {
    pub score: f64,
    /// Normalized gap per scored factor, indexed like `scored_factors`.
    pub gaps: Vec<f64>,
    /// Factor ids with cardinality ≥ 2, in dataset order.
    pub scored_factors: Vec<usize>,
    /// Mutual information in nats, `(dims × scored factors)`.
    pub mi: Array2<f64>,
}

/// Assign each value its equal-occupancy bin in `0..bins`.
///
/// Edges sit at the sorted sample's `k·n/bins` ranks; a value's bin is the
/// number of edges at or below it. Tied values share a bin, so a constant
/// dimension lands in exactly one bin and carries zero information.
pub fn equal_occupancy_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let edges: Vec<f64> = (1..bins).map(|k| sorted[k * n / bins]).collect();
    values
        .iter()
        .map(|&v| edges.iter().take_while(|&&e| e <= v).count())
        .collect()
}

/// Plug-in discrete mutual information in nats from paired labels.
///
/// Works on integer counts so that exact relationships stay exact: a
/// label that occupies a single bin yields count ratios of exactly 1 and
/// therefore an MI of exactly 0, with no accumulation residue.
pub fn discrete_mutual_information(
    a: &[usize],
    a_card: usize,
    b: &[usize],
    b_card: usize,
) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut joint = vec![0u64; a_card * b_card];
    let mut ca = vec![0u64; a_card];
    let mut cb = vec![0u64; b_card];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * b_card + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for x in 0..a_card {
        for y in 0..b_card {
            let cxy = joint[x * b_card + y];
            if cxy > 0 {
                let ratio = (cxy as f64 * nf) / (ca[x] as f64 * cb[y] as f64);
                mi += (cxy as f64 / nf) * ratio.ln();
            }
        }
    }
    mi.max(0.0)
}

/// Empirical entropy in nats of integer labels.
pub fn discrete_entropy(labels: &[usize], card: usize) -> f64 {
    let mut p = vec![0.0f64; card];
    let w = 1.0 / labels.len() as f64;
    for &v in labels {
        p[v] += w;
    }
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

pub fn mig<R: Rng>(
    dataset: &GroundTruthDataset,
    rep: &dyn Representation,
    config: &MigConfig,
    rng: &mut R,
) -> Result<MigOutcome> {
    config.validate()?;
    let n = config.samples;
    let indices = sample_indices(dataset, n, rng);
    let codes = embed_indices(dataset, rep, &indices, config.chunk)?;
    let d = codes.dim().1;

    let radices = dataset.radices();
    let scored_factors: Vec<usize> = (0..radices.len()).filter(|&f| radices[f] >= 2).collect();
    if scored_factors.is_empty() {
        return Err(Error::data("no factor has cardinality ≥ 2"));
    }

    // Factor values per sample.
    let mut factor_vals: Vec<Vec<usize>> = vec![Vec::with_capacity(n); scored_factors.len()];
    for &idx in &indices {
        let coords = dataset.index_to_factors(idx)?;
        for (slot, &f) in scored_factors.iter().enumerate() {
            factor_vals[slot].push(coords[f]);
        }
    }

    // Discretized code per dimension.
    let binned: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let col: Vec<f64> = codes.column(j).to_vec();
            equal_occupancy_bins(&col, config.bins)
        })
        .collect();

    let mut mi = Array2::<f64>::zeros((d, scored_factors.len()));
    for j in 0..d {
        for (slot, &f) in scored_factors.iter().enumerate() {
            mi[[j, slot]] = discrete_mutual_information(
                &binned[j],
                config.bins,
                &factor_vals[slot],
                radices[f],
            );
        }
    }

    let mut gaps = Vec::with_capacity(scored_factors.len());
    for (slot, &f) in scored_factors.iter().enumerate() {
        let h = discrete_entropy(&factor_vals[slot], radices[f]);
        if h <= 0.0 {
            // The sample never exercised this factor; nothing to score.
            gaps.push(0.0);
            continue;
        }
        let (mut top, mut second) = (0.0f64, 0.0f64);
        for j in 0..d {
            let v = mi[[j, slot]];
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        gaps.push(((top - second) / h).clamp(0.0, 1.0));
    }
    let score = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok(MigOutcome {
        score,
        gaps,
        scored_factors,
        mi,
    })
}
