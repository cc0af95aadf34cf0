//! Interventional majority-vote metric.
//!
//! Per-dimension scale is estimated on random samples; collapsed
//! dimensions are pruned. Each vote fixes one factor, samples a batch
//! with that factor held, and votes for the normalized dimension with
//! the smallest variance. A majority classifier from dimension to factor
//! is fit on training votes and scored on held-out votes.

use rand::Rng;

use crate::data::GroundTruthDataset;
use crate::error::{Error, Result};
use crate::metrics::{embed_indices, sample_indices, Representation};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorVaeConfig {
    /// Samples for the global per-dimension scale estimate.
    pub variance_samples: usize,
    pub train_votes: usize,
    pub eval_votes: usize,
    pub batch_per_vote: usize,
    /// Dimensions with std below this fraction of the largest std are
    /// treated as collapsed and excluded from voting.
    pub prune_ratio: f64,
    /// Images per embedding call.
    pub chunk: usize,
}

impl Default for FactorVaeConfig {
    fn default() -> Self {
        FactorVaeConfig {
            variance_samples: 10_000,
            train_votes: 800,
            eval_votes: 400,
            batch_per_vote: 64,
            prune_ratio: 0.05,
            chunk: 256,
        }
    }
}

impl FactorVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variance_samples < 2 || self.batch_per_vote < 2 {
            return Err(Error::config(
                "variance estimation and votes need at least 2 samples each",
            ));
        }
        if self.train_votes == 0 || self.eval_votes == 0 {
            return Err(Error::config("need nonzero train and eval votes"));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::config(format!(
                "prune_ratio must be in [0, 1), got {}",
                self.prune_ratio
            )));
        }
        if self.chunk == 0 {
            return Err(Error::config("chunk must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FactorVaeOutcome {
    pub score: f64,
    /// Per-dimension global std from the scale-estimation pass.
    pub global_std: Vec<f64>,
    /// Dimensions that survived pruning.
    pub kept_dims: Vec<usize>,
    /// True when every dimension collapsed; the score is then 0 by
    /// definition.
    pub all_collapsed: bool,
}

pub fn factorvae_metric<R: Rng>(
    dataset: &GroundTruthDataset,
    rep: &dyn Representation,
    config: &FactorVaeConfig,
    rng: &mut R,
) -> Result<FactorVaeOutcome> {
    config.validate()?;
    let radices = dataset.radices();
    let live_factors: Vec<usize> = (0..radices.len()).filter(|&f| radices[f] >= 2).collect();
    if live_factors.len() < 2 {
        return Err(Error::data(format!(
            "interventional metric needs ≥ 2 non-degenerate factors, found {}",
            live_factors.len()
        )));
    }

    // Global per-dimension scale.
    let indices = sample_indices(dataset, config.variance_samples, rng);
    let codes = embed_indices(dataset, rep, &indices, config.chunk)?;
    let (n, d) = codes.dim();
    let mut global_std = vec![0.0f64; d];
    for j in 0..d {
        let col = codes.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        global_std[j] = var.sqrt();
    }
    let scale = global_std.iter().cloned().fold(0.0f64, f64::max);
    let kept_dims: Vec<usize> = (0..d)
        .filter(|&j| global_std[j] >= config.prune_ratio * scale && global_std[j] > 0.0)
        .collect();
    if kept_dims.is_empty() {
        return Ok(FactorVaeOutcome {
            score: 0.0,
            global_std,
            kept_dims,
            all_collapsed: true,
        });
    }

    // Votes: (winning kept-dim slot, fixed factor).
    let total_votes = config.train_votes + config.eval_votes;
    let mut votes = Vec::with_capacity(total_votes);
    for _ in 0..total_votes {
        let f = live_factors[rng.random_range(0..live_factors.len())];
        let value = rng.random_range(0..radices[f]);
        let batch_idx =
            dataset.sample_fixed_factor_indices(f, value, config.batch_per_vote, rng)?;
        let emb = embed_indices(dataset, rep, &batch_idx, config.chunk)?;
        let b = emb.dim().0 as f64;
        let mut best_slot = 0usize;
        let mut best_var = f64::INFINITY;
        for (slot, &j) in kept_dims.iter().enumerate() {
            let col = emb.column(j);
            let mean = col.sum() / b;
            let var =
                col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / b / global_std[j]
                    / global_std[j];
            if var < best_var {
                best_var = var;
                best_slot = slot;
            }
        }
        votes.push((best_slot, f));
    }

    // Majority classifier dim-slot → factor on the training votes.
    let n_factors = radices.len();
    let mut counts = vec![vec![0usize; n_factors]; kept_dims.len()];
    for &(slot, f) in votes.iter().take(config.train_votes) {
        counts[slot][f] += 1;
    }
    let majority: Vec<usize> = counts
        .iter()
        .map(|per_factor| {
            let mut best = 0usize;
            for (f, &c) in per_factor.iter().enumerate() {
                if c > per_factor[best] {
                    best = f;
                }
            }
            best
        })
        .collect();

    let hits = votes
        .iter()
        .skip(config.train_votes)
        .filter(|&&(slot, f)| majority[slot] == f)
        .count();
    let score = hits as f64 / config.eval_votes as f64;
    Ok(FactorVaeOutcome {
        score,
        global_std,
        kept_dims,
        all_collapsed: false,
    })
}
