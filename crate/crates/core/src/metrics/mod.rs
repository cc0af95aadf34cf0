//! Disentanglement metric suite: interventional majority-vote score,
//! mutual information gap, and the predictor-matrix triple, all computed
//! against an abstract representation function so trained encoders and
//! closed-form test stubs share one code path.

pub mod boost;
pub mod dci;
pub mod factorvae;
pub mod mig;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::data::GroundTruthDataset;
use crate::error::{Error, Result};
use crate::nn::scalar::{Dtype, Scalar};
use crate::rng::{stream_rng, StreamId};
use crate::trainer::checkpoint;
use crate::trainer::TrainState;
use crate::vae::Encoder;

pub use dci::{dci, DciConfig, DciOutcome, DciPredictor};
pub use factorvae::{factorvae_metric, FactorVaeConfig, FactorVaeOutcome};
pub use mig::{mig, MigConfig, MigOutcome};

/// Deterministic map from images to code vectors. Implementations also
/// see the dataset indices so exact ground-truth stubs are expressible;
/// encoder-backed implementations ignore them.
pub trait Representation {
    /// Output width d.
    fn width(&self) -> usize;

    /// `(B, H, W, C)` images (with their dataset indices) to `(B, d)`.
    fn embed(&self, indices: &[usize], images: &Array2<f64>) -> Result<Array2<f64>>;

    /// Image geometry this representation expects, if any. Stubs that
    /// only read indices return `None`.
    fn image_shape(&self) -> Option<(usize, usize, usize)> {
        None
    }
}

/// Uniform dataset indices (full factor product, with replacement).
pub fn sample_indices<R: Rng>(
    dataset: &GroundTruthDataset,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let factors = dataset.sample_factors(n, rng);
    factors
        .rows()
        .into_iter()
        .map(|row| {
            dataset
                .factors_to_index(row.as_slice().expect("contiguous row"))
                .expect("sampled factors in range")
        })
        .collect()
}

/// Render `indices` in fixed-size chunks and push them through `rep`,
/// stacking the code rows. Chunking keeps peak memory flat and is part of
/// the deterministic evaluation order.
pub fn embed_indices(
    dataset: &GroundTruthDataset,
    rep: &dyn Representation,
    indices: &[usize],
    chunk: usize,
) -> Result<Array2<f64>> {
    let d = rep.width();
    let mut out = Array2::<f64>::zeros((indices.len(), d));
    let (h, w, c) = dataset.image_shape();
    for (start, part) in indices.chunks(chunk.max(1)).enumerate().map(|(i, p)| (i * chunk.max(1), p)) {
        let batch = dataset.images::<f64>(part)?;
        let flat = batch
            .into_pixels()
            .into_shape_with_order((part.len(), h * w * c))
            .map_err(|e| Error::shape(e.to_string()))?;
        let codes = rep.embed(part, &flat)?;
        if codes.dim() != (part.len(), d) {
            return Err(Error::shape(format!(
                "representation returned {:?}, expected ({}, {d})",
                codes.dim(),
                part.len()
            )));
        }
        for (k, row) in codes.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::data("representation produced non-finite codes"));
            }
            out.row_mut(start + k).assign(&row);
        }
    }
    Ok(out)
}

/// Posterior-mean encoder as a representation; the standard evaluation
/// subject. Pixel rows arrive flattened and are reshaped to the encoder's
/// native geometry and scalar width.
pub struct EncoderMean<S: Scalar> {
    encoder: Encoder<S>,
    shape: (usize, usize, usize),
    latent_dim: usize,
}

impl<S: Scalar> EncoderMean<S> {
    pub fn new(encoder: Encoder<S>) -> Self {
        let dims = encoder.dims();
        let shape = (dims.height, dims.width, dims.channels);
        let latent_dim = dims.latent_dim;
        EncoderMean {
            encoder,
            shape,
            latent_dim,
        }
    }
}

impl<S: Scalar> Representation for EncoderMean<S> {
    fn width(&self) -> usize {
        self.latent_dim
    }

    fn image_shape(&self) -> Option<(usize, usize, usize)> {
        Some(self.shape)
    }

    fn embed(&self, _indices: &[usize], images: &Array2<f64>) -> Result<Array2<f64>> {
        let (n, flat) = images.dim();
        let (h, w, c) = self.shape;
        if flat != h * w * c {
            return Err(Error::shape(format!(
                "row width {flat} does not match image geometry {h}×{w}×{c}"
            )));
        }
        let x = images
            .mapv(S::from_f64)
            .into_shape_with_order((n, h, w, c))
            .map_err(|e| Error::shape(e.to_string()))?;
        let (post, _) = self.encoder.forward(&x);
        Ok(post.mu.mapv(|v| v.as_f64()))
    }
}

/// Load the encoder of a checkpoint as an f64-facing representation,
/// dispatching on the stored scalar width.
pub fn representation_from_checkpoint(path: &Path) -> Result<Box<dyn Representation>> {
    match checkpoint::peek_dtype(path)? {
        Dtype::F32 => {
            let state = TrainState::<f32>::load(path)?;
            Ok(Box::new(EncoderMean::new(state.vae.encoder)))
        }
        Dtype::F64 => {
            let state = TrainState::<f64>::load(path)?;
            Ok(Box::new(EncoderMean::new(state.vae.encoder)))
        }
    }
}

/// Everything `evaluate` needs besides the checkpoint and dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub factorvae: FactorVaeConfig,
    pub mig: MigConfig,
    pub dci: DciConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            factorvae: FactorVaeConfig::default(),
            mig: MigConfig::default(),
            dci: DciConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.factorvae.validate()?;
        self.mig.validate()?;
        self.dci.validate()
    }
}

/// All metric scores for one (representation, seed), with the sampling
/// configuration echoed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub factorvae_score: f64,
    pub mig: f64,
    pub dci_disentanglement: f64,
    pub dci_completeness: f64,
    pub dci_informativeness: f64,
    pub seed: u64,
    pub factorvae_variance_samples: usize,
    pub factorvae_train_votes: usize,
    pub factorvae_eval_votes: usize,
    pub factorvae_batch_per_vote: usize,
    pub mig_samples: usize,
    pub mig_bins: usize,
    pub dci_train_samples: usize,
    pub dci_test_samples: usize,
}

impl MetricReport {
    pub fn scores(&self) -> [(&'static str, f64); 5] {
        [
            ("factorvae_score", self.factorvae_score),
            ("mig", self.mig),
            ("dci_disentanglement", self.dci_disentanglement),
            ("dci_completeness", self.dci_completeness),
            ("dci_informativeness", self.dci_informativeness),
        ]
    }

    pub fn all_in_unit_interval(&self) -> bool {
        self.scores().iter().all(|(_, v)| (0.0..=1.0).contains(v))
    }

    /// Flat `key: value` document, one line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.scores() {
            writeln!(s, "{k}: {v}").unwrap();
        }
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "factorvae_variance_samples: {}", self.factorvae_variance_samples).unwrap();
        writeln!(s, "factorvae_train_votes: {}", self.factorvae_train_votes).unwrap();
        writeln!(s, "factorvae_eval_votes: {}", self.factorvae_eval_votes).unwrap();
        writeln!(s, "factorvae_batch_per_vote: {}", self.factorvae_batch_per_vote).unwrap();
        writeln!(s, "mig_samples: {}", self.mig_samples).unwrap();
        writeln!(s, "mig_bins: {}", self.mig_bins).unwrap();
        writeln!(s, "dci_train_samples: {}", self.dci_train_samples).unwrap();
        writeln!(s, "dci_test_samples: {}", self.dci_test_samples).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut report = MetricReport {
            factorvae_score: f64::NAN,
            mig: f64::NAN,
            dci_disentanglement: f64::NAN,
            dci_completeness: f64::NAN,
            dci_informativeness: f64::NAN,
            seed: 0,
            factorvae_variance_samples: 0,
            factorvae_train_votes: 0,
            factorvae_eval_votes: 0,
            factorvae_batch_per_vote: 0,
            mig_samples: 0,
            mig_bins: 0,
            dci_train_samples: 0,
            dci_test_samples: 0,
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::data(format!("bad report line: {line}")))?;
            let value = value.trim();
            let parse_f = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| Error::data(format!("bad number in report: {line}")))
            };
            let parse_u = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::data(format!("bad count in report: {line}")))
            };
            match key.trim() {
                "factorvae_score" => report.factorvae_score = parse_f()?,
                "mig" => report.mig = parse_f()?,
                "dci_disentanglement" => report.dci_disentanglement = parse_f()?,
                "dci_completeness" => report.dci_completeness = parse_f()?,
                "dci_informativeness" => report.dci_informativeness = parse_f()?,
                "seed" => {
                    report.seed = value
                        .parse()
                        .map_err(|_| Error::data(format!("bad seed in report: {line}")))?
                }
                "factorvae_variance_samples" => report.factorvae_variance_samples = parse_u()?,
                "factorvae_train_votes" => report.factorvae_train_votes = parse_u()?,
                "factorvae_eval_votes" => report.factorvae_eval_votes = parse_u()?,
                "factorvae_batch_per_vote" => report.factorvae_batch_per_vote = parse_u()?,
                "mig_samples" => report.mig_samples = parse_u()?,
                "mig_bins" => report.mig_bins = parse_u()?,
                "dci_train_samples" => report.dci_train_samples = parse_u()?,
                "dci_test_samples" => report.dci_test_samples = parse_u()?,
                other => {
                    return Err(Error::data(format!("unknown report key: {other}")));
                }
            }
        }
        for (k, v) in report.scores() {
            if !v.is_finite() {
                return Err(Error::data(format!("report missing score {k}")));
            }
        }
        Ok(report)
    }
}

/// All three metrics for one representation; each metric gets its own
/// seeded stream, so they are independent and reorderable.
pub fn evaluate_rep(
    dataset: &GroundTruthDataset,
    rep: &dyn Representation,
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    let fv = factorvae_metric(
        dataset,
        rep,
        &config.factorvae,
        &mut stream_rng(config.seed, StreamId::FactorVae),
    )?;
    let mg = mig(
        dataset,
        rep,
        &config.mig,
        &mut stream_rng(config.seed, StreamId::Mig),
    )?;
    let dc = dci(
        dataset,
        rep,
        &config.dci,
        &mut stream_rng(config.seed, StreamId::Dci),
    )?;
    Ok(MetricReport {
        factorvae_score: fv.score,
        mig: mg.score,
        dci_disentanglement: dc.disentanglement,
        dci_completeness: dc.completeness,
        dci_informativeness: dc.informativeness,
        seed: config.seed,
        factorvae_variance_samples: config.factorvae.variance_samples,
        factorvae_train_votes: config.factorvae.train_votes,
        factorvae_eval_votes: config.factorvae.eval_votes,
        factorvae_batch_per_vote: config.factorvae.batch_per_vote,
        mig_samples: config.mig.samples,
        mig_bins: config.mig.bins,
        dci_train_samples: config.dci.train_samples,
        dci_test_samples: config.dci.test_samples,
    })
}

/// Evaluate a training checkpoint's posterior-mean encoder.
pub fn evaluate(
    checkpoint_path: &Path,
    dataset: &GroundTruthDataset,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let rep = representation_from_checkpoint(checkpoint_path)?;
    if let Some(shape) = rep.image_shape() {
        if shape != dataset.image_shape() {
            return Err(Error::data(format!(
                "checkpoint expects {:?} images, dataset provides {:?}",
                shape,
                dataset.image_shape()
            )));
        }
    }
    evaluate_rep(dataset, rep.as_ref(), config)
}

/// Closed-form representations for oracle tests and degradation probes.
pub mod stubs {
    use super::*;

    /// The ground-truth factor coordinates themselves (as f64).
    pub struct FactorRep<'a> {
        dataset: &'a GroundTruthDataset,
    }

    impl<'a> FactorRep<'a> {
        pub fn new(dataset: &'a GroundTruthDataset) -> Self {
            FactorRep { dataset }
        }
    }

    impl Representation for FactorRep<'_> {
        fn width(&self) -> usize {
            self.dataset.num_factors()
        }

        fn embed(&self, indices: &[usize], _images: &Array2<f64>) -> Result<Array2<f64>> {
            let f = self.width();
            let mut out = Array2::<f64>::zeros((indices.len(), f));
            for (i, &idx) in indices.iter().enumerate() {
                let coords = self.dataset.index_to_factors(idx)?;
                for j in 0..f {
                    out[[i, j]] = coords[j] as f64;
                }
            }
            Ok(out)
        }
    }

    /// Output column j is the inner representation's column `perm[j]`.
    pub struct PermutedRep<R> {
        inner: R,
        perm: Vec<usize>,
    }

    impl<R: Representation> PermutedRep<R> {
        pub fn new(inner: R, perm: Vec<usize>) -> Self {
            assert_eq!(perm.len(), inner.width(), "permutation width mismatch");
            PermutedRep { inner, perm }
        }
    }

    impl<R: Representation> Representation for PermutedRep<R> {
        fn width(&self) -> usize {
            self.perm.len()
        }

        fn embed(&self, indices: &[usize], images: &Array2<f64>) -> Result<Array2<f64>> {
            let base = self.inner.embed(indices, images)?;
            let mut out = Array2::<f64>::zeros(base.raw_dim());
            for (j, &src) in self.perm.iter().enumerate() {
                out.column_mut(j).assign(&base.column(src));
            }
            Ok(out)
        }
    }

    /// Per-dimension pointwise transform of an inner representation.
    pub struct MappedRep<R> {
        inner: R,
        map: fn(usize, f64) -> f64,
    }

    impl<R: Representation> MappedRep<R> {
        pub fn new(inner: R, map: fn(usize, f64) -> f64) -> Self {
            MappedRep { inner, map }
        }
    }

    impl<R: Representation> Representation for MappedRep<R> {
        fn width(&self) -> usize {
            self.inner.width()
        }

        fn embed(&self, indices: &[usize], images: &Array2<f64>) -> Result<Array2<f64>> {
            let mut out = self.inner.embed(indices, images)?;
            for (j, mut col) in out.columns_mut().into_iter().enumerate() {
                for v in col.iter_mut() {
                    *v = (self.map)(j, *v);
                }
            }
            Ok(out)
        }
    }

    /// Output column j is the inner column `pick[j]` (duplication allowed).
    pub struct PickDimsRep<R> {
        inner: R,
        pick: Vec<usize>,
    }

    impl<R: Representation> PickDimsRep<R> {
        pub fn new(inner: R, pick: Vec<usize>) -> Self {
            PickDimsRep { inner, pick }
        }
    }

    impl<R: Representation> Representation for PickDimsRep<R> {
        fn width(&self) -> usize {
            self.pick.len()
        }

        fn embed(&self, indices: &[usize], images: &Array2<f64>) -> Result<Array2<f64>> {
            let base = self.inner.embed(indices, images)?;
            let mut out = Array2::<f64>::zeros((base.dim().0, self.pick.len()));
            for (j, &src) in self.pick.iter().enumerate() {
                out.column_mut(j).assign(&base.column(src));
            }
            Ok(out)
        }
    }

    /// The same constant vector for every input.
    pub struct ConstantRep {
        width: usize,
        value: f64,
    }

    impl ConstantRep {
        pub fn new(width: usize, value: f64) -> Self {
            ConstantRep { width, value }
        }
    }

    impl Representation for ConstantRep {
        fn width(&self) -> usize {
            self.width
        }

        fn embed(&self, indices: &[usize], _images: &Array2<f64>) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((indices.len(), self.width), self.value))
        }
    }

    /// Factor-independent noise: every call draws fresh values from an
    /// internal stream, so the codes carry no information about the
    /// inputs at all. (A fixed per-index hash would not do: on a small
    /// dataset it is a learnable function of the factors.) Runs are still
    /// reproducible for a fixed construction seed and call order.
    pub struct NoiseRep {
        width: usize,
        rng: std::cell::RefCell<rand_chacha::ChaCha8Rng>,
    }

    impl NoiseRep {
        pub fn new(width: usize, seed: u64) -> Self {
            use rand_chacha::rand_core::SeedableRng;
            NoiseRep {
                width,
                rng: std::cell::RefCell::new(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
            }
        }
    }

    impl Representation for NoiseRep {
        fn width(&self) -> usize {
            self.width
        }

        fn embed(&self, indices: &[usize], _images: &Array2<f64>) -> Result<Array2<f64>> {
            let mut rng = self.rng.borrow_mut();
            let mut out = Array2::<f64>::zeros((indices.len(), self.width));
            for v in out.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            Ok(out)
        }
    }
}
