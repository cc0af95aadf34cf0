//! Composite objective, alternating updates, seeding, checkpoints and
//! loss telemetry.
//!
//! One training step runs two phases. The main phase samples a batch,
//! encodes it, builds an intervention episode off the sampled codes,
//! decodes originals/supports/queries in one generator call, scores the
//! prototype, consistency, isometry and adversarial terms, and applies one
//! adaptive-moment update to encoder, decoder and pair network. The
//! discriminator phase then takes one update on the same (detached) codes
//! against freshly intervened ones. All randomness flows from a single
//! root seed split into per-consumer streams, so telemetry never perturbs
//! training and checkpoints resume bit-exactly in 64-bit mode.

pub mod adam;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{disc_loss, encoder_adv_loss, Discriminator};
use crate::data::GroundTruthDataset;
use crate::episodes::{
    build_episode, isometry_target_backward, make_plan, scatter_code_grads, concat_pairs,
    Episode,
};
use crate::error::{Error, Result};
use crate::nn::scalar::{Dtype, Scalar};
use crate::nn::{sigmoid_scalar, ParamVisitor, Params};
use crate::protonet::{
    compute_prototypes, consistency_loss, isometry_loss, proto_loss, uniqueness_loss, ProtoNet,
};
use crate::rng::{capture, restore, stream_rng, StreamId};
use crate::vae::{
    bernoulli_recon, kl_backward, kl_per_dim, reparameterize, reparameterize_backward, ModelDims,
    Vae,
};
use adam::Adam;
use checkpoint::CheckpointData;

/// Scalar width training runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

/// Coefficients of the composite objective
/// `total = -L_V + alpha L_E + lambda L_P + kappa L_I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub kappa: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("kappa", self.kappa),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Flat training configuration; deserializes from a TOML file whose keys
/// are exactly these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset spec: `toy` (built-in sprite grid) or a path to an `.npz`
    /// archive.
    pub dataset: String,
    pub latent_dim: usize,
    /// Width of the pair-embedding head.
    pub metric_dim: usize,
    pub base_channels: usize,
    pub dense_width: usize,
    pub disc_width: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub seed: u64,
    pub precision: Precision,
    /// When true, the per-dimension KL weights of the prototype losses
    /// also receive gradient; default treats them as constants.
    pub kl_weight_gradient: bool,
    /// Squared Euclidean prototype distances (default) versus plain.
    pub squared_distance: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: "toy".to_string(),
            latent_dim: 10,
            metric_dim: 16,
            base_channels: 8,
            dense_width: 128,
            disc_width: 256,
            alpha: 10.0,
            lambda: 10.0,
            kappa: 10.0,
            batch_size: 32,
            steps: 500,
            lr_main: 1e-4,
            lr_disc: 1e-4,
            seed: 0,
            precision: Precision::F32,
            kl_weight_gradient: false,
            squared_distance: true,
            log_every: 10,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda: self.lambda,
            kappa: self.kappa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size {} too small: interventions need at least one donor",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("latent_dim must be at least 2"));
        }
        if self.metric_dim == 0 {
            return Err(Error::config("metric_dim must be positive"));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_disc", self.lr_disc)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Model dims for a dataset's image geometry.
    pub fn dims_for(&self, image_shape: (usize, usize, usize)) -> ModelDims {
        ModelDims {
            height: image_shape.0,
            width: image_shape.1,
            channels: image_shape.2,
            latent_dim: self.latent_dim,
            base_channels: self.base_channels,
            dense_width: self.dense_width,
        }
    }
}

/// Every term of one step, plus adversary telemetry and per-dimension KL.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub recon_nll: f64,
    pub kl: f64,
    pub elbo: f64,
    /// Encoder adversarial term L_E (already sign-carrying; can be
    /// negative).
    pub adv: f64,
    pub uniqueness: f64,
    pub consistency: f64,
    pub proto: f64,
    pub isometry: f64,
    /// Discriminator objective L_D from the discriminator phase.
    pub disc: f64,
    pub score_real: f64,
    pub score_intervened: f64,
    pub kl_per_dim: Vec<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.recon_nll,
            self.kl,
            self.elbo,
            self.adv,
            self.uniqueness,
            self.consistency,
            self.proto,
            self.isometry,
            self.disc,
            self.score_real,
            self.score_intervened,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.kl_per_dim.iter().all(|v| v.is_finite())
    }

    /// One `key=value` telemetry line.
    pub fn to_log_line(&self) -> String {
        let mut line = format!(
            "step={} total={} recon_nll={} kl={} elbo={} adv={} uniqueness={} consistency={} proto={} isometry={} disc={} score_real={} score_intervened={}",
            self.step,
            self.total,
            self.recon_nll,
            self.kl,
            self.elbo,
            self.adv,
            self.uniqueness,
            self.consistency,
            self.proto,
            self.isometry,
            self.disc,
            self.score_real,
            self.score_intervened,
        );
        for (k, v) in self.kl_per_dim.iter().enumerate() {
            line.push_str(&format!(" kl_dim_{k}={v}"));
        }
        line
    }
}

/// Outcome of the main phase only.
#[derive(Debug, Clone)]
struct MainPhase {
    recon_nll: f64,
    kl: f64,
    adv: f64,
    uniqueness: f64,
    consistency: f64,
    isometry: f64,
    kl_per_dim: Vec<f64>,
}

/// Outcome of the discriminator phase.
#[derive(Debug, Clone)]
pub struct DiscPhase {
    pub disc: f64,
    pub score_real: f64,
    pub score_intervened: f64,
}

/// All live training state: parameters, optimizer slots, step counter and
/// the positions of the four consumer streams.
pub struct TrainState<S: Scalar> {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub vae: Vae<S>,
    pub proto: ProtoNet<S>,
    pub disc: Discriminator<S>,
    pub adam_main: Adam<S>,
    pub adam_disc: Adam<S>,
    pub step: u64,
    rng_batch: ChaCha8Rng,
    rng_eps: ChaCha8Rng,
    rng_plan: ChaCha8Rng,
    rng_disc: ChaCha8Rng,
}

/// Encoder + decoder + pair network as one parameter set for the main
/// optimizer. Tensors of terms whose weight is zero keep exactly zero
/// gradients and therefore never move.
struct MainParams<'a, S: Scalar> {
    vae: &'a mut Vae<S>,
    proto: &'a mut ProtoNet<S>,
}

impl<S: Scalar> Params<S> for MainParams<'_, S> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, S>) {
        self.vae.visit_params(f);
        self.proto.visit_params(f);
    }
}

/// Checkpoint JSON header: the resolved config plus the model geometry,
/// so loading never needs the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedMeta {
    config: TrainConfig,
    dims: ModelDims,
}

/// Fixed stream order inside checkpoints.
const STREAM_ORDER: [StreamId; 4] = [
    StreamId::Batch,
    StreamId::Eps,
    StreamId::Plan,
    StreamId::Disc,
];

impl<S: Scalar> TrainState<S> {
    pub fn new(config: TrainConfig, dataset: &GroundTruthDataset) -> Result<Self> {
        config.validate()?;
        let dims = config.dims_for(dataset.image_shape());
        Self::from_parts(config, dims)
    }

    /// Build fresh state for known geometry (used by `new` and by
    /// checkpoint loading, which overwrites every parameter afterwards).
    pub fn from_parts(config: TrainConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let seed = config.seed;
        let mut init = stream_rng(seed, StreamId::Init);
        let vae = Vae::new(dims, &mut init)?;
        let proto = ProtoNet::new(dims, config.metric_dim, &mut init)?;
        let disc = Discriminator::new(config.latent_dim, config.disc_width, &mut init)?;
        let adam_main = Adam::new(config.lr_main, 0.9, 0.999);
        let adam_disc = Adam::new(config.lr_disc, 0.5, 0.9);
        Ok(TrainState {
            config,
            dims,
            vae,
            proto,
            disc,
            adam_main,
            adam_disc,
            step: 0,
            rng_batch: stream_rng(seed, StreamId::Batch),
            rng_eps: stream_rng(seed, StreamId::Eps),
            rng_plan: stream_rng(seed, StreamId::Plan),
            rng_disc: stream_rng(seed, StreamId::Disc),
        })
    }

    /// Main phase: gradients for encoder, decoder and pair network from
    /// the composite objective, then one optimizer step. Returns the term
    /// values and the (detached) codes for the discriminator phase.
    fn main_update(&mut self, x: &Array4<S>) -> Result<(MainPhase, Array2<S>)> {
        let (main, z, _dx) = self.main_grads(x)?;
        self.adam_main.step(&mut MainParams {
            vae: &mut self.vae,
            proto: &mut self.proto,
        });
        Ok((main, z))
    }

    /// Composite-objective backward pass without an optimizer update: fills
    /// the gradient buffers of encoder, decoder and pair network, rewinds
    /// the noise and intervention streams so that a following [`total_loss`]
    /// re-evaluates the exact same draws, and returns the loss value, the
    /// sampled codes, and dL/dx (including the reconstruction-target path).
    /// The finite-difference suites drive this entry point.
    pub fn loss_backward(&mut self, x: &Array4<S>) -> Result<(f64, Array2<S>, Array4<S>)> {
        let seed = self.config.seed;
        let eps_at = capture(seed, &self.rng_eps);
        let plan_at = capture(seed, &self.rng_plan);
        let out = self.main_grads(x);
        self.rng_eps = restore(&eps_at);
        self.rng_plan = restore(&plan_at);
        let (main, z, dx) = out?;
        let report = assemble_report(
            self.step,
            &self.config,
            main,
            DiscPhase {
                disc: 0.0,
                score_real: 0.5,
                score_intervened: 0.5,
            },
        );
        Ok((report.total, z, dx))
    }

    /// Backward pass of the main phase only: leaves dL/dθ in the gradient
    /// buffers of encoder, decoder and pair network without updating, and
    /// returns dL/dx alongside the term values and codes.
    fn main_grads(&mut self, x: &Array4<S>) -> Result<(MainPhase, Array2<S>, Array4<S>)> {
        let alpha = self.config.alpha;
        let lambda = self.config.lambda;
        let kappa = self.config.kappa;
        let squared = self.config.squared_distance;
        let kl_weight_grad = self.config.kl_weight_gradient;
        let episodes_on = lambda > 0.0 || kappa > 0.0;
        let (b, d) = (x.dim().0, self.dims.latent_dim);

        self.vae.zero_grads();
        self.proto.zero_grads();

        let (post, enc_cache) = self.vae.encoder.forward(x);
        let (z, eps) = reparameterize(&post, &mut self.rng_eps);
        let kl_bd = kl_per_dim(&post);
        let kl = kl_bd.sum().as_f64() / b as f64;
        let kl_dim: Vec<f64> = (0..d)
            .map(|k| kl_bd.column(k).sum().as_f64() / b as f64)
            .collect();
        // Mean-over-batch KL gradient; prototype weight gradients add to
        // this below when that switch is on.
        let mut dkl = Array2::<S>::from_elem((b, d), S::from_f64(1.0 / b as f64));

        let mut uniqueness = 0.0;
        let mut consistency = 0.0;
        let mut isometry = 0.0;
        let recon_nll;
        let target_logits: Array4<S>;
        let mut dz: Array2<S>;

        if episodes_on {
            let plan = make_plan(b, d, &mut self.rng_plan)?;
            let build = build_episode(&z, &plan, &self.vae.decoder)?;
            let layout = build.episode.layout;
            // Originals are decoded once; their logits feed the ELBO.
            let logits_orig = build.logits.slice(s![0..b, .., .., ..]).to_owned();
            let (nll, drecon) = bernoulli_recon(&logits_orig, x)?;
            recon_nll = nll;

            let pairs = episode_pairs(&build.episode)?;
            let (embs, isos, pair_cache) = self.proto.forward(&pairs)?;
            let m = self.proto.metric_dim();
            let (support_embs, query_embs) = split_embeddings(&embs, b, d, m);
            let bank = compute_prototypes(&support_embs)?;
            let weights = kl_weight_vector(&kl_bd);
            let uni = uniqueness_loss(&query_embs, &bank, &build.episode.labels, &weights, squared)?;
            let con = consistency_loss(
                &query_embs,
                &support_embs,
                &build.episode.labels,
                &weights,
                squared,
            )?;
            uniqueness = uni.value;
            consistency = con.value;
            let iso_q = crate::nn::standardize(isos.slice(s![d * b.., ..]).to_owned());
            let (l_i, d_iso_pred, d_iso_tgt) =
                isometry_loss(&iso_q, &build.episode.isometry_targets)?;
            isometry = l_i;

            // Head gradients, weight-scaled. Support pair k*b+i carries the
            // consistency grad for its own example plus its 1/B share of the
            // prototype-bank grad; query pairs carry both query-side grads.
            let lam = S::from_f64(lambda);
            let kap = S::from_f64(kappa);
            let inv_b = S::from_f64(1.0 / b as f64);
            let n_pairs = b * d + b;
            let mut d_emb = Array2::<S>::zeros((n_pairs, m));
            for k in 0..d {
                for i in 0..b {
                    for j in 0..m {
                        d_emb[[k * b + i, j]] =
                            lam * (con.d_support[[k, i, j]] + uni.d_bank[[k, j]] * inv_b);
                    }
                }
            }
            for i in 0..b {
                for j in 0..m {
                    d_emb[[d * b + i, j]] = lam * (uni.d_query[[i, j]] + con.d_query[[i, j]]);
                }
            }
            let mut d_iso = Array2::<S>::zeros((n_pairs, d));
            for i in 0..b {
                for j in 0..d {
                    d_iso[[d * b + i, j]] = kap * d_iso_pred[[i, j]];
                }
            }
            let d_pairs = self.proto.backward(&pair_cache, &d_emb, &d_iso);

            // Route pair-pixel gradients back onto the decoded images, then
            // through the shared sigmoid onto the generator logits.
            let c = self.dims.channels;
            let mut d_images = Array4::<S>::zeros(build.episode.images.raw_dim());
            for k in 0..d {
                for i in 0..b {
                    let dp = d_pairs.index_axis(Axis(0), k * b + i);
                    let mut orig = d_images.index_axis_mut(Axis(0), layout.original_row(i));
                    orig += &dp.slice(s![.., .., 0..c]);
                    let mut alt = d_images.index_axis_mut(Axis(0), layout.support_row(k, i));
                    alt += &dp.slice(s![.., .., c..]);
                }
            }
            for i in 0..b {
                let dp = d_pairs.index_axis(Axis(0), d * b + i);
                let mut orig = d_images.index_axis_mut(Axis(0), layout.original_row(i));
                orig += &dp.slice(s![.., .., 0..c]);
                let mut alt = d_images.index_axis_mut(Axis(0), layout.query_row(i));
                alt += &dp.slice(s![.., .., c..]);
            }
            let one = S::one();
            let mut d_logits = ndarray::Zip::from(&d_images)
                .and(&build.episode.images)
                .map_collect(|&g, &sig| g * sig * (one - sig));
            {
                let mut head = d_logits.slice_mut(s![0..b, .., .., ..]);
                head += &drecon;
            }
            let d_codes = self.vae.decoder.backward(&build.cache, &d_logits);
            dz = scatter_code_grads(&plan, &layout, &d_codes);
            let d_tgt_scaled = d_iso_tgt.mapv(|v| kap * v);
            dz = dz + isometry_target_backward(&z, &plan, &d_tgt_scaled);

            if kl_weight_grad {
                // weights[k] = mean_i kl_bd[i, k].
                for i in 0..b {
                    for k in 0..d {
                        dkl[[i, k]] += lam * (uni.d_weights[k] + con.d_weights[k]) * inv_b;
                    }
                }
            }
            target_logits = logits_orig;
        } else {
            let (logits, dec_cache) = self.vae.decoder.forward(&z);
            let (nll, drecon) = bernoulli_recon(&logits, x)?;
            recon_nll = nll;
            dz = self.vae.decoder.backward(&dec_cache, &drecon);
            target_logits = logits;
        }

        // Adversarial regularizer on the original codes; the discriminator
        // acts as a frozen function here (its own phase re-zeroes grads).
        let mut adv = 0.0;
        if alpha > 0.0 {
            let (logits_d, dcache) = self.disc.forward(&z)?;
            let (l_e, dlogits) = encoder_adv_loss(&logits_d)?;
            adv = l_e;
            let a = S::from_f64(alpha);
            let dz_adv = self.disc.backward(&dcache, &dlogits.mapv(|v| a * v));
            dz = dz + dz_adv;
        }

        let (dmu_r, dlv_r) = reparameterize_backward(&post, &eps, &dz);
        let (dmu_k, dlv_k) = kl_backward(&post, &dkl);
        let dx_enc = self
            .vae
            .encoder
            .backward(&enc_cache, &(dmu_r + dmu_k), &(dlv_r + dlv_k));
        // The batch is also the reconstruction target, so dL/dx carries a
        // direct term: d/dt of softplus(l) - l*t, scaled by the batch mean.
        let neg_inv_b = S::from_f64(-1.0 / b as f64);
        let dx = dx_enc + target_logits.mapv(|l| l * neg_inv_b);

        Ok((
            MainPhase {
                recon_nll,
                kl,
                adv,
                uniqueness,
                consistency,
                isometry,
                kl_per_dim: kl_dim,
            },
            z,
            dx,
        ))
    }

    /// Discriminator phase: one update on detached codes against freshly
    /// intervened ones (fresh dimension and donor per example).
    pub fn disc_update(&mut self, z: &Array2<S>) -> Result<DiscPhase> {
        let (b, d) = z.dim();
        self.disc.zero_grads();
        let plan = make_plan(b, d, &mut self.rng_disc)?;
        let mut z_int = z.clone();
        for i in 0..b {
            let k = plan.query_dims[i];
            z_int[[i, k]] = z[[plan.query_donor_permutation[i], k]];
        }
        let (logits_real, cache_real) = self.disc.forward(z)?;
        let (logits_int, cache_int) = self.disc.forward(&z_int)?;
        let (l_d, d_real, d_int) = disc_loss(&logits_real, &logits_int)?;
        self.disc.backward(&cache_real, &d_real);
        self.disc.backward(&cache_int, &d_int);
        self.adam_disc.step(&mut self.disc);
        let mean = |l: &Array1<S>| {
            l.iter().map(|&v| sigmoid_scalar(v).as_f64()).sum::<f64>() / l.len() as f64
        };
        Ok(DiscPhase {
            disc: l_d,
            score_real: mean(&logits_real),
            score_intervened: mean(&logits_int),
        })
    }

    /// Snapshot of every trainable tensor, for delta assertions and
    /// checkpoint export.
    pub fn param_snapshot(&mut self) -> BTreeMap<String, ndarray::ArrayD<S>> {
        let mut out = BTreeMap::new();
        let mut grab = |name: &str, p: ndarray::ArrayViewMutD<'_, S>, _g: ndarray::ArrayViewMutD<'_, S>| {
            out.insert(name.to_string(), p.to_owned());
        };
        self.vae.visit_params(&mut grab);
        self.proto.visit_params(&mut grab);
        self.disc.visit_params(&mut grab);
        out
    }

    pub fn to_checkpoint(&mut self) -> CheckpointData<S> {
        let mut arrays = self.param_snapshot();
        for (name, mom) in self.adam_main.slots() {
            arrays.insert(format!("opt_main.{name}.m"), mom.m.clone());
            arrays.insert(format!("opt_main.{name}.v"), mom.v.clone());
        }
        for (name, mom) in self.adam_disc.slots() {
            arrays.insert(format!("opt_disc.{name}.m"), mom.m.clone());
            arrays.insert(format!("opt_disc.{name}.v"), mom.v.clone());
        }
        let meta = PersistedMeta {
            config: self.config.clone(),
            dims: self.dims,
        };
        let seed = self.config.seed;
        CheckpointData {
            step: self.step,
            main_t: self.adam_main.t,
            disc_t: self.adam_disc.t,
            config_json: serde_json::to_string(&meta).expect("meta serializes"),
            streams: vec![
                capture(seed, &self.rng_batch),
                capture(seed, &self.rng_eps),
                capture(seed, &self.rng_plan),
                capture(seed, &self.rng_disc),
            ],
            arrays,
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = checkpoint::load::<S>(path)?;
        Self::from_checkpoint(data)
    }

    pub fn from_checkpoint(data: CheckpointData<S>) -> Result<Self> {
        let meta: PersistedMeta = serde_json::from_str(&data.config_json)
            .map_err(|e| Error::checkpoint(format!("bad config header: {e}")))?;
        let mut state = Self::from_parts(meta.config, meta.dims)?;
        if data.streams.len() != STREAM_ORDER.len() {
            return Err(Error::checkpoint(format!(
                "expected {} stream positions, found {}",
                STREAM_ORDER.len(),
                data.streams.len()
            )));
        }
        let mut remaining = data.arrays;
        let mut missing: Vec<String> = Vec::new();
        {
            let mut fill = |name: &str,
                            mut p: ndarray::ArrayViewMutD<'_, S>,
                            _g: ndarray::ArrayViewMutD<'_, S>| {
                match remaining.remove(name) {
                    Some(arr) if arr.raw_dim() == p.raw_dim() => p.assign(&arr),
                    Some(arr) => missing.push(format!(
                        "{name}: shape {:?} != expected {:?}",
                        arr.shape(),
                        p.shape()
                    )),
                    None => missing.push(format!("{name}: absent")),
                }
            };
            state.vae.visit_params(&mut fill);
            state.proto.visit_params(&mut fill);
            state.disc.visit_params(&mut fill);
        }
        if !missing.is_empty() {
            return Err(Error::checkpoint(format!(
                "parameter restore failed: {}",
                missing.join("; ")
            )));
        }
        // Whatever is left must be optimizer moments.
        let mut opt_entries: BTreeMap<String, (Option<ndarray::ArrayD<S>>, Option<ndarray::ArrayD<S>>)> =
            BTreeMap::new();
        for (key, arr) in remaining {
            let (slot_key, is_m) = if let Some(stripped) = key.strip_suffix(".m") {
                (stripped.to_string(), true)
            } else if let Some(stripped) = key.strip_suffix(".v") {
                (stripped.to_string(), false)
            } else {
                return Err(Error::checkpoint(format!("unknown array {key}")));
            };
            let entry = opt_entries.entry(slot_key).or_insert((None, None));
            if is_m {
                entry.0 = Some(arr);
            } else {
                entry.1 = Some(arr);
            }
        }
        for (key, (m, v)) in opt_entries {
            let (m, v) = match (m, v) {
                (Some(m), Some(v)) => (m, v),
                _ => {
                    return Err(Error::checkpoint(format!(
                        "optimizer slot {key} missing a moment array"
                    )))
                }
            };
            if let Some(name) = key.strip_prefix("opt_main.") {
                state.adam_main.insert_slot(name.to_string(), m, v)?;
            } else if let Some(name) = key.strip_prefix("opt_disc.") {
                state.adam_disc.insert_slot(name.to_string(), m, v)?;
            } else {
                return Err(Error::checkpoint(format!("unknown array {key}.m/.v")));
            }
        }
        state.adam_main.t = data.main_t;
        state.adam_disc.t = data.disc_t;
        state.step = data.step;
        state.rng_batch = restore(&data.streams[0]);
        state.rng_eps = restore(&data.streams[1]);
        state.rng_plan = restore(&data.streams[2]);
        state.rng_disc = restore(&data.streams[3]);
        Ok(state)
    }
}

/// One full training step: sample, main phase, discriminator phase.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    dataset: &GroundTruthDataset,
) -> Result<LossReport> {
    let (_, batch) =
        dataset.sample_batch::<S, _>(state.config.batch_size, &mut state.rng_batch)?;
    let (main, z) = state.main_update(batch.pixels())?;
    let disc = if state.config.alpha > 0.0 {
        state.disc_update(&z)?
    } else {
        // No adversary: chance-level telemetry, zero losses.
        DiscPhase {
            disc: 0.0,
            score_real: 0.5,
            score_intervened: 0.5,
        }
    };
    state.step += 1;
    Ok(assemble_report(state.step, &state.config, main, disc))
}

fn assemble_report(
    step: u64,
    config: &TrainConfig,
    main: MainPhase,
    disc: DiscPhase,
) -> LossReport {
    let proto = proto_loss(main.uniqueness, main.consistency);
    let total = main.recon_nll
        + main.kl
        + config.alpha * main.adv
        + config.lambda * proto
        + config.kappa * main.isometry;
    LossReport {
        step,
        total,
        recon_nll: main.recon_nll,
        kl: main.kl,
        elbo: -main.recon_nll - main.kl,
        adv: main.adv,
        uniqueness: main.uniqueness,
        consistency: main.consistency,
        proto,
        isometry: main.isometry,
        disc: disc.disc,
        score_real: disc.score_real,
        score_intervened: disc.score_intervened,
        kl_per_dim: main.kl_per_dim,
    }
}

/// Forward-only evaluation of the composite objective on one batch.
/// Clones the consumer streams, so it never perturbs training.
pub fn total_loss<S: Scalar>(
    state: &TrainState<S>,
    x: &Array4<S>,
) -> Result<(f64, LossReport)> {
    let config = &state.config;
    let (b, d) = (x.dim().0, state.dims.latent_dim);
    let (post, _) = state.vae.encoder.forward(x);
    let mut rng_eps = state.rng_eps.clone();
    let (z, _eps) = reparameterize(&post, &mut rng_eps);
    let kl_bd = kl_per_dim(&post);
    let kl = kl_bd.sum().as_f64() / b as f64;
    let kl_dim: Vec<f64> = (0..d)
        .map(|k| kl_bd.column(k).sum().as_f64() / b as f64)
        .collect();

    let episodes_on = config.lambda > 0.0 || config.kappa > 0.0;
    let mut uniqueness = 0.0;
    let mut consistency = 0.0;
    let mut isometry = 0.0;
    let recon_nll;
    if episodes_on {
        let mut rng_plan = state.rng_plan.clone();
        let plan = make_plan(b, d, &mut rng_plan)?;
        let build = build_episode(&z, &plan, &state.vae.decoder)?;
        let logits_orig = build.logits.slice(s![0..b, .., .., ..]).to_owned();
        recon_nll = bernoulli_recon(&logits_orig, x)?.0;
        let pairs = episode_pairs(&build.episode)?;
        let (embs, isos, _) = state.proto.forward(&pairs)?;
        let m = state.proto.metric_dim();
        let (support_embs, query_embs) = split_embeddings(&embs, b, d, m);
        let bank = compute_prototypes(&support_embs)?;
        let weights = kl_weight_vector(&kl_bd);
        uniqueness = uniqueness_loss(
            &query_embs,
            &bank,
            &build.episode.labels,
            &weights,
            config.squared_distance,
        )?
        .value;
        consistency = consistency_loss(
            &query_embs,
            &support_embs,
            &build.episode.labels,
            &weights,
            config.squared_distance,
        )?
        .value;
        let iso_q = crate::nn::standardize(isos.slice(s![d * b.., ..]).to_owned());
        isometry = isometry_loss(&iso_q, &build.episode.isometry_targets)?.0;
    } else {
        let (logits, _) = state.vae.decoder.forward(&z);
        recon_nll = bernoulli_recon(&logits, x)?.0;
    }
    let adv = if config.alpha > 0.0 {
        let (logits_d, _) = state.disc.forward(&z)?;
        encoder_adv_loss(&logits_d)?.0
    } else {
        0.0
    };
    let main = MainPhase {
        recon_nll,
        kl,
        adv,
        uniqueness,
        consistency,
        isometry,
        kl_per_dim: kl_dim,
    };
    let report = assemble_report(
        state.step,
        config,
        main,
        DiscPhase {
            disc: 0.0,
            score_real: 0.5,
            score_intervened: 0.5,
        },
    );
    Ok((report.total, report))
}

/// All pairs of one episode in protonet row order: support pair `(k, i)`
/// at row `k*B + i`, query pair `i` at row `d*B + i`; original image
/// first along the channel axis.
pub fn episode_pairs<S: Scalar>(episode: &Episode<S>) -> Result<Array4<S>> {
    let layout = episode.layout;
    let (b, d) = (layout.batch, layout.latent_dim);
    let (_, h, w, c) = episode.images.dim();
    let n = b * d + b;
    let mut orig_side = Array4::<S>::zeros((n, h, w, c));
    let mut alt_side = Array4::<S>::zeros((n, h, w, c));
    for k in 0..d {
        for i in 0..b {
            let row = k * b + i;
            orig_side
                .index_axis_mut(Axis(0), row)
                .assign(&episode.images.index_axis(Axis(0), layout.original_row(i)));
            alt_side
                .index_axis_mut(Axis(0), row)
                .assign(&episode.images.index_axis(Axis(0), layout.support_row(k, i)));
        }
    }
    for i in 0..b {
        let row = d * b + i;
        orig_side
            .index_axis_mut(Axis(0), row)
            .assign(&episode.images.index_axis(Axis(0), layout.original_row(i)));
        alt_side
            .index_axis_mut(Axis(0), row)
            .assign(&episode.images.index_axis(Axis(0), layout.query_row(i)));
    }
    concat_pairs(&orig_side, &alt_side)
}

/// Split flat pair embeddings into `(d, B, m)` support embeddings and
/// `(B, m)` query embeddings.
fn split_embeddings<S: Scalar>(
    embs: &Array2<S>,
    b: usize,
    d: usize,
    m: usize,
) -> (Array3<S>, Array2<S>) {
    let mut support = Array3::<S>::zeros((d, b, m));
    for k in 0..d {
        for i in 0..b {
            support.slice_mut(s![k, i, ..]).assign(&embs.row(k * b + i));
        }
    }
    let query = crate::nn::standardize(embs.slice(s![d * b.., ..]).to_owned());
    (support, query)
}

/// Per-dimension mean KL over the batch; the (stop-gradient) weights of
/// the prototype losses.
fn kl_weight_vector<S: Scalar>(kl_bd: &Array2<S>) -> Array1<S> {
    let b = kl_bd.dim().0;
    let inv_b = S::from_f64(1.0 / b as f64);
    kl_bd.sum_axis(Axis(0)) * inv_b
}

/// Run `state` until `until_step`, appending telemetry and checkpointing
/// per config. On a non-finite loss the run aborts with the last-good
/// checkpoint left in place.
pub fn run<S: Scalar>(
    state: &mut TrainState<S>,
    dataset: &GroundTruthDataset,
    out_dir: &Path,
    until_step: u64,
) -> Result<LossReport> {
    fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let log_path = out_dir.join("metrics.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut last = None;
    while state.step < until_step {
        let report = train_step(state, dataset)?;
        if !report.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {}; last-good checkpoint retained at {}",
                report.step,
                ckpt_path.display()
            )));
        }
        let log_every = state.config.log_every.max(1);
        if report.step % log_every == 0 || report.step == until_step {
            writeln!(log, "{}", report.to_log_line())?;
        }
        if state.config.checkpoint_every > 0 && report.step % state.config.checkpoint_every == 0 {
            state.save(&ckpt_path)?;
        }
        last = Some(report);
    }
    state.save(&ckpt_path)?;
    log.flush()?;
    last.ok_or_else(|| Error::config("no steps to run"))
}

/// Train from scratch; returns the checkpoint path.
pub fn train(
    config: &TrainConfig,
    dataset: &GroundTruthDataset,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    match config.precision {
        Precision::F32 => {
            let mut state = TrainState::<f32>::new(config.clone(), dataset)?;
            run(&mut state, dataset, out_dir, config.steps)?;
        }
        Precision::F64 => {
            let mut state = TrainState::<f64>::new(config.clone(), dataset)?;
            run(&mut state, dataset, out_dir, config.steps)?;
        }
    }
    Ok(out_dir.join("checkpoint.ckpt"))
}
