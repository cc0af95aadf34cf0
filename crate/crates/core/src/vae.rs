//! Convolutional VAE: inference network (encoder) producing a diagonal
//! Gaussian posterior, generator network (decoder) producing Bernoulli
//! logits, the reparameterization trick and the evidence lower bound.
//!
//! Backward passes are hand-derived; every `forward` returns the cache its
//! `backward` needs. All losses are means over the batch so gradients are
//! independent of batch size.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::{
    relu, relu_grad, sigmoid_scalar, softplus_scalar, Conv2d, ConvTranspose2d, Dense,
    ParamVisitor, Params,
};

/// Log-variance outputs are clamped to this band before use.
pub const LOGVAR_CLAMP: f64 = 10.0;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const MAX_BLOCKS: usize = 4;

/// Shape hyper-parameters shared by every network in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Width of the first conv block; later blocks double it.
    pub base_channels: usize,
    /// Width of the fully connected layer between conv stack and heads.
    pub dense_width: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let min_side = self.height.min(self.width);
        if min_side < 8 {
            return Err(Error::config(format!(
                "image side {min_side} below minimum 8 (conv stack needs at least two halvings)"
            )));
        }
        let nb = self.num_blocks();
        let div = 1 << nb;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by 2^{nb} (conv stack halves {nb} times)",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.base_channels == 0 || self.dense_width == 0 {
            return Err(Error::config("channel and width parameters must be positive"));
        }
        if self.latent_dim < 2 {
            return Err(Error::config(
                "latent_dim must be at least 2 (interventions swap values between dimensions)",
            ));
        }
        Ok(())
    }

    /// Number of stride-2 conv blocks: halve down to a 2–4 px grid, at most
    /// four blocks (8->2 uses two, 32->2 four, 64->4 four).
    pub fn num_blocks(&self) -> usize {
        let min_side = self.height.min(self.width);
        let mut nb = 0usize;
        let mut s = min_side;
        while s >= 4 && nb < MAX_BLOCKS {
            s /= 2;
            nb += 1;
        }
        nb
    }

    /// Conv widths, first half `base_channels`, second half doubled.
    pub fn channel_progression(&self) -> Vec<usize> {
        let nb = self.num_blocks();
        (0..nb)
            .map(|i| {
                if i < nb.div_ceil(2) {
                    self.base_channels
                } else {
                    self.base_channels * 2
                }
            })
            .collect()
    }

    /// Spatial size of the coarsest feature map.
    pub fn top_spatial(&self) -> (usize, usize) {
        let div = 1 << self.num_blocks();
        (self.height / div, self.width / div)
    }

    /// Flattened size of the coarsest feature map.
    pub fn top_flat(&self) -> usize {
        let (h, w) = self.top_spatial();
        h * w * *self.channel_progression().last().expect("at least one block")
    }
}

/// Diagonal Gaussian posterior parameters, each `(batch, latent_dim)`.
#[derive(Debug, Clone)]
pub struct PosteriorParams<S: Scalar> {
    pub mu: Array2<S>,
    pub logvar: Array2<S>,
}

/// Inference network: conv stack, one hidden dense layer, mean and
/// log-variance heads.
#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar> {
    pub convs: Vec<Conv2d<S>>,
    pub dense: Dense<S>,
    pub mu_head: Dense<S>,
    pub logvar_head: Dense<S>,
    dims: ModelDims,
}

/// Everything `Encoder::backward` needs from the forward pass.
#[derive(Debug)]
pub struct EncoderCache<S: Scalar> {
    input_dims: Vec<(usize, usize, usize, usize)>,
    cols: Vec<Array2<S>>,
    pres: Vec<Array4<S>>,
    flat: Array2<S>,
    dense_pre: Array2<S>,
    /// Input to both heads (post-activation dense output).
    pub dense_post: Array2<S>,
    logvar_raw: Array2<S>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut convs = Vec::new();
        let mut c_in = dims.channels;
        for c_out in dims.channel_progression() {
            convs.push(Conv2d::new(c_in, c_out, KERNEL, STRIDE, PAD, rng));
            c_in = c_out;
        }
        let dense = Dense::new(dims.top_flat(), dims.dense_width, rng);
        let mu_head = Dense::new(dims.dense_width, dims.latent_dim, rng);
        let logvar_head = Dense::new(dims.dense_width, dims.latent_dim, rng);
        Ok(Encoder {
            convs,
            dense,
            mu_head,
            logvar_head,
            dims,
        })
    }

    pub fn forward(&self, x: &Array4<S>) -> (PosteriorParams<S>, EncoderCache<S>) {
        let b = x.dim().0;
        let mut input_dims = Vec::new();
        let mut cols = Vec::new();
        let mut pres = Vec::new();
        let mut cur = x.clone();
        for conv in &self.convs {
            input_dims.push(cur.dim());
            let (pre, col) = conv.forward(&cur);
            cur = relu(&pre);
            cols.push(col);
            pres.push(pre);
        }
        let flat = cur
            .into_shape_with_order((b, self.dims.top_flat()))
            .expect("conv output contiguous");
        let dense_pre = self.dense.forward(&flat);
        let dense_post = relu(&dense_pre);
        let mu = self.mu_head.forward(&dense_post);
        let logvar_raw = self.logvar_head.forward(&dense_post);
        let clamp = S::from_f64(LOGVAR_CLAMP);
        let logvar = logvar_raw.mapv(|v| v.min(clamp).max(-clamp));
        (
            PosteriorParams { mu, logvar },
            EncoderCache {
                input_dims,
                cols,
                pres,
                flat,
                dense_pre,
                dense_post,
                logvar_raw,
            },
        )
    }

    /// Accumulates parameter gradients; returns dL/dx.
    pub fn backward(
        &mut self,
        cache: &EncoderCache<S>,
        dmu: &Array2<S>,
        dlogvar: &Array2<S>,
    ) -> Array4<S> {
        // Clamp passes gradient only strictly inside the band.
        let clamp = S::from_f64(LOGVAR_CLAMP);
        let mut dlogvar_raw = dlogvar.clone();
        ndarray::Zip::from(&mut dlogvar_raw)
            .and(&cache.logvar_raw)
            .for_each(|d, &raw| {
                if raw.abs() >= clamp {
                    *d = S::zero();
                }
            });
        let d_post = self.mu_head.backward(&cache.dense_post, dmu)
            + self.logvar_head.backward(&cache.dense_post, &dlogvar_raw);
        let d_pre = relu_grad(&cache.dense_pre, &d_post);
        let d_flat = self.dense.backward(&cache.flat, &d_pre);
        let top = *cache.input_dims.last().expect("at least one conv");
        let (oh, ow) = self.convs.last().expect("at least one conv").out_spatial(top.1, top.2);
        let c_top = self.convs.last().unwrap().c_out;
        let mut d_cur = d_flat
            .into_shape_with_order((top.0, oh, ow, c_top))
            .expect("flat gradient matches top grid");
        for i in (0..self.convs.len()).rev() {
            let d_pre = relu_grad(&cache.pres[i], &d_cur);
            d_cur = self.convs[i].backward(&cache.cols[i], cache.input_dims[i], &d_pre);
        }
        d_cur
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.conv{i}"), f);
        }
        self.dense.visit_params(&format!("{prefix}.dense"), f);
        self.mu_head.visit_params(&format!("{prefix}.mu"), f);
        self.logvar_head.visit_params(&format!("{prefix}.logvar"), f);
    }

    pub fn zero_grads(&mut self) {
        for c in &mut self.convs {
            c.zero_grads();
        }
        self.dense.zero_grads();
        self.mu_head.zero_grads();
        self.logvar_head.zero_grads();
    }
}

/// Generator network: two dense layers, then transposed convs up to the
/// image grid. The final layer emits Bernoulli logits (no activation).
#[derive(Debug, Clone)]
pub struct Decoder<S: Scalar> {
    pub dense0: Dense<S>,
    pub dense1: Dense<S>,
    pub deconvs: Vec<ConvTranspose2d<S>>,
    dims: ModelDims,
}

/// Everything `Decoder::backward` needs from the forward pass.
#[derive(Debug)]
pub struct DecoderCache<S: Scalar> {
    z: Array2<S>,
    pre0: Array2<S>,
    post0: Array2<S>,
    pre1: Array2<S>,
    input_dims: Vec<(usize, usize, usize, usize)>,
    x_flats: Vec<Array2<S>>,
    /// Pre-activations of all but the last deconv.
    pres: Vec<Array4<S>>,
}

impl<S: Scalar> Decoder<S> {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let dense0 = Dense::new(dims.latent_dim, dims.dense_width, rng);
        let dense1 = Dense::new(dims.dense_width, dims.top_flat(), rng);
        let chs = dims.channel_progression();
        let nb = chs.len();
        let mut deconvs = Vec::new();
        for i in 0..nb {
            let c_in = chs[nb - 1 - i];
            let c_out = if i + 1 < nb {
                chs[nb - 2 - i]
            } else {
                dims.channels
            };
            deconvs.push(ConvTranspose2d::new(c_in, c_out, KERNEL, STRIDE, PAD, rng));
        }
        Ok(Decoder {
            dense0,
            dense1,
            deconvs,
            dims,
        })
    }

    /// Returns Bernoulli logits `(B, H, W, C)`.
    pub fn forward(&self, z: &Array2<S>) -> (Array4<S>, DecoderCache<S>) {
        let b = z.dim().0;
        let pre0 = self.dense0.forward(z);
        let post0 = relu(&pre0);
        let pre1 = self.dense1.forward(&post0);
        let post1 = relu(&pre1);
        let (th, tw) = self.dims.top_spatial();
        let c_top = *self.dims.channel_progression().last().expect("blocks");
        let mut cur = post1
            .into_shape_with_order((b, th, tw, c_top))
            .expect("dense output matches top grid");
        let mut input_dims = Vec::new();
        let mut x_flats = Vec::new();
        let mut pres = Vec::new();
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            input_dims.push(cur.dim());
            let (pre, x_flat) = deconv.forward(&cur);
            x_flats.push(x_flat);
            if i < last {
                cur = relu(&pre);
                pres.push(pre);
            } else {
                cur = pre;
            }
        }
        (
            cur,
            DecoderCache {
                z: z.clone(),
                pre0,
                post0,
                pre1,
                input_dims,
                x_flats,
                pres,
            },
        )
    }

    /// Accumulates parameter gradients; returns dL/dz.
    pub fn backward(&mut self, cache: &DecoderCache<S>, dlogits: &Array4<S>) -> Array2<S> {
        let last = self.deconvs.len() - 1;
        let mut d_cur = self.deconvs[last].backward(
            &cache.x_flats[last],
            cache.input_dims[last],
            dlogits,
        );
        for i in (0..last).rev() {
            let d_pre = relu_grad(&cache.pres[i], &d_cur);
            d_cur = self.deconvs[i].backward(&cache.x_flats[i], cache.input_dims[i], &d_pre);
        }
        let b = d_cur.dim().0;
        let d_post1 = d_cur
            .into_shape_with_order((b, self.dims.top_flat()))
            .expect("top grid contiguous");
        let d_pre1 = relu_grad(&cache.pre1, &d_post1);
        let d_post0 = self.dense1.backward(&cache.post0, &d_pre1);
        let d_pre0 = relu_grad(&cache.pre0, &d_post0);
        self.dense0.backward(&cache.z, &d_pre0)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        self.dense0.visit_params(&format!("{prefix}.dense0"), f);
        self.dense1.visit_params(&format!("{prefix}.dense1"), f);
        for (i, deconv) in self.deconvs.iter_mut().enumerate() {
            deconv.visit_params(&format!("{prefix}.deconv{i}"), f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.dense0.zero_grads();
        self.dense1.zero_grads();
        for d in &mut self.deconvs {
            d.zero_grads();
        }
    }
}

/// Encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct Vae<S: Scalar> {
    pub encoder: Encoder<S>,
    pub decoder: Decoder<S>,
}

impl<S: Scalar> Vae<S> {
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        Ok(Vae {
            encoder: Encoder::new(dims, rng)?,
            decoder: Decoder::new(dims, rng)?,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        self.encoder.dims()
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        self.decoder.zero_grads();
    }
}

impl<S: Scalar> Params<S> for Vae<S> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, S>) {
        self.encoder.visit_params("enc", f);
        self.decoder.visit_params("dec", f);
    }
}

/// Sample from the posterior: `z = mu + eps * exp(logvar / 2)` with
/// `eps ~ N(0, I)` drawn from `rng` (callers pass the dedicated noise
/// stream). Noise is sampled in f64 so f32/f64 runs see the same draw.
pub fn reparameterize<S: Scalar, R: Rng>(
    p: &PosteriorParams<S>,
    rng: &mut R,
) -> (Array2<S>, Array2<S>) {
    let eps = Array2::from_shape_simple_fn(p.mu.dim(), || {
        S::from_f64(StandardNormal.sample(rng))
    });
    let z = &p.mu + &(&eps * &p.logvar.mapv(|v| (v / (S::one() + S::one())).exp()));
    (z, eps)
}

/// dL/dmu and dL/dlogvar contributions from dL/dz through the
/// reparameterization.
pub fn reparameterize_backward<S: Scalar>(
    p: &PosteriorParams<S>,
    eps: &Array2<S>,
    dz: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let half = S::from_f64(0.5);
    let sigma = p.logvar.mapv(|v| (v * half).exp());
    let dmu = dz.clone();
    let dlogvar = dz * eps * &sigma * half;
    (dmu, dlogvar)
}

/// Per-(example, dimension) KL divergence to the standard normal prior:
/// `0.5 (mu² + exp(logvar) − 1 − logvar)`. Non-negative, zero iff the
/// posterior is standard normal.
pub fn kl_per_dim<S: Scalar>(p: &PosteriorParams<S>) -> Array2<S> {
    let half = S::from_f64(0.5);
    let one = S::one();
    ndarray::Zip::from(&p.mu)
        .and(&p.logvar)
        .map_collect(|&m, &lv| half * (m * m + lv.exp() - one - lv))
}

/// dL/dmu and dL/dlogvar given upstream gradients on each KL entry.
pub fn kl_backward<S: Scalar>(
    p: &PosteriorParams<S>,
    dkl: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let half = S::from_f64(0.5);
    let dmu = dkl * &p.mu;
    let dlogvar = ndarray::Zip::from(dkl)
        .and(&p.logvar)
        .map_collect(|&d, &lv| d * half * (lv.exp() - S::one()));
    (dmu, dlogvar)
}

/// Mean-over-batch Bernoulli negative log-likelihood (summed over pixels)
/// straight from logits, and its gradient w.r.t. the logits.
///
/// Per element `softplus(l) − l·x`, which never overflows: logits of ±50
/// stay finite.
pub fn bernoulli_recon<S: Scalar>(logits: &Array4<S>, x: &Array4<S>) -> Result<(f64, Array4<S>)> {
    if logits.dim() != x.dim() {
        return Err(Error::shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            x.dim()
        )));
    }
    for &v in x.iter() {
        if !v.is_finite() || v < S::zero() || v > S::one() {
            return Err(Error::data(format!("target pixel {v} outside [0, 1]")));
        }
    }
    let b = logits.dim().0 as f64;
    let mut nll = 0.0f64;
    for (&l, &t) in logits.iter().zip(x.iter()) {
        nll += (softplus_scalar(l) - l * t).as_f64();
    }
    let inv_b = S::from_f64(1.0 / b);
    let dlogits = ndarray::Zip::from(logits)
        .and(x)
        .map_collect(|&l, &t| (sigmoid_scalar(l) - t) * inv_b);
    Ok((nll / b, dlogits))
}

/// Scalar ELBO terms, means over the batch.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// Mean reconstruction negative log-likelihood (summed over pixels).
    pub recon_nll: f64,
    /// Mean KL (summed over dimensions).
    pub kl: f64,
    /// `-(recon_nll) - kl`.
    pub elbo: f64,
}

/// Evidence lower bound of `x` under Bernoulli logits and the given
/// posterior.
pub fn elbo_loss<S: Scalar>(
    logits: &Array4<S>,
    x: &Array4<S>,
    posterior: &PosteriorParams<S>,
) -> Result<ElboTerms> {
    let (recon_nll, _) = bernoulli_recon(logits, x)?;
    let kl_bd = kl_per_dim(posterior);
    let b = kl_bd.dim().0;
    if b == 0 {
        return Err(Error::shape("empty batch"));
    }
    let kl = kl_bd.sum().as_f64() / b as f64;
    Ok(ElboTerms {
        recon_nll,
        kl,
        elbo: -recon_nll - kl,
    })
}
