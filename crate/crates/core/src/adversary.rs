//! Latent discriminator and the encoder's adversarial regularizer.
//!
//! The discriminator is a small dense network over latent codes that
//! estimates the probability a code is a post-intervention sample; the
//! encoder is regularized to fool it, pulling the aggregate posterior
//! toward the intervened-code distribution. Both losses are computed from
//! logits in softplus form so they stay finite for extreme scores.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::{leaky_relu, leaky_relu_grad, sigmoid_scalar, softplus_scalar, Dense, ParamVisitor, Params};

/// Leaky-ReLU slope used throughout the discriminator.
const LEAK: f64 = 0.2;
/// Magnitude guard on logits entering the encoder's adversarial loss,
/// which is otherwise unbounded below.
pub const ADV_LOGIT_CLAMP: f64 = 20.0;

/// Dense network mapping a latent code to a single logit. The final layer
/// starts at zero so an untrained discriminator scores everything at
/// exactly chance.
#[derive(Debug, Clone)]
pub struct Discriminator<S: Scalar> {
    pub hidden: Vec<Dense<S>>,
    pub output: Dense<S>,
    latent_dim: usize,
}

/// Forward activations `Discriminator::backward` needs.
#[derive(Debug)]
pub struct DiscCache<S: Scalar> {
    input: Array2<S>,
    pres: Vec<Array2<S>>,
    posts: Vec<Array2<S>>,
}

/// Telemetry for one adversary update.
#[derive(Debug, Clone)]
pub struct AdversaryBatchReport {
    pub disc_loss: f64,
    pub enc_loss: f64,
    pub mean_score_real: f64,
    pub mean_score_intervened: f64,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new<R: Rng>(latent_dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        if latent_dim == 0 || width == 0 {
            return Err(Error::config("discriminator dims must be positive"));
        }
        let mut hidden = Vec::new();
        let mut in_dim = latent_dim;
        for _ in 0..4 {
            hidden.push(Dense::new(in_dim, width, rng));
            in_dim = width;
        }
        let mut output = Dense::new(in_dim, 1, rng);
        output.w.fill(S::zero());
        output.b.fill(S::zero());
        Ok(Discriminator {
            hidden,
            output,
            latent_dim,
        })
    }

    /// Logits for a batch of codes `(B, d)`.
    pub fn forward(&self, codes: &Array2<S>) -> Result<(Array1<S>, DiscCache<S>)> {
        let (_, d) = codes.dim();
        if d != self.latent_dim {
            return Err(Error::shape(format!(
                "codes have width {d}, discriminator expects {}",
                self.latent_dim
            )));
        }
        let mut pres = Vec::new();
        let mut posts = Vec::new();
        let mut cur = codes.clone();
        for layer in &self.hidden {
            let pre = layer.forward(&cur);
            cur = leaky_relu(&pre, LEAK);
            pres.push(pre);
            posts.push(cur.clone());
        }
        let logits = self.output.forward(&cur).column(0).to_owned();
        Ok((
            logits,
            DiscCache {
                input: codes.clone(),
                pres,
                posts,
            },
        ))
    }

    /// Accumulates parameter gradients; returns dL/d(codes).
    pub fn backward(&mut self, cache: &DiscCache<S>, dlogits: &Array1<S>) -> Array2<S> {
        let dy = dlogits.view().insert_axis(ndarray::Axis(1)).to_owned();
        let top = cache.posts.last().unwrap_or(&cache.input);
        let mut d_cur = self.output.backward(top, &dy);
        for i in (0..self.hidden.len()).rev() {
            let d_pre = leaky_relu_grad(&cache.pres[i], &d_cur, LEAK);
            let below = if i == 0 { &cache.input } else { &cache.posts[i - 1] };
            d_cur = self.hidden[i].backward(below, &d_pre);
        }
        d_cur
    }

    /// Probability each code is an intervened sample: sigmoid of the logit.
    pub fn score(&self, codes: &Array2<S>) -> Result<Array1<S>> {
        let (logits, _) = self.forward(codes)?;
        Ok(logits.mapv(sigmoid_scalar))
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.hidden {
            l.zero_grads();
        }
        self.output.zero_grads();
    }
}

impl<S: Scalar> Params<S> for Discriminator<S> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, S>) {
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            layer.visit_params(&format!("disc.h{i}"), f);
        }
        self.output.visit_params("disc.out", f);
    }
}

/// Discriminator objective: binary cross-entropy with intervened codes as
/// the positive class,
/// `L_D = mean softplus(-logit_intervened) + mean softplus(logit_real)`.
/// Returns the scalar and dL/d(logits) for both halves.
pub fn disc_loss<S: Scalar>(
    logits_real: &Array1<S>,
    logits_intervened: &Array1<S>,
) -> Result<(f64, Array1<S>, Array1<S>)> {
    let (nr, ni) = (logits_real.len(), logits_intervened.len());
    if nr == 0 || ni == 0 {
        return Err(Error::shape("empty adversary batch"));
    }
    let real_term = logits_real
        .iter()
        .map(|&l| softplus_scalar(l).as_f64())
        .sum::<f64>()
        / nr as f64;
    let int_term = logits_intervened
        .iter()
        .map(|&l| softplus_scalar(-l).as_f64())
        .sum::<f64>()
        / ni as f64;
    let inv_r = S::from_f64(1.0 / nr as f64);
    let inv_i = S::from_f64(1.0 / ni as f64);
    // d softplus(l)/dl = sigmoid(l); d softplus(-l)/dl = sigmoid(l) - 1.
    let d_real = logits_real.mapv(|l| sigmoid_scalar(l) * inv_r);
    let d_int = logits_intervened.mapv(|l| (sigmoid_scalar(l) - S::one()) * inv_i);
    Ok((real_term + int_term, d_real, d_int))
}

/// Encoder regularizer `L_E = mean log(1 - D(z)) = -mean softplus(logit)`,
/// minimized by making original codes look intervened. The logit is
/// clamped to `±ADV_LOGIT_CLAMP` (zero gradient outside) because the loss
/// is unbounded below. Returns the scalar and dL/d(logits).
pub fn encoder_adv_loss<S: Scalar>(logits: &Array1<S>) -> Result<(f64, Array1<S>)> {
    let n = logits.len();
    if n == 0 {
        return Err(Error::shape("empty adversary batch"));
    }
    let clamp = S::from_f64(ADV_LOGIT_CLAMP);
    let mut value = 0.0f64;
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut grad = Array1::<S>::zeros(n);
    for (i, &raw) in logits.iter().enumerate() {
        let l = raw.max(-clamp).min(clamp);
        value -= softplus_scalar(l).as_f64() / n as f64;
        if raw.abs() < clamp {
            grad[i] = -sigmoid_scalar(l) * inv_n;
        }
    }
    Ok((value, grad))
}
