//! Minimal neural-network layer kit over `ndarray`.
//!
//! Layers are generic over [`Scalar`] so the same model code runs in f32
//! for training and f64 for finite-difference verification. Each layer
//! owns its parameters and gradient buffers; `forward` is pure, `backward`
//! accumulates into the gradient buffers and returns the input gradient.
//! Callers keep whatever activations `backward` needs — caches are
//! explicit, not hidden inside the layers.

pub mod conv;
pub mod scalar;

use ndarray::{Array1, Array2, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use scalar::Scalar;

pub use conv::{col2im, im2col, Conv2d, ConvTranspose2d};

/// Visitor over named (parameter, gradient) pairs. The visit order is
/// deterministic; checkpoints, the optimizer and the gradient checker all
/// rely on it.
pub type ParamVisitor<'a, S> = dyn FnMut(&str, ArrayViewMutD<'_, S>, ArrayViewMutD<'_, S>) + 'a;

/// Anything that exposes its trainable parameters.
pub trait Params<S: Scalar> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, S>);

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, mut grad| grad.fill(S::zero()));
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, param, _| n += param.len());
        n
    }
}

/// He-normal initialization: N(0, 2 / fan_in), sampled in f64 so f32 and
/// f64 instantiations of the same seed agree to rounding.
pub fn he_normal<S: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Vec<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    (0..n).map(|_| S::from_f64(normal.sample(rng))).collect()
}

/// Force row-major storage, copying only when needed. Matrix products
/// with transposed operands may come back column-major, which breaks
/// downstream reshapes and `as_slice` callers.
pub fn standardize<S: Scalar, D: ndarray::Dimension>(
    a: ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Fully connected layer: `y = x W + b`, `x: (B, in)`, `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Dense<S: Scalar> {
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub dw: Array2<S>,
    pub db: Array1<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_vec(
            (in_dim, out_dim),
            he_normal::<S, _>(&[in_dim, out_dim], in_dim, rng),
        )
        .expect("shape matches sample count");
        Dense {
            dw: Array2::zeros(w.raw_dim()),
            db: Array1::zeros(out_dim),
            b: Array1::zeros(out_dim),
            w,
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        standardize(x.dot(&self.w) + &self.b)
    }

    /// Accumulates parameter gradients; returns dL/dx.
    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        self.dw += &x.t().dot(dy);
        self.db += &dy.sum_axis(Axis(0));
        standardize(dy.dot(&self.w.t()))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(
            &format!("{prefix}.w"),
            self.w.view_mut().into_dyn(),
            self.dw.view_mut().into_dyn(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.view_mut().into_dyn(),
            self.db.view_mut().into_dyn(),
        );
    }

    pub fn zero_grads(&mut self) {
        self.dw.fill(S::zero());
        self.db.fill(S::zero());
    }
}

// --- Activations -----------------------------------------------------------
//
// Element-wise maps over arrays of any dimension; the `_grad` variants take
// the *pre-activation* input and the upstream gradient.

pub fn relu<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn relu_grad<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
    dy: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= S::zero() {
            *d = S::zero();
        }
    });
    dx
}

pub fn leaky_relu<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
    slope: f64,
) -> ndarray::Array<S, D> {
    let a = S::from_f64(slope);
    x.mapv(|v| if v > S::zero() { v } else { a * v })
}

pub fn leaky_relu_grad<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
    dy: &ndarray::Array<S, D>,
    slope: f64,
) -> ndarray::Array<S, D> {
    let a = S::from_f64(slope);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v <= S::zero() {
            *d *= a;
        }
    });
    dx
}

/// Numerically safe logistic function.
pub fn sigmoid<S: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    // Evaluate through exp(-|v|) so neither branch overflows.
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// log(1 + exp(v)) without overflow; softplus(v) = v + softplus(-v) for v>0.
pub fn softplus_scalar<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_flat;
    use crate::rng::{stream_rng, StreamId};
    use ndarray::Array2;

    #[test]
    fn dense_shapes() {
        let mut rng = stream_rng(0, StreamId::Init);
        let layer = Dense::<f32>::new(5, 3, &mut rng);
        let x = Array2::<f32>::ones((2, 5));
        assert_eq!(layer.forward(&x).dim(), (2, 3));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = stream_rng(1, StreamId::Init);
        let mut layer = Dense::<f64>::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| 0.3 * (i as f64 - 1.0) + 0.1 * j as f64);
        // Scalar loss: sum of squared outputs.
        let y = layer.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        layer.zero_grads();
        let dx = layer.backward(&x, &dy);

        let sq = |y: &Array2<f64>| y.iter().map(|v| v * v).sum::<f64>();
        // dL/dx check, every entry.
        for flat in 0..x.len() {
            let g = central_diff_flat(&x, flat, 1e-6, |xp| sq(&layer.forward(xp)));
            let a = dx.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "dx[{flat}] analytic {a} fd {g}");
        }
        // dL/dw and dL/db, every entry.
        for flat in 0..layer.w.len() {
            let g = central_diff_flat(&layer.w, flat, 1e-6, |wp| sq(&(x.dot(wp) + &layer.b)));
            let a = layer.dw.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "dw[{flat}] analytic {a} fd {g}");
        }
        for flat in 0..layer.b.len() {
            let g = central_diff_flat(&layer.b, flat, 1e-6, |bp| sq(&(x.dot(&layer.w) + bp)));
            let a = layer.db.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "db[{flat}] analytic {a} fd {g}");
        }
    }

    #[test]
    fn he_init_statistics() {
        let mut rng = stream_rng(2, StreamId::Init);
        let vals = he_normal::<f64, _>(&[200, 200], 200, &mut rng);
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 2.0 / 200.0;
        assert!(mean.abs() < 3.0 * (target / n).sqrt(), "mean {mean}");
        assert!((var - target).abs() / target < 0.05, "var {var} vs {target}");
    }

    #[test]
    fn activations_match_definitions() {
        let x = ndarray::arr1(&[-2.0f64, -0.5, 0.0, 0.5, 2.0]);
        assert_eq!(relu(&x), ndarray::arr1(&[0.0, 0.0, 0.0, 0.5, 2.0]));
        assert_eq!(
            leaky_relu(&x, 0.2),
            ndarray::arr1(&[-0.4, -0.1, 0.0, 0.5, 2.0])
        );
        for &v in x.iter() {
            let s: f64 = sigmoid_scalar(v);
            assert!((s - 1.0 / (1.0 + (-v).exp())).abs() < 1e-15);
            let sp: f64 = softplus_scalar(v);
            assert!((sp - (1.0 + v.exp()).ln()).abs() < 1e-12);
        }
        // Extremes stay finite.
        assert!(sigmoid_scalar(-1000.0f64) >= 0.0);
        assert!(sigmoid_scalar(1000.0f64) <= 1.0);
        assert!(softplus_scalar(1000.0f64).is_finite());
    }

    #[test]
    fn zero_grads_clears_buffers() {
        let mut rng = stream_rng(3, StreamId::Init);
        let mut layer = Dense::<f32>::new(3, 2, &mut rng);
        let x = Array2::<f32>::ones((1, 3));
        let dy = Array2::<f32>::ones((1, 2));
        layer.backward(&x, &dy);
        assert!(layer.dw.iter().any(|&v| v != 0.0));
        layer.zero_grads();
        assert!(layer.dw.iter().all(|&v| v == 0.0));
        assert!(layer.db.iter().all(|&v| v == 0.0));
    }
}
