//! Strided 2-d convolution and its transpose, NHWC layout, via
//! im2col + GEMM. Patch extraction is the only hand-written inner loop;
//! all arithmetic heavy lifting goes through `ndarray::dot`.

use ndarray::{Array1, Array2, Array4, Axis, s};
use rand::Rng;

use super::scalar::Scalar;
use super::{he_normal, ParamVisitor};
use crate::error::{Error, Result};

/// Output spatial size for one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Patch matrix of `x: (B, H, W, C)`: row `(b·OH + oy)·OW + ox` holds the
/// receptive field at output position `(oy, ox)`, columns ordered
/// `(ky·KW + kx)·C + c`. Out-of-bounds taps read zero.
pub fn im2col<S: Scalar>(x: &Array4<S>, kernel: usize, stride: usize, pad: usize) -> Array2<S> {
    let (b, h, w, c) = x.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let mut col = Array2::<S>::zeros((b * oh * ow, kernel * kernel * c));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (ky * kernel + kx) * c;
                        col.slice_mut(s![row, base..base + c])
                            .assign(&x.slice(s![bi, iy as usize, ix as usize, ..]));
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the image grid.
/// `⟨im2col(x), C⟩ = ⟨x, col2im(C)⟩` for all `x`, `C`.
pub fn col2im<S: Scalar>(
    col: &Array2<S>,
    image_dim: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (b, h, w, c) = image_dim;
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    debug_assert_eq!(col.dim(), (b * oh * ow, kernel * kernel * c));
    let mut x = Array4::<S>::zeros(image_dim);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (ky * kernel + kx) * c;
                        let mut dst = x.slice_mut(s![bi, iy as usize, ix as usize, ..]);
                        dst += &col.slice(s![row, base..base + c]);
                    }
                }
            }
        }
    }
    x
}

/// Strided convolution, NHWC in and out.
///
/// Weight is stored patch-flat: `(kernel² · c_in, c_out)` with the same
/// column order im2col produces.
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub dw: Array2<S>,
    pub db: Array1<S>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let w = Array2::from_shape_vec(
            (fan_in, c_out),
            he_normal::<S, _>(&[fan_in, c_out], fan_in, rng),
        )
        .expect("shape matches sample count");
        Conv2d {
            dw: Array2::zeros(w.raw_dim()),
            db: Array1::zeros(c_out),
            b: Array1::zeros(c_out),
            w,
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.kernel, self.stride, self.pad),
            conv_out_size(w, self.kernel, self.stride, self.pad),
        )
    }

    pub fn check_input(&self, x: &Array4<S>) -> Result<()> {
        let (_, h, w, c) = x.dim();
        if c != self.c_in {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Returns output and the patch matrix (needed by `backward`).
    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, Array2<S>) {
        let (b, h, w, _) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let col = im2col(x, self.kernel, self.stride, self.pad);
        let y = col.dot(&self.w) + &self.b;
        let y = y
            .into_shape_with_order((b, oh, ow, self.c_out))
            .expect("row count matches output grid");
        (y, col)
    }

    /// Accumulates dW, db; returns dL/dx.
    pub fn backward(&mut self, col: &Array2<S>, input_dim: (usize, usize, usize, usize), dy: &Array4<S>) -> Array4<S> {
        let (b, oh, ow, _) = dy.dim();
        let dy_flat = dy
            .view()
            .into_shape_with_order((b * oh * ow, self.c_out))
            .expect("contiguous NHWC gradient");
        self.dw += &col.t().dot(&dy_flat);
        self.db += &dy_flat.sum_axis(Axis(0));
        let dcol = dy_flat.dot(&self.w.t());
        col2im(&dcol, input_dim, self.kernel, self.stride, self.pad)
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

/// Transposed strided convolution (upsampling), the exact adjoint of
/// [`Conv2d`] with the same kernel/stride/pad: input on the coarse grid,
/// output on the fine grid.
///
/// Weight shape `(c_in, kernel² · c_out)`: forward is a GEMM into patch
/// space followed by a col2im scatter onto the fine grid.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<S: Scalar> {
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub dw: Array2<S>,
    pub db: Array1<S>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // Each fine-grid output unit sees ~kernel²/stride² taps per input
        // channel.
        let fan_in = (c_in * kernel * kernel) / (stride * stride);
        let cols = kernel * kernel * c_out;
        let w = Array2::from_shape_vec(
            (c_in, cols),
            he_normal::<S, _>(&[c_in, cols], fan_in.max(1), rng),
        )
        .expect("shape matches sample count");
        ConvTranspose2d {
            dw: Array2::zeros(w.raw_dim()),
            db: Array1::zeros(c_out),
            b: Array1::zeros(c_out),
            w,
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        }
    }

    /// Fine-grid spatial size this layer produces from a coarse input.
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.pad,
            (w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    /// Returns output and the flattened input (needed by `backward`).
    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, Array2<S>) {
        let (b, h, w, c) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_spatial(h, w);
        let x_flat = x
            .view()
            .into_shape_with_order((b * h * w, c))
            .expect("contiguous NHWC input")
            .to_owned();
        let patches = x_flat.dot(&self.w);
        let mut y = col2im(
            &patches,
            (b, oh, ow, self.c_out),
            self.kernel,
            self.stride,
            self.pad,
        );
        y += &self.b;
        (y, x_flat)
    }

    /// Accumulates dW, db; returns dL/dx on the coarse grid.
    pub fn backward(&mut self, x_flat: &Array2<S>, input_dim: (usize, usize, usize, usize), dy: &Array4<S>) -> Array4<S> {
        let (b, h, w, c) = input_dim;
        let dy_col = im2col(dy, self.kernel, self.stride, self.pad);
        self.dw += &x_flat.t().dot(&dy_col);
        let db = dy
            .view()
            .into_shape_with_order((dy.len() / self.c_out, self.c_out))
            .expect("contiguous NHWC gradient")
            .sum_axis(Axis(0));
        self.db += &db;
        let dx_flat = crate::nn::standardize(dy_col.dot(&self.w.t()));
        dx_flat
            .into_shape_with_order((b, h, w, c))
            .expect("row count matches coarse grid")
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_flat;
    use crate::rng::{stream_rng, StreamId};
    use ndarray::Array4;

    fn test_input(b: usize, h: usize, w: usize, c: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, h, w, c), |(bi, y, x, ci)| {
            ((bi * 31 + y * 7 + x * 3 + ci * 11) % 13) as f64 / 13.0 - 0.4
        })
    }

    #[test]
    fn conv_halves_spatial_size() {
        let mut rng = stream_rng(0, StreamId::Init);
        let conv = Conv2d::<f32>::new(1, 3, 4, 2, 1, &mut rng);
        let x = Array4::<f32>::zeros((2, 8, 8, 1));
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 4, 4, 3));
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut rng = stream_rng(0, StreamId::Init);
        let deconv = ConvTranspose2d::<f32>::new(3, 1, 4, 2, 1, &mut rng);
        let x = Array4::<f32>::zeros((2, 4, 4, 3));
        let (y, _) = deconv.forward(&x);
        assert_eq!(y.dim(), (2, 8, 8, 1));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), C> == <x, col2im(C)> for random x, C.
        let x = test_input(2, 6, 6, 3);
        let col_shape = im2col(&x, 4, 2, 1).dim();
        let c_mat = Array2::from_shape_fn(col_shape, |(i, j)| {
            ((i * 17 + j * 5) % 7) as f64 / 7.0 - 0.3
        });
        let lhs: f64 = (im2col(&x, 4, 2, 1) * &c_mat).sum();
        let back = col2im(&c_mat, x.dim(), 4, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = stream_rng(1, StreamId::Init);
        let conv = Conv2d::<f64>::new(2, 3, 4, 2, 1, &mut rng);
        let x = test_input(1, 6, 6, 2);
        let (y, _) = conv.forward(&x);
        // Direct 7-loop reference.
        let (oh, ow) = conv.out_spatial(6, 6);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..3 {
                    let mut acc = conv.b[co];
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || iy >= 6 || ix < 0 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[0, iy as usize, ix as usize, ci]]
                                    * conv.w[[(ky * 4 + kx) * 2 + ci, co]];
                            }
                        }
                    }
                    let got = y[[0, oy, ox, co]];
                    assert!((got - acc).abs() < 1e-12, "({oy},{ox},{co}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream_rng(2, StreamId::Init);
        let mut conv = Conv2d::<f64>::new(2, 3, 4, 2, 1, &mut rng);
        let x = test_input(2, 6, 6, 2);
        let (y, col) = conv.forward(&x);
        let dy = y.mapv(|v| 2.0 * v); // L = sum y^2
        conv.zero_grads();
        let dx = conv.backward(&col, x.dim(), &dy);

        let loss_x = |xp: &Array4<f64>| conv.forward(xp).0.iter().map(|v| v * v).sum::<f64>();
        for flat in (0..x.len()).step_by(7) {
            let g = central_diff_flat(&x, flat, 1e-6, loss_x);
            let a = dx.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "dx[{flat}] analytic {a} fd {g}");
        }
        let loss_w = |wp: &Array2<f64>| {
            let y = im2col(&x, 4, 2, 1).dot(wp) + &conv.b;
            y.iter().map(|v| v * v).sum::<f64>()
        };
        for flat in (0..conv.w.len()).step_by(11) {
            let g = central_diff_flat(&conv.w, flat, 1e-6, loss_w);
            let a = conv.dw.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "dw[{flat}] analytic {a} fd {g}");
        }
        for flat in 0..conv.b.len() {
            let g = central_diff_flat(&conv.b, flat, 1e-6, |bp| {
                let y = im2col(&x, 4, 2, 1).dot(&conv.w) + bp;
                y.iter().map(|v| v * v).sum::<f64>()
            });
            let a = conv.db.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "db[{flat}] analytic {a} fd {g}");
        }
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = stream_rng(3, StreamId::Init);
        let mut deconv = ConvTranspose2d::<f64>::new(3, 2, 4, 2, 1, &mut rng);
        let x = test_input(2, 3, 3, 3);
        let (y, x_flat) = deconv.forward(&x);
        assert_eq!(y.dim(), (2, 6, 6, 2));
        let dy = y.mapv(|v| 2.0 * v);
        deconv.zero_grads();
        let dx = deconv.backward(&x_flat, x.dim(), &dy);

        let loss_x = |xp: &Array4<f64>| deconv.forward(xp).0.iter().map(|v| v * v).sum::<f64>();
        for flat in (0..x.len()).step_by(5) {
            let g = central_diff_flat(&x, flat, 1e-6, loss_x);
            let a = dx.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "dx[{flat}] analytic {a} fd {g}");
        }
        let loss_w = |wp: &Array2<f64>| {
            let patches = x_flat.dot(wp);
            let mut y = col2im(&patches, (2, 6, 6, 2), 4, 2, 1);
            y += &deconv.b;
            y.iter().map(|v| v * v).sum::<f64>()
        };
        for flat in (0..deconv.w.len()).step_by(13) {
            let g = central_diff_flat(&deconv.w, flat, 1e-6, loss_w);
            let a = deconv.dw.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "dw[{flat}] analytic {a} fd {g}");
        }
        for flat in 0..deconv.b.len() {
            let g = central_diff_flat(&deconv.b, flat, 1e-6, |bp| {
                let patches = x_flat.dot(&deconv.w);
                let mut y = col2im(&patches, (2, 6, 6, 2), 4, 2, 1);
                y += bp;
                y.iter().map(|v| v * v).sum::<f64>()
            });
            let a = deconv.db.as_slice().unwrap()[flat];
            let rel = (g - a).abs() / g.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-6, "db[{flat}] analytic {a} fd {g}");
        }
    }

    #[test]
    fn conv_then_transpose_restores_shape() {
        let mut rng = stream_rng(4, StreamId::Init);
        let conv = Conv2d::<f32>::new(1, 4, 4, 2, 1, &mut rng);
        let deconv = ConvTranspose2d::<f32>::new(4, 1, 4, 2, 1, &mut rng);
        let x = Array4::<f32>::zeros((1, 16, 16, 1));
        let (h, _) = conv.forward(&x);
        let (y, _) = deconv.forward(&h);
        assert_eq!(y.dim(), x.dim());
    }
}
