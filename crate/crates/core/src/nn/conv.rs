//! 3x3 convolution blocks: cross-correlation with zero padding, ReLU, and
//! non-overlapping max pooling (stride = window, remainder rows/cols dropped).
//!
//! The explicit-loop kernels (`conv2d_reference`, `conv2d_backward_reference`)
//! define the semantics. The im2col + GEMM path used for training is checked
//! against them in the tests below.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::nn::linear::ParamGrad;
use crate::rng::{uniform_init, Rng};
use crate::tensor::{gemm, MatRef, Tensor};

pub const KERNEL: usize = 3;

/// Shape bookkeeping for one conv over a single `in_ch x height x width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o + k).checked_sub(self.padding).filter(|&v| v < limit)
    }
}

/// Direct-loop cross-correlation (with bias) of one image.
pub fn conv2d_reference(g: &ConvGeometry, x: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let mut out = vec![0.0; g.out_ch * oh * ow];
    for o in 0..g.out_ch {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = bias[o];
                for c in 0..g.in_ch {
                    for ky in 0..k {
                        let Some(iy) = g.src(y, ky, g.height) else { continue };
                        for kx in 0..k {
                            let Some(ix) = g.src(xo, kx, g.width) else { continue };
                            s += kernels[((o * g.in_ch + c) * k + ky) * k + kx] * x[(c * g.height + iy) * g.width + ix];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = s;
            }
        }
    }
    out
}

/// Direct-loop backward of [`conv2d_reference`]: `(d_kernels, d_bias, d_input)`.
pub fn conv2d_backward_reference(
    g: &ConvGeometry,
    x: &[f64],
    kernels: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let mut dk = vec![0.0; g.out_ch * g.patch()];
    let mut db = vec![0.0; g.out_ch];
    let mut dx = vec![0.0; g.in_len()];
    for o in 0..g.out_ch {
        for y in 0..oh {
            for xo in 0..ow {
                let d = dout[(o * oh + y) * ow + xo];
                db[o] += d;
                for c in 0..g.in_ch {
                    for ky in 0..k {
                        let Some(iy) = g.src(y, ky, g.height) else { continue };
                        for kx in 0..k {
                            let Some(ix) = g.src(xo, kx, g.width) else { continue };
                            let ki = ((o * g.in_ch + c) * k + ky) * k + kx;
                            let xi = (c * g.height + iy) * g.width + ix;
                            dk[ki] += d * x[xi];
                            dx[xi] += d * kernels[ki];
                        }
                    }
                }
            }
        }
    }
    (dk, db, dx)
}

/// Unfolds one image into a `patch x out_plane` column matrix.
fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let plane = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for y in 0..oh {
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    match g.src(y, ky, g.height) {
                        None => dst.fill(0.0),
                        Some(iy) => {
                            let src = &x[(c * g.height + iy) * g.width..][..g.width];
                            for (xo, d) in dst.iter_mut().enumerate() {
                                *d = g.src(xo, kx, g.width).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column-gradient matrix back onto the image (accumulating).
fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let plane = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for y in 0..oh {
                    let Some(iy) = g.src(y, ky, g.height) else { continue };
                    let dst = &mut dx[(c * g.height + iy) * g.width..][..g.width];
                    for (xo, &v) in row[y * ow..(y + 1) * ow].iter().enumerate() {
                        if let Some(ix) = g.src(xo, kx, g.width) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// im2col + GEMM cross-correlation of one image; `cols` is scratch space.
pub fn conv2d_im2col(g: &ConvGeometry, x: &[f64], kernels: &[f64], bias: &[f64], cols: &mut Vec<f64>) -> Vec<f64> {
    let plane = g.out_plane();
    cols.resize(g.patch() * plane, 0.0);
    im2col(g, x, cols);
    let mut out = Vec::with_capacity(g.out_ch * plane);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, plane));
    }
    gemm(
        1.0,
        MatRef::new(kernels, g.out_ch, g.patch()),
        MatRef::new(cols, g.patch(), plane),
        1.0,
        &mut out,
    );
    out
}

/// Max pooling with window = stride = `pool` over `channels x h x w`.
/// Returns the pooled map and, per output, the flat index of the window
/// maximum (first occurrence wins ties).
pub fn maxpool_forward(pre: &[f64], channels: usize, h: usize, w: usize, pool: usize) -> (Vec<f64>, Vec<u32>) {
    let (ph, pw) = (h / pool, w / pool);
    let mut out = Vec::with_capacity(channels * ph * pw);
    let mut idx = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        for py in 0..ph {
            for px in 0..pw {
                let mut best = (c * h + py * pool) * w + px * pool;
                for dy in 0..pool {
                    for dx in 0..pool {
                        let i = (c * h + py * pool + dy) * w + px * pool + dx;
                        if pre[i] > pre[best] {
                            best = i;
                        }
                    }
                }
                out.push(pre[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Routes pooled gradients back to the recorded argmax positions.
pub fn maxpool_backward(dpooled: &[f64], argmax: &[u32], pre_len: usize) -> Vec<f64> {
    let mut d = vec![0.0; pre_len];
    for (&g, &i) in dpooled.iter().zip(argmax) {
        d[i as usize] += g;
    }
    d
}

/// Conv (3x3, padding 1) -> ReLU -> max-pool block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `out_ch x in_ch x 3 x 3`
    pub kernels: Tensor,
    pub bias: Tensor,
    pub padding: usize,
    pub pool: usize,
    pub trainable: bool,
}

impl ConvLayer {
    pub fn new(kernels: Tensor, bias: Tensor, padding: usize, pool: usize, trainable: bool) -> Result<Self> {
        match kernels.shape() {
            [oc, _, k1, k2] if *k1 == KERNEL && *k2 == KERNEL && bias.shape() == [*oc] => {}
            s => {
                return dim_err(
                    "ConvLayer::new",
                    format!("kernels {s:?} / bias {:?} are not a 3x3 conv", bias.shape()),
                )
            }
        }
        if pool == 0 {
            return dim_err("ConvLayer::new", "pool window must be at least 1");
        }
        Ok(Self {
            kernels,
            bias,
            padding,
            pool,
            trainable,
        })
    }

    pub fn init(rng: &mut Rng, in_ch: usize, out_ch: usize, pool: usize) -> Result<Self> {
        let fan_in = in_ch * KERNEL * KERNEL;
        let kernels = uniform_init(rng, fan_in, &[out_ch, in_ch, KERNEL, KERNEL])?;
        let bias = uniform_init(rng, fan_in, &[out_ch])?;
        Self::new(kernels, bias, 1, pool, true)
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn geometry(&self, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry {
            in_ch: self.in_channels(),
            out_ch: self.out_channels(),
            height,
            width,
            kernel: KERNEL,
            padding: self.padding,
        }
    }

    /// `(channels, height, width)` of the pooled output.
    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let g = self.geometry(height, width);
        (
            self.out_channels(),
            g.out_height() / self.pool,
            g.out_width() / self.pool,
        )
    }

    /// Batched forward: returns pooled post-ReLU activations and argmax indices.
    pub(crate) fn forward_raw(&self, x: &[f64], batch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
        let g = self.geometry(h, w);
        let (oc, ph, pw) = self.output_dims(h, w);
        let per_out = oc * ph * pw;
        let mut out = Vec::with_capacity(batch * per_out);
        let mut arg = Vec::with_capacity(batch * per_out);
        let mut cols = Vec::new();
        for sample in x.chunks_exact(g.in_len()).take(batch) {
            let pre = conv2d_im2col(&g, sample, self.kernels.data(), self.bias.data(), &mut cols);
            let (pooled, idx) = maxpool_forward(&pre, oc, g.out_height(), g.out_width(), self.pool);
            out.extend(pooled.into_iter().map(|v| v.max(0.0)));
            arg.extend(idx);
        }
        (out, arg)
    }

    /// Batched backward from the gradient w.r.t. the pooled post-ReLU output.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_raw(
        &self,
        x: &[f64],
        pooled: &[f64],
        argmax: &[u32],
        dpooled: &[f64],
        batch: usize,
        (h, w): (usize, usize),
        want_params: bool,
        want_input: bool,
    ) -> (Option<ParamGrad>, Option<Vec<f64>>) {
        let g = self.geometry(h, w);
        let (oc, ph, pw) = self.output_dims(h, w);
        let per_out = oc * ph * pw;
        let plane = g.out_plane();
        let pre_len = oc * plane;
        let mut dk = vec![0.0; oc * g.patch()];
        let mut db = vec![0.0; oc];
        let mut dx = if want_input {
            vec![0.0; batch * g.in_len()]
        } else {
            Vec::new()
        };
        let mut cols = vec![0.0; g.patch() * plane];
        let mut dcols = vec![0.0; g.patch() * plane];
        for s in 0..batch {
            // ReLU subgradient at 0 is 0: only positive pooled outputs pass gradient.
            let dp: Vec<f64> = dpooled[s * per_out..(s + 1) * per_out]
                .iter()
                .zip(&pooled[s * per_out..(s + 1) * per_out])
                .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                .collect();
            let dpre = maxpool_backward(&dp, &argmax[s * per_out..(s + 1) * per_out], pre_len);
            if want_params {
                im2col(&g, &x[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
                gemm(
                    1.0,
                    MatRef::new(&dpre, oc, plane),
                    MatRef::new(&cols, g.patch(), plane).t(),
                    1.0,
                    &mut dk,
                );
                for (o, d) in db.iter_mut().enumerate() {
                    *d += dpre[o * plane..(o + 1) * plane].iter().sum::<f64>();
                }
            }
            if want_input {
                gemm(
                    1.0,
                    MatRef::new(self.kernels.data(), oc, g.patch()).t(),
                    MatRef::new(&dpre, oc, plane),
                    0.0,
                    &mut dcols,
                );
                col2im(&g, &dcols, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
            }
        }
        let params = want_params.then(|| ParamGrad {
            weight: Tensor::from_parts(self.kernels.shape().to_vec(), dk),
            bias: Tensor::from_parts(vec![oc], db),
        });
        (params, want_input.then_some(dx))
    }

    /// Conv -> ReLU -> pool over `[B, in_ch, H, W]`.
    pub fn conv_forward(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = *x.shape() else {
            return dim_err("conv_forward", format!("expected [B, C, H, W], got {:?}", x.shape()));
        };
        if c != self.in_channels() {
            return dim_err(
                "conv_forward",
                format!("{c} input channels, layer expects {}", self.in_channels()),
            );
        }
        let (oc, ph, pw) = self.output_dims(h, w);
        let (out, _) = self.forward_raw(x.data(), b, h, w);
        let t = Tensor::from_parts(vec![b, oc, ph, pw], out);
        t.ensure_finite("conv_forward")?;
        Ok(t)
    }
}
