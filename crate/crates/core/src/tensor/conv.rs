//! Valid (unpadded) 2-D convolution via im2col and a single GEMM per pass.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{bias_bound, debug_assert_finite, kaiming_bound, Tensor};

/// Output extent of a valid convolution, `floor((input - k) / stride) + 1`.
pub fn conv_out_extent(input: usize, k: usize, stride: usize) -> Option<usize> {
    if k == 0 || stride == 0 || k > input {
        None
    } else {
        Some((input - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], bias_len: usize, stride: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim("conv2d", "input rank", 4, input.len()));
        }
        if weight.len() != 4 {
            return Err(Error::dim("conv2d", "weight rank", 4, weight.len()));
        }
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != in_channels {
            return Err(Error::dim("conv2d", "channel axis", wc, in_channels));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", "kernel width axis", kh, kw));
        }
        if bias_len != out_channels {
            return Err(Error::dim("conv2d", "bias axis", out_channels, bias_len));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out_height = conv_out_extent(height, kh, stride)
            .ok_or_else(|| Error::dim("conv2d", "height axis (kernel exceeds input)", kh, height))?;
        let out_width = conv_out_extent(width, kw, stride)
            .ok_or_else(|| Error::dim("conv2d", "width axis (kernel exceeds input)", kw, width))?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            out_height,
            out_width,
        })
    }

    /// Rows of the im2col matrix: `C·K·K`.
    pub fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }
}

/// Unfolds `[N, C, H, W]` into a `[N·P, C·K·K]` row-major matrix: one row
/// per output position.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry) -> Vec<S> {
    let (k, s, w) = (g.kernel, g.stride, g.width);
    let patch = g.patch();
    let plane = g.height * w;
    let mut cols = vec![S::zero(); g.batch * g.positions() * patch];
    let mut rows = cols.chunks_exact_mut(patch);
    for n in 0..g.batch {
        let sample = &x[n * g.in_channels * plane..(n + 1) * g.in_channels * plane];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = rows.next().expect("row count");
                let mut dst = row.chunks_exact_mut(k);
                for ci in 0..g.in_channels {
                    let base = ci * plane + oy * s * w + ox * s;
                    for ki in 0..k {
                        let src = &sample[base + ki * w..base + ki * w + k];
                        dst.next().expect("kernel rows").copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `[N·P, C·K·K]` back into `[N, C, H, W]`,
/// summing overlapping contributions.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry) -> Vec<S> {
    let (k, s, w) = (g.kernel, g.stride, g.width);
    let patch = g.patch();
    let plane = g.height * w;
    let mut x = vec![S::zero(); g.batch * g.in_channels * plane];
    let mut rows = cols.chunks_exact(patch);
    for n in 0..g.batch {
        let sample = &mut x[n * g.in_channels * plane..(n + 1) * g.in_channels * plane];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = rows.next().expect("row count");
                let mut src = row.chunks_exact(k);
                for ci in 0..g.in_channels {
                    let base = ci * plane + oy * s * w + ox * s;
                    for ki in 0..k {
                        let dst = &mut sample[base + ki * w..base + ki * w + k];
                        for (d, v) in dst.iter_mut().zip(src.next().expect("kernel rows")) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward pass given an already unfolded input. Returns `[N, O, OH, OW]` data.
pub(crate) fn conv_forward_cols<S: Scalar>(cols: &[S], weight: &[S], bias: &[S], g: &ConvGeometry) -> Vec<S> {
    let p = g.positions();
    let np = g.batch * p;
    let o = g.out_channels;
    let mut tmp = vec![S::zero(); o * np];
    gemm(S::one(), MatView::rm(weight, o, g.patch()), MatView::rm_t(cols, g.patch(), np), S::zero(), &mut tmp);
    let mut out = vec![S::zero(); g.batch * o * p];
    for oc in 0..o {
        let b = bias[oc];
        let src = &tmp[oc * np..(oc + 1) * np];
        for n in 0..g.batch {
            let dst = &mut out[(n * o + oc) * p..(n * o + oc + 1) * p];
            for (d, s) in dst.iter_mut().zip(&src[n * p..(n + 1) * p]) {
                *d = *s + b;
            }
        }
    }
    debug_assert_finite("conv2d", &out);
    out
}

/// Backward pass given the unfolded input. Returns `(grad_input, grad_weight,
/// grad_bias)`; the input gradient is skipped when `need_input` is false.
pub(crate) fn conv_backward_cols<S: Scalar>(
    cols: &[S],
    weight: &[S],
    grad_out: &[S],
    g: &ConvGeometry,
    need_input: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let p = g.positions();
    let np = g.batch * p;
    let o = g.out_channels;
    let patch = g.patch();
    let mut gtmp = vec![S::zero(); o * np];
    let mut gb = vec![S::zero(); o];
    for n in 0..g.batch {
        for oc in 0..o {
            let src = &grad_out[(n * o + oc) * p..(n * o + oc + 1) * p];
            gtmp[oc * np + n * p..oc * np + (n + 1) * p].copy_from_slice(src);
            gb[oc] += src.iter().copied().sum::<S>();
        }
    }
    let mut gw = vec![S::zero(); o * patch];
    gemm(S::one(), MatView::rm(&gtmp, o, np), MatView::rm(cols, np, patch), S::zero(), &mut gw);
    let gx = need_input.then(|| {
        let mut gcols = vec![S::zero(); patch * np];
        gemm(S::one(), MatView::rm_t(&gtmp, np, o), MatView::rm(weight, o, patch), S::zero(), &mut gcols);
        col2im(&gcols, g)
    });
    (gx, gw, gb)
}

/// Valid 2-D convolution of an NCHW input with an OIKK weight.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), bias.numel(), stride)?;
    let cols = im2col(input.data(), &g);
    Tensor::new(&g.output_shape(), conv_forward_cols(&cols, weight.data(), bias.data(), &g))
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    grad_out: &Tensor<S>,
) -> Result<Conv2dGrads<S>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), weight.shape()[0], stride)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::dim("conv2d_backward", "grad_out length", g.output_shape().iter().product(), grad_out.numel()));
    }
    let cols = im2col(input.data(), &g);
    let (gx, gw, gb) = conv_backward_cols(&cols, weight.data(), grad_out.data(), &g, true);
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), gx.expect("input gradient requested"))?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[g.out_channels], gb)?,
    })
}

/// Trainable convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    cache: Option<(Vec<S>, ConvGeometry)>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: rand::Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut weight = Tensor::uniform(&[out_channels, in_channels, kernel, kernel], kaiming_bound(fan_in), rng);
        let mut bias = Tensor::uniform(&[out_channels], bias_bound(fan_in), rng);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Self { weight, bias, stride, cache: None }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn geometry(&self, batch: usize, in_channels: usize, height: usize, width: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(&[batch, in_channels, height, width], self.weight.shape(), self.bias.numel(), self.stride)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &[S], g: ConvGeometry, cache: bool) -> Vec<S> {
        debug_assert_eq!(x.len(), g.batch * g.in_channels * g.height * g.width);
        let cols = im2col(x, &g);
        let out = conv_forward_cols(&cols, self.weight.data(), self.bias.data(), &g);
        self.cache = cache.then_some((cols, g));
        out
    }

    pub fn backward(&mut self, grad_out: &[S], need_input: bool) -> Option<Vec<S>> {
        let (cols, g) = self.cache.take().expect("conv backward without cached forward");
        let (gx, gw, gb) = conv_backward_cols(&cols, self.weight.data(), grad_out, &g, need_input);
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        gx
    }
}
