use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{bias_bound, debug_assert_finite, kaiming_bound, Tensor};

/// Checks `input [N, n]` against `weight [m, n]` and `bias [m]`, returning `(N, n, m)`.
pub(crate) fn linear_dims(input: &[usize], weight: &[usize], bias_len: usize) -> Result<(usize, usize, usize)> {
    if weight.len() != 2 {
        return Err(Error::dim("linear", "weight rank", 2, weight.len()));
    }
    let (m, n) = (weight[0], weight[1]);
    let (rows, inner) = match input {
        [n_in] => (1, *n_in),
        [r, n_in] => (*r, *n_in),
        _ => return Err(Error::dim("linear", "input rank", 2, input.len())),
    };
    if inner != n {
        return Err(Error::dim("linear", "inner axis", n, inner));
    }
    if bias_len != m {
        return Err(Error::dim("linear", "bias axis", m, bias_len));
    }
    Ok((rows, n, m))
}

/// `out[r] = W·x[r] + b` for each of `rows` input vectors of length `n`.
pub(crate) fn linear_forward_raw<S: Scalar>(x: &[S], weight: &[S], bias: &[S], rows: usize, n: usize, m: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(S::one(), MatView::rm(x, rows, n), MatView::rm_t(weight, n, m), S::one(), &mut out);
    debug_assert_finite("linear", &out);
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn linear_backward_raw<S: Scalar>(
    x: &[S],
    weight: &[S],
    grad_out: &[S],
    rows: usize,
    n: usize,
    m: usize,
    need_input: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let mut gw = vec![S::zero(); m * n];
    gemm(S::one(), MatView::rm_t(grad_out, m, rows), MatView::rm(x, rows, n), S::zero(), &mut gw);
    let mut gb = vec![S::zero(); m];
    for r in 0..rows {
        for (b, g) in gb.iter_mut().zip(&grad_out[r * m..(r + 1) * m]) {
            *b += *g;
        }
    }
    let gx = need_input.then(|| {
        let mut gx = vec![S::zero(); rows * n];
        gemm(S::one(), MatView::rm(grad_out, rows, m), MatView::rm(weight, m, n), S::zero(), &mut gx);
        gx
    });
    (gx, gw, gb)
}

/// Fully connected layer: `W·x + b` applied to a vector `[n]` or a batch `[N, n]`.
pub fn linear<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, n, m) = linear_dims(input.shape(), weight.shape(), bias.numel())?;
    let out = linear_forward_raw(input.data(), weight.data(), bias.data(), rows, n, m);
    let shape: Vec<usize> = if input.shape().len() == 1 { vec![m] } else { vec![rows, m] };
    Tensor::new(&shape, out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, grad_out: &Tensor<S>) -> Result<LinearGrads<S>> {
    let (rows, n, m) = linear_dims(input.shape(), weight.shape(), weight.shape().first().copied().unwrap_or(0))?;
    if grad_out.numel() != rows * m {
        return Err(Error::dim("linear_backward", "grad_out length", rows * m, grad_out.numel()));
    }
    let (gx, gw, gb) = linear_backward_raw(input.data(), weight.data(), grad_out.data(), rows, n, m, true);
    Ok(LinearGrads {
        input: Tensor::new(input.shape(), gx.expect("input gradient requested"))?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[m], gb)?,
    })
}

/// Trainable fully connected layer operating on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    cache: Option<(Vec<S>, usize)>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: rand::Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut weight = Tensor::uniform(&[out_features, in_features], kaiming_bound(in_features), rng);
        let mut bias = Tensor::uniform(&[out_features], bias_bound(in_features), rng);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Self { weight, bias, cache: None }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &[S], rows: usize, cache: bool) -> Result<Vec<S>> {
        let (n, m) = (self.in_features(), self.out_features());
        if x.len() != rows * n {
            return Err(Error::dim("linear", "inner axis", rows * n, x.len()));
        }
        let out = linear_forward_raw(x, self.weight.data(), self.bias.data(), rows, n, m);
        self.cache = cache.then(|| (x.to_vec(), rows));
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &[S], need_input: bool) -> Option<Vec<S>> {
        let (x, rows) = self.cache.take().expect("linear backward without cached forward");
        let (n, m) = (self.in_features(), self.out_features());
        let (gx, gw, gb) = linear_backward_raw(&x, self.weight.data(), grad_out, rows, n, m, need_input);
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        gx
    }
}
