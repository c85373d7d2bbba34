//! Dense `f64` tensors and the three layer primitives the network is built
//! from: 2-D cross-correlation, ReLU and 2×2 max pooling, each with a
//! hand-written backward pass.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a `(C, H, W)` feature-map stack.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-3 (C,H,W) tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::Shape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("convolution stride must be at least 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "padded input extent {padded} is smaller than kernel extent {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, wc_in, kh, kw) = weights.dims4()?;
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "kernel expects {wc_in} input channels but input has {c_in}"
            )));
        }
        let oh = conv_output_len(h, kh, stride, padding)?;
        let ow = conv_output_len(w, kw, stride, padding)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Range of output columns whose input column `ox*stride + kx - padding`
    /// lies inside `[0, w)`.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let p = self.padding as isize;
        let k = kx as isize;
        let s = self.stride as isize;
        // ox*s + k - p >= 0  <=>  ox >= ceil((p - k) / s)
        let lo = if p - k <= 0 { 0 } else { ((p - k) + s - 1) / s };
        // ox*s + k - p <= w - 1  <=>  ox <= floor((w - 1 + p - k) / s)
        let hi_num = self.w as isize - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, self.ow as isize) as usize;
        (lo, hi.max(lo))
    }
}

/// 2-D cross-correlation of a `(C_in,H,W)` input with `(C_out,C_in,kH,kW)`
/// weights. Zero weights are skipped, so pruned layers run proportionally
/// faster.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            g.c_out
        )));
    }
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * plane];
    let x = input.data();
    let wts = weights.data();
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let in_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wts[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = kx as isize - g.padding as isize;
                            let src = &in_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (o, &v) in out_row[lo..hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.padding;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of a convolution with respect to its input, weights and bias,
/// given the gradient of the loss with respect to its output.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weights, stride, padding)?;
    if upstream.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} does not match conv output [{}, {}, {}]",
            upstream.shape(),
            g.c_out,
            g.oh,
            g.ow
        )));
    }
    let plane = g.oh * g.ow;
    let x = input.data();
    let wts = weights.data();
    let up = upstream.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wts.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let up_plane = &up[co * plane..(co + 1) * plane];
        gb[co] = up_plane.iter().sum();
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = wts[widx];
                    let (lo, hi) = g.valid_cols(kx);
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let up_row = &up_plane[oy * g.ow..(oy + 1) * g.ow];
                        let row0 = base + iy * g.w;
                        for ox in lo..hi {
                            let ix = ox * g.stride + kx - g.padding;
                            let u = up_row[ox];
                            acc += u * x[row0 + ix];
                            gx[row0 + ix] += wv * u;
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.c_out], gb)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "relu upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = input
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

/// 2×2 non-overlapping max pooling. Also returns, for every output cell, the
/// flat input index of the winning element (first maximum in row-major order).
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = d[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > best {
                        best = d[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "max-pool upstream has {} values but {} windows were recorded",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        grad.data[idx] += g;
    }
    Ok(grad)
}

/// One recorded forward operation, holding what its backward pass needs.
#[derive(Debug, Clone)]
pub enum TapeOp {
    Conv2d {
        /// Index of the owning layer in the network, used to look up weights
        /// and to key the accumulated parameter gradients.
        layer: usize,
        input: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: Tensor,
    },
    MaxPool2 {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
}

/// Parameter gradients of a single convolution layer.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub layer: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backprop {
    pub input: Tensor,
    /// One entry per recorded convolution, ordered by layer index.
    pub params: Vec<ParamGrad>,
}

/// Records the forward operations of one pass so they can be replayed in
/// reverse. A tape belongs to a single forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct GradientTape {
    ops: Vec<TapeOp>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: TapeOp) {
        self.ops.push(op);
    }

    pub fn ops(&self) -> &[TapeOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Replays the tape backwards. `weights_of` resolves a conv layer index
    /// to its current weights.
    pub fn backward<'a, F>(&self, upstream: Tensor, weights_of: F) -> Result<Backprop>
    where
        F: Fn(usize) -> Option<&'a Tensor>,
    {
        if self.ops.is_empty() {
            return Err(Error::MissingTape("tape is empty; run a recorded forward pass first".into()));
        }
        let mut grad = upstream;
        let mut params = Vec::new();
        for op in self.ops.iter().rev() {
            grad = match op {
                TapeOp::Conv2d {
                    layer,
                    input,
                    stride,
                    padding,
                } => {
                    let weights = weights_of(*layer).ok_or_else(|| {
                        Error::MissingTape(format!("no weights registered for conv layer {layer}"))
                    })?;
                    let g = conv2d_backward(input, weights, *stride, *padding, &grad)?;
                    params.push(ParamGrad {
                        layer: *layer,
                        weights: g.weights,
                        bias: g.bias,
                    });
                    g.input
                }
                TapeOp::Relu { input } => relu_backward(input, &grad)?,
                TapeOp::MaxPool2 { input_shape, argmax } => maxpool2_backward(input_shape, argmax, &grad)?,
            };
        }
        params.reverse();
        Ok(Backprop { input: grad, params })
    }
}
