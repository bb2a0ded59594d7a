use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network.
///
/// Per-sample shapes are `[units]` for dense/softmax and `[channels, height, width]`
/// for conv/pool. Dense layers flatten whatever they receive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        in_units: usize,
        out_units: usize,
    },
    /// Valid (unpadded) square convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    },
    /// 2×2 window, stride 2; a trailing odd row/column is dropped.
    MaxPool2x2,
    Relu,
    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in training.
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a given per-sample input shape, or a descriptive error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match *self {
            LayerSpec::Dense {
                in_units,
                out_units,
            } => {
                if in_units == 0 || out_units == 0 {
                    return Err(Error::Shape("dense layer with zero units".into()));
                }
                if numel != in_units {
                    return Err(Error::Shape(format!(
                        "dense layer expects {in_units} inputs but receives shape {input:?} ({numel} values)"
                    )));
                }
                Ok(vec![out_units])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
                    return Err(Error::Shape("conv2d layer with a zero parameter".into()));
                }
                let [c, h, w] = three_d(input, "conv2d")?;
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} input channels but receives {c}"
                    )));
                }
                if h < kernel_size || w < kernel_size {
                    return Err(Error::Shape(format!(
                        "conv2d kernel {kernel_size} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel_size) / stride + 1,
                    (w - kernel_size) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = three_d(input, "maxpool2x2")?;
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!("maxpool2x2 on {h}x{w} input")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Shape(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Softmax => {
                if input.len() != 1 || input[0] < 2 {
                    return Err(Error::Shape(format!(
                        "softmax needs a flat input of at least two classes, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// (weight count, bias count) for this layer.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense {
                in_units,
                out_units,
            } => (in_units * out_units, out_units),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => (
                out_channels * in_channels * kernel_size * kernel_size,
                out_channels,
            ),
            _ => (0, 0),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense {
                in_units,
                out_units,
            } => (in_units, out_units),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => {
                let k2 = kernel_size * kernel_size;
                (in_channels * k2, out_channels * k2)
            }
            _ => (0, 0),
        }
    }
}

fn three_d(input: &[usize], kind: &str) -> Result<[usize; 3]> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Shape(format!(
            "{kind} expects a [channels, height, width] input, got {input:?}"
        ))),
    }
}

/// A layer bound to concrete input/output shapes, with its parameters.
///
/// Dense weights are `[out, in]`; conv weights are `[out_c, in_c, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) in_shape: Vec<usize>,
    pub(crate) out_shape: Vec<usize>,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

/// Per-layer state the backward pass needs.
#[derive(Debug)]
pub(crate) enum Saved {
    None,
    Input(Vec<f64>),
    /// Dense input and conv im2col columns.
    Columns(Vec<f64>),
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
    Output(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub(crate) fn new(spec: LayerSpec, in_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let out_shape = spec.output_shape(in_shape)?;
        let (nw, nb) = spec.param_counts();
        let weights = if nw > 0 {
            let (fan_in, fan_out) = spec.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..nw).map(|_| rng.gen_range(-limit..limit)).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            in_shape: in_shape.to_vec(),
            out_shape,
            weights,
            bias: vec![0.0; nb],
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn has_params(&self) -> bool {
        !self.weights.is_empty()
    }

    fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Runs the layer on `n` samples. `dropout_rng` is `Some` only in training mode.
    pub(crate) fn forward(
        &self,
        input: &[f64],
        n: usize,
        dropout_rng: Option<&mut dyn rand::RngCore>,
        keep: bool,
    ) -> (Vec<f64>, Saved) {
        match self.spec {
            LayerSpec::Dense {
                in_units,
                out_units,
            } => {
                let mut out = Vec::with_capacity(n * out_units);
                for _ in 0..n {
                    out.extend_from_slice(&self.bias);
                }
                gemm(
                    n, in_units, out_units, input, false, &self.weights, true, &mut out, 1.0,
                );
                let saved = if keep {
                    Saved::Input(input.to_vec())
                } else {
                    Saved::None
                };
                (out, saved)
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
                stride,
                ..
            } => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let rows = c * kernel_size * kernel_size;
                let cols_len = rows * oh * ow;
                let in_len = self.in_len();
                let out_len = self.out_len();
                let mut out = vec![0.0; n * out_len];
                let mut all_cols = if keep { vec![0.0; n * cols_len] } else { Vec::new() };
                let mut scratch = vec![0.0; cols_len];
                for s in 0..n {
                    let cols: &mut [f64] = if keep {
                        &mut all_cols[s * cols_len..(s + 1) * cols_len]
                    } else {
                        &mut scratch
                    };
                    im2col(
                        &input[s * in_len..(s + 1) * in_len],
                        c,
                        h,
                        w,
                        kernel_size,
                        stride,
                        oh,
                        ow,
                        cols,
                    );
                    let y = &mut out[s * out_len..(s + 1) * out_len];
                    for (oc, plane) in y.chunks_mut(oh * ow).enumerate() {
                        plane.fill(self.bias[oc]);
                    }
                    gemm(
                        out_channels,
                        rows,
                        oh * ow,
                        &self.weights,
                        false,
                        cols,
                        false,
                        y,
                        1.0,
                    );
                }
                let saved = if keep {
                    Saved::Columns(all_cols)
                } else {
                    Saved::None
                };
                (out, saved)
            }
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let (oh, ow) = (h / 2, w / 2);
                let in_len = self.in_len();
                let mut out = Vec::with_capacity(n * c * oh * ow);
                let mut argmax = Vec::with_capacity(if keep { n * c * oh * ow } else { 0 });
                for s in 0..n {
                    for ch in 0..c {
                        let base = s * in_len + ch * h * w;
                        for y in 0..oh {
                            for x in 0..ow {
                                let mut best = base + 2 * y * w + 2 * x;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                                    if input[idx] > input[best] {
                                        best = idx;
                                    }
                                }
                                out.push(input[best]);
                                if keep {
                                    argmax.push(best);
                                }
                            }
                        }
                    }
                }
                (out, Saved::Argmax(argmax))
            }
            LayerSpec::Relu => {
                let out = input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                let saved = if keep {
                    Saved::Input(input.to_vec())
                } else {
                    Saved::None
                };
                (out, saved)
            }
            LayerSpec::Dropout { rate } => match dropout_rng {
                Some(rng) if rate > 0.0 => {
                    let scale = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..input.len())
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                        .collect();
                    let out = input.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (out, Saved::Mask(mask))
                }
                _ => (input.to_vec(), Saved::None),
            },
            LayerSpec::Softmax => {
                let k = self.out_len();
                let mut out = input.to_vec();
                for row in out.chunks_mut(k) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                let saved = if keep {
                    Saved::Output(out.clone())
                } else {
                    Saved::None
                };
                (out, saved)
            }
        }
    }

    /// Propagates `grad_out` back through the layer, returning the input gradient
    /// and, for parameterised layers, the parameter gradients.
    pub(crate) fn backward(
        &self,
        grad_out: &[f64],
        saved: &Saved,
        n: usize,
        need_input_grad: bool,
    ) -> (Vec<f64>, Option<LayerGrad>) {
        match (self.spec, saved) {
            (
                LayerSpec::Dense {
                    in_units,
                    out_units,
                },
                Saved::Input(x),
            ) => {
                let mut gw = vec![0.0; in_units * out_units];
                gemm(out_units, n, in_units, grad_out, true, x, false, &mut gw, 0.0);
                let mut gb = vec![0.0; out_units];
                for row in grad_out.chunks(out_units) {
                    for (b, g) in gb.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let mut gx = Vec::new();
                if need_input_grad {
                    gx = vec![0.0; n * in_units];
                    gemm(
                        n,
                        out_units,
                        in_units,
                        grad_out,
                        false,
                        &self.weights,
                        false,
                        &mut gx,
                        0.0,
                    );
                }
                (
                    gx,
                    Some(LayerGrad {
                        weights: gw,
                        bias: gb,
                    }),
                )
            }
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel_size,
                    stride,
                    ..
                },
                Saved::Columns(all_cols),
            ) => {
                let [c, h, w] = [self.in_shape[0], self.in_shape[1], self.in_shape[2]];
                let (oh, ow) = (self.out_shape[1], self.out_shape[2]);
                let rows = c * kernel_size * kernel_size;
                let plane = oh * ow;
                let cols_len = rows * plane;
                let out_len = self.out_len();
                let in_len = self.in_len();
                let mut gw = vec![0.0; self.weights.len()];
                let mut gb = vec![0.0; out_channels];
                let mut gx = if need_input_grad {
                    vec![0.0; n * in_len]
                } else {
                    Vec::new()
                };
                let mut dcols = vec![0.0; cols_len];
                for s in 0..n {
                    let gy = &grad_out[s * out_len..(s + 1) * out_len];
                    let cols = &all_cols[s * cols_len..(s + 1) * cols_len];
                    for (oc, p) in gy.chunks(plane).enumerate() {
                        gb[oc] += p.iter().sum::<f64>();
                    }
                    gemm(out_channels, plane, rows, gy, false, cols, true, &mut gw, 1.0);
                    if need_input_grad {
                        gemm(
                            rows,
                            out_channels,
                            plane,
                            &self.weights,
                            true,
                            gy,
                            false,
                            &mut dcols,
                            0.0,
                        );
                        col2im(
                            &dcols,
                            c,
                            h,
                            w,
                            kernel_size,
                            stride,
                            oh,
                            ow,
                            &mut gx[s * in_len..(s + 1) * in_len],
                        );
                    }
                }
                (
                    gx,
                    Some(LayerGrad {
                        weights: gw,
                        bias: gb,
                    }),
                )
            }
            (LayerSpec::MaxPool2x2, Saved::Argmax(argmax)) => {
                let mut gx = vec![0.0; n * self.in_len()];
                for (&idx, g) in argmax.iter().zip(grad_out) {
                    gx[idx] += g;
                }
                (gx, None)
            }
            (LayerSpec::Relu, Saved::Input(x)) => {
                let gx = grad_out
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                (gx, None)
            }
            (LayerSpec::Dropout { .. }, Saved::Mask(mask)) => {
                (grad_out.iter().zip(mask).map(|(g, m)| g * m).collect(), None)
            }
            (LayerSpec::Dropout { .. }, Saved::None) => (grad_out.to_vec(), None),
            (LayerSpec::Softmax, Saved::Output(p)) => {
                let k = self.out_len();
                let mut gx = vec![0.0; grad_out.len()];
                for ((gxr, gr), pr) in gx.chunks_mut(k).zip(grad_out.chunks(k)).zip(p.chunks(k)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(g, p)| g * p).sum();
                    for j in 0..k {
                        gxr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                (gx, None)
            }
            (spec, _) => unreachable!("{} backward without saved forward state", spec.kind()),
        }
    }
}

/// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`; the
/// transpose flags say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the slice lengths above cover every index reachable through the
    // given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let plane = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let src = ch * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        dst[oy * ow + ox] = x[src + ox * stride];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let plane = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let dst = ch * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        gx[dst + ox * stride] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
