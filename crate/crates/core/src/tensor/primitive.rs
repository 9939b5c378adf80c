use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Result};
use crate::smg;

/// The closed set of differentiable operations the networks are built from.
///
/// Convolution weights are `(c_out, c_in, k, k)`; transposed-convolution
/// weights are `(c_in, c_out, k, k)`. Biases are optional trailing inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[x (C,H,W), weight, bias?]`, zero padding.
    Conv2d { stride: usize, padding: usize },
    /// `[x (C,H,W), weight, bias?]`.
    ConvTranspose2d { stride: usize, padding: usize },
    /// `[x (any shape, flattened), weight (out, in), bias? (out)]`.
    FullyConnected,
    Relu,
    Sigmoid,
    Exp,
    /// Natural log; the caller guarantees positive inputs.
    Ln,
    Abs,
    /// Per-channel max over adaptive bins, `(C,H,W) -> (C,out_h,out_w)`.
    AdaptiveMaxPool { out_h: usize, out_w: usize },
    Add,
    Sub,
    Mul,
    /// Concatenates any number of `(C_i,H,W)` inputs along channels.
    ConcatChannels,
    Reshape { shape: Vec<usize> },
    /// `[x (C,H,W), m (1,H,W)]`: multiplies every channel by the plane `m`.
    BroadcastScale,
    /// Elementwise maximum over any number of same-shape inputs.
    Maximum,
    /// `scale · x + shift`.
    Affine { scale: f64, shift: f64 },
    Sum,
    Mean,
    /// `[logits, targets]`: mean binary cross-entropy, numerically stable.
    /// No gradient flows to the targets.
    BceWithLogits,
    /// Elementwise b-bit quantize/dequantize of values in `[0,1]`; the backward
    /// pass is the identity (straight-through).
    QuantizeSte { bits: u8 },
    /// Dense mask `(1,H,W)` to its top-k, b-bit dequantized sparse form
    /// scattered back to `(1,H,W)` (zeros off-support). With
    /// `straight_through` the whole post-processing is the identity in the
    /// backward pass; without it no gradient reaches the input.
    SparsifyQuantize {
        alpha: f64,
        bits: u8,
        straight_through: bool,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::ConvTranspose2d { .. } => "conv_transpose2d",
            Primitive::FullyConnected => "fully_connected",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Ln => "ln",
            Primitive::Abs => "abs",
            Primitive::AdaptiveMaxPool { .. } => "adaptive_max_pool",
            Primitive::Add => "elementwise_add",
            Primitive::Sub => "elementwise_sub",
            Primitive::Mul => "elementwise_mul",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Reshape { .. } => "reshape",
            Primitive::BroadcastScale => "broadcast_scale",
            Primitive::Maximum => "maximum",
            Primitive::Affine { .. } => "affine",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::BceWithLogits => "bce_with_logits",
            Primitive::QuantizeSte { .. } => "quantize_ste",
            Primitive::SparsifyQuantize { .. } => "sparsify_quantize",
        }
    }
}

fn arity(p: &Primitive, inputs: &[&Tensor], lo: usize, hi: usize) -> Result<()> {
    if inputs.len() < lo || inputs.len() > hi {
        return shape_err(
            p.name(),
            format!("expected {lo}..={hi} inputs, got {}", inputs.len()),
        );
    }
    Ok(())
}

fn same_shape(p: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(
            p.name(),
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        );
    }
    Ok(())
}

fn chw(p: &Primitive, t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.chw() {
        Some(d) => Ok(d),
        None => shape_err(p.name(), format!("{what} must be (C,H,W), got {:?}", t.shape())),
    }
}

/// Validated geometry for `Conv2d`: returns `(c_out, geom)`.
fn conv_geom(p: &Primitive, x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (c, h, wd) = chw(p, x, "input")?;
    let [c_out, c_in, kh, kw] = w.shape()[..] else {
        return shape_err(p.name(), format!("weight must be rank 4, got {:?}", w.shape()));
    };
    if c_in != c || kh != kw {
        return shape_err(
            p.name(),
            format!("weight {:?} incompatible with input channels {c}", w.shape()),
        );
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return shape_err(p.name(), format!("bias {:?} must be [{c_out}]", b.shape()));
        }
    }
    let (Some(out_h), Some(out_w)) = (
        ConvGeom::conv_out(h, kh, stride, pad),
        ConvGeom::conv_out(wd, kh, stride, pad),
    ) else {
        return shape_err(
            p.name(),
            format!("kernel {kh} stride {stride} pad {pad} does not fit {h}x{wd}"),
        );
    };
    Ok((
        c_out,
        ConvGeom {
            channels: c,
            h,
            w: wd,
            kernel: kh,
            stride,
            pad,
            out_h,
            out_w,
        },
    ))
}

/// Validated geometry for `ConvTranspose2d`: returns `(c_in, geom)` where the
/// geometry describes the adjoint convolution out→in.
fn conv_t_geom(p: &Primitive, x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (c, h, wd) = chw(p, x, "input")?;
    let [c_in, c_out, kh, kw] = w.shape()[..] else {
        return shape_err(p.name(), format!("weight must be rank 4, got {:?}", w.shape()));
    };
    if c_in != c || kh != kw {
        return shape_err(
            p.name(),
            format!("weight {:?} incompatible with input channels {c}", w.shape()),
        );
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return shape_err(p.name(), format!("bias {:?} must be [{c_out}]", b.shape()));
        }
    }
    let (Some(oh), Some(ow)) = (
        ConvGeom::transpose_out(h, kh, stride, pad),
        ConvGeom::transpose_out(wd, kh, stride, pad),
    ) else {
        return shape_err(p.name(), format!("kernel {kh} stride {stride} pad {pad} invalid"));
    };
    let g = ConvGeom {
        channels: c_out,
        h: oh,
        w: ow,
        kernel: kh,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    };
    if ConvGeom::conv_out(oh, kh, stride, pad) != Some(h) || ConvGeom::conv_out(ow, kh, stride, pad) != Some(wd) {
        return shape_err(p.name(), format!("geometry for {h}x{wd} is not invertible"));
    }
    Ok((c_in, g))
}

fn pool_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Argmax cell index for every output cell of an adaptive max pool.
fn pool_argmax(x: &Tensor, out_h: usize, out_w: usize) -> Vec<usize> {
    let (c, h, w) = x.chw().expect("validated");
    let rows = pool_bins(h, out_h);
    let cols = pool_bins(w, out_w);
    let d = x.data();
    let mut idx = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut best = ch * h * w + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = ch * h * w + y * w + xx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Evaluates one primitive on concrete tensors.
pub fn apply_primitive(p: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    use Primitive::*;
    match p {
        Conv2d { stride, padding } => {
            arity(p, inputs, 2, 3)?;
            let (c_out, g) = conv_geom(p, inputs[0], inputs[1], inputs.get(2).copied(), *stride, *padding)?;
            let out = kernels::conv2d(
                inputs[0].data(),
                inputs[1].data(),
                inputs.get(2).map(|b| b.data()),
                c_out,
                &g,
            );
            Tensor::new([c_out, g.out_h, g.out_w], out)
        }
        ConvTranspose2d { stride, padding } => {
            arity(p, inputs, 2, 3)?;
            let (c_in, g) = conv_t_geom(p, inputs[0], inputs[1], inputs.get(2).copied(), *stride, *padding)?;
            let out = kernels::conv_transpose2d(
                inputs[0].data(),
                inputs[1].data(),
                inputs.get(2).map(|b| b.data()),
                c_in,
                &g,
            );
            Tensor::new([g.channels, g.h, g.w], out)
        }
        FullyConnected => {
            arity(p, inputs, 2, 3)?;
            let (x, w) = (inputs[0], inputs[1]);
            let [out, inp] = w.shape()[..] else {
                return shape_err(p.name(), format!("weight must be rank 2, got {:?}", w.shape()));
            };
            if inp != x.numel() {
                return shape_err(
                    p.name(),
                    format!("weight {:?} expects {inp} inputs, got {}", w.shape(), x.numel()),
                );
            }
            let mut y = match inputs.get(2) {
                Some(b) if b.shape() != [out] => {
                    return shape_err(p.name(), format!("bias {:?} must be [{out}]", b.shape()))
                }
                Some(b) => b.data().to_vec(),
                None => vec![0.0; out],
            };
            kernels::gemm(out, inp, 1, w.data(), false, x.data(), false, &mut y, true);
            Tensor::new([out], y)
        }
        Relu => unary(p, inputs, |x| x.max(0.0)),
        Sigmoid => unary(p, inputs, sigmoid),
        Exp => unary(p, inputs, f64::exp),
        Ln => unary(p, inputs, f64::ln),
        Abs => unary(p, inputs, f64::abs),
        AdaptiveMaxPool { out_h, out_w } => {
            arity(p, inputs, 1, 1)?;
            let (c, _, _) = chw(p, inputs[0], "input")?;
            if *out_h == 0 || *out_w == 0 {
                return shape_err(p.name(), "target size must be positive");
            }
            let idx = pool_argmax(inputs[0], *out_h, *out_w);
            let d = inputs[0].data();
            Tensor::new([c, *out_h, *out_w], idx.iter().map(|&i| d[i]).collect())
        }
        Add => binary(p, inputs, |a, b| a + b),
        Sub => binary(p, inputs, |a, b| a - b),
        Mul => binary(p, inputs, |a, b| a * b),
        ConcatChannels => {
            if inputs.is_empty() {
                return shape_err(p.name(), "needs at least one input");
            }
            let (_, h, w) = chw(p, inputs[0], "input 0")?;
            let mut c_total = 0;
            let mut data = Vec::new();
            for (i, t) in inputs.iter().enumerate() {
                let (c, hh, ww) = chw(p, t, "input")?;
                if (hh, ww) != (h, w) {
                    return shape_err(
                        p.name(),
                        format!("input {i} spatial {hh}x{ww} differs from {h}x{w}"),
                    );
                }
                c_total += c;
                data.extend_from_slice(t.data());
            }
            Tensor::new([c_total, h, w], data)
        }
        Reshape { shape } => {
            arity(p, inputs, 1, 1)?;
            inputs[0].clone().reshape(shape.clone())
        }
        BroadcastScale => {
            arity(p, inputs, 2, 2)?;
            let (c, h, w) = chw(p, inputs[0], "input")?;
            if inputs[1].shape() != [1, h, w] {
                return shape_err(
                    p.name(),
                    format!("scale plane {:?} must be [1, {h}, {w}]", inputs[1].shape()),
                );
            }
            let m = inputs[1].data();
            let plane = h * w;
            let mut out = inputs[0].data().to_vec();
            for ch in 0..c {
                for (v, s) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(m) {
                    *v *= s;
                }
            }
            Tensor::new([c, h, w], out)
        }
        Maximum => {
            if inputs.is_empty() {
                return shape_err(p.name(), "needs at least one input");
            }
            let mut out = inputs[0].clone();
            for t in &inputs[1..] {
                same_shape(p, &out, t)?;
                for (a, &b) in out.data_mut().iter_mut().zip(t.data()) {
                    if b > *a {
                        *a = b;
                    }
                }
            }
            Ok(out)
        }
        Affine { scale, shift } => unary(p, inputs, |x| scale * x + shift),
        Sum => {
            arity(p, inputs, 1, 1)?;
            Ok(Tensor::scalar(inputs[0].sum()))
        }
        Mean => {
            arity(p, inputs, 1, 1)?;
            Ok(Tensor::scalar(inputs[0].sum() / inputs[0].numel() as f64))
        }
        BceWithLogits => {
            arity(p, inputs, 2, 2)?;
            same_shape(p, inputs[0], inputs[1])?;
            let total: f64 = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
                .sum();
            Ok(Tensor::scalar(total / inputs[0].numel() as f64))
        }
        QuantizeSte { bits } => {
            arity(p, inputs, 1, 1)?;
            let bits = smg::BitWidth::new(*bits)?;
            Ok(inputs[0].map(|v| bits.dequantize_code(bits.quantize_value(v))))
        }
        SparsifyQuantize { alpha, bits, .. } => {
            arity(p, inputs, 1, 1)?;
            let (c, h, w) = chw(p, inputs[0], "mask")?;
            if c != 1 {
                return shape_err(p.name(), format!("mask must have 1 channel, got {c}"));
            }
            let dense = smg::DenseMask::new(h, w, inputs[0].data().to_vec())?;
            let q = smg::quantize(&smg::topk_filter(&dense, *alpha)?, *bits)?;
            Ok(smg::dequantize(&q).to_dense_tensor())
        }
    }
}

fn unary(p: &Primitive, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<Tensor> {
    arity(p, inputs, 1, 1)?;
    Ok(inputs[0].map(f))
}

fn binary(p: &Primitive, inputs: &[&Tensor], f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    arity(p, inputs, 2, 2)?;
    same_shape(p, inputs[0], inputs[1])?;
    Ok(inputs[0].zip_map(inputs[1], f))
}

/// Vector-Jacobian product: gradients of the loss w.r.t. each input, given the
/// gradient w.r.t. the output. `None` means the input receives no gradient.
pub(crate) fn vjp(p: &Primitive, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
    use Primitive::*;
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).map(Some);
    Ok(match p {
        Conv2d { stride, padding } => {
            let (c_out, g) = conv_geom(p, inputs[0], inputs[1], inputs.get(2).copied(), *stride, *padding)?;
            let (dx, dw, db) = kernels::conv2d_backward(inputs[0].data(), inputs[1].data(), grad.data(), c_out, &g);
            let mut out = vec![like(inputs[0], dx)?, like(inputs[1], dw)?];
            if inputs.len() == 3 {
                out.push(like(inputs[2], db)?);
            }
            out
        }
        ConvTranspose2d { stride, padding } => {
            let (c_in, g) = conv_t_geom(p, inputs[0], inputs[1], inputs.get(2).copied(), *stride, *padding)?;
            let (dx, dw, db) =
                kernels::conv_transpose2d_backward(inputs[0].data(), inputs[1].data(), grad.data(), c_in, &g);
            let mut out = vec![like(inputs[0], dx)?, like(inputs[1], dw)?];
            if inputs.len() == 3 {
                out.push(like(inputs[2], db)?);
            }
            out
        }
        FullyConnected => {
            let (x, w) = (inputs[0], inputs[1]);
            let (out_n, in_n) = (w.shape()[0], w.shape()[1]);
            let mut dx = vec![0.0; in_n];
            kernels::gemm(in_n, out_n, 1, w.data(), true, grad.data(), false, &mut dx, false);
            let mut dw = vec![0.0; out_n * in_n];
            kernels::gemm(out_n, 1, in_n, grad.data(), false, x.data(), false, &mut dw, false);
            let mut out = vec![like(x, dx)?, like(w, dw)?];
            if inputs.len() == 3 {
                out.push(Some(grad.clone()));
            }
            out
        }
        Relu => vec![Some(inputs[0].zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Sigmoid => vec![Some(output.zip_map(grad, |y, g| g * y * (1.0 - y)))],
        Exp => vec![Some(output.zip_map(grad, |y, g| g * y))],
        Ln => vec![Some(inputs[0].zip_map(grad, |x, g| g / x))],
        Abs => vec![Some(inputs[0].zip_map(grad, |x, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        }))],
        AdaptiveMaxPool { out_h, out_w } => {
            let idx = pool_argmax(inputs[0], *out_h, *out_w);
            let mut dx = vec![0.0; inputs[0].numel()];
            for (&i, &g) in idx.iter().zip(grad.data()) {
                dx[i] += g;
            }
            vec![like(inputs[0], dx)?]
        }
        Add => vec![Some(grad.clone()), Some(grad.clone())],
        Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
        Mul => vec![
            Some(inputs[1].zip_map(grad, |b, g| b * g)),
            Some(inputs[0].zip_map(grad, |a, g| a * g)),
        ],
        ConcatChannels => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for t in inputs {
                let n = t.numel();
                out.push(like(t, grad.data()[offset..offset + n].to_vec())?);
                offset += n;
            }
            out
        }
        Reshape { .. } => vec![like(inputs[0], grad.data().to_vec())?],
        BroadcastScale => {
            let (c, h, w) = inputs[0].chw().expect("validated");
            let plane = h * w;
            let m = inputs[1].data();
            let x = inputs[0].data();
            let g = grad.data();
            let mut dx = vec![0.0; c * plane];
            let mut dm = vec![0.0; plane];
            for ch in 0..c {
                for i in 0..plane {
                    let j = ch * plane + i;
                    dx[j] = g[j] * m[i];
                    dm[i] += g[j] * x[j];
                }
            }
            vec![like(inputs[0], dx)?, like(inputs[1], dm)?]
        }
        Maximum => {
            // Ties route the gradient to the earliest input.
            let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
            for (i, &g) in grad.data().iter().enumerate() {
                let mut best = 0;
                for (k, t) in inputs.iter().enumerate().skip(1) {
                    if t.data()[i] > inputs[best].data()[i] {
                        best = k;
                    }
                }
                grads[best][i] = g;
            }
            inputs
                .iter()
                .zip(grads)
                .map(|(t, d)| like(t, d))
                .collect::<Result<_>>()?
        }
        Affine { scale, .. } => vec![Some(grad.map(|g| g * scale))],
        Sum => {
            let g = grad.item();
            vec![Some(inputs[0].map(|_| g))]
        }
        Mean => {
            let g = grad.item() / inputs[0].numel() as f64;
            vec![Some(inputs[0].map(|_| g))]
        }
        BceWithLogits => {
            let scale = grad.item() / inputs[0].numel() as f64;
            vec![
                Some(inputs[0].zip_map(inputs[1], |x, t| scale * (sigmoid(x) - t))),
                None,
            ]
        }
        QuantizeSte { .. } => vec![Some(grad.clone())],
        SparsifyQuantize {
            straight_through, ..
        } => {
            if *straight_through {
                vec![Some(grad.clone())]
            } else {
                vec![None]
            }
        }
    })
}
