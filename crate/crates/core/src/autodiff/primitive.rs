//! Forward and backward rules for every primitive.

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output keeps the input's spatial size (odd kernels only).
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// The differentiable operations the engine can record.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    /// `[B, N] + [N]`.
    AddRowBias,
    /// `x[B, C, H, W] * scale[C] + shift[C]`.
    ChannelAffine,
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    /// Stride-1 convolution of `[B, C, H, W]` with `[O, C, KH, KW]` and an
    /// optional `[O]` bias.
    Conv2d { padding: Padding },
    MaxPool2d { size: usize },
    AvgPool2d { size: usize },
    Relu,
    /// Row-wise softmax over the last axis of a rank-2 tensor.
    Softmax,
    Softplus,
    Log,
    Exp,
    Sqrt,
    Sum,
    Mean,
    /// Concatenation of rank-2 tensors along axis 1.
    Concat,
    /// Row-wise Euclidean norm, `[B, K] -> [B]`.
    L2NormRows,
    ScalarMul(f64),
    ScalarAdd(f64),
    Clamp { lo: f64, hi: f64 },
    /// Gathers leading-axis slices.
    SelectRows(Vec<usize>),
    /// `out[i] = x[i, idx[i]]` for a rank-2 `x`.
    GatherCols(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddRowBias => "add_row_bias",
            Primitive::ChannelAffine => "channel_affine",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::AvgPool2d { .. } => "avgpool2d",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::Softplus => "softplus",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sqrt => "sqrt",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::L2NormRows => "l2_norm",
            Primitive::ScalarMul(_) => "scalar_mul",
            Primitive::ScalarAdd(_) => "scalar_add",
            Primitive::Clamp { .. } => "clamp",
            Primitive::SelectRows(_) => "select_rows",
            Primitive::GatherCols(_) => "gather_cols",
        }
    }
}

/// Extra state a forward pass leaves behind for its backward rule.
#[derive(Clone, Debug, Default)]
pub(crate) enum Aux {
    #[default]
    None,
    Argmax(Vec<usize>),
    Conv(ConvGeom),
}

fn arity(p: &Primitive, n: usize) -> Result<()> {
    let ok = match p {
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::Div
        | Primitive::AddRowBias
        | Primitive::MatMul => n == 2,
        Primitive::ChannelAffine => n == 3,
        Primitive::Conv2d { .. } => n == 2 || n == 3,
        Primitive::Concat => n >= 1,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::dim(p.name(), format!("wrong number of inputs: {n}")))
    }
}

fn same_shape(p: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            p.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank(p: &Primitive, t: &Tensor, r: usize) -> Result<()> {
    if t.rank() != r {
        return Err(Error::dim(
            p.name(),
            format!("expected rank {r}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn shaped(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel output matches shape")
}

pub(crate) fn forward(p: &Primitive, xs: &[&Tensor]) -> Result<(Tensor, Aux)> {
    arity(p, xs.len())?;
    let x = xs[0];
    let out = match p {
        Primitive::Add => {
            same_shape(p, x, xs[1])?;
            zip(x, xs[1], |a, b| a + b)
        }
        Primitive::Sub => {
            same_shape(p, x, xs[1])?;
            zip(x, xs[1], |a, b| a - b)
        }
        Primitive::Mul => {
            same_shape(p, x, xs[1])?;
            zip(x, xs[1], |a, b| a * b)
        }
        Primitive::Div => {
            same_shape(p, x, xs[1])?;
            if xs[1].data().iter().any(|&d| d == 0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
            zip(x, xs[1], |a, b| a / b)
        }
        Primitive::AddRowBias => {
            rank(p, x, 2)?;
            let b = xs[1];
            if b.shape() != [x.shape()[1]] {
                return Err(Error::dim(
                    p.name(),
                    format!("{:?} + {:?}", x.shape(), b.shape()),
                ));
            }
            let n = x.shape()[1];
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[i % n])
                .collect();
            shaped(x.shape().to_vec(), data)
        }
        Primitive::ChannelAffine => {
            rank(p, x, 4)?;
            let c = x.shape()[1];
            if xs[1].shape() != [c] || xs[2].shape() != [c] {
                return Err(Error::dim(
                    p.name(),
                    format!("{:?} with {:?}, {:?}", x.shape(), xs[1].shape(), xs[2].shape()),
                ));
            }
            let plane = x.shape()[2] * x.shape()[3];
            let (s, t) = (xs[1].data(), xs[2].data());
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / plane) % c;
                    v * s[ch] + t[ch]
                })
                .collect();
            shaped(x.shape().to_vec(), data)
        }
        Primitive::MatMul => {
            let b = xs[1];
            if x.rank() != 2 || b.rank() != 2 || x.shape()[1] != b.shape()[0] {
                return Err(Error::dim(
                    p.name(),
                    format!("{:?} x {:?}", x.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            shaped(vec![m, n], kernels::matmul(x.data(), b.data(), m, k, n))
        }
        Primitive::Transpose => {
            rank(p, x, 2)?;
            let (r, c) = (x.shape()[0], x.shape()[1]);
            shaped(vec![c, r], kernels::transpose(x.data(), r, c))
        }
        Primitive::Reshape(shape) => x.clone().reshape(shape.clone())?,
        Primitive::Conv2d { padding } => {
            let w = xs[1];
            if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
                return Err(Error::dim(
                    p.name(),
                    format!("input {:?} with kernel {:?}", x.shape(), w.shape()),
                ));
            }
            let (kh, kw) = (w.shape()[2], w.shape()[3]);
            let (pad_h, pad_w) = match padding {
                Padding::Valid => (0, 0),
                Padding::Same => {
                    if kh % 2 == 0 || kw % 2 == 0 {
                        return Err(Error::dim(
                            p.name(),
                            format!("same padding needs an odd kernel, got {kh}x{kw}"),
                        ));
                    }
                    (kh / 2, kw / 2)
                }
            };
            let geom = ConvGeom {
                batch: x.shape()[0],
                in_ch: x.shape()[1],
                h: x.shape()[2],
                w: x.shape()[3],
                out_ch: w.shape()[0],
                kh,
                kw,
                pad_h,
                pad_w,
            };
            if geom.h + 2 * pad_h < kh || geom.w + 2 * pad_w < kw {
                return Err(Error::dim(
                    p.name(),
                    format!("kernel {kh}x{kw} larger than input {:?}", x.shape()),
                ));
            }
            let bias = match xs.get(2) {
                Some(b) if b.shape() != [geom.out_ch] => {
                    return Err(Error::dim(
                        p.name(),
                        format!("bias {:?} for {} output channels", b.shape(), geom.out_ch),
                    ));
                }
                Some(b) => Some(b.data()),
                None => None,
            };
            let y = kernels::conv2d(x.data(), w.data(), bias, &geom);
            let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
            return Ok((shaped(shape, y), Aux::Conv(geom)));
        }
        Primitive::MaxPool2d { size } | Primitive::AvgPool2d { size } => {
            rank(p, x, 4)?;
            let s = x.shape();
            if *size == 0 || s[2] < *size || s[3] < *size {
                return Err(Error::dim(
                    p.name(),
                    format!("window {size} on input {s:?}"),
                ));
            }
            let planes = s[0] * s[1];
            let shape = vec![s[0], s[1], s[2] / size, s[3] / size];
            if matches!(p, Primitive::MaxPool2d { .. }) {
                let (y, arg) = kernels::maxpool2d(x.data(), planes, s[2], s[3], *size);
                return Ok((shaped(shape, y), Aux::Argmax(arg)));
            }
            shaped(shape, kernels::avgpool2d(x.data(), planes, s[2], s[3], *size))
        }
        Primitive::Relu => x.map(|v| v.max(0.0)),
        Primitive::Softmax => {
            rank(p, x, 2)?;
            let k = x.shape()[1];
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(k) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                data.extend(e.into_iter().map(|v| v / s));
            }
            shaped(x.shape().to_vec(), data)
        }
        Primitive::Softplus => x.map(kernels::softplus),
        Primitive::Log => {
            if let Some(v) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::domain("log", format!("non-positive argument {v}")));
            }
            x.map(f64::ln)
        }
        Primitive::Exp => x.map(f64::exp),
        Primitive::Sqrt => {
            if let Some(v) = x.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                return Err(Error::domain("sqrt", format!("negative argument {v}")));
            }
            x.map(f64::sqrt)
        }
        Primitive::Sum => Tensor::scalar(x.sum()),
        Primitive::Mean => Tensor::scalar(x.sum() / x.len() as f64),
        Primitive::Concat => {
            for t in xs {
                if t.rank() != 2 || t.shape()[0] != x.shape()[0] {
                    return Err(Error::dim(
                        p.name(),
                        format!("cannot join {:?} with {:?}", x.shape(), t.shape()),
                    ));
                }
            }
            let rows = x.shape()[0];
            let width: usize = xs.iter().map(|t| t.shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for t in xs {
                    data.extend_from_slice(t.row(r));
                }
            }
            shaped(vec![rows, width], data)
        }
        Primitive::L2NormRows => {
            rank(p, x, 2)?;
            let k = x.shape()[1];
            let data = x
                .data()
                .chunks(k)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            shaped(vec![x.shape()[0]], data)
        }
        Primitive::ScalarMul(c) => x.map(|v| v * c),
        Primitive::ScalarAdd(c) => x.map(|v| v + c),
        Primitive::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::domain("clamp", format!("empty interval [{lo}, {hi}]")));
            }
            x.map(|v| v.clamp(*lo, *hi))
        }
        Primitive::SelectRows(idx) => {
            if let Some(&i) = idx.iter().find(|&&i| i >= x.shape()[0]) {
                return Err(Error::dim(
                    p.name(),
                    format!("index {i} out of range for {:?}", x.shape()),
                ));
            }
            if idx.is_empty() {
                return Err(Error::dim(p.name(), "empty index list"));
            }
            x.select(idx)
        }
        Primitive::GatherCols(idx) => {
            rank(p, x, 2)?;
            let (b, k) = (x.shape()[0], x.shape()[1]);
            if idx.len() != b || idx.iter().any(|&j| j >= k) {
                return Err(Error::dim(
                    p.name(),
                    format!("{} column indices for {:?}", idx.len(), x.shape()),
                ));
            }
            let data = idx.iter().enumerate().map(|(i, &j)| x.data()[i * k + j]).collect();
            shaped(vec![b], data)
        }
    };
    Ok((out, Aux::None))
}

/// Vector-Jacobian product: gradients for each input given the output gradient.
pub(crate) fn backward(
    p: &Primitive,
    aux: &Aux,
    xs: &[&Tensor],
    y: &Tensor,
    gy: &Tensor,
) -> Vec<Tensor> {
    let x = xs[0];
    let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .zip(gy.data())
            .map(|((&xv, &yv), &g)| f(xv, yv, g))
            .collect();
        shaped(x.shape().to_vec(), data)
    };
    match p {
        Primitive::Add => vec![gy.clone(), gy.clone()],
        Primitive::Sub => vec![gy.clone(), gy.map(|g| -g)],
        Primitive::Mul => vec![zip(gy, xs[1], |g, b| g * b), zip(gy, x, |g, a| g * a)],
        Primitive::Div => {
            let b = xs[1];
            let ga = zip(gy, b, |g, bv| g / bv);
            let gb_data = gy
                .data()
                .iter()
                .zip(x.data())
                .zip(b.data())
                .map(|((&g, &a), &bv)| -g * a / (bv * bv))
                .collect();
            vec![ga, shaped(b.shape().to_vec(), gb_data)]
        }
        Primitive::AddRowBias => {
            let n = x.shape()[1];
            let mut gb = vec![0.0; n];
            for row in gy.data().chunks(n) {
                for (acc, &g) in gb.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            vec![gy.clone(), Tensor::vector(gb)]
        }
        Primitive::ChannelAffine => {
            let c = x.shape()[1];
            let plane = x.shape()[2] * x.shape()[3];
            let s = xs[1].data();
            let mut gs = vec![0.0; c];
            let mut gt = vec![0.0; c];
            let mut gx = Vec::with_capacity(x.len());
            for (i, (&g, &xv)) in gy.data().iter().zip(x.data()).enumerate() {
                let ch = (i / plane) % c;
                gs[ch] += g * xv;
                gt[ch] += g;
                gx.push(g * s[ch]);
            }
            vec![
                shaped(x.shape().to_vec(), gx),
                Tensor::vector(gs),
                Tensor::vector(gt),
            ]
        }
        Primitive::MatMul => {
            let b = xs[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            vec![
                shaped(vec![m, k], kernels::matmul_nt(gy.data(), b.data(), m, n, k)),
                shaped(vec![k, n], kernels::matmul_tn(x.data(), gy.data(), m, k, n)),
            ]
        }
        Primitive::Transpose => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            vec![shaped(vec![r, c], kernels::transpose(gy.data(), c, r))]
        }
        Primitive::Reshape(_) => vec![shaped(x.shape().to_vec(), gy.data().to_vec())],
        Primitive::Conv2d { .. } => {
            let Aux::Conv(geom) = aux else {
                unreachable!("conv2d node without geometry")
            };
            let w = xs[1];
            let (gx, gw, gb) = kernels::conv2d_backward(x.data(), w.data(), gy.data(), geom);
            let mut out = vec![shaped(x.shape().to_vec(), gx), shaped(w.shape().to_vec(), gw)];
            if xs.len() == 3 {
                out.push(Tensor::vector(gb));
            }
            out
        }
        Primitive::MaxPool2d { .. } => {
            let Aux::Argmax(arg) = aux else {
                unreachable!("maxpool node without argmax")
            };
            let mut gx = vec![0.0; x.len()];
            for (&i, &g) in arg.iter().zip(gy.data()) {
                gx[i] += g;
            }
            vec![shaped(x.shape().to_vec(), gx)]
        }
        Primitive::AvgPool2d { size } => {
            let s = x.shape();
            let gx = kernels::avgpool2d_backward(gy.data(), s[0] * s[1], s[2], s[3], *size);
            vec![shaped(s.to_vec(), gx)]
        }
        Primitive::Relu => vec![elementwise(&|xv, _, g| if xv > 0.0 { g } else { 0.0 })],
        Primitive::Softmax => {
            let k = x.shape()[1];
            let mut gx = Vec::with_capacity(x.len());
            for (yr, gr) in y.data().chunks(k).zip(gy.data().chunks(k)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(&yv, &g)| yv * (g - dot)));
            }
            vec![shaped(x.shape().to_vec(), gx)]
        }
        Primitive::Softplus => vec![elementwise(&|xv, _, g| g * kernels::sigmoid(xv))],
        Primitive::Log => vec![elementwise(&|xv, _, g| g / xv)],
        Primitive::Exp => vec![elementwise(&|_, yv, g| g * yv)],
        Primitive::Sqrt => vec![elementwise(&|_, yv, g| if yv > 0.0 { g / (2.0 * yv) } else { 0.0 })],
        Primitive::Sum => vec![Tensor::full(x.shape(), gy.data()[0])],
        Primitive::Mean => vec![Tensor::full(x.shape(), gy.data()[0] / x.len() as f64)],
        Primitive::Concat => {
            let rows = x.shape()[0];
            let width = y.shape()[1];
            let mut offset = 0;
            xs.iter()
                .map(|t| {
                    let w = t.shape()[1];
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let start = r * width + offset;
                        g.extend_from_slice(&gy.data()[start..start + w]);
                    }
                    offset += w;
                    shaped(t.shape().to_vec(), g)
                })
                .collect()
        }
        Primitive::L2NormRows => {
            let k = x.shape()[1];
            let mut gx = Vec::with_capacity(x.len());
            for ((row, &n), &g) in x.data().chunks(k).zip(y.data()).zip(gy.data()) {
                if n > 0.0 {
                    gx.extend(row.iter().map(|&v| g * v / n));
                } else {
                    gx.extend(std::iter::repeat_n(0.0, k));
                }
            }
            vec![shaped(x.shape().to_vec(), gx)]
        }
        Primitive::ScalarMul(c) => vec![gy.map(|g| g * c)],
        Primitive::ScalarAdd(_) => vec![gy.clone()],
        Primitive::Clamp { lo, hi } => {
            vec![elementwise(&|xv, _, g| if xv >= *lo && xv <= *hi { g } else { 0.0 })]
        }
        Primitive::SelectRows(idx) => {
            let stride = x.row_len();
            let mut gx = vec![0.0; x.len()];
            for (r, &i) in idx.iter().enumerate() {
                let src = &gy.data()[r * stride..(r + 1) * stride];
                for (acc, &g) in gx[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                    *acc += g;
                }
            }
            vec![shaped(x.shape().to_vec(), gx)]
        }
        Primitive::GatherCols(idx) => {
            let k = x.shape()[1];
            let mut gx = vec![0.0; x.len()];
            for (i, (&j, &g)) in idx.iter().zip(gy.data()).enumerate() {
                gx[i * k + j] += g;
            }
            vec![shaped(x.shape().to_vec(), gx)]
        }
    }
}
