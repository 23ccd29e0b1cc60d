//! Forward operations and their gradient rules.
//!
//! Shapes follow two layouts: per-image `[C, H, W]` and batched
//! `[N, C, H, W]`. Ops that accept both dispatch on rank. Everything here
//! records onto the graph described in [`crate::tensor`].

use crate::error::{Error, Result};
use crate::tensor::{BackCtx, Tensor};

#[inline]
fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx| {
            vec![Some(ctx.out_grad.to_vec()), Some(ctx.out_grad.to_vec())]
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx| {
            vec![
                Some(ctx.out_grad.to_vec()),
                Some(ctx.out_grad.iter().map(|g| -g).collect()),
            ]
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx| {
            let a = ctx.parents[0].data();
            let b = ctx.parents[1].data();
            vec![
                Some(ctx.out_grad.iter().zip(b).map(|(g, y)| g * y).collect()),
                Some(ctx.out_grad.iter().zip(a).map(|(g, x)| g * x).collect()),
            ]
        }),
    ))
}

/// `a * x + b`, elementwise with scalar coefficients.
pub fn affine(x: &Tensor, a: f64, b: f64) -> Tensor {
    let data = x.data().iter().map(|v| a * v + b).collect();
    Tensor::from_op(
        "affine",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| vec![Some(ctx.out_grad.iter().map(|g| a * g).collect())]),
    )
}

/// Coefficient-weighted sum of same-shape tensors.
pub fn weighted_sum(inputs: &[&Tensor], coefs: &[f64]) -> Result<Tensor> {
    assert_eq!(inputs.len(), coefs.len());
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("weighted_sum", "empty input list"))?;
    let mut data = vec![0.0; first.numel()];
    for (t, c) in inputs.iter().zip(coefs) {
        same_shape("weighted_sum", first, t)?;
        for (d, v) in data.iter_mut().zip(t.data()) {
            *d += c * v;
        }
    }
    let coefs = coefs.to_vec();
    Ok(Tensor::from_op(
        "weighted_sum",
        first.shape().to_vec(),
        data,
        inputs.iter().map(|t| (*t).clone()).collect(),
        Box::new(move |ctx: &BackCtx| {
            coefs
                .iter()
                .map(|c| Some(ctx.out_grad.iter().map(|g| c * g).collect()))
                .collect()
        }),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            vec![Some(
                ctx.out_grad
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )]
        }),
    )
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|ctx: &BackCtx| {
            vec![Some(
                ctx.out_grad
                    .iter()
                    .zip(ctx.out_data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
            )]
        }),
    )
}

/// Elementwise square root; inputs must be non-negative.
pub fn sqrt(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
        return Err(Error::invalid("sqrt", format!("negative input {v}")));
    }
    let data = x.data().iter().map(|v| v.sqrt()).collect();
    Ok(Tensor::from_op(
        "sqrt",
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(|ctx: &BackCtx| {
            vec![Some(
                ctx.out_grad
                    .iter()
                    .zip(ctx.out_data)
                    .map(|(g, s)| g / (2.0 * s.max(1e-12)))
                    .collect(),
            )]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(x: &Tensor) -> Tensor {
    let s = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum_all",
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| vec![Some(vec![ctx.out_grad[0]; n])]),
    )
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.data().iter().sum();
    Tensor::from_op(
        "mean_all",
        vec![1],
        vec![s / n as f64],
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| vec![Some(vec![ctx.out_grad[0] / n as f64; n])]),
    )
}

/// Sum of elementwise products; handy scalar projection for gradient checks.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(sum_all(&mul(a, b)?))
}

/// Global average pool over the spatial grid: `[C,H,W] -> [C,1,1]`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::invalid("gap", format!("expected [C,H,W], got {:?}", x.shape())));
    };
    let hw = h * w;
    let mut out = vec![0.0; c];
    for ci in 0..c {
        out[ci] = x.data()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    Ok(Tensor::from_op(
        "gap",
        vec![c, 1, 1],
        out,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g = vec![0.0; c * hw];
            for ci in 0..c {
                let gv = ctx.out_grad[ci] / hw as f64;
                for v in &mut g[ci * hw..(ci + 1) * hw] {
                    *v = gv;
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Average pool over rows `h0..h1` and all columns: `[N,C,H,W] -> [N,C]`.
/// With `h0 = 0, h1 = H` this is the batched global average pool.
pub fn gap_rows(x: &Tensor, h0: usize, h1: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid("gap_rows", format!("expected [N,C,H,W], got {:?}", x.shape())));
    };
    if h0 >= h1 || h1 > h {
        return Err(Error::invalid("gap_rows", format!("row range {h0}..{h1} outside 0..{h}")));
    }
    let m = ((h1 - h0) * w) as f64;
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c + ci) * h) * w;
            let mut s = 0.0;
            for hi in h0..h1 {
                for wi in 0..w {
                    s += x.data()[base + hi * w + wi];
                }
            }
            out[ni * c + ci] = s / m;
        }
    }
    Ok(Tensor::from_op(
        "gap_rows",
        vec![n, c],
        out,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g = vec![0.0; n * c * h * w];
            for ni in 0..n {
                for ci in 0..c {
                    let gv = ctx.out_grad[ni * c + ci] / m;
                    let base = ((ni * c + ci) * h) * w;
                    for hi in h0..h1 {
                        for wi in 0..w {
                            g[base + hi * w + wi] = gv;
                        }
                    }
                }
            }
            vec![Some(g)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Structure: concat, stack, select, gather/merge
// ---------------------------------------------------------------------------

/// Concatenate along the channel axis. All parts `[C_k,H,W]`, all
/// `[N,C_k,H,W]`, or all `[N,C_k]`; input order is preserved in the output
/// channel order.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "empty part list"))?;
    match first.shape().len() {
        2 => {
            let n = first.shape()[0];
            let mut channels = Vec::with_capacity(parts.len());
            for p in parts {
                let &[pn, c] = p.shape() else {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                };
                if pn != n {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                channels.push(c);
            }
            let total: usize = channels.iter().sum();
            let mut data = vec![0.0; n * total];
            for ni in 0..n {
                let mut coff = 0;
                for (p, c) in parts.iter().zip(&channels) {
                    data[ni * total + coff..ni * total + coff + c]
                        .copy_from_slice(&p.data()[ni * c..(ni + 1) * c]);
                    coff += c;
                }
            }
            Ok(Tensor::from_op(
                "concat_channels",
                vec![n, total],
                data,
                parts.to_vec(),
                Box::new(move |ctx: &BackCtx| {
                    let mut grads: Vec<Vec<f64>> =
                        channels.iter().map(|c| vec![0.0; n * c]).collect();
                    for ni in 0..n {
                        let mut coff = 0;
                        for (gi, c) in channels.iter().enumerate() {
                            grads[gi][ni * c..(ni + 1) * c].copy_from_slice(
                                &ctx.out_grad[ni * total + coff..ni * total + coff + c],
                            );
                            coff += c;
                        }
                    }
                    grads.into_iter().map(Some).collect()
                }),
            ))
        }
        3 => {
            let (h, w) = (first.shape()[1], first.shape()[2]);
            let mut channels = Vec::with_capacity(parts.len());
            for p in parts {
                let &[c, ph, pw] = p.shape() else {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                };
                if (ph, pw) != (h, w) {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                channels.push(c);
            }
            let total: usize = channels.iter().sum();
            let mut data = Vec::with_capacity(total * h * w);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            Ok(Tensor::from_op(
                "concat_channels",
                vec![total, h, w],
                data,
                parts.to_vec(),
                Box::new(move |ctx: &BackCtx| {
                    let hw = h * w;
                    let mut grads = Vec::with_capacity(channels.len());
                    let mut off = 0;
                    for c in &channels {
                        let len = c * hw;
                        grads.push(Some(ctx.out_grad[off..off + len].to_vec()));
                        off += len;
                    }
                    grads
                }),
            ))
        }
        4 => {
            let (n, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
            let mut channels = Vec::with_capacity(parts.len());
            for p in parts {
                let &[pn, c, ph, pw] = p.shape() else {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                };
                if (pn, ph, pw) != (n, h, w) {
                    return Err(Error::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                channels.push(c);
            }
            let total: usize = channels.iter().sum();
            let hw = h * w;
            let mut data = vec![0.0; n * total * hw];
            for ni in 0..n {
                let mut coff = 0;
                for (p, c) in parts.iter().zip(&channels) {
                    let src = &p.data()[ni * c * hw..(ni + 1) * c * hw];
                    data[(ni * total + coff) * hw..(ni * total + coff + c) * hw].copy_from_slice(src);
                    coff += c;
                }
            }
            Ok(Tensor::from_op(
                "concat_channels",
                vec![n, total, h, w],
                data,
                parts.to_vec(),
                Box::new(move |ctx: &BackCtx| {
                    let mut grads: Vec<Vec<f64>> =
                        channels.iter().map(|c| vec![0.0; n * c * hw]).collect();
                    for ni in 0..n {
                        let mut coff = 0;
                        for (gi, c) in channels.iter().enumerate() {
                            let src = &ctx.out_grad
                                [(ni * total + coff) * hw..(ni * total + coff + c) * hw];
                            grads[gi][ni * c * hw..(ni + 1) * c * hw].copy_from_slice(src);
                            coff += c;
                        }
                    }
                    grads.into_iter().map(Some).collect()
                }),
            ))
        }
        _ => Err(Error::invalid(
            "concat_channels",
            format!("expected rank 2, 3 or 4, got {:?}", first.shape()),
        )),
    }
}

/// Stack per-image tensors `[C,H,W]` into a batch `[N,C,H,W]`.
pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("stack", "empty part list"))?;
    let shape = first.shape().to_vec();
    let len = first.numel();
    let mut data = Vec::with_capacity(parts.len() * len);
    for p in parts {
        same_shape("stack", first, p)?;
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&shape);
    let count = parts.len();
    Ok(Tensor::from_op(
        "stack",
        out_shape,
        data,
        parts.to_vec(),
        Box::new(move |ctx: &BackCtx| {
            (0..count)
                .map(|i| Some(ctx.out_grad[i * len..(i + 1) * len].to_vec()))
                .collect()
        }),
    ))
}

/// Single image from a batch: `[N,C,H,W] -> [C,H,W]`.
pub fn select_image(x: &Tensor, index: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid("select_image", format!("expected [N,C,H,W], got {:?}", x.shape())));
    };
    if index >= n {
        return Err(Error::invalid("select_image", format!("index {index} out of {n}")));
    }
    let len = c * h * w;
    let data = x.data()[index * len..(index + 1) * len].to_vec();
    Ok(Tensor::from_op(
        "select_image",
        vec![c, h, w],
        data,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g = vec![0.0; n * len];
            g[index * len..(index + 1) * len].copy_from_slice(ctx.out_grad);
            vec![Some(g)]
        }),
    ))
}

/// Rows of a batch by index: `out[m] = x[idx[m]]`.
pub fn gather_batch(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::invalid("gather_batch", "rank-0 input"))?;
    let rest: usize = x.shape()[1..].iter().product();
    for &i in idx {
        if i >= n {
            return Err(Error::invalid("gather_batch", format!("index {i} out of {n}")));
        }
    }
    let mut data = Vec::with_capacity(idx.len() * rest);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * rest..(i + 1) * rest]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let idx = idx.to_vec();
    Ok(Tensor::from_op(
        "gather_batch",
        shape,
        data,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g = vec![0.0; n * rest];
            for (m, &i) in idx.iter().enumerate() {
                for k in 0..rest {
                    g[i * rest + k] += ctx.out_grad[m * rest + k];
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Inverse of two `gather_batch` calls: scatter `a` to positions `idx_a` and
/// `b` to `idx_b`. The two index sets must partition `0..(len_a + len_b)`.
pub fn merge_batch(a: &Tensor, b: &Tensor, idx_a: &[usize], idx_b: &[usize]) -> Result<Tensor> {
    let rest_a: usize = a.shape()[1..].iter().product();
    let rest_b: usize = b.shape()[1..].iter().product();
    if rest_a != rest_b || a.shape()[0] != idx_a.len() || b.shape()[0] != idx_b.len() {
        return Err(Error::ShapeMismatch {
            op: "merge_batch",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = idx_a.len() + idx_b.len();
    let mut filled = vec![false; n];
    for &i in idx_a.iter().chain(idx_b) {
        if i >= n || filled[i] {
            return Err(Error::invalid("merge_batch", "indices do not partition the batch"));
        }
        filled[i] = true;
    }
    let mut data = vec![0.0; n * rest_a];
    for (m, &i) in idx_a.iter().enumerate() {
        data[i * rest_a..(i + 1) * rest_a].copy_from_slice(&a.data()[m * rest_a..(m + 1) * rest_a]);
    }
    for (m, &i) in idx_b.iter().enumerate() {
        data[i * rest_a..(i + 1) * rest_a].copy_from_slice(&b.data()[m * rest_a..(m + 1) * rest_a]);
    }
    let mut shape = a.shape().to_vec();
    shape[0] = n;
    let (ia, ib) = (idx_a.to_vec(), idx_b.to_vec());
    Ok(Tensor::from_op(
        "merge_batch",
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut ga = vec![0.0; ia.len() * rest_a];
            let mut gb = vec![0.0; ib.len() * rest_a];
            for (m, &i) in ia.iter().enumerate() {
                ga[m * rest_a..(m + 1) * rest_a]
                    .copy_from_slice(&ctx.out_grad[i * rest_a..(i + 1) * rest_a]);
            }
            for (m, &i) in ib.iter().enumerate() {
                gb[m * rest_a..(m + 1) * rest_a]
                    .copy_from_slice(&ctx.out_grad[i * rest_a..(i + 1) * rest_a]);
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

/// Pointwise convolution. `x` is `[C_in,H,W]` or `[N,C_in,H,W]`,
/// `w` is `[C_out,C_in]`, `b` is `[C_out]`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, c_in, h, wd) = match *x.shape() {
        [c, h, w] => (None, c, h, w),
        [n, c, h, w] => (Some(n), c, h, w),
        _ => {
            return Err(Error::invalid(
                "conv1x1",
                format!("expected rank 3 or 4 input, got {:?}", x.shape()),
            ))
        }
    };
    let &[c_out, wc_in] = w.shape() else {
        return Err(Error::ShapeMismatch {
            op: "conv1x1",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    };
    if wc_in != c_in || b.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv1x1",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }

    let n = batch.unwrap_or(1);
    let hw = h * wd;
    let mut out = vec![0.0; n * c_out * hw];
    for ni in 0..n {
        for o in 0..c_out {
            let dst = &mut out[(ni * c_out + o) * hw..(ni * c_out + o + 1) * hw];
            dst.fill(b.data()[o]);
            for i in 0..c_in {
                let wv = w.data()[o * c_in + i];
                let src = &x.data()[(ni * c_in + i) * hw..(ni * c_in + i + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    let out_shape = match batch {
        Some(n) => vec![n, c_out, h, wd],
        None => vec![c_out, h, wd],
    };
    Ok(Tensor::from_op(
        "conv1x1",
        out_shape,
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let w = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gx = vec![0.0; n * c_in * hw];
            let mut gw = vec![0.0; c_out * c_in];
            let mut gb = vec![0.0; c_out];
            for ni in 0..n {
                for o in 0..c_out {
                    let go = &g[(ni * c_out + o) * hw..(ni * c_out + o + 1) * hw];
                    gb[o] += go.iter().sum::<f64>();
                    for i in 0..c_in {
                        let xs = &x[(ni * c_in + i) * hw..(ni * c_in + i + 1) * hw];
                        let wv = w[o * c_in + i];
                        let mut acc = 0.0;
                        let gxs = &mut gx[(ni * c_in + i) * hw..(ni * c_in + i + 1) * hw];
                        for ((gxi, gv), xv) in gxs.iter_mut().zip(go).zip(xs) {
                            *gxi += wv * gv;
                            acc += gv * xv;
                        }
                        gw[o * c_in + i] += acc;
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }),
    ))
}

/// Odd-kernel 2-D convolution with "same" padding.
/// `x` is `[N,C,H,W]`, `w` is `[O,C,K,K]`, `b` is `[O]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let &[n, c, h, wd] = x.shape() else {
        return Err(Error::invalid("conv2d", format!("expected [N,C,H,W], got {:?}", x.shape())));
    };
    let &[o, wc, kh, kw] = w.shape() else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    };
    if wc != c || kh != kw || kh % 2 == 0 || b.shape() != [o] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let p = kh / 2;
    let oh = (h + 2 * p - kh) / stride + 1;
    let ow = (wd + 2 * p - kw) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("input {h}x{wd} too small for stride {stride}"),
        ));
    }

    // Work on zero-padded planes so the inner loops need no bounds handling.
    let (ph, pw) = (h + 2 * p, wd + 2 * p);
    let pad_plane = move |src: &[f64], dst: &mut [f64]| {
        for y in 0..h {
            dst[(y + p) * pw + p..(y + p) * pw + p + wd]
                .copy_from_slice(&src[y * wd..(y + 1) * wd]);
        }
    };

    let xd = x.data();
    let wd_data = w.data();
    let mut out = vec![0.0; n * o * oh * ow];
    let mut padded = vec![0.0; c * ph * pw];
    for ni in 0..n {
        padded.fill(0.0);
        for ci in 0..c {
            pad_plane(
                &xd[((ni * c + ci) * h) * wd..((ni * c + ci) * h + h) * wd],
                &mut padded[ci * ph * pw..(ci + 1) * ph * pw],
            );
        }
        for oi in 0..o {
            let out_plane = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            out_plane.fill(b.data()[oi]);
            for ci in 0..c {
                let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
                let kernel = &wd_data[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                for iy in 0..oh {
                    for dy in 0..kh {
                        let krow = &kernel[dy * kw..(dy + 1) * kw];
                        let src = &plane[(iy * stride + dy) * pw..];
                        let dst = &mut out_plane[iy * ow..(iy + 1) * ow];
                        for (ix, d) in dst.iter_mut().enumerate() {
                            let base = ix * stride;
                            let mut acc = 0.0;
                            for (dx, kv) in krow.iter().enumerate() {
                                acc += kv * src[base + dx];
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, o, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let w = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gx = vec![0.0; n * c * h * wd];
            let mut gw = vec![0.0; o * c * kh * kw];
            let mut gb = vec![0.0; o];
            let mut padded = vec![0.0; c * ph * pw];
            let mut gpad = vec![0.0; c * ph * pw];
            for ni in 0..n {
                padded.fill(0.0);
                gpad.fill(0.0);
                for ci in 0..c {
                    pad_plane(
                        &x[((ni * c + ci) * h) * wd..((ni * c + ci) * h + h) * wd],
                        &mut padded[ci * ph * pw..(ci + 1) * ph * pw],
                    );
                }
                for oi in 0..o {
                    let g_plane = &g[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                    gb[oi] += g_plane.iter().sum::<f64>();
                    for ci in 0..c {
                        let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
                        let gplane = &mut gpad[ci * ph * pw..(ci + 1) * ph * pw];
                        let gkernel = &mut gw[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                        let kernel = &w[(oi * c + ci) * kh * kw..(oi * c + ci + 1) * kh * kw];
                        for iy in 0..oh {
                            for dy in 0..kh {
                                let row = (iy * stride + dy) * pw;
                                let grow = &g_plane[iy * ow..(iy + 1) * ow];
                                for dx in 0..kw {
                                    let kv = kernel[dy * kw + dx];
                                    let mut acc = 0.0;
                                    for (ix, gv) in grow.iter().enumerate() {
                                        let idx = row + ix * stride + dx;
                                        gplane[idx] += gv * kv;
                                        acc += gv * plane[idx];
                                    }
                                    gkernel[dy * kw + dx] += acc;
                                }
                            }
                        }
                    }
                }
                // crop the padding off the accumulated input gradient
                for ci in 0..c {
                    let gplane = &gpad[ci * ph * pw..(ci + 1) * ph * pw];
                    let dst = &mut gx[((ni * c + ci) * h) * wd..((ni * c + ci) * h + h) * wd];
                    for y in 0..h {
                        dst[y * wd..(y + 1) * wd]
                            .copy_from_slice(&gplane[(y + p) * pw + p..(y + p) * pw + p + wd]);
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        }),
    ))
}

/// Fully connected layer: `x [N,A] * w [B,A]^T (+ b [B]) -> [N,B]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let &[n, a] = x.shape() else {
        return Err(Error::invalid("linear", format!("expected [N,A], got {:?}", x.shape())));
    };
    let &[bo, wa] = w.shape() else {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    };
    if wa != a {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [bo] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let mut out = vec![0.0; n * bo];
    for ni in 0..n {
        for oi in 0..bo {
            let mut acc = b.map_or(0.0, |b| b.data()[oi]);
            for ai in 0..a {
                acc += x.data()[ni * a + ai] * w.data()[oi * a + ai];
            }
            out[ni * bo + oi] = acc;
        }
    }
    let has_bias = b.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        "linear",
        vec![n, bo],
        out,
        parents,
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let w = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gx = vec![0.0; n * a];
            let mut gw = vec![0.0; bo * a];
            for ni in 0..n {
                for oi in 0..bo {
                    let gv = g[ni * bo + oi];
                    for ai in 0..a {
                        gx[ni * a + ai] += gv * w[oi * a + ai];
                        gw[oi * a + ai] += gv * x[ni * a + ai];
                    }
                }
            }
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                let mut gb = vec![0.0; bo];
                for ni in 0..n {
                    for oi in 0..bo {
                        gb[oi] += g[ni * bo + oi];
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Per-channel gate: multiplies every spatial position of channel `c` by
/// `s[c]`. `x` is `[C,H,W]` with `s` of `[C]`/`[C,1,1]`, or `[N,C,H,W]` with
/// `s` of `[N,C]`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (groups, hw) = match *x.shape() {
        [c, h, w] => {
            if s.numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "scale_channels",
                    lhs: x.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            (c, h * w)
        }
        [n, c, h, w] => {
            if s.shape() != [n, c] {
                return Err(Error::ShapeMismatch {
                    op: "scale_channels",
                    lhs: x.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            (n * c, h * w)
        }
        _ => {
            return Err(Error::invalid(
                "scale_channels",
                format!("expected rank 3 or 4, got {:?}", x.shape()),
            ))
        }
    };
    let mut out = vec![0.0; groups * hw];
    for gi in 0..groups {
        let sv = s.data()[gi];
        for k in 0..hw {
            out[gi * hw + k] = sv * x.data()[gi * hw + k];
        }
    }
    Ok(Tensor::from_op(
        "scale_channels",
        x.shape().to_vec(),
        out,
        vec![x.clone(), s.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let s = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gx = vec![0.0; groups * hw];
            let mut gs = vec![0.0; groups];
            for gi in 0..groups {
                let sv = s[gi];
                let mut acc = 0.0;
                for k in 0..hw {
                    gx[gi * hw + k] = sv * g[gi * hw + k];
                    acc += g[gi * hw + k] * x[gi * hw + k];
                }
                gs[gi] = acc;
            }
            vec![Some(gx), Some(gs)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch normalization over `[N,C]` or `[N,C,H,W]`.
///
/// Train mode standardizes with batch statistics (biased variance) and
/// updates `stats` with momentum [`BN_MOMENTUM`]; eval mode standardizes with
/// the running statistics and leaves them untouched.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    mode: NormMode,
) -> Result<Tensor> {
    let (n, c, hw) = match *x.shape() {
        [n, c] => (n, c, 1),
        [n, c, h, w] => (n, c, h * w),
        _ => {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected [N,C] or [N,C,H,W], got {:?}", x.shape()),
            ))
        }
    };
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if mode == NormMode::Train && n < 2 {
        return Err(Error::DegenerateBatch(n));
    }

    let m = (n * hw) as f64;
    let (mean, var) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    s += x.data()[base..base + hw].iter().sum::<f64>();
                }
                mean[ci] = s / m;
                let mut v = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for k in 0..hw {
                        let d = x.data()[base + k] - mean[ci];
                        v += d * d;
                    }
                }
                var[ci] = v / m;
            }
            for ci in 0..c {
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean[ci];
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * var[ci];
            }
            (mean, var)
        }
        NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + NORM_EPS).sqrt();
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in 0..hw {
                let xh = (x.data()[base + k] - mean[ci]) * inv;
                xhat[base + k] = xh;
                out[base + k] = g * xh + b;
            }
        }
    }

    let train = mode == NormMode::Train;
    Ok(Tensor::from_op(
        "batch_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx: &BackCtx| {
            let gamma = ctx.parents[1].data();
            let g = ctx.out_grad;
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + NORM_EPS).sqrt();
                let mut sum_gy = 0.0;
                let mut sum_gy_xh = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for k in 0..hw {
                        sum_gy += g[base + k];
                        sum_gy_xh += g[base + k] * xhat[base + k];
                    }
                }
                gb[ci] = sum_gy;
                gg[ci] = sum_gy_xh;
                if train {
                    let mg = sum_gy / m;
                    let mgx = sum_gy_xh / m;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for k in 0..hw {
                            gx[base + k] = gamma[ci]
                                * inv
                                * (g[base + k] - mg - xhat[base + k] * mgx);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for k in 0..hw {
                            gx[base + k] = gamma[ci] * inv * g[base + k];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Instance normalization over `[N,C,H,W]`: each `(n, c)` plane is
/// standardized over its spatial grid, with an optional per-channel affine.
pub fn instance_norm(x: &Tensor, affine: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(
            "instance_norm",
            format!("expected [N,C,H,W], got {:?}", x.shape()),
        ));
    };
    let hw = h * w;
    if hw < 2 {
        return Err(Error::invalid("instance_norm", "spatial size H*W must be at least 2"));
    }
    if let Some((g, b)) = affine {
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "instance_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    let planes = n * c;
    let m = hw as f64;
    let mut mean = vec![0.0; planes];
    let mut var = vec![0.0; planes];
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let base = p * hw;
        let plane = &x.data()[base..base + hw];
        let mu = plane.iter().sum::<f64>() / m;
        let v = plane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
        mean[p] = mu;
        var[p] = v;
        let inv = 1.0 / (v + NORM_EPS).sqrt();
        let ci = p % c;
        let (gm, bt) = affine.map_or((1.0, 0.0), |(g, b)| (g.data()[ci], b.data()[ci]));
        for k in 0..hw {
            let xh = (plane[k] - mu) * inv;
            xhat[base + k] = xh;
            out[base + k] = gm * xh + bt;
        }
    }

    let mut parents = vec![x.clone()];
    let has_affine = affine.is_some();
    if let Some((g, b)) = affine {
        parents.push(g.clone());
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        "instance_norm",
        x.shape().to_vec(),
        out,
        parents,
        Box::new(move |ctx: &BackCtx| {
            let g = ctx.out_grad;
            let gamma: Option<&[f64]> = if has_affine {
                Some(ctx.parents[1].data())
            } else {
                None
            };
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for p in 0..planes {
                let base = p * hw;
                let ci = p % c;
                let gm = gamma.map_or(1.0, |ga| ga[ci]);
                let inv = 1.0 / (var[p] + NORM_EPS).sqrt();
                let mut sum_gy = 0.0;
                let mut sum_gy_xh = 0.0;
                for k in 0..hw {
                    sum_gy += g[base + k];
                    sum_gy_xh += g[base + k] * xhat[base + k];
                }
                gb[ci] += sum_gy;
                gg[ci] += sum_gy_xh;
                let mg = sum_gy / m;
                let mgx = sum_gy_xh / m;
                for k in 0..hw {
                    gx[base + k] = gm * inv * (g[base + k] - mg - xhat[base + k] * mgx);
                }
            }
            let mut grads = vec![Some(gx)];
            if has_affine {
                grads.push(Some(gg));
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

// ---------------------------------------------------------------------------
// Loss-side primitives
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the labelled class under a softmax,
/// stabilized by max subtraction.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[n, k] = logits.shape() else {
        return Err(Error::invalid(
            "cross_entropy",
            format!("expected [N,K] logits, got {:?}", logits.shape()),
        ));
    };
    if labels.len() != n {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    for &l in labels {
        if l >= k {
            return Err(Error::BadLabel(l, format!("out of range for {k} classes")));
        }
    }
    let mut softmax = vec![0.0; n * k];
    let mut loss = 0.0;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            softmax[ni * k + j] = e;
            z += e;
        }
        for v in &mut softmax[ni * k..(ni + 1) * k] {
            *v /= z;
        }
        loss += z.ln() + mx - row[labels[ni]];
    }
    loss /= n as f64;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        "cross_entropy",
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |ctx: &BackCtx| {
            let scale = ctx.out_grad[0] / n as f64;
            let mut g = vec![0.0; n * k];
            for ni in 0..n {
                for j in 0..k {
                    let indicator = if j == labels[ni] { 1.0 } else { 0.0 };
                    g[ni * k + j] = scale * (softmax[ni * k + j] - indicator);
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// All-pairs Euclidean distances of the rows of `x [N,D]` as an `[N,N]` grid.
pub fn pairwise_dist(x: &Tensor) -> Result<Tensor> {
    let &[n, d] = x.shape() else {
        return Err(Error::invalid("pairwise_dist", format!("expected [N,D], got {:?}", x.shape())));
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = x.data()[i * d + k] - x.data()[j * d + k];
                s += diff * diff;
            }
            let dist = s.sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    Ok(Tensor::from_op(
        "pairwise_dist",
        vec![n, n],
        out,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let x = ctx.parents[0].data();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let g = ctx.out_grad[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    let dist = ctx.out_data[i * n + j].max(1e-12);
                    for k in 0..d {
                        let diff = (x[i * d + k] - x[j * d + k]) / dist;
                        gx[i * d + k] += g * diff;
                        gx[j * d + k] -= g * diff;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Selected entries of a matrix as a vector: `out[p] = m[rows[p], cols[p]]`.
pub fn gather2d(m: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let &[r, c] = m.shape() else {
        return Err(Error::invalid("gather2d", format!("expected matrix, got {:?}", m.shape())));
    };
    for &(i, j) in pairs {
        if i >= r || j >= c {
            return Err(Error::invalid("gather2d", format!("({i},{j}) outside {r}x{c}")));
        }
    }
    let data = pairs.iter().map(|&(i, j)| m.data()[i * c + j]).collect();
    let pairs = pairs.to_vec();
    Ok(Tensor::from_op(
        "gather2d",
        vec![pairs.len()],
        data,
        vec![m.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g = vec![0.0; r * c];
            for (p, &(i, j)) in pairs.iter().enumerate() {
                g[i * c + j] += ctx.out_grad[p];
            }
            vec![Some(g)]
        }),
    ))
}

/// Mean of the selected rows of `x [N,D]`.
pub fn rows_mean(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let &[n, d] = x.shape() else {
        return Err(Error::invalid("rows_mean", format!("expected [N,D], got {:?}", x.shape())));
    };
    if rows.is_empty() {
        return Err(Error::invalid("rows_mean", "empty row selection"));
    }
    for &r in rows {
        if r >= n {
            return Err(Error::invalid("rows_mean", format!("row {r} out of {n}")));
        }
    }
    let mut out = vec![0.0; d];
    for &r in rows {
        for k in 0..d {
            out[k] += x.data()[r * d + k];
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for v in &mut out {
        *v *= inv;
    }
    let rows = rows.to_vec();
    Ok(Tensor::from_op(
        "rows_mean",
        vec![d],
        out,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g = vec![0.0; n * d];
            let inv = 1.0 / rows.len() as f64;
            for &r in &rows {
                for k in 0..d {
                    g[r * d + k] += ctx.out_grad[k] * inv;
                }
            }
            vec![Some(g)]
        }),
    ))
}

/// Euclidean distance between two equal-length vectors as a scalar node.
pub fn euclidean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("euclidean", a, b)?;
    let diff = sub(a, b)?;
    sqrt(&sum_all(&mul(&diff, &diff)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64, param: bool) -> Tensor {
        let mut r = rng::stream(seed, "ops-test", 0, 0);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        if param {
            Tensor::param(shape, data)
        } else {
            Tensor::leaf(shape, data)
        }
    }

    #[test]
    fn conv1x1_identity_kernel_preserves_input() {
        let x = Tensor::leaf(vec![2, 2, 2], vec![1.0; 8]);
        let w = Tensor::leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::leaf(vec![2], vec![0.0, 0.0]);
        let y = conv1x1(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv1x1_zero_kernel_gives_zero() {
        let x = rand_tensor(vec![3, 2, 2], 1, false);
        let w = Tensor::leaf(vec![2, 3], vec![0.0; 6]);
        let b = Tensor::leaf(vec![2], vec![0.0; 2]);
        let y = conv1x1(&x, &w, &b).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv1x1_matches_triple_loop_oracle() {
        let (c_in, c_out, h, w) = (3, 2, 2, 2);
        let x = rand_tensor(vec![c_in, h, w], 7, false);
        let wt = rand_tensor(vec![c_out, c_in], 17, false);
        let b = rand_tensor(vec![c_out], 27, false);
        let y = conv1x1(&x, &wt, &b).unwrap();
        for o in 0..c_out {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = b.data()[o];
                    for i in 0..c_in {
                        acc += wt.data()[o * c_in + i] * x.data()[(i * h + hi) * w + wi];
                    }
                    let got = y.data()[(o * h + hi) * w + wi];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1x1_shape_mismatch_reports_both_shapes() {
        let x = Tensor::leaf(vec![3, 2, 2], vec![0.0; 12]);
        let w = Tensor::leaf(vec![2, 4], vec![0.0; 8]);
        let b = Tensor::leaf(vec![2], vec![0.0; 2]);
        let err = conv1x1(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("[3, 2, 2]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn conv1x1_is_linear_in_input() {
        let w = rand_tensor(vec![3, 4], 5, false);
        let b = Tensor::leaf(vec![3], vec![0.0; 3]);
        let x = rand_tensor(vec![4, 3, 3], 6, false);
        let y = rand_tensor(vec![4, 3, 3], 7, false);
        let (a, bb) = (0.7, -1.3);
        let combo = add(&affine(&x, a, 0.0), &affine(&y, bb, 0.0)).unwrap();
        let lhs = conv1x1(&combo, &w, &b).unwrap();
        let fx = conv1x1(&x, &w, &b).unwrap();
        let fy = conv1x1(&y, &w, &b).unwrap();
        let rhs = add(&affine(&fx, a, 0.0), &affine(&fy, bb, 0.0)).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn gap_of_constant_plane_is_the_constant() {
        let x = Tensor::leaf(vec![3, 4, 4], vec![3.5; 48]);
        let y = gap(&x).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        assert!(y.data().iter().all(|v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn gap_computes_arithmetic_mean() {
        let x = Tensor::leaf(vec![1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]);
        assert!((gap(&x).unwrap().data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn gap_matches_loop_oracle() {
        let x = rand_tensor(vec![4, 5, 7], 11, false);
        let y = gap(&x).unwrap();
        for c in 0..4 {
            let mut s = 0.0;
            for h in 0..5 {
                for w in 0..7 {
                    s += x.data()[(c * 5 + h) * 7 + w];
                }
            }
            assert!((y.data()[c] - s / 35.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_known_values() {
        let x = Tensor::leaf(vec![3], vec![0.0, 50.0, 1.0]);
        let y = sigmoid(&x);
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!(y.data()[1] >= 1.0 - 1e-12);
        assert!((y.data()[2] - 0.7310585786).abs() < 1e-9);
        // Open interval up to f64 saturation at large magnitudes.
        let moderate = sigmoid(&Tensor::leaf(vec![3], vec![-20.0, 0.3, 20.0]));
        assert!(moderate.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn concat_preserves_order_and_roundtrips() {
        let a = Tensor::leaf(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::leaf(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let y = concat_channels(&[a.clone(), b]).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(&y.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&y.data()[4..], &[5.0, 6.0, 7.0, 8.0]);

        let single = concat_channels(&[a.clone()]).unwrap();
        assert_eq!(single.data(), a.data());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let x = rand_tensor(vec![8, 3, 3], 3, false);
        let hw = 9;
        let parts: Vec<Tensor> = (0..4)
            .map(|k| {
                Tensor::leaf(
                    vec![2, 3, 3],
                    x.data()[k * 2 * hw..(k + 1) * 2 * hw].to_vec(),
                )
            })
            .collect();
        let y = concat_channels(&parts).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let x = rand_tensor(vec![3, 2, 2, 2], 9, false);
        let gamma = Tensor::leaf(vec![2], vec![1.0, 1.0]);
        let beta = Tensor::leaf(vec![2], vec![0.0, 0.0]);
        let mut stats = BnStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Eval).unwrap();
        for (yv, xv) in y.data().iter().zip(x.data()) {
            assert!((yv - xv).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_train_constant_channel_is_near_zero() {
        let x = Tensor::leaf(vec![4, 2], vec![2.5, -1.0, 2.5, -1.0, 2.5, -1.0, 2.5, -1.0]);
        let gamma = Tensor::leaf(vec![2], vec![1.0, 1.0]);
        let beta = Tensor::leaf(vec![2], vec![0.0, 0.0]);
        let mut stats = BnStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn batch_norm_train_matches_loop_oracle() {
        let x = rand_tensor(vec![4, 2, 2, 2], 13, false);
        let gamma = Tensor::leaf(vec![2], vec![1.3, 0.7]);
        let beta = Tensor::leaf(vec![2], vec![0.1, -0.2]);
        let mut stats = BnStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Train).unwrap();
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for k in 0..4 {
                    vals.push(x.data()[(n * 2 + c) * 4 + k]);
                }
            }
            let mu = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            for n in 0..4 {
                for k in 0..4 {
                    let idx = (n * 2 + c) * 4 + k;
                    let expect = gamma.data()[c] * (x.data()[idx] - mu) / (var + NORM_EPS).sqrt()
                        + beta.data()[c];
                    assert!((y.data()[idx] - expect).abs() < 1e-10);
                }
            }
            assert!((stats.mean[c] - 0.1 * mu).abs() < 1e-12);
            assert!((stats.var[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let x = Tensor::leaf(vec![1, 2], vec![1.0, 2.0]);
        let gamma = Tensor::leaf(vec![2], vec![1.0, 1.0]);
        let beta = Tensor::leaf(vec![2], vec![0.0, 0.0]);
        let mut stats = BnStats::new(2);
        assert!(batch_norm(&x, &gamma, &beta, &mut stats, NormMode::Train).is_err());
    }

    #[test]
    fn batch_norm_eval_is_independent_of_batch_composition() {
        let gamma = Tensor::leaf(vec![1], vec![1.4]);
        let beta = Tensor::leaf(vec![1], vec![-0.3]);
        let mut stats = BnStats::new(1);
        stats.mean[0] = 0.5;
        stats.var[0] = 2.0;
        let single = Tensor::leaf(vec![1, 1], vec![0.8]);
        let alone = batch_norm(&single, &gamma, &beta, &mut stats, NormMode::Eval).unwrap();
        let batch = Tensor::leaf(vec![3, 1], vec![0.8, 99.0, -5.0]);
        let together = batch_norm(&batch, &gamma, &beta, &mut stats, NormMode::Eval).unwrap();
        assert_eq!(alone.data()[0], together.data()[0]);
    }

    #[test]
    fn instance_norm_constant_plane_is_near_zero() {
        let x = Tensor::leaf(vec![1, 2, 2, 2], vec![5.0, 5.0, 5.0, 5.0, -3.0, -3.0, -3.0, -3.0]);
        let y = instance_norm(&x, None).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn instance_norm_two_level_plane() {
        let x = Tensor::leaf(vec![1, 1, 2, 2], vec![0.0, 2.0, 0.0, 2.0]);
        let y = instance_norm(&x, None).unwrap();
        let expect = [-1.0, 1.0, -1.0, 1.0];
        for (yv, e) in y.data().iter().zip(expect) {
            assert!((yv - e).abs() < 1e-4, "{yv} vs {e}");
        }
    }

    #[test]
    fn instance_norm_standardizes_every_plane() {
        let x = rand_tensor(vec![2, 3, 4, 4], 21, false);
        let y = instance_norm(&x, None).unwrap();
        for p in 0..6 {
            let plane = &y.data()[p * 16..(p + 1) * 16];
            let mu = plane.iter().sum::<f64>() / 16.0;
            let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-10);
            assert!(var > 1.0 - 1e-3 && var <= 1.0);
        }
    }

    #[test]
    fn instance_norm_rejects_single_pixel_planes() {
        let x = Tensor::leaf(vec![1, 2, 1, 1], vec![1.0, 2.0]);
        assert!(instance_norm(&x, None).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        let logits = Tensor::leaf(vec![2, 10], vec![0.3; 20]);
        let l = cross_entropy(&logits, &[4, 9]).unwrap();
        assert!((l.item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_logit_is_zero() {
        let mut data = vec![0.0; 5];
        data[2] = 50.0;
        let logits = Tensor::leaf(vec![1, 5], data);
        let l = cross_entropy(&logits, &[2]).unwrap();
        assert!(l.item() <= 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_sample_oracle() {
        let logits = rand_tensor(vec![4, 5], 31, false);
        let labels = [1usize, 0, 4, 2];
        let l = cross_entropy(&logits, &labels).unwrap();
        let mut expect = 0.0;
        for (n, &y) in labels.iter().enumerate() {
            let row = &logits.data()[n * 5..(n + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[y].exp() / z).ln();
        }
        expect /= 4.0;
        assert!((l.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::leaf(vec![1, 3], vec![0.0; 3]);
        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn linear_matches_oracle() {
        let x = rand_tensor(vec![3, 4], 41, false);
        let w = rand_tensor(vec![2, 4], 42, false);
        let b = rand_tensor(vec![2], 43, false);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for n in 0..3 {
            for o in 0..2 {
                let mut acc = b.data()[o];
                for a in 0..4 {
                    acc += x.data()[n * 4 + a] * w.data()[o * 4 + a];
                }
                assert!((y.data()[n * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gather_then_merge_restores_batch() {
        let x = rand_tensor(vec![5, 2, 2, 2], 51, false);
        let idx_a = [0usize, 2, 4];
        let idx_b = [1usize, 3];
        let a = gather_batch(&x, &idx_a).unwrap();
        let b = gather_batch(&x, &idx_b).unwrap();
        let y = merge_batch(&a, &b, &idx_a, &idx_b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pairwise_dist_matches_oracle() {
        let x = rand_tensor(vec![4, 3], 61, false);
        let d = pairwise_dist(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    let diff = x.data()[i * 3 + k] - x.data()[j * 3 + k];
                    s += diff * diff;
                }
                assert!((d.data()[i * 4 + j] - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_mean_matches_oracle() {
        let x = rand_tensor(vec![5, 3], 71, false);
        let m = rows_mean(&x, &[1, 3, 4]).unwrap();
        for k in 0..3 {
            let expect = (x.data()[3 + k] + x.data()[9 + k] + x.data()[12 + k]) / 3.0;
            assert!((m.data()[k] - expect).abs() < 1e-12);
        }
    }
}
