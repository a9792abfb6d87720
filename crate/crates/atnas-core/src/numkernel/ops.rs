//! Forward and reverse-mode passes for the fixed operation set.
//!
//! Every forward returns an [`OpTrace`] holding the saved activations its
//! backward needs. Backward accumulates (`+=`) into the block's gradient
//! buffers and returns the input gradient. There is no general autodiff
//! graph; only this op set is differentiable.

use crate::error::{Error, Result};

use super::param::{OpKind, ParamBlock};
use super::tensor::Tensor4;

/// Variance guard for batch statistics. Kept tiny so normalized batches
/// have unit variance to ~1e-12; inputs here are f64 activations with
/// O(1) spread, not raw sensor data.
pub const NORM_EPS: f64 = 1e-12;

/// SAME-padding geometry for one spatial axis.
#[derive(Debug, Clone, Copy)]
struct Pad {
    out: usize,
    beg: i64,
}

fn same_pad(input: usize, kernel: usize, stride: usize, dilation: usize) -> Pad {
    let out = input.div_ceil(stride);
    let span = (kernel - 1) * dilation + 1;
    let total = ((out - 1) * stride + span).saturating_sub(input);
    Pad {
        out,
        beg: (total / 2) as i64,
    }
}

// ---------------------------------------------------------------- primitives

fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Dense convolution, SAME padding. `w` is (c_out, c_in, kh, kw).
fn conv2d(x: &Tensor4, w: &Tensor4, stride: usize, dilation: usize) -> Tensor4 {
    let [b, c_in, h, wd] = x.shape();
    let [c_out, wc_in, kh, kw] = w.shape();
    debug_assert_eq!(c_in, wc_in);
    let py = same_pad(h, kh, stride, dilation);
    let px = same_pad(wd, kw, stride, dilation);
    let mut y = Tensor4::zeros([b, c_out, py.out, px.out]);
    for bi in 0..b {
        for co in 0..c_out {
            for ci in 0..c_in {
                let xp = x.plane(bi, ci);
                let yp_start = y.idx(bi, co, 0, 0);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.at(co, ci, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..py.out {
                            let iy = (oy * stride) as i64 - py.beg + (ky * dilation) as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for ox in 0..px.out {
                                let ix = (ox * stride) as i64 - px.beg + (kx * dilation) as i64;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                let yi = yp_start + oy * px.out + ox;
                                y.data_mut()[yi] += wv * xp[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Backward of `conv2d`: returns grad_input, adds into grad_w.
fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    grad_w: &mut Tensor4,
    grad_out: &Tensor4,
    stride: usize,
    dilation: usize,
) -> Tensor4 {
    let [b, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let py = same_pad(h, kh, stride, dilation);
    let px = same_pad(wd, kw, stride, dilation);
    let mut gx = Tensor4::zeros(x.shape());
    for bi in 0..b {
        for co in 0..c_out {
            let gop = grad_out.plane(bi, co);
            for ci in 0..c_in {
                let xp = x.plane(bi, ci);
                let gxp = gx.plane_mut(bi, ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.at(co, ci, ky, kx);
                        let mut gw_acc = 0.0;
                        for oy in 0..py.out {
                            let iy = (oy * stride) as i64 - py.beg + (ky * dilation) as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for ox in 0..px.out {
                                let ix = (ox * stride) as i64 - px.beg + (kx * dilation) as i64;
                                if ix < 0 || ix >= wd as i64 {
                                    continue;
                                }
                                let go = gop[oy * px.out + ox];
                                let xi = iy as usize * wd + ix as usize;
                                gw_acc += go * xp[xi];
                                gxp[xi] += go * wv;
                            }
                        }
                        *grad_w.at_mut(co, ci, ky, kx) += gw_acc;
                    }
                }
            }
        }
    }
    gx
}

/// Depthwise convolution, SAME padding. `w` is (c, 1, k, k).
fn depthwise(x: &Tensor4, w: &Tensor4, stride: usize, dilation: usize) -> Tensor4 {
    let [b, c, h, wd] = x.shape();
    let [wc, _, kh, kw] = w.shape();
    debug_assert_eq!(c, wc);
    let py = same_pad(h, kh, stride, dilation);
    let px = same_pad(wd, kw, stride, dilation);
    let mut y = Tensor4::zeros([b, c, py.out, px.out]);
    for bi in 0..b {
        for ci in 0..c {
            let xp = x.plane(bi, ci);
            let yp = y.plane_mut(bi, ci);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.at(ci, 0, ky, kx);
                    for oy in 0..py.out {
                        let iy = (oy * stride) as i64 - py.beg + (ky * dilation) as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..px.out {
                            let ix = (ox * stride) as i64 - px.beg + (kx * dilation) as i64;
                            if ix < 0 || ix >= wd as i64 {
                                continue;
                            }
                            yp[oy * px.out + ox] += wv * xp[iy as usize * wd + ix as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

fn depthwise_backward(
    x: &Tensor4,
    w: &Tensor4,
    grad_w: &mut Tensor4,
    grad_out: &Tensor4,
    stride: usize,
    dilation: usize,
) -> Tensor4 {
    let [b, c, h, wd] = x.shape();
    let [_, _, kh, kw] = w.shape();
    let py = same_pad(h, kh, stride, dilation);
    let px = same_pad(wd, kw, stride, dilation);
    let mut gx = Tensor4::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            let xp = x.plane(bi, ci);
            let gop = grad_out.plane(bi, ci);
            let gxp = gx.plane_mut(bi, ci);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.at(ci, 0, ky, kx);
                    let mut gw_acc = 0.0;
                    for oy in 0..py.out {
                        let iy = (oy * stride) as i64 - py.beg + (ky * dilation) as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..px.out {
                            let ix = (ox * stride) as i64 - px.beg + (kx * dilation) as i64;
                            if ix < 0 || ix >= wd as i64 {
                                continue;
                            }
                            let go = gop[oy * px.out + ox];
                            let xi = iy as usize * wd + ix as usize;
                            gw_acc += go * xp[xi];
                            gxp[xi] += go * wv;
                        }
                    }
                    *grad_w.at_mut(ci, 0, ky, kx) += gw_acc;
                }
            }
        }
    }
    gx
}

/// Per-channel batch normalization over (batch, height, width) using
/// current-batch statistics only; no running averages are kept.
pub fn norm_forward(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4) -> (Tensor4, NormTrace) {
    let [b, c, h, w] = x.shape();
    let n = (b * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            for v in x.plane(bi, ci) {
                s += v;
            }
        }
        mean[ci] = s / n;
        let mut sq = 0.0;
        for bi in 0..b {
            for v in x.plane(bi, ci) {
                let d = v - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / n;
    }
    let mut xhat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for ci in 0..c {
        let istd = 1.0 / (var[ci] + NORM_EPS).sqrt();
        let g = gamma.data()[ci];
        let bta = beta.data()[ci];
        for bi in 0..b {
            let xp = x.plane(bi, ci);
            let xhp = xhat.plane_mut(bi, ci);
            for (i, v) in xp.iter().enumerate() {
                xhp[i] = (v - mean[ci]) * istd;
            }
        }
        for bi in 0..b {
            let xhp = xhat.plane(bi, ci).to_vec();
            let yp = y.plane_mut(bi, ci);
            for (i, v) in xhp.iter().enumerate() {
                yp[i] = g * v + bta;
            }
        }
    }
    (y, NormTrace { xhat, var })
}

#[derive(Debug, Clone)]
pub struct NormTrace {
    pub xhat: Tensor4,
    pub var: Vec<f64>,
}

/// Backward of `norm_forward`. Adds into grad_gamma/grad_beta, returns
/// grad wrt the pre-normalization input.
pub fn norm_backward(
    trace: &NormTrace,
    gamma: &Tensor4,
    grad_gamma: &mut Tensor4,
    grad_beta: &mut Tensor4,
    grad_out: &Tensor4,
) -> Tensor4 {
    let [b, c, h, w] = trace.xhat.shape();
    let n = (b * h * w) as f64;
    let mut gx = Tensor4::zeros(trace.xhat.shape());
    for ci in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for bi in 0..b {
            let gop = grad_out.plane(bi, ci);
            let xhp = trace.xhat.plane(bi, ci);
            for i in 0..gop.len() {
                sum_dy += gop[i];
                sum_dy_xhat += gop[i] * xhp[i];
            }
        }
        grad_beta.data_mut()[ci] += sum_dy;
        grad_gamma.data_mut()[ci] += sum_dy_xhat;
        let g = gamma.data()[ci];
        let istd = 1.0 / (trace.var[ci] + NORM_EPS).sqrt();
        let m_dy = sum_dy / n;
        let m_dy_xhat = sum_dy_xhat / n;
        for bi in 0..b {
            let gop = grad_out.plane(bi, ci).to_vec();
            let xhp = trace.xhat.plane(bi, ci).to_vec();
            let gxp = gx.plane_mut(bi, ci);
            for i in 0..gop.len() {
                gxp[i] = g * istd * (gop[i] - m_dy - xhp[i] * m_dy_xhat);
            }
        }
    }
    gx
}

/// 3x3 max pool, SAME padding; padded positions never win the max.
fn maxpool3(x: &Tensor4, stride: usize) -> (Tensor4, Vec<usize>) {
    let [b, c, h, w] = x.shape();
    let py = same_pad(h, 3, stride, 1);
    let px = same_pad(w, 3, stride, 1);
    let mut y = Tensor4::zeros([b, c, py.out, px.out]);
    let mut argmax = vec![0usize; y.len()];
    for bi in 0..b {
        for ci in 0..c {
            let xp = x.plane(bi, ci);
            let base_in = x.idx(bi, ci, 0, 0);
            let base_out = y.idx(bi, ci, 0, 0);
            for oy in 0..py.out {
                for ox in 0..px.out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..3 {
                        let iy = (oy * stride) as i64 - py.beg + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride) as i64 - px.beg + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if xp[i] > best {
                                best = xp[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = oy * px.out + ox;
                    y.data_mut()[base_out + o] = best;
                    argmax[base_out + o] = base_in + best_i;
                }
            }
        }
    }
    (y, argmax)
}

/// 3x3 average pool, SAME padding; boundary windows divide by the count
/// of in-bounds elements, so a constant field stays constant.
fn avgpool3(x: &Tensor4, stride: usize) -> Tensor4 {
    let [b, c, h, w] = x.shape();
    let py = same_pad(h, 3, stride, 1);
    let px = same_pad(w, 3, stride, 1);
    let mut y = Tensor4::zeros([b, c, py.out, px.out]);
    for bi in 0..b {
        for ci in 0..c {
            let xp = x.plane(bi, ci);
            let yp = y.plane_mut(bi, ci);
            for oy in 0..py.out {
                for ox in 0..px.out {
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for ky in 0..3 {
                        let iy = (oy * stride) as i64 - py.beg + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride) as i64 - px.beg + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            s += xp[iy as usize * w + ix as usize];
                            cnt += 1.0;
                        }
                    }
                    yp[oy * px.out + ox] = s / cnt;
                }
            }
        }
    }
    y
}

fn avgpool3_backward(in_shape: [usize; 4], grad_out: &Tensor4, stride: usize) -> Tensor4 {
    let [b, c, h, w] = in_shape;
    let py = same_pad(h, 3, stride, 1);
    let px = same_pad(w, 3, stride, 1);
    let mut gx = Tensor4::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let gop = grad_out.plane(bi, ci);
            let gxp = gx.plane_mut(bi, ci);
            for oy in 0..py.out {
                for ox in 0..px.out {
                    let mut cnt = 0.0;
                    for ky in 0..3 {
                        let iy = (oy * stride) as i64 - py.beg + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride) as i64 - px.beg + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            cnt += 1.0;
                            let _ = (iy, ix);
                        }
                    }
                    let g = gop[oy * px.out + ox] / cnt;
                    for ky in 0..3 {
                        let iy = (oy * stride) as i64 - py.beg + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride) as i64 - px.beg + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            gxp[iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Strided spatial subsample: y[..., i, j] = x[..., i*s, j*s].
pub fn spatial_subsample(x: &Tensor4, stride: usize) -> Tensor4 {
    if stride == 1 {
        return x.clone();
    }
    let [b, c, h, w] = x.shape();
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let xp = x.plane(bi, ci);
            let yp = y.plane_mut(bi, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    yp[oy * ow + ox] = xp[oy * stride * w + ox * stride];
                }
            }
        }
    }
    y
}

pub fn spatial_subsample_backward(
    in_shape: [usize; 4],
    grad_out: &Tensor4,
    stride: usize,
) -> Tensor4 {
    if stride == 1 {
        return grad_out.clone();
    }
    let [b, c, _h, w] = in_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let mut gx = Tensor4::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let gop = grad_out.plane(bi, ci);
            let gxp = gx.plane_mut(bi, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    gxp[oy * stride * w + ox * stride] += gop[oy * ow + ox];
                }
            }
        }
    }
    gx
}

/// Weightless channel-count adapter between cells. Contracts by averaging
/// groups of `in/out` consecutive channels, or expands by repeating each
/// channel `out/in` times. One count must divide the other.
pub fn align_channels(x: &Tensor4, target: usize) -> Result<Tensor4> {
    let [b, c, h, w] = x.shape();
    if c == target {
        return Ok(x.clone());
    }
    let mut y = Tensor4::zeros([b, target, h, w]);
    if c % target == 0 {
        let f = c / target;
        let inv = 1.0 / f as f64;
        for bi in 0..b {
            for co in 0..target {
                let yp = y.plane_mut(bi, co);
                yp.fill(0.0);
                for k in 0..f {
                    let xp = x.plane(bi, co * f + k);
                    for i in 0..yp.len() {
                        yp[i] += xp[i];
                    }
                }
                for v in yp.iter_mut() {
                    *v *= inv;
                }
            }
        }
        Ok(y)
    } else if target % c == 0 {
        let f = target / c;
        for bi in 0..b {
            for co in 0..target {
                let src = x.plane(bi, co / f).to_vec();
                y.plane_mut(bi, co).copy_from_slice(&src);
            }
        }
        Ok(y)
    } else {
        Err(Error::ShapeMismatch {
            op: "align_channels",
            detail: format!("{c} channels cannot align to {target}"),
        })
    }
}

pub fn align_channels_backward(in_channels: usize, grad_out: &Tensor4) -> Tensor4 {
    let [b, target, h, w] = grad_out.shape();
    let c = in_channels;
    if c == target {
        return grad_out.clone();
    }
    let mut gx = Tensor4::zeros([b, c, h, w]);
    if c % target == 0 {
        let f = c / target;
        let inv = 1.0 / f as f64;
        for bi in 0..b {
            for co in 0..target {
                let gop = grad_out.plane(bi, co).to_vec();
                for k in 0..f {
                    let gxp = gx.plane_mut(bi, co * f + k);
                    for i in 0..gop.len() {
                        gxp[i] += gop[i] * inv;
                    }
                }
            }
        }
    } else {
        let f = target / c;
        for bi in 0..b {
            for co in 0..target {
                let gop = grad_out.plane(bi, co).to_vec();
                let gxp = gx.plane_mut(bi, co / f);
                for i in 0..gop.len() {
                    gxp[i] += gop[i];
                }
            }
        }
    }
    gx
}

// ------------------------------------------------------------------ op level

#[derive(Debug, Clone)]
enum StageTrace {
    /// ReLU -> depthwise -> pointwise -> norm.
    Sep {
        x: Tensor4,
        r: Tensor4,
        dw_out: Tensor4,
        norm: NormTrace,
        stride: usize,
    },
    /// conv -> norm (stem).
    Stem { x: Tensor4, norm: NormTrace },
}

/// Saved activations of one `op_forward` call.
#[derive(Debug, Clone)]
pub struct OpTrace {
    kind: OpKind,
    stride: usize,
    in_shape: [usize; 4],
    detail: TraceDetail,
}

#[derive(Debug, Clone)]
enum TraceDetail {
    Identity,
    MaxPool { argmax: Vec<usize> },
    AvgPool,
    Conv { stages: Vec<StageTrace> },
}

impl OpTrace {
    pub fn kind(&self) -> OpKind {
        self.kind
    }
}

fn sep_stage(
    x: &Tensor4,
    dw: &Tensor4,
    pw: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    stride: usize,
    dilation: usize,
) -> (Tensor4, StageTrace) {
    let r = relu(x);
    let dw_out = depthwise(&r, dw, stride, dilation);
    let pw_out = conv2d(&dw_out, pw, 1, 1);
    let (y, norm) = norm_forward(&pw_out, gamma, beta);
    (
        y,
        StageTrace::Sep {
            x: x.clone(),
            r,
            dw_out,
            norm,
            stride,
        },
    )
}

/// Backward of one ReLU-dw-pw-norm stage. `tensors`/`grads` are the
/// 4-slot [dw, pw, gamma, beta] slices of the owning block.
fn sep_stage_backward(
    trace: &StageTrace,
    tensors: &[Tensor4],
    grads: &mut [Tensor4],
    grad_out: &Tensor4,
    dilation: usize,
) -> Tensor4 {
    let StageTrace::Sep {
        x,
        r,
        dw_out,
        norm,
        stride,
    } = trace
    else {
        unreachable!()
    };
    let (gdw, rest) = grads.split_at_mut(1);
    let (gpw, rest) = rest.split_at_mut(1);
    let (gg, gb) = rest.split_at_mut(1);
    let g_pw_out = norm_backward(norm, &tensors[2], &mut gg[0], &mut gb[0], grad_out);
    let g_dw_out = conv2d_backward(dw_out, &tensors[1], &mut gpw[0], &g_pw_out, 1, 1);
    let g_r = depthwise_backward(r, &tensors[0], &mut gdw[0], &g_dw_out, *stride, dilation);
    relu_backward(x, &g_r)
}

/// Run one operation forward. Candidate ops preserve the channel count and
/// reduce spatial dims by `stride`.
pub fn op_forward(
    kind: OpKind,
    params: &ParamBlock,
    input: &Tensor4,
    stride: usize,
) -> Result<(Tensor4, OpTrace)> {
    if params.kind != kind {
        return Err(Error::ShapeMismatch {
            op: "op_forward",
            detail: format!("params built for {:?}, called as {:?}", params.kind, kind),
        });
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("stride {stride} not in {{1, 2}}")));
    }
    input.ensure_finite("op_forward")?;
    let in_shape = input.shape();
    let (out, detail) = match kind {
        OpKind::Identity => (spatial_subsample(input, stride), TraceDetail::Identity),
        OpKind::MaxPool3 => {
            let (y, argmax) = maxpool3(input, stride);
            (y, TraceDetail::MaxPool { argmax })
        }
        OpKind::AvgPool3 => (avgpool3(input, stride), TraceDetail::AvgPool),
        OpKind::SepConv3 | OpKind::SepConv5 => {
            let t = &params.tensors;
            check_channels(kind, t[0].shape()[0], in_shape[1])?;
            let (mid, s1) = sep_stage(input, &t[0], &t[1], &t[2], &t[3], stride, 1);
            let (y, s2) = sep_stage(&mid, &t[4], &t[5], &t[6], &t[7], 1, 1);
            (y, TraceDetail::Conv { stages: vec![s1, s2] })
        }
        OpKind::DilConv3 | OpKind::DilConv5 => {
            let t = &params.tensors;
            check_channels(kind, t[0].shape()[0], in_shape[1])?;
            let (y, s) = sep_stage(input, &t[0], &t[1], &t[2], &t[3], stride, 2);
            (y, TraceDetail::Conv { stages: vec![s] })
        }
        OpKind::StemConv => {
            let t = &params.tensors;
            check_channels(kind, t[0].shape()[1], in_shape[1])?;
            let conv_out = conv2d(input, &t[0], 1, 1);
            let (y, norm) = norm_forward(&conv_out, &t[1], &t[2]);
            (
                y,
                TraceDetail::Conv {
                    stages: vec![StageTrace::Stem {
                        x: input.clone(),
                        norm,
                    }],
                },
            )
        }
        OpKind::LinearHead => {
            return Err(Error::InvalidArgument(
                "LinearHead goes through head_forward, not op_forward".into(),
            ))
        }
    };
    out.ensure_finite("op_forward")?;
    Ok((
        out,
        OpTrace {
            kind,
            stride,
            in_shape,
            detail,
        },
    ))
}

fn check_channels(kind: OpKind, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            op: "op_forward",
            detail: format!("{kind:?} expects {expected} channels, input has {got}"),
        });
    }
    Ok(())
}

/// Backpropagate one operation. Parameter gradients accumulate into
/// `params.grads`; the returned tensor is the input gradient.
pub fn op_backward(
    kind: OpKind,
    params: &mut ParamBlock,
    trace: &OpTrace,
    grad_out: &Tensor4,
) -> Result<Tensor4> {
    if trace.kind != kind || params.kind != kind {
        return Err(Error::BackwardWithoutForward("op kind does not match trace"));
    }
    match (&trace.detail, kind) {
        (TraceDetail::Identity, _) => Ok(spatial_subsample_backward(
            trace.in_shape,
            grad_out,
            trace.stride,
        )),
        (TraceDetail::MaxPool { argmax }, _) => {
            let mut gx = Tensor4::zeros(trace.in_shape);
            for (o, &i) in argmax.iter().enumerate() {
                gx.data_mut()[i] += grad_out.data()[o];
            }
            Ok(gx)
        }
        (TraceDetail::AvgPool, _) => Ok(avgpool3_backward(trace.in_shape, grad_out, trace.stride)),
        (TraceDetail::Conv { stages }, OpKind::SepConv3 | OpKind::SepConv5) => {
            let tensors = &params.tensors;
            let (g1, g2) = params.grads.split_at_mut(4);
            let g_mid = sep_stage_backward(&stages[1], &tensors[4..8], g2, grad_out, 1);
            Ok(sep_stage_backward(&stages[0], &tensors[0..4], g1, &g_mid, 1))
        }
        (TraceDetail::Conv { stages }, OpKind::DilConv3 | OpKind::DilConv5) => {
            let tensors = &params.tensors;
            Ok(sep_stage_backward(
                &stages[0],
                &tensors[0..4],
                &mut params.grads[0..4],
                grad_out,
                2,
            ))
        }
        (TraceDetail::Conv { stages }, OpKind::StemConv) => {
            let StageTrace::Stem { x, norm } = &stages[0] else {
                return Err(Error::BackwardWithoutForward("stem trace malformed"));
            };
            let tensors = &params.tensors;
            let (gw, rest) = params.grads.split_at_mut(1);
            let (gg, gb) = rest.split_at_mut(1);
            let g_conv = norm_backward(norm, &tensors[1], &mut gg[0], &mut gb[0], grad_out);
            Ok(conv2d_backward(x, &tensors[0], &mut gw[0], &g_conv, 1, 1))
        }
        _ => Err(Error::BackwardWithoutForward("trace/kind mismatch")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_stride1_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input([2, 3, 5, 5], &mut rng);
        let p = ParamBlock::empty(OpKind::Identity);
        let (y, _) = op_forward(OpKind::Identity, &p, &x, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_constant_field_stays_constant() {
        let mut x = Tensor4::zeros([1, 2, 6, 6]);
        x.fill(5.0);
        let p = ParamBlock::empty(OpKind::MaxPool3);
        let (y, _) = op_forward(OpKind::MaxPool3, &p, &x, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn avgpool_constant_field_stays_constant() {
        let mut x = Tensor4::zeros([1, 1, 5, 5]);
        x.fill(2.5);
        let p = ParamBlock::empty(OpKind::AvgPool3);
        let (y, _) = op_forward(OpKind::AvgPool3, &p, &x, 1).unwrap();
        for &v in y.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn avgpool_backward_interior_value_is_one() {
        // Interior input pixels sit in 9 windows, each contributing 1/9.
        let x = Tensor4::zeros([1, 1, 6, 6]);
        let p = ParamBlock::empty(OpKind::AvgPool3);
        let mut pm = p.clone();
        let (y, trace) = op_forward(OpKind::AvgPool3, &p, &x, 1).unwrap();
        let mut go = Tensor4::zeros(y.shape());
        go.fill(1.0);
        let gx = op_backward(OpKind::AvgPool3, &mut pm, &trace, &go).unwrap();
        assert!((gx.at(0, 0, 3, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sepconv_stride2_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input([2, 8, 16, 16], &mut rng);
        let p = ParamBlock::candidate(OpKind::SepConv3, 8, &mut rng);
        let (y, _) = op_forward(OpKind::SepConv3, &p, &x, 2).unwrap();
        assert_eq!(y.shape(), [2, 8, 8, 8]);
    }

    #[test]
    fn identity_backward_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input([2, 3, 4, 4], &mut rng);
        let p = ParamBlock::empty(OpKind::Identity);
        let mut pm = p.clone();
        let (_, trace) = op_forward(OpKind::Identity, &p, &x, 1).unwrap();
        let go = random_input([2, 3, 4, 4], &mut rng);
        let gx = op_backward(OpKind::Identity, &mut pm, &trace, &go).unwrap();
        assert_eq!(gx, go);
    }

    #[test]
    fn backward_with_mismatched_trace_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_input([1, 2, 4, 4], &mut rng);
        let p = ParamBlock::empty(OpKind::Identity);
        let (_, trace) = op_forward(OpKind::Identity, &p, &x, 1).unwrap();
        let mut other = ParamBlock::empty(OpKind::MaxPool3);
        let go = Tensor4::zeros([1, 2, 4, 4]);
        assert!(op_backward(OpKind::MaxPool3, &mut other, &trace, &go).is_err());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = Tensor4::zeros([1, 1, 2, 2]);
        x.data_mut()[0] = f64::NAN;
        let p = ParamBlock::empty(OpKind::Identity);
        assert!(op_forward(OpKind::Identity, &p, &x, 1).is_err());
    }

    #[test]
    fn normalized_batch_has_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_input([4, 3, 6, 6], &mut rng);
        let mut gamma = Tensor4::zeros([1, 3, 1, 1]);
        gamma.fill(1.0);
        let beta = Tensor4::zeros([1, 3, 1, 1]);
        let (_, trace) = norm_forward(&x, &gamma, &beta);
        let [b, c, h, w] = trace.xhat.shape();
        let n = (b * h * w) as f64;
        for ci in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for bi in 0..b {
                for v in trace.xhat.plane(bi, ci) {
                    mean += v;
                }
            }
            mean /= n;
            for bi in 0..b {
                for v in trace.xhat.plane(bi, ci) {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n;
            assert!(mean.abs() <= 1e-6, "channel mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "channel var {var}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_input([2, 4, 8, 8], &mut rng);
        let p = ParamBlock::candidate(OpKind::DilConv5, 4, &mut rng);
        let (y1, _) = op_forward(OpKind::DilConv5, &p, &x, 1).unwrap();
        let (y2, _) = op_forward(OpKind::DilConv5, &p, &x, 1).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn align_channels_contract_and_expand() {
        let mut x = Tensor4::zeros([1, 4, 2, 2]);
        for c in 0..4 {
            x.plane_mut(0, c).fill(c as f64);
        }
        let y = align_channels(&x, 2).unwrap();
        assert_eq!(y.plane(0, 0)[0], 0.5);
        assert_eq!(y.plane(0, 1)[0], 2.5);
        let z = align_channels(&y, 4).unwrap();
        assert_eq!(z.plane(0, 0)[0], 0.5);
        assert_eq!(z.plane(0, 1)[0], 0.5);
        assert_eq!(z.plane(0, 2)[0], 2.5);
    }

    pub(crate) fn random_input<R: rand::Rng>(shape: [usize; 4], rng: &mut R) -> Tensor4 {
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }
}
