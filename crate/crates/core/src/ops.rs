//! Forward operations and their hand-written backward passes.
//!
//! Everything is plain `f64` loops over row-major slices. Forward
//! convolution accumulates in row-major `(c, a, b)` order per output
//! element, so it is bit-identical to the nested-loop definition.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ── convolution ─────────────────────────────────────────────────────────

/// Output spatial extent of a valid convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Valid 2-D convolution of a `[C_in, H, W]` input with `[C_out, C_in, kH, kW]`
/// kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (ci, h, w) = expect3(input, "conv2d input")?;
    let (co, kci, kh, kw) = expect4(kernels, "conv2d kernels")?;
    if kci != ci {
        return Err(Error::dimension(
            "conv2d",
            format!("input channels {ci} vs kernel channels {kci}"),
        ));
    }
    if kh > h || kw > w {
        return Err(Error::dimension(
            "conv2d",
            format!("kernel {kh}x{kw} larger than input {h}x{w}"),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    let mut out = vec![0.0; co * ho * wo];
    let cols = im2col(input.data(), ci, h, w, kh, kw, stride);
    conv_forward_cols(kernels.data(), &cols, co, ci * kh * kw, ho * wo, &mut out);
    Tensor::from_vec(&[co, ho, wo], out)
}

/// Gradients of [`conv2d`] given the upstream gradient `d_out`.
///
/// `d_kernels` is accumulated always; `d_input` only when provided.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    d_out: &[f64],
    d_input: Option<&mut [f64]>,
    d_kernels: &mut [f64],
) {
    let (ci, h, w) = expect3(input, "conv2d input").expect("validated in forward");
    let (co, _, kh, kw) = expect4(kernels, "conv2d kernels").expect("validated in forward");
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    let k = ci * kh * kw;
    let q = ho * wo;
    debug_assert_eq!(d_out.len(), co * q);
    debug_assert_eq!(d_kernels.len(), co * k);

    let cols = im2col(input.data(), ci, h, w, kh, kw, stride);
    // dK[o, p] += sum_q dOut[o, q] * cols[p, q]
    for o in 0..co {
        let dout_row = &d_out[o * q..(o + 1) * q];
        let dk_row = &mut d_kernels[o * k..(o + 1) * k];
        for (qi, &g) in dout_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for p in 0..k {
                dk_row[p] += g * cols[p * q + qi];
            }
        }
    }
    if let Some(d_in) = d_input {
        debug_assert_eq!(d_in.len(), ci * h * w);
        // dCols[p, q] = sum_o K[o, p] * dOut[o, q], scattered back to the input
        let mut d_cols = vec![0.0; k * q];
        let kern = kernels.data();
        for o in 0..co {
            let dout_row = &d_out[o * q..(o + 1) * q];
            for p in 0..k {
                let wv = kern[o * k + p];
                if wv == 0.0 {
                    continue;
                }
                let row = &mut d_cols[p * q..(p + 1) * q];
                for (r, &g) in row.iter_mut().zip(dout_row) {
                    *r += wv * g;
                }
            }
        }
        col2im_add(&d_cols, ci, h, w, kh, kw, stride, d_in);
    }
}

/// Gather convolution patches into a `[C_in*kH*kW, H_out*W_out]` matrix.
fn im2col(
    input: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    let q = ho * wo;
    let mut cols = vec![0.0; ci * kh * kw * q];
    let mut p = 0;
    for c in 0..ci {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let row = &mut cols[p * q..(p + 1) * q];
                let mut qi = 0;
                for y in 0..ho {
                    let src = (y * stride + a) * w + b;
                    for x in 0..wo {
                        row[qi] = plane[src + x * stride];
                        qi += 1;
                    }
                }
                p += 1;
            }
        }
    }
    cols
}

fn col2im_add(
    d_cols: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    d_input: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    let q = ho * wo;
    let mut p = 0;
    for c in 0..ci {
        for a in 0..kh {
            for b in 0..kw {
                let row = &d_cols[p * q..(p + 1) * q];
                let mut qi = 0;
                for y in 0..ho {
                    let dst = c * h * w + (y * stride + a) * w + b;
                    for x in 0..wo {
                        d_input[dst + x * stride] += row[qi];
                        qi += 1;
                    }
                }
                p += 1;
            }
        }
    }
}

/// out[o, q] += sum_p kernels[o, p] * cols[p, q], p ascending, so each output
/// element accumulates in the same (c, a, b) order as the definition.
fn conv_forward_cols(
    kernels: &[f64],
    cols: &[f64],
    co: usize,
    k: usize,
    q: usize,
    out: &mut [f64],
) {
    for o in 0..co {
        let out_row = &mut out[o * q..(o + 1) * q];
        let kern_row = &kernels[o * k..(o + 1) * k];
        for (p, &wv) in kern_row.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let col_row = &cols[p * q..(p + 1) * q];
            for (acc, &cv) in out_row.iter_mut().zip(col_row) {
                *acc += wv * cv;
            }
        }
    }
}

// ── per-channel bias and ReLU ───────────────────────────────────────────

/// Add `bias[c]` to every element of channel `c` of a `[C, H, W]` map.
pub fn add_channel_bias(map: &mut [f64], bias: &[f64], spatial: usize) {
    debug_assert_eq!(map.len(), bias.len() * spatial);
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut map[c * spatial..(c + 1) * spatial] {
            *v += b;
        }
    }
}

pub fn channel_bias_backward(d_out: &[f64], spatial: usize, d_bias: &mut [f64]) {
    debug_assert_eq!(d_out.len(), d_bias.len() * spatial);
    for (c, db) in d_bias.iter_mut().enumerate() {
        *db += d_out[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
    }
}

pub fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// d_pre = d_out where pre > 0, else 0 (in place on `d`).
pub fn relu_backward_inplace(pre: &[f64], d: &mut [f64]) {
    for (x, g) in pre.iter().zip(d.iter_mut()) {
        if *x <= 0.0 {
            *g = 0.0;
        }
    }
}

// ── votes: batched matrix-vector products ───────────────────────────────

/// Per-pair matrix-vector product: `out[i, j] = W[i, j] · u[i]` for
/// `W: [I, J, D_out, D_in]` and `u: [I, D_in]`.
pub fn batched_matvec(w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (ni, nj, dout, din) = expect4(w, "batched_matvec W")?;
    let (ui, udin) = expect2(u, "batched_matvec u")?;
    if ui != ni || udin != din {
        return Err(Error::dimension(
            "batched_matvec",
            format!("W is [{ni},{nj},{dout},{din}], u is [{ui},{udin}]"),
        ));
    }
    let mut out = vec![0.0; ni * nj * dout];
    batched_matvec_raw(w.data(), u.data(), ni, nj, dout, din, &mut out);
    Tensor::from_vec(&[ni, nj, dout], out)
}

pub fn batched_matvec_raw(
    w: &[f64],
    u: &[f64],
    ni: usize,
    nj: usize,
    dout: usize,
    din: usize,
    out: &mut [f64],
) {
    for i in 0..ni {
        let ui = &u[i * din..(i + 1) * din];
        for j in 0..nj {
            let base = (i * nj + j) * dout;
            let wbase = base * din;
            for o in 0..dout {
                let row = &w[wbase + o * din..wbase + (o + 1) * din];
                let mut acc = 0.0;
                for (a, b) in row.iter().zip(ui) {
                    acc += a * b;
                }
                out[base + o] = acc;
            }
        }
    }
}

/// Accumulate gradients of [`batched_matvec`]: `d_w` always, `d_u` when given.
pub fn batched_matvec_backward(
    w: &[f64],
    u: &[f64],
    ni: usize,
    nj: usize,
    dout: usize,
    din: usize,
    d_out: &[f64],
    d_w: &mut [f64],
    mut d_u: Option<&mut [f64]>,
) {
    for i in 0..ni {
        let ui = &u[i * din..(i + 1) * din];
        for j in 0..nj {
            let base = (i * nj + j) * dout;
            let wbase = base * din;
            for o in 0..dout {
                let g = d_out[base + o];
                if g == 0.0 {
                    continue;
                }
                let dw_row = &mut d_w[wbase + o * din..wbase + (o + 1) * din];
                for (dw, &uv) in dw_row.iter_mut().zip(ui) {
                    *dw += g * uv;
                }
                if let Some(du) = d_u.as_deref_mut() {
                    let w_row = &w[wbase + o * din..wbase + (o + 1) * din];
                    let du_row = &mut du[i * din..(i + 1) * din];
                    for (dv, &wv) in du_row.iter_mut().zip(w_row) {
                        *dv += g * wv;
                    }
                }
            }
        }
    }
}

// ── squash ──────────────────────────────────────────────────────────────

/// Squash along the last axis: `v = (|s|^2 / (1 + |s|^2)) * (s / |s|)`.
/// The zero vector maps to itself (the analytic limit).
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let shape = s.shape();
    if shape.is_empty() {
        return Err(Error::dimension("squash", "rank-0 tensor".to_string()));
    }
    let d = *shape.last().unwrap();
    let mut out = s.data().to_vec();
    for row in out.chunks_mut(d) {
        squash_row_inplace(row);
    }
    Tensor::from_vec(shape, out)
}

/// Squash one vector in place.
pub fn squash_row_inplace(row: &mut [f64]) {
    let n2: f64 = row.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return;
    }
    let n = n2.sqrt();
    let scale = n / (1.0 + n2);
    for v in row {
        *v *= scale;
    }
}

/// d_s for one squashed vector, given the pre-squash `s_row` and upstream
/// `d_v`. Returns zeros at the s = 0 singularity.
pub fn squash_row_backward(s_row: &[f64], d_v: &[f64], d_s: &mut [f64]) {
    let n2: f64 = s_row.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        d_s.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let n = n2.sqrt();
    let denom = 1.0 + n2;
    let alpha = n / denom;
    // alpha'(n) / n = (1 - n^2) / (n * (1 + n^2)^2)
    let radial = (1.0 - n2) / (n * denom * denom);
    let dot: f64 = s_row.iter().zip(d_v).map(|(a, b)| a * b).sum();
    for ((ds, &sv), &dv) in d_s.iter_mut().zip(s_row).zip(d_v) {
        *ds = alpha * dv + radial * dot * sv;
    }
}

// ── routing softmax ─────────────────────────────────────────────────────

/// Row-stabilized softmax over the last axis of a `[I, J]` tensor.
pub fn softmax_rows(b: &Tensor) -> Result<Tensor> {
    let (_, j) = expect2(b, "softmax_rows")?;
    b.check_finite("softmax_rows input")?;
    let mut out = b.data().to_vec();
    for row in out.chunks_mut(j) {
        softmax_row_inplace(row);
    }
    Tensor::from_vec(b.shape(), out)
}

pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row {
        *v /= sum;
    }
}

/// d_b for one softmax row: `d_b = c * (d_c - <c, d_c>)`.
pub fn softmax_row_backward(c: &[f64], d_c: &[f64], d_b: &mut [f64]) {
    let dot: f64 = c.iter().zip(d_c).map(|(a, b)| a * b).sum();
    for ((db, &cv), &dc) in d_b.iter_mut().zip(c).zip(d_c) {
        *db = cv * (dc - dot);
    }
}

// ── shape helpers ───────────────────────────────────────────────────────

fn expect2(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::dimension(what, format!("expected rank 2, got {s:?}"))),
    }
}

fn expect3(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::dimension(what, format!("expected rank 3, got {s:?}"))),
    }
}

fn expect4(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::dimension(what, format!("expected rank 4, got {s:?}"))),
    }
}
