//! Forward kernels over [`Array`]s.
//!
//! These are the plain (non-differentiable) definitions. The tape in
//! [`super::tape`] reuses them for its forward pass and adds the matching
//! backward rules.

use rand::Rng;

use super::{Array, NumericsError};

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f32 = -1e9;

/// Entries at or below this are treated as "disallowed" when checking for
/// fully masked rows.
pub(crate) const MASK_CUTOFF: f32 = MASK_NEG * 0.5;

pub const LAYER_NORM_EPS: f32 = 1e-5;

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as the logical matrix.
    Normal,
    /// Stored as the transpose of the logical matrix.
    Transposed,
}

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of shape
/// `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the m*k, k*n and m*n elements addressed
    // through the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array, NumericsError> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = Array::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        Layout::Normal,
        b.data(),
        Layout::Normal,
        out.data_mut(),
        false,
    );
    Ok(out)
}

/// `a * b^T`.
pub fn matmul_nt(a: &Array, b: &Array) -> Result<Array, NumericsError> {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    if k != k2 {
        return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", a.shape(), b.shape())));
    }
    let mut out = Array::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        a.data(),
        Layout::Normal,
        b.data(),
        Layout::Transposed,
        out.data_mut(),
        false,
    );
    Ok(out)
}

pub fn add(a: &Array, b: &Array) -> Result<Array, NumericsError> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn scale(x: &Array, factor: f32) -> Array {
    x.map(|v| v * factor)
}

/// `x + bias` with `bias` broadcast over rows.
pub fn add_bias(x: &Array, bias: &Array) -> Result<Array, NumericsError> {
    let cols = x.cols();
    if bias.len() != cols {
        return Err(shape_err("add_bias", format!("{:?} + {:?}", x.shape(), bias.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += *b;
        }
    }
    Ok(out)
}

/// `x W + b` with `W` stored `in x out`.
pub fn linear(x: &Array, w: &Array, b: Option<&Array>) -> Result<Array, NumericsError> {
    let out = matmul(x, w)?;
    match b {
        Some(b) => add_bias(&out, b),
        None => Ok(out),
    }
}

/// Row-wise softmax of `x + mask`, returning the number of rows whose mask
/// disallowed every position. Such rows are set to zero.
///
/// `mask` is either `rows x cols` or a single row broadcast to every row.
pub(crate) fn masked_softmax_rows(x: &Array, mask: Option<&Array>) -> Result<(Array, usize), NumericsError> {
    let (rows, cols) = x.dims2();
    if let Some(m) = mask {
        let (mr, mc) = m.dims2();
        if mc != cols || (mr != 1 && mr != rows) {
            return Err(shape_err("softmax", format!("x {:?} mask {:?}", x.shape(), m.shape())));
        }
    }
    let mut out = Array::zeros(x.shape());
    let mut all_masked = 0;
    for r in 0..rows {
        let xr = x.row(r);
        let mr = mask.map(|m| if m.rows() == 1 { m.row(0) } else { m.row(r) });
        if let Some(mr) = mr {
            if mr.iter().all(|&v| v <= MASK_CUTOFF) {
                all_masked += 1;
                continue;
            }
        }
        let orow = out.row_mut(r);
        let mut max = f32::NEG_INFINITY;
        for c in 0..cols {
            let v = xr[c] + mr.map_or(0.0, |m| m[c]);
            orow[c] = v;
            max = max.max(v);
        }
        let mut sum = 0.0f32;
        for v in orow.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        orow.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((out, all_masked))
}

/// Softmax along `axis` (0 = down columns, 1 = along rows) of a matrix.
pub fn softmax(x: &Array, axis: usize) -> Result<Array, NumericsError> {
    match axis {
        1 => Ok(masked_softmax_rows(x, None)?.0),
        0 => {
            let t = transpose(x);
            Ok(transpose(&masked_softmax_rows(&t, None)?.0))
        }
        _ => Err(shape_err("softmax", format!("axis {axis} on {:?}", x.shape()))),
    }
}

pub fn transpose(x: &Array) -> Array {
    let (r, c) = x.dims2();
    let mut out = Array::zeros(&[c, r]);
    let src = x.data();
    let dst = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Row-wise layer normalization. Returns the output together with the
/// normalized pre-affine values and per-row reciprocal standard deviations.
pub(crate) fn layer_norm_parts(
    x: &Array,
    gain: &Array,
    bias: &Array,
    eps: f32,
) -> Result<(Array, Vec<f32>, Vec<f32>), NumericsError> {
    let (rows, cols) = x.dims2();
    if gain.len() != cols || bias.len() != cols {
        return Err(shape_err(
            "layer_norm",
            format!("x {:?} gain {:?} bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(shape_err("layer_norm", format!("eps must be positive, got {eps}")));
    }
    let mut out = Array::zeros(x.shape());
    let mut xhat = vec![0.0f32; rows * cols];
    let mut rstd = vec![0.0f32; rows];
    let n = cols as f32;
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f32>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        let hr = &mut xhat[r * cols..(r + 1) * cols];
        let orow = out.row_mut(r);
        for c in 0..cols {
            let h = (xr[c] - mean) * rs;
            hr[c] = h;
            orow[c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((out, xhat, rstd))
}

pub fn layer_norm(x: &Array, gain: &Array, bias: &Array, eps: f32) -> Result<Array, NumericsError> {
    Ok(layer_norm_parts(x, gain, bias, eps)?.0)
}

/// Samples an inverted-dropout mask: kept units carry `1/(1-p)`, dropped 0.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f32, rng: &mut R) -> Result<Vec<f32>, NumericsError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumericsError::InvalidProbability(p));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
        .collect())
}

/// Inverted dropout. In eval mode (or `p == 0`) the input is returned
/// unchanged.
pub fn dropout<R: Rng + ?Sized>(x: &Array, p: f32, train: bool, rng: &mut R) -> Result<Array, NumericsError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumericsError::InvalidProbability(p));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok(out)
}

/// Gathers rows of `table` for each id.
pub fn embed(table: &Array, ids: &[u32]) -> Result<Array, NumericsError> {
    let (rows, cols) = table.dims2();
    let mut out = Array::zeros(&[ids.len(), cols]);
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= rows {
            return Err(shape_err("embed", format!("id {id} out of range for {rows} rows")));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: &Array) -> Array {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Columns `[start, start + len)` of a matrix (head split).
pub fn slice_cols(x: &Array, start: usize, len: usize) -> Result<Array, NumericsError> {
    let (rows, cols) = x.dims2();
    if start + len > cols {
        return Err(shape_err("slice_cols", format!("[{start}, {}) of {cols}", start + len)));
    }
    let mut out = Array::zeros(&[rows, len]);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
    }
    Ok(out)
}

/// Splits a `t x d` matrix into `heads` column blocks of width `d / heads`.
pub fn split_heads(x: &Array, heads: usize) -> Result<Vec<Array>, NumericsError> {
    let d = x.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NumericsError::IndivisibleHeads { d_model: d, heads });
    }
    let dh = d / heads;
    (0..heads).map(|h| slice_cols(x, h * dh, dh)).collect()
}

/// Inverse of [`split_heads`].
pub fn concat_heads(parts: &[Array]) -> Result<Array, NumericsError> {
    let rows = parts.first().map_or(0, Array::rows);
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(shape_err("concat_heads", "row counts differ".into()));
    }
    let total: usize = parts.iter().map(Array::cols).sum();
    let mut out = Array::zeros(&[rows, total]);
    for r in 0..rows {
        let orow = out.row_mut(r);
        let mut off = 0;
        for p in parts {
            let w = p.cols();
            orow[off..off + w].copy_from_slice(p.row(r));
            off += w;
        }
    }
    Ok(out)
}

/// Diagnostics from [`scaled_dot_attention`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionDiagnostics {
    /// Number of query rows whose mask disallowed every key.
    pub all_masked_rows: usize,
}

impl AttentionDiagnostics {
    pub fn all_masked(&self) -> bool {
        self.all_masked_rows > 0
    }
}

/// `softmax(Q K^T / sqrt(d_h) + mask) V`. Fully masked query rows produce a
/// zero output row and are counted in the diagnostics.
pub fn scaled_dot_attention(
    q: &Array,
    k: &Array,
    v: &Array,
    mask: Option<&Array>,
) -> Result<(Array, AttentionDiagnostics), NumericsError> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(shape_err(
            "attention",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let scores = scale(&matmul_nt(q, k)?, 1.0 / (q.cols() as f32).sqrt());
    let (probs, all_masked_rows) = masked_softmax_rows(&scores, mask)?;
    Ok((matmul(&probs, v)?, AttentionDiagnostics { all_masked_rows }))
}

/// Mean label-smoothed negative log-likelihood over positions whose target is
/// not `ignore_id`.
///
/// Per position: `(1 - s) * NLL(target) + s * mean_j NLL(j)`.
pub fn cross_entropy_smoothed(
    logits: &Array,
    targets: &[u32],
    smoothing: f32,
    ignore_id: u32,
) -> Result<f64, NumericsError> {
    let (per_pos, count) = smoothed_nll_rows(logits, targets, smoothing, ignore_id)?;
    if count == 0 {
        return Err(NumericsError::AllIgnored);
    }
    Ok(per_pos.iter().sum::<f64>() / count as f64)
}

/// Per-position smoothed NLL (zero at ignored positions) and the count of
/// scored positions.
pub(crate) fn smoothed_nll_rows(
    logits: &Array,
    targets: &[u32],
    smoothing: f32,
    ignore_id: u32,
) -> Result<(Vec<f64>, usize), NumericsError> {
    let (rows, vocab) = logits.dims2();
    if targets.len() != rows {
        return Err(shape_err(
            "cross_entropy",
            format!("{} targets for {:?} logits", targets.len(), logits.shape()),
        ));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(NumericsError::InvalidProbability(smoothing));
    }
    let s = smoothing as f64;
    let mut out = vec![0.0f64; rows];
    let mut count = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore_id {
            continue;
        }
        if t as usize >= vocab {
            return Err(shape_err("cross_entropy", format!("target {t} out of range {vocab}")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln();
        let nll_target = lse - row[t as usize] as f64;
        let mean_nll = lse - row.iter().map(|&z| z as f64).sum::<f64>() / vocab as f64;
        out[r] = (1.0 - s) * nll_target + s * mean_nll;
        count += 1;
    }
    Ok((out, count))
}

/// `(1 - e^(-c))^gamma * c`, the focal modulation of a cross-entropy value.
pub fn focal_modulated(ce: f64, gamma: f64) -> f64 {
    let ce = ce.max(0.0);
    if gamma == 0.0 {
        return ce;
    }
    (1.0 - (-ce).exp()).powf(gamma) * ce
}

/// Derivative of [`focal_modulated`] with respect to `ce`.
pub fn focal_modulated_grad(ce: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 1.0;
    }
    let ce = ce.max(0.0);
    let q = 1.0 - (-ce).exp();
    if q <= 0.0 {
        return 0.0;
    }
    gamma * q.powf(gamma - 1.0) * (-ce).exp() * ce + q.powf(gamma)
}
