//! Dense numeric kernels shared by the forward, reverse and tangent passes.

/// Strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Column block `[col0, col0 + cols)` of a row-major `rows x stride` buffer.
    pub fn block(data: &'a [f64], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        View { data, offset: col0, rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Strided mutable matrix view.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        ViewMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn block(data: &'a mut [f64], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        ViewMut { data, offset: col0, rows, cols, rs: stride, cs: 1 }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm rows");
    assert_eq!(b.cols, c.cols, "gemm cols");
    assert!(a.last_index() < a.data.len());
    assert!(b.last_index() < b.data.len());
    assert!(c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len());
    // SAFETY: every view was bounds-checked above and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-major product of `[m, k]` and `[k, n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        View::row_major(a, m, k),
        View::row_major(b, k, n),
        0.0,
        ViewMut::row_major(&mut out, m, n),
    );
    out
}

/// How an operand maps onto a broadcast output.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// Operand repeats with this period (trailing-shape broadcast).
    Tile(usize),
    /// Operand has a trailing unit axis repeated this many times.
    Stretch(usize),
    General(Vec<usize>),
}

impl Broadcast {
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Tile(p) => i % p,
            Broadcast::Stretch(r) => i / r,
            Broadcast::General(map) => map[i],
        }
    }
}

/// NumPy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

pub(crate) fn broadcast_plan(out: &[usize], input: &[usize]) -> Broadcast {
    let numel_in: usize = input.iter().product();
    let numel_out: usize = out.iter().product();
    if numel_in == numel_out {
        return Broadcast::Same;
    }
    if numel_in == 1 {
        return Broadcast::Scalar;
    }
    // Strip leading unit axes.
    let trimmed: Vec<usize> = {
        let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
        input[first..].to_vec()
    };
    if out.ends_with(&trimmed) {
        return Broadcast::Tile(numel_in);
    }
    if input.len() == out.len()
        && input.last() == Some(&1)
        && input[..input.len() - 1] == out[..out.len() - 1]
    {
        return Broadcast::Stretch(*out.last().unwrap());
    }
    // General strided map.
    let rank = out.len();
    let padded: Vec<usize> =
        std::iter::repeat_n(1, rank - input.len()).chain(input.iter().copied()).collect();
    let mut in_strides = vec![0; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        in_strides[i] = if padded[i] == 1 { 0 } else { s };
        s *= padded[i];
    }
    let mut map = Vec::with_capacity(numel_out);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel_out {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Broadcast::General(map)
}

/// Sums `grad` (output-shaped) back onto an operand of `numel` elements.
pub(crate) fn reduce_broadcast(grad: &[f64], plan: &Broadcast, numel: usize) -> Vec<f64> {
    if let Broadcast::Same = plan {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel];
    for (i, g) in grad.iter().enumerate() {
        out[plan.index(i)] += g;
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Value and derivative sharing one tanh.
pub(crate) fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let y = 0.5 * x * (1.0 + t);
    (y, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax over the last axis of a `rows x cols` buffer.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Applies the (symmetric) softmax Jacobian `diag(p) - p p^T` row by row.
pub(crate) fn softmax_jac_apply(p: &[f64], v: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((pr, vr), or) in p.chunks_exact(cols).zip(v.chunks_exact(cols)).zip(out.chunks_exact_mut(cols)) {
        let dot: f64 = pr.iter().zip(vr).map(|(a, b)| a * b).sum();
        for ((o, &pi), &vi) in or.iter_mut().zip(pr).zip(vr) {
            *o = pi * (vi - dot);
        }
    }
    out
}

/// Layer normalisation over the last axis; returns the normalised values and per-row 1/sigma.
pub(crate) fn layer_norm_rows(x: &[f64], cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / cols);
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = src.iter().sum::<f64>() / cols as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        inv_std.push(r);
    }
    (out, inv_std)
}

/// Applies the (symmetric) layer-norm Jacobian `r (I - 11^T/n - y y^T/n)` row by row.
pub(crate) fn layer_norm_jac_apply(y: &[f64], inv_std: &[f64], v: &[f64], cols: usize) -> Vec<f64> {
    let n = cols as f64;
    let mut out = vec![0.0; y.len()];
    for (((yr, vr), or), &r) in
        y.chunks_exact(cols).zip(v.chunks_exact(cols)).zip(out.chunks_exact_mut(cols)).zip(inv_std)
    {
        let mean_v = vr.iter().sum::<f64>() / n;
        let mean_vy = vr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &vi), &yi) in or.iter_mut().zip(vr).zip(yr) {
            *o = r * (vi - mean_v - yi * mean_vy);
        }
    }
    out
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[nq, d]`, `k`/`v` are `[nk, d]`; heads split the feature axis into
/// contiguous blocks. Returns the output `[nq, d]` and the attention
/// probabilities laid out `[heads, nq, nk]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; heads * nq * nk];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            scale,
            View::block(q, nq, d, h * dh, dh),
            View::block(k, nk, d, h * dh, dh).t(),
            0.0,
            ViewMut::row_major(p, nq, nk),
        );
        let sm = softmax_rows(p, nk);
        p.copy_from_slice(&sm);
        gemm(
            1.0,
            View::row_major(p, nq, nk),
            View::block(v, nk, d, h * dh, dh),
            0.0,
            ViewMut::block(&mut out, nq, d, h * dh, dh),
        );
    }
    (out, probs)
}

/// Reverse pass of [`attention_forward`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let dout_h = View::block(dout, nq, d, h * dh, dh);
        // dV_h = P^T dO_h
        gemm(1.0, View::row_major(p, nq, nk).t(), dout_h, 0.0, ViewMut::block(&mut dv, nk, d, h * dh, dh));
        // dP = dO_h V_h^T
        gemm(1.0, dout_h, View::block(v, nk, d, h * dh, dh).t(), 0.0, ViewMut::row_major(&mut dp, nq, nk));
        let ds = softmax_jac_apply(p, &dp, nk);
        gemm(
            scale,
            View::row_major(&ds, nq, nk),
            View::block(k, nk, d, h * dh, dh),
            0.0,
            ViewMut::block(&mut dq, nq, d, h * dh, dh),
        );
        gemm(
            scale,
            View::row_major(&ds, nq, nk).t(),
            View::block(q, nq, d, h * dh, dh),
            0.0,
            ViewMut::block(&mut dk, nk, d, h * dh, dh),
        );
    }
    (dq, dk, dv)
}

/// Tangent pass of [`attention_forward`]; missing tangents are zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_tangent(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    tq: Option<&[f64]>,
    tk: Option<&[f64]>,
    tv: Option<&[f64]>,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut ts = vec![0.0; nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let mut have_ts = false;
        if let Some(tq) = tq {
            gemm(
                scale,
                View::block(tq, nq, d, h * dh, dh),
                View::block(k, nk, d, h * dh, dh).t(),
                0.0,
                ViewMut::row_major(&mut ts, nq, nk),
            );
            have_ts = true;
        }
        if let Some(tk) = tk {
            gemm(
                scale,
                View::block(q, nq, d, h * dh, dh),
                View::block(tk, nk, d, h * dh, dh).t(),
                if have_ts { 1.0 } else { 0.0 },
                ViewMut::row_major(&mut ts, nq, nk),
            );
            have_ts = true;
        }
        if have_ts {
            let tp = softmax_jac_apply(p, &ts, nk);
            gemm(
                1.0,
                View::row_major(&tp, nq, nk),
                View::block(v, nk, d, h * dh, dh),
                0.0,
                ViewMut::block(&mut out, nq, d, h * dh, dh),
            );
        }
        if let Some(tv) = tv {
            gemm(
                1.0,
                View::row_major(p, nq, nk),
                View::block(tv, nk, d, h * dh, dh),
                if have_ts { 1.0 } else { 0.0 },
                ViewMut::block(&mut out, nq, d, h * dh, dh),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_plans() {
        assert!(matches!(broadcast_plan(&[4, 3], &[3]), Broadcast::Tile(3)));
        assert!(matches!(broadcast_plan(&[4, 3], &[1, 3]), Broadcast::Tile(3)));
        assert!(matches!(broadcast_plan(&[4, 3], &[4, 1]), Broadcast::Stretch(3)));
        assert!(matches!(broadcast_plan(&[4, 3], &[1]), Broadcast::Scalar));
        let plan = broadcast_plan(&[2, 3, 2], &[2, 1, 2]);
        let idx: Vec<usize> = (0..12).map(|i| plan.index(i)).collect();
        assert_eq!(idx, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        assert_eq!(broadcast_shape(&[4, 1], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 2], &[3]), None);
    }

    #[test]
    fn strided_gemm_matches_naive() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 4x2
        let c = matmul(&a, &b, 3, 4, 2);
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| a[i * 4 + p] * b[p * 2 + j]).sum();
                assert!((c[i * 2 + j] - want).abs() < 1e-14);
            }
        }
    }
}
