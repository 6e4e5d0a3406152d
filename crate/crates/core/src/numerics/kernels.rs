//! Slice-level forward/backward kernels. Shapes are validated by the tape.

/// `c = a' * b' + beta * c` where `a'` is `[m, k]` and `b'` is `[k, n]`,
/// each optionally stored transposed. All buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // row-major buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[C, H, W]` sample into `[C*k*k, Ho*Wo]`.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let hw_out = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters columns back, accumulating into `dx`.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = ii as usize * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            plane[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * cout * cols];
    let in_len = g.cin * g.h * g.w;
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut col);
        let y = &mut out[s * cout * cols..(s + 1) * cout * cols];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(cout, rows, cols, w, false, &col, false, beta, y);
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    cout: usize,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let rows = g.col_rows();
    let cols = g.col_cols();
    let in_len = g.cin * g.h * g.w;
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = need_db.then(|| vec![0.0; cout]);
    for s in 0..n {
        let dys = &dy[s * cout * cols..(s + 1) * cout * cols];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(cols).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut col);
            gemm(cout, cols, rows, dys, false, &col, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, cout, cols, w, true, dys, false, 0.0, &mut dcol);
            col2im(&dcol, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) normalization. Returns `(y, xhat, inv_std)`.
pub(crate) fn group_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * spatial) as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let lo = (s * c + gi * cg) * spatial;
            let hi = lo + cg * spatial;
            let block = &x[lo..hi];
            // An exactly constant block normalizes to exactly zero.
            let mean = if block.iter().all(|&v| v == block[0]) {
                block[0]
            } else {
                block.iter().sum::<f64>() / m
            };
            let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[s * groups + gi] = is;
            for (i, &v) in block.iter().enumerate() {
                let ch = gi * cg + i / spatial;
                let xh = (v - mean) * is;
                xhat[lo + i] = xh;
                y[lo + i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

pub(crate) struct GroupNormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[f64],
) -> GroupNormGrads {
    let cg = c / groups;
    let m = (cg * spatial) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for gi in 0..groups {
            let lo = (s * c + gi * cg) * spatial;
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for i in 0..cg * spatial {
                let ch = gi * cg + i / spatial;
                let g = dy[lo + i];
                let xh = xhat[lo + i];
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
                let dxh = g * gamma[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            let is = inv_std[s * groups + gi];
            for i in 0..cg * spatial {
                let ch = gi * cg + i / spatial;
                let dxh = dy[lo + i] * gamma[ch];
                dx[lo + i] = is / m * (m * dxh - sum_dxh - xhat[lo + i] * sum_dxh_xh);
            }
        }
    }
    GroupNormGrads { dx, dgamma, dbeta }
}

/// Row-wise numerically stable softmax over rows of length `len`.
pub(crate) fn softmax_rows(x: &[f64], len: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (src, dst) in x.chunks(len).zip(y.chunks_mut(len)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    y
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    }
    dx
}

/// Right-aligned broadcast of `shape` to `out`; returns per-axis strides of
/// the operand in the output's axis order (0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Maps each output element to its source index in a broadcast operand.
pub(crate) fn broadcast_index(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    if out.is_empty() {
        idx.push(0);
        return idx;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    let outer: usize = out[..rank - 1].iter().product();
    for _ in 0..outer {
        for j in 0..inner {
            idx.push(base + j * inner_stride);
        }
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            base -= strides[ax] * out[ax];
            counter[ax] = 0;
        }
    }
    idx
}
