//! Batched layer kernels. Activations are laid out channel-major as
//! `[C, N, H, W]` so that one channel's values over the whole batch are
//! contiguous; this makes the conv a single GEMM and batch-norm a row op.

pub(crate) const BN_EPS: f32 = 1e-5;

/// Activation batch in `[C, N, H, W]` layout.
#[derive(Clone, Debug)]
pub(crate) struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    /// Stacks `[C, H, W]` samples into one batch.
    pub fn from_samples(samples: &[&[f32]], c: usize, h: usize, w: usize) -> Self {
        let n = samples.len();
        let plane = h * w;
        let mut act = Act::zeros(c, n, h, w);
        for (si, s) in samples.iter().enumerate() {
            for ch in 0..c {
                let dst = (ch * n + si) * plane;
                act.data[dst..dst + plane].copy_from_slice(&s[ch * plane..(ch + 1) * plane]);
            }
        }
        act
    }
}

pub(crate) fn out_len(len: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (len + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `[C*k*k, N*Ho*Wo]` patch matrix (zero padding k/2).
pub(crate) fn im2col(x: &Act, k: usize, stride: usize) -> (Vec<f32>, usize, usize) {
    let pad = k / 2;
    let ho = out_len(x.h, k, stride);
    let wo = out_len(x.w, k, stride);
    let np = x.n * ho * wo;
    let mut col = vec![0.0f32; x.c * k * k * np];
    for ch in 0..x.c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ch * k + kh) * k + kw;
                let dst = &mut col[r * np..(r + 1) * np];
                for s in 0..x.n {
                    let src = &x.data[(ch * x.n + s) * x.h * x.w..(ch * x.n + s + 1) * x.h * x.w];
                    for oy in 0..ho {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let drow = &mut dst[(s * ho + oy) * wo..(s * ho + oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

/// Scatter-adds a patch-matrix gradient back onto input positions.
pub(crate) fn col2im(dcol: &[f32], c: usize, n: usize, h: usize, w: usize, k: usize, stride: usize) -> Act {
    let pad = k / 2;
    let ho = out_len(h, k, stride);
    let wo = out_len(w, k, stride);
    let np = n * ho * wo;
    let mut dx = Act::zeros(c, n, h, w);
    for ch in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ch * k + kh) * k + kw;
                let src = &dcol[r * np..(r + 1) * np];
                for s in 0..n {
                    let dst = &mut dx.data[(ch * n + s) * h * w..(ch * n + s + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(s * ho + oy) * wo..(s * ho + oy + 1) * wo];
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `out[o, :] = sum_r weight[o, r] * col[r, :]`.
pub(crate) fn gemm_weight_col(weight: &[f32], co: usize, rows: usize, col: &[f32], np: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; co * np];
    for o in 0..co {
        let dst = &mut out[o * np..(o + 1) * np];
        for r in 0..rows {
            let wv = weight[o * rows + r];
            if wv == 0.0 {
                continue;
            }
            let src = &col[r * np..(r + 1) * np];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    out
}

/// `dweight[o, r] = dot(dout[o, :], col[r, :])`.
pub(crate) fn gemm_grad_weight(dout: &[f32], co: usize, col: &[f32], rows: usize, np: usize) -> Vec<f32> {
    let mut dw = vec![0.0f32; co * rows];
    for o in 0..co {
        let g = &dout[o * np..(o + 1) * np];
        for r in 0..rows {
            let c = &col[r * np..(r + 1) * np];
            dw[o * rows + r] = dot(g, c);
        }
    }
    dw
}

/// `dcol[r, :] = sum_o weight[o, r] * dout[o, :]`.
pub(crate) fn gemm_grad_col(weight: &[f32], co: usize, rows: usize, dout: &[f32], np: usize) -> Vec<f32> {
    let mut dcol = vec![0.0f32; rows * np];
    for o in 0..co {
        let g = &dout[o * np..(o + 1) * np];
        for r in 0..rows {
            let wv = weight[o * rows + r];
            if wv == 0.0 {
                continue;
            }
            let dst = &mut dcol[r * np..(r + 1) * np];
            for (d, s) in dst.iter_mut().zip(g) {
                *d += wv * s;
            }
        }
    }
    dcol
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    // eight partial sums so the loop vectorizes without reassociation flags
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

/// Mean and biased variance of one row, accumulated in f64.
pub(crate) fn row_moments(row: &[f32]) -> (f32, f32) {
    let m = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / m;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m;
    (mean as f32, var as f32)
}
