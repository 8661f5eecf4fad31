//! Raw compute kernels over flat row-major buffers. No shape validation happens
//! here; the tape primitives check shapes before calling in.

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, all row-major, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n extents
    // checked by the debug assertions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds the whole batch into `[c·k·k, n·ho·wo]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.n * g.positions();
    let mut col = vec![0.0f32; g.col_rows() * cols];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let src = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * g.positions()..(b + 1) * g.positions()];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.n * g.positions();
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let dst = &mut dx[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[b * g.positions()..(b + 1) * g.positions()];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution. `w` is `[o, c, k, k]`, output `[n, o, ho, wo]`.
pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, o: usize, g: &ConvGeom) -> Vec<f32> {
    let col = im2col(x, g);
    let cols = g.n * g.positions();
    let mut tmp = vec![0.0f32; o * cols];
    gemm(o, g.col_rows(), cols, 1.0, w, false, &col, false, 0.0, &mut tmp);
    let p = g.positions();
    let mut out = vec![0.0f32; g.n * o * p];
    for b in 0..g.n {
        for oc in 0..o {
            let src = &tmp[oc * cols + b * p..oc * cols + (b + 1) * p];
            let dst = &mut out[(b * o + oc) * p..(b * o + oc + 1) * p];
            let shift = bias.map_or(0.0, |bs| bs[oc]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + shift;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is produced only when requested.
pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    o: usize,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let p = g.positions();
    let cols = g.n * p;
    // [o, n·p] layout of the upstream gradient.
    let mut dmat = vec![0.0f32; o * cols];
    for b in 0..g.n {
        for oc in 0..o {
            dmat[oc * cols + b * p..oc * cols + (b + 1) * p]
                .copy_from_slice(&dout[(b * o + oc) * p..(b * o + oc + 1) * p]);
        }
    }
    let dw = want.1.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![0.0f32; o * g.col_rows()];
        gemm(o, cols, g.col_rows(), 1.0, &dmat, false, &col, true, 0.0, &mut dw);
        dw
    });
    let db = want.2.then(|| {
        (0..o)
            .map(|oc| dmat[oc * cols..(oc + 1) * cols].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    });
    let dx = want.0.then(|| {
        let mut dcol = vec![0.0f32; g.col_rows() * cols];
        gemm(g.col_rows(), o, cols, 1.0, w, true, &dmat, false, 0.0, &mut dcol);
        let mut dx = vec![0.0f32; g.n * g.c * g.h * g.w];
        col2im(&dcol, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel convolution. `w` is `[c, 1, k, k]`, output `[n, c, ho, wo]`.
pub(crate) fn depthwise_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let p = g.positions();
    let mut out = vec![0.0f32; g.n * g.c * p];
    for b in 0..g.n {
        for ci in 0..g.c {
            let src = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
            let ker = &w[ci * g.k * g.k..(ci + 1) * g.k * g.k];
            let dst = &mut out[(b * g.c + ci) * p..(b * g.c + ci + 1) * p];
            let shift = bias.map_or(0.0, |bs| bs[ci]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = shift;
                    for ki in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.k {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += src[iy as usize * g.w + ix as usize] * ker[ki * g.k + kj];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let p = g.positions();
    let mut dx = want.0.then(|| vec![0.0f32; x.len()]);
    let mut dw = want.1.then(|| vec![0.0f32; w.len()]);
    let mut db = want.2.then(|| vec![0.0f32; g.c]);
    for b in 0..g.n {
        for ci in 0..g.c {
            let base = (b * g.c + ci) * g.h * g.w;
            let src = &x[base..base + g.h * g.w];
            let ker = &w[ci * g.k * g.k..(ci + 1) * g.k * g.k];
            let up = &dout[(b * g.c + ci) * p..(b * g.c + ci + 1) * p];
            if let Some(db) = db.as_mut() {
                db[ci] += up.iter().sum::<f32>();
            }
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = up[oy * g.wo + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ki in 0..g.k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.k {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let idx = iy as usize * g.w + ix as usize;
                            if let Some(dw) = dw.as_mut() {
                                dw[ci * g.k * g.k + ki * g.k + kj] += d * src[idx];
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[base + idx] += d * ker[ki * g.k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom::new(2, 3, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f32> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let o = 2;
        let w: Vec<f32> = (0..o * 3 * 9).map(|i| ((i * 5) % 7) as f32 * 0.1 - 0.3).collect();
        let out = conv2d_forward(&x, &w, Some(&[0.5, -1.0]), o, &g);
        for b in 0..2 {
            for oc in 0..o {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = if oc == 0 { 0.5 } else { -1.0 };
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                        acc += x[((b * 3 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                            * w[((oc * 3 + ci) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = out[((b * o + oc) * g.ho + oy) * g.wo + ox];
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_equals_grouped_dense() {
        // A depthwise kernel is a dense kernel that is zero off the channel diagonal.
        let g = ConvGeom::new(1, 2, 4, 4, 3, 1, 1).unwrap();
        let x: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let dw: Vec<f32> = (0..18).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut dense = vec![0.0; 2 * 2 * 9];
        for c in 0..2 {
            dense[(c * 2 + c) * 9..(c * 2 + c + 1) * 9].copy_from_slice(&dw[c * 9..(c + 1) * 9]);
        }
        let a = depthwise_forward(&x, &dw, None, &g);
        let b = conv2d_forward(&x, &dense, None, 2, &g);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}
