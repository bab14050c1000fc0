//! Raw slice kernels shared by the tape ops and the untracked helpers.

use crate::error::{shape_err, Result};

pub fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(shape_err!("matmul expects rank-2 operands, got {a:?} and {b:?}"));
    }
    if a[1] != b[0] {
        return Err(shape_err!("matmul inner dimensions differ: {a:?} x {b:?}"));
    }
    Ok((a[0], a[1], b[1]))
}

/// `[m,k] x [k,n]`, i-k-j loop order.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn softmax_rows(z: &[f32], classes: usize, tau: f32) -> Vec<f32> {
    let mut out = vec![0f32; z.len()];
    for (zr, or) in z.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = zr.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = zr.iter().map(|&v| (((v - max) / tau) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in or.iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    out
}

pub fn log_softmax_rows(z: &[f32], classes: usize, tau: f32) -> Vec<f32> {
    let mut out = vec![0f32; z.len()];
    for (zr, or) in z.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = zr.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let lse: f64 = zr
            .iter()
            .map(|&v| (((v - max) / tau) as f64).exp())
            .sum::<f64>()
            .ln();
        for (o, &v) in or.iter_mut().zip(zr) {
            *o = (((v - max) / tau) as f64 - lse) as f32;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Patch gather: `[n,c,h,w]` -> `[n*oh*ow, c*kh*kw]`, zero padding.
pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut col = vec![0f32; g.positions() * plen];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let r = (b * g.oh + oy) * g.ow + ox;
                let dst = &mut col[r * plen..(r + 1) * plen];
                for ch in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[(ch * g.kh + ky) * g.kw + kx] =
                                x[((b * g.c + ch) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(col: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut x = vec![0f32; g.n * g.c * g.h * g.w];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let r = (b * g.oh + oy) * g.ow + ox;
                let src = &col[r * plen..(r + 1) * plen];
                for ch in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[((b * g.c + ch) * g.h + iy as usize) * g.w + ix as usize] +=
                                src[(ch * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n*oh*ow, o]` <-> `[n, o, oh*ow]` layout change.
pub fn positions_to_channels(flat: &[f32], n: usize, o: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0f32; flat.len()];
    for b in 0..n {
        for s in 0..spatial {
            for ch in 0..o {
                out[(b * o + ch) * spatial + s] = flat[(b * spatial + s) * o + ch];
            }
        }
    }
    out
}

pub fn channels_to_positions(nchw: &[f32], n: usize, o: usize, spatial: usize) -> Vec<f32> {
    let mut out = vec![0f32; nchw.len()];
    for b in 0..n {
        for ch in 0..o {
            for s in 0..spatial {
                out[(b * spatial + s) * o + ch] = nchw[(b * o + ch) * spatial + s];
            }
        }
    }
    out
}
