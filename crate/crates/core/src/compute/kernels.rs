//! Dense kernels. All reductions accumulate in `f64` in ascending index
//! order, so an output element depends only on its own operands.

use super::tensor::Real;
use crate::par;

const ROW_BLOCK: usize = 8;
const COL_BLOCK: usize = 256;

/// `a[m×k] · b[k×n]`.
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    if n == 0 || m == 0 {
        return out;
    }
    par::for_each_chunk_mut(&mut out, ROW_BLOCK * n, |blk, chunk| {
        let r0 = blk * ROW_BLOCK;
        let rows = chunk.len() / n;
        let mut acc = vec![0f64; ROW_BLOCK * COL_BLOCK];
        let mut brow = [0f64; COL_BLOCK];
        let mut j0 = 0;
        while j0 < n {
            let w = COL_BLOCK.min(n - j0);
            acc[..rows * COL_BLOCK].fill(0.0);
            for kk in 0..k {
                let src = &b[kk * n + j0..kk * n + j0 + w];
                for (d, s) in brow.iter_mut().zip(src) {
                    *d = s.to_f64();
                }
                for r in 0..rows {
                    let av = a[(r0 + r) * k + kk].to_f64();
                    if av == 0.0 {
                        continue;
                    }
                    let accr = &mut acc[r * COL_BLOCK..r * COL_BLOCK + w];
                    for (x, &bv) in accr.iter_mut().zip(&brow[..w]) {
                        *x += av * bv;
                    }
                }
            }
            for r in 0..rows {
                let dst = &mut chunk[r * n + j0..r * n + j0 + w];
                for (o, &x) in dst.iter_mut().zip(&acc[r * COL_BLOCK..r * COL_BLOCK + w]) {
                    *o = T::from_f64(x);
                }
            }
            j0 += w;
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let at = transpose(a, k, m);
    matmul_nn(&at, b, m, k, n)
}

/// Transpose of a `rows × cols` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::ZERO; rows * cols];
    if rows == 0 {
        return out;
    }
    // Each chunk is one output row-tile: TILE columns of the source.
    par::for_each_chunk_mut(&mut out, TILE * rows, |t, chunk| {
        let c0 = t * TILE;
        let cw = chunk.len() / rows;
        let mut r0 = 0;
        while r0 < rows {
            let rh = TILE.min(rows - r0);
            for r in r0..r0 + rh {
                let src = &x[r * cols + c0..r * cols + c0 + cw];
                for (c, &v) in src.iter().enumerate() {
                    chunk[c * rows + r] = v;
                }
            }
            r0 += rh;
        }
    });
    out
}

/// Geometry of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Number of im2col columns, `batch · out_h · out_w`.
    pub fn columns(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// Unfold `x[B×C×H×W]` into `[C·kh·kw × B·OH·OW]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncol = g.columns();
    let mut cols = vec![T::ZERO; g.patch_len() * ncol];
    if ncol == 0 {
        return cols;
    }
    let plane = g.out_plane();
    par::for_each_chunk_mut(&mut cols, ncol, |row, dst| {
        let c = row / (g.kh * g.kw);
        let ki = (row / g.kw) % g.kh;
        let kj = row % g.kw;
        for b in 0..g.batch {
            let src = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let out = &mut dst[b * plane..(b + 1) * plane];
            for oy in 0..g.out_h {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                let orow = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let srow = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                for (ox, o) in orow.iter_mut().enumerate() {
                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.in_w as isize {
                        *o = srow[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[B×C×H×W]`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.in_h * g.in_w;
    let mut x = vec![T::ZERO; g.batch * g.in_ch * hw];
    if hw == 0 {
        return x;
    }
    let ncol = g.columns();
    let plane = g.out_plane();
    par::for_each_chunk_mut(&mut x, hw, |bc, dst| {
        let b = bc / g.in_ch;
        let c = bc % g.in_ch;
        let mut acc = vec![0f64; hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol + b * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            acc[iy as usize * g.in_w + ix as usize] +=
                                src[oy * g.out_w + ox].to_f64();
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = T::from_f64(a);
        }
    });
    x
}

/// `[F × B·P]` → `[B×F×P]`.
pub fn channels_to_batch<T: Real>(x: &[T], f: usize, b: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            out[(bi * f + fi) * p..][..p].copy_from_slice(&x[fi * b * p + bi * p..][..p]);
        }
    }
    out
}

/// `[B×F×P]` → `[F × B·P]`.
pub fn batch_to_channels<T: Real>(x: &[T], f: usize, b: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for fi in 0..f {
            out[fi * b * p + bi * p..][..p].copy_from_slice(&x[(bi * f + fi) * p..][..p]);
        }
    }
    out
}
