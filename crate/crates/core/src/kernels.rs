//! Raw loops behind the tape ops. All accumulation runs in index order so
//! results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {x:?} and {k:?}"),
            ));
        }
        if x[1] != k[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.to_vec(),
                right: k.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"),
            ));
        }
        Ok(ConvGeom {
            n: x[0],
            c: x[1],
            h,
            w,
            f: k[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `ow` whose input column `ow*stride + kx - pad` lies in
    /// `[0, w)`, as a half-open range.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // ow*s + kx >= pad
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // ow*s + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = oy * self.stride + ky;
        if y < self.pad || y - self.pad >= self.h {
            None
        } else {
            Some(y - self.pad)
        }
    }
}

/// Unfold `x` into columns: row `(c, ky, kx)`, column `(n, oy, ox)`, so a
/// convolution becomes one `[F, C*kh*kw] x [C*kh*kw, N*oh*ow]` product.
fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let np = g.n * out_plane;
    let mut col = vec![T::zero(); g.c * g.kh * g.kw * np];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let (lo, hi) = g.valid_cols(kx);
                for n in 0..g.n {
                    let xin = &x[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                    let dst = &mut col[r * np + n * out_plane..r * np + (n + 1) * out_plane];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let irow = &xin[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            drow[lo..hi].copy_from_slice(&irow[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_acc<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let np = g.n * out_plane;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let (lo, hi) = g.valid_cols(kx);
                for n in 0..g.n {
                    let dxin = &mut dx[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                    let src = &col[r * np + n * out_plane..r * np + (n + 1) * out_plane];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else { continue };
                        let irow = &mut dxin[iy * g.w..(iy + 1) * g.w];
                        let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = lo + kx - g.pad;
                            for (a, &b) in irow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *a += b;
                            }
                        } else {
                            for ox in lo..hi {
                                irow[ox * g.stride + kx - g.pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[N, F, P]` <-> `[F, N*P]` with `P = oh*ow`.
fn nfp_to_fnp<T: Real>(g: &ConvGeom, src: &[T]) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut out = vec![T::zero(); src.len()];
    for n in 0..g.n {
        for f in 0..g.f {
            out[(f * g.n + n) * p..(f * g.n + n + 1) * p]
                .copy_from_slice(&src[(n * g.f + f) * p..(n * g.f + f + 1) * p]);
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], k: &[T], out: &mut [T]) {
    let col = im2col(g, x);
    let r = g.c * g.kh * g.kw;
    let np = g.n * g.oh * g.ow;
    let mut tmp = vec![T::zero(); g.f * np];
    matmul_acc(g.f, r, np, k, &col, &mut tmp);
    let p = g.oh * g.ow;
    for n in 0..g.n {
        for f in 0..g.f {
            let src = &tmp[(f * g.n + n) * p..(f * g.n + n + 1) * p];
            for (o, &v) in out[(n * g.f + f) * p..(n * g.f + f + 1) * p].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
}

pub(crate) fn conv2d_backward_input<T: Real>(g: &ConvGeom, dout: &[T], k: &[T], dx: &mut [T]) {
    let r = g.c * g.kh * g.kw;
    let np = g.n * g.oh * g.ow;
    let d = nfp_to_fnp(g, dout);
    let mut dcol = vec![T::zero(); r * np];
    matmul_at_b_acc(g.f, r, np, k, &d, &mut dcol);
    col2im_acc(g, &dcol, dx);
}

pub(crate) fn conv2d_backward_kernel<T: Real>(g: &ConvGeom, dout: &[T], x: &[T], dk: &mut [T]) {
    let r = g.c * g.kh * g.kw;
    let np = g.n * g.oh * g.ow;
    let d = nfp_to_fnp(g, dout);
    let col = im2col(g, x);
    matmul_a_bt_acc(g.f, r, np, &d, &col, dk);
}

/// Non-overlapping `size x size` mean pooling; trailing rows/cols that do not
/// fill a window are dropped.
pub(crate) fn avg_pool_forward<T: Real>(shape: &[usize], size: usize, x: &[T], out: &mut [T]) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let inv = T::of(1.0 / (size * size) as f64);
    for p in 0..nc {
        let xin = &x[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, orow) in o.chunks_exact_mut(ow).enumerate() {
            for dy in 0..size {
                let row = &xin[(oy * size + dy) * w..(oy * size + dy) * w + ow * size];
                for (acc, win) in orow.iter_mut().zip(row.chunks_exact(size)) {
                    for &v in win {
                        *acc += v;
                    }
                }
            }
            for v in orow.iter_mut() {
                *v *= inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward<T: Real>(shape: &[usize], size: usize, dout: &[T], dx: &mut [T]) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let inv = T::of(1.0 / (size * size) as f64);
    for p in 0..nc {
        let d = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dxin = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, drow) in d.chunks_exact(ow).enumerate() {
            for dy in 0..size {
                let start = (oy * size + dy) * w;
                let row = &mut dxin[start..start + ow * size];
                for (win, &g) in row.chunks_exact_mut(size).zip(drow) {
                    let g = g * inv;
                    for v in win {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Zero-padded 3x3 box mean (sum of the neighbourhood divided by 9). The
/// operator is symmetric, so the same routine computes its adjoint.
pub(crate) fn box3_accumulate<T: Real>(shape: &[usize], x: &[T], out: &mut [T]) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let ninth = T::of(1.0 / 9.0);
    let mut rows = vec![T::zero(); h * w];
    for p in 0..nc {
        let xin = &x[p * h * w..(p + 1) * h * w];
        let o = &mut out[p * h * w..(p + 1) * h * w];
        // Horizontal 3-sums, then vertical.
        for (src, dst) in xin.chunks_exact(w).zip(rows.chunks_exact_mut(w)) {
            dst.copy_from_slice(src);
            for (d, &v) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                *d += v;
            }
            for (d, &v) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                *d += v;
            }
        }
        for y in 0..h {
            let orow = &mut o[y * w..(y + 1) * w];
            let mid = &rows[y * w..(y + 1) * w];
            let up = if y > 0 { Some(&rows[(y - 1) * w..y * w]) } else { None };
            let down = if y + 1 < h {
                Some(&rows[(y + 1) * w..(y + 2) * w])
            } else {
                None
            };
            match (up, down) {
                (Some(u), Some(d)) => {
                    for t in 0..w {
                        orow[t] += (u[t] + mid[t] + d[t]) * ninth;
                    }
                }
                (Some(e), None) | (None, Some(e)) => {
                    for t in 0..w {
                        orow[t] += (e[t] + mid[t]) * ninth;
                    }
                }
                (None, None) => {
                    for t in 0..w {
                        orow[t] += mid[t] * ninth;
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums (fixed order, so still
/// deterministic) to let the compiler vectorize.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

/// `out += Σ_j c[j] * rows[j]`, four rows per pass with a fixed summation
/// order.
fn axpy_rows<T: Real>(out: &mut [T], coef: &[T], rows: &[&[T]]) {
    let mut j = 0;
    while j + 4 <= rows.len() {
        let (c0, c1, c2, c3) = (coef[j], coef[j + 1], coef[j + 2], coef[j + 3]);
        let (r0, r1, r2, r3) = (rows[j], rows[j + 1], rows[j + 2], rows[j + 3]);
        let n = out.len();
        let (r0, r1, r2, r3) = (&r0[..n], &r1[..n], &r2[..n], &r3[..n]);
        for t in 0..n {
            out[t] += (c0 * r0[t] + c1 * r1[t]) + (c2 * r2[t] + c3 * r3[t]);
        }
        j += 4;
    }
    for (&c, r) in coef[j..].iter().zip(&rows[j..]) {
        for (o, &v) in out.iter_mut().zip(*r) {
            *o += c * v;
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let rows: Vec<&[T]> = (0..k).map(|p| &b[p * n..(p + 1) * n]).collect();
    for i in 0..m {
        axpy_rows(&mut out[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], &rows);
    }
}

/// `out[m,k] += d[m,n] * b[k,n]^T`
pub(crate) fn matmul_a_bt_acc<T: Real>(m: usize, k: usize, n: usize, d: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k,n] += a[m,k]^T * d[m,n]`
pub(crate) fn matmul_at_b_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], d: &[T], out: &mut [T]) {
    let rows: Vec<&[T]> = (0..m).map(|i| &d[i * n..(i + 1) * n]).collect();
    let mut coef = vec![T::zero(); m];
    for p in 0..k {
        for (i, c) in coef.iter_mut().enumerate() {
            *c = a[i * k + p];
        }
        axpy_rows(&mut out[p * n..(p + 1) * n], &coef, &rows);
    }
}

/// LU factorisation with partial pivoting, `P A = L U`, packed in place.
#[derive(Clone, Debug)]
pub(crate) struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    pub fn factor(n: usize, a: &[T]) -> Result<Self> {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let tiny = scale * T::epsilon() * T::of(n as f64);
        for col in 0..n {
            let mut best = col;
            for r in col + 1..n {
                if lu[r * n + col].abs() > lu[best * n + col].abs() {
                    best = r;
                }
            }
            let pivot = lu[best * n + col];
            if !(pivot.abs() > tiny) {
                return Err(Error::Singular {
                    column: col,
                    pivot: pivot.to_f64(),
                });
            }
            if best != col {
                for j in 0..n {
                    lu.swap(col * n + j, best * n + j);
                }
                perm.swap(col, best);
            }
            for r in col + 1..n {
                let f = lu[r * n + col] / pivot;
                lu[r * n + col] = f;
                for j in col + 1..n {
                    let u = lu[col * n + j];
                    lu[r * n + j] -= f * u;
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    /// Solve `A X = B` for `B` of shape `[n, m]`.
    pub fn solve(&self, b: &[T], m: usize) -> Vec<T> {
        let n = self.n;
        let mut x = vec![T::zero(); n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        // L y = P b (unit diagonal)
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                for j in 0..m {
                    let v = x[k * m + j];
                    x[i * m + j] -= l * v;
                }
            }
        }
        // U x = y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                for j in 0..m {
                    let v = x[k * m + j];
                    x[i * m + j] -= u * v;
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
        x
    }

    /// Solve `A^T X = B`.
    pub fn solve_transposed(&self, b: &[T], m: usize) -> Vec<T> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T z = b, L^T w = z, x = P^T w.
        let mut z = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                for j in 0..m {
                    let v = z[k * m + j];
                    z[i * m + j] -= u * v;
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                z[i * m + j] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let l = self.lu[k * n + i];
                for j in 0..m {
                    let v = z[k * m + j];
                    z[i * m + j] -= l * v;
                }
            }
        }
        let mut x = vec![T::zero(); n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&z[i * m..(i + 1) * m]);
        }
        x
    }
}
