//! Raw slice kernels behind the graph ops. Everything here is single-threaded
//! with a fixed summation order, so results are bit-reproducible.

use super::tensor::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the im2col matrix: `C·kh·kw`.
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the im2col matrix: `N·Ho·Wo`.
    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded convolution needs no unfolding.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output column range `[lo, hi)` whose input column `ox·stride + kj − pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.w + p > kj { ((self.w + p - kj - 1) / s + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Unfold one image `x[C,H,W]` into the `C·kh·kw` rows of `cols`, row `r`
/// starting at `r·row_stride`, each `Ho·Wo` long. Every covered element is
/// written.
pub fn im2col_item<T: Elem>(x: &[T], g: &ConvGeom, cols: &mut [T], row_stride: usize) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let src = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * row_stride..row * row_stride + plane];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        d.fill(T::zero());
                        continue;
                    }
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                    } else {
                        for (o, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src_row[ix0 + o * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_item`]: scatter-add `cols` into `x[C,H,W]`.
pub fn col2im_item<T: Elem>(cols: &[T], g: &ConvGeom, x: &mut [T], row_stride: usize) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let dst = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * row_stride..row * row_stride + plane];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let ix0 = lo * g.stride + kj - g.pad;
                    for (o, &v) in s.iter().enumerate() {
                        let d = &mut dst_row[ix0 + o * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Unfold `x[N,C,H,W]` into `[C·kh·kw, N·Ho·Wo]`.
pub fn im2col<T: Elem>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (plane, ncols, item) = (g.out_plane(), g.cols(), g.c * g.in_plane());
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for n in 0..g.n {
        im2col_item(&x[n * item..(n + 1) * item], g, &mut cols[n * plane..], ncols);
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add `[C·kh·kw, N·Ho·Wo]` back into `[N,C,H,W]`.
pub fn col2im<T: Elem>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (plane, ncols, item) = (g.out_plane(), g.cols(), g.c * g.in_plane());
    let mut x = vec![T::zero(); g.n * item];
    for n in 0..g.n {
        col2im_item(&cols[n * plane..], g, &mut x[n * item..(n + 1) * item], ncols);
    }
    x
}

/// Output planes smaller than this are convolved as one batched GEMM;
/// larger ones one item at a time to keep the unfolded patch matrix in cache.
const BATCHED_PLANE: usize = 256;

/// `[K, N·P]` → `[N, K, P]`.
fn km_to_nkp<T: Elem>(src: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k * p];
    for ki in 0..k {
        for ni in 0..n {
            out[(ni * k + ki) * p..(ni * k + ki + 1) * p].copy_from_slice(&src[(ki * n + ni) * p..(ki * n + ni + 1) * p]);
        }
    }
    out
}

/// `[N, K, P]` → `[K, N·P]`.
fn nkp_to_km<T: Elem>(src: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k * p];
    for ni in 0..n {
        for ki in 0..k {
            out[(ki * n + ni) * p..(ki * n + ni + 1) * p].copy_from_slice(&src[(ni * k + ki) * p..(ni * k + ki + 1) * p]);
        }
    }
    out
}

/// Forward convolution: `x[N,C,H,W] ⋆ w[K,C,kh,kw] + b[K]`.
pub fn conv2d_forward<T: Elem>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.out_plane());
    if plane < BATCHED_PLANE {
        let ncols = g.cols();
        let cols = im2col(x, g);
        let mut out_km = vec![T::zero(); g.k * ncols];
        for (k, row) in out_km.chunks_mut(ncols).enumerate() {
            row.fill(b[k]);
        }
        T::gemm(g.k, patch, ncols, w, (patch, 1), &cols, (ncols, 1), T::one(), &mut out_km, (ncols, 1));
        return km_to_nkp(&out_km, g.n, g.k, plane);
    }
    let in_item = g.c * g.in_plane();
    let out_item = g.k * plane;
    let mut out = vec![T::zero(); g.n * out_item];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
    for n in 0..g.n {
        let xn = &x[n * in_item..(n + 1) * in_item];
        let yn = &mut out[n * out_item..(n + 1) * out_item];
        for (k, chunk) in yn.chunks_mut(plane).enumerate() {
            chunk.fill(b[k]);
        }
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col_item(xn, g, &mut cols, plane);
            &cols
        };
        T::gemm(g.k, patch, plane, w, (patch, 1), src, (plane, 1), T::one(), yn, (plane, 1));
    }
    out
}

/// Gradients of the convolution given `dy[N,K,Ho,Wo]`: `(dx, dw, db)`.
pub fn conv2d_backward<T: Elem>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let in_item = g.c * g.in_plane();
    let out_item = g.k * plane;
    if plane < BATCHED_PLANE {
        let ncols = g.cols();
        let dy_km = nkp_to_km(dy, g.n, g.k, plane);
        let db = dy_km.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
        let dw = need_dw.then(|| {
            let mut dw = vec![T::zero(); g.k * patch];
            add_row_dots(&dy_km, &im2col(x, g), ncols, &mut dw);
            dw
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![T::zero(); patch * ncols];
            T::gemm(patch, g.k, ncols, w, (1, patch), &dy_km, (ncols, 1), T::zero(), &mut dcols, (ncols, 1));
            col2im(&dcols, g)
        });
        return (dx, dw, db);
    }
    if g.stride == 1 && g.kh == g.kw && g.pad < g.kh && need_dx && !g.is_pointwise() {
        // dx is the full correlation of dy with the flipped, transposed kernel.
        let mut wt = vec![T::zero(); w.len()];
        for k in 0..g.k {
            for c in 0..g.c {
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        wt[((c * g.k + k) * g.kh + (g.kh - 1 - i)) * g.kw + (g.kw - 1 - j)] =
                            w[((k * g.c + c) * g.kh + i) * g.kw + j];
                    }
                }
            }
        }
        let gt = ConvGeom { c: g.k, h: g.ho, w: g.wo, k: g.c, pad: g.kh - 1 - g.pad, ho: g.h, wo: g.w, ..*g };
        let dx = conv2d_forward(dy, &wt, &vec![T::zero(); g.c], &gt);
        let (_, dw, db) = conv2d_backward(x, w, dy, g, false, need_dw);
        return (Some(dx), dw, db);
    }
    let mut db = vec![T::zero(); g.k];
    for n in 0..g.n {
        for (k, chunk) in dy[n * out_item..(n + 1) * out_item].chunks(plane).enumerate() {
            db[k] = db[k] + chunk.iter().copied().sum();
        }
    }
    let mut dw = need_dw.then(|| vec![T::zero(); g.k * patch]);
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_item]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { patch * plane } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy[n * out_item..(n + 1) * out_item];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_item..(n + 1) * in_item];
            let src: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col_item(xn, g, &mut cols, plane);
                &cols
            };
            // dw[K, patch] += dy_n[K, plane] · cols_nᵀ
            add_row_dots(dyn_, src, plane, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_item..(n + 1) * in_item];
            if g.is_pointwise() {
                T::gemm(patch, g.k, plane, w, (1, patch), dyn_, (plane, 1), T::zero(), dxn, (plane, 1));
            } else {
                // dcols[patch, plane] = wᵀ · dy_n
                T::gemm(patch, g.k, plane, w, (1, patch), dyn_, (plane, 1), T::zero(), &mut dcols, (plane, 1));
                col2im_item(&dcols, g, dxn, plane);
            }
        }
    }
    (dx, dw, db)
}

/// `c[i, j] += Σ_l a[i, l] · b[j, l]` for row-major `a[M, L]`, `b[N, L]`.
/// Both operands are walked contiguously, which beats a GEMM with a
/// transposed operand when `L` is long.
pub fn add_row_dots<T: Elem>(a: &[T], b: &[T], len: usize, c: &mut [T]) {
    const LANES: usize = 16;
    let n = b.len() / len;
    for (i, ar) in a.chunks_exact(len).enumerate() {
        for (j, br) in b.chunks_exact(len).enumerate() {
            let mut acc = [T::zero(); LANES];
            let (ac, bc) = (ar.chunks_exact(LANES), br.chunks_exact(LANES));
            let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).sum();
            for (x, y) in ac.zip(bc) {
                for l in 0..LANES {
                    acc[l] = acc[l] + x[l] * y[l];
                }
            }
            c[i * n + j] = c[i * n + j] + acc.iter().copied().sum::<T>() + tail;
        }
    }
}

#[inline]
pub fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
