//! Dense kernels behind the graph ops. Convolutions are 3×3 with replicate
//! padding, lowered to GEMM through an im2col buffer laid out as
//! `[c_in * 9, n * h_out * w_out]`.

use super::Real;

/// Row-major matrix view described by `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `out = a @ b + beta * out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Real>(a: View<'_, T>, b: View<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    assert_eq!(out.len(), a.rows * b.cols);
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        self.h.div_ceil(self.stride)
    }
    pub fn w_out(&self) -> usize {
        self.w.div_ceil(self.stride)
    }
    fn cols(&self) -> usize {
        self.n * self.h_out() * self.w_out()
    }
}

#[inline]
fn clamp_coord(pos: usize, k: usize, extent: usize) -> usize {
    (pos + k).saturating_sub(1).min(extent - 1)
}

/// Fills one im2col row segment: `d[ox] = src[clamp(ox * stride + kx - 1)]`.
#[inline]
fn gather_row<T: Real>(src: &[T], d: &mut [T], kx: usize, stride: usize) {
    let w = src.len();
    if stride == 1 && d.len() >= 2 {
        let wo = d.len();
        // interior columns map to a contiguous source run
        match kx {
            0 => {
                d[0] = src[0];
                d[1..].copy_from_slice(&src[..wo - 1]);
            }
            1 => d.copy_from_slice(&src[..wo]),
            _ => {
                d[..wo - 1].copy_from_slice(&src[1..wo]);
                d[wo - 1] = src[w - 1];
            }
        }
    } else if stride == 2 && w % 2 == 0 && d.len() == w / 2 {
        // only the left tap of the first column touches the border
        let (d, src, pick) = match kx {
            0 => {
                d[0] = src[0];
                (&mut d[1..], &src[1..], 0)
            }
            1 => (d, src, 0),
            _ => (d, src, 1),
        };
        for (v, pair) in d.iter_mut().zip(src.chunks_exact(2)) {
            *v = pair[pick];
        }
    } else {
        for (ox, v) in d.iter_mut().enumerate() {
            *v = src[clamp_coord(ox * stride, kx, w)];
        }
    }
}

fn im2col_into<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw_out = ho * wo;
    let cols = g.cols();
    for c in 0..g.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * cols..][..cols];
                for b in 0..g.n {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut row[b * hw_out..][..hw_out];
                    for oy in 0..ho {
                        let iy = clamp_coord(oy * g.stride, ky, g.h);
                        gather_row(&plane[iy * g.w..][..g.w], &mut dst[oy * wo..][..wo], kx, g.stride);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw_out = ho * wo;
    let cols = g.cols();
    for c in 0..g.c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * cols..][..cols];
                for b in 0..g.n {
                    let plane = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let src = &row[b * hw_out..][..hw_out];
                    for oy in 0..ho {
                        let iy = clamp_coord(oy * g.stride, ky, g.h);
                        let s = &src[oy * wo..][..wo];
                        let prow = &mut plane[iy * g.w..][..g.w];
                        for (ox, &v) in s.iter().enumerate() {
                            prow[clamp_coord(ox * g.stride, kx, g.w)] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` -> `[c, n * hw]`.
fn nc_to_cn<T: Real>(src: &[T], n: usize, c: usize, hw: usize, out: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * hw + b * hw..][..hw].copy_from_slice(&src[(b * c + ch) * hw..][..hw]);
        }
    }
}

/// `[c, n * hw]` -> `[n, c, hw]`.
fn cn_to_nc<T: Real>(src: &[T], n: usize, c: usize, hw: usize, out: &mut [T]) {
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * hw..][..hw].copy_from_slice(&src[ch * n * hw + b * hw..][..hw]);
        }
    }
}

/// Samples are lowered a few at a time so the im2col buffer stays cache
/// sized; this many output columns per GEMM is enough to keep it efficient.
const CHUNK_COLS: usize = 2048;

/// Splits the batch into chunks; yields `(first_sample, geometry)`.
fn chunks(g: &ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> {
    let hw = g.h_out() * g.w_out();
    let per = CHUNK_COLS.div_ceil(hw).clamp(1, g.n.max(1));
    let g = *g;
    (0..g.n).step_by(per).map(move |b0| {
        (
            b0,
            ConvGeom {
                n: per.min(g.n - b0),
                ..g
            },
        )
    })
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (in_len, hw) = (g.c_in * g.h * g.w, g.h_out() * g.w_out());
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    let mut col = Vec::new();
    let mut tmp = Vec::new();
    for (b0, gc) in chunks(g) {
        let cols = gc.cols();
        col.resize(g.c_in * 9 * cols, T::zero());
        tmp.resize(g.c_out * cols, T::zero());
        im2col_into(&x[b0 * in_len..][..gc.n * in_len], &gc, &mut col);
        gemm(
            View::row_major(kernel, g.c_out, g.c_in * 9),
            View::row_major(&col, g.c_in * 9, cols),
            T::zero(),
            &mut tmp,
        );
        cn_to_nc(&tmp, gc.n, g.c_out, hw, &mut out[b0 * g.c_out * hw..][..gc.n * g.c_out * hw]);
    }
    out
}

/// Returns `(d_input, d_kernel)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (in_len, hw) = (g.c_in * g.h * g.w, g.h_out() * g.w_out());
    let out_len = g.c_out * hw;
    let mut dk = want_dk.then(|| vec![T::zero(); g.c_out * g.c_in * 9]);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let (mut dyt, mut col) = (Vec::new(), Vec::new());
    for (b0, gc) in chunks(g) {
        let cols = gc.cols();
        dyt.resize(g.c_out * cols, T::zero());
        nc_to_cn(&dy[b0 * out_len..][..gc.n * out_len], gc.n, g.c_out, hw, &mut dyt);
        let dyv = View::row_major(&dyt, g.c_out, cols);
        col.resize(g.c_in * 9 * cols, T::zero());
        if let Some(dk) = dk.as_mut() {
            im2col_into(&x[b0 * in_len..][..gc.n * in_len], &gc, &mut col);
            gemm(dyv, View::row_major(&col, g.c_in * 9, cols).t(), T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                View::row_major(kernel, g.c_out, g.c_in * 9).t(),
                dyv,
                T::zero(),
                &mut col,
            );
            col2im(&col, &gc, &mut dx[b0 * in_len..][..gc.n * in_len]);
        }
    }
    (dx, dk)
}

/// Nearest-neighbour 2× upsampling of `[planes, h, w]`.
pub(crate) fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..][..h2 * w2];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Low-resolution tap hit by upsampled offset `d ∈ {-1, 0, 1}` at output phase `p`.
#[inline]
fn phase_tap(p: usize, d: usize) -> usize {
    // floor((p + d - 1) / 2) + 1
    (p + d + 1) / 2
}

/// Folds a 3×3 kernel `[co, ci, 3, 3]` that runs after a nearest 2×
/// upsample into an equivalent stride-1 kernel `[4 * co, ci, 3, 3]` on the
/// low-resolution grid. Output channel `4 * o + 2 * py + px` produces pixel
/// phase `(py, px)` of channel `o`.
pub(crate) fn fold_upsample_kernel<T: Real>(k: &[T], co: usize, ci: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 4 * co * ci * 9];
    for o in 0..co {
        for c in 0..ci {
            let src = &k[(o * ci + c) * 9..][..9];
            for ph in 0..4 {
                let (py, px) = (ph / 2, ph % 2);
                let dst = &mut out[((4 * o + ph) * ci + c) * 9..][..9];
                for dy in 0..3 {
                    for dx in 0..3 {
                        dst[phase_tap(py, dy) * 3 + phase_tap(px, dx)] += src[dy * 3 + dx];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`fold_upsample_kernel`].
pub(crate) fn unfold_upsample_kernel<T: Real>(dk: &[T], co: usize, ci: usize) -> Vec<T> {
    let mut out = vec![T::zero(); co * ci * 9];
    for o in 0..co {
        for c in 0..ci {
            let dst = &mut out[(o * ci + c) * 9..][..9];
            for ph in 0..4 {
                let (py, px) = (ph / 2, ph % 2);
                let src = &dk[((4 * o + ph) * ci + c) * 9..][..9];
                for dy in 0..3 {
                    for dx in 0..3 {
                        dst[dy * 3 + dx] += src[phase_tap(py, dy) * 3 + phase_tap(px, dx)];
                    }
                }
            }
        }
    }
    out
}

/// `[n, 4c, h, w]` phase planes → `[n, c, 2h, 2w]`.
pub(crate) fn interleave_phases<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for (plane, dst) in out.chunks_exact_mut(h2 * w2).enumerate() {
        for ph in 0..4 {
            let (py, px) = (ph / 2, ph % 2);
            let src = &x[(plane * 4 + ph) * h * w..][..h * w];
            for i in 0..h {
                let row = &mut dst[(2 * i + py) * w2..][..w2];
                for (j, &v) in src[i * w..][..w].iter().enumerate() {
                    row[2 * j + px] = v;
                }
            }
        }
    }
    out
}

/// Inverse of [`interleave_phases`].
pub(crate) fn split_phases<T: Real>(y: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for (plane, src) in y.chunks_exact(h2 * w2).enumerate() {
        for ph in 0..4 {
            let (py, px) = (ph / 2, ph % 2);
            let dst = &mut out[(plane * 4 + ph) * h * w..][..h * w];
            for i in 0..h {
                let row = &src[(2 * i + py) * w2..][..w2];
                for (j, v) in dst[i * w..][..w].iter_mut().enumerate() {
                    *v = row[2 * j + px];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(View::row_major(&a, 2, 3), View::row_major(&b, 3, 4), 0.0, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], s);
            }
        }
        // (b^T)(a^T) = (ab)^T
        let mut out_t = vec![0.0; 8];
        gemm(
            View::row_major(&b, 3, 4).t(),
            View::row_major(&a, 2, 3).t(),
            0.0,
            &mut out_t,
        );
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(out[i * 4 + j], out_t[j * 2 + i]);
            }
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let dy = vec![1.0f32; 16];
        assert_eq!(upsample2x_backward(&dy, 1, 2, 2), vec![4.0; 4]);
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let up = upsample2x(&x, 1, 2, 2);
        assert_eq!(&up[..4], &[1.0, 1.0, 2.0, 2.0]);
    }
}
