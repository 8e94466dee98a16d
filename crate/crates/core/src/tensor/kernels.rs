//! Low-level array kernels shared by the forward and backward rules.

/// `out (m×n) = beta·out + a (m×k) · b(k×n)` with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    out: &mut [f64],
) {
    debug_assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers below pass slices whose extents cover every
    // (row, col) addressed by the given shapes and strides; `out` is
    // row-major m×n and does not alias `a` or `b`.
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (m×n) = x (m×k) · wᵀ` where `w` is row-major n×k.
pub(crate) fn matmul_xwt(m: usize, k: usize, n: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    assert!(x.len() >= m * k && w.len() >= n * k && out.len() >= m * n);
    gemm(m, k, n, x, (k as isize, 1), w, (1, k as isize), 0.0, out);
}

/// `out (m×k) = dy (m×n) · w` where `w` is row-major n×k.
pub(crate) fn matmul_dyw(m: usize, n: usize, k: usize, dy: &[f64], w: &[f64], out: &mut [f64]) {
    assert!(dy.len() >= m * n && w.len() >= n * k && out.len() >= m * k);
    gemm(m, n, k, dy, (n as isize, 1), w, (k as isize, 1), 0.0, out);
}

/// `dw (n×k) += dyᵀ · x` where `dy` is m×n and `x` is m×k.
pub(crate) fn accumulate_dyt_x(
    m: usize,
    n: usize,
    k: usize,
    dy: &[f64],
    x: &[f64],
    dw: &mut [f64],
) {
    assert!(dy.len() >= m * n && x.len() >= m * k && dw.len() >= n * k);
    gemm(n, m, k, dy, (1, n as isize), x, (k as isize, 1), 1.0, dw);
}

/// Column sums of a row-major m×n matrix, added into `acc`.
pub(crate) fn accumulate_col_sums(m: usize, n: usize, x: &[f64], acc: &mut [f64]) {
    for row in x[..m * n].chunks_exact(n) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
}

/// Elements per gathered tile in the axial kernels, sized for L2. Tests use
/// a tiny tile so the multi-tile path is always exercised.
#[cfg(not(test))]
const TILE_ELEMS: usize = 16_384;
#[cfg(test)]
const TILE_ELEMS: usize = 48;

fn tile_rows(width: usize) -> usize {
    (TILE_ELEMS / width.max(1)).max(2)
}

/// Axial problem in `[outer, a, inner, f]` layout: every `(o, n)` pair is a
/// row of `a·f` values gathered with stride `inner·f`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Axial {
    pub outer: usize,
    pub a: usize,
    pub inner: usize,
    pub f: usize,
}

impl Axial {
    fn width(&self) -> usize {
        self.a * self.f
    }

    /// Calls `body(block_offset, n0, rows)` for every row tile.
    fn tiles(&self, mut body: impl FnMut(usize, usize, usize)) {
        let t = tile_rows(self.width()).min(self.inner);
        let block = self.a * self.inner * self.f;
        for o in 0..self.outer {
            let mut n0 = 0;
            while n0 < self.inner {
                let rows = t.min(self.inner - n0);
                body(o * block, n0, rows);
                n0 += rows;
            }
        }
    }

    fn gather(&self, src: &[f64], base: usize, n0: usize, rows: usize, tile: &mut [f64]) {
        let (f, width) = (self.f, self.width());
        for i in 0..self.a {
            let start = base + (i * self.inner + n0) * f;
            let column = &src[start..start + rows * f];
            for (r, chunk) in column.chunks_exact(f).enumerate() {
                tile[r * width + i * f..][..f].copy_from_slice(chunk);
            }
        }
    }

    fn scatter(&self, tile: &[f64], base: usize, n0: usize, rows: usize, dst: &mut [f64]) {
        let (f, width) = (self.f, self.width());
        for i in 0..self.a {
            let start = base + (i * self.inner + n0) * f;
            let column = &mut dst[start..start + rows * f];
            for (r, chunk) in column.chunks_exact_mut(f).enumerate() {
                chunk.copy_from_slice(&tile[r * width + i * f..][..f]);
            }
        }
    }

    /// `y = x·wᵀ + b` row by row.
    pub(crate) fn forward(&self, x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
        let width = self.width();
        let fill_bias = |out: &mut [f64]| out.chunks_exact_mut(width).for_each(|r| r.copy_from_slice(b));
        if self.inner == 1 {
            fill_bias(&mut y[..]);
            gemm(self.outer, width, width, x, (width as isize, 1), w, (1, width as isize), 1.0, y);
            return;
        }
        let cap = tile_rows(width).min(self.inner) * width;
        let (mut xt, mut yt) = (vec![0.0; cap], vec![0.0; cap]);
        self.tiles(|base, n0, rows| {
            let n = rows * width;
            self.gather(x, base, n0, rows, &mut xt);
            fill_bias(&mut yt[..n]);
            gemm(rows, width, width, &xt, (width as isize, 1), w, (1, width as isize), 1.0, &mut yt);
            self.scatter(&yt, base, n0, rows, y);
        });
    }

    /// Accumulates `dw += gᵀ·x` and `db += Σ g` and writes `dx = g·w`;
    /// each output is skipped when `None`.
    pub(crate) fn backward(
        &self,
        g: &[f64],
        x: &[f64],
        w: &[f64],
        mut dx: Option<&mut [f64]>,
        mut dw: Option<&mut [f64]>,
        mut db: Option<&mut [f64]>,
    ) {
        let width = self.width();
        let need_x = dw.is_some();
        let mut step = |gt: &[f64], xt: &[f64], rows: usize, dxt: Option<&mut [f64]>| {
            if let Some(dw) = dw.as_deref_mut() {
                gemm(width, rows, width, gt, (1, width as isize), xt, (width as isize, 1), 1.0, dw);
            }
            if let Some(db) = db.as_deref_mut() {
                accumulate_col_sums(rows, width, gt, db);
            }
            if let Some(dxt) = dxt {
                gemm(rows, width, width, gt, (width as isize, 1), w, (width as isize, 1), 0.0, dxt);
            }
        };
        if self.inner == 1 {
            step(g, x, self.outer, dx);
            return;
        }
        let cap = tile_rows(width).min(self.inner) * width;
        let (mut gt, mut xt, mut dxt) = (vec![0.0; cap], vec![0.0; cap], vec![0.0; cap]);
        let need_dx = dx.is_some();
        self.tiles(|base, n0, rows| {
            let n = rows * width;
            self.gather(g, base, n0, rows, &mut gt);
            if need_x {
                self.gather(x, base, n0, rows, &mut xt);
            }
            step(&gt[..n], &xt[..n], rows, need_dx.then_some(&mut dxt[..n]));
            if let Some(dx) = dx.as_deref_mut() {
                self.scatter(&dxt, base, n0, rows, dx);
            }
        });
    }
}

/// One row tile of an [`Axial`] view: `rows` consecutive inner indices
/// from `n0` within outer block `o`, or, when `inner == 1`, `rows`
/// consecutive outer blocks from `o`.
#[derive(Clone, Copy)]
struct Tile {
    o: usize,
    n0: usize,
    rows: usize,
}

/// How [`Axial::mix_forward`] combines a branch with the running sum.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Combine {
    Assign,
    Accumulate,
}

/// Per-branch inputs of the fused mixing kernels.
pub(crate) struct MixBranch<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    /// Dropout factors indexed `[batch, a, f]`, or `None` for no dropout.
    pub scale: Option<&'a [f64]>,
    pub slope: f64,
    /// Elements per batch entry of the outer dimension.
    pub per_batch: usize,
}

impl Axial {
    fn mix_tiles(&self, mut body: impl FnMut(Tile)) {
        let t = tile_rows(self.width());
        let (count, span) = if self.inner == 1 {
            (1, self.outer)
        } else {
            (self.outer, self.inner)
        };
        let t = t.min(span);
        for o in 0..count {
            let mut start = 0;
            while start < span {
                let rows = t.min(span - start);
                body(if self.inner == 1 {
                    Tile { o: start, n0: 0, rows }
                } else {
                    Tile { o, n0: start, rows }
                });
                start += rows;
            }
        }
    }

    /// Calls `seg(tile_offset, src_offset, outer, i)` for every `f`-long
    /// segment of the tile, axis index outermost so reads stay sequential.
    #[inline(always)]
    fn segments(&self, t: Tile, mut seg: impl FnMut(usize, usize, usize, usize)) {
        let (f, width) = (self.f, self.width());
        let block = self.a * self.inner * f;
        for i in 0..self.a {
            for r in 0..t.rows {
                let (o, n) = if self.inner == 1 { (t.o + r, 0) } else { (t.o, t.n0 + r) };
                seg(r * width + i * f, o * block + (i * self.inner + n) * f, o, i);
            }
        }
    }

    fn scale_row<'s>(&self, scale: &'s [f64], per_batch: usize, o: usize, i: usize) -> &'s [f64] {
        let at = ((o / per_batch) * self.a + i) * self.f;
        &scale[at..at + self.f]
    }

    fn gather_scaled(&self, src: &[f64], t: Tile, scale: Option<&[f64]>, per_batch: usize, tile: &mut [f64]) {
        let f = self.f;
        self.segments(t, |to, from, o, i| {
            let dst = &mut tile[to..to + f];
            let src = &src[from..from + f];
            match scale {
                Some(scale) => {
                    let s = self.scale_row(scale, per_batch, o, i);
                    for ((d, v), s) in dst.iter_mut().zip(src).zip(s) {
                        *d = v * s;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        });
    }

    /// Forward of one branch `leaky(linear(dropout(x)))`, combined into `out`.
    /// When `negative` is given it records where the pre-activation is ≤ 0.
    pub(crate) fn mix_forward(
        &self,
        x: &[f64],
        branch: &MixBranch<'_>,
        out: &mut [f64],
        combine: Combine,
        mut negative: Option<&mut [bool]>,
    ) {
        let (f, width) = (self.f, self.width());
        let cap = tile_rows(width).min(if self.inner == 1 { self.outer } else { self.inner }) * width;
        let (mut xt, mut yt) = (vec![0.0; cap], vec![0.0; cap]);
        let slope = branch.slope;
        self.mix_tiles(|t| {
            let n = t.rows * width;
            self.gather_scaled(x, t, branch.scale, branch.per_batch, &mut xt);
            yt[..n].chunks_exact_mut(width).for_each(|r| r.copy_from_slice(branch.bias));
            gemm(t.rows, width, width, &xt, (width as isize, 1), branch.weight, (1, width as isize), 1.0, &mut yt);
            self.segments(t, |from, to, _, _| {
                let y = &yt[from..from + f];
                let dst = &mut out[to..to + f];
                if let Some(neg) = negative.as_deref_mut() {
                    for (m, &v) in neg[to..to + f].iter_mut().zip(y) {
                        *m = v <= 0.0;
                    }
                }
                for (d, &v) in dst.iter_mut().zip(y) {
                    let a = if v <= 0.0 { slope * v } else { v };
                    match combine {
                        Combine::Assign => *d = a,
                        Combine::Accumulate => *d += a,
                    }
                }
            });
        });
    }

    /// Backward of one branch given the upstream gradient `g` of the sum.
    /// Adds into `dw` and `db` and combines `∂/∂x` into `dx`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn mix_backward(
        &self,
        g: &[f64],
        negative: &[bool],
        x: &[f64],
        branch: &MixBranch<'_>,
        dx: Option<(&mut [f64], Combine)>,
        mut dw: Option<&mut [f64]>,
        mut db: Option<&mut [f64]>,
    ) {
        let (f, width) = (self.f, self.width());
        let cap = tile_rows(width).min(if self.inner == 1 { self.outer } else { self.inner }) * width;
        let (mut gt, mut xt) = (vec![0.0; cap], vec![0.0; cap]);
        let mut dxt = vec![0.0; if dx.is_some() { cap } else { 0 }];
        let mut dx = dx;
        let slope = branch.slope;
        self.mix_tiles(|t| {
            let n = t.rows * width;
            self.segments(t, |to, from, _, _| {
                for ((d, &v), &neg) in gt[to..to + f].iter_mut().zip(&g[from..from + f]).zip(&negative[from..from + f]) {
                    *d = if neg { v * slope } else { v };
                }
            });
            if let Some(dw) = dw.as_deref_mut() {
                self.gather_scaled(x, t, branch.scale, branch.per_batch, &mut xt);
                gemm(width, t.rows, width, &gt, (1, width as isize), &xt, (width as isize, 1), 1.0, dw);
            }
            if let Some(db) = db.as_deref_mut() {
                accumulate_col_sums(t.rows, width, &gt[..n], db);
            }
            if let Some((dx, combine)) = dx.as_mut() {
                gemm(t.rows, width, width, &gt, (width as isize, 1), branch.weight, (width as isize, 1), 0.0, &mut dxt);
                let combine = *combine;
                self.segments(t, |from, to, o, i| {
                    let src = &dxt[from..from + f];
                    let dst = &mut dx[to..to + f];
                    let s = branch.scale.map(|s| self.scale_row(s, branch.per_batch, o, i));
                    for (c, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
                        let v = s.map_or(v, |s| v * s[c]);
                        match combine {
                            Combine::Assign => *d = v,
                            Combine::Accumulate => *d += v,
                        }
                    }
                });
            }
        });
    }
}

#[cfg(test)]
/// Swaps the middle axes of a contiguous `[outer, a, inner, f]` array,
/// producing `[outer, inner, a, f]`.
pub(crate) fn swap_middle(src: &[f64], outer: usize, a: usize, inner: usize, f: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    if inner == 1 {
        dst.copy_from_slice(src);
        return dst;
    }
    let block = a * inner * f;
    for o in 0..outer {
        let s = &src[o * block..(o + 1) * block];
        let d = &mut dst[o * block..(o + 1) * block];
        for i in 0..a {
            for n in 0..inner {
                let from = (i * inner + n) * f;
                let to = (n * a + i) * f;
                d[to..to + f].copy_from_slice(&s[from..from + f]);
            }
        }
    }
    dst
}

#[cfg(test)]
/// Inverse of [`swap_middle`]: `[outer, inner, a, f]` back to `[outer, a, inner, f]`.
pub(crate) fn unswap_middle(src: &[f64], outer: usize, a: usize, inner: usize, f: usize) -> Vec<f64> {
    swap_middle(src, outer, inner, a, f)
}

/// Two-tap interpolation weights for one output index.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

/// Corner-aligned linear resampling taps from `src` to `dst` samples.
///
/// Output sample `i` reads source coordinate `i·(src−1)/(dst−1)`; a single
/// output sample reads coordinate 0.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return Tap { lo: 0, hi: 0, t: 0.0 };
            }
            let num = i * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 {
                Tap { lo, hi: lo, t: 0.0 }
            } else {
                Tap {
                    lo,
                    hi: lo + 1,
                    t: rem as f64 / den as f64,
                }
            }
        })
        .collect()
}

/// Linear resampling along the middle axis of `[outer, src, inner]`.
pub(crate) fn resample_axis(x: &[f64], outer: usize, src: usize, inner: usize, taps: &[Tap]) -> Vec<f64> {
    let dst = taps.len();
    let mut out = vec![0.0; outer * dst * inner];
    for o in 0..outer {
        let xs = &x[o * src * inner..(o + 1) * src * inner];
        let ys = &mut out[o * dst * inner..(o + 1) * dst * inner];
        for (i, tap) in taps.iter().enumerate() {
            let y = &mut ys[i * inner..(i + 1) * inner];
            let lo = &xs[tap.lo * inner..(tap.lo + 1) * inner];
            if tap.t == 0.0 {
                y.copy_from_slice(lo);
            } else {
                let hi = &xs[tap.hi * inner..(tap.hi + 1) * inner];
                let (wl, wh) = (1.0 - tap.t, tap.t);
                for ((y, &l), &h) in y.iter_mut().zip(lo).zip(hi) {
                    *y = wl * l + wh * h;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`].
pub(crate) fn resample_axis_adjoint(
    dy: &[f64],
    outer: usize,
    src: usize,
    inner: usize,
    taps: &[Tap],
) -> Vec<f64> {
    let dst = taps.len();
    let mut dx = vec![0.0; outer * src * inner];
    for o in 0..outer {
        let gs = &dy[o * dst * inner..(o + 1) * dst * inner];
        let xs = &mut dx[o * src * inner..(o + 1) * src * inner];
        for (i, tap) in taps.iter().enumerate() {
            let g = &gs[i * inner..(i + 1) * inner];
            let (wl, wh) = (1.0 - tap.t, tap.t);
            let lo = &mut xs[tap.lo * inner..(tap.lo + 1) * inner];
            lo.iter_mut().zip(g).for_each(|(a, &v)| *a += wl * v);
            if tap.t != 0.0 {
                let hi = &mut xs[tap.hi * inner..(tap.hi + 1) * inner];
                hi.iter_mut().zip(g).for_each(|(a, &v)| *a += wh * v);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_wrappers_agree_with_loops() {
        let (m, k, n) = (5, 3, 4);
        let x: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let w: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect();
        let mut y = vec![0.0; m * n];
        matmul_xwt(m, k, n, &x, &w, &mut y);
        for r in 0..m {
            for c in 0..n {
                let want: f64 = (0..k).map(|j| x[r * k + j] * w[c * k + j]).sum();
                assert!((y[r * n + c] - want).abs() < 1e-12);
            }
        }
        let mut dx = vec![0.0; m * k];
        matmul_dyw(m, n, k, &y, &w, &mut dx);
        for r in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|c| y[r * n + c] * w[c * k + j]).sum();
                assert!((dx[r * k + j] - want).abs() < 1e-12);
            }
        }
        let mut dw = vec![1.0; n * k];
        accumulate_dyt_x(m, n, k, &y, &x, &mut dw);
        for c in 0..n {
            for j in 0..k {
                let want: f64 = 1.0 + (0..m).map(|r| y[r * n + c] * x[r * k + j]).sum::<f64>();
                assert!((dw[c * k + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn axial_tiles_match_swapped_reference() {
        for &(outer, a, inner, f) in &[(2, 3, 7, 2), (1, 4, 1, 3), (3, 2, 5, 1), (1, 5, 13, 4)] {
            let geo = Axial { outer, a, inner, f };
            let width = a * f;
            let len = outer * a * inner * f;
            let x: Vec<f64> = (0..len).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
            let g: Vec<f64> = (0..len).map(|i| (i as f64 * 0.37).cos()).collect();
            let w: Vec<f64> = (0..width * width).map(|i| (i as f64 * 0.11).sin()).collect();
            let b: Vec<f64> = (0..width).map(|i| i as f64 - 1.5).collect();
            let rows = outer * inner;

            let xs = swap_middle(&x, outer, a, inner, f);
            let mut ys = vec![0.0; len];
            matmul_xwt(rows, width, width, &xs, &w, &mut ys);
            ys.chunks_exact_mut(width).for_each(|r| r.iter_mut().zip(&b).for_each(|(y, b)| *y += b));
            let want_y = unswap_middle(&ys, outer, a, inner, f);
            let mut y = vec![0.0; len];
            geo.forward(&x, &w, &b, &mut y);

            let gs = swap_middle(&g, outer, a, inner, f);
            let mut dxs = vec![0.0; len];
            matmul_dyw(rows, width, width, &gs, &w, &mut dxs);
            let want_dx = unswap_middle(&dxs, outer, a, inner, f);
            let mut want_dw = vec![0.0; width * width];
            accumulate_dyt_x(rows, width, width, &gs, &xs, &mut want_dw);
            let mut want_db = vec![0.0; width];
            accumulate_col_sums(rows, width, &gs, &mut want_db);
            let (mut dx, mut dw, mut db) = (vec![0.0; len], vec![0.0; width * width], vec![0.0; width]);
            geo.backward(&g, &x, &w, Some(&mut dx), Some(&mut dw), Some(&mut db));

            for (got, want) in [(&y, &want_y), (&dx, &want_dx), (&dw, &want_dw), (&db, &want_db)] {
                for (p, q) in got.iter().zip(want.iter()) {
                    assert!((p - q).abs() < 1e-10, "{outer} {a} {inner} {f}: {p} vs {q}");
                }
            }
            // skipped outputs leave nothing behind
            let mut only_db = vec![0.0; width];
            geo.backward(&g, &x, &w, None, None, Some(&mut only_db));
            assert_eq!(only_db, db);
        }
    }

    #[test]
    fn swap_middle_inverts() {
        let src: Vec<f64> = (0..2 * 3 * 4 * 2).map(f64::from).collect();
        let swapped = swap_middle(&src, 2, 3, 4, 2);
        // element (o=1, a=2, inner=3, f=1)
        assert_eq!(swapped[((1 * 4 + 3) * 3 + 2) * 2 + 1], src[((1 * 3 + 2) * 4 + 3) * 2 + 1]);
        assert_eq!(unswap_middle(&swapped, 2, 3, 4, 2), src);
    }

    #[test]
    fn taps_are_corner_aligned() {
        let taps = linear_taps(4, 2);
        assert_eq!((taps[0].lo, taps[0].t), (0, 0.0));
        assert_eq!((taps[1].lo, taps[1].t), (3, 0.0));
        let taps = linear_taps(2, 3);
        assert_eq!((taps[1].lo, taps[1].hi, taps[1].t), (0, 1, 0.5));
        assert!(linear_taps(5, 5).iter().enumerate().all(|(i, t)| t.lo == i && t.t == 0.0));
    }
}
