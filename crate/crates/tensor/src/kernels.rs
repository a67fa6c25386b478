//! Raw loops shared by the graph operations.
//!
//! These work on flat row-major slices and perform no shape validation;
//! callers check shapes first.

use crate::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_a_bt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_b_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a stride-1 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let eh = self.dilation * (self.kh.checked_sub(1)?) + 1;
        let ew = self.dilation * (self.kw.checked_sub(1)?) + 1;
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if eh > ph || ew > pw {
            return None;
        }
        Some((ph - eh + 1, pw - ew + 1))
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Offset of tap `n` relative to the output position, before padding shift.
    #[inline]
    pub fn tap(&self, n: usize) -> (isize, isize) {
        let ki = n / self.kw;
        let kj = n % self.kw;
        (
            (ki * self.dilation) as isize - self.padding as isize,
            (kj * self.dilation) as isize - self.padding as isize,
        )
    }
}

/// Unfolds `x[C×H×W]` into columns `[C·kh·kw × Ho·Wo]`, zero outside the grid.
pub fn im2col<F: Real>(x: &[F], g: &ConvGeom, ho: usize, wo: usize) -> Vec<F> {
    let taps = g.taps();
    let mut cols = vec![F::zero(); g.channels * taps * ho * wo];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for n in 0..taps {
            let (di, dj) = g.tap(n);
            let row = &mut cols[(c * taps + n) * ho * wo..(c * taps + n + 1) * ho * wo];
            for i in 0..ho {
                let si = i as isize + di;
                if si < 0 || si >= g.height as isize {
                    continue;
                }
                for j in 0..wo {
                    let sj = j as isize + dj;
                    if sj < 0 || sj >= g.width as isize {
                        continue;
                    }
                    row[i * wo + j] = plane[si as usize * g.width + sj as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_acc<F: Real>(dcols: &[F], g: &ConvGeom, ho: usize, wo: usize, dx: &mut [F]) {
    let taps = g.taps();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for n in 0..taps {
            let (di, dj) = g.tap(n);
            let row = &dcols[(c * taps + n) * ho * wo..(c * taps + n + 1) * ho * wo];
            for i in 0..ho {
                let si = i as isize + di;
                if si < 0 || si >= g.height as isize {
                    continue;
                }
                for j in 0..wo {
                    let sj = j as isize + dj;
                    if sj < 0 || sj >= g.width as isize {
                        continue;
                    }
                    plane[si as usize * g.width + sj as usize] += row[i * wo + j];
                }
            }
        }
    }
}

#[inline]
fn cell<F: Real>(plane: &[F], h: usize, w: usize, i: isize, j: isize) -> F {
    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
        F::zero()
    } else {
        plane[i as usize * w + j as usize]
    }
}

/// Bilinear read of one `h×w` plane at fractional `(pi, pj)`; cells outside
/// the grid read as zero.
#[inline]
pub fn bilinear<F: Real>(plane: &[F], h: usize, w: usize, pi: F, pj: F) -> F {
    let fi = pi.floor();
    let fj = pj.floor();
    let (ai, aj) = (pi - fi, pj - fj);
    let (i0, j0) = (fi.as_f64() as isize, fj.as_f64() as isize);
    let one = F::one();
    let v00 = cell(plane, h, w, i0, j0);
    let v01 = cell(plane, h, w, i0, j0 + 1);
    let v10 = cell(plane, h, w, i0 + 1, j0);
    let v11 = cell(plane, h, w, i0 + 1, j0 + 1);
    (one - ai) * (one - aj) * v00 + (one - ai) * aj * v01 + ai * (one - aj) * v10 + ai * aj * v11
}

#[inline]
fn add_cell<F: Real>(plane: &mut [F], h: usize, w: usize, i: isize, j: isize, v: F) {
    if i >= 0 && j >= 0 && i < h as isize && j < w as isize {
        plane[i as usize * w + j as usize] += v;
    }
}

/// Backward of [`bilinear`] for upstream gradient `g`: accumulates into
/// `dplane` and returns the partial derivatives w.r.t. `(pi, pj)`.
#[inline]
pub fn bilinear_backward<F: Real>(
    plane: &[F],
    dplane: Option<&mut [F]>,
    h: usize,
    w: usize,
    pi: F,
    pj: F,
    g: F,
) -> (F, F) {
    let fi = pi.floor();
    let fj = pj.floor();
    let (ai, aj) = (pi - fi, pj - fj);
    let (i0, j0) = (fi.as_f64() as isize, fj.as_f64() as isize);
    let one = F::one();
    if let Some(d) = dplane {
        add_cell(d, h, w, i0, j0, g * (one - ai) * (one - aj));
        add_cell(d, h, w, i0, j0 + 1, g * (one - ai) * aj);
        add_cell(d, h, w, i0 + 1, j0, g * ai * (one - aj));
        add_cell(d, h, w, i0 + 1, j0 + 1, g * ai * aj);
    }
    let v00 = cell(plane, h, w, i0, j0);
    let v01 = cell(plane, h, w, i0, j0 + 1);
    let v10 = cell(plane, h, w, i0 + 1, j0);
    let v11 = cell(plane, h, w, i0 + 1, j0 + 1);
    let dpi = (one - aj) * (v10 - v00) + aj * (v11 - v01);
    let dpj = (one - ai) * (v01 - v00) + ai * (v11 - v10);
    (g * dpi, g * dpj)
}

/// Source index in `[C·S²×H×W]` for destination `(c, y, x)` of `[C×SH×SW]`.
#[inline]
pub fn shuffle_src(c: usize, y: usize, x: usize, s: usize, h: usize, w: usize) -> usize {
    let (i, si) = (y / s, y % s);
    let (j, sj) = (x / s, x % s);
    let ch = c * s * s + si * s + sj;
    (ch * h + i) * w + j
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
