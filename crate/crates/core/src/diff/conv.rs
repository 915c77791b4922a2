//! 3×3×3 cross-correlation with replicate (edge-clamp) padding.
//!
//! Weight layout is `[C_out, C_in, 3, 3, 3]` with the kernel taps stored
//! x-fastest: tap `(kx, ky, kz)` of `(co, ci)` sits at
//! `((co * C_in + ci) * 27) + kx + 3 * ky + 9 * kz`, and tap `(1, 1, 1)` is
//! the center.
//!
//! Layers with many output channels work one z-plane at a time: the plane's
//! receptive field is unrolled into a `[C_in·27, W·H]` column matrix and the
//! channel mixing becomes a single GEMM. Narrow layers use shifted row
//! updates directly.

use rayon::prelude::*;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

const TAPS: usize = 27;
/// Planes whose column gradients are computed before being folded back
/// into the input gradient in z order.
const PLANE_BATCH: usize = 8;
const COLUMN_MIN_COUT: usize = 8;

#[inline]
fn tap_offset(t: usize) -> [isize; 3] {
    [(t % 3) as isize - 1, ((t / 3) % 3) as isize - 1, (t / 9) as isize - 1]
}

#[inline]
fn clamp_shift(i: usize, d: isize, size: usize) -> usize {
    (i as isize + d).clamp(0, size as isize - 1) as usize
}

struct Geometry {
    cin: usize,
    cout: usize,
    dims: [usize; 3],
}

impl Geometry {
    fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn plane(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// Unrolling pays off once enough output channels share each column.
    fn use_columns(&self) -> bool {
        self.cout >= COLUMN_MIN_COUT
    }

    /// Rows of the column matrix.
    fn k(&self) -> usize {
        self.cin * TAPS
    }
}

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Geometry> {
    input.expect_rank("conv3d input", 4)?;
    weight.expect_rank("conv3d weight", 5)?;
    let s = input.shape();
    let w = weight.shape();
    if w[1] != s[0] || w[2..] != [3, 3, 3] {
        return Err(Error::shape("conv3d weight", &[w[0], s[0], 3, 3, 3], w));
    }
    Ok(Geometry {
        cin: s[0],
        cout: w[0],
        dims: [s[1], s[2], s[3]],
    })
}

/// Calls `f(col_offset, src_offset, dx)` for every `(channel, tap, y)` row of
/// plane `z`: row `x` of the column matrix reads `src[src_offset + clamp(x + dx)]`.
#[inline]
fn for_each_col_row(g: &Geometry, z: usize, mut f: impl FnMut(usize, usize, isize)) {
    let [w, h, d] = g.dims;
    let (n, p) = (g.voxels(), g.plane());
    for ci in 0..g.cin {
        for t in 0..TAPS {
            let off = tap_offset(t);
            let zz = clamp_shift(z, off[2], d);
            let row = (ci * TAPS + t) * p;
            for y in 0..h {
                let yy = clamp_shift(y, off[1], h);
                f(row + w * y, ci * n + w * (yy + h * zz), off[0]);
            }
        }
    }
}

fn im2col<T: Real>(g: &Geometry, src: &[T], z: usize, cols: &mut [T]) {
    let w = g.dims[0];
    for_each_col_row(g, z, |c, s, dx| {
        let dst = &mut cols[c..c + w];
        let s = &src[s..s + w];
        match dx {
            0 => dst.copy_from_slice(s),
            1 => {
                dst[..w - 1].copy_from_slice(&s[1..]);
                dst[w - 1] = s[w - 1];
            }
            _ => {
                dst[1..].copy_from_slice(&s[..w - 1]);
                dst[0] = s[0];
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates the column matrix back into `dst`.
fn col2im<T: Real>(g: &Geometry, cols: &[T], z: usize, dst: &mut [T]) {
    let w = g.dims[0];
    for_each_col_row(g, z, |c, s, dx| {
        let src = &cols[c..c + w];
        let d = &mut dst[s..s + w];
        match dx {
            0 => d.iter_mut().zip(src).for_each(|(d, &v)| *d += v),
            1 => {
                d[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &v)| *d += v);
                d[w - 1] += src[w - 1];
            }
            _ => {
                d[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &v)| *d += v);
                d[0] += src[0];
            }
        }
    });
}

/// Copies plane `z` of every channel of `src` into a `[C, W·H]` matrix.
fn gather_plane<T: Real>(src: &[T], channels: usize, n: usize, p: usize, z: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * p);
    for c in 0..channels {
        out.extend_from_slice(&src[c * n + z * p..c * n + (z + 1) * p]);
    }
    out
}

/// `dst[x] += w · src[clamp(x + dx)]`
#[inline]
fn row_gather<T: Real>(dst: &mut [T], src: &[T], w: T, dx: isize) {
    let n = dst.len();
    match dx {
        0 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s),
        1 => {
            dst[..n - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += w * s);
            dst[n - 1] += w * src[n - 1];
        }
        _ => {
            dst[0] += w * src[0];
            dst[1..].iter_mut().zip(&src[..n - 1]).for_each(|(d, &s)| *d += w * s);
        }
    }
}

/// Adjoint of [`row_gather`]: `dst[clamp(x + dx)] += w · src[x]`.
#[inline]
fn row_scatter<T: Real>(dst: &mut [T], src: &[T], w: T, dx: isize) {
    let n = dst.len();
    match dx {
        0 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s),
        1 => {
            dst[1..].iter_mut().zip(&src[..n - 1]).for_each(|(d, &s)| *d += w * s);
            dst[n - 1] += w * src[n - 1];
        }
        _ => {
            dst[..n - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += w * s);
            dst[0] += w * src[0];
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `Σ_x a[x] · b[clamp(x + dx)]`
#[inline]
fn row_dot<T: Real>(a: &[T], b: &[T], dx: isize) -> T {
    let n = a.len();
    match dx {
        0 => dot(a, b),
        1 => dot(&a[..n - 1], &b[1..]) + a[n - 1] * b[n - 1],
        _ => dot(&a[1..], &b[..n - 1]) + a[0] * b[0],
    }
}

/// Visits every output row `(y, z)` together with the source row the tap
/// offset `(dy, dz)` reads from.
#[inline]
fn for_each_row(dims: [usize; 3], off: [isize; 3], mut f: impl FnMut(usize, usize)) {
    let [w, h, d] = dims;
    for z in 0..d {
        let zz = clamp_shift(z, off[2], d);
        for y in 0..h {
            let yy = clamp_shift(y, off[1], h);
            f(w * (y + h * z), w * (yy + h * zz));
        }
    }
}

fn direct_forward<T: Real>(g: &Geometry, input: &[T], weight: &[T], out: &mut [T]) {
    let (n, width) = (g.voxels(), g.dims[0]);
    out.par_chunks_mut(n).enumerate().for_each(|(co, dst)| {
        for ci in 0..g.cin {
            let src = &input[ci * n..(ci + 1) * n];
            let wbase = (co * g.cin + ci) * TAPS;
            for t in 0..TAPS {
                let w = weight[wbase + t];
                if w == T::zero() {
                    continue;
                }
                let off = tap_offset(t);
                for_each_row(g.dims, off, |o, s| {
                    row_gather(&mut dst[o..o + width], &src[s..s + width], w, off[0]);
                });
            }
        }
    });
}

fn direct_input_grad<T: Real>(g: &Geometry, weight: &[T], gout: &[T], gi: &mut [T]) {
    let (n, width) = (g.voxels(), g.dims[0]);
    gi.par_chunks_mut(n).enumerate().for_each(|(ci, dst)| {
        for co in 0..g.cout {
            let src = &gout[co * n..(co + 1) * n];
            let wbase = (co * g.cin + ci) * TAPS;
            for t in 0..TAPS {
                let w = weight[wbase + t];
                if w == T::zero() {
                    continue;
                }
                let off = tap_offset(t);
                for_each_row(g.dims, off, |o, s| {
                    row_scatter(&mut dst[s..s + width], &src[o..o + width], w, off[0]);
                });
            }
        }
    });
}

fn direct_weight_grad<T: Real>(g: &Geometry, input: &[T], gout: &[T], wg: &mut [T]) {
    let (n, width) = (g.voxels(), g.dims[0]);
    wg.par_chunks_mut(TAPS).enumerate().for_each(|(pair, dst)| {
        let (co, ci) = (pair / g.cin, pair % g.cin);
        let go = &gout[co * n..(co + 1) * n];
        let src = &input[ci * n..(ci + 1) * n];
        for (t, slot) in dst.iter_mut().enumerate() {
            let off = tap_offset(t);
            let mut acc = T::zero();
            for_each_row(g.dims, off, |o, s| {
                acc += row_dot(&go[o..o + width], &src[s..s + width], off[0]);
            });
            *slot = acc;
        }
    });
}

fn columns_forward<T: Real>(g: &Geometry, input: &[T], weight: &[T], out: &mut [T]) {
    let (n, p, k) = (g.voxels(), g.plane(), g.k());
    let planes: Vec<Vec<T>> = (0..g.dims[2])
        .into_par_iter()
        .map(|z| {
            let mut cols = vec![T::zero(); k * p];
            im2col(g, input, z, &mut cols);
            let mut plane = vec![T::zero(); g.cout * p];
            gemm_nn(g.cout, k, p, weight, &cols, &mut plane);
            plane
        })
        .collect();
    for (z, plane) in planes.iter().enumerate() {
        for co in 0..g.cout {
            out[co * n + z * p..co * n + (z + 1) * p]
                .iter_mut()
                .zip(&plane[co * p..(co + 1) * p])
                .for_each(|(o, &v)| *o += v);
        }
    }
}

pub fn conv3d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let g = check(input, weight)?;
    bias.expect_shape("conv3d bias", &[g.cout])?;
    let n = g.voxels();
    let mut out = vec![T::zero(); g.cout * n];
    for (co, b) in bias.data().iter().enumerate() {
        out[co * n..(co + 1) * n].fill(*b);
    }
    if g.use_columns() {
        columns_forward(&g, input.data(), weight.data(), &mut out);
    } else {
        direct_forward(&g, input.data(), weight.data(), &mut out);
    }
    Tensor::new(&[g.cout, g.dims[0], g.dims[1], g.dims[2]], out)
}

#[derive(Debug, Clone)]
pub struct Conv3dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn columns_backward<T: Real>(
    g: &Geometry,
    input: &[T],
    weight: &[T],
    gout: &[T],
    wg: &mut [T],
    mut gi: Option<&mut [T]>,
) {
    let (n, p, k) = (g.voxels(), g.plane(), g.k());
    let need_input_grad = gi.is_some();
    let zs: Vec<usize> = (0..g.dims[2]).collect();
    for batch in zs.chunks(PLANE_BATCH) {
        let results: Vec<(Vec<T>, Option<Vec<T>>)> = batch
            .par_iter()
            .map(|&z| {
                let gz = gather_plane(gout, g.cout, n, p, z);
                let mut cols = vec![T::zero(); k * p];
                im2col(g, input, z, &mut cols);
                let mut wpart = vec![T::zero(); g.cout * k];
                gemm_nt(g.cout, p, k, &gz, &cols, T::zero(), &mut wpart);
                let gcols = need_input_grad.then(|| {
                    gemm_tn(g.cout, k, p, weight, &gz, T::zero(), &mut cols);
                    cols
                });
                (wpart, gcols)
            })
            .collect();
        for (&z, (wpart, gcols)) in batch.iter().zip(results) {
            wg.iter_mut().zip(wpart).for_each(|(a, b)| *a += b);
            if let (Some(gi), Some(gcols)) = (gi.as_deref_mut(), gcols) {
                col2im(g, &gcols, z, gi);
            }
        }
    }
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv3dGrads<T>> {
    let g = check(input, weight)?;
    grad_out.expect_shape("conv3d grad_out", &[g.cout, g.dims[0], g.dims[1], g.dims[2]])?;
    let (n, k) = (g.voxels(), g.k());
    let gout = grad_out.data();

    let mut wg = vec![T::zero(); g.cout * k];
    let mut gi = need_input_grad.then(|| vec![T::zero(); g.cin * n]);
    if g.use_columns() {
        columns_backward(&g, input.data(), weight.data(), gout, &mut wg, gi.as_deref_mut());
    } else {
        direct_weight_grad(&g, input.data(), gout, &mut wg);
        if let Some(gi) = gi.as_deref_mut() {
            direct_input_grad(&g, weight.data(), gout, gi);
        }
    }

    let width = g.dims[0];
    let bg: Vec<T> = (0..g.cout)
        .map(|co| {
            gout[co * n..(co + 1) * n]
                .chunks(width)
                .map(|r| r.iter().copied().sum::<T>())
                .sum()
        })
        .collect();

    Ok(Conv3dGrads {
        input: gi.map(|v| Tensor::new(input.shape(), v)).transpose()?,
        weight: Tensor::new(weight.shape(), wg)?,
        bias: Tensor::new(&[g.cout], bg)?,
    })
}
