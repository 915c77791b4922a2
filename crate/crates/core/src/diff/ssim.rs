//! Per-voxel SSIM over a separable 3D Gaussian window with replicate
//! padding, and its exact gradient.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    /// Window 7, σ = 1.5, `c1 = (0.01 L)²`, `c2 = (0.03 L)²` with `L = 1`.
    fn default() -> Self {
        SsimParams {
            window: 7,
            sigma: 1.5,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

impl SsimParams {
    pub fn with_window(window: usize) -> Self {
        SsimParams {
            window,
            ..Self::default()
        }
    }

    fn kernel<T: Real>(&self) -> Vec<T> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|k| {
                let x = k as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| T::lit(v / s)).collect()
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "SSIM window must be odd, got {}",
                self.window
            )));
        }
        let min = dims.0.iter().copied().min().unwrap_or(0);
        if self.window > min {
            return Err(Error::InvalidArgument(format!(
                "SSIM window {} exceeds the smallest volume axis {min}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument("SSIM sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Visits every 1D line along `axis` as `(start, stride)`.
fn lines(dims: Dims, axis: usize) -> Vec<(usize, usize)> {
    let [w, h, d] = dims.0;
    let mut out = Vec::with_capacity(dims.len() / dims.0[axis]);
    match axis {
        0 => {
            for z in 0..d {
                for y in 0..h {
                    out.push((w * (y + h * z), 1));
                }
            }
        }
        1 => {
            for z in 0..d {
                for x in 0..w {
                    out.push((x + w * h * z, w));
                }
            }
        }
        _ => {
            for y in 0..h {
                for x in 0..w {
                    out.push((x + w * y, w * h));
                }
            }
        }
    }
    out
}

/// One blur (or its adjoint) pass along an axis.
fn blur_axis<T: Real>(src: &[T], dims: Dims, axis: usize, kernel: &[T], adjoint: bool) -> Vec<T> {
    let size = dims.0[axis];
    let r = (kernel.len() / 2) as isize;
    let line_list = lines(dims, axis);
    let results: Vec<Vec<T>> = line_list
        .par_iter()
        .with_min_len(64)
        .map(|&(start, stride)| {
            let mut line = vec![T::zero(); size];
            if adjoint {
                for i in 0..size {
                    let g = src[start + i * stride];
                    for (k, &w) in kernel.iter().enumerate() {
                        let j = (i as isize + k as isize - r).clamp(0, size as isize - 1) as usize;
                        line[j] += w * g;
                    }
                }
            } else {
                for (i, out) in line.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (k, &w) in kernel.iter().enumerate() {
                        let j = (i as isize + k as isize - r).clamp(0, size as isize - 1) as usize;
                        acc += w * src[start + j * stride];
                    }
                    *out = acc;
                }
            }
            line
        })
        .collect();
    let mut out = vec![T::zero(); src.len()];
    for (&(start, stride), line) in line_list.iter().zip(results) {
        for (i, v) in line.into_iter().enumerate() {
            out[start + i * stride] = v;
        }
    }
    out
}

fn blur<T: Real>(v: &[T], dims: Dims, kernel: &[T]) -> Vec<T> {
    let a = blur_axis(v, dims, 0, kernel, false);
    let b = blur_axis(&a, dims, 1, kernel, false);
    blur_axis(&b, dims, 2, kernel, false)
}

fn blur_adjoint<T: Real>(g: &[T], dims: Dims, kernel: &[T]) -> Vec<T> {
    let a = blur_axis(g, dims, 2, kernel, true);
    let b = blur_axis(&a, dims, 1, kernel, true);
    blur_axis(&b, dims, 0, kernel, true)
}

struct Moments<T> {
    mu_a: Vec<T>,
    mu_b: Vec<T>,
    s_aa: Vec<T>,
    s_bb: Vec<T>,
    s_ab: Vec<T>,
}

fn check<T: Real>(a: &Tensor<T>, b: &Tensor<T>, params: &SsimParams) -> Result<Dims> {
    a.expect_rank("ssim input", 3)?;
    b.expect_shape("ssim input", a.shape())?;
    let s = a.shape();
    let dims = Dims::new(s[0], s[1], s[2])?;
    params.validate(dims)?;
    Ok(dims)
}

fn moments<T: Real>(a: &[T], b: &[T], dims: Dims, kernel: &[T]) -> Moments<T> {
    let aa: Vec<T> = a.iter().map(|&x| x * x).collect();
    let bb: Vec<T> = b.iter().map(|&x| x * x).collect();
    let ab: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    Moments {
        mu_a: blur(a, dims, kernel),
        mu_b: blur(b, dims, kernel),
        s_aa: blur(&aa, dims, kernel),
        s_bb: blur(&bb, dims, kernel),
        s_ab: blur(&ab, dims, kernel),
    }
}

/// Returns `(S, dS/dμa, dS/dμb, dS/dE[a²], dS/dE[b²], dS/dE[ab])` at a voxel.
#[inline]
fn ssim_point<T: Real>(mu_a: T, mu_b: T, s_aa: T, s_bb: T, s_ab: T, c1: T, c2: T) -> (T, [T; 5]) {
    let two = T::lit(2.0);
    let var_a = s_aa - mu_a * mu_a;
    let var_b = s_bb - mu_b * mu_b;
    let cov = s_ab - mu_a * mu_b;
    let a1 = two * mu_a * mu_b + c1;
    let a2 = two * cov + c2;
    let b1 = mu_a * mu_a + mu_b * mu_b + c1;
    let b2 = var_a + var_b + c2;
    let den = b1 * b2;
    let s = a1 * a2 / den;
    let d_a1 = a2 / den;
    let d_a2 = a1 / den;
    // Written so that identical inputs cancel exactly: a1 == b1 and
    // a2 == b2 make each pair of partials bitwise opposite.
    let d_b1 = -(a1 / b1) * d_a1;
    let d_b2 = -(a2 / b2) * d_a2;
    let g_mu_a = two * (mu_b * (d_a1 - d_a2) + mu_a * (d_b1 - d_b2));
    let g_mu_b = two * (mu_a * (d_a1 - d_a2) + mu_b * (d_b1 - d_b2));
    (s, [g_mu_a, g_mu_b, d_b2, d_b2, two * d_a2])
}

pub fn ssim_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, params: &SsimParams) -> Result<Tensor<T>> {
    let dims = check(a, b, params)?;
    let kernel = params.kernel::<T>();
    let m = moments(a.data(), b.data(), dims, &kernel);
    let (c1, c2) = (T::lit(params.c1), T::lit(params.c2));
    let out = (0..dims.len())
        .map(|p| ssim_point(m.mu_a[p], m.mu_b[p], m.s_aa[p], m.s_bb[p], m.s_ab[p], c1, c2).0)
        .collect();
    Tensor::new(a.shape(), out)
}

/// Gradients of `Σ grad_map · ssim_map(a, b)` with respect to `a` and `b`.
pub fn ssim_map_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    params: &SsimParams,
    grad_map: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = check(a, b, params)?;
    grad_map.expect_shape("ssim grad_map", a.shape())?;
    let kernel = params.kernel::<T>();
    let m = moments(a.data(), b.data(), dims, &kernel);
    let (c1, c2) = (T::lit(params.c1), T::lit(params.c2));
    let n = dims.len();
    let mut g = [
        vec![T::zero(); n],
        vec![T::zero(); n],
        vec![T::zero(); n],
        vec![T::zero(); n],
        vec![T::zero(); n],
    ];
    for p in 0..n {
        let (_, d) = ssim_point(m.mu_a[p], m.mu_b[p], m.s_aa[p], m.s_bb[p], m.s_ab[p], c1, c2);
        let u = grad_map.data()[p];
        for k in 0..5 {
            g[k][p] = u * d[k];
        }
    }
    let [g_mu_a, g_mu_b, g_aa, g_bb, g_ab] = g.map(|v| blur_adjoint(&v, dims, &kernel));
    let two = T::lit(2.0);
    let (av, bv) = (a.data(), b.data());
    let ga = (0..n)
        .map(|p| g_mu_a[p] + two * av[p] * g_aa[p] + bv[p] * g_ab[p])
        .collect();
    let gb = (0..n)
        .map(|p| g_mu_b[p] + two * bv[p] * g_bb[p] + av[p] * g_ab[p])
        .collect();
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(a.shape(), gb)?))
}
