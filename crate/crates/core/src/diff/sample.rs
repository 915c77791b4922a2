//! Trilinear sampling and its adjoint, trilinear splatting.
//!
//! Coordinates are normalized per axis so that `-1` and `+1` hit the first
//! and last voxel centers. They are clamped to that range before
//! interpolation, so the coordinate gradient is zero outside it.
//!
//! At exact voxel centers the interpolant has a kink; there the coordinate
//! derivative is the average of the two one-sided slopes (a central
//! difference), so at the identity grid it is the image gradient.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Dims;

const POINT_CHUNK: usize = 4096;
/// Scatter partitions; fixed so accumulation order never depends on threads.
const SCATTER_PARTS: usize = 8;

/// Interpolation taps along one axis: voxel index, value weight and
/// derivative weight with respect to the continuous index.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTaps<T> {
    idx: [usize; 3],
    w: [T; 3],
    dw: [T; 3],
    len: usize,
}

/// `u` must already lie in `[0, size - 1]`.
#[inline]
pub(crate) fn axis_taps<T: Real>(u: T, size: usize) -> AxisTaps<T> {
    let (z, one, half) = (T::zero(), T::one(), T::lit(0.5));
    if size == 1 {
        return AxisTaps {
            idx: [0; 3],
            w: [one, z, z],
            dw: [z; 3],
            len: 1,
        };
    }
    let k = u.round();
    // Grid coordinates carry rounding error of a few ulps times the extent.
    let tol = T::epsilon() * T::lit(8.0 * size as f64);
    if (u - k).abs() <= tol {
        let k = k.to_usize().unwrap_or(0).min(size - 1);
        if k > 0 && k < size - 1 {
            AxisTaps {
                idx: [k - 1, k, k + 1],
                w: [z, one, z],
                dw: [-half, z, half],
                len: 3,
            }
        } else if k == 0 {
            AxisTaps {
                idx: [0, 1, 0],
                w: [one, z, z],
                dw: [-one, one, z],
                len: 2,
            }
        } else {
            AxisTaps {
                idx: [size - 2, size - 1, 0],
                w: [z, one, z],
                dw: [-one, one, z],
                len: 2,
            }
        }
    } else {
        let i0 = u.floor().to_usize().unwrap_or(0).min(size - 2);
        let f = u - T::lit(i0 as f64);
        AxisTaps {
            idx: [i0, i0 + 1, 0],
            w: [one - f, f, z],
            dw: [-one, one, z],
            len: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PointTaps<T> {
    axes: [AxisTaps<T>; 3],
    /// d(index)/d(coordinate) per axis, zero where the coordinate was clamped.
    chain: [T; 3],
}

impl<T: Real> PointTaps<T> {
    /// Taps for a point given in continuous voxel-index units.
    #[inline]
    pub(crate) fn from_index(u: [T; 3], dims: Dims) -> Self {
        let axes = std::array::from_fn(|a| {
            let hi = T::lit((dims.0[a] - 1) as f64);
            axis_taps(u[a].max(T::zero()).min(hi), dims.0[a])
        });
        PointTaps {
            axes,
            chain: [T::one(); 3],
        }
    }

    #[inline]
    fn from_normalized(c: [T; 3], dims: Dims) -> Self {
        let one = T::one();
        let mut u = [T::zero(); 3];
        let mut chain = [T::zero(); 3];
        for a in 0..3 {
            let half = T::lit((dims.0[a] as f64 - 1.0) / 2.0);
            let cc = c[a];
            if cc >= -one && cc <= one {
                chain[a] = half;
            }
            u[a] = (cc.max(-one).min(one) + one) * half;
        }
        let mut taps = Self::from_index(u, dims);
        taps.chain = chain;
        taps
    }

    /// Calls `f(flat_index, weight, d_weight/d_index)` for every tap triple.
    #[inline]
    fn for_each_corner(&self, dims: Dims, mut f: impl FnMut(usize, T, [T; 3])) {
        let [ax, ay, az] = &self.axes;
        for k in 0..az.len {
            for j in 0..ay.len {
                let yz_w = ay.w[j] * az.w[k];
                let base = dims.w() * (ay.idx[j] + dims.h() * az.idx[k]);
                for i in 0..ax.len {
                    let w = ax.w[i] * yz_w;
                    let d = [
                        ax.dw[i] * yz_w,
                        ax.w[i] * ay.dw[j] * az.w[k],
                        ax.w[i] * ay.w[j] * az.dw[k],
                    ];
                    f(base + ax.idx[i], w, d);
                }
            }
        }
    }

    #[inline]
    pub(crate) fn value(&self, vol: &[T], dims: Dims) -> T {
        let mut acc = T::zero();
        self.for_each_corner(dims, |p, w, _| {
            if w != T::zero() {
                acc += w * vol[p];
            }
        });
        acc
    }

    /// Gradient of the interpolated value of `field` w.r.t. the point, in the
    /// point's own units (normalized or index, depending on construction).
    #[inline]
    fn point_grad(&self, field: &[T], dims: Dims) -> [T; 3] {
        let mut g = [T::zero(); 3];
        self.for_each_corner(dims, |p, _, d| {
            let v = field[p];
            for a in 0..3 {
                g[a] += d[a] * v;
            }
        });
        [g[0] * self.chain[0], g[1] * self.chain[1], g[2] * self.chain[2]]
    }
}

fn check_coords<T: Real>(coords: &Tensor<T>) -> Result<Dims> {
    coords.expect_rank("coords", 4)?;
    let s = coords.shape();
    if s[0] != 3 {
        return Err(Error::shape("coords", &[3, s[1], s[2], s[3]], s));
    }
    Dims::new(s[1], s[2], s[3])
}

fn volume_dims<T: Real>(volume: &Tensor<T>) -> Result<Dims> {
    volume.expect_rank("volume", 3)?;
    let s = volume.shape();
    Dims::new(s[0], s[1], s[2])
}

#[inline]
fn point_at<T: Real>(coords: &[T], n: usize, p: usize) -> [T; 3] {
    [coords[p], coords[n + p], coords[2 * n + p]]
}

/// Samples `volume` `[W, H, D]` at normalized `coords` `[3, W', H', D']`.
pub fn trilinear_sample<T: Real>(volume: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let vd = volume_dims(volume)?;
    let cd = check_coords(coords)?;
    let n = cd.len();
    let c = coords.data();
    let v = volume.data();
    let mut out = vec![T::zero(); n];
    out.par_chunks_mut(POINT_CHUNK)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let start = ci * POINT_CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                *o = PointTaps::from_normalized(point_at(c, n, start + k), vd).value(v, vd);
            }
        });
    Tensor::new(&cd.as_vec(), out)
}

#[derive(Debug, Clone)]
pub struct SampleGrads<T> {
    pub volume: Option<Tensor<T>>,
    pub coords: Tensor<T>,
}

pub fn trilinear_sample_backward<T: Real>(
    volume: &Tensor<T>,
    coords: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_volume_grad: bool,
) -> Result<SampleGrads<T>> {
    let vd = volume_dims(volume)?;
    let cd = check_coords(coords)?;
    grad_out.expect_shape("sample grad_out", &cd.as_vec())?;
    let n = cd.len();
    let c = coords.data();
    let g = grad_out.data();

    let per_point: Vec<[T; 3]> = (0..n)
        .into_par_iter()
        .with_min_len(POINT_CHUNK)
        .map(|p| {
            let pg = PointTaps::from_normalized(point_at(c, n, p), vd).point_grad(volume.data(), vd);
            [pg[0] * g[p], pg[1] * g[p], pg[2] * g[p]]
        })
        .collect();
    let mut cg = vec![T::zero(); 3 * n];
    for (p, v) in per_point.iter().enumerate() {
        cg[p] = v[0];
        cg[n + p] = v[1];
        cg[2 * n + p] = v[2];
    }

    let volume_grad = if need_volume_grad {
        let data = scatter_partitioned(n, vd.len(), |p, acc: &mut [T]| {
            let gp = g[p];
            PointTaps::from_normalized(point_at(c, n, p), vd).for_each_corner(vd, |q, w, _| {
                acc[q] += w * gp;
            });
        });
        Some(Tensor::new(volume.shape(), data)?)
    } else {
        None
    };

    Ok(SampleGrads {
        volume: volume_grad,
        coords: Tensor::new(coords.shape(), cg)?,
    })
}

/// Runs `deposit` for every point in `SCATTER_PARTS` contiguous partitions,
/// each into its own buffer, and sums the buffers in partition order.
fn scatter_partitioned<T: Real>(
    points: usize,
    target: usize,
    deposit: impl Fn(usize, &mut [T]) + Sync,
) -> Vec<T> {
    let part = points.div_ceil(SCATTER_PARTS).max(1);
    let buffers: Vec<Vec<T>> = (0..SCATTER_PARTS)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![T::zero(); target];
            for p in (k * part).min(points)..((k + 1) * part).min(points) {
                deposit(p, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![T::zero(); target];
    for b in buffers {
        out.iter_mut().zip(b).for_each(|(o, v)| *o += v);
    }
    out
}

/// Deposits unit mass per point onto its trilinear neighbours in a zero
/// tensor of shape `target`.
pub fn trilinear_splat<T: Real>(coords: &Tensor<T>, target: Dims) -> Result<Tensor<T>> {
    let cd = check_coords(coords)?;
    let n = cd.len();
    let c = coords.data();
    let data = scatter_partitioned(n, target.len(), |p, acc: &mut [T]| {
        PointTaps::from_normalized(point_at(c, n, p), target).for_each_corner(target, |q, w, _| {
            acc[q] += w;
        });
    });
    Tensor::new(&target.as_vec(), data)
}

/// Coordinate gradient of `Σ grad_out · trilinear_splat(coords, target)`.
pub fn trilinear_splat_backward<T: Real>(
    coords: &Tensor<T>,
    target: Dims,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let cd = check_coords(coords)?;
    grad_out.expect_shape("splat grad_out", &target.as_vec())?;
    let n = cd.len();
    let c = coords.data();
    let per_point: Vec<[T; 3]> = (0..n)
        .into_par_iter()
        .with_min_len(POINT_CHUNK)
        .map(|p| PointTaps::from_normalized(point_at(c, n, p), target).point_grad(grad_out.data(), target))
        .collect();
    let mut cg = vec![T::zero(); 3 * n];
    for (p, v) in per_point.iter().enumerate() {
        cg[p] = v[0];
        cg[n + p] = v[1];
        cg[2 * n + p] = v[2];
    }
    Tensor::new(coords.shape(), cg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::make_grid;

    fn grid_tensor(d: Dims) -> Tensor<f64> {
        Tensor::new(&[3, d.w(), d.h(), d.d()], make_grid::<f64>(d).coords().to_vec()).unwrap()
    }

    #[test]
    fn identity_grid_reproduces_volume() {
        let d = Dims::new(5, 4, 3).unwrap();
        let v = Tensor::from_fn(&d.as_vec(), |i| (i as f64 * 0.77).sin());
        let out = trilinear_sample(&v, &grid_tensor(d)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identity_grid_is_exact_in_single_precision() {
        let d = Dims::new(48, 7, 13).unwrap();
        let v = Tensor::<f32>::from_fn(&d.as_vec(), |i| (i as f32 * 0.31).cos());
        let g = Tensor::new(&[3, 48, 7, 13], make_grid::<f32>(d).coords().to_vec()).unwrap();
        assert_eq!(trilinear_sample(&v, &g).unwrap().data(), v.data());
        let b = trilinear_splat(&g, d).unwrap();
        assert!(b.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn center_of_two_cube_is_corner_mean() {
        let v = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        let c = Tensor::new(&[3, 1, 1, 1], vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(trilinear_sample(&v, &c).unwrap().data(), &[3.5]);
    }

    #[test]
    fn single_point_splat_spreads_evenly() {
        let c = Tensor::new(&[3, 1, 1, 1], vec![0.0f64, 0.0, 0.0]).unwrap();
        let b = trilinear_splat(&c, Dims::cube(2).unwrap()).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.125));
    }

    #[test]
    fn identity_splat_is_all_ones() {
        let d = Dims::new(4, 5, 3).unwrap();
        let b = trilinear_splat(&grid_tensor(d), d).unwrap();
        assert!(b.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn out_of_range_coordinates_clamp_with_zero_gradient() {
        let v = Tensor::from_fn(&[3, 3, 3], |i| i as f64);
        let c = Tensor::new(&[3, 1, 1, 1], vec![1.7, -0.3, -4.0]).unwrap();
        let inside = Tensor::new(&[3, 1, 1, 1], vec![1.0, -0.3, -1.0]).unwrap();
        let a = trilinear_sample(&v, &c).unwrap();
        let b = trilinear_sample(&v, &inside).unwrap();
        assert_eq!(a.data(), b.data());
        let g = trilinear_sample_backward(&v, &c, &Tensor::filled(&[1, 1, 1], 1.0), false).unwrap();
        assert_eq!(g.coords.data()[0], 0.0);
        assert_eq!(g.coords.data()[2], 0.0);
        assert!(g.coords.data()[1] != 0.0);
    }

    #[test]
    fn coord_gradient_at_grid_points_is_central_difference() {
        let d = Dims::new(5, 6, 4).unwrap();
        let v = Tensor::from_fn(&d.as_vec(), |i| ((i * 37) % 11) as f64 * 0.1);
        let grid = grid_tensor(d);
        let ones = Tensor::filled(&d.as_vec(), 1.0);
        let g = trilinear_sample_backward(&v, &grid, &ones, false).unwrap();
        let n = d.len();
        for z in 1..d.d() - 1 {
            for y in 1..d.h() - 1 {
                for x in 1..d.w() - 1 {
                    let p = d.index(x, y, z);
                    let at = |x, y, z| v.data()[d.index(x, y, z)];
                    let cd = [
                        (at(x + 1, y, z) - at(x - 1, y, z)) / 2.0,
                        (at(x, y + 1, z) - at(x, y - 1, z)) / 2.0,
                        (at(x, y, z + 1) - at(x, y, z - 1)) / 2.0,
                    ];
                    let half = d.half_extent();
                    for a in 0..3 {
                        let got = g.coords.data()[a * n + p];
                        assert!((got - cd[a] * half[a]).abs() < 1e-12, "axis {a} at {p}");
                    }
                }
            }
        }
    }

    #[test]
    fn splat_is_adjoint_of_sampling() {
        // Σ_p sample(V, c)_p = Σ_q V_q · splat(c)_q
        let vd = Dims::new(4, 3, 5).unwrap();
        let cd = Dims::new(3, 3, 2).unwrap();
        let v = Tensor::from_fn(&vd.as_vec(), |i| (i as f64 * 1.3).sin());
        let c = Tensor::from_fn(&[3, 3, 3, 2], |i| ((i * 7919) % 97) as f64 / 50.0 - 0.97);
        let s: f64 = trilinear_sample(&v, &c).unwrap().data().iter().sum();
        let b = trilinear_splat(&c, vd).unwrap();
        let t: f64 = v.data().iter().zip(b.data()).map(|(a, b)| a * b).sum();
        assert!((s - t).abs() < 1e-12);
        let gv = trilinear_sample_backward(&v, &c, &Tensor::filled(&cd.as_vec(), 1.0), true)
            .unwrap()
            .volume
            .unwrap();
        for (a, b) in gv.data().iter().zip(b.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
