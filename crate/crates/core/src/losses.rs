//! Photometric, SSIM and occupancy losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::diff::{
    ssim_map, ssim_map_backward, trilinear_splat, trilinear_splat_backward, SsimParams, Tensor,
};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub ssim: f64,
    pub occupancy: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.photometric.is_finite()
            && self.ssim.is_finite()
            && self.occupancy.is_finite()
    }
}

fn mean<T: Real>(v: impl Iterator<Item = T>, n: usize) -> f64 {
    v.map(|x| x.to_f64_lossy()).sum::<f64>() / n as f64
}

/// Mean of `(fixed - warped)²`.
pub fn photometric_loss<T: Real>(fixed: &Tensor<T>, warped: &Tensor<T>) -> Result<f64> {
    warped.expect_shape("photometric_loss", fixed.shape())?;
    let n = fixed.len();
    Ok(mean(
        fixed.data().iter().zip(warped.data()).map(|(&f, &w)| (f - w) * (f - w)),
        n,
    ))
}

/// `d photometric / d warped`.
pub fn photometric_grad<T: Real>(fixed: &Tensor<T>, warped: &Tensor<T>) -> Result<Tensor<T>> {
    warped.expect_shape("photometric_loss", fixed.shape())?;
    let s = T::lit(2.0 / fixed.len() as f64);
    let data = fixed
        .data()
        .iter()
        .zip(warped.data())
        .map(|(&f, &w)| s * (w - f))
        .collect();
    Tensor::new(fixed.shape(), data)
}

/// `1 - mean(ssim_map(fixed, warped))`.
pub fn ssim_loss<T: Real>(fixed: &Tensor<T>, warped: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    warped.expect_shape("ssim_loss", fixed.shape())?;
    let m = ssim_map(fixed, warped, params)?;
    Ok(1.0 - mean(m.data().iter().copied(), m.len()))
}

/// `d ssim_loss / d warped`.
pub fn ssim_grad<T: Real>(fixed: &Tensor<T>, warped: &Tensor<T>, params: &SsimParams) -> Result<Tensor<T>> {
    warped.expect_shape("ssim_loss", fixed.shape())?;
    let upstream = Tensor::filled(fixed.shape(), T::lit(-1.0 / fixed.len() as f64));
    Ok(ssim_map_backward(fixed, warped, params, &upstream)?.1)
}

/// Sum over axes of the RMS of first differences of `occupancy`, and
/// optionally its gradient with respect to `occupancy`.
fn occupancy_roughness<T: Real>(b: &Tensor<T>, dims: Dims, want_grad: bool) -> (f64, Option<Tensor<T>>) {
    let data = b.data();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![T::zero(); data.len()]);
    let strides = [1, dims.w(), dims.w() * dims.h()];
    for axis in 0..3 {
        let size = dims.0[axis];
        if size < 2 {
            continue;
        }
        let stride = strides[axis];
        let pairs: Vec<usize> = (0..dims.len())
            .filter(|&p| dims.coords(p)[axis] + 1 < size)
            .collect();
        let count = pairs.len() as f64;
        let sq: f64 = pairs
            .iter()
            .map(|&p| {
                let d = (data[p + stride] - data[p]).to_f64_lossy();
                d * d
            })
            .sum();
        let rmsd = (sq / count).sqrt();
        total += rmsd;
        if let (Some(g), true) = (grad.as_mut(), rmsd > 0.0) {
            let s = 1.0 / (count * rmsd);
            for &p in &pairs {
                let d = T::lit((data[p + stride] - data[p]).to_f64_lossy() * s);
                g[p + stride] += d;
                g[p] -= d;
            }
        }
    }
    let grad = grad.map(|g| Tensor::new(b.shape(), g).expect("same shape"));
    (total, grad)
}

/// Roughness of the occupancy tensor obtained by splatting `phi` onto a
/// grid of `moving` shape.
pub fn occupancy_loss<T: Real>(phi: &Tensor<T>, moving: Dims) -> Result<f64> {
    let b = trilinear_splat(phi, moving)?;
    Ok(occupancy_roughness(&b, moving, false).0)
}

/// `d occupancy_loss / d phi`.
pub fn occupancy_grad<T: Real>(phi: &Tensor<T>, moving: Dims) -> Result<Tensor<T>> {
    let b = trilinear_splat(phi, moving)?;
    let (_, gb) = occupancy_roughness(&b, moving, true);
    trilinear_splat_backward(phi, moving, &gb.expect("requested"))
}

/// `α·photometric + β·SSIM + γ·occupancy`.
pub fn total_loss<T: Real>(
    fixed: &Tensor<T>,
    warped: &Tensor<T>,
    phi: &Tensor<T>,
    moving: Dims,
    weights: &LossWeights,
    ssim: &SsimParams,
) -> Result<LossBreakdown> {
    let photometric = photometric_loss(fixed, warped)?;
    let s = ssim_loss(fixed, warped, ssim)?;
    let occupancy = occupancy_loss(phi, moving)?;
    Ok(LossBreakdown {
        total: weights.alpha * photometric + weights.beta * s + weights.gamma * occupancy,
        photometric,
        ssim: s,
        occupancy,
    })
}

/// Loss gradients produced by [`total_loss_with_grads`].
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    /// `dL / d warped` from the image terms.
    pub warped: Tensor<T>,
    /// `dL / d phi` from the occupancy term only; the image terms reach
    /// `phi` through the sampler.
    pub phi: Tensor<T>,
}

pub fn total_loss_with_grads<T: Real>(
    fixed: &Tensor<T>,
    warped: &Tensor<T>,
    phi: &Tensor<T>,
    moving: Dims,
    weights: &LossWeights,
    ssim: &SsimParams,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    let breakdown = total_loss(fixed, warped, phi, moving, weights, ssim)?;

    let mut gw = photometric_grad(fixed, warped)?;
    let a = T::lit(weights.alpha);
    gw.data_mut().iter_mut().for_each(|g| *g *= a);
    if weights.beta != 0.0 {
        let gs = ssim_grad(fixed, warped, ssim)?;
        let b = T::lit(weights.beta);
        gw.data_mut()
            .iter_mut()
            .zip(gs.data())
            .for_each(|(g, &s)| *g += b * s);
    }

    let gphi = if weights.gamma != 0.0 {
        let mut g = occupancy_grad(phi, moving)?;
        let c = T::lit(weights.gamma);
        g.data_mut().iter_mut().for_each(|v| *v *= c);
        g
    } else {
        Tensor::zeros(phi.shape())
    };

    Ok((breakdown, LossGrads { warped: gw, phi: gphi }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::make_grid;

    fn grid(d: Dims) -> Tensor<f64> {
        Tensor::new(&[3, d.w(), d.h(), d.d()], make_grid::<f64>(d).coords().to_vec()).unwrap()
    }

    #[test]
    fn photometric_basics() {
        let a = Tensor::<f64>::filled(&[3, 3, 3], 1.0);
        let b = Tensor::zeros(&[3, 3, 3]);
        assert_eq!(photometric_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(photometric_loss(&a, &b).unwrap(), 1.0);
        assert!(photometric_loss(&a, &Tensor::zeros(&[3, 3, 2])).is_err());
    }

    #[test]
    fn ssim_loss_of_constants() {
        let a = Tensor::<f64>::filled(&[7, 7, 7], 0.3);
        let b = Tensor::filled(&[7, 7, 7], 0.7);
        let l = ssim_loss(&a, &b, &SsimParams::default()).unwrap();
        let expect = 1.0 - (2.0 * 0.21 + 1e-4) / (0.09 + 0.49 + 1e-4);
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.275815).abs() < 1e-6);
        assert_eq!(ssim_loss(&a, &a, &SsimParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn identity_occupancy_is_zero() {
        let d = Dims::new(4, 5, 3).unwrap();
        assert_eq!(occupancy_loss(&grid(d), d).unwrap(), 0.0);
        let g = occupancy_grad(&grid(d), d).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapsed_points_three_voxel_case() {
        // All N points land on the middle voxel of a (3,1,1) target.
        let n = 5;
        let mut phi = vec![0.0f64; 3 * n];
        for p in 0..n {
            phi[p] = 0.0;
        }
        let phi = Tensor::new(&[3, n, 1, 1], phi).unwrap();
        let target = Dims::new(3, 1, 1).unwrap();
        let b = trilinear_splat(&phi, target).unwrap();
        assert_eq!(b.data(), &[0.0, n as f64, 0.0]);
        assert!((occupancy_loss(&phi, target).unwrap() - n as f64).abs() < 1e-12);
    }

    #[test]
    fn weights_mask_terms() {
        let d = Dims::new(7, 7, 7).unwrap();
        let f = Tensor::from_fn(&d.as_vec(), |i| ((i * 13) % 7) as f64 / 7.0);
        let w = Tensor::from_fn(&d.as_vec(), |i| ((i * 5) % 11) as f64 / 11.0);
        let phi = grid(d);
        let only_photo = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let b = total_loss(&f, &w, &phi, d, &only_photo, &SsimParams::default()).unwrap();
        assert_eq!(b.total, photometric_loss(&f, &w).unwrap());
        let id = total_loss(&f, &f, &phi, d, &LossWeights::default(), &SsimParams::default()).unwrap();
        assert_eq!(id.total, 0.0);
    }

    #[test]
    fn negative_weights_are_invalid() {
        let w = LossWeights {
            alpha: 1.0,
            beta: -0.1,
            gamma: 0.1,
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
