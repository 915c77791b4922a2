//! Synthetic image pairs with a known, fold-free ground-truth displacement.
//!
//! The fixed image is an analytic phantom: a softly edged ellipsoid plus a
//! few anisotropic Gaussian bumps. The ground truth is a sum of Gaussian
//! radial basis displacements `u(x) = Σ a_k exp(-|x - c_k|² / 2σ_k²)` with
//! `|a_k| ≤ 0.4 σ_k`, which keeps `‖∇u‖ < 1` and therefore the map
//! `x ↦ x + u(x)` invertible. The moving image is the phantom evaluated at
//! that inverse, so `moving(x + u(x)) = fixed(x)` holds exactly at every
//! voxel and `u` is precisely the field a registration should return.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metaimage::{save_field, save_volume};
use crate::metrics::{dice, jacobian_folding, Landmarks};
use crate::volume::{Dims, FieldUnit, IntensityUnit, VectorField, Volume};

/// Number of radial basis displacements.
pub const RBF_COUNT: usize = 4;
/// Amplitude bound relative to each basis width.
pub const AMPLITUDE_BOUND: f64 = 0.4;
const MIN_SIZE: usize = 16;
const LANDMARKS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_mask: Volume,
    pub moving_mask: Volume,
    /// Voxel-unit displacement taking fixed voxels to moving positions.
    pub gt_field: VectorField,
    pub landmarks: Landmarks,
    pub seed: u64,
    pub max_disp: f64,
    /// Mask Dice before registration.
    pub pre_dice: f64,
    pub gt_folding: f64,
}

#[derive(Debug, Clone)]
struct Bump {
    center: [f64; 3],
    inv_sigma: [f64; 3],
    amplitude: f64,
}

#[derive(Debug, Clone)]
struct Phantom {
    center: [f64; 3],
    radii: [f64; 3],
    bumps: Vec<Bump>,
}

impl Phantom {
    fn ellipsoid_radius(&self, x: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((x[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn inside(&self, x: [f64; 3]) -> bool {
        self.ellipsoid_radius(x) <= 1.0
    }

    fn intensity(&self, x: [f64; 3]) -> f64 {
        let r = self.ellipsoid_radius(x);
        // Edge of roughly one voxel width along the shortest radius.
        let k = self.radii.iter().copied().fold(f64::INFINITY, f64::min) / 0.8;
        let body = 1.0 / (1.0 + ((r - 1.0) * k).exp());
        let bumps: f64 = self
            .bumps
            .iter()
            .map(|b| {
                let q: f64 = (0..3).map(|a| ((x[a] - b.center[a]) * b.inv_sigma[a]).powi(2)).sum();
                b.amplitude * (-0.5 * q).exp()
            })
            .sum();
        (0.1 + 0.4 * body + bumps).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
struct RbfField {
    centers: Vec<[f64; 3]>,
    sigmas: Vec<f64>,
    amplitudes: Vec<[f64; 3]>,
}

impl RbfField {
    fn eval(&self, x: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for k in 0..self.centers.len() {
            let c = self.centers[k];
            let s = self.sigmas[k];
            let q: f64 = (0..3).map(|a| (x[a] - c[a]).powi(2)).sum();
            let w = (-q / (2.0 * s * s)).exp();
            for a in 0..3 {
                u[a] += self.amplitudes[k][a] * w;
            }
        }
        u
    }

    fn scale(&mut self, f: f64) {
        for a in &mut self.amplitudes {
            a.iter_mut().for_each(|v| *v *= f);
        }
    }

    fn amplitude_ok(&self) -> bool {
        self.amplitudes
            .iter()
            .zip(&self.sigmas)
            .all(|(a, s)| norm(*a) <= AMPLITUDE_BOUND * s * (1.0 + 1e-12))
    }

    /// Solves `x + u(x) = y` by fixed-point iteration; converges because
    /// `u` is a contraction under the amplitude bound.
    fn invert(&self, y: [f64; 3]) -> [f64; 3] {
        let mut x = y;
        for _ in 0..500 {
            let u = self.eval(x);
            let next: [f64; 3] = std::array::from_fn(|a| y[a] - u[a]);
            let delta = norm(std::array::from_fn(|a| next[a] - x[a]));
            x = next;
            if delta < 1e-10 {
                break;
            }
        }
        x
    }
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = norm(v);
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn voxel_position(dims: Dims, p: usize) -> [f64; 3] {
    dims.coords(p).map(|i| i as f64)
}

pub fn gen_synthetic_case(dims: Dims, seed: u64, max_disp: f64) -> Result<SyntheticCase> {
    if dims.0.iter().any(|&s| s < MIN_SIZE) {
        return Err(Error::InvalidArgument(format!(
            "synthetic cases need at least {MIN_SIZE} voxels per axis, got {:?}",
            dims.0
        )));
    }
    if !(max_disp >= 0.0 && max_disp.is_finite()) {
        return Err(Error::InvalidArgument(format!("max_disp must be >= 0, got {max_disp}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = dims.0.map(|s| s as f64);
    let min_size = size.iter().copied().fold(f64::INFINITY, f64::min);

    let phantom = Phantom {
        center: std::array::from_fn(|a| (size[a] - 1.0) / 2.0 + rng.gen_range(-0.03..0.03) * size[a]),
        radii: std::array::from_fn(|a| rng.gen_range(0.2..0.26) * size[a]),
        bumps: (0..rng.gen_range(3..=6))
            .map(|_| Bump {
                center: std::array::from_fn(|a| rng.gen_range(0.25..0.75) * size[a]),
                inv_sigma: std::array::from_fn(|a| 1.0 / (rng.gen_range(0.06..0.14) * size[a])),
                amplitude: rng.gen_range(0.2..0.45),
            })
            .collect(),
    };

    let main_dir = random_unit(&mut rng);
    let mut field = RbfField {
        centers: Vec::with_capacity(RBF_COUNT),
        sigmas: Vec::with_capacity(RBF_COUNT),
        amplitudes: Vec::with_capacity(RBF_COUNT),
    };
    for _ in 0..RBF_COUNT {
        field
            .centers
            .push(std::array::from_fn(|a| phantom.center[a] + rng.gen_range(-0.12..0.12) * size[a]));
        field.sigmas.push(rng.gen_range(0.18..0.26) * min_size);
        let jitter = random_unit(&mut rng);
        let d: [f64; 3] = std::array::from_fn(|a| main_dir[a] + 0.5 * jitter[a]);
        let n = norm(d);
        field
            .amplitudes
            .push(d.map(|v| v / n * max_disp / RBF_COUNT as f64));
    }

    let n = dims.len();
    if max_disp > 0.0 {
        let peak = (0..n)
            .map(|p| norm(field.eval(voxel_position(dims, p))))
            .fold(0.0, f64::max);
        field.scale(max_disp / peak);
        if !field.amplitude_ok() {
            return Err(Error::Infeasible(format!(
                "max_disp {max_disp} needs basis amplitudes above {AMPLITUDE_BOUND}·σ for a {:?} volume",
                dims.0
            )));
        }
    }

    let mut gt = vec![0.0f32; 3 * n];
    let mut fixed = vec![0.0f32; n];
    let mut moving = vec![0.0f32; n];
    let mut fixed_mask = vec![0.0f32; n];
    let mut moving_mask = vec![0.0f32; n];
    for p in 0..n {
        let x = voxel_position(dims, p);
        let u = field.eval(x);
        for a in 0..3 {
            gt[a * n + p] = u[a] as f32;
        }
        fixed[p] = phantom.intensity(x) as f32;
        fixed_mask[p] = phantom.inside(x) as u8 as f32;
        let src = if max_disp > 0.0 { field.invert(x) } else { x };
        moving[p] = phantom.intensity(src) as f32;
        moving_mask[p] = phantom.inside(src) as u8 as f32;
    }

    let spacing = [1.0; 3];
    let fixed = Volume::new(dims, spacing, IntensityUnit::Normalized, fixed)?;
    let moving = Volume::new(dims, spacing, IntensityUnit::Normalized, moving)?;
    let fixed_mask = Volume::new(dims, spacing, IntensityUnit::Label, fixed_mask)?;
    let moving_mask = Volume::new(dims, spacing, IntensityUnit::Label, moving_mask)?;
    let gt_field = VectorField::new(dims, FieldUnit::VoxelDisplacement, gt)?;

    let gt_folding = jacobian_folding(&gt_field)?;
    if gt_folding > 0.0 {
        return Err(Error::Infeasible(format!(
            "ground-truth field folds on {:.3}% of voxels",
            100.0 * gt_folding
        )));
    }
    let pre_dice = dice(&fixed_mask, &moving_mask)?;

    let mut pairs = Vec::with_capacity(LANDMARKS);
    let mut attempts = 0;
    while pairs.len() < LANDMARKS && attempts < 10_000 {
        attempts += 1;
        // Voxel centres, so the sampled ground-truth field maps them exactly.
        let f: [f64; 3] = std::array::from_fn(|a| {
            let s = dims.0[a];
            rng.gen_range(s * 3 / 20..=s * 17 / 20) as f64
        });
        if !phantom.inside(f) {
            continue;
        }
        let u = field.eval(f);
        let m: [f64; 3] = std::array::from_fn(|a| f[a] + u[a]);
        if (0..3).all(|a| m[a] >= 0.0 && m[a] <= size[a] - 1.0) {
            pairs.push((f, m));
        }
    }

    Ok(SyntheticCase {
        fixed,
        moving,
        fixed_mask,
        moving_mask,
        gt_field,
        landmarks: Landmarks { pairs },
        seed,
        max_disp,
        pre_dice,
        gt_folding,
    })
}

/// SHA-256 of a volume's little-endian `f32` payload, hex encoded.
pub fn payload_checksum(v: &Volume) -> String {
    let mut h = Sha256::new();
    for x in v.data() {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub fixed: String,
    pub moving: String,
    pub fixed_mask: String,
    pub moving_mask: String,
    pub gt_field: String,
    pub landmarks: String,
}

impl Default for CaseFiles {
    fn default() -> Self {
        CaseFiles {
            fixed: "fixed.mha".into(),
            moving: "moving.mha".into(),
            fixed_mask: "fixed_mask.mha".into(),
            moving_mask: "moving_mask.mha".into(),
            gt_field: "gt_field.mha".into(),
            landmarks: "landmarks.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseChecksums {
    pub fixed: String,
    pub moving: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub max_disp: f64,
    pub size: [usize; 3],
    pub files: CaseFiles,
    pub checksums: CaseChecksums,
    pub pre_dice: f64,
    pub gt_folding: f64,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl SyntheticCase {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            max_disp: self.max_disp,
            size: self.fixed.dims().0,
            files: CaseFiles::default(),
            checksums: CaseChecksums {
                fixed: payload_checksum(&self.fixed),
                moving: payload_checksum(&self.moving),
            },
            pre_dice: self.pre_dice,
            gt_folding: self.gt_folding,
        }
    }

    /// Writes every volume as MetaImage plus the landmark list and a JSON
    /// manifest into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = self.manifest();
        save_volume(&self.fixed, dir.join(&m.files.fixed))?;
        save_volume(&self.moving, dir.join(&m.files.moving))?;
        save_volume(&self.fixed_mask, dir.join(&m.files.fixed_mask))?;
        save_volume(&self.moving_mask, dir.join(&m.files.moving_mask))?;
        save_field(&self.gt_field, dir.join(&m.files.gt_field))?;
        self.landmarks.save(dir.join(&m.files.landmarks))?;
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{warp_image, Interp};
    use crate::diff::Tensor;
    use crate::losses::photometric_loss;

    #[test]
    fn zero_displacement_gives_identical_images() {
        let c = gen_synthetic_case(Dims::cube(16).unwrap(), 5, 0.0).unwrap();
        assert_eq!(c.fixed, c.moving);
        assert_eq!(c.fixed_mask, c.moving_mask);
        assert!(c.gt_field.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.pre_dice, 1.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let d = Dims::cube(16).unwrap();
        let a = gen_synthetic_case(d, 11, 2.0).unwrap();
        let b = gen_synthetic_case(d, 11, 2.0).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_case(d, 12, 2.0).unwrap();
        assert_ne!(a.fixed, c.fixed);
    }

    #[test]
    fn peak_displacement_equals_request() {
        let d = Dims::cube(24).unwrap();
        let c = gen_synthetic_case(d, 3, 2.5).unwrap();
        let peak = (0..d.len())
            .map(|p| {
                let v = c.gt_field.vector(p);
                v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        assert!((peak - 2.5).abs() < 1e-5, "peak {peak}");
        assert_eq!(c.gt_folding, 0.0);
    }

    #[test]
    fn ground_truth_warp_recovers_fixed() {
        let d = Dims::cube(24).unwrap();
        let c = gen_synthetic_case(d, 8, 3.0).unwrap();
        let w = warp_image(&c.moving, &c.gt_field, Interp::Linear).unwrap();
        let to_t = |v: &Volume| Tensor::<f64>::new(&d.as_vec(), v.data().iter().map(|&x| x as f64).collect()).unwrap();
        let loss = photometric_loss(&to_t(&c.fixed), &to_t(&w)).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn infeasible_displacement_is_rejected() {
        let err = gen_synthetic_case(Dims::cube(16).unwrap(), 1, 40.0).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn small_volume_is_rejected() {
        assert!(gen_synthetic_case(Dims::new(16, 15, 16).unwrap(), 1, 1.0).is_err());
    }

    #[test]
    fn pre_registration_overlap_is_below_target() {
        for seed in 0..5 {
            let c = gen_synthetic_case(Dims::cube(48).unwrap(), seed, 4.0).unwrap();
            assert!(c.pre_dice < 0.9, "seed {seed}: {}", c.pre_dice);
            assert_eq!(c.gt_folding, 0.0);
        }
    }

    #[test]
    fn landmarks_follow_the_field() {
        let c = gen_synthetic_case(Dims::cube(20).unwrap(), 2, 2.0).unwrap();
        assert!(!c.landmarks.pairs.is_empty());
        for (f, m) in &c.landmarks.pairs {
            assert!(c.fixed_mask.data()[c.fixed.dims().index(
                f[0].round() as usize,
                f[1].round() as usize,
                f[2].round() as usize
            )] >= 0.0);
            assert!((0..3).any(|a| (m[a] - f[a]).abs() > 0.0));
        }
    }
}
