//! Registration quality metrics.

use std::path::Path;

use crate::diff::sample::PointTaps;
use crate::error::{Error, Result};
use crate::volume::{Dims, FieldUnit, VectorField, Volume};

fn binary_count(v: &Volume, name: &str) -> Result<usize> {
    let mut count = 0;
    for &x in v.data() {
        if x == 1.0 {
            count += 1;
        } else if x != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{name} mask is not binary (found value {x})"
            )));
        }
    }
    Ok(count)
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("dice", &a.dims().as_vec(), &b.dims().as_vec()));
    }
    let na = binary_count(a, "first")?;
    let nb = binary_count(b, "second")?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x == 1.0 && y == 1.0)
        .count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean and max Euclidean distance between two voxel-unit fields, over the
/// non-zero voxels of `mask` or the whole volume.
pub fn endpoint_error(pred: &VectorField, gt: &VectorField, mask: Option<&Volume>) -> Result<(f64, f64)> {
    if pred.unit() != FieldUnit::VoxelDisplacement || gt.unit() != FieldUnit::VoxelDisplacement {
        return Err(Error::InvalidArgument(format!(
            "endpoint error needs voxel displacements, got {:?} and {:?}",
            pred.unit(),
            gt.unit()
        )));
    }
    if pred.dims() != gt.dims() {
        return Err(Error::shape("endpoint_error", &gt.dims().as_vec(), &pred.dims().as_vec()));
    }
    if let Some(m) = mask {
        if m.dims() != pred.dims() {
            return Err(Error::shape("endpoint_error mask", &pred.dims().as_vec(), &m.dims().as_vec()));
        }
    }
    let (mut sum, mut max, mut count) = (0.0f64, 0.0f64, 0usize);
    for p in 0..pred.dims().len() {
        if mask.is_some_and(|m| m.data()[p] == 0.0) {
            continue;
        }
        let a = pred.vector(p);
        let b = gt.vector(p);
        let e = (0..3)
            .map(|k| {
                let d = a[k] as f64 - b[k] as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        sum += e;
        max = max.max(e);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("endpoint error mask is empty".into()));
    }
    Ok((sum / count as f64, max))
}

/// Signed Jacobian determinant of `x ↦ x + u(x)` at every interior voxel,
/// from central differences. Voxels on the border are reported as `None`.
pub fn jacobian_determinants(offset: &VectorField) -> Result<Vec<Option<f64>>> {
    let dims = offset.dims();
    if dims.0.iter().any(|&s| s < 3) {
        return Err(Error::InvalidArgument(format!(
            "Jacobian needs at least 3 voxels per axis, got {:?}",
            dims.0
        )));
    }
    let u = offset.to_unit(FieldUnit::VoxelDisplacement);
    let n = dims.len();
    let strides = [1, dims.w(), dims.w() * dims.h()];
    let mut out = vec![None; n];
    for (p, slot) in out.iter_mut().enumerate() {
        let idx = dims.coords(p);
        if (0..3).any(|a| idx[a] == 0 || idx[a] + 1 == dims.0[a]) {
            continue;
        }
        // j[c][a] = d(x_c + u_c)/d x_a
        let mut j = [[0.0f64; 3]; 3];
        for c in 0..3 {
            let ch = u.channel(c);
            for a in 0..3 {
                let d = (ch[p + strides[a]] as f64 - ch[p - strides[a]] as f64) / 2.0;
                j[c][a] = d + if a == c { 1.0 } else { 0.0 };
            }
        }
        let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        *slot = Some(det);
    }
    Ok(out)
}

/// Fraction of interior voxels whose Jacobian determinant is `≤ 0`.
pub fn jacobian_folding(offset: &VectorField) -> Result<f64> {
    let dets = jacobian_determinants(offset)?;
    let interior: Vec<f64> = dets.into_iter().flatten().collect();
    let folded = interior.iter().filter(|&&d| d <= 0.0).count();
    Ok(folded as f64 / interior.len() as f64)
}

/// Corresponding points in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Landmarks {
    pub pairs: Vec<([f64; 3], [f64; 3])>,
}

impl Landmarks {
    /// One `fx fy fz mx my mz` line per pair; blank lines and `#` comments
    /// are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidArgument(format!("landmarks line {}: `{line}`", i + 1)))?;
            if vals.len() != 6 {
                return Err(Error::InvalidArgument(format!(
                    "landmarks line {}: expected 6 numbers, found {}",
                    i + 1,
                    vals.len()
                )));
            }
            pairs.push(([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]]));
        }
        Ok(Landmarks { pairs })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s)
    }

    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(f, m)| format!("{} {} {} {} {} {}\n", f[0], f[1], f[2], m[0], m[1], m[2]))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn in_range(p: &[f64; 3], dims: Dims) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims.0[a] - 1) as f64)
}

/// Mean distance in millimetres between each fixed landmark carried by the
/// (trilinearly interpolated) offset and its moving counterpart.
pub fn tre(landmarks: &Landmarks, offset: &VectorField, spacing: [f64; 3]) -> Result<f64> {
    let dims = offset.dims();
    let u = offset.to_unit(FieldUnit::VoxelDisplacement);
    let channels: [Vec<f64>; 3] = std::array::from_fn(|c| u.channel(c).iter().map(|&v| v as f64).collect());
    if landmarks.pairs.is_empty() {
        return Err(Error::InvalidArgument("no landmarks".into()));
    }
    let mut total = 0.0;
    for (i, (f, m)) in landmarks.pairs.iter().enumerate() {
        if !in_range(f, dims) || !in_range(m, dims) {
            return Err(Error::InvalidArgument(format!(
                "landmark pair {i} ({f:?} -> {m:?}) lies outside {:?}",
                dims.0
            )));
        }
        let taps = PointTaps::from_index(*f, dims);
        let d: f64 = (0..3)
            .map(|a| {
                let warped = f[a] + taps.value(&channels[a], dims);
                let r = (warped - m[a]) * spacing[a];
                r * r
            })
            .sum();
        total += d.sqrt();
    }
    Ok(total / landmarks.pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IntensityUnit;

    fn mask(d: Dims, f: impl Fn(usize) -> bool) -> Volume {
        Volume::new(
            d,
            [1.0; 3],
            IntensityUnit::Label,
            (0..d.len()).map(|i| f(i) as u8 as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dice_cases() {
        let d = Dims::new(20, 10, 1).unwrap();
        let a = mask(d, |i| i < 100);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(d, |i| i >= 100);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // |A| = |B| = 100, overlap 60.
        let c = mask(d, |i| (40..140).contains(&i));
        assert!((dice(&a, &c).unwrap() - 0.6).abs() < 1e-15);
        let e = mask(d, |_| false);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_non_binary() {
        let d = Dims::new(2, 1, 1).unwrap();
        let a = Volume::new(d, [1.0; 3], IntensityUnit::Label, vec![0.0, 2.0]).unwrap();
        assert!(dice(&a, &a).is_err());
    }

    #[test]
    fn endpoint_error_cases() {
        let d = Dims::new(3, 3, 3).unwrap();
        let gt = VectorField::new(d, FieldUnit::VoxelDisplacement, (0..81).map(|i| i as f32 * 0.1).collect()).unwrap();
        assert_eq!(endpoint_error(&gt, &gt, None).unwrap(), (0.0, 0.0));
        let mut shifted = gt.clone();
        shifted.data_mut()[..27].iter_mut().for_each(|v| *v += 1.0);
        let (mean, max) = endpoint_error(&shifted, &gt, None).unwrap();
        assert!((mean - 1.0).abs() < 1e-6 && (max - 1.0).abs() < 1e-6);
        let norm = gt.to_unit(FieldUnit::NormalizedOffset);
        assert!(endpoint_error(&norm, &gt, None).is_err());
    }

    #[test]
    fn folding_cases() {
        let d = Dims::new(5, 4, 3).unwrap();
        let zero = VectorField::zeros(d, FieldUnit::VoxelDisplacement);
        assert_eq!(jacobian_folding(&zero).unwrap(), 0.0);
        let mut shift = zero.clone();
        shift.data_mut().iter_mut().for_each(|v| *v = 2.5);
        assert_eq!(jacobian_folding(&shift).unwrap(), 0.0);
        // u_x = -2x gives det = 1 - 2 = -1 everywhere.
        let mut refl = zero.clone();
        for p in 0..d.len() {
            refl.data_mut()[p] = -2.0 * d.coords(p)[0] as f32;
        }
        assert_eq!(jacobian_folding(&refl).unwrap(), 1.0);
        let thin = VectorField::zeros(Dims::new(5, 2, 3).unwrap(), FieldUnit::VoxelDisplacement);
        assert!(jacobian_folding(&thin).is_err());
    }

    #[test]
    fn tre_cases() {
        let d = Dims::new(6, 6, 6).unwrap();
        let zero = VectorField::zeros(d, FieldUnit::VoxelDisplacement);
        let same = Landmarks {
            pairs: vec![([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), ([2.5, 0.5, 4.0], [2.5, 0.5, 4.0])],
        };
        assert_eq!(tre(&same, &zero, [1.0; 3]).unwrap(), 0.0);

        let mut one_x = zero.clone();
        one_x.data_mut()[..d.len()].fill(1.0);
        let moved = Landmarks {
            pairs: vec![([1.0, 2.0, 3.0], [2.0, 2.0, 3.0])],
        };
        assert_eq!(tre(&moved, &one_x, [2.0, 1.0, 1.0]).unwrap(), 0.0);
        let stay = Landmarks {
            pairs: vec![([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])],
        };
        assert_eq!(tre(&stay, &one_x, [2.0, 1.0, 1.0]).unwrap(), 2.0);

        let outside = Landmarks {
            pairs: vec![([1.0, 2.0, 9.0], [1.0, 2.0, 3.0])],
        };
        assert!(tre(&outside, &zero, [1.0; 3]).is_err());
    }

    #[test]
    fn landmarks_text_round_trip() {
        let l = Landmarks {
            pairs: vec![([1.0, 2.5, 3.0], [4.0, 5.0, 6.25])],
        };
        assert_eq!(Landmarks::parse(&l.to_text()).unwrap(), l);
        assert!(Landmarks::parse("1 2 3 4 5").is_err());
        assert_eq!(Landmarks::parse("# header\n\n").unwrap().pairs.len(), 0);
    }
}
