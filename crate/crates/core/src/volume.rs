//! Volumes, coordinate grids and vector fields.
//!
//! Every dense spatial array in this crate is stored x-fastest: the voxel
//! `(x, y, z)` of a `(W, H, D)` block lives at `x + W * (y + H * z)`.
//! Multi-channel arrays put the channel axis outermost, so channel `c` of a
//! `(3, W, H, D)` field is the contiguous block `c * W*H*D ..`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Spatial extent `(W, H, D)` of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(w: usize, h: usize, d: usize) -> Result<Self> {
        if w == 0 || h == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dimensions must be positive, got ({w}, {h}, {d})"
            )));
        }
        Ok(Dims([w, h, d]))
    }

    pub fn cube(s: usize) -> Result<Self> {
        Self::new(s, s, s)
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[0];
        let r = i / self.0[0];
        [x, r % self.0[1], r / self.0[1]]
    }

    /// Per-axis factor `(S - 1) / 2` converting normalized increments into
    /// voxel increments.
    pub fn half_extent(&self) -> [f64; 3] {
        self.0.map(|s| (s as f64 - 1.0) / 2.0)
    }

    pub fn as_vec(&self) -> Vec<usize> {
        self.0.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensityUnit {
    Hu,
    Normalized,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: Dims,
    spacing: [f64; 3],
    unit: IntensityUnit,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f64; 3], unit: IntensityUnit, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape("Volume::new", &[dims.len()], &[data.len()]));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        if unit == IntensityUnit::Normalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "normalized volume has values outside [0, 1]".into(),
            ));
        }
        Ok(Volume {
            data,
            dims,
            spacing,
            unit,
        })
    }

    pub fn zeros(dims: Dims, unit: IntensityUnit) -> Self {
        Volume {
            data: vec![0.0; dims.len()],
            dims,
            spacing: [1.0; 3],
            unit,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Maps `x` to `clamp((x - lo) / (hi - lo), 0, 1)`.
pub fn normalize_intensity(v: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "degenerate intensity window ({lo}, {hi})"
        )));
    }
    let scale = 1.0 / (hi - lo);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 - lo) * scale).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Volume {
        data,
        dims: v.dims,
        spacing: v.spacing,
        unit: IntensityUnit::Normalized,
    })
}

/// Normalized voxel-center coordinate on an axis of `size` voxels.
#[inline]
pub fn axis_coord(i: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (size - 1) as f64
    }
}

/// The `(3, W, H, D)` mesh of normalized voxel-center coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    coords: Vec<T>,
    dims: Dims,
}

impl<T: Real> Grid<T> {
    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.coords[c * n..(c + 1) * n]
    }

    /// Point-major `[N, 3]` copy, the layout the coordinate MLP consumes.
    pub fn to_points(&self) -> Vec<T> {
        let n = self.dims.len();
        let mut out = vec![T::zero(); 3 * n];
        for (p, row) in out.chunks_exact_mut(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.coords[c * n + p];
            }
        }
        out
    }
}

pub fn make_grid<T: Real>(dims: Dims) -> Grid<T> {
    let n = dims.len();
    let mut coords = vec![T::zero(); 3 * n];
    let axes: [Vec<T>; 3] =
        std::array::from_fn(|a| (0..dims.0[a]).map(|i| T::lit(axis_coord(i, dims.0[a]))).collect());
    for z in 0..dims.d() {
        for y in 0..dims.h() {
            for x in 0..dims.w() {
                let p = dims.index(x, y, z);
                coords[p] = axes[0][x];
                coords[n + p] = axes[1][y];
                coords[2 * n + p] = axes[2][z];
            }
        }
    }
    Grid { coords, dims }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldUnit {
    /// Increments in the `[-1, 1]` coordinate system.
    NormalizedOffset,
    /// Increments in voxel index units.
    VoxelDisplacement,
}

impl FieldUnit {
    pub fn tag(&self) -> &'static str {
        match self {
            FieldUnit::NormalizedOffset => "normalized",
            FieldUnit::VoxelDisplacement => "voxel",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "normalized" => Some(FieldUnit::NormalizedOffset),
            "voxel" => Some(FieldUnit::VoxelDisplacement),
            _ => None,
        }
    }
}

/// A `(3, W, H, D)` field of 3-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    data: Vec<f32>,
    dims: Dims,
    unit: FieldUnit,
}

impl VectorField {
    pub fn new(dims: Dims, unit: FieldUnit, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * dims.len() {
            return Err(Error::shape("VectorField::new", &[3 * dims.len()], &[data.len()]));
        }
        Ok(VectorField { data, dims, unit })
    }

    pub fn zeros(dims: Dims, unit: FieldUnit) -> Self {
        VectorField {
            data: vec![0.0; 3 * dims.len()],
            dims,
            unit,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn unit(&self) -> FieldUnit {
        self.unit
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn vector(&self, p: usize) -> [f32; 3] {
        let n = self.dims.len();
        [self.data[p], self.data[n + p], self.data[2 * n + p]]
    }

    /// Re-expresses the field in `unit`, scaling each axis by `(S-1)/2` or its
    /// inverse. Axes of size 1 have no extent; their components become 0.
    pub fn to_unit(&self, unit: FieldUnit) -> VectorField {
        if unit == self.unit {
            return self.clone();
        }
        let n = self.dims.len();
        let half = self.dims.half_extent();
        let mut data = self.data.clone();
        for (c, chunk) in data.chunks_exact_mut(n).enumerate() {
            let f = match unit {
                FieldUnit::VoxelDisplacement => half[c],
                FieldUnit::NormalizedOffset if half[c] > 0.0 => 1.0 / half[c],
                FieldUnit::NormalizedOffset => 0.0,
            };
            chunk.iter_mut().for_each(|v| *v = (*v as f64 * f) as f32);
        }
        VectorField {
            data,
            dims: self.dims,
            unit,
        }
    }
}
