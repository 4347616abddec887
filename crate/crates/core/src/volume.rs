//! Dense 3D scalar grids with physical spacing and origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the values of a [`VoxelVolume`] mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    /// Integer material labels, resolved through a [`MaterialTable`](crate::phantom::MaterialTable).
    MaterialLabel,
    /// Linear attenuation coefficient in 1/mm.
    Attenuation,
    /// Hounsfield units.
    Hu,
    /// Binary or instance mask: 0 is background, positive integers are foreground.
    Mask,
    /// Projection data stored in the volume container (cols × views × rows).
    Sinogram,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::MaterialLabel => "material_label",
            VolumeKind::Attenuation => "attenuation",
            VolumeKind::Hu => "hu",
            VolumeKind::Mask => "mask",
            VolumeKind::Sinogram => "sinogram",
        }
    }

    fn integral(self) -> bool {
        matches!(self, VolumeKind::MaterialLabel | VolumeKind::Mask)
    }
}

/// A 3D grid stored x-fastest. Voxel `(i, j, k)` has its centre at
/// `origin + (i, j, k) * spacing` in world millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: VolumeKind,
    values: Vec<f32>,
}

impl VoxelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
        values: Vec<f32>,
    ) -> Result<Self> {
        let v = VoxelVolume {
            dims,
            spacing,
            origin,
            kind,
            values,
        };
        v.validate()?;
        Ok(v)
    }

    /// Constant-valued volume.
    pub fn filled(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
        value: f32,
    ) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, origin, kind, vec![value; n])
    }

    /// Volume whose centre sits at world `(0, 0, 0)`.
    pub fn centered(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        value: f32,
    ) -> Result<Self> {
        let origin = centered_origin(dims, spacing);
        Self::filled(dims, spacing, origin, kind, value)
    }

    /// Same grid, new values and kind.
    pub fn with_values(&self, kind: VolumeKind, values: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.origin, kind, values)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be > 0, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume("origin must be finite".into()));
        }
        let n: usize = self.dims.iter().product();
        if self.values.len() != n {
            return Err(Error::InvalidVolume(format!(
                "values length {} != {}",
                self.values.len(),
                n
            )));
        }
        match self.kind {
            VolumeKind::Attenuation => {
                if let Some(v) = self.values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                    return Err(Error::InvalidVolume(format!(
                        "attenuation must be finite and >= 0, found {v}"
                    )));
                }
            }
            k if k.integral() => {
                if let Some(v) = self.values.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
                    return Err(Error::InvalidVolume(format!(
                        "{} volume holds non-integer value {v}",
                        k.as_str()
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// Inverse of [`index`](Self::index).
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// World position of a voxel centre.
    pub fn world(&self, ijk: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + ijk[a] as f64 * self.spacing[a])
    }

    /// Continuous voxel coordinate of a world point.
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// Voxel whose cell contains `p`, if inside the grid.
    pub fn voxel_at(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let c = self.continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if r < 0.0 || r >= self.dims[a] as f64 {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// Physical extent of the grid (cell edges to cell edges).
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// World position of the grid centre.
    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + 0.5 * (self.dims[a] as f64 - 1.0) * self.spacing[a])
    }

    /// True when `other` has the same dims and, to within 1e-6 mm, the same
    /// spacing and origin.
    pub fn same_grid(&self, other: &VoxelVolume) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-6
                    && (self.origin[a] - other.origin[a]).abs() < 1e-6
            })
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Contiguous x-y plane `k`.
    pub fn slice_z(&self, k: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.values[k * n..(k + 1) * n]
    }

    pub fn map(&self, kind: VolumeKind, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_values(kind, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Origin that centres a grid of `dims` × `spacing` on world zero.
pub fn centered_origin(dims: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a])
}
