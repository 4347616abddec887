//! Procedural lung nodules.
//!
//! A nodule is synthesised on its own 0.1 mm isotropic grid (shape mask plus
//! lumpy internal texture), then placed inside a lung mask and box-averaged
//! onto the phantom grid.

mod embed;
mod placement;
mod shape;
mod size;
mod texture;

use serde::{Deserialize, Serialize};

pub use embed::{embed_lesion, occupancy};
pub use placement::{is_valid_center, place_lesion, PlacementResult};
pub use shape::{generate_shape, LESION_PADDING};
pub use size::{sample_size, GammaParams, MIN_TRUNCATED_MASS};
pub use texture::{generate_clb_texture, ClbParams};

use crate::error::{Error, Result};
use crate::volume::{VolumeKind, VoxelVolume};

/// Lesion grid spacing in mm.
pub const LESION_VOXEL_MM: f64 = 0.1;

/// HU value marking lesion-grid voxels outside the nodule.
pub const TRANSPARENT_HU: f32 = -3024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Margin {
    Smooth,
    Lobulated,
    Spiculated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoduleType {
    Solid,
    PartSolid,
    GroundGlass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub lesion_id: String,
    /// Target equivalent-sphere diameter in mm.
    pub diameter: f64,
    pub shape_seed: u64,
    pub texture_seed: u64,
    /// 0 gives a sphere, 1 the strongest low-order surface perturbation.
    pub shape_irregularity: f64,
    pub nodule_type: NoduleType,
    pub margin: Margin,
}

impl LesionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lesion diameter must be > 0, got {}",
                self.diameter
            )));
        }
        if !(0.0..=1.0).contains(&self.shape_irregularity) {
            return Err(Error::InvalidParameter(format!(
                "shape_irregularity must be in [0, 1], got {}",
                self.shape_irregularity
            )));
        }
        if self.nodule_type != NoduleType::Solid {
            return Err(Error::InvalidParameter(format!(
                "only solid nodules can be synthesised, got {:?}",
                self.nodule_type
            )));
        }
        Ok(())
    }

    /// Validate against the size model's bounds as well.
    pub fn validate_with(&self, gamma: &GammaParams) -> Result<()> {
        self.validate()?;
        if self.diameter < gamma.min_size || self.diameter > gamma.max_size {
            return Err(Error::InvalidParameter(format!(
                "lesion diameter {} outside [{}, {}]",
                self.diameter, gamma.min_size, gamma.max_size
            )));
        }
        Ok(())
    }
}

/// A voxelised nodule on a 0.1 mm grid centred at its own local origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionVolume {
    pub hu: VoxelVolume,
    pub mask: VoxelVolume,
    /// Equivalent-sphere diameter of the mask in mm.
    pub diameter_measured: f64,
    /// Largest distance from the grid centre to a mask voxel centre, in mm.
    pub bounding_radius: f64,
}

impl LesionVolume {
    pub fn voxel_count(&self) -> usize {
        self.mask.count_nonzero()
    }
}

/// Equivalent-sphere diameter of a mask with `n` voxels of `voxel_mm3`.
pub fn equivalent_diameter(n: usize, voxel_mm3: f64) -> f64 {
    (6.0 * n as f64 * voxel_mm3 / std::f64::consts::PI).cbrt()
}

/// Shape mask plus texture.
pub fn synthesize_lesion(spec: &LesionSpec, clb: &ClbParams) -> Result<LesionVolume> {
    spec.validate()?;
    clb.validate()?;
    let mask = generate_shape(spec)?;
    let hu = generate_clb_texture(spec, clb, &mask)?;
    let n = mask.count_nonzero();
    let c = mask.dims().map(|d| (d / 2) as f64);
    let bounding_radius = mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(idx, _)| {
            let ijk = mask.coords(idx);
            (0..3)
                .map(|a| (ijk[a] as f64 - c[a]).powi(2))
                .sum::<f64>()
                .sqrt()
                * LESION_VOXEL_MM
        })
        .fold(0.0, f64::max);
    debug_assert_eq!(hu.kind(), VolumeKind::Hu);
    Ok(LesionVolume {
        hu,
        mask,
        diameter_measured: equivalent_diameter(n, LESION_VOXEL_MM.powi(3)),
        bounding_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(d: f64) -> LesionSpec {
        LesionSpec {
            lesion_id: "n0".into(),
            diameter: d,
            shape_seed: 11,
            texture_seed: 12,
            shape_irregularity: 0.0,
            nodule_type: NoduleType::Solid,
            margin: Margin::Smooth,
        }
    }

    #[test]
    fn small_sphere_voxel_count() {
        let l = synthesize_lesion(&spec(4.0), &ClbParams::default()).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 20f64.powi(3);
        let n = l.voxel_count() as f64;
        assert!((n - expected).abs() / expected < 0.10, "{n} vs {expected}");
        assert!((l.bounding_radius - 2.0).abs() < 0.1);
    }

    #[test]
    fn deterministic_bits() {
        let mut s = spec(6.0);
        s.shape_irregularity = 0.4;
        s.margin = Margin::Spiculated;
        let a = synthesize_lesion(&s, &ClbParams::default()).unwrap();
        let b = synthesize_lesion(&s, &ClbParams::default()).unwrap();
        let bits = |v: &VoxelVolume| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.hu), bits(&b.hu));
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn transparent_outside_mask() {
        let l = synthesize_lesion(&spec(5.0), &ClbParams::default()).unwrap();
        for (h, m) in l.hu.values().iter().zip(l.mask.values()) {
            assert_eq!(*m == 0.0, *h == TRANSPARENT_HU);
        }
    }

    #[test]
    fn rejects_non_solid_and_bad_spec() {
        let mut s = spec(5.0);
        s.nodule_type = NoduleType::GroundGlass;
        assert!(synthesize_lesion(&s, &ClbParams::default()).is_err());
        let mut s = spec(5.0);
        s.shape_irregularity = 1.5;
        assert!(s.validate().is_err());
        assert!(spec(35.0).validate_with(&GammaParams::default()).is_err());
        assert!(spec(10.0).validate_with(&GammaParams::default()).is_ok());
    }
}
