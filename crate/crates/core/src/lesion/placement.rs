use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LesionVolume;
use crate::error::{Error, Result};
use crate::volume::VoxelVolume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub center_voxel: [usize; 3],
    pub center_mm: [f64; 3],
    pub attempts_used: usize,
    /// Radius of the lesion's bounding sphere, mm.
    pub radius_mm: f64,
}

/// Voxel offsets whose centres lie within `radius` mm of the origin voxel.
fn ball_offsets(spacing: [f64; 3], radius: f64) -> Vec<[isize; 3]> {
    let reach: [isize; 3] = std::array::from_fn(|a| (radius / spacing[a]).floor() as isize);
    let mut out = Vec::new();
    for dk in -reach[2]..=reach[2] {
        for dj in -reach[1]..=reach[1] {
            for di in -reach[0]..=reach[0] {
                let d2 = (di as f64 * spacing[0]).powi(2)
                    + (dj as f64 * spacing[1]).powi(2)
                    + (dk as f64 * spacing[2]).powi(2);
                if d2 <= radius * radius {
                    out.push([di, dj, dk]);
                }
            }
        }
    }
    out
}

fn ball_inside(lung: &VoxelVolume, center: [usize; 3], offsets: &[[isize; 3]]) -> bool {
    let dims = lung.dims();
    offsets.iter().all(|o| {
        let p: [isize; 3] = std::array::from_fn(|a| center[a] as isize + o[a]);
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a])
            && lung.get(p[0] as usize, p[1] as usize, p[2] as usize) != 0.0
    })
}

fn clear_of(center_mm: [f64; 3], radius: f64, existing: &[PlacementResult]) -> bool {
    existing.iter().all(|e| {
        let d2: f64 = (0..3).map(|a| (center_mm[a] - e.center_mm[a]).powi(2)).sum();
        d2.sqrt() > radius + e.radius_mm
    })
}

/// Acceptance rule used by [`place_lesion`]: the ball of `ball_radius` mm
/// around `center` lies in the lung (voxels outside the grid count as
/// outside), and the sphere of `lesion_radius` does not touch any existing
/// lesion's bounding sphere.
pub fn is_valid_center(
    lung: &VoxelVolume,
    center: [usize; 3],
    ball_radius: f64,
    lesion_radius: f64,
    existing: &[PlacementResult],
) -> bool {
    let offsets = ball_offsets(lung.spacing(), ball_radius);
    ball_inside(lung, center, &offsets) && clear_of(lung.world(center), lesion_radius, existing)
}

/// Rejection-sample a lesion centre uniformly over lung voxels.
///
/// A candidate is accepted when the ball of radius
/// `lesion.bounding_radius + wall_clearance` stays inside the lung mask and the
/// lesion's bounding sphere is disjoint from every sphere in `existing`.
pub fn place_lesion<R: Rng + ?Sized>(
    lung: &VoxelVolume,
    lesion: &LesionVolume,
    existing: &[PlacementResult],
    rng: &mut R,
    wall_clearance: f64,
    max_attempts: usize,
) -> Result<PlacementResult> {
    if wall_clearance < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "wall clearance must be >= 0, got {wall_clearance}"
        )));
    }
    let candidates: Vec<usize> = lung
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("lung mask is empty".into()));
    }
    let radius = lesion.bounding_radius;
    let offsets = ball_offsets(lung.spacing(), radius + wall_clearance);
    for attempt in 1..=max_attempts {
        let center = lung.coords(candidates[rng.random_range(0..candidates.len())]);
        let center_mm = lung.world(center);
        if ball_inside(lung, center, &offsets) && clear_of(center_mm, radius, existing) {
            return Ok(PlacementResult {
                center_voxel: center,
                center_mm,
                attempts_used: attempt,
                radius_mm: radius,
            });
        }
    }
    Err(Error::NoValidPlacement {
        attempts: max_attempts,
    })
}
