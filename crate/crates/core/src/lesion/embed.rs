//! Box-average a 0.1 mm lesion onto a coarser phantom grid.
//!
//! Every fine voxel centre is assigned to the coarse cell containing it. The
//! occupancy of a coarse cell is the number of fine mask voxels it receives
//! divided by the number of fine lattice points the cell can hold, so it is
//! exactly 1 for cells fully covered by the nodule. Cells are then blended as
//! `old + occupancy · (lesion_mean − old)`, and cells with occupancy above
//! one half form the ground-truth mask.

use super::{LesionVolume, PlacementResult, LESION_VOXEL_MM};
use crate::error::{Error, Result};
use crate::phantom::MaterialTable;
use crate::volume::{VolumeKind, VoxelVolume};

/// Coarse cell index of a fine lattice point along one axis.
#[inline]
fn cell_of(center: f64, a: isize, origin: f64, spacing: f64) -> isize {
    ((center + a as f64 * LESION_VOXEL_MM - origin) / spacing + 0.5).floor() as isize
}

struct AxisMap {
    /// Coarse cell for each fine index `0..n` of the lesion grid.
    cell: Vec<isize>,
    /// First coarse cell touched.
    lo: isize,
    /// Lattice points per coarse cell in `lo..=hi`.
    capacity: Vec<usize>,
}

fn axis_map(center: f64, half: isize, n: usize, origin: f64, spacing: f64) -> AxisMap {
    let cell: Vec<isize> = (0..n as isize)
        .map(|i| cell_of(center, i - half, origin, spacing))
        .collect();
    let lo = *cell.first().unwrap();
    let hi = *cell.last().unwrap();
    // Walk the fine lattice beyond the lesion grid far enough to fill the
    // boundary cells, counting with the same rounding as the assignment.
    let margin = (spacing / LESION_VOXEL_MM).ceil() as isize + 2;
    let mut capacity = vec![0usize; (hi - lo + 1) as usize];
    for a in (-half - margin)..=(half + margin) {
        let c = cell_of(center, a, origin, spacing);
        if (lo..=hi).contains(&c) {
            capacity[(c - lo) as usize] += 1;
        }
    }
    AxisMap { cell, lo, capacity }
}

/// Embed `lesion` into `phantom` at `placement`. Returns the modified volume
/// and the ground-truth mask (1 inside, 0 outside) on the phantom grid.
pub fn embed_lesion(
    phantom: &VoxelVolume,
    table: &MaterialTable,
    lesion: &LesionVolume,
    placement: &PlacementResult,
) -> Result<(VoxelVolume, VoxelVolume)> {
    let to_phantom: Box<dyn Fn(f64) -> f64> = match phantom.kind() {
        VolumeKind::Hu => Box::new(|hu| hu),
        VolumeKind::Attenuation => {
            let mu_w = table.mu_water();
            Box::new(move |hu| (mu_w * (1.0 + hu / 1000.0)).max(0.0))
        }
        other => {
            return Err(Error::InvalidVolume(format!(
                "lesions embed into HU or attenuation volumes, not {}",
                other.as_str()
            )))
        }
    };
    if phantom.voxel_at(placement.center_mm).is_none() {
        return Err(Error::PlacementOutOfBounds(format!(
            "centre {:?} mm is outside the phantom",
            placement.center_mm
        )));
    }

    let ldims = lesion.mask.dims();
    let half: [isize; 3] = ldims.map(|d| (d / 2) as isize);
    let maps: Vec<AxisMap> = (0..3)
        .map(|a| {
            axis_map(
                placement.center_mm[a],
                half[a],
                ldims[a],
                phantom.origin()[a],
                phantom.spacing()[a],
            )
        })
        .collect();
    let box_dims: [usize; 3] = std::array::from_fn(|a| maps[a].capacity.len());
    let mut count = vec![0u32; box_dims.iter().product()];
    let mut sum = vec![0f64; count.len()];

    let mask = lesion.mask.values();
    let hu = lesion.hu.values();
    for k in 0..ldims[2] {
        let bk = (maps[2].cell[k] - maps[2].lo) as usize;
        for j in 0..ldims[1] {
            let bj = (maps[1].cell[j] - maps[1].lo) as usize;
            let row = ldims[0] * (j + ldims[1] * k);
            for i in 0..ldims[0] {
                if mask[row + i] == 0.0 {
                    continue;
                }
                let bi = (maps[0].cell[i] - maps[0].lo) as usize;
                let b = bi + box_dims[0] * (bj + box_dims[1] * bk);
                count[b] += 1;
                sum[b] += hu[row + i] as f64;
            }
        }
    }

    let dims = phantom.dims();
    let mut values = phantom.values().to_vec();
    let mut gt = vec![0f32; phantom.len()];
    let mut touched = 0usize;
    for bk in 0..box_dims[2] {
        for bj in 0..box_dims[1] {
            for bi in 0..box_dims[0] {
                let b = bi + box_dims[0] * (bj + box_dims[1] * bk);
                if count[b] == 0 {
                    continue;
                }
                let c = [
                    maps[0].lo + bi as isize,
                    maps[1].lo + bj as isize,
                    maps[2].lo + bk as isize,
                ];
                if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as isize) {
                    continue;
                }
                touched += 1;
                let capacity = maps[0].capacity[bi] * maps[1].capacity[bj] * maps[2].capacity[bk];
                let occ = (count[b] as f64 / capacity as f64).min(1.0);
                let lesion_value = to_phantom(sum[b] / count[b] as f64);
                let idx = phantom.index(c[0] as usize, c[1] as usize, c[2] as usize);
                let old = values[idx] as f64;
                values[idx] = if occ >= 1.0 {
                    lesion_value as f32
                } else {
                    (old + occ * (lesion_value - old)) as f32
                };
                if occ > 0.5 {
                    gt[idx] = 1.0;
                }
            }
        }
    }
    if touched == 0 {
        return Err(Error::PlacementOutOfBounds(
            "lesion does not overlap the phantom grid".into(),
        ));
    }
    Ok((
        phantom.with_values(phantom.kind(), values)?,
        phantom.with_values(VolumeKind::Mask, gt)?,
    ))
}

/// Occupancy of every phantom voxel (0..=1), using the same assignment as
/// [`embed_lesion`].
pub fn occupancy(
    phantom: &VoxelVolume,
    lesion: &LesionVolume,
    placement: &PlacementResult,
) -> Result<Vec<f64>> {
    let probe = phantom.with_values(VolumeKind::Hu, vec![0.0; phantom.len()])?;
    let ones = lesion.hu.with_values(
        VolumeKind::Hu,
        lesion.mask.values().iter().map(|m| (*m != 0.0) as u8 as f32).collect(),
    )?;
    let unit = LesionVolume {
        hu: ones,
        ..lesion.clone()
    };
    let (blended, _) = embed_lesion(&probe, &MaterialTable::default(), &unit, placement)?;
    Ok(blended.values().iter().map(|v| *v as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesion::{synthesize_lesion, ClbParams, LesionSpec, Margin, NoduleType};

    fn lesion(d: f64) -> LesionVolume {
        let spec = LesionSpec {
            lesion_id: "e".into(),
            diameter: d,
            shape_seed: 4,
            texture_seed: 5,
            shape_irregularity: 0.0,
            nodule_type: NoduleType::Solid,
            margin: Margin::Smooth,
        };
        synthesize_lesion(&spec, &ClbParams::default()).unwrap()
    }

    fn at(v: &VoxelVolume, ijk: [usize; 3], radius: f64) -> PlacementResult {
        PlacementResult {
            center_voxel: ijk,
            center_mm: v.world(ijk),
            attempts_used: 1,
            radius_mm: radius,
        }
    }

    #[test]
    fn covered_voxels_take_lesion_value() {
        let table = MaterialTable::default();
        let mu_lung = table.mu(crate::phantom::LUNG).unwrap() as f32;
        let ph = VoxelVolume::centered([32, 32, 24], [0.7, 0.7, 1.25], VolumeKind::Attenuation, mu_lung).unwrap();
        let l = lesion(10.0);
        let p = at(&ph, [16, 16, 12], l.bounding_radius);
        let (out, gt) = embed_lesion(&ph, &table, &l, &p).unwrap();
        let occ = occupancy(&ph, &l, &p).unwrap();
        let mut full = 0;
        for idx in 0..ph.len() {
            if occ[idx] >= 1.0 {
                full += 1;
                assert!(out.values()[idx] > mu_lung);
                assert!(out.values()[idx] > 0.9 * table.mu_water() as f32);
            }
            assert_eq!(gt.values()[idx] == 1.0, occ[idx] > 0.5);
        }
        assert!(full > 100);
    }

    #[test]
    fn downsampled_mask_volume_matches_high_res() {
        let l = lesion(10.0);
        let ph = VoxelVolume::centered([40, 40, 24], [0.7, 0.7, 1.25], VolumeKind::Hu, -800.0).unwrap();
        let p = at(&ph, [20, 19, 12], l.bounding_radius);
        let (_, gt) = embed_lesion(&ph, &MaterialTable::default(), &l, &p).unwrap();
        let coarse = gt.count_nonzero() as f64 * ph.voxel_volume();
        let fine = l.voxel_count() as f64 * 1e-3;
        assert!((coarse - fine).abs() / fine < 0.05, "{coarse} vs {fine}");
    }

    #[test]
    fn embedding_conserves_mass() {
        let l = lesion(6.0);
        let ph = VoxelVolume::centered([24, 24, 16], [0.7, 0.7, 1.25], VolumeKind::Hu, -750.0).unwrap();
        let p = at(&ph, [12, 12, 8], l.bounding_radius);
        let (out, _) = embed_lesion(&ph, &MaterialTable::default(), &l, &p).unwrap();
        let delta: f64 = out
            .values()
            .iter()
            .zip(ph.values())
            .map(|(n, o)| (*n - *o) as f64)
            .sum();
        // fine-grid contribution: each fine voxel adds (hu - old) * fine/coarse volume
        let ratio = 1e-3 / ph.voxel_volume();
        let expected: f64 = l
            .hu
            .values()
            .iter()
            .zip(l.mask.values())
            .filter(|(_, m)| **m != 0.0)
            .map(|(h, _)| (*h as f64 + 750.0) * ratio)
            .sum();
        assert!((delta - expected).abs() / expected < 0.01, "{delta} vs {expected}");
    }

    #[test]
    fn outside_volume_is_an_error() {
        let l = lesion(4.0);
        let ph = VoxelVolume::centered([16; 3], [1.0; 3], VolumeKind::Hu, 0.0).unwrap();
        let p = PlacementResult {
            center_voxel: [0, 0, 0],
            center_mm: [100.0, 0.0, 0.0],
            attempts_used: 1,
            radius_mm: 2.0,
        };
        assert!(matches!(
            embed_lesion(&ph, &MaterialTable::default(), &l, &p),
            Err(Error::PlacementOutOfBounds(_))
        ));
    }

    #[test]
    fn label_volumes_are_rejected() {
        let l = lesion(4.0);
        let ph = VoxelVolume::centered([16; 3], [1.0; 3], VolumeKind::MaterialLabel, 1.0).unwrap();
        let p = at(&ph, [8, 8, 8], 2.0);
        assert!(embed_lesion(&ph, &MaterialTable::default(), &l, &p).is_err());
    }
}
