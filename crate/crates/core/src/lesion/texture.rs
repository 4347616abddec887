//! Clustered lumpy background texture.
//!
//! Two-level point process: cluster centres are scattered uniformly over the
//! nodule mask, each cluster spawns a Poisson number of lumps displaced by an
//! isotropic normal offset, and every lump adds a Gaussian blob. For a
//! stationary process the expected value is
//! `background + λ_c · N̄ · A · (2π)^{3/2} · r³` with `λ_c` the cluster density
//! per mm³.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LesionSpec, LESION_VOXEL_MM, TRANSPARENT_HU};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{VolumeKind, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClbParams {
    pub mean_clusters_per_cm3: f64,
    pub mean_lumps_per_cluster: f64,
    /// Standard deviation of lump offsets around their cluster centre, mm.
    pub cluster_sigma: f64,
    /// Gaussian lump standard deviation, mm.
    pub lump_radius: f64,
    /// Peak HU added by one lump.
    pub lump_amplitude: f64,
    pub background_hu: f64,
}

impl Default for ClbParams {
    fn default() -> Self {
        ClbParams {
            mean_clusters_per_cm3: 50.0,
            mean_lumps_per_cluster: 8.0,
            cluster_sigma: 0.6,
            lump_radius: 0.4,
            lump_amplitude: 15.0,
            background_hu: 30.0,
        }
    }
}

/// Lumps are evaluated out to this many standard deviations.
const LUMP_SUPPORT: f64 = 4.0;

impl ClbParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mean_clusters_per_cm3 >= 0.0
            && self.mean_lumps_per_cluster >= 0.0
            && self.cluster_sigma > 0.0
            && self.lump_radius > 0.0
            && self.lump_amplitude.is_finite()
            && self.background_hu.is_finite();
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid CLB parameters {self:?}")));
        }
        Ok(())
    }

    /// Expected texture value far from the mask boundary.
    pub fn expected_mean(&self) -> f64 {
        let per_mm3 = self.mean_clusters_per_cm3 / 1000.0;
        self.background_hu
            + per_mm3
                * self.mean_lumps_per_cluster
                * self.lump_amplitude
                * (2.0 * std::f64::consts::PI).powf(1.5)
                * self.lump_radius.powi(3)
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    }
}

/// Texture in HU on the mask's grid; voxels outside the mask get
/// [`TRANSPARENT_HU`]. Deterministic in `spec.texture_seed`.
pub fn generate_clb_texture(spec: &LesionSpec, p: &ClbParams, mask: &VoxelVolume) -> Result<VoxelVolume> {
    p.validate()?;
    if mask.spacing().iter().any(|s| (s - LESION_VOXEL_MM).abs() > 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "lesion mask must be on a {LESION_VOXEL_MM} mm grid, got {:?}",
            mask.spacing()
        )));
    }
    let inside: Vec<usize> = mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect();
    let voxel_mm3 = mask.voxel_volume();
    let volume_cm3 = inside.len() as f64 * voxel_mm3 / 1000.0;

    let mut rng = seed::stream(spec.texture_seed, &[seed::tag("clb")]);
    let mut lumps: Vec<[f64; 3]> = Vec::new();
    if !inside.is_empty() && p.lump_amplitude != 0.0 {
        let offset = Normal::new(0.0, p.cluster_sigma).expect("validated");
        let n_clusters = poisson(p.mean_clusters_per_cm3 * volume_cm3, &mut rng);
        for _ in 0..n_clusters {
            let idx = inside[rng.random_range(0..inside.len())];
            let w = mask.world(mask.coords(idx));
            let c: [f64; 3] = std::array::from_fn(|a| {
                w[a] + (rng.random::<f64>() - 0.5) * LESION_VOXEL_MM
            });
            let n_lumps = poisson(p.mean_lumps_per_cluster, &mut rng);
            for _ in 0..n_lumps {
                lumps.push(std::array::from_fn(|a| c[a] + offset.sample(&mut rng)));
            }
        }
    }

    let [nx, ny, _] = mask.dims();
    let origin = mask.origin();
    let h = LESION_VOXEL_MM;
    let support = LUMP_SUPPORT * p.lump_radius;
    let inv_two_r2 = 1.0 / (2.0 * p.lump_radius * p.lump_radius);
    let amp = p.lump_amplitude;
    let bg = p.background_hu as f32;

    let mask_values = mask.values();
    let slab = nx * ny;
    let mut values = vec![0f32; mask.len()];
    // Each z-plane accumulates lumps in list order, so the result does not
    // depend on how planes are distributed over threads.
    values
        .par_chunks_mut(slab)
        .enumerate()
        .for_each(|(k, plane)| {
            let z = origin[2] + k as f64 * h;
            let mut acc = vec![0f64; slab];
            for c in &lumps {
                let dz = z - c[2];
                if dz.abs() > support {
                    continue;
                }
                let range = |a: usize, n: usize| {
                    let lo = ((c[a] - support - origin[a]) / h).ceil().max(0.0) as usize;
                    let hi = (((c[a] + support - origin[a]) / h).floor() as isize).min(n as isize - 1);
                    (lo, hi)
                };
                let (i0, i1) = range(0, nx);
                let (j0, j1) = range(1, ny);
                if i1 < i0 as isize || j1 < j0 as isize {
                    continue;
                }
                for j in j0..=j1 as usize {
                    let dy = origin[1] + j as f64 * h - c[1];
                    let row = j * nx;
                    for i in i0..=i1 as usize {
                        let dx = origin[0] + i as f64 * h - c[0];
                        acc[row + i] += amp * (-(dx * dx + dy * dy + dz * dz) * inv_two_r2).exp();
                    }
                }
            }
            let mplane = &mask_values[k * slab..(k + 1) * slab];
            for ((out, a), m) in plane.iter_mut().zip(&acc).zip(mplane) {
                *out = if *m != 0.0 { bg + *a as f32 } else { TRANSPARENT_HU };
            }
        });
    mask.with_values(VolumeKind::Hu, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesion::{generate_shape, Margin, NoduleType};

    fn spec(d: f64, texture_seed: u64) -> LesionSpec {
        LesionSpec {
            lesion_id: "t".into(),
            diameter: d,
            shape_seed: 3,
            texture_seed,
            shape_irregularity: 0.0,
            nodule_type: NoduleType::Solid,
            margin: Margin::Smooth,
        }
    }

    fn inside_mean(tex: &VoxelVolume, mask: &VoxelVolume) -> f64 {
        let (s, n) = tex
            .values()
            .iter()
            .zip(mask.values())
            .filter(|(_, m)| **m != 0.0)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + *v as f64, n + 1));
        s / n as f64
    }

    #[test]
    fn zero_clusters_is_constant_background() {
        let s = spec(4.0, 1);
        let mask = generate_shape(&s).unwrap();
        let p = ClbParams { mean_clusters_per_cm3: 0.0, background_hu: 42.0, ..Default::default() };
        let t = generate_clb_texture(&s, &p, &mask).unwrap();
        for (v, m) in t.values().iter().zip(mask.values()) {
            assert_eq!(*v, if *m != 0.0 { 42.0 } else { TRANSPARENT_HU });
        }
    }

    #[test]
    fn zero_amplitude_is_constant_background() {
        let s = spec(4.0, 1);
        let mask = generate_shape(&s).unwrap();
        let p = ClbParams { lump_amplitude: 0.0, background_hu: -5.0, ..Default::default() };
        let t = generate_clb_texture(&s, &p, &mask).unwrap();
        assert!(t
            .values()
            .iter()
            .zip(mask.values())
            .all(|(v, m)| *m == 0.0 || *v == -5.0));
    }

    #[test]
    fn texture_is_deterministic_and_seed_dependent() {
        let s = spec(5.0, 7);
        let mask = generate_shape(&s).unwrap();
        let p = ClbParams::default();
        let a = generate_clb_texture(&s, &p, &mask).unwrap();
        let b = generate_clb_texture(&s, &p, &mask).unwrap();
        assert_eq!(a, b);
        let c = generate_clb_texture(&spec(5.0, 8), &p, &mask).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mean_matches_campbell_expectation() {
        // Large mask relative to the lump and cluster scales keeps boundary
        // losses small; averaging over seeds tames the cluster-count variance.
        let p = ClbParams {
            mean_clusters_per_cm3: 200.0,
            mean_lumps_per_cluster: 5.0,
            cluster_sigma: 0.3,
            lump_radius: 0.25,
            lump_amplitude: 20.0,
            background_hu: 10.0,
        };
        let s = spec(16.0, 0);
        let mask = generate_shape(&s).unwrap();
        let mean_added: f64 = (0..4)
            .map(|seed| {
                let t = generate_clb_texture(&spec(16.0, seed), &p, &mask).unwrap();
                inside_mean(&t, &mask) - p.background_hu
            })
            .sum::<f64>()
            / 4.0;
        // Campbell's theorem, evaluated independently of expected_mean().
        let lambda = 200.0 / 1000.0 * 5.0;
        let blob_integral = 20.0 * (2.0 * std::f64::consts::PI).powf(1.5) * 0.25f64.powi(3);
        let expected = lambda * blob_integral;
        assert!((p.expected_mean() - p.background_hu - expected).abs() < 1e-12);
        assert!(
            (mean_added - expected).abs() / expected < 0.10,
            "{mean_added} vs {expected}"
        );
    }

    #[test]
    fn rejects_wrong_grid() {
        let mask = VoxelVolume::filled([3, 3, 3], [0.2; 3], [0.0; 3], VolumeKind::Mask, 1.0).unwrap();
        assert!(generate_clb_texture(&spec(4.0, 0), &ClbParams::default(), &mask).is_err());
    }
}
