//! Star-shaped nodule masks.
//!
//! The surface is `r(u) = s R h(u)` for unit direction `u`, where
//!
//! ```text
//! h(u) = 1 + amp Σ c_k P_lk(u · n_k) + max_j lobe_j(u) + max_j spike_j(u)
//! ```
//!
//! `P_l` are Legendre polynomials of degree 2..4 about random axes (rotated
//! zonal spherical harmonics), `amp` scales with the irregularity, lobes are
//! broad bumps for lobulated margins and spikes are narrow cones for
//! spiculated margins. `s` rescales the field so that the enclosed volume
//! equals the sphere of the requested diameter.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;

use super::{LesionSpec, Margin, LESION_VOXEL_MM};
use crate::error::Result;
use crate::phantom::random_unit;
use crate::seed;
use crate::volume::{VolumeKind, VoxelVolume};

/// Transparent voxels kept between the mask and the grid boundary.
pub const LESION_PADDING: usize = 2;

/// Peak relative radial displacement at irregularity 1.
const MAX_PERTURBATION: f64 = 0.35;
const HARMONIC_DEGREES: [u32; 3] = [2, 3, 4];
const AXES_PER_DEGREE: usize = 2;
const LOBE_HEIGHT: f64 = 0.25;
const LOBE_HALF_ANGLE: f64 = 0.7;
const LOBES: (usize, usize) = (3, 6);
const SPIKES: (usize, usize) = (8, 15);
const SPIKE_LENGTH: (f64, f64) = (0.35, 0.7);
const SPIKE_HALF_ANGLE: (f64, f64) = (0.12, 0.2);
/// Directions used to integrate the enclosed volume.
const QUADRATURE_DIRECTIONS: usize = 16384;

fn legendre(l: u32, x: f64) -> f64 {
    match l {
        2 => 0.5 * (3.0 * x * x - 1.0),
        3 => 0.5 * (5.0 * x * x * x - 3.0 * x),
        4 => (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0,
        _ => unreachable!("only degrees 2..4 are used"),
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct RadialField {
    amp: f64,
    harmonics: Vec<([f64; 3], u32, f64)>,
    lobes: Vec<[f64; 3]>,
    /// (axis, relative length, cos of half angle, half angle)
    spikes: Vec<([f64; 3], f64, f64, f64)>,
}

impl RadialField {
    fn new(spec: &LesionSpec) -> Self {
        let mut rng = seed::stream(spec.shape_seed, &[seed::tag("shape")]);
        let mut harmonics = Vec::new();
        for &l in &HARMONIC_DEGREES {
            for _ in 0..AXES_PER_DEGREE {
                harmonics.push((random_unit(&mut rng), l, rng.random_range(-1.0f64..1.0)));
            }
        }
        let norm: f64 = harmonics.iter().map(|h| h.2.abs()).sum();
        for h in &mut harmonics {
            h.2 /= norm;
        }
        let lobes = match spec.margin {
            Margin::Lobulated => {
                let n = rng.random_range(LOBES.0..=LOBES.1);
                (0..n).map(|_| random_unit(&mut rng)).collect()
            }
            _ => Vec::new(),
        };
        let spikes = match spec.margin {
            Margin::Spiculated => {
                let n = rng.random_range(SPIKES.0..=SPIKES.1);
                (0..n)
                    .map(|_| {
                        let axis = random_unit(&mut rng);
                        let len = rng.random_range(SPIKE_LENGTH.0..SPIKE_LENGTH.1);
                        let w = rng.random_range(SPIKE_HALF_ANGLE.0..SPIKE_HALF_ANGLE.1);
                        (axis, len, w.cos(), w)
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        RadialField {
            amp: MAX_PERTURBATION * spec.shape_irregularity,
            harmonics,
            lobes,
            spikes,
        }
    }

    /// Relative radius in direction `u` (unit vector).
    fn h(&self, u: [f64; 3]) -> f64 {
        let mut h = 1.0;
        if self.amp > 0.0 {
            h += self.amp
                * self
                    .harmonics
                    .iter()
                    .map(|&(n, l, c)| c * legendre(l, dot(u, n)))
                    .sum::<f64>();
        }
        let cos_lobe = LOBE_HALF_ANGLE.cos();
        let lobe = self
            .lobes
            .iter()
            .map(|&n| ((dot(u, n) - cos_lobe) / (1.0 - cos_lobe)).max(0.0))
            .fold(0.0, f64::max);
        let spike = self
            .spikes
            .iter()
            .filter_map(|&(n, len, cos_w, w)| {
                let c = dot(u, n);
                (c > cos_w).then(|| len * (1.0 - c.min(1.0).acos() / w))
            })
            .fold(0.0, f64::max);
        h + LOBE_HEIGHT * lobe + spike
    }

    fn lower_bound(&self) -> f64 {
        1.0 - self.amp
    }

    fn upper_bound(&self) -> f64 {
        let lobe = if self.lobes.is_empty() { 0.0 } else { LOBE_HEIGHT };
        let spike = self.spikes.iter().map(|s| s.1).fold(0.0, f64::max);
        1.0 + self.amp + lobe + spike
    }
}

fn fibonacci_sphere(n: usize) -> impl Iterator<Item = [f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n).map(move |i| {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let t = golden * i as f64;
        [r * t.cos(), r * t.sin(), z]
    })
}

/// Binary nodule mask on a 0.1 mm grid, centred, with a transparent border of
/// [`LESION_PADDING`] voxels. Deterministic in `spec.shape_seed`.
pub fn generate_shape(spec: &LesionSpec) -> Result<VoxelVolume> {
    spec.validate()?;
    let field = RadialField::new(spec);
    let mean_cube = fibonacci_sphere(QUADRATURE_DIRECTIONS)
        .map(|u| field.h(u).powi(3))
        .sum::<f64>()
        / QUADRATURE_DIRECTIONS as f64;
    let radius = 0.5 * spec.diameter / LESION_VOXEL_MM;
    let scale = radius * mean_cube.cbrt().recip();

    let sampled_max = fibonacci_sphere(QUADRATURE_DIRECTIONS)
        .chain(field.spikes.iter().map(|s| s.0))
        .chain(field.lobes.iter().copied())
        .map(|u| field.h(u))
        .fold(0.0, f64::max);
    let r_in = scale * field.lower_bound();
    let r_out = scale * field.upper_bound();

    let mut half = (scale * sampled_max * 1.02).ceil() as usize + LESION_PADDING + 1;
    loop {
        let n = 2 * half + 1;
        let mut values: Vec<f32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|k| {
                let field = &field;
                (0..n * n).map(move |ij| {
                    let p = [
                        (ij % n) as f64 - half as f64,
                        (ij / n) as f64 - half as f64,
                        k as f64 - half as f64,
                    ];
                    let d = dot(p, p).sqrt();
                    let inside = if d <= r_in {
                        true
                    } else if d > r_out {
                        false
                    } else {
                        d <= scale * field.h(p.map(|x| x / d))
                    };
                    inside as u8 as f32
                })
            })
            .collect();
        let center = half + n * (half + n * half);
        keep_component(&mut values, [n, n, n], center);

        let extent = max_offset(&values, n, half);
        if extent + LESION_PADDING >= half {
            half = extent + LESION_PADDING + 2;
            continue;
        }
        let new_half = extent + LESION_PADDING;
        let cropped = crop_centered(&values, n, half, new_half);
        let m = 2 * new_half + 1;
        let origin = [-(new_half as f64) * LESION_VOXEL_MM; 3];
        return VoxelVolume::new(
            [m, m, m],
            [LESION_VOXEL_MM; 3],
            origin,
            VolumeKind::Mask,
            cropped,
        );
    }
}

/// Zero every nonzero voxel not 6-connected to `seed`.
fn keep_component(values: &mut [f32], dims: [usize; 3], seed: usize) {
    let [nx, ny, nz] = dims;
    let mut keep = vec![false; values.len()];
    if values[seed] != 0.0 {
        let mut queue = VecDeque::from([seed]);
        keep[seed] = true;
        while let Some(idx) = queue.pop_front() {
            let i = idx % nx;
            let j = (idx / nx) % ny;
            let k = idx / (nx * ny);
            let mut push = |n: usize| {
                if !keep[n] && values[n] != 0.0 {
                    keep[n] = true;
                    queue.push_back(n);
                }
            };
            if i > 0 { push(idx - 1) }
            if i + 1 < nx { push(idx + 1) }
            if j > 0 { push(idx - nx) }
            if j + 1 < ny { push(idx + nx) }
            if k > 0 { push(idx - nx * ny) }
            if k + 1 < nz { push(idx + nx * ny) }
        }
    }
    for (v, k) in values.iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
}

fn max_offset(values: &[f32], n: usize, half: usize) -> usize {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(idx, _)| {
            let i = idx % n;
            let j = (idx / n) % n;
            let k = idx / (n * n);
            [i, j, k].iter().map(|&c| c.abs_diff(half)).max().unwrap()
        })
        .max()
        .unwrap_or(0)
}

fn crop_centered(values: &[f32], n: usize, half: usize, new_half: usize) -> Vec<f32> {
    let m = 2 * new_half + 1;
    let off = half - new_half;
    let mut out = Vec::with_capacity(m * m * m);
    for k in 0..m {
        for j in 0..m {
            let row = (off + j) * n + (off + k) * n * n + off;
            out.extend_from_slice(&values[row..row + m]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lesion::{equivalent_diameter, NoduleType};
    use crate::phantom::count_components;

    fn spec(d: f64, irr: f64, margin: Margin, seed: u64) -> LesionSpec {
        LesionSpec {
            lesion_id: "t".into(),
            diameter: d,
            shape_seed: seed,
            texture_seed: 0,
            shape_irregularity: irr,
            nodule_type: NoduleType::Solid,
            margin,
        }
    }

    /// Exposed voxel faces, the oracle for surface area.
    fn surface_faces(m: &VoxelVolume) -> usize {
        let [nx, ny, nz] = m.dims();
        let on = |i: isize, j: isize, k: isize| {
            i >= 0 && j >= 0 && k >= 0
                && (i as usize) < nx && (j as usize) < ny && (k as usize) < nz
                && m.get(i as usize, j as usize, k as usize) != 0.0
        };
        let mut faces = 0;
        for k in 0..nz as isize {
            for j in 0..ny as isize {
                for i in 0..nx as isize {
                    if !on(i, j, k) {
                        continue;
                    }
                    for (di, dj, dk) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                        if !on(i + di, j + dj, k + dk) {
                            faces += 1;
                        }
                    }
                }
            }
        }
        faces
    }

    fn check_invariants(m: &VoxelVolume) {
        let [n, _, _] = m.dims();
        let h = n / 2;
        assert_eq!(m.get(h, h, h), 1.0, "centre voxel");
        assert_eq!(count_components(m), 1);
        let ext = max_offset(m.values(), n, h);
        assert_eq!(h - ext, LESION_PADDING);
    }

    #[test]
    fn unperturbed_sphere() {
        let m = generate_shape(&spec(10.0, 0.0, Margin::Smooth, 1)).unwrap();
        check_invariants(&m);
        let d = equivalent_diameter(m.count_nonzero(), 1e-3);
        assert!((d - 10.0).abs() <= LESION_VOXEL_MM, "{d}");
        // exact sphere: grid is 2*(50 + 2) + 1
        assert_eq!(m.dims(), [105, 105, 105]);
    }

    #[test]
    fn same_seed_same_mask() {
        let s = spec(7.0, 0.6, Margin::Lobulated, 99);
        assert_eq!(generate_shape(&s).unwrap(), generate_shape(&s).unwrap());
    }

    #[test]
    fn irregularity_increases_surface_to_volume() {
        for seed in [1, 2, 3] {
            let smooth = generate_shape(&spec(8.0, 0.0, Margin::Smooth, seed)).unwrap();
            let rough = generate_shape(&spec(8.0, 0.5, Margin::Smooth, seed)).unwrap();
            let ratio = |m: &VoxelVolume| surface_faces(m) as f64 / m.count_nonzero() as f64;
            assert!(ratio(&rough) > ratio(&smooth), "seed {seed}");
        }
    }

    #[test]
    fn equivalent_diameter_within_ten_percent() {
        for margin in [Margin::Smooth, Margin::Lobulated, Margin::Spiculated] {
            for irr in [0.0, 0.5, 1.0] {
                let m = generate_shape(&spec(6.0, irr, margin, 5)).unwrap();
                let d = equivalent_diameter(m.count_nonzero(), 1e-3);
                assert!((d - 6.0).abs() / 6.0 <= 0.10, "{margin:?} {irr}: {d}");
            }
        }
    }

    #[test]
    fn connected_and_centered_over_many_seeds() {
        for seed in 0..100u64 {
            for irr in [0.0, 0.25, 0.5, 1.0] {
                let margin = match seed % 3 {
                    0 => Margin::Smooth,
                    1 => Margin::Lobulated,
                    _ => Margin::Spiculated,
                };
                let m = generate_shape(&spec(4.0, irr, margin, seed)).unwrap();
                check_invariants(&m);
            }
        }
    }
}
