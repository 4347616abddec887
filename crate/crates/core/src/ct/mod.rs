//! Fan-beam CT: acquisition geometry, projection, photon noise, scatter and
//! filtered back-projection.
//!
//! Acquisition is axial and slice-by-slice: each requested z position is
//! projected as its own fan-beam row, so a multi-slice sinogram is a stack of
//! independent 2D acquisitions sharing view angles.

mod fbp;
mod filter;
mod noise;
pub mod projector;
mod scanner;

use rayon::prelude::*;

pub use fbp::{angular_coverage, fbp_reconstruct, ReconGrid};
pub use filter::{hann_ramp_filter, hann_window, HannRampFilter};
pub use noise::{apply_quantum_noise, estimate_scatter, scatter_half_width, triangular_smooth, CounterRng};
pub use projector::{back_project_rays, forward_project, line_integral, Slice2D};
pub use scanner::{builtin_scanner, ReconFilter, ScannerConfig, ScannerModel, DEFAULT_CUTOFF, DEFAULT_I0};

use crate::error::{Error, Result};
use crate::volume::{VolumeKind, VoxelVolume};

/// Default scatter-to-primary ratio.
pub const DEFAULT_SPR: f64 = 0.05;

/// Line integrals indexed `(view, row, col)` with `col` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub n_views: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub view_angles: Vec<f64>,
    pub data: Vec<f64>,
    pub scanner: ScannerConfig,
    /// World z of each row, mm.
    pub slice_z: Vec<f64>,
    /// World (x, y) of the rotation axis, mm.
    pub isocenter: [f64; 2],
}

impl Sinogram {
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_views * self.n_rows * self.n_cols
            || self.view_angles.len() != self.n_views
            || self.slice_z.len() != self.n_rows
        {
            return Err(Error::InvalidParameter("sinogram shape does not match its data".into()));
        }
        if let Some(x) = self.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite sinogram value {x}")));
        }
        Ok(())
    }

    /// Stack single-row sinograms that share a geometry.
    pub fn stack(rows: Vec<Sinogram>) -> Result<Sinogram> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidParameter("nothing to stack".into()))?;
        let (n_views, n_cols) = (first.n_views, first.n_cols);
        if rows.iter().any(|r| {
            r.n_rows != 1 || r.n_views != n_views || r.n_cols != n_cols || r.scanner != first.scanner
        }) {
            return Err(Error::InvalidParameter("stacked sinograms must share geometry".into()));
        }
        let n_rows = rows.len();
        let mut data = vec![0.0; n_views * n_rows * n_cols];
        for (row, s) in rows.iter().enumerate() {
            for v in 0..n_views {
                let dst = (v * n_rows + row) * n_cols;
                data[dst..dst + n_cols].copy_from_slice(&s.data[v * n_cols..(v + 1) * n_cols]);
            }
        }
        Ok(Sinogram {
            n_views,
            n_rows,
            n_cols,
            view_angles: first.view_angles.clone(),
            scanner: first.scanner.clone(),
            slice_z: rows.iter().map(|r| r.slice_z[0]).collect(),
            isocenter: first.isocenter,
            data,
        })
    }

    /// Sinogram as a volume of kind `sinogram`: x = column, y = row, z = view.
    pub fn to_volume(&self) -> Result<VoxelVolume> {
        let values = (0..self.n_views)
            .flat_map(|v| (0..self.n_rows).map(move |r| (v, r)))
            .flat_map(|(v, r)| {
                let start = (v * self.n_rows + r) * self.n_cols;
                self.data[start..start + self.n_cols].iter().map(|&x| x as f32)
            })
            .collect();
        let step = if self.n_views > 1 {
            self.view_angles[1] - self.view_angles[0]
        } else {
            1.0
        };
        VoxelVolume::new(
            [self.n_cols, self.n_rows, self.n_views],
            [self.scanner.pitch_at_iso(), 1.0, step],
            [0.0; 3],
            VolumeKind::Sinogram,
            values,
        )
    }
}

/// Reconstructed HU volume with acquisition provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconVolume {
    pub volume: VoxelVolume,
    pub scanner: String,
    pub cutoff: f64,
    pub i0: f64,
    pub seed: u64,
}

pub fn mu_to_hu(mu: &VoxelVolume, mu_water: f64) -> Result<VoxelVolume> {
    check_mu_water(mu_water)?;
    if mu.kind() != VolumeKind::Attenuation {
        return Err(Error::InvalidVolume(format!("expected attenuation, got {}", mu.kind().as_str())));
    }
    mu.map(VolumeKind::Hu, |m| (1000.0 * (m as f64 - mu_water) / mu_water) as f32)
}

pub fn hu_to_mu(hu: &VoxelVolume, mu_water: f64) -> Result<VoxelVolume> {
    check_mu_water(mu_water)?;
    if hu.kind() != VolumeKind::Hu {
        return Err(Error::InvalidVolume(format!("expected HU, got {}", hu.kind().as_str())));
    }
    hu.map(VolumeKind::Attenuation, |h| (mu_water * (1.0 + h as f64 / 1000.0)) as f32)
}

fn check_mu_water(mu_water: f64) -> Result<()> {
    if mu_water > 0.0 && mu_water.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("mu_water must be > 0, got {mu_water}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOptions {
    pub seed: u64,
    pub spr: f64,
    /// Skip Poisson sampling (and scatter) entirely when false.
    pub noise: bool,
    pub out_dims: [usize; 2],
    pub out_spacing: f64,
    pub mu_water: f64,
}

/// Project every slice in `slices` and, if enabled, add scatter and photon
/// noise. Rows of the result follow the order of `slices`.
pub fn acquire(mu: &VoxelVolume, cfg: &ScannerConfig, slices: &[f64], opts: &ScanOptions) -> Result<Sinogram> {
    if slices.is_empty() {
        return Err(Error::InvalidParameter("no slices requested".into()));
    }
    if !(opts.spr >= 0.0) {
        return Err(Error::InvalidParameter(format!("spr must be >= 0, got {}", opts.spr)));
    }
    let rows = slices
        .iter()
        .map(|&z| forward_project(mu, cfg, z))
        .collect::<Result<Vec<_>>>()?;
    let clean = Sinogram::stack(rows)?;
    if !opts.noise {
        return Ok(clean);
    }
    let scatter = estimate_scatter(&clean, opts.spr);
    let scatter = (opts.spr > 0.0).then_some(scatter.as_slice());
    Ok(apply_quantum_noise(&clean, scatter, opts.seed))
}

/// FBP every row of `s` with a Hann cutoff and stack the slices in HU.
/// Slices must be uniformly spaced in z for the output to be a volume.
pub fn reconstruct(s: &Sinogram, cutoff: f64, opts: &ScanOptions) -> Result<ReconVolume> {
    s.validate()?;
    let [nx, ny] = opts.out_dims;
    if nx == 0 || ny == 0 || !(opts.out_spacing > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad output grid {:?} at {} mm",
            opts.out_dims, opts.out_spacing
        )));
    }
    let pitch = slice_pitch(&s.slice_z)?;
    let grid = ReconGrid {
        nx,
        ny,
        spacing: opts.out_spacing,
    };
    let images = fbp_reconstruct(s, grid, cutoff)?;
    check_mu_water(opts.mu_water)?;
    let mu_w = opts.mu_water;
    let values: Vec<f32> = images
        .into_par_iter()
        .flat_map_iter(|img| img.into_iter().map(move |m| (1000.0 * (m - mu_w) / mu_w) as f32))
        .collect();
    let origin = [
        s.isocenter[0] - 0.5 * (nx as f64 - 1.0) * opts.out_spacing,
        s.isocenter[1] - 0.5 * (ny as f64 - 1.0) * opts.out_spacing,
        s.slice_z[0],
    ];
    let volume = VoxelVolume::new(
        [nx, ny, s.n_rows],
        [opts.out_spacing, opts.out_spacing, pitch],
        origin,
        VolumeKind::Hu,
        values,
    )?;
    Ok(ReconVolume {
        volume,
        scanner: s.scanner.name.clone(),
        cutoff,
        i0: s.scanner.i0,
        seed: opts.seed,
    })
}

/// `acquire` followed by `reconstruct` at the scanner's own filter cutoff.
pub fn simulate_scan(
    mu: &VoxelVolume,
    cfg: &ScannerConfig,
    slices: &[f64],
    opts: &ScanOptions,
) -> Result<ReconVolume> {
    let s = acquire(mu, cfg, slices, opts)?;
    reconstruct(&s, cfg.recon_filter.cutoff(), opts)
}

fn slice_pitch(z: &[f64]) -> Result<f64> {
    match z {
        [] => Err(Error::InvalidParameter("no slices".into())),
        [_] => Ok(1.0),
        [a, b, ..] => {
            let pitch = b - a;
            let uniform = z
                .windows(2)
                .all(|w| ((w[1] - w[0]) - pitch).abs() <= 1e-6 * pitch.abs().max(1.0));
            if pitch > 0.0 && uniform {
                Ok(pitch)
            } else {
                Err(Error::InvalidParameter("slices must be increasing and evenly spaced".into()))
            }
        }
    }
}

/// Centres of every axial slice of `v`.
pub fn all_slices(v: &VoxelVolume) -> Vec<f64> {
    let oz = v.origin()[2];
    let sz = v.spacing()[2];
    (0..v.dims()[2]).map(|k| oz + k as f64 * sz).collect()
}
