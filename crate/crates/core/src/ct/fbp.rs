//! Fan-beam filtered back-projection for a flat, equispaced detector.
//!
//! Projections are rebinned onto a virtual detector through the isocentre
//! (coordinate `s = u R / SID`), cosine-weighted by `R / sqrt(R² + s²)`,
//! filtered with the Hann-apodised ramp and back-projected with the
//! `1 / U²` distance weight, `U = (R − x·e_r) / R`. A full 2π scan counts every
//! ray twice, hence the factor ½.

use rayon::prelude::*;

use super::filter::hann_ramp_filter;
use super::projector::detector_offsets;
use super::Sinogram;
use crate::error::{Error, Result};

/// Output grid of one reconstructed slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconGrid {
    pub nx: usize,
    pub ny: usize,
    /// In-plane pixel size, mm.
    pub spacing: f64,
}

/// Reconstruct every row of `s` into an attenuation image (1/mm), row-major
/// x-fastest, centred on the isocentre. `cutoff` selects the Hann window.
pub fn fbp_reconstruct(s: &Sinogram, grid: ReconGrid, cutoff: f64) -> Result<Vec<Vec<f64>>> {
    let cfg = &s.scanner;
    cfg.validate()?;
    if s.data.len() != s.n_views * s.n_rows * s.n_cols || s.view_angles.len() != s.n_views {
        return Err(Error::InvalidParameter("sinogram shape does not match its data".into()));
    }
    if !(cutoff > 0.0) {
        return Err(Error::InvalidParameter(format!("cutoff must be > 0, got {cutoff}")));
    }
    let coverage = angular_coverage(&s.view_angles);
    let required = std::f64::consts::PI + cfg.fan_angle();
    if coverage + 1e-9 < required {
        return Err(Error::InsufficientCoverage { coverage, required });
    }
    let d_beta = coverage / s.n_views as f64;

    let r = cfg.siso_d;
    let to_virtual = r / cfg.sid;
    let tau = cfg.pitch_at_iso();
    let virt: Vec<f64> = detector_offsets(cfg).iter().map(|u| u * to_virtual).collect();
    let cos_weight: Vec<f64> = virt.iter().map(|s| r / (r * r + s * s).sqrt()).collect();
    let filter = hann_ramp_filter(s.n_cols, tau, cutoff);
    let trig: Vec<(f64, f64)> = s.view_angles.iter().map(|a| a.sin_cos()).collect();
    let center_col = 0.5 * (s.n_cols as f64 - 1.0);

    let mut out = Vec::with_capacity(s.n_rows);
    for row in 0..s.n_rows {
        let filtered: Vec<Vec<f64>> = (0..s.n_views)
            .into_par_iter()
            .map(|v| {
                let start = (v * s.n_rows + row) * s.n_cols;
                let weighted: Vec<f64> = s.data[start..start + s.n_cols]
                    .iter()
                    .zip(&cos_weight)
                    .map(|(p, w)| p * w)
                    .collect();
                filter.apply(&weighted).into_iter().map(|q| 0.5 * q).collect()
            })
            .collect();

        let half_x = 0.5 * (grid.nx as f64 - 1.0);
        let half_y = 0.5 * (grid.ny as f64 - 1.0);
        let xs: Vec<f64> = (0..grid.nx).map(|i| (i as f64 - half_x) * grid.spacing).collect();
        let last = center_col * 2.0;
        let inv_tau = 1.0 / tau;
        let image: Vec<f64> = (0..grid.ny)
            .into_par_iter()
            .flat_map_iter(|j| {
                let y = (j as f64 - half_y) * grid.spacing;
                let mut acc = vec![0.0f64; grid.nx];
                for (q, &(sb, cb)) in filtered.iter().zip(&trig) {
                    let (ys, yc) = (y * sb, y * cb);
                    for (a, &x) in acc.iter_mut().zip(&xs) {
                        let inv = r / (r - (x * cb + ys));
                        let across = yc - x * sb;
                        let pos = across * inv * inv_tau + center_col;
                        let p0 = pos.floor();
                        if p0 < 0.0 || p0 + 1.0 > last {
                            continue;
                        }
                        let k = p0 as usize;
                        let w = pos - p0;
                        let val = q[k] * (1.0 - w) + q[k + 1] * w;
                        *a += val * inv * inv;
                    }
                }
                acc.into_iter().map(move |v| v * d_beta)
            })
            .collect();
        out.push(image);
    }
    Ok(out)
}

/// Angular range covered by uniformly spaced views, including the last step.
pub fn angular_coverage(angles: &[f64]) -> f64 {
    match angles {
        [] | [_] => 0.0,
        [first, .., last] => {
            let step = (last - first) / (angles.len() - 1) as f64;
            (last - first).abs() + step.abs()
        }
    }
}
