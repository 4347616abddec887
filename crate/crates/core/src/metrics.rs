//! Overlap and ranking measures, plus the profile measurements used to check
//! reconstruction sharpness and lesion size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelVolume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub dice: f64,
    pub intersection_voxels: usize,
    pub a_voxels: usize,
    pub b_voxels: usize,
}

/// Dice overlap of the nonzero voxels of two masks on the same grid. Two
/// empty masks agree vacuously and score 1.
pub fn dice(a: &VoxelVolume, b: &VoxelVolume) -> Result<OverlapReport> {
    if !a.same_grid(b) {
        return Err(Error::GridMismatch(format!(
            "dice: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (x, y) in a.values().iter().zip(b.values()) {
        let (x, y) = (*x != 0.0, *y != 0.0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    let dice = if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    };
    Ok(OverlapReport {
        dice,
        intersection_voxels: inter,
        a_voxels: na,
        b_voxels: nb,
    })
}

/// Mann–Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half. Computed from mid-ranks in O(n log n).
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateData(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if let Some((s, _)) = scores.iter().find(|s| s.0.is_nan()) {
        return Err(Error::InvalidParameter(format!("score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].0.total_cmp(&scores[j].0));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]].0 == scores[order[start]].0 {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share their mean
        let mid = 0.5 * ((start + 1) + end) as f64;
        let pos_in_tie = order[start..end].iter().filter(|&&i| scores[i].1).count();
        rank_sum += mid * pos_in_tie as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Distance over which a monotone edge profile rises from 10 % to 90 % of
/// its step, with linear interpolation between samples. `samples` are
/// equally spaced by `step`; the profile may rise or fall.
pub fn edge_width_10_90(samples: &[f64], step: f64) -> Option<f64> {
    if samples.len() < 2 {
        return None;
    }
    let first = samples[0];
    let last = *samples.last().unwrap();
    let rising = last > first;
    let norm: Vec<f64> = samples
        .iter()
        .map(|s| if rising { (s - first) / (last - first) } else { (first - s) / (first - last) })
        .collect();
    if !(last != first) {
        return None;
    }
    let t10 = crossing(&norm, 0.1)?;
    let t90 = crossing(&norm, 0.9)?;
    Some((t90 - t10).abs() * step)
}

/// Fractional index of the first upward crossing of `level`.
fn crossing(y: &[f64], level: f64) -> Option<f64> {
    y.windows(2).enumerate().find_map(|(i, w)| {
        (w[0] < level && w[1] >= level).then(|| i as f64 + (level - w[0]) / (w[1] - w[0]))
    })
}

/// Full width at half maximum of a peaked profile over a baseline, in units
/// of `step`. The half level is `baseline + (peak − baseline)/2`, crossings
/// interpolated linearly on both flanks of the maximum.
pub fn fwhm(samples: &[f64], baseline: f64, step: f64) -> Option<f64> {
    let (imax, &peak) = samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(peak > baseline) {
        return None;
    }
    let half = baseline + 0.5 * (peak - baseline);
    let right = (imax..samples.len() - 1).find_map(|i| {
        (samples[i] >= half && samples[i + 1] < half)
            .then(|| i as f64 + (samples[i] - half) / (samples[i] - samples[i + 1]))
    })?;
    let left = (1..=imax).rev().find_map(|i| {
        (samples[i] >= half && samples[i - 1] < half)
            .then(|| i as f64 - (samples[i] - half) / (samples[i] - samples[i - 1]))
    })?;
    Some((right - left) * step)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
