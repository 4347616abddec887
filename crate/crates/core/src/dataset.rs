//! Dataset export: volume and mask files, the annotation manifest, and the
//! resampling / patch extraction used to prepare nodule crops.
//!
//! Output tree:
//!
//! ```text
//! out_dir/volumes/<scan_id>.mhd|.raw|.json
//! out_dir/masks/<scan_id>.mhd|.raw|.json
//! out_dir/manifest.csv
//! out_dir/dataset.json
//! ```
//!
//! Annotation coordinates are world millimetres in the frame of the volume
//! header. Masks store lesion instances as 1, 2, ... and background as 0.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ct::{ReconVolume, ScannerConfig};
use crate::error::{Error, Result};
use crate::io::{self, Sidecar};
use crate::labeler::Label;
use crate::volume::{VolumeKind, VoxelVolume};

pub const MANIFEST_HEADER: [&str; 17] = [
    "scan_id",
    "lesion_id",
    "coordX",
    "coordY",
    "coordZ",
    "diameter_mm",
    "bbox_min_x",
    "bbox_min_y",
    "bbox_min_z",
    "bbox_max_x",
    "bbox_max_y",
    "bbox_max_z",
    "mask_path",
    "probability",
    "label",
    "scanner",
    "filter_cutoff",
];

pub const PATCH_DIMS: [usize; 3] = [64, 64, 64];
pub const PATCH_CLIP_HU: (f32, f32) = (-1000.0, 500.0);
pub const PATCH_PAD_HU: f32 = -1000.0;
pub const STD_FLOOR: f64 = 1e-6;
/// Resampling target used before patch extraction, mm.
pub const PATCH_SPACING: [f64; 3] = [0.7, 0.7, 1.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub scan_id: String,
    pub lesion_id: String,
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Relative to the dataset root.
    pub mask_path: String,
    pub probability: f64,
    pub label: Label,
    pub scanner: String,
    pub filter_cutoff: f64,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(format!("{}/{}: {m}", self.scan_id, self.lesion_id)));
        if !(self.diameter_mm > 0.0) {
            return bad(format!("diameter must be > 0, got {}", self.diameter_mm));
        }
        for a in 0..3 {
            if !(self.bbox_min[a] <= self.center_mm[a] && self.center_mm[a] <= self.bbox_max[a]) {
                return bad("bounding box does not contain the centre".into());
            }
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        Ok(())
    }

    /// Cube of edge `diameter` centred on the lesion.
    pub fn cube_bbox(center: [f64; 3], diameter: f64) -> ([f64; 3], [f64; 3]) {
        (center.map(|c| c - 0.5 * diameter), center.map(|c| c + 0.5 * diameter))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<Annotation>,
    pub dataset_seed: u64,
    pub tool_version: String,
}

impl Manifest {
    pub fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if !seen.insert((r.scan_id.as_str(), r.lesion_id.as_str())) {
                return Err(Error::Manifest(format!(
                    "duplicate row for scan {:?}, lesion {:?}",
                    r.scan_id, r.lesion_id
                )));
            }
        }
        Ok(())
    }

    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (&a.scan_id, &a.lesion_id).cmp(&(&b.scan_id, &b.lesion_id)));
    }

    pub fn scan_ids(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.scan_id.as_str()).collect()
    }
}

/// Format with six significant digits and no trailing zeros.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.5e}")
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    let (mantissa, exp) = match s.find('e') {
        Some(i) => (&s[..i], &s[i..]),
        None => (s, ""),
    };
    let mantissa = if mantissa.contains('.') {
        mantissa.trim_end_matches('0').trim_end_matches('.')
    } else {
        mantissa
    };
    // "-0" can appear after rounding a tiny negative
    let mantissa = if mantissa == "-0" { "0" } else { mantissa };
    format!("{mantissa}{exp}")
}

/// Write the annotation rows as CSV (header only for an empty manifest).
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.check_unique()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(MANIFEST_HEADER)?;
    for r in &m.rows {
        let f = fmt_sig6;
        let rec = [
            r.scan_id.clone(),
            r.lesion_id.clone(),
            f(r.center_mm[0]),
            f(r.center_mm[1]),
            f(r.center_mm[2]),
            f(r.diameter_mm),
            f(r.bbox_min[0]),
            f(r.bbox_min[1]),
            f(r.bbox_min[2]),
            f(r.bbox_max[0]),
            f(r.bbox_max[1]),
            f(r.bbox_max[2]),
            r.mask_path.clone(),
            f(r.probability),
            r.label.as_str().to_string(),
            r.scanner.clone(),
            f(r.filter_cutoff),
        ];
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest(format!("{}: {other:?}", path.display())),
    }
}

/// Read a manifest. Seed and tool version come from `dataset.json` next to
/// the CSV when present.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Manifest(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| {
                Error::Manifest(format!("row {row}: column {} is not a number: {:?}", MANIFEST_HEADER[i], &rec[i]))
            })
        };
        let triple = |i: usize| -> Result<[f64; 3]> { Ok([num(i)?, num(i + 1)?, num(i + 2)?]) };
        let a = Annotation {
            scan_id: rec[0].to_string(),
            lesion_id: rec[1].to_string(),
            center_mm: triple(2)?,
            diameter_mm: num(5)?,
            bbox_min: triple(6)?,
            bbox_max: triple(9)?,
            mask_path: rec[12].to_string(),
            probability: num(13)?,
            label: rec[14]
                .parse()
                .map_err(|_| Error::Manifest(format!("row {row}: bad label {:?}", &rec[14])))?,
            scanner: rec[15].to_string(),
            filter_cutoff: num(16)?,
        };
        rows.push(a);
    }
    let mut m = Manifest {
        rows,
        ..Manifest::default()
    };
    m.check_unique()?;
    let info_path = path.with_file_name("dataset.json");
    if info_path.exists() {
        let info = read_dataset_info(&info_path)?;
        m.dataset_seed = info.dataset_seed;
        m.tool_version = info.tool_version;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_seed: u64,
    pub tool_version: String,
    pub scanners: Vec<ScannerConfig>,
    pub filter_cutoffs: Vec<f64>,
    pub n_scans: usize,
    pub n_lesions: usize,
    pub coordinates: String,
}

pub fn write_dataset_info(info: &DatasetInfo, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(info)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_dataset_info(path: &Path) -> Result<DatasetInfo> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn volume_path(out_dir: &Path, scan_id: &str) -> PathBuf {
    out_dir.join("volumes").join(format!("{scan_id}.mhd"))
}

pub fn mask_rel_path(scan_id: &str) -> String {
    format!("masks/{scan_id}.mhd")
}

/// Write one reconstructed scan and its instance mask, returning the
/// annotations with `scan_id`, `mask_path`, scanner and cutoff filled in.
pub fn export_scan(
    scan_id: &str,
    recon: &ReconVolume,
    mask: &VoxelVolume,
    annotations: &[Annotation],
    out_dir: &Path,
) -> Result<Vec<Annotation>> {
    if !recon.volume.same_grid(mask) {
        return Err(Error::GridMismatch(format!(
            "mask grid {:?} does not match scan grid {:?}",
            mask.dims(),
            recon.volume.dims()
        )));
    }
    if mask.kind() != VolumeKind::Mask {
        return Err(Error::InvalidVolume(format!("expected a mask, got {}", mask.kind().as_str())));
    }
    if scan_id.is_empty() || scan_id.contains(['/', '\\']) {
        return Err(Error::InvalidParameter(format!("bad scan id {scan_id:?}")));
    }
    let mut meta = Sidecar::default();
    let put = |m: &mut Sidecar, k: &str, v: serde_json::Value| {
        m.extra.insert(k.to_string(), v);
    };
    put(&mut meta, "scan_id", scan_id.into());
    put(&mut meta, "scanner", recon.scanner.clone().into());
    put(&mut meta, "filter_cutoff", recon.cutoff.into());
    put(&mut meta, "i0", recon.i0.into());
    put(&mut meta, "seed", recon.seed.into());
    io::save_volume_with(&recon.volume, &volume_path(out_dir, scan_id), meta.clone())?;
    let rel = mask_rel_path(scan_id);
    io::save_volume_with(mask, &out_dir.join(&rel), meta)?;

    annotations
        .iter()
        .map(|a| {
            let a = Annotation {
                scan_id: scan_id.to_string(),
                mask_path: rel.clone(),
                scanner: recon.scanner.clone(),
                filter_cutoff: recon.cutoff,
                ..a.clone()
            };
            a.validate()?;
            Ok(a)
        })
        .collect()
}

/// Every mask referenced by the manifest loads and matches its volume grid.
pub fn check_closure(out_dir: &Path, m: &Manifest) -> Result<()> {
    for scan in m.scan_ids() {
        let vol = io::load_volume(&volume_path(out_dir, scan))?;
        for r in m.rows.iter().filter(|r| r.scan_id == scan) {
            let mask = io::load_volume(&out_dir.join(&r.mask_path))?;
            if !mask.same_grid(&vol) {
                return Err(Error::GridMismatch(format!("{}: mask and volume grids differ", r.mask_path)));
            }
        }
    }
    Ok(())
}

/// Trilinear sample at a world point, replicating edge voxels outside the
/// grid of voxel centres.
pub fn sample_trilinear(v: &VoxelVolume, p: [f64; 3]) -> f64 {
    let dims = v.dims();
    let c = v.continuous_index(p);
    let mut lo = [0usize; 3];
    let mut w = [0.0f64; 3];
    for a in 0..3 {
        let x = c[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = x.floor().min((dims[a].max(2) - 2) as f64).max(0.0);
        lo[a] = f as usize;
        w[a] = if dims[a] == 1 { 0.0 } else { x - f };
    }
    let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(dims[a] - 1));
    let mut acc = 0.0;
    for (dk, wk) in [(lo[2], 1.0 - w[2]), (hi[2], w[2])] {
        for (dj, wj) in [(lo[1], 1.0 - w[1]), (hi[1], w[1])] {
            for (di, wi) in [(lo[0], 1.0 - w[0]), (hi[0], w[0])] {
                let wt = wi * wj * wk;
                if wt != 0.0 {
                    acc += wt * v.get(di, dj, dk) as f64;
                }
            }
        }
    }
    acc
}

/// Target grid covering the same world extent at a new spacing.
pub fn resampled_grid(v: &VoxelVolume, target: [f64; 3]) -> ([usize; 3], [f64; 3]) {
    let extent = v.extent();
    let dims: [usize; 3] = std::array::from_fn(|a| ((extent[a] / target[a] - 1e-9).ceil() as usize).max(1));
    let origin = std::array::from_fn(|a| v.origin()[a] - 0.5 * v.spacing()[a] + 0.5 * target[a]);
    (dims, origin)
}

/// Resample onto `target` spacing over the same extent. Intensity kinds use
/// trilinear interpolation; labels and masks use nearest neighbour so that
/// instance ids survive.
pub fn resample_volume(v: &VoxelVolume, target: [f64; 3]) -> Result<VoxelVolume> {
    if target.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidParameter(format!("target spacing must be > 0, got {target:?}")));
    }
    let (dims, origin) = resampled_grid(v, target);
    resample_onto(v, dims, target, origin, 0.0)
}

/// Resample onto an arbitrary grid. Points outside the source's voxel-edge
/// extent take `fill` for labels and masks; intensities replicate the edge.
pub fn resample_onto(
    v: &VoxelVolume,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    fill: f32,
) -> Result<VoxelVolume> {
    let nearest = matches!(v.kind(), VolumeKind::MaterialLabel | VolumeKind::Mask);
    let grid = VoxelVolume::filled(dims, spacing, origin, v.kind(), 0.0)?;
    let values = (0..grid.len())
        .map(|idx| {
            let p = grid.world(grid.coords(idx));
            if nearest {
                v.voxel_at(p).map_or(fill, |ijk| v.get(ijk[0], ijk[1], ijk[2]))
            } else {
                sample_trilinear(v, p) as f32
            }
        })
        .collect();
    grid.with_values(v.kind(), values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchOptions {
    pub dims: [usize; 3],
    pub clip: Option<(f32, f32)>,
    pub standardize: bool,
}

impl Default for PatchOptions {
    fn default() -> Self {
        PatchOptions {
            dims: PATCH_DIMS,
            clip: Some(PATCH_CLIP_HU),
            standardize: true,
        }
    }
}

/// Crop a patch of `opts.dims` voxels centred on the voxel nearest
/// `center_mm`, on the source grid. Voxels outside the volume read as
/// −1000 HU. Clipping happens before standardisation.
pub fn extract_patch(v: &VoxelVolume, center_mm: [f64; 3], opts: &PatchOptions) -> Result<VoxelVolume> {
    if v.kind() != VolumeKind::Hu {
        return Err(Error::InvalidVolume(format!("patches are cut from HU volumes, not {}", v.kind().as_str())));
    }
    if opts.dims.contains(&0) {
        return Err(Error::InvalidParameter(format!("patch dims must be >= 1, got {:?}", opts.dims)));
    }
    let c = v.continuous_index(center_mm);
    let start: [i64; 3] = std::array::from_fn(|a| c[a].round() as i64 - (opts.dims[a] / 2) as i64);
    let dims = v.dims();
    let n: usize = opts.dims.iter().product();
    let mut values = Vec::with_capacity(n);
    for k in 0..opts.dims[2] as i64 {
        for j in 0..opts.dims[1] as i64 {
            for i in 0..opts.dims[0] as i64 {
                let p = [start[0] + i, start[1] + j, start[2] + k];
                let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a]);
                let mut x = if inside {
                    v.get(p[0] as usize, p[1] as usize, p[2] as usize)
                } else {
                    PATCH_PAD_HU
                };
                if let Some((lo, hi)) = opts.clip {
                    x = x.clamp(lo, hi);
                }
                values.push(x);
            }
        }
    }
    if opts.standardize {
        let mean = values.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = values.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for x in &mut values {
            *x = ((*x as f64 - mean) / std) as f32;
        }
    }
    let sp = v.spacing();
    let origin = std::array::from_fn(|a| v.origin()[a] + start[a] as f64 * sp[a]);
    VoxelVolume::new(opts.dims, sp, origin, VolumeKind::Hu, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1.0), "1");
        assert_eq!(fmt_sig6(-12.3456789), "-12.3457");
        assert_eq!(fmt_sig6(123456.7), "123457");
        assert_eq!(fmt_sig6(1234567.0), "1.23457e6");
        assert_eq!(fmt_sig6(0.6), "0.6");
        assert_eq!(fmt_sig6(1.5e-7), "1.5e-7");
        assert_eq!(fmt_sig6(-1e-12), "-1e-12");
    }

    #[test]
    fn identity_resample() {
        let vals: Vec<f32> = (0..60).map(|i| i as f32 * 1.5).collect();
        let v = VoxelVolume::new([5, 4, 3], [0.7, 0.7, 1.25], [1.0, 2.0, 3.0], VolumeKind::Hu, vals).unwrap();
        let r = resample_volume(&v, [0.7, 0.7, 1.25]).unwrap();
        assert!(r.same_grid(&v));
        for (a, b) in r.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_and_ramp_resample() {
        let c = VoxelVolume::filled([10, 8, 6], [1.0, 1.0, 2.0], [0.0; 3], VolumeKind::Hu, 42.0).unwrap();
        let r = resample_volume(&c, [0.7, 0.7, 1.25]).unwrap();
        assert_eq!(r.dims(), [15, 12, 10]);
        assert!(r.values().iter().all(|x| (x - 42.0).abs() < 1e-4));

        let ramp = c.with_values(VolumeKind::Hu, (0..c.len()).map(|i| (i % 10) as f32 * 3.0 - 5.0).collect()).unwrap();
        let r = resample_volume(&ramp, [0.7, 0.7, 1.25]).unwrap();
        for idx in 0..r.len() {
            let p = r.world(r.coords(idx));
            if p[0] >= 0.0 && p[0] <= 9.0 {
                assert!((r.values()[idx] as f64 - (3.0 * p[0] - 5.0)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn patch_rules() {
        let v = VoxelVolume::filled([20, 20, 20], [1.0; 3], [0.0; 3], VolumeKind::Hu, 0.0).unwrap();
        let opts = PatchOptions {
            dims: [8, 8, 8],
            clip: Some(PATCH_CLIP_HU),
            standardize: false,
        };
        let p = extract_patch(&v, [10.0; 3], &opts).unwrap();
        assert_eq!(p.dims(), [8, 8, 8]);
        assert!(p.values().iter().all(|&x| x == 0.0));

        let hot = v.map(VolumeKind::Hu, |_| 700.0).unwrap();
        assert!(extract_patch(&hot, [10.0; 3], &opts).unwrap().values().iter().all(|&x| x == 500.0));

        let far = extract_patch(&v, [500.0, -300.0, 10.0], &opts).unwrap();
        assert!(far.values().iter().all(|&x| x == -1000.0));

        let edge = extract_patch(&v, [0.0; 3], &PatchOptions::default()).unwrap();
        assert_eq!(edge.dims(), PATCH_DIMS);
        let (m, _) = crate::metrics::mean_std(&edge.values().iter().map(|&x| x as f64).collect::<Vec<_>>());
        assert!(m.abs() < 1e-4);

        let flat = extract_patch(&v, [10.0; 3], &PatchOptions { standardize: true, ..opts }).unwrap();
        assert!(flat.values().iter().all(|&x| x == 0.0));
    }
}
