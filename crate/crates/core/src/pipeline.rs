//! End-to-end dataset generation from a TOML config.
//!
//! Each twin gets its own seed, `mix(seed, [twin index, "twin"])`, and every
//! stage below it derives streams from that, so twins are independent of
//! each other and of the worker count. A twin that fails at any stage is
//! logged and skipped; the others still export.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ct::{self, builtin_scanner, ScanOptions, ScannerConfig, ScannerModel};
use crate::dataset::{self, Annotation, DatasetInfo, Manifest};
use crate::error::{Error, Result};
use crate::labeler::{self, LabelMode, LogisticModel, NoduleFeatures};
use crate::lesion::{
    self, ClbParams, GammaParams, LesionSpec, LesionVolume, Margin, NoduleType, PlacementResult,
};
use crate::phantom::{self, ChestPhantom};
use crate::seed;
use crate::volume::{VolumeKind, VoxelVolume};
use crate::TOOL_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub n_twins: usize,
    /// Inclusive range of lesions per twin.
    pub lesions_per_twin: [usize; 2],
    pub gamma: GammaParams,
    pub clb: ClbParams,
    /// Upper bound of the uniform shape irregularity draw.
    pub max_irregularity: f64,
    pub scanners: Vec<ScannerModel>,
    pub filter_cutoffs: Vec<f64>,
    pub n_views: usize,
    pub i0: f64,
    pub spr: f64,
    /// Effective beam energy for the material table, keV.
    pub effective_kev: f64,
    pub phantom_dims: [usize; 3],
    /// Phantom voxel size, mm. The scan's slice pitch equals the z spacing.
    pub phantom_spacing: [f64; 3],
    pub recon_dims: [usize; 2],
    /// In-plane pixel size of the reconstruction, mm.
    pub out_spacing: f64,
    /// Clearance between a lesion's bounding sphere and the lung wall, mm.
    pub wall_clearance: f64,
    pub max_placement_attempts: usize,
    pub label_model_path: Option<PathBuf>,
    pub threshold: f64,
    pub label_mode: LabelMode,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("synlungs_out"),
            n_twins: 1,
            lesions_per_twin: [1, 3],
            gamma: GammaParams::default(),
            clb: ClbParams::default(),
            max_irregularity: 0.5,
            scanners: vec![ScannerModel::W12, ScannerModel::W20],
            filter_cutoffs: vec![0.5, 0.6, 1.2],
            n_views: 1000,
            i0: ct::DEFAULT_I0,
            spr: ct::DEFAULT_SPR,
            effective_kev: phantom::DEFAULT_EFFECTIVE_KEV,
            phantom_dims: [128, 128, 48],
            phantom_spacing: [2.5, 2.5, 2.5],
            recon_dims: [128, 128],
            out_spacing: 2.5,
            wall_clearance: 1.0,
            max_placement_attempts: 2000,
            label_model_path: None,
            threshold: labeler::DEFAULT_THRESHOLD,
            label_mode: LabelMode::Deterministic,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_twins < 1 {
            return bad("n_twins must be >= 1".into());
        }
        let [lo, hi] = self.lesions_per_twin;
        if lo > hi {
            return bad(format!("lesions_per_twin range [{lo}, {hi}] is empty"));
        }
        self.gamma.validate()?;
        self.clb.validate()?;
        if !(0.0..=1.0).contains(&self.max_irregularity) {
            return bad(format!("max_irregularity must be in [0, 1], got {}", self.max_irregularity));
        }
        if self.scanners.is_empty() {
            return bad("scanners must not be empty".into());
        }
        if self.filter_cutoffs.is_empty() {
            return bad("filter_cutoffs must not be empty".into());
        }
        if let Some(c) = self.filter_cutoffs.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return bad(format!("filter cutoff must be > 0, got {c}"));
        }
        for (i, a) in self.filter_cutoffs.iter().enumerate() {
            if self.filter_cutoffs[..i].contains(a) {
                return bad(format!("filter cutoff {a} listed twice"));
            }
        }
        if !(self.i0 > 0.0) {
            return bad(format!("i0 must be > 0, got {}", self.i0));
        }
        if !(self.spr >= 0.0) {
            return bad(format!("spr must be >= 0, got {}", self.spr));
        }
        phantom::MaterialTable::at_energy(self.effective_kev).map_err(|e| Error::Config(e.to_string()))?;
        if self.phantom_dims.iter().any(|&d| d < phantom::MIN_PHANTOM_DIM) {
            return bad(format!(
                "phantom_dims must be >= {} per axis, got {:?}",
                phantom::MIN_PHANTOM_DIM,
                self.phantom_dims
            ));
        }
        if self.phantom_spacing.iter().any(|s| !(*s > 0.0)) || !(self.out_spacing > 0.0) {
            return bad("spacings must be > 0".into());
        }
        if self.recon_dims.contains(&0) {
            return bad("recon_dims must be >= 1".into());
        }
        if !(self.wall_clearance >= 0.0) || self.max_placement_attempts == 0 {
            return bad("wall_clearance must be >= 0 and max_placement_attempts >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must be in [0, 1], got {}", self.threshold));
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        for cfg in self.scanner_configs() {
            cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn scanner_configs(&self) -> Vec<ScannerConfig> {
        self.scanners
            .iter()
            .map(|&m| {
                let mut c = builtin_scanner(m);
                c.n_views = self.n_views;
                c.i0 = self.i0;
                c
            })
            .collect()
    }

    pub fn n_scans_per_twin(&self) -> usize {
        self.scanners.len() * self.filter_cutoffs.len()
    }
}

pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub manifest: Manifest,
    pub n_scans: usize,
    pub n_lesions: usize,
    /// `(twin index, error message)` for every twin that did not export.
    pub failed_twins: Vec<(usize, String)>,
}

pub fn twin_seed(seed: u64, twin: usize) -> u64 {
    seed::mix(seed, &[twin as u64, seed::tag("twin")])
}

pub fn scan_id(twin: usize, scanner: &str, cutoff: f64) -> String {
    format!("twin{twin:04}_{scanner}_hann{}", dataset::fmt_sig6(cutoff))
}

/// A phantom with lesions embedded, before imaging.
#[derive(Debug, Clone)]
pub struct LesionedTwin {
    pub phantom: ChestPhantom,
    pub lung: VoxelVolume,
    /// Attenuation with all lesions embedded.
    pub mu: VoxelVolume,
    /// Lesion instances 1..=n on the phantom grid.
    pub instances: VoxelVolume,
    pub lesions: Vec<(LesionSpec, LesionVolume, PlacementResult)>,
}

/// Phantom generation, lesion synthesis, placement and embedding.
pub fn build_twin(cfg: &PipelineConfig, twin: usize) -> Result<LesionedTwin> {
    let ts = twin_seed(cfg.seed, twin);
    let mut phantom = phantom::generate_chest_phantom(
        seed::mix(ts, &[seed::tag("phantom")]),
        cfg.phantom_dims,
        cfg.phantom_spacing,
    )?;
    phantom.table = phantom::MaterialTable::at_energy(cfg.effective_kev)?;
    let lung = phantom::lung_mask(&phantom.labels, &phantom.meta);
    let mut rng = seed::stream(ts, &[seed::tag("lesions")]);
    let [lo, hi] = cfg.lesions_per_twin;
    let count = rng.random_range(lo..=hi);

    let mut mu = phantom::materialize_attenuation(&phantom.labels, &phantom.table)?;
    let mut instances = vec![0f32; mu.len()];
    let mut lesions = Vec::with_capacity(count);
    let mut placements: Vec<PlacementResult> = Vec::with_capacity(count);
    for k in 0..count {
        let diameter = lesion::sample_size(&cfg.gamma, &mut rng)?;
        let margin = [Margin::Smooth, Margin::Lobulated, Margin::Spiculated][rng.random_range(0..3)];
        let spec = LesionSpec {
            lesion_id: format!("L{k:02}"),
            diameter,
            shape_seed: seed::mix(ts, &[seed::tag("shape"), k as u64]),
            texture_seed: seed::mix(ts, &[seed::tag("texture"), k as u64]),
            shape_irregularity: rng.random_range(0.0..=cfg.max_irregularity),
            nodule_type: NoduleType::Solid,
            margin,
        };
        let volume = lesion::synthesize_lesion(&spec, &cfg.clb)?;
        let placement = lesion::place_lesion(
            &lung,
            &volume,
            &placements,
            &mut rng,
            cfg.wall_clearance,
            cfg.max_placement_attempts,
        )?;
        let (embedded, mask) = lesion::embed_lesion(&mu, &phantom.table, &volume, &placement)?;
        mu = embedded;
        for (dst, m) in instances.iter_mut().zip(mask.values()) {
            if *m != 0.0 {
                *dst = (k + 1) as f32;
            }
        }
        placements.push(placement.clone());
        lesions.push((spec, volume, placement));
    }
    let instances = mu.with_values(VolumeKind::Mask, instances)?;
    Ok(LesionedTwin {
        phantom,
        lung,
        mu,
        instances,
        lesions,
    })
}

fn run_twin(cfg: &PipelineConfig, model: &LogisticModel, twin: usize) -> Result<Vec<Annotation>> {
    let ts = twin_seed(cfg.seed, twin);
    let t = build_twin(cfg, twin)?;
    let meta = &t.phantom.meta;

    let mut base = Vec::with_capacity(t.lesions.len());
    for (k, (spec, volume, placement)) in t.lesions.iter().enumerate() {
        let features = NoduleFeatures {
            age: meta.age,
            sex: meta.sex,
            size: volume.diameter_measured,
            margin: spec.margin,
            location: labeler::location_from_z(&t.lung, placement.center_mm[2]),
            nodule_type: spec.nodule_type,
        };
        let mut rng = seed::stream(ts, &[seed::tag("label"), k as u64]);
        let labeled = labeler::assign_label(&features, model, cfg.threshold, &mut rng, cfg.label_mode);
        let half = placement.radius_mm.max(0.5 * volume.diameter_measured);
        let (bbox_min, bbox_max) = Annotation::cube_bbox(placement.center_mm, 2.0 * half);
        base.push(Annotation {
            scan_id: String::new(),
            lesion_id: spec.lesion_id.clone(),
            center_mm: placement.center_mm,
            diameter_mm: volume.diameter_measured,
            bbox_min,
            bbox_max,
            mask_path: String::new(),
            probability: labeled.probability,
            label: labeled.label,
            scanner: String::new(),
            filter_cutoff: 0.0,
        });
    }

    let slices = ct::all_slices(&t.mu);
    let mut rows = Vec::new();
    for (si, scanner) in cfg.scanner_configs().into_iter().enumerate() {
        let opts = ScanOptions {
            seed: seed::mix(ts, &[seed::tag("scan"), si as u64]),
            spr: cfg.spr,
            noise: true,
            out_dims: cfg.recon_dims,
            out_spacing: cfg.out_spacing,
            mu_water: t.phantom.table.mu_water(),
        };
        let sino = ct::acquire(&t.mu, &scanner, &slices, &opts)?;
        let mut mask: Option<VoxelVolume> = None;
        for &cutoff in &cfg.filter_cutoffs {
            let recon = ct::reconstruct(&sino, cutoff, &opts)?;
            let grid = &recon.volume;
            let mask = mask.get_or_insert_with(|| {
                dataset::resample_onto(&t.instances, grid.dims(), grid.spacing(), grid.origin(), 0.0)
                    .expect("recon grid is valid")
            });
            let id = scan_id(twin, &scanner.name, cutoff);
            rows.extend(dataset::export_scan(&id, &recon, mask, &base, &cfg.output_dir)?);
            info!("twin {twin}: exported {id}");
        }
    }
    Ok(rows)
}

fn load_model(cfg: &PipelineConfig) -> Result<LogisticModel> {
    match &cfg.label_model_path {
        Some(p) => LogisticModel::load(p),
        None => Ok(LogisticModel::default()),
    }
}

/// Run every twin and write the manifest and `dataset.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let model = load_model(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;

    let work = || -> Vec<(usize, Result<Vec<Annotation>>)> {
        (0..cfg.n_twins)
            .into_par_iter()
            .map(|i| (i, run_twin(cfg, &model, i)))
            .collect()
    };
    let results = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?
            .install(work),
        None => work(),
    };

    let mut manifest = Manifest {
        rows: Vec::new(),
        dataset_seed: cfg.seed,
        tool_version: TOOL_VERSION.to_string(),
    };
    let mut failed = Vec::new();
    let mut n_ok = 0;
    for (i, r) in results {
        match r {
            Ok(rows) => {
                n_ok += 1;
                manifest.rows.extend(rows);
            }
            Err(e) => {
                warn!("twin {i} failed: {e}");
                failed.push((i, e.to_string()));
            }
        }
    }
    manifest.sort();
    let n_scans = n_ok * cfg.n_scans_per_twin();
    let n_lesions = manifest.rows.len() / cfg.n_scans_per_twin();
    dataset::write_manifest(&manifest, &cfg.output_dir.join("manifest.csv"))?;
    let info = DatasetInfo {
        dataset_seed: cfg.seed,
        tool_version: TOOL_VERSION.to_string(),
        scanners: cfg.scanner_configs(),
        filter_cutoffs: cfg.filter_cutoffs.clone(),
        n_scans,
        n_lesions,
        coordinates: "world millimetres, volume header frame".into(),
    };
    dataset::write_dataset_info(&info, &cfg.output_dir.join("dataset.json"))?;
    Ok(PipelineReport {
        manifest,
        n_scans,
        n_lesions,
        failed_twins: failed,
    })
}
