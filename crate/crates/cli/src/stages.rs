//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use synlungs_core::ct::{self, builtin_scanner, ReconVolume, ScanOptions};
use synlungs_core::dataset::{self, Annotation, Manifest, PatchOptions, PATCH_SPACING};
use synlungs_core::io::{self, Sidecar};
use synlungs_core::labeler::{self, Label, LogisticModel, NoduleFeatures};
use synlungs_core::lesion::{self, LesionSpec, LesionVolume, Margin, NoduleType, PlacementResult};
use synlungs_core::metrics;
use synlungs_core::phantom::{self, MaterialTable, Sex};
use synlungs_core::pipeline::{self, PipelineConfig};
use synlungs_core::seed;
use synlungs_core::{VolumeKind, VoxelVolume, TOOL_VERSION};

use crate::{Cli, Command, CtCmd, ExportCmd, LesionCmd, Outcome, PhantomCmd, PipelineCmd, QcCmd};

/// Bad command-line usage that clap cannot catch on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> std::result::Result<[T; N], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected {N} comma-separated values, got {s:?}"))
}

pub fn parse_usize2(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_list(s)
}

pub fn parse_usize3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s)
}

pub fn parse_f64_3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_list(s)
}

pub fn parse_margin(s: &str) -> std::result::Result<Margin, String> {
    match s.to_ascii_lowercase().as_str() {
        "smooth" => Ok(Margin::Smooth),
        "lobulated" => Ok(Margin::Lobulated),
        "spiculated" => Ok(Margin::Spiculated),
        _ => Err(format!("unknown margin {s:?} (smooth, lobulated, spiculated)")),
    }
}

/// One nodule as written by `lesion embed` and read by `label`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRow {
    pub lesion_id: String,
    pub age: f64,
    pub sex: Sex,
    pub size: f64,
    pub margin: Margin,
    pub location: labeler::Location,
    pub nodule_type: NoduleType,
    pub center_x: f64,
    pub center_y: f64,
    pub center_z: f64,
    pub radius_mm: f64,
}

impl FeatureRow {
    fn features(&self) -> NoduleFeatures {
        NoduleFeatures {
            age: self.age,
            sex: self.sex,
            size: self.size,
            margin: self.margin,
            location: self.location,
            nodule_type: self.nodule_type,
        }
    }
}

/// One labelled nodule as written by `label` and read by `export scan`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRow {
    pub lesion_id: String,
    pub center_x: f64,
    pub center_y: f64,
    pub center_z: f64,
    pub size: f64,
    pub radius_mm: f64,
    pub probability: f64,
    pub label: Label,
    pub threshold_used: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// `<dir>/<stem><suffix>` for a volume path.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn extra<T: for<'de> Deserialize<'de>>(sidecar: &Sidecar, key: &str, path: &Path) -> Result<T> {
    let v = sidecar
        .extra
        .get(key)
        .ok_or_else(|| anyhow!("{} has no {key:?} in its sidecar", path.display()))?;
    serde_json::from_value(v.clone()).with_context(|| format!("{}: field {key:?}", path.display()))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => pipeline::parse_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Phantom(PhantomCmd::Gen(a)) => phantom_gen(&cfg, a),
        Command::Lesion(LesionCmd::Synth(a)) => lesion_synth(&cfg, a),
        Command::Lesion(LesionCmd::Embed(a)) => lesion_embed(&cfg, a),
        Command::Ct(CtCmd::Simulate(a)) => ct_simulate(&cfg, a),
        Command::Label(a) => label(&cfg, a),
        Command::Export(ExportCmd::Scan(a)) => export_scan(&cfg, a),
        Command::Export(ExportCmd::Patches(a)) => export_patches(a),
        Command::Qc(QcCmd::Dice(a)) => qc_dice(a),
        Command::Pipeline(PipelineCmd::Run(a)) => pipeline_run(cfg, a),
    }
}

fn phantom_gen(cfg: &PipelineConfig, a: crate::PhantomGenArgs) -> Result<Outcome> {
    let dims = a.dims.unwrap_or(cfg.phantom_dims);
    let spacing = a.spacing.unwrap_or(cfg.phantom_spacing);
    let mut p = phantom::generate_chest_phantom(seed::mix(cfg.seed, &[seed::tag("phantom")]), dims, spacing)?;
    p.table = MaterialTable::at_energy(cfg.effective_kev)?;
    phantom::save_phantom(&p, &a.out)?;
    info!(
        "phantom {:?} at {:?} mm: age {:.0}, sex {:?}, bmi {:.1} -> {}",
        dims,
        spacing,
        p.meta.age,
        p.meta.sex,
        p.meta.bmi,
        a.out.display()
    );
    Ok(Outcome::Done)
}

fn lesion_synth(cfg: &PipelineConfig, a: crate::LesionSynthArgs) -> Result<Outcome> {
    let key = seed::tag(&a.id);
    let diameter = match a.diameter {
        Some(d) => d,
        None => {
            let mut rng = seed::stream(cfg.seed, &[seed::tag("size"), key]);
            lesion::sample_size(&cfg.gamma, &mut rng)?
        }
    };
    let spec = LesionSpec {
        lesion_id: a.id.clone(),
        diameter,
        shape_seed: seed::mix(cfg.seed, &[seed::tag("shape"), key]),
        texture_seed: seed::mix(cfg.seed, &[seed::tag("texture"), key]),
        shape_irregularity: a.irregularity,
        nodule_type: NoduleType::Solid,
        margin: a.margin,
    };
    let lv = lesion::synthesize_lesion(&spec, &cfg.clb)?;
    let mask_path = sibling(&a.out, "_mask.mhd");
    let mut sc = Sidecar::default();
    sc.extra.insert("lesion".into(), serde_json::to_value(&spec)?);
    sc.extra.insert("diameter_measured".into(), lv.diameter_measured.into());
    sc.extra.insert("bounding_radius".into(), lv.bounding_radius.into());
    sc.extra.insert(
        "mask".into(),
        mask_path.file_name().unwrap().to_string_lossy().into_owned().into(),
    );
    io::save_volume_with(&lv.hu, &a.out, sc)?;
    io::save_volume(&lv.mask, &mask_path)?;
    info!(
        "lesion {}: target {:.2} mm, measured {:.2} mm, {} voxels -> {}",
        a.id,
        diameter,
        lv.diameter_measured,
        lv.voxel_count(),
        a.out.display()
    );
    Ok(Outcome::Done)
}

fn load_lesion(path: &Path) -> Result<(LesionSpec, LesionVolume)> {
    let (hu, sc) = io::load_volume_with(path)?;
    let spec: LesionSpec = extra(&sc, "lesion", path)?;
    let mask_name: String = extra(&sc, "mask", path)?;
    let mask = io::load_volume(&path.with_file_name(mask_name))?;
    let lv = LesionVolume {
        hu,
        mask,
        diameter_measured: extra(&sc, "diameter_measured", path)?,
        bounding_radius: extra(&sc, "bounding_radius", path)?,
    };
    Ok((spec, lv))
}

fn lesion_embed(cfg: &PipelineConfig, a: crate::LesionEmbedArgs) -> Result<Outcome> {
    if !a.centers.is_empty() && a.centers.len() != a.lesions.len() {
        return Err(usage(format!(
            "{} --center values for {} lesions",
            a.centers.len(),
            a.lesions.len()
        )));
    }
    let ph = phantom::load_phantom(&a.phantom)?;
    let lung = phantom::lung_mask(&ph.labels, &ph.meta);
    let mut mu = phantom::materialize_attenuation(&ph.labels, &ph.table)?;
    let mut instances = vec![0f32; mu.len()];
    let mut rng = seed::stream(cfg.seed, &[seed::tag("placement")]);
    let mut placements: Vec<PlacementResult> = Vec::new();
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (k, path) in a.lesions.iter().enumerate() {
        let (spec, lv) = load_lesion(path)?;
        let placement = match a.centers.get(k) {
            Some(&c) => {
                let v = mu
                    .voxel_at(c)
                    .ok_or_else(|| usage(format!("centre {c:?} is outside the phantom")))?;
                PlacementResult {
                    center_voxel: v,
                    center_mm: mu.world(v),
                    attempts_used: 0,
                    radius_mm: lv.bounding_radius,
                }
            }
            None => lesion::place_lesion(
                &lung,
                &lv,
                &placements,
                &mut rng,
                cfg.wall_clearance,
                cfg.max_placement_attempts,
            )
            .with_context(|| format!("placing {}", spec.lesion_id))?,
        };
        let (embedded, mask) = lesion::embed_lesion(&mu, &ph.table, &lv, &placement)?;
        mu = embedded;
        for (dst, m) in instances.iter_mut().zip(mask.values()) {
            if *m != 0.0 {
                *dst = (k + 1) as f32;
            }
        }
        let c = placement.center_mm;
        rows.push(FeatureRow {
            lesion_id: spec.lesion_id.clone(),
            age: ph.meta.age,
            sex: ph.meta.sex,
            size: lv.diameter_measured,
            margin: spec.margin,
            location: labeler::location_from_z(&lung, c[2]),
            nodule_type: spec.nodule_type,
            center_x: c[0],
            center_y: c[1],
            center_z: c[2],
            radius_mm: placement.radius_mm,
        });
        info!("{} at ({:.1}, {:.1}, {:.1}) mm", spec.lesion_id, c[0], c[1], c[2]);
        ids.push(spec.lesion_id);
        placements.push(placement);
    }
    let instances = mu.with_values(VolumeKind::Mask, instances)?;

    let mut sc = Sidecar::default();
    sc.extra.insert("materials".into(), serde_json::to_value(&ph.table)?);
    io::save_volume_with(&mu, &a.out, sc)?;
    let mut msc = Sidecar::default();
    msc.extra.insert("lesion_ids".into(), serde_json::to_value(&ids)?);
    io::save_volume_with(&instances, &sibling(&a.out, "_mask.mhd"), msc)?;
    write_rows(&sibling(&a.out, "_features.csv"), &rows)?;
    Ok(Outcome::Done)
}

fn ct_simulate(cfg: &PipelineConfig, a: crate::CtSimulateArgs) -> Result<Outcome> {
    let (vol, sc) = io::load_volume_with(&a.input)?;
    let (mu, mu_water) = match vol.kind() {
        VolumeKind::MaterialLabel => {
            let ph = phantom::load_phantom(&a.input)?;
            let mu = phantom::materialize_attenuation(&ph.labels, &ph.table)?;
            (mu, ph.table.mu_water())
        }
        VolumeKind::Attenuation => {
            let table: MaterialTable = match sc.extra.get("materials") {
                Some(_) => extra(&sc, "materials", &a.input)?,
                None => MaterialTable::default(),
            };
            (vol, table.mu_water())
        }
        other => bail!(
            "{}: cannot scan a {} volume; give attenuation or material labels",
            a.input.display(),
            other.as_str()
        ),
    };
    let cutoff = a.filter.cutoff();
    let mut scanner = builtin_scanner(a.scanner).with_cutoff(cutoff);
    scanner.n_views = a.views.unwrap_or(cfg.n_views);
    scanner.i0 = a.i0.unwrap_or(cfg.i0);
    scanner.validate()?;
    let [nx, ny, _] = mu.dims();
    let opts = ScanOptions {
        seed: seed::mix(cfg.seed, &[seed::tag("scan")]),
        spr: a.spr.unwrap_or(cfg.spr),
        noise: !a.no_noise,
        out_dims: a.recon_dims.unwrap_or([nx, ny]),
        out_spacing: a.out_spacing.unwrap_or(mu.spacing()[0]),
        mu_water,
    };
    let sino = ct::acquire(&mu, &scanner, &ct::all_slices(&mu), &opts)?;
    if let Some(p) = &a.sinogram {
        io::save_volume(&sino.to_volume()?, p)?;
    }
    let recon = ct::reconstruct(&sino, cutoff, &opts)?;
    io::save_volume_with(&recon.volume, &a.out, recon_sidecar(&recon))?;
    info!(
        "{} {} i0 {:e}, {} views -> {}",
        scanner.name,
        a.filter,
        scanner.i0,
        scanner.n_views,
        a.out.display()
    );
    Ok(Outcome::Done)
}

fn recon_sidecar(r: &ReconVolume) -> Sidecar {
    let mut sc = Sidecar::default();
    sc.extra.insert("scanner".into(), r.scanner.clone().into());
    sc.extra.insert("filter_cutoff".into(), r.cutoff.into());
    sc.extra.insert("i0".into(), r.i0.into());
    sc.extra.insert("seed".into(), r.seed.into());
    sc
}

fn label(cfg: &PipelineConfig, a: crate::LabelArgs) -> Result<Outcome> {
    let model = match a.model.as_ref().or(cfg.label_model_path.as_ref()) {
        Some(p) => LogisticModel::load(p)?,
        None => LogisticModel::default(),
    };
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(format!("--threshold must be in [0, 1], got {threshold}")));
    }
    let mode = a.mode.unwrap_or(cfg.label_mode);
    let rows: Vec<FeatureRow> = read_rows(&a.input)?;
    let mut out = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        let f = r.features();
        f.validate().with_context(|| format!("row for {}", r.lesion_id))?;
        let mut rng = seed::stream(cfg.seed, &[seed::tag("label"), k as u64]);
        let l = labeler::assign_label(&f, &model, threshold, &mut rng, mode);
        out.push(LabelRow {
            lesion_id: r.lesion_id.clone(),
            center_x: r.center_x,
            center_y: r.center_y,
            center_z: r.center_z,
            size: r.size,
            radius_mm: r.radius_mm,
            probability: l.probability,
            label: l.label,
            threshold_used: l.threshold_used,
        });
    }
    write_rows(&a.out, &out)?;
    if let Some(p) = &a.save_model {
        model.save(p)?;
    }
    let n_mal = out.iter().filter(|r| r.label == Label::Malignant).count();
    info!("{} nodules, {n_mal} malignant -> {}", out.len(), a.out.display());
    Ok(Outcome::Done)
}

fn export_scan(cfg: &PipelineConfig, a: crate::ExportScanArgs) -> Result<Outcome> {
    let (volume, sc) = io::load_volume_with(&a.volume)?;
    let recon = ReconVolume {
        scanner: extra(&sc, "scanner", &a.volume)?,
        cutoff: extra(&sc, "filter_cutoff", &a.volume)?,
        i0: extra(&sc, "i0", &a.volume)?,
        seed: extra(&sc, "seed", &a.volume)?,
        volume,
    };
    let (instances, msc) = io::load_volume_with(&a.mask)?;
    let ids: Vec<String> = extra(&msc, "lesion_ids", &a.mask)?;
    let g = &recon.volume;
    let mask = dataset::resample_onto(&instances, g.dims(), g.spacing(), g.origin(), 0.0)?;

    let labels: BTreeMap<String, LabelRow> = read_rows::<LabelRow>(&a.labels)?
        .into_iter()
        .map(|r| (r.lesion_id.clone(), r))
        .collect();
    let mut base = Vec::with_capacity(ids.len());
    for id in &ids {
        let r = labels
            .get(id)
            .ok_or_else(|| anyhow!("{} has no row for lesion {id}", a.labels.display()))?;
        let center = [r.center_x, r.center_y, r.center_z];
        let (bbox_min, bbox_max) = Annotation::cube_bbox(center, 2.0 * r.radius_mm.max(0.5 * r.size));
        base.push(Annotation {
            scan_id: String::new(),
            lesion_id: id.clone(),
            center_mm: center,
            diameter_mm: r.size,
            bbox_min,
            bbox_max,
            mask_path: String::new(),
            probability: r.probability,
            label: r.label,
            scanner: String::new(),
            filter_cutoff: 0.0,
        });
    }
    let rows = dataset::export_scan(&a.scan_id, &recon, &mask, &base, &a.out_dir)?;

    let manifest_path = a.out_dir.join("manifest.csv");
    let mut manifest = if manifest_path.exists() {
        dataset::read_manifest(&manifest_path)?
    } else {
        Manifest {
            rows: Vec::new(),
            dataset_seed: cfg.seed,
            tool_version: TOOL_VERSION.to_string(),
        }
    };
    manifest.rows.retain(|r| r.scan_id != a.scan_id);
    manifest.rows.extend(rows);
    manifest.sort();
    dataset::write_manifest(&manifest, &manifest_path)?;
    info!("{} with {} lesions -> {}", a.scan_id, ids.len(), a.out_dir.display());
    Ok(Outcome::Done)
}

fn export_patches(a: crate::ExportPatchesArgs) -> Result<Outcome> {
    let manifest = dataset::read_manifest(&a.dataset.join("manifest.csv"))?;
    dataset::check_closure(&a.dataset, &manifest)?;
    let out = a.out.unwrap_or_else(|| a.dataset.join("patches"));
    let opts = PatchOptions {
        standardize: !a.no_standardize,
        ..PatchOptions::default()
    };
    let mut n = 0;
    for scan in manifest.scan_ids() {
        let vol = io::load_volume(&dataset::volume_path(&a.dataset, scan))?;
        let vol: VoxelVolume = dataset::resample_volume(&vol, PATCH_SPACING)?;
        for r in manifest.rows.iter().filter(|r| r.scan_id == scan) {
            let patch = dataset::extract_patch(&vol, r.center_mm, &opts)?;
            io::save_volume(&patch, &out.join(format!("{scan}_{}.mhd", r.lesion_id)))?;
            n += 1;
        }
    }
    info!("{n} patches -> {}", out.display());
    Ok(Outcome::Done)
}

fn qc_dice(a: crate::DiceArgs) -> Result<Outcome> {
    let pred = io::load_volume(&a.pred)?;
    let truth = io::load_volume(&a.truth)?;
    let r = metrics::dice(&pred, &truth)?;
    println!(
        "dice {:.6} (intersection {}, pred {}, truth {})",
        r.dice, r.intersection_voxels, r.a_voxels, r.b_voxels
    );
    Ok(Outcome::Done)
}

fn pipeline_run(mut cfg: PipelineConfig, a: crate::PipelineRunArgs) -> Result<Outcome> {
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let report = pipeline::run_pipeline(&cfg)?;
    println!(
        "{} scans, {} lesions, {} twins failed -> {}",
        report.n_scans,
        report.n_lesions,
        report.failed_twins.len(),
        cfg.output_dir.display()
    );
    if report.failed_twins.is_empty() {
        Ok(Outcome::Done)
    } else {
        let which: Vec<String> = report
            .failed_twins
            .iter()
            .map(|(i, e)| format!("twin {i}: {e}"))
            .collect();
        Ok(Outcome::Partial(format!(
            "{} of {} twins failed ({})",
            report.failed_twins.len(),
            cfg.n_twins,
            which.join("; ")
        )))
    }
}
