//! Material-labelled chest phantoms.
//!
//! The procedural phantom is a closed-form stand-in for a segmented patient
//! model: a soft-tissue body ellipsoid, two lung ellipsoids, a bone spine
//! cylinder and a handful of short vessel segments inside each lung. All
//! dimensions are fixed fractions of the grid extent with a small seeded
//! jitter, so the same `(seed, dims, spacing)` always yields the same labels.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Sidecar};
use crate::seed;
use crate::volume::{centered_origin, VolumeKind, VoxelVolume};

pub const AIR: u8 = 0;
pub const LUNG: u8 = 1;
pub const SOFT_TISSUE: u8 = 2;
pub const BONE: u8 = 3;
pub const WATER: u8 = 4;

/// Default monochromatic effective energy in keV.
pub const DEFAULT_EFFECTIVE_KEV: f64 = 60.0;

/// Smallest grid edge accepted by [`generate_chest_phantom`].
pub const MIN_PHANTOM_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub label: u8,
    pub name: String,
    /// Linear attenuation in 1/mm at the table's effective energy.
    pub mu: f64,
    pub hu_nominal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    pub effective_kev: f64,
    pub entries: Vec<Material>,
}

// Mass attenuation coefficients (cm²/g) from the NIST XCOM/X-ray mass
// attenuation tables at 40, 50, 60, 80, 100 keV, with the density (g/cm³)
// assigned to each material.
const KEV_GRID: [f64; 5] = [40.0, 50.0, 60.0, 80.0, 100.0];
const MASS_ATTENUATION: [(u8, &str, f64, [f64; 5]); 4] = [
    (LUNG, "lung", 0.26, [0.2660, 0.2246, 0.2034, 0.1812, 0.1683]),
    (SOFT_TISSUE, "soft_tissue", 1.06, [0.2688, 0.2264, 0.2048, 0.1823, 0.1693]),
    (BONE, "bone", 1.92, [0.6655, 0.4242, 0.3148, 0.2229, 0.1855]),
    (WATER, "water", 1.0, [0.2683, 0.2269, 0.2059, 0.1837, 0.1707]),
];

fn loglog_interp(kev: f64, ys: &[f64; 5]) -> f64 {
    let i = KEV_GRID
        .windows(2)
        .position(|w| kev <= w[1])
        .unwrap_or(KEV_GRID.len() - 2);
    let (x0, x1) = (KEV_GRID[i].ln(), KEV_GRID[i + 1].ln());
    let (y0, y1) = (ys[i].ln(), ys[i + 1].ln());
    (y0 + (kev.ln() - x0) * (y1 - y0) / (x1 - x0)).exp()
}

impl MaterialTable {
    /// Built-in five-material table at `kev` (40–100 keV). Air is taken as
    /// exactly zero attenuation.
    pub fn at_energy(kev: f64) -> Result<Self> {
        if !(KEV_GRID[0]..=KEV_GRID[4]).contains(&kev) {
            return Err(Error::InvalidParameter(format!(
                "effective energy {kev} keV outside the tabulated 40-100 keV range"
            )));
        }
        let mu_of = |rho: f64, table: &[f64; 5]| loglog_interp(kev, table) * rho * 0.1;
        let water_mu = mu_of(1.0, &MASS_ATTENUATION[3].3);
        let mut entries = vec![Material {
            label: AIR,
            name: "air".into(),
            mu: 0.0,
            hu_nominal: -1000.0,
        }];
        for (label, name, rho, table) in MASS_ATTENUATION {
            let mu = mu_of(rho, &table);
            entries.push(Material {
                label,
                name: name.into(),
                mu,
                hu_nominal: 1000.0 * (mu - water_mu) / water_mu,
            });
        }
        Self::new(kev, entries)
    }

    pub fn new(effective_kev: f64, entries: Vec<Material>) -> Result<Self> {
        let t = MaterialTable {
            effective_kev,
            entries,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in &self.entries {
            if !seen.insert(m.label) {
                return Err(Error::InvalidMaterialTable(format!("duplicate label {}", m.label)));
            }
            if !(m.mu >= 0.0 && m.mu.is_finite()) {
                return Err(Error::InvalidMaterialTable(format!("{}: mu must be >= 0", m.name)));
            }
        }
        for required in [AIR, LUNG, SOFT_TISSUE, BONE, WATER] {
            if !seen.contains(&required) {
                return Err(Error::InvalidMaterialTable(format!(
                    "missing required label {required}"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, label: u8) -> Option<&Material> {
        self.entries.iter().find(|m| m.label == label)
    }

    pub fn mu(&self, label: u8) -> Option<f64> {
        self.get(label).map(|m| m.mu)
    }

    pub fn mu_water(&self) -> f64 {
        self.mu(WATER).expect("validated table has water")
    }

    /// Dense lookup from label to mu, `None` for labels not in the table.
    fn lookup(&self) -> [Option<f32>; 256] {
        let mut lut = [None; 256];
        for m in &self.entries {
            lut[m.label as usize] = Some(m.mu as f32);
        }
        lut
    }
}

impl Default for MaterialTable {
    fn default() -> Self {
        Self::at_energy(DEFAULT_EFFECTIVE_KEV).expect("default energy is tabulated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMetadata {
    pub twin_id: String,
    pub age: f64,
    pub sex: Sex,
    pub bmi: f64,
    pub lung_labels: BTreeSet<u8>,
}

impl PhantomMetadata {
    pub fn validate(&self) -> Result<()> {
        if !(self.age > 0.0) || !(self.bmi > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "phantom metadata needs age > 0 and bmi > 0 (age {}, bmi {})",
                self.age, self.bmi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChestPhantom {
    pub labels: VoxelVolume,
    pub table: MaterialTable,
    pub meta: PhantomMetadata,
}

/// Check that every voxel of a label volume is present in `table`.
pub fn check_labels(labels: &VoxelVolume, table: &MaterialTable) -> Result<()> {
    if labels.kind() != VolumeKind::MaterialLabel {
        return Err(Error::InvalidVolume(format!(
            "expected material labels, got {}",
            labels.kind().as_str()
        )));
    }
    let lut = table.lookup();
    for &v in labels.values() {
        if v > 255.0 || lut[v as usize].is_none() {
            return Err(Error::UnknownLabel(v as i64));
        }
    }
    Ok(())
}

/// Replace each label with its attenuation coefficient.
pub fn materialize_attenuation(labels: &VoxelVolume, table: &MaterialTable) -> Result<VoxelVolume> {
    check_labels(labels, table)?;
    let lut = table.lookup();
    let values = labels
        .values()
        .iter()
        .map(|&v| lut[v as usize].expect("checked"))
        .collect();
    labels.with_values(VolumeKind::Attenuation, values)
}

/// Binary mask of voxels whose label is in the metadata's lung label set.
pub fn lung_mask(labels: &VoxelVolume, meta: &PhantomMetadata) -> VoxelVolume {
    let values = labels
        .values()
        .iter()
        .map(|&v| {
            let inside = (0.0..=255.0).contains(&v) && meta.lung_labels.contains(&(v as u8));
            inside as u8 as f32
        })
        .collect();
    labels
        .with_values(VolumeKind::Mask, values)
        .expect("same grid, binary values")
}

/// Geometry fractions of the procedural phantom, relative to the grid extent.
mod geometry {
    pub const BODY_SEMI: [f64; 3] = [0.46, 0.36, 0.75];
    pub const LUNG_OFFSET_X: f64 = 0.20;
    pub const LUNG_OFFSET_Y: f64 = 0.02;
    pub const LUNG_SEMI: [f64; 3] = [0.14, 0.22, 0.40];
    pub const SPINE_Y: f64 = -0.27;
    pub const SPINE_RADIUS: f64 = 0.055;
    /// Relative jitter applied to lung and body dimensions.
    pub const JITTER: f64 = 0.05;
    pub const VESSELS_PER_LUNG: usize = 6;
    /// Vessels stay inside the lung ellipsoid scaled by this factor.
    pub const VESSEL_CORE: f64 = 0.65;
    pub const VESSEL_RADIUS_MM: (f64, f64) = (0.8, 1.6);
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn scaled(&self, f: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            semi: self.semi.map(|s| s * f),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Segment {
    fn distance(&self, p: [f64; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|i| self.b[i] - self.a[i]);
        let w: [f64; 3] = std::array::from_fn(|i| p[i] - self.a[i]);
        let dd: f64 = d.iter().map(|x| x * x).sum();
        let t = if dd > 0.0 {
            (w.iter().zip(&d).map(|(x, y)| x * y).sum::<f64>() / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3)
            .map(|i| (p[i] - self.a[i] - t * d[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Generate a procedural chest phantom. Pure in `(seed, dims, spacing)`.
pub fn generate_chest_phantom(seed: u64, dims: [usize; 3], spacing: [f64; 3]) -> Result<ChestPhantom> {
    use geometry::*;

    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::DimsTooSmall {
            dims,
            reason: format!("every dimension must be >= {MIN_PHANTOM_DIM}"),
        });
    }
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!("spacing must be > 0, got {spacing:?}")));
    }
    let ext: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * spacing[a]);

    let mut rng = seed::stream(seed, &[seed::tag("phantom")]);
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng| 1.0 + rng.random_range(-JITTER..=JITTER);

    let body = Ellipsoid {
        center: [0.0; 3],
        semi: std::array::from_fn(|a| BODY_SEMI[a] * ext[a] * if a < 2 { jitter(&mut rng) } else { 1.0 }),
    };
    let lungs: Vec<Ellipsoid> = [-1.0, 1.0]
        .into_iter()
        .map(|side| Ellipsoid {
            center: [
                side * LUNG_OFFSET_X * ext[0] * jitter(&mut rng),
                LUNG_OFFSET_Y * ext[1],
                0.0,
            ],
            semi: std::array::from_fn(|a| LUNG_SEMI[a] * ext[a] * jitter(&mut rng)),
        })
        .collect();
    let spine_radius = SPINE_RADIUS * ext[0].min(ext[1]);
    let spine_center = [0.0, SPINE_Y * ext[1]];

    let min_spacing = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let (rmin, rmax) = VESSEL_RADIUS_MM;
    let mut vessels = Vec::new();
    for lung in &lungs {
        let core = lung.scaled(VESSEL_CORE);
        let mut placed = 0;
        while placed < VESSELS_PER_LUNG {
            let a: [f64; 3] = std::array::from_fn(|i| {
                core.center[i] + rng.random_range(-1.0..1.0) * core.semi[i]
            });
            let len = rng.random_range(0.3..0.6) * lung.semi[1];
            let dir = random_unit(&mut rng);
            let b: [f64; 3] = std::array::from_fn(|i| a[i] + len * dir[i]);
            let radius = rng.random_range(rmin..rmax).max(0.6 * min_spacing);
            if core.contains(a) && core.contains(b) {
                vessels.push(Segment { a, b, radius });
                placed += 1;
            }
        }
    }

    let origin = centered_origin(dims, spacing);
    let mut values = vec![AIR as f32; dims.iter().product()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [
                    origin[0] + i as f64 * spacing[0],
                    origin[1] + j as f64 * spacing[1],
                    origin[2] + k as f64 * spacing[2],
                ];
                let mut label = AIR;
                if body.contains(p) {
                    label = SOFT_TISSUE;
                    let dx = p[0] - spine_center[0];
                    let dy = p[1] - spine_center[1];
                    if dx * dx + dy * dy <= spine_radius * spine_radius {
                        label = BONE;
                    } else if lungs.iter().any(|l| l.contains(p)) {
                        label = if vessels.iter().any(|v| v.distance(p) <= v.radius) {
                            SOFT_TISSUE
                        } else {
                            LUNG
                        };
                    }
                }
                values[i + dims[0] * (j + dims[1] * k)] = label as f32;
            }
        }
    }
    let labels = VoxelVolume::new(dims, spacing, origin, VolumeKind::MaterialLabel, values)?;

    let mut demo = seed::stream(seed, &[seed::tag("demographics")]);
    let age = Normal::new(59.0f64, 15.0).unwrap().sample(&mut demo).clamp(30.0, 90.0);
    let sex = if demo.random_bool(0.546) { Sex::M } else { Sex::F };
    let bmi = Normal::new(26.0f64, 6.0).unwrap().sample(&mut demo).clamp(16.0, 45.0);
    let meta = PhantomMetadata {
        twin_id: format!("twin-{seed:016x}"),
        age,
        sex,
        bmi,
        lung_labels: BTreeSet::from([LUNG]),
    };

    let phantom = ChestPhantom {
        labels,
        table: MaterialTable::default(),
        meta,
    };
    let lung = lung_mask(&phantom.labels, &phantom.meta);
    let lung_components = count_components(&lung);
    if lung_components != 2 {
        return Err(Error::DimsTooSmall {
            dims,
            reason: format!("lungs resolved into {lung_components} components instead of 2"),
        });
    }
    Ok(phantom)
}

pub(crate) fn random_unit<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return v.map(|x| x / n);
        }
    }
}

/// Number of 6-connected components of nonzero voxels.
pub fn count_components(mask: &VoxelVolume) -> usize {
    let [nx, ny, nz] = mask.dims();
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if seen[start] || mask.values()[start] == 0.0 {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let [i, j, k] = mask.coords(idx);
            let mut visit = |ii: usize, jj: usize, kk: usize| {
                let n = mask.index(ii, jj, kk);
                if !seen[n] && mask.values()[n] != 0.0 {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if i > 0 { visit(i - 1, j, k) }
            if i + 1 < nx { visit(i + 1, j, k) }
            if j > 0 { visit(i, j - 1, k) }
            if j + 1 < ny { visit(i, j + 1, k) }
            if k > 0 { visit(i, j, k - 1) }
            if k + 1 < nz { visit(i, j, k + 1) }
        }
    }
    count
}

/// Save the label volume with metadata and material table in the sidecar.
pub fn save_phantom(phantom: &ChestPhantom, path: &Path) -> Result<()> {
    let mut sidecar = Sidecar::default();
    sidecar
        .extra
        .insert("phantom".into(), serde_json::to_value(&phantom.meta)?);
    sidecar
        .extra
        .insert("materials".into(), serde_json::to_value(&phantom.table)?);
    io::save_volume_with(&phantom.labels, path, sidecar)
}

/// Load a label volume saved by [`save_phantom`]. A missing material table
/// falls back to the default; missing metadata is an error.
pub fn load_phantom(path: &Path) -> Result<ChestPhantom> {
    let (labels, sidecar) = io::load_volume_with(path)?;
    let meta: PhantomMetadata = match sidecar.extra.get("phantom") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => {
            return Err(Error::InvalidParameter(format!(
                "{} has no phantom metadata in its sidecar",
                path.display()
            )))
        }
    };
    meta.validate()?;
    let table = match sidecar.extra.get("materials") {
        Some(v) => {
            let t: MaterialTable = serde_json::from_value(v.clone())?;
            t.validate()?;
            t
        }
        None => MaterialTable::default(),
    };
    let labels = labels.with_values(VolumeKind::MaterialLabel, labels.values().to_vec())?;
    check_labels(&labels, &table)?;
    Ok(ChestPhantom { labels, table, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ChestPhantom {
        generate_chest_phantom(42, [48, 40, 32], [6.0, 6.0, 4.0]).unwrap()
    }

    #[test]
    fn water_attenuation_at_60kev() {
        let t = MaterialTable::default();
        // NIST water: 0.2059 cm²/g at 60 keV.
        assert!((t.mu_water() - 0.02059).abs() < 1e-6);
        assert_eq!(t.mu(AIR), Some(0.0));
        let lung_hu = t.get(LUNG).unwrap().hu_nominal;
        assert!((-800.0..-700.0).contains(&lung_hu), "{lung_hu}");
        assert!(t.get(BONE).unwrap().hu_nominal > 1000.0);
    }

    #[test]
    fn energy_is_configurable() {
        let lo = MaterialTable::at_energy(40.0).unwrap();
        let hi = MaterialTable::at_energy(100.0).unwrap();
        assert!(lo.mu_water() > hi.mu_water());
        assert!((lo.mu_water() - 0.02683).abs() < 1e-6);
        assert!(MaterialTable::at_energy(30.0).is_err());
    }

    #[test]
    fn table_rejects_duplicates_and_missing() {
        let mut t = MaterialTable::default();
        t.entries.push(t.entries[0].clone());
        assert!(t.validate().is_err());
        let mut t = MaterialTable::default();
        t.entries.retain(|m| m.label != BONE);
        assert!(t.validate().is_err());
    }

    #[test]
    fn single_water_voxel() {
        let t = MaterialTable::default();
        let v = VoxelVolume::filled([1, 1, 1], [1.0; 3], [0.0; 3], VolumeKind::MaterialLabel, WATER as f32)
            .unwrap();
        let mu = materialize_attenuation(&v, &t).unwrap();
        assert!((mu.values()[0] as f64 - 0.0206).abs() < 1e-4);
    }

    #[test]
    fn all_air_is_zero_attenuation() {
        let t = MaterialTable::default();
        let v = VoxelVolume::filled([3, 3, 3], [1.0; 3], [0.0; 3], VolumeKind::MaterialLabel, 0.0).unwrap();
        let mu = materialize_attenuation(&v, &t).unwrap();
        assert!(mu.values().iter().all(|&x| x == 0.0));
        assert!(mu.same_grid(&v));
    }

    #[test]
    fn unknown_label_rejected() {
        let t = MaterialTable::default();
        let v = VoxelVolume::filled([2, 1, 1], [1.0; 3], [0.0; 3], VolumeKind::MaterialLabel, 99.0).unwrap();
        assert!(matches!(materialize_attenuation(&v, &t), Err(Error::UnknownLabel(99))));
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.meta, b.meta);
        let c = generate_chest_phantom(43, [48, 40, 32], [6.0, 6.0, 4.0]).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn phantom_structure() {
        let p = small();
        let l = &p.labels;
        assert_eq!(l.get(0, 0, 0), AIR as f32);
        let lung = lung_mask(l, &p.meta);
        let n = lung.count_nonzero();
        assert!(n > 0 && n < l.len());
        assert_eq!(count_components(&lung), 2);
        assert!(l.values().contains(&(BONE as f32)));
        let c = l.dims().map(|d| d / 2);
        assert_ne!(l.get(c[0], c[1], c[2]), AIR as f32);
        check_labels(l, &p.table).unwrap();
        p.meta.validate().unwrap();
    }

    #[test]
    fn too_small_dims() {
        assert!(matches!(
            generate_chest_phantom(1, [31, 64, 64], [1.0; 3]),
            Err(Error::DimsTooSmall { .. })
        ));
    }

    #[test]
    fn lung_mask_edge_cases() {
        let p = small();
        let mut meta = p.meta.clone();
        meta.lung_labels.clear();
        assert_eq!(lung_mask(&p.labels, &meta).count_nonzero(), 0);

        let once = lung_mask(&p.labels, &p.meta);
        let relabelled = once.with_values(VolumeKind::MaterialLabel, once.values().to_vec()).unwrap();
        assert_eq!(lung_mask(&relabelled, &p.meta).values(), once.values());

        // mask = lung ellipsoids minus vessels: no vessel (soft tissue) voxel is in it
        for (m, l) in once.values().iter().zip(p.labels.values()) {
            assert_eq!(*m == 1.0, *l == LUNG as f32);
        }
    }

    #[test]
    fn relabelling_preserves_lung_count() {
        let p = small();
        let swapped = p
            .labels
            .map(VolumeKind::MaterialLabel, |v| match v as u8 {
                LUNG => 7.0,
                SOFT_TISSUE => BONE as f32,
                BONE => SOFT_TISSUE as f32,
                x => x as f32,
            })
            .unwrap();
        let mut meta = p.meta.clone();
        meta.lung_labels = BTreeSet::from([7]);
        assert_eq!(
            lung_mask(&swapped, &meta).count_nonzero(),
            lung_mask(&p.labels, &p.meta).count_nonzero()
        );
    }

    #[test]
    fn attenuation_is_monotone_in_table_mu() {
        let p = small();
        let mu = materialize_attenuation(&p.labels, &p.table).unwrap();
        for (l, m) in p.labels.values().iter().zip(mu.values()) {
            assert_eq!(*m as f64, p.table.mu(*l as u8).unwrap() as f32 as f64);
        }
    }

    #[test]
    fn phantom_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = small();
        let path = dir.path().join("twin.mhd");
        save_phantom(&p, &path).unwrap();
        let back = load_phantom(&path).unwrap();
        assert_eq!(back.labels, p.labels);
        assert_eq!(back.meta, p.meta);
        assert_eq!(back.table, p.table);
    }
}
