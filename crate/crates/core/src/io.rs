//! MetaImage volume files.
//!
//! A volume is written as three files sharing a stem: the text header
//! (`<stem>.mhd`), the little-endian payload (`<stem>.raw`) and a JSON sidecar
//! (`<stem>.json`) carrying the [`VolumeKind`] and any stage metadata. Readers
//! that only understand MetaImage can ignore the sidecar; without one, the kind
//! is inferred from the element type.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{VolumeKind, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    UChar,
    Short,
    Float,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_UCHAR" => Ok(ElementType::UChar),
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }
}

/// Contents of the JSON sidecar.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub kind: Option<VolumeKind>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Paths of the header, payload and sidecar for a given `.mhd` path.
pub fn companion_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let header = if path.extension().is_some_and(|e| e == "mhd") {
        path.to_path_buf()
    } else {
        path.with_extension("mhd")
    };
    (
        header.clone(),
        header.with_extension("raw"),
        header.with_extension("json"),
    )
}

fn element_type_for(v: &VoxelVolume) -> ElementType {
    match v.kind() {
        VolumeKind::MaterialLabel if v.values().iter().all(|&x| x <= 255.0) => ElementType::UChar,
        VolumeKind::MaterialLabel | VolumeKind::Mask => ElementType::Short,
        _ => ElementType::Float,
    }
}

fn fmt_triple<T: std::fmt::Display>(t: &[T; 3]) -> String {
    format!("{} {} {}", t[0], t[1], t[2])
}

/// Write a volume with an empty sidecar apart from its kind.
pub fn save_volume(v: &VoxelVolume, path: &Path) -> Result<()> {
    save_volume_with(v, path, Sidecar::default())
}

/// Write a volume and a sidecar. The sidecar's `kind` is always set from the volume.
pub fn save_volume_with(v: &VoxelVolume, path: &Path, mut sidecar: Sidecar) -> Result<()> {
    v.validate()?;
    let (header_path, raw_path, sidecar_path) = companion_paths(path);
    if let Some(parent) = header_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let et = element_type_for(v);
    if et == ElementType::Short {
        if let Some(x) = v.values().iter().find(|x| **x > i16::MAX as f32 || **x < i16::MIN as f32) {
            return Err(Error::InvalidVolume(format!("value {x} does not fit MET_SHORT")));
        }
    }
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidParameter(format!("bad path {}", raw_path.display())))?;
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         CompressedData = False\nOffset = {}\nElementSpacing = {}\nDimSize = {}\n\
         ElementType = {}\nElementDataFile = {}\n",
        fmt_triple(&v.origin()),
        fmt_triple(&v.spacing()),
        fmt_triple(&v.dims()),
        et.tag(),
        raw_name
    );

    let mut payload = Vec::with_capacity(v.len() * et.size());
    match et {
        ElementType::UChar => payload.extend(v.values().iter().map(|&x| x as u8)),
        ElementType::Short => {
            for &x in v.values() {
                payload.extend_from_slice(&(x as i16).to_le_bytes());
            }
        }
        ElementType::Float => {
            for &x in v.values() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    sidecar.kind = Some(v.kind());
    let sidecar_text = serde_json::to_string_pretty(&sidecar)? + "\n";

    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&sidecar_path, sidecar_text).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

/// Read a volume; the sidecar is optional.
pub fn load_volume(path: &Path) -> Result<VoxelVolume> {
    load_volume_with(path).map(|(v, _)| v)
}

/// Read a volume together with its sidecar (empty if absent).
pub fn load_volume_with(path: &Path) -> Result<(VoxelVolume, Sidecar)> {
    let (header_path, _, sidecar_path) = companion_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: header_path.clone(),
        reason,
    };

    let mut fields = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, val) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("line without '=': {line:?}")))?;
        fields.insert(k.trim().to_string(), val.trim().to_string());
    }

    let ndims = fields.get("NDims").ok_or_else(|| malformed("missing NDims".into()))?;
    if ndims != "3" {
        return Err(malformed(format!("NDims must be 3, got {ndims}")));
    }
    for key in ["BinaryDataByteOrderMSB", "ByteOrderMSB", "ElementByteOrderMSB"] {
        if let Some(v) = fields.get(key) {
            if !v.eq_ignore_ascii_case("false") {
                return Err(malformed(format!("{key} = {v}: only little-endian payloads are supported")));
            }
        }
    }
    if fields
        .get("CompressedData")
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
    {
        return Err(malformed("compressed payloads are not supported".into()));
    }
    if fields
        .get("ElementNumberOfChannels")
        .is_some_and(|v| v != "1")
    {
        return Err(malformed("multi-channel images are not supported".into()));
    }

    let dims_raw: Vec<usize> = parse_list(
        fields.get("DimSize").ok_or_else(|| malformed("missing DimSize".into()))?,
    )
    .map_err(|e| malformed(format!("DimSize: {e}")))?;
    let dims: [usize; 3] = dims_raw
        .try_into()
        .map_err(|_| malformed("DimSize must have 3 entries".into()))?;

    let spacing = triple_or(&fields, &["ElementSpacing"], 1.0).map_err(malformed)?;
    let origin = triple_or(&fields, &["Offset", "Origin", "Position"], 0.0).map_err(malformed)?;

    let et = ElementType::parse(
        fields
            .get("ElementType")
            .ok_or_else(|| malformed("missing ElementType".into()))?,
    )?;
    let data_file = fields
        .get("ElementDataFile")
        .ok_or_else(|| malformed("missing ElementDataFile".into()))?;
    if data_file == "LOCAL" || data_file.starts_with("LIST") || data_file.contains('%') {
        return Err(malformed(format!("ElementDataFile {data_file} not supported")));
    }
    let raw_path = header_path
        .parent()
        .map(|p| p.join(data_file))
        .unwrap_or_else(|| PathBuf::from(data_file));
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;

    let n: usize = dims.iter().product();
    let expected = n * et.size();
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            path: raw_path,
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = match et {
        ElementType::UChar => payload.iter().map(|&b| b as f32).collect(),
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };

    let sidecar: Sidecar = match fs::read_to_string(&sidecar_path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Sidecar::default(),
        Err(e) => return Err(Error::io(&sidecar_path, e)),
    };
    let kind = sidecar.kind.unwrap_or(match et {
        ElementType::UChar => VolumeKind::MaterialLabel,
        ElementType::Short | ElementType::Float => VolumeKind::Hu,
    });
    let v = VoxelVolume::new(dims, spacing, origin, kind, values)?;
    Ok((v, sidecar))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

fn triple_or(
    fields: &BTreeMap<String, String>,
    keys: &[&str],
    default: f64,
) -> std::result::Result<[f64; 3], String> {
    let Some(raw) = keys.iter().find_map(|k| fields.get(*k)) else {
        return Ok([default; 3]);
    };
    let list: Vec<f64> = parse_list(raw)?;
    list.try_into()
        .map_err(|_| format!("{} must have 3 entries", keys[0]))
}
