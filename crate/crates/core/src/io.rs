//! On-disk formats: raw f32 volumes with JSON sidecars, projection
//! directories, field checkpoints and run configuration files.
//!
//! All payloads are little-endian `f32`, written without headers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, RdaField};
use crate::geometry::{Aabb, ScanGeometry};
use crate::projector::ProjectionSet;
use crate::sart::SartConfig;
use crate::trainer::TrainConfig;
use crate::volume::Volume;

pub const DTYPE: &str = "f32le";
pub const ORDER: &str = "x-fastest";
pub const CHECKPOINT_FORMAT: &str = "raymarch-ct-field";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
    pub order: String,
}

/// Sidecar and payload paths for a volume name. A trailing `.json` or `.raw`
/// on `path` is ignored, so either file may be named.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".raw"))
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("payload length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let (json, raw) = volume_paths(path);
    let header = VolumeHeader {
        dims: vol.dims,
        spacing: vol.spacing.into(),
        origin: vol.origin.into(),
        dtype: DTYPE.into(),
        order: ORDER.into(),
    };
    write_json(&json, &header)?;
    write_bytes(&raw, &encode_f32(&vol.data))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (json, raw) = volume_paths(path);
    let h: VolumeHeader = read_json(&json)?;
    if h.dtype != DTYPE {
        return Err(Error::format(&json, format!("unsupported dtype {:?}, expected {DTYPE:?}", h.dtype)));
    }
    if h.order != ORDER {
        return Err(Error::format(&json, format!("unsupported order {:?}, expected {ORDER:?}", h.order)));
    }
    let bytes = read_bytes(&raw)?;
    let expected = 4 * h.dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::format(&raw, format!("payload is {} bytes, dims {:?} need {expected}", bytes.len(), h.dims)));
    }
    let data = decode_f32(&bytes, &raw)?;
    Volume::from_data(h.dims, h.spacing.into(), h.origin.into(), data).map_err(|e| Error::format(&json, e.to_string()))
}

pub fn view_file_name(view: usize) -> String {
    format!("view_{view:04}.raw")
}

pub fn write_projections(dir: &Path, p: &ProjectionSet) -> Result<()> {
    p.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("geometry.json"), &p.geom)?;
    for (v, img) in p.images.iter().enumerate() {
        write_bytes(&dir.join(view_file_name(v)), &encode_f32(img))?;
    }
    Ok(())
}

pub fn read_projections(dir: &Path) -> Result<ProjectionSet> {
    let gpath = dir.join("geometry.json");
    let geom: ScanGeometry = read_json(&gpath)?;
    geom.validate().map_err(|e| Error::format(&gpath, e.to_string()))?;
    let pixels = geom.detector_rows * geom.detector_cols;
    let mut images = Vec::with_capacity(geom.n_views);
    for v in 0..geom.n_views {
        let path = dir.join(view_file_name(v));
        let bytes = read_bytes(&path)?;
        if bytes.len() != 4 * pixels {
            return Err(Error::format(&path, format!("payload is {} bytes, expected {}", bytes.len(), 4 * pixels)));
        }
        images.push(decode_f32(&bytes, &path)?);
    }
    let extra = dir.join(view_file_name(geom.n_views));
    if extra.exists() {
        return Err(Error::format(&extra, format!("geometry declares {} views but more view files exist", geom.n_views)));
    }
    Ok(ProjectionSet { geom, images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    /// Offset into the blob in elements, not bytes.
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub field: FieldConfig,
    pub bounds: Aabb,
    pub seed: u64,
    pub n_params: usize,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Manifest and blob paths: `<name>.json` and `<name>.bin`.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut bin = base.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

pub fn write_checkpoint(path: &Path, field: &RdaField, seed: u64) -> Result<()> {
    let (json, bin) = checkpoint_paths(path);
    let tensors = field
        .layout
        .tensors(&field.config)
        .into_iter()
        .map(|(name, offset, shape)| TensorEntry { name, offset, shape })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        field: field.config.clone(),
        bounds: field.bounds,
        seed,
        n_params: field.n_params(),
        dtype: DTYPE.into(),
        blob: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors,
    };
    write_json(&json, &manifest)?;
    let params: Vec<f32> = field.params.iter().map(|&v| v as f32).collect();
    write_bytes(&bin, &encode_f32(&params))
}

pub fn read_checkpoint(path: &Path) -> Result<(RdaField, CheckpointManifest)> {
    let (json, _) = checkpoint_paths(path);
    let m: CheckpointManifest = read_json(&json)?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::format(&json, format!("not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} manifest")));
    }
    if m.dtype != DTYPE {
        return Err(Error::format(&json, format!("unsupported dtype {:?}", m.dtype)));
    }
    let bin = json.with_file_name(&m.blob);
    let values = decode_f32(&read_bytes(&bin)?, &bin)?;
    if values.len() != m.n_params {
        return Err(Error::format(&bin, format!("blob holds {} parameters, manifest says {}", values.len(), m.n_params)));
    }
    let params = values.into_iter().map(f64::from).collect();
    let field = RdaField::from_params(m.field.clone(), m.bounds, params).map_err(|e| Error::format(&json, e.to_string()))?;
    Ok((field, m))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub proj: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// The `--config` document. Missing sections take defaults; unknown keys are
/// rejected anywhere in the tree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sart: SartConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sart.validate()
    }
}

/// 8-bit binary PGM of an axis-aligned slice, min-max normalized.
pub fn slice_pgm(vol: &Volume, axis: usize, index: usize) -> Result<Vec<u8>> {
    if axis > 2 {
        return Err(Error::invalid(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    if index >= vol.dims[axis] {
        return Err(Error::invalid(format!("slice index {index} out of range for axis size {}", vol.dims[axis])));
    }
    // Image axes: the two remaining volume axes, lower one running along a row.
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (vol.dims[a], vol.dims[b]);
    let mut values = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut ijk = [0; 3];
            ijk[axis] = index;
            ijk[a] = c;
            ijk[b] = h - 1 - r;
            values.push(vol.get(ijk[0], ijk[1], ijk[2]));
        }
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}

pub fn write_slice(path: &Path, vol: &Volume, axis: usize, index: usize) -> Result<()> {
    write_bytes(path, &slice_pgm(vol, axis, index)?)
}
