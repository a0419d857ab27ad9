//! On-disk formats: activation tensor files, nearest-neighbor field dumps and
//! the dataset manifest, plus manifest ingest.
//!
//! Tensor file (`.chpt`), all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "CHPT"
//! 4       4           format version (u32) = 1
//! 8       4           H (u32)
//! 12      4           W (u32)
//! 16      4           D (u32)
//! 20      4·H·W·D     f32 payload, row-major (H, W, D)
//! ```
//!
//! Field dump (`.chpf`):
//!
//! ```text
//! 0       4           magic "CHPF"
//! 4       4           format version (u32) = 1
//! 8       4           rows (u32)
//! 12      4           cols (u32)
//! 16      16·rows·cols  per cell, row-major: image_id u32, y u32, x u32, distance f32
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::database::{TrainingDatabase, TrainingPair};
use crate::error::{Error, Result};
use crate::search::{Correspondence, NNField};
use crate::tensor::{ActivationTensor, LayerRole, LayerSpec};

pub const TENSOR_MAGIC: [u8; 4] = *b"CHPT";
pub const FIELD_MAGIC: [u8; 4] = *b"CHPF";
pub const FORMAT_VERSION: u32 = 1;
pub const TENSOR_HEADER_LEN: usize = 20;
pub const FIELD_HEADER_LEN: usize = 16;
const FIELD_CELL_LEN: usize = 16;

/// JSON Schema of the manifest format.
pub const MANIFEST_SCHEMA: &str = include_str!("../schema/manifest.v1.schema.json");

fn read_input(path: &Path, entry: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| missing_or_io(path, entry, e))
}

fn missing_or_io(path: &Path, entry: &str, e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::NotFound {
        Error::MissingFile {
            entry: entry.to_string(),
            path: path.to_path_buf(),
        }
    } else {
        Error::io(path, e)
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn encode_tensor(t: &ActivationTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 4 * t.values().len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [t.height(), t.width(), t.depth()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor file image. `path` is only used in error messages. The
/// returned tensor has an empty layer name.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<ActivationTensor> {
    let found = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: TENSOR_HEADER_LEN as u64,
            found,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: TENSOR_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: TENSOR_HEADER_LEN as u64,
            found,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: TENSOR_HEADER_LEN as u64,
            found,
        });
    }
    let (h, w, d) = (u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16));
    let count = u64::from(h) * u64::from(w) * u64::from(d);
    let expected = TENSOR_HEADER_LEN as u64 + 4 * count;
    if found < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingData {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let values: Vec<f32> = bytes[TENSOR_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    ActivationTensor::new("", h as usize, w as usize, d as usize, values)
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}

pub fn write_tensor(t: &ActivationTensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ActivationTensor> {
    decode_tensor(&read_input(path, "tensor")?, path)
}

pub fn encode_field(field: &NNField) -> Vec<u8> {
    let mut out = Vec::with_capacity(FIELD_HEADER_LEN + FIELD_CELL_LEN * field.cells.len());
    out.extend_from_slice(&FIELD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(field.rows as u32).to_le_bytes());
    out.extend_from_slice(&(field.cols as u32).to_le_bytes());
    for cell in &field.cells {
        out.extend_from_slice(&cell.image_id.to_le_bytes());
        out.extend_from_slice(&(cell.train_pos.0 as u32).to_le_bytes());
        out.extend_from_slice(&(cell.train_pos.1 as u32).to_le_bytes());
        out.extend_from_slice(&(cell.distance as f32).to_le_bytes());
    }
    out
}

/// Decodes a field dump. Distances come back at `f32` precision and the
/// evaluation count, which the dump does not carry, is zero.
pub fn decode_field(bytes: &[u8], layer_name: &str) -> Result<NNField> {
    if bytes.len() < FIELD_HEADER_LEN {
        return Err(Error::CorruptDump(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if bytes[..4] != FIELD_MAGIC {
        return Err(Error::CorruptDump(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::CorruptDump(format!("unsupported version {version}")));
    }
    let (rows, cols) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(FIELD_CELL_LEN))
        .and_then(|n| n.checked_add(FIELD_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::CorruptDump(format!(
            "{rows}x{cols} grid does not match a {}-byte dump",
            bytes.len()
        )));
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for chunk in bytes[FIELD_HEADER_LEN..].chunks_exact(FIELD_CELL_LEN) {
        let distance = f32::from_le_bytes(chunk[12..16].try_into().unwrap());
        if !distance.is_finite() {
            return Err(Error::CorruptDump("non-finite distance".into()));
        }
        cells.push(Correspondence {
            image_id: u32_at(chunk, 0),
            train_pos: (u32_at(chunk, 4) as usize, u32_at(chunk, 8) as usize),
            distance: f64::from(distance),
        });
    }
    Ok(NNField {
        layer_name: layer_name.to_string(),
        rows,
        cols,
        cells,
        eval_count: 0,
    })
}

pub fn write_field(field: &NNField, path: &Path) -> Result<()> {
    fs::write(path, encode_field(field)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path, layer_name: &str) -> Result<NNField> {
    decode_field(&read_input(path, "field dump")?, layer_name)
}

pub fn read_png(path: &Path, entry: &str) -> Result<RgbImage> {
    let bytes = read_input(path, entry)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn write_png(image: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    image
        .write_to(&mut io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLayer {
    pub name: String,
    /// `[h, w, d]`
    pub hyperpatch: [usize; 3],
    pub patch_size: usize,
    pub scale: usize,
    pub role: LayerRole,
}

impl ManifestLayer {
    pub fn to_spec(&self) -> LayerSpec {
        LayerSpec {
            name: self.name.clone(),
            hyperpatch_h: self.hyperpatch[0],
            hyperpatch_w: self.hyperpatch[1],
            depth: self.hyperpatch[2],
            patch_size: self.patch_size,
            scale: self.scale,
            role: self.role,
        }
    }

    pub fn from_spec(spec: &LayerSpec) -> Self {
        ManifestLayer {
            name: spec.name.clone(),
            hyperpatch: [spec.hyperpatch_h, spec.hyperpatch_w, spec.depth],
            patch_size: spec.patch_size,
            scale: spec.scale,
            role: spec.role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    pub id: u32,
    pub input_png: PathBuf,
    pub output_png: PathBuf,
    pub tensors: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub image_size: ImageSize,
    pub layers: Vec<ManifestLayer>,
    pub pairs: Vec<ManifestPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<PathBuf>,
}

/// Which pairs [`Manifest::filtered`] keeps. A pair survives when it is in
/// `include` (if given), not in `exclude`, carries every tag in
/// `require_tags` and none in `reject_tags`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSelection {
    pub include: Option<Vec<u32>>,
    pub exclude: Vec<u32>,
    pub require_tags: Vec<String>,
    pub reject_tags: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, "manifest", e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn descriptor_layer(&self) -> Option<&str> {
        self.layers
            .iter()
            .find(|l| l.role == LayerRole::Descriptor)
            .map(|l| l.name.as_str())
    }

    /// Resolves every relative path against `base`.
    pub fn with_base_dir(mut self, base: &Path) -> Self {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for pair in &mut self.pairs {
            resolve(&mut pair.input_png);
            resolve(&mut pair.output_png);
            pair.tensors.values_mut().for_each(resolve);
        }
        if let Some(p) = &mut self.palette {
            resolve(p);
        }
        self
    }

    /// Keeps the selected pairs and re-numbers them densely in ascending
    /// order of their old ids. Returns the derived manifest and the old id of
    /// each new id.
    pub fn filtered(&self, selection: &PairSelection) -> Result<(Manifest, Vec<u32>)> {
        let known: BTreeSet<u32> = self.pairs.iter().map(|p| p.id).collect();
        let named = selection.include.iter().flatten().chain(&selection.exclude);
        if let Some(unknown) = named.into_iter().find(|id| !known.contains(id)) {
            return Err(Error::Config(format!("pair id {unknown} is not in the manifest")));
        }
        let mut kept: Vec<&ManifestPair> = self
            .pairs
            .iter()
            .filter(|p| selection.include.as_ref().is_none_or(|ids| ids.contains(&p.id)))
            .filter(|p| !selection.exclude.contains(&p.id))
            .filter(|p| selection.require_tags.iter().all(|t| p.tags.contains(t)))
            .filter(|p| !selection.reject_tags.iter().any(|t| p.tags.contains(t)))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptySet("the selection retains no pairs".into()));
        }
        kept.sort_by_key(|p| p.id);
        let mapping: Vec<u32> = kept.iter().map(|p| p.id).collect();
        let pairs = kept
            .into_iter()
            .enumerate()
            .map(|(new_id, p)| ManifestPair {
                id: new_id as u32,
                ..p.clone()
            })
            .collect();
        Ok((Manifest { pairs, ..self.clone() }, mapping))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub pairs: usize,
    pub layers: Vec<String>,
    pub loaded_layers: Vec<String>,
    pub bytes: u64,
    pub descriptor_layer: Option<String>,
    pub image_size: ImageSize,
}

/// Restricts which layers' tensors are read; `None` reads all of them. The
/// descriptor layer is always read. Files of skipped layers must still exist.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOptions {
    pub layers: Option<Vec<String>>,
}

pub fn ingest(manifest_path: &Path) -> Result<TrainingDatabase> {
    ingest_with(manifest_path, &IngestOptions::default()).map(|(db, _)| db)
}

pub fn ingest_with(manifest_path: &Path, options: &IngestOptions) -> Result<(TrainingDatabase, IngestReport)> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    ingest_manifest(manifest.with_base_dir(base), manifest_path, options)
}

/// Validates and loads an already parsed manifest whose paths are resolved.
pub fn ingest_manifest(
    manifest: Manifest,
    manifest_path: &Path,
    options: &IngestOptions,
) -> Result<(TrainingDatabase, IngestReport)> {
    let invalid = |message: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message,
    };
    let mut layer_names = BTreeSet::new();
    for layer in &manifest.layers {
        if !layer_names.insert(layer.name.as_str()) {
            return Err(invalid(format!("layer `{}` is declared twice", layer.name)));
        }
        layer.to_spec().validate()?;
    }
    let descriptors: Vec<&ManifestLayer> = manifest
        .layers
        .iter()
        .filter(|l| l.role == LayerRole::Descriptor)
        .collect();
    if descriptors.len() > 1 {
        return Err(invalid("more than one layer has role `descriptor`".into()));
    }
    let descriptor_layer = descriptors.first().map(|l| l.name.clone());

    let mut seen = BTreeSet::new();
    for pair in &manifest.pairs {
        if !seen.insert(pair.id) {
            return Err(Error::DuplicateId(pair.id));
        }
    }
    if let Some(max) = seen.last() {
        if *max as usize + 1 != seen.len() {
            return Err(invalid(format!("pair ids must be dense from 0, highest id is {max}")));
        }
    }
    for pair in &manifest.pairs {
        if let Some(layer) = layer_names.iter().find(|l| !pair.tensors.contains_key(**l)) {
            return Err(invalid(format!("pair {} has no tensor for layer `{layer}`", pair.id)));
        }
        if let Some(extra) = pair.tensors.keys().find(|k| !layer_names.contains(k.as_str())) {
            return Err(invalid(format!("pair {} lists undeclared layer `{extra}`", pair.id)));
        }
    }

    let loaded: BTreeSet<String> = match &options.layers {
        None => layer_names.iter().map(|s| s.to_string()).collect(),
        Some(wanted) => {
            if let Some(unknown) = wanted.iter().find(|l| !layer_names.contains(l.as_str())) {
                return Err(Error::Config(format!("unknown layer `{unknown}`")));
            }
            wanted.iter().cloned().chain(descriptor_layer.clone()).collect()
        }
    };

    let mut bytes = 0u64;
    let mut ordered: Vec<&ManifestPair> = manifest.pairs.iter().collect();
    ordered.sort_by_key(|p| p.id);
    let mut pairs = Vec::with_capacity(ordered.len());
    for entry in ordered {
        let input = read_png(&entry.input_png, &format!("pair {} input_png", entry.id))?;
        let output = read_png(&entry.output_png, &format!("pair {} output_png", entry.id))?;
        for (side, img, path) in [
            ("input", &input, &entry.input_png),
            ("output", &output, &entry.output_png),
        ] {
            if img.dimensions() != (manifest.image_size.w, manifest.image_size.h) {
                return Err(Error::ShapeMismatch {
                    pair: entry.id,
                    layer: format!("<{side} image {}>", path.display()),
                    expected: format!("{}x{}", manifest.image_size.w, manifest.image_size.h),
                    found: format!("{}x{}", img.width(), img.height()),
                });
            }
        }
        bytes += file_len(&entry.input_png)? + file_len(&entry.output_png)?;
        let mut tensors = Vec::new();
        for (layer, path) in &entry.tensors {
            let what = format!("pair {} tensor `{layer}`", entry.id);
            if !loaded.contains(layer) {
                if !path.exists() {
                    return Err(Error::MissingFile {
                        entry: what,
                        path: path.clone(),
                    });
                }
                continue;
            }
            let tensor = decode_tensor(&read_input(path, &what)?, path)?.with_layer_name(layer.clone());
            bytes += (TENSOR_HEADER_LEN + 4 * tensor.values().len()) as u64;
            let spec = manifest.layers.iter().find(|l| &l.name == layer).unwrap().to_spec();
            if spec.check_tensor(&tensor).is_err() {
                let (h, w, d) = tensor.dims();
                return Err(Error::ShapeMismatch {
                    pair: entry.id,
                    layer: layer.clone(),
                    expected: format!(
                        "depth {} and at least {}x{} cells",
                        spec.depth, spec.hyperpatch_h, spec.hyperpatch_w
                    ),
                    found: format!("{h}x{w}x{d}"),
                });
            }
            tensors.push(tensor);
        }
        pairs.push(TrainingPair::new(entry.id, input, output, tensors).with_tags(entry.tags.clone()));
    }

    let specs: Vec<LayerSpec> = manifest
        .layers
        .iter()
        .filter(|l| loaded.contains(&l.name))
        .map(ManifestLayer::to_spec)
        .collect();
    let db = TrainingDatabase::new(pairs, specs, descriptor_layer.clone())?;
    let report = IngestReport {
        pairs: db.len(),
        layers: manifest.layers.iter().map(|l| l.name.clone()).collect(),
        loaded_layers: loaded.into_iter().collect(),
        bytes,
        descriptor_layer,
        image_size: manifest.image_size,
    };
    Ok((db, report))
}

fn file_len(path: &Path) -> Result<u64> {
    fs::metadata(path).map(|m| m.len()).map_err(|e| Error::io(path, e))
}
