//! Image composition from nearest-neighbor fields: copy-paste reconstruction,
//! correspondence color maps and semantic correspondence overlays.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};

use crate::database::{TrainingDatabase, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::{ClassPalette, ClassRaster};
use crate::search::{hpm_run, NNField, SearchConfig};
use crate::tensor::{layer_geometry, ActivationTensor, LayerSpec, PatchRect};

pub type Raster = RgbImage;

/// Sixteen-color cycle used to tell source images apart
/// (Trubetskoy's "simple and distinct" list).
pub const SOURCE_PALETTE: [[u8; 3]; 16] = [
    [0xe6, 0x19, 0x4b],
    [0x3c, 0xb4, 0x4b],
    [0xff, 0xe1, 0x19],
    [0x43, 0x63, 0xd8],
    [0xf5, 0x82, 0x31],
    [0x91, 0x1e, 0xb4],
    [0x42, 0xd4, 0xf4],
    [0xf0, 0x32, 0xe6],
    [0xbf, 0xef, 0x45],
    [0xfa, 0xbe, 0xd4],
    [0x46, 0x99, 0x90],
    [0xdc, 0xbe, 0xff],
    [0x9a, 0x63, 0x24],
    [0xff, 0xfa, 0xc8],
    [0x80, 0x00, 0x00],
    [0xaa, 0xff, 0xc3],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Output,
}

impl Source {
    fn image<'a>(&self, pair: &'a TrainingPair) -> &'a RgbImage {
        match self {
            Source::Input => &pair.input_image,
            Source::Output => &pair.output_image,
        }
    }
}

pub fn hex_color(color: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", color[0], color[1], color[2])
}

/// Averages overlapping patch contributions with integer sums, so the result
/// does not depend on the order contributions arrive in.
#[derive(Debug, Clone)]
pub struct CompositionAccumulator {
    width: u32,
    height: u32,
    sums: Vec<[u64; 3]>,
    weights: Vec<u32>,
}

impl CompositionAccumulator {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        CompositionAccumulator {
            width,
            height,
            sums: vec![[0; 3]; n],
            weights: vec![0; n],
        }
    }

    pub fn add(&mut self, x: u32, y: u32, pixel: Rgb<u8>) {
        let i = (y * self.width + x) as usize;
        for c in 0..3 {
            self.sums[i][c] += u64::from(pixel[c]);
        }
        self.weights[i] += 1;
    }

    /// Copies `src_rect` of `source` onto `dst_rect`, skipping pixels that fall
    /// outside either image.
    pub fn add_patch(&mut self, source: &RgbImage, src_rect: PatchRect, dst_rect: PatchRect) {
        let size = src_rect.size.min(dst_rect.size);
        for dy in 0..size {
            let (sy, ty) = (src_rect.top + dy, dst_rect.top + dy);
            if sy >= source.height() as usize || ty >= self.height as usize {
                break;
            }
            for dx in 0..size {
                let (sx, tx) = (src_rect.left + dx, dst_rect.left + dx);
                if sx >= source.width() as usize || tx >= self.width as usize {
                    break;
                }
                self.add(tx as u32, ty as u32, *source.get_pixel(sx as u32, sy as u32));
            }
        }
    }

    /// Weighted average with round-half-up; uncovered pixels stay black.
    pub fn finalize(&self) -> (RgbImage, Vec<bool>) {
        let mut image = RgbImage::new(self.width, self.height);
        let mut covered = vec![false; self.weights.len()];
        for (i, pixel) in image.pixels_mut().enumerate() {
            let w = u64::from(self.weights[i]);
            if w == 0 {
                continue;
            }
            covered[i] = true;
            for c in 0..3 {
                pixel[c] = ((2 * self.sums[i][c] + w) / (2 * w)) as u8;
            }
        }
        (image, covered)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: RgbImage,
    /// Row-major coverage flags, one per pixel.
    pub covered: Vec<bool>,
}

impl Reconstruction {
    pub fn uncovered_count(&self) -> usize {
        self.covered.iter().filter(|&&c| !c).count()
    }

    pub fn is_covered(&self, x: u32, y: u32) -> bool {
        self.covered[(y * self.image.width() + x) as usize]
    }
}

/// Pastes, for every field cell, the matched training patch from the chosen
/// side of the pair onto the query cell's rectangle and averages overlaps.
pub fn reconstruct(
    field: &NNField,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    source: Source,
) -> Result<Reconstruction> {
    field.validate(db, layer, None)?;
    let (width, height) = db
        .image_size()
        .ok_or_else(|| Error::EmptySet("the training database is empty".into()))?;
    let mut acc = CompositionAccumulator::new(width, height);
    for y in 0..field.rows {
        for x in 0..field.cols {
            let cell = field.get(y, x);
            let pair = db.pair(cell.image_id)?;
            acc.add_patch(
                source.image(pair),
                layer_geometry(layer, cell.train_pos),
                layer_geometry(layer, (y, x)),
            );
        }
    }
    let (image, covered) = acc.finalize();
    Ok(Reconstruction { image, covered })
}

/// Counts pixels of a `width×height` image that a full `rows×cols` field at
/// `layer` leaves uncovered. Cell rectangles form a grid, so a pixel is
/// covered exactly when its row and its column are each covered.
pub fn uncovered_pixels(layer: &LayerSpec, rows: usize, cols: usize, width: u32, height: u32) -> u64 {
    let covered_along = |cells: usize, extent: u32| -> u64 {
        let mut hit = vec![false; extent as usize];
        for i in 0..cells {
            let start = (i * layer.scale).min(extent as usize);
            let end = (i * layer.scale + layer.patch_size).min(extent as usize);
            hit[start..end].fill(true);
        }
        hit.iter().filter(|&&h| h).count() as u64
    };
    u64::from(width) * u64::from(height) - covered_along(rows, height) * covered_along(cols, width)
}

/// 50% alpha blend with round-half-up.
fn blend(pixel: &mut Rgb<u8>, color: [u8; 3]) {
    for c in 0..3 {
        pixel[c] = (u16::from(pixel[c]) + u16::from(color[c])).div_ceil(2) as u8;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegendEntry {
    /// Palette color, suffixed with `#<cycle>` once the palette wraps.
    pub key: String,
    pub color: [u8; 3],
    pub image_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    /// Query image tinted by the source image each pixel came from.
    pub query: RgbImage,
    /// One tinted input image per contributing training pair, ascending id.
    pub sources: Vec<(u32, RgbImage)>,
    pub legend: Vec<LegendEntry>,
}

impl CorrespondenceMap {
    pub fn legend_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .legend
            .iter()
            .map(|e| (e.key.clone(), serde_json::Value::from(e.image_id)))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Color-codes which training image each query pixel was matched to.
///
/// A pixel takes the color of the cell whose `scale×scale` block (anchored
/// at the cell's rectangle top-left) contains it; pixels past the last cell
/// fall back to the last row or column when that cell's rectangle covers
/// them, and stay untinted otherwise.
pub fn correspondence_map(
    field: &NNField,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    query_image: &RgbImage,
) -> Result<CorrespondenceMap> {
    if field.rows == 0 || field.cols == 0 {
        return Err(Error::Config(
            "cannot draw a correspondence map for an empty field".into(),
        ));
    }
    field.validate(db, layer, None)?;
    let ids = field.image_ids();
    let colors: BTreeMap<u32, [u8; 3]> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, SOURCE_PALETTE[i % SOURCE_PALETTE.len()]))
        .collect();
    let legend = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let color = colors[&id];
            let cycle = i / SOURCE_PALETTE.len();
            let key = if cycle == 0 {
                hex_color(color)
            } else {
                format!("{}#{cycle}", hex_color(color))
            };
            LegendEntry {
                key,
                color,
                image_id: id,
            }
        })
        .collect();

    let mut query = query_image.clone();
    for (px, py, pixel) in query.enumerate_pixels_mut() {
        let cy = (py as usize / layer.scale).min(field.rows - 1);
        let cx = (px as usize / layer.scale).min(field.cols - 1);
        if layer_geometry(layer, (cy, cx)).contains(py as usize, px as usize) {
            blend(pixel, colors[&field.get(cy, cx).image_id]);
        }
    }

    let mut sources = Vec::with_capacity(ids.len());
    for &id in &ids {
        let mut image = db.pair(id)?.input_image.clone();
        let mut mask = vec![false; image.width() as usize * image.height() as usize];
        for cell in field.cells.iter().filter(|c| c.image_id == id) {
            mark(
                &mut mask,
                image.width(),
                image.height(),
                layer_geometry(layer, cell.train_pos),
            );
        }
        let color = colors[&id];
        for (pixel, &m) in image.pixels_mut().zip(&mask) {
            if m {
                blend(pixel, color);
            }
        }
        sources.push((id, image));
    }
    Ok(CorrespondenceMap { query, sources, legend })
}

fn mark(mask: &mut [bool], width: u32, height: u32, rect: PatchRect) {
    let (w, h) = (width as usize, height as usize);
    for y in rect.top..(rect.top + rect.size).min(h) {
        for x in rect.left..(rect.left + rect.size).min(w) {
            mask[y * w + x] = true;
        }
    }
}

/// Tensor, image and label raster of one side of a semantic comparison.
#[derive(Debug, Clone, Copy)]
pub struct SemanticMember<'a> {
    pub tensor: &'a ActivationTensor,
    pub image: &'a RgbImage,
    pub labels: &'a ClassRaster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCorrespondence {
    pub left: RgbImage,
    pub right: RgbImage,
    /// Field from `a` into `b` (image id 0 is `b`).
    pub field: NNField,
}

impl SemanticCorrespondence {
    pub fn side_by_side(&self) -> RgbImage {
        side_by_side(&self.left, &self.right)
    }
}

/// Matches `a` against a one-pair database holding `b`, then tints every
/// query patch whose class (label at the patch center) is requested, along
/// with its matched patch in `b`, using the class color. Later classes in
/// `classes` draw over earlier ones.
pub fn semantic_correspondence(
    a: SemanticMember<'_>,
    b: SemanticMember<'_>,
    layer: &LayerSpec,
    palette: &ClassPalette,
    classes: &[usize],
    config: &SearchConfig,
) -> Result<SemanticCorrespondence> {
    for (name, member) in [("a", &a), ("b", &b)] {
        if member.tensor.layer_name() != layer.name {
            return Err(Error::Config(format!(
                "member {name} provides layer `{}`, expected `{}`",
                member.tensor.layer_name(),
                layer.name
            )));
        }
        if (member.labels.width, member.labels.height) != member.image.dimensions() {
            return Err(Error::Shape(format!(
                "member {name}: label raster does not match its image"
            )));
        }
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= palette.len()) {
        return Err(Error::Config(format!("class index {bad} is outside the palette")));
    }
    let pair = TrainingPair::new(0, b.image.clone(), b.image.clone(), [b.tensor.clone()]);
    let db = TrainingDatabase::new(vec![pair], [layer.clone()], None)?;
    let config = SearchConfig {
        candidate_image_ids: vec![0],
        ..config.clone()
    };
    let field = hpm_run(a.tensor, &db, layer, &config)?;

    let (aw, ah) = a.image.dimensions();
    let (bw, bh) = b.image.dimensions();
    let mut left_tint: Vec<Option<[u8; 3]>> = vec![None; (aw * ah) as usize];
    let mut right_tint: Vec<Option<[u8; 3]>> = vec![None; (bw * bh) as usize];
    for &class in classes {
        let color = palette.color(class);
        for y in 0..field.rows {
            for x in 0..field.cols {
                let rect = layer_geometry(layer, (y, x));
                let cy = (rect.top + rect.size / 2).min(ah as usize - 1);
                let cx = (rect.left + rect.size / 2).min(aw as usize - 1);
                if usize::from(a.labels.get(cx as u32, cy as u32)) != class {
                    continue;
                }
                paint(&mut left_tint, aw, ah, rect, color);
                paint(
                    &mut right_tint,
                    bw,
                    bh,
                    layer_geometry(layer, field.get(y, x).train_pos),
                    color,
                );
            }
        }
    }
    Ok(SemanticCorrespondence {
        left: apply_tint(a.image, &left_tint),
        right: apply_tint(b.image, &right_tint),
        field,
    })
}

fn paint(tint: &mut [Option<[u8; 3]>], width: u32, height: u32, rect: PatchRect, color: [u8; 3]) {
    let (w, h) = (width as usize, height as usize);
    for y in rect.top..(rect.top + rect.size).min(h) {
        for x in rect.left..(rect.left + rect.size).min(w) {
            tint[y * w + x] = Some(color);
        }
    }
}

fn apply_tint(image: &RgbImage, tint: &[Option<[u8; 3]>]) -> RgbImage {
    let mut out = image.clone();
    for (pixel, t) in out.pixels_mut().zip(tint) {
        if let Some(color) = t {
            blend(pixel, *color);
        }
    }
    out
}

/// Places two images next to each other on a black canvas.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    let height = left.height().max(right.height());
    let mut out = RgbImage::new(left.width() + right.width(), height);
    for (x, y, p) in left.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }
    for (x, y, p) in right.enumerate_pixels() {
        out.put_pixel(left.width() + x, y, *p);
    }
    out
}
