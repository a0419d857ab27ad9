//! Activation tensors, hyperpatch views, the cosine distance between views and
//! the mapping from tensor cells to image pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Views whose L2 norm falls below this are treated as dead activations.
pub const NORM_EPSILON: f64 = 1e-12;

/// Distance assigned to any comparison involving a dead (near zero) view.
pub const DEAD_VIEW_DISTANCE: f64 = 1.0;

/// One layer's `H×W×D` activation volume for one image, stored row-major
/// (row, then column, then channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    layer_name: String,
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(
        layer_name: impl Into<String>,
        height: usize,
        width: usize,
        depth: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let layer_name = layer_name.into();
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Shape(format!(
                "tensor `{layer_name}` has a zero dimension ({height}x{width}x{depth})"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(depth))
            .ok_or_else(|| Error::Shape(format!("tensor `{layer_name}` is too large")))?;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "tensor `{layer_name}` of {height}x{width}x{depth} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "tensor `{layer_name}` has a non-finite value at index {index}"
            )));
        }
        Ok(ActivationTensor {
            layer_name,
            height,
            width,
            depth,
            values,
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn with_layer_name(mut self, layer_name: impl Into<String>) -> Self {
        self.layer_name = layer_name.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.depth + c]
    }

    /// Contiguous run of `len` cells starting at `(y, x)`, all channels.
    fn cell_run(&self, y: usize, x: usize, len: usize) -> &[f32] {
        let start = (y * self.width + x) * self.depth;
        &self.values[start..start + len * self.depth]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Encoder,
    Decoder,
    Descriptor,
}

/// Per-layer geometry: hyperpatch extent in cells, channel depth, and how a
/// cell position maps onto image pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub hyperpatch_h: usize,
    pub hyperpatch_w: usize,
    pub depth: usize,
    /// Side of the square image patch copied per field cell, in pixels.
    pub patch_size: usize,
    /// Image pixels per tensor cell.
    pub scale: usize,
    pub role: LayerRole,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hyperpatch_h == 0 || self.hyperpatch_w == 0 || self.depth == 0 {
            return Err(Error::Config(format!(
                "layer `{}`: hyperpatch dimensions must be positive",
                self.name
            )));
        }
        if self.patch_size == 0 || self.scale == 0 {
            return Err(Error::Config(format!(
                "layer `{}`: patch_size and scale must be at least 1",
                self.name
            )));
        }
        Ok(())
    }

    /// Checks that a tensor can be searched under this spec.
    pub fn check_tensor(&self, tensor: &ActivationTensor) -> Result<()> {
        let (h, w, d) = tensor.dims();
        if d != self.depth || h < self.hyperpatch_h || w < self.hyperpatch_w {
            return Err(Error::Shape(format!(
                "layer `{}` expects depth {} and at least {}x{} cells, tensor is {h}x{w}x{d}",
                self.name, self.depth, self.hyperpatch_h, self.hyperpatch_w
            )));
        }
        Ok(())
    }

    /// Dimensions of the stride-1 hyperpatch grid over a `height×width` tensor.
    pub fn grid_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 1).saturating_sub(self.hyperpatch_h),
            (width + 1).saturating_sub(self.hyperpatch_w),
        )
    }
}

/// Borrowed `hyperpatch_h × hyperpatch_w × D` window of a tensor.
#[derive(Debug, Clone, Copy)]
pub struct HyperPatchView<'a> {
    tensor: &'a ActivationTensor,
    y: usize,
    x: usize,
    height: usize,
    width: usize,
}

impl<'a> HyperPatchView<'a> {
    pub fn position(&self) -> (usize, usize) {
        (self.y, self.x)
    }

    pub fn extent(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.tensor.depth)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.tensor.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One contiguous slice per hyperpatch row.
    pub fn rows(&self) -> impl Iterator<Item = &'a [f32]> + '_ {
        let tensor = self.tensor;
        (self.y..self.y + self.height).map(move |row| tensor.cell_run(row, self.x, self.width))
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.rows().flatten().copied().collect()
    }
}

pub fn extract_hyperpatch<'a>(
    tensor: &'a ActivationTensor,
    pos: (usize, usize),
    spec: &LayerSpec,
) -> Result<HyperPatchView<'a>> {
    let (y, x) = pos;
    if y + spec.hyperpatch_h > tensor.height || x + spec.hyperpatch_w > tensor.width {
        return Err(Error::OutOfBounds {
            layer: spec.name.clone(),
            y,
            x,
        });
    }
    if tensor.depth != spec.depth {
        return Err(Error::Shape(format!(
            "layer `{}` has depth {}, tensor has depth {}",
            spec.name, spec.depth, tensor.depth
        )));
    }
    Ok(view_unchecked(tensor, pos, spec))
}

pub(crate) fn view_unchecked<'a>(
    tensor: &'a ActivationTensor,
    (y, x): (usize, usize),
    spec: &LayerSpec,
) -> HyperPatchView<'a> {
    debug_assert!(y + spec.hyperpatch_h <= tensor.height);
    debug_assert!(x + spec.hyperpatch_w <= tensor.width);
    HyperPatchView {
        tensor,
        y,
        x,
        height: spec.hyperpatch_h,
        width: spec.hyperpatch_w,
    }
}

/// `1 - cos(a, b)` over the flattened views, in `[0, 2]`.
pub fn cosine_distance(a: &HyperPatchView<'_>, b: &HyperPatchView<'_>) -> Result<f64> {
    if a.extent() != b.extent() {
        return Err(Error::Shape(format!(
            "cannot compare hyperpatches of extent {:?} and {:?}",
            a.extent(),
            b.extent()
        )));
    }
    Ok(view_distance(a, b))
}

pub(crate) fn view_distance(a: &HyperPatchView<'_>, b: &HyperPatchView<'_>) -> f64 {
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (row_a, row_b) in a.rows().zip(b.rows()) {
        for (&va, &vb) in row_a.iter().zip(row_b) {
            let (va, vb) = (f64::from(va), f64::from(vb));
            dot += va * vb;
            norm_a += va * va;
            norm_b += vb * vb;
        }
    }
    vector_distance_parts(dot, norm_a, norm_b)
}

/// Cosine distance between two plain vectors of equal length.
pub fn vector_cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (&va, &vb) in a.iter().zip(b) {
        let (va, vb) = (f64::from(va), f64::from(vb));
        dot += va * vb;
        norm_a += va * va;
        norm_b += vb * vb;
    }
    Ok(vector_distance_parts(dot, norm_a, norm_b))
}

fn vector_distance_parts(dot: f64, norm_a_sq: f64, norm_b_sq: f64) -> f64 {
    if norm_a_sq.sqrt() < NORM_EPSILON || norm_b_sq.sqrt() < NORM_EPSILON {
        return DEAD_VIEW_DISTANCE;
    }
    // sqrt(n*n) == n exactly, so identical views land on 0.0 without slack.
    let similarity = dot / (norm_a_sq * norm_b_sq).sqrt();
    (1.0 - similarity).clamp(0.0, 2.0)
}

/// Square image rectangle covered by one field cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn contains(&self, py: usize, px: usize) -> bool {
        py >= self.top && py < self.top + self.size && px >= self.left && px < self.left + self.size
    }
}

/// Maps a cell position to its image rectangle. No clipping happens here.
pub fn layer_geometry(spec: &LayerSpec, (y, x): (usize, usize)) -> PatchRect {
    PatchRect {
        top: y * spec.scale,
        left: x * spec.scale,
        size: spec.patch_size,
    }
}

/// Layer geometry of the 256×256 Pix2Pix U-Net generator.
pub mod pix2pix {
    use super::{LayerRole, LayerSpec};

    /// Input and output side length the presets assume.
    pub const IMAGE_SIDE: usize = 256;

    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct PresetLayer {
        pub spec: LayerSpec,
        /// Tensor height and width at a 256×256 input.
        pub cells: usize,
        /// The published per-layer patch side. It equals the pixel footprint
        /// of a single cell, so it is used as `scale`; `patch_size` spans the
        /// full hyperpatch footprint instead.
        pub table_patch: usize,
    }

    // (name, hyperpatch side, depth, published patch side)
    // The published table repeats the Encoder 7 row; it appears once here.
    const TABLE: [(&str, usize, usize, usize); 14] = [
        ("encoder_1", 2, 64, 2),
        ("encoder_2", 2, 128, 4),
        ("encoder_3", 2, 256, 8),
        ("encoder_4", 2, 512, 16),
        ("encoder_5", 2, 512, 32),
        ("encoder_6", 2, 512, 64),
        ("encoder_7", 2, 512, 128),
        ("decoder_8", 2, 1024, 128),
        ("decoder_7", 2, 1024, 64),
        ("decoder_6", 2, 1024, 32),
        ("decoder_5", 2, 1024, 16),
        ("decoder_4", 2, 512, 8),
        ("decoder_3", 2, 256, 4),
        ("decoder_2", 2, 128, 2),
    ];

    /// Bottleneck layer whose whole tensor serves as the global descriptor.
    pub const DESCRIPTOR_LAYER: &str = "decoder_7";

    pub fn layers() -> Vec<PresetLayer> {
        TABLE
            .iter()
            .map(|&(name, side, depth, table_patch)| {
                let role = if name == DESCRIPTOR_LAYER {
                    LayerRole::Descriptor
                } else if name.starts_with("encoder") {
                    LayerRole::Encoder
                } else {
                    LayerRole::Decoder
                };
                PresetLayer {
                    spec: LayerSpec {
                        name: name.to_string(),
                        hyperpatch_h: side,
                        hyperpatch_w: side,
                        depth,
                        patch_size: side * table_patch,
                        scale: table_patch,
                        role,
                    },
                    cells: IMAGE_SIDE / table_patch,
                    table_patch,
                }
            })
            .collect()
    }
}
