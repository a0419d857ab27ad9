//! Label quantization and segmentation metrics (class-mean pixel accuracy
//! and class-mean IoU).

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb_hex: String,
}

/// Ordered classes with pairwise distinct label colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    names: Vec<String>,
    colors: Vec<[u8; 3]>,
}

impl ClassPalette {
    pub fn new(classes: impl IntoIterator<Item = (String, [u8; 3])>) -> Result<Self> {
        let (names, colors): (Vec<String>, Vec<[u8; 3]>) = classes.into_iter().unzip();
        if names.is_empty() {
            return Err(Error::Config("palette has no classes".into()));
        }
        for (i, color) in colors.iter().enumerate() {
            if let Some(j) = colors[..i].iter().position(|c| c == color) {
                return Err(Error::Config(format!(
                    "classes `{}` and `{}` share a color",
                    names[j], names[i]
                )));
            }
        }
        Ok(ClassPalette { names, colors })
    }

    pub fn from_entries(entries: &[PaletteEntry]) -> Result<Self> {
        let classes = entries
            .iter()
            .map(|e| Ok((e.name.clone(), parse_hex(&e.rgb_hex)?)))
            .collect::<Result<Vec<_>>>()?;
        ClassPalette::new(classes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<PaletteEntry> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid palette: {e}")))?;
        ClassPalette::from_entries(&entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile {
                    entry: "palette".into(),
                    path: path.to_path_buf(),
                }
            } else {
                Error::io(path, e)
            }
        })?;
        ClassPalette::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.colors[class]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Nearest class by Euclidean RGB distance, ties to the lowest index.
    pub fn nearest(&self, rgb: [u8; 3]) -> usize {
        let mut best = (u32::MAX, 0);
        for (i, c) in self.colors.iter().enumerate() {
            let d: u32 = (0..3)
                .map(|k| {
                    let diff = i32::from(rgb[k]) - i32::from(c[k]);
                    (diff * diff) as u32
                })
                .sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

fn parse_hex(text: &str) -> Result<[u8; 3]> {
    let digits = text.strip_prefix('#').unwrap_or(text);
    if digits.len() != 6 || !digits.is_ascii() {
        return Err(Error::Config(format!("`{text}` is not an #rrggbb color")));
    }
    let channel = |i: usize| {
        u8::from_str_radix(&digits[i..i + 2], 16)
            .map_err(|_| Error::Config(format!("`{text}` is not an #rrggbb color")))
    };
    Ok([channel(0)?, channel(2)?, channel(4)?])
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRaster {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<u16>,
}

impl ClassRaster {
    pub fn new(width: u32, height: u32, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{width}x{height} class raster needs {} entries, got {}",
                width as usize * height as usize,
                classes.len()
            )));
        }
        Ok(ClassRaster { width, height, classes })
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.classes[(y * self.width + x) as usize]
    }

    /// Paints each class with its palette color.
    pub fn render(&self, palette: &ClassPalette) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            image::Rgb(palette.color(usize::from(self.get(x, y))))
        })
    }
}

pub fn quantize(raster: &RgbImage, palette: &ClassPalette) -> Result<ClassRaster> {
    if palette.is_empty() {
        return Err(Error::Config("palette has no classes".into()));
    }
    let classes = raster.pixels().map(|p| palette.nearest(p.0) as u16).collect();
    ClassRaster::new(raster.width(), raster.height(), classes)
}

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|row| row.len() != n) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// Pixel recall of class `c`, `None` when it has no ground-truth pixels.
    pub fn class_accuracy(&self, c: usize) -> Option<f64> {
        let gt = self.row_sum(c);
        (gt > 0).then(|| self.counts[c][c] as f64 / gt as f64)
    }

    /// IoU of class `c`, `None` when the union is empty.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let union = self.row_sum(c) + self.col_sum(c) - self.counts[c][c];
        (union > 0).then(|| self.counts[c][c] as f64 / union as f64)
    }

    pub fn gt_pixels(&self, c: usize) -> u64 {
        self.row_sum(c)
    }
}

/// Confusion counts over `class_count` classes. Rasters must share dimensions.
pub fn confusion(gt: &ClassRaster, pred: &ClassRaster, class_count: usize) -> Result<ConfusionMatrix> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::Shape(format!(
            "ground truth is {}x{}, prediction is {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    let mut counts = vec![vec![0u64; class_count]; class_count];
    for (&g, &p) in gt.classes.iter().zip(&pred.classes) {
        let (g, p) = (usize::from(g), usize::from(p));
        if g >= class_count || p >= class_count {
            return Err(Error::Shape(format!(
                "class index {} exceeds {class_count} classes",
                g.max(p)
            )));
        }
        counts[g][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

/// How classes without ground-truth pixels enter the pixel-accuracy mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroGtPolicy {
    #[default]
    Exclude,
    CountAsZero,
}

pub fn mean_pixel_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    mean_pixel_accuracy_with(m, ZeroGtPolicy::Exclude)
}

pub fn mean_pixel_accuracy_with(m: &ConfusionMatrix, policy: ZeroGtPolicy) -> Result<f64> {
    if m.total() == 0 {
        return Err(Error::UndefinedMetric("no ground-truth pixels".into()));
    }
    let scores: Vec<f64> = (0..m.class_count())
        .filter_map(|c| match (m.class_accuracy(c), policy) {
            (Some(a), _) => Some(a),
            (None, ZeroGtPolicy::CountAsZero) => Some(0.0),
            (None, ZeroGtPolicy::Exclude) => None,
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn mean_iou(m: &ConfusionMatrix) -> Result<f64> {
    let scores: Vec<f64> = (0..m.class_count()).filter_map(|c| m.class_iou(c)).collect();
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("every class has an empty union".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Reconstruction metric minus the CNN baseline metric.
pub fn compare_to_baseline(metric_recon: f64, metric_cnn: f64) -> f64 {
    metric_recon - metric_cnn
}

/// Signed four-decimal rendering, e.g. `-0.0102` or `+0.0217`.
pub fn format_delta(delta: f64) -> String {
    let rounded = (delta * 1e4).round() / 1e4;
    // avoid "-0.0000"
    format!("{:+.4}", rounded + 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub pixel_accuracy: Option<f64>,
    pub iou: Option<f64>,
    pub gt_pixels: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineDelta {
    pub baseline_mpa: f64,
    pub baseline_miou: f64,
    pub mpa: f64,
    pub miou: f64,
    pub mpa_formatted: String,
    pub miou_formatted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mpa: f64,
    pub miou: f64,
    pub per_class: std::collections::BTreeMap<String, ClassScore>,
    pub zero_gt_classes_excluded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_vs_baseline: Option<BaselineDelta>,
}

impl MetricReport {
    pub fn from_confusion(m: &ConfusionMatrix, palette: &ClassPalette) -> Result<Self> {
        let per_class = (0..m.class_count())
            .map(|c| {
                (
                    palette.name(c).to_string(),
                    ClassScore {
                        pixel_accuracy: m.class_accuracy(c),
                        iou: m.class_iou(c),
                        gt_pixels: m.gt_pixels(c),
                    },
                )
            })
            .collect();
        Ok(MetricReport {
            mpa: mean_pixel_accuracy(m)?,
            miou: mean_iou(m)?,
            per_class,
            zero_gt_classes_excluded: true,
            delta_vs_baseline: None,
        })
    }

    /// Quantizes both label images with `palette` and scores them.
    pub fn evaluate(prediction: &RgbImage, ground_truth: &RgbImage, palette: &ClassPalette) -> Result<Self> {
        let gt = quantize(ground_truth, palette)?;
        let pred = quantize(prediction, palette)?;
        MetricReport::from_confusion(&confusion(&gt, &pred, palette.len())?, palette)
    }

    pub fn with_baseline(mut self, baseline: &MetricReport) -> Self {
        let mpa = compare_to_baseline(self.mpa, baseline.mpa);
        let miou = compare_to_baseline(self.miou, baseline.miou);
        self.delta_vs_baseline = Some(BaselineDelta {
            baseline_mpa: baseline.mpa,
            baseline_miou: baseline.miou,
            mpa,
            miou,
            mpa_formatted: format_delta(mpa),
            miou_formatted: format_delta(miou),
        });
        self
    }
}
