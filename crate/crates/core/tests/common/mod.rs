#![allow(dead_code)]

use compnn_core::database::{TrainingDatabase, TrainingPair};
use compnn_core::search::{Correspondence, NNField};
use compnn_core::tensor::{ActivationTensor, LayerRole, LayerSpec};
use image::{Rgb, RgbImage};

pub const FEATURE_LAYER: &str = "feat";
pub const DESCRIPTOR_LAYER: &str = "bottleneck";

/// xorshift64* for test data, unrelated to the search generator.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) | 1)
    }

    pub fn next(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [-1, 1).
    pub fn unit(&mut self) -> f32 {
        ((self.next() >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }

    pub fn byte(&mut self) -> u8 {
        (self.next() >> 56) as u8
    }
}

pub fn feature_spec(depth: usize, scale: usize) -> LayerSpec {
    LayerSpec {
        name: FEATURE_LAYER.into(),
        hyperpatch_h: 2,
        hyperpatch_w: 2,
        depth,
        patch_size: 2 * scale,
        scale,
        role: LayerRole::Encoder,
    }
}

pub fn descriptor_spec() -> LayerSpec {
    LayerSpec {
        name: DESCRIPTOR_LAYER.into(),
        hyperpatch_h: 1,
        hyperpatch_w: 1,
        depth: 8,
        patch_size: 1,
        scale: 1,
        role: LayerRole::Descriptor,
    }
}

pub fn random_tensor(layer: &str, h: usize, w: usize, d: usize, rng: &mut TestRng) -> ActivationTensor {
    ActivationTensor::new(layer, h, w, d, (0..h * w * d).map(|_| rng.unit()).collect()).unwrap()
}

pub fn random_image(width: u32, height: u32, rng: &mut TestRng) -> RgbImage {
    RgbImage::from_fn(width, height, |_, _| Rgb([rng.byte(), rng.byte(), rng.byte()]))
}

pub struct Synthetic {
    pub db: TrainingDatabase,
    pub spec: LayerSpec,
}

/// `pairs` training pairs with random `side×side×depth` feature tensors,
/// random images of `side·scale` pixels and a 2×2×8 descriptor tensor.
pub fn synthetic(pairs: usize, side: usize, depth: usize, scale: usize, seed: u64) -> Synthetic {
    let mut rng = TestRng::new(seed);
    let spec = feature_spec(depth, scale);
    let px = (side * scale) as u32;
    let pairs = (0..pairs)
        .map(|i| {
            let feat = random_tensor(FEATURE_LAYER, side, side, depth, &mut rng);
            let desc = random_tensor(DESCRIPTOR_LAYER, 2, 2, 8, &mut rng);
            TrainingPair::new(
                i as u32,
                random_image(px, px, &mut rng),
                random_image(px, px, &mut rng),
                [feat, desc],
            )
        })
        .collect();
    let db = TrainingDatabase::new(pairs, [spec.clone(), descriptor_spec()], Some(DESCRIPTOR_LAYER.into())).unwrap();
    Synthetic { db, spec }
}

/// Query resembling natural data: the top half copies one training tensor,
/// the bottom half another, plus small noise.
pub fn composite_query(db: &TrainingDatabase, top: u32, bottom: u32, noise: f32, seed: u64) -> ActivationTensor {
    let a = db.pair(top).unwrap().tensor(FEATURE_LAYER).unwrap();
    let b = db.pair(bottom).unwrap().tensor(FEATURE_LAYER).unwrap();
    let (h, w, d) = a.dims();
    let mut rng = TestRng::new(seed);
    let mut values = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let src = if y < h / 2 { a } else { b };
                values.push(src.at(y, x, c) + noise * rng.unit());
            }
        }
    }
    ActivationTensor::new(FEATURE_LAYER, h, w, d, values).unwrap()
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

fn oracle_patch(t: &ActivationTensor, y: usize, x: usize, spec: &LayerSpec) -> Vec<f64> {
    let mut out = Vec::new();
    for dy in 0..spec.hyperpatch_h {
        for dx in 0..spec.hyperpatch_w {
            for c in 0..t.depth() {
                out.push(f64::from(t.at(y + dy, x + dx, c)));
            }
        }
    }
    out
}

/// Independent triple-loop nearest-neighbor field. Ties go to the lowest
/// image id, then the first row-major position.
pub fn brute_force_field(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    spec: &LayerSpec,
    candidates: &[u32],
) -> NNField {
    let rows = query.height() - spec.hyperpatch_h + 1;
    let cols = query.width() - spec.hyperpatch_w + 1;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut cells = Vec::new();
    for qy in 0..rows {
        for qx in 0..cols {
            let qp = oracle_patch(query, qy, qx, spec);
            let mut best: Option<Correspondence> = None;
            for &id in &sorted {
                let t = db.pair(id).unwrap().tensor(&spec.name).unwrap();
                for ty in 0..=t.height() - spec.hyperpatch_h {
                    for tx in 0..=t.width() - spec.hyperpatch_w {
                        let d = oracle_cosine(&qp, &oracle_patch(t, ty, tx, spec));
                        if best.is_none_or(|b| d < b.distance) {
                            best = Some(Correspondence {
                                image_id: id,
                                train_pos: (ty, tx),
                                distance: d,
                            });
                        }
                    }
                }
            }
            cells.push(best.unwrap());
        }
    }
    NNField {
        layer_name: spec.name.clone(),
        rows,
        cols,
        cells,
        eval_count: 0,
    }
}

/// Fraction of cells whose distances agree within `tol`.
pub fn agreement(a: &NNField, b: &NNField, tol: f64) -> f64 {
    let hits = a
        .cells
        .iter()
        .zip(&b.cells)
        .filter(|(x, y)| (x.distance - y.distance).abs() <= tol)
        .count();
    hits as f64 / a.cells.len() as f64
}

pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}
