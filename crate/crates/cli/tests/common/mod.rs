#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::Command;

use compnn_core::metrics::PaletteEntry;
use compnn_core::store::{write_png, write_tensor, ImageSize, Manifest, ManifestLayer, ManifestPair};
use compnn_core::tensor::{ActivationTensor, LayerRole};
use image::{Rgb, RgbImage};
use serde_json::Value;

pub const LAYER: &str = "feat";
pub const DESCRIPTOR: &str = "bottleneck";

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", self.stdout))
    }

    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stderr: {}", self.stderr);
        self
    }
}

pub fn compnn<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let out = Command::new(env!("CARGO_BIN_EXE_compnn"))
        .args(args)
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

#[track_caller]
pub fn assert_schema(name: &str, value: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{value:#}");
}

pub fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1)
    }

    pub fn next(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    pub fn unit(&mut self) -> f32 {
        ((self.next() >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }

    pub fn below(&mut self, n: u8) -> u8 {
        ((self.next() >> 32) % u64::from(n)) as u8
    }
}

pub const PALETTE: [(&str, [u8; 3]); 4] = [
    ("background", [0, 0, 0]),
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
];

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub pairs: usize,
    pub side: usize,
    pub depth: usize,
    pub scale: usize,
    pub seed: u64,
    /// Pairs with a red-dominated output, tagged `red`.
    pub red: Vec<u32>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            pairs: 4,
            side: 6,
            depth: 4,
            scale: 2,
            seed: 1,
            red: vec![],
        }
    }
}

fn random_tensor(layer: &str, h: usize, w: usize, d: usize, rng: &mut TestRng) -> ActivationTensor {
    ActivationTensor::new(layer, h, w, d, (0..h * w * d).map(|_| rng.unit()).collect()).unwrap()
}

/// Writes tensors, images, a palette and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, opts: &DatasetOptions) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = TestRng::new(opts.seed);
    let px = (opts.side * opts.scale) as u32;
    let mut pairs = Vec::new();
    for i in 0..opts.pairs as u32 {
        let feat = random_tensor(LAYER, opts.side, opts.side, opts.depth, &mut rng);
        let desc = random_tensor(DESCRIPTOR, 2, 2, 8, &mut rng);
        let input = RgbImage::from_fn(px, px, |_, _| Rgb([rng.below(255), rng.below(255), rng.below(255)]));
        let red = opts.red.contains(&i);
        let output = RgbImage::from_fn(px, px, |_, _| {
            if red {
                Rgb([200 + rng.below(56), rng.below(50), rng.below(50)])
            } else {
                Rgb([rng.below(50), rng.below(255), 100 + rng.below(156)])
            }
        });
        let (inp, outp, featp, descp) = (
            format!("in{i}.png"),
            format!("out{i}.png"),
            format!("feat{i}.chpt"),
            format!("desc{i}.chpt"),
        );
        write_png(&input, &dir.join(&inp)).unwrap();
        write_png(&output, &dir.join(&outp)).unwrap();
        write_tensor(&feat, &dir.join(&featp)).unwrap();
        write_tensor(&desc, &dir.join(&descp)).unwrap();
        pairs.push(ManifestPair {
            id: i,
            input_png: inp.into(),
            output_png: outp.into(),
            tensors: BTreeMap::from([
                (LAYER.to_string(), featp.into()),
                (DESCRIPTOR.to_string(), descp.into()),
            ]),
            tags: if red { vec!["red".into()] } else { vec![] },
        });
    }
    let palette: Vec<PaletteEntry> = PALETTE
        .iter()
        .map(|(n, c)| PaletteEntry {
            name: n.to_string(),
            rgb_hex: format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
        })
        .collect();
    std::fs::write(
        dir.join("palette.json"),
        serde_json::to_string_pretty(&palette).unwrap(),
    )
    .unwrap();
    let manifest = Manifest {
        image_size: ImageSize { w: px, h: px },
        layers: vec![
            ManifestLayer {
                name: LAYER.into(),
                hyperpatch: [2, 2, opts.depth],
                patch_size: 2 * opts.scale,
                scale: opts.scale,
                role: LayerRole::Encoder,
            },
            ManifestLayer {
                name: DESCRIPTOR.into(),
                hyperpatch: [1, 1, 8],
                patch_size: 1,
                scale: 1,
                role: LayerRole::Descriptor,
            },
        ],
        pairs,
        palette: Some("palette.json".into()),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    path
}

/// Label image built from palette colors, class chosen by `f(x, y)`.
pub fn label_png(path: &Path, width: u32, height: u32, f: impl Fn(u32, u32) -> usize) {
    let image = RgbImage::from_fn(width, height, |x, y| Rgb(PALETTE[f(x, y)].1));
    write_png(&image, path).unwrap();
}

pub fn read_rgb(path: &Path) -> RgbImage {
    image::open(path).unwrap().to_rgb8()
}

pub fn mean_red(image: &RgbImage) -> f64 {
    image.pixels().map(|p| f64::from(p[0])).sum::<f64>() / f64::from(image.width() * image.height())
}
