//! The training set: pixel-aligned image pairs with their per-layer tensors,
//! plus global-descriptor pruning.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::{vector_cosine_distance, ActivationTensor, LayerSpec};

/// Number of global neighbors kept before patch search.
pub const DEFAULT_TOP_K: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub image_id: u32,
    pub input_image: RgbImage,
    pub output_image: RgbImage,
    pub tensors: BTreeMap<String, ActivationTensor>,
    pub tags: Vec<String>,
    global_descriptor: Vec<f32>,
}

impl TrainingPair {
    pub fn new(
        image_id: u32,
        input_image: RgbImage,
        output_image: RgbImage,
        tensors: impl IntoIterator<Item = ActivationTensor>,
    ) -> Self {
        TrainingPair {
            image_id,
            input_image,
            output_image,
            tensors: tensors.into_iter().map(|t| (t.layer_name().to_string(), t)).collect(),
            tags: Vec::new(),
            global_descriptor: Vec::new(),
        }
    }

    pub fn with_tags(mut self, tags: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }

    pub fn tensor(&self, layer: &str) -> Result<&ActivationTensor> {
        self.tensors
            .get(layer)
            .ok_or_else(|| Error::Config(format!("pair {} has no tensor for layer `{layer}`", self.image_id)))
    }

    pub fn global_descriptor(&self) -> &[f32] {
        &self.global_descriptor
    }
}

/// Immutable, validated training database.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDatabase {
    pairs: Vec<TrainingPair>,
    layer_specs: BTreeMap<String, LayerSpec>,
    layer_dims: BTreeMap<String, (usize, usize, usize)>,
    descriptor_layer: Option<String>,
}

impl TrainingDatabase {
    /// Validates the pairs against the layer specs and precomputes the
    /// global descriptors. Pair ids must be exactly `0..N` in order.
    pub fn new(
        pairs: Vec<TrainingPair>,
        layer_specs: impl IntoIterator<Item = LayerSpec>,
        descriptor_layer: Option<String>,
    ) -> Result<Self> {
        let layer_specs: BTreeMap<String, LayerSpec> = layer_specs.into_iter().map(|s| (s.name.clone(), s)).collect();
        for spec in layer_specs.values() {
            spec.validate()?;
        }
        if let Some(name) = &descriptor_layer {
            if !layer_specs.contains_key(name) {
                return Err(Error::Config(format!(
                    "descriptor layer `{name}` is not a declared layer"
                )));
            }
        }

        let mut seen = BTreeMap::new();
        for (index, pair) in pairs.iter().enumerate() {
            if seen.insert(pair.image_id, index).is_some() {
                return Err(Error::DuplicateId(pair.image_id));
            }
        }
        for (index, pair) in pairs.iter().enumerate() {
            if pair.image_id as usize != index {
                return Err(Error::Config(format!(
                    "pair ids must be dense from 0 in order; position {index} holds id {}",
                    pair.image_id
                )));
            }
        }

        let mut image_size = None;
        let mut layer_dims: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for pair in &pairs {
            let input_dims = pair.input_image.dimensions();
            let output_dims = pair.output_image.dimensions();
            if input_dims != output_dims {
                return Err(Error::ShapeMismatch {
                    pair: pair.image_id,
                    layer: "<images>".into(),
                    expected: format!("output image {}x{}", input_dims.0, input_dims.1),
                    found: format!("{}x{}", output_dims.0, output_dims.1),
                });
            }
            match image_size {
                None => image_size = Some(input_dims),
                Some(size) if size != input_dims => {
                    return Err(Error::ShapeMismatch {
                        pair: pair.image_id,
                        layer: "<images>".into(),
                        expected: format!("image {}x{}", size.0, size.1),
                        found: format!("{}x{}", input_dims.0, input_dims.1),
                    });
                }
                Some(_) => {}
            }
            for (name, spec) in &layer_specs {
                let tensor = pair.tensors.get(name).ok_or_else(|| Error::ShapeMismatch {
                    pair: pair.image_id,
                    layer: name.clone(),
                    expected: "a tensor".into(),
                    found: "none".into(),
                })?;
                let dims = tensor.dims();
                let mismatch = |expected: String| Error::ShapeMismatch {
                    pair: pair.image_id,
                    layer: name.clone(),
                    expected,
                    found: format!("{}x{}x{}", dims.0, dims.1, dims.2),
                };
                if spec.check_tensor(tensor).is_err() {
                    return Err(mismatch(format!(
                        "depth {} and at least {}x{} cells",
                        spec.depth, spec.hyperpatch_h, spec.hyperpatch_w
                    )));
                }
                match layer_dims.get(name) {
                    None => {
                        layer_dims.insert(name.clone(), dims);
                    }
                    Some(&known) if known != dims => {
                        return Err(mismatch(format!("{}x{}x{}", known.0, known.1, known.2)));
                    }
                    Some(_) => {}
                }
            }
        }

        let mut pairs = pairs;
        if let Some(name) = &descriptor_layer {
            for pair in &mut pairs {
                let tensor = pair.tensor(name)?;
                pair.global_descriptor = global_descriptor(tensor, name)?;
            }
        }

        Ok(TrainingDatabase {
            pairs,
            layer_specs,
            layer_dims,
            descriptor_layer,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    pub fn pair(&self, id: u32) -> Result<&TrainingPair> {
        self.pairs
            .get(id as usize)
            .ok_or_else(|| Error::Config(format!("no pair with id {id} (database has {})", self.len())))
    }

    pub fn ids(&self) -> Vec<u32> {
        (0..self.pairs.len() as u32).collect()
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layer_specs
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown layer `{name}`")))
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layer_specs.values()
    }

    /// `(H, W, D)` shared by every pair's tensor at `layer`.
    pub fn layer_dims(&self, layer: &str) -> Option<(usize, usize, usize)> {
        self.layer_dims.get(layer).copied()
    }

    pub fn descriptor_layer(&self) -> Option<&str> {
        self.descriptor_layer.as_deref()
    }

    /// Width and height shared by all images, if any pair exists.
    pub fn image_size(&self) -> Option<(u32, u32)> {
        self.pairs.first().map(|p| p.input_image.dimensions())
    }

    /// Keeps the pairs accepted by `keep`, re-numbering them densely in
    /// ascending order of their old ids. Returns the new database and the
    /// old id of each new id.
    pub fn filtered(&self, keep: impl Fn(&TrainingPair) -> bool) -> Result<(TrainingDatabase, Vec<u32>)> {
        let mut mapping = Vec::new();
        let mut pairs = Vec::new();
        for pair in self.pairs.iter().filter(|p| keep(p)) {
            mapping.push(pair.image_id);
            let mut pair = pair.clone();
            pair.image_id = pairs.len() as u32;
            pairs.push(pair);
        }
        if pairs.is_empty() {
            return Err(Error::EmptySet("filter retained no pairs".into()));
        }
        let db = TrainingDatabase::new(pairs, self.layer_specs.values().cloned(), self.descriptor_layer.clone())?;
        Ok((db, mapping))
    }
}

/// Flattens the whole descriptor-layer tensor in row-major order.
pub fn global_descriptor(tensor: &ActivationTensor, descriptor_layer: &str) -> Result<Vec<f32>> {
    if tensor.layer_name() != descriptor_layer {
        return Err(Error::Config(format!(
            "tensor belongs to layer `{}`, descriptors come from `{descriptor_layer}`",
            tensor.layer_name()
        )));
    }
    Ok(tensor.values().to_vec())
}

/// Ids of the `k` pairs whose descriptors are closest to the query, nearest
/// first, ties broken by ascending id.
pub fn top_k_neighbors(db: &TrainingDatabase, query_descriptor: &[f32], k: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::Config("top_k must be ≥ 1".into()));
    }
    if db.is_empty() {
        return Err(Error::EmptySet("the training database is empty".into()));
    }
    if db.descriptor_layer().is_none() {
        return Err(Error::Config("the database declares no descriptor layer".into()));
    }
    let mut ranked = db
        .pairs()
        .iter()
        .map(|pair| {
            Ok((
                vector_cosine_distance(query_descriptor, pair.global_descriptor())?,
                pair.image_id,
            ))
        })
        .collect::<Result<Vec<(f64, u32)>>>()?;
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, id)| id).collect())
}
