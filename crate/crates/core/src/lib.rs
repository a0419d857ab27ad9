//! Compositional nearest neighbors for pixel-level encoder-decoder CNNs.
//!
//! A query image's per-layer activation tensor is matched, hyperpatch by
//! hyperpatch, against the tensors of a training database. The resulting
//! nearest-neighbor field is turned back into images by copying the matched
//! training patches, which shows what each layer retains of the input and
//! what it contributes to the output.
//!
//! - [`tensor`]: activation tensors, hyperpatch views, cosine distance, layer geometry
//! - [`database`]: training pairs and global-descriptor pruning
//! - [`search`]: exhaustive and PatchMatch-style field search
//! - [`compose`]: reconstructions and correspondence visualizations
//! - [`metrics`]: label quantization, mean pixel accuracy, mean IoU
//! - [`store`]: tensor files, field dumps, manifests and ingest

pub mod compose;
pub mod database;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod search;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
