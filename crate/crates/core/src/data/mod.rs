//! Datasets, split protocols, augmentation and batching.

mod augment;
mod batches;
mod import;
mod split;
mod synth;

pub use augment::{augment, crop, hflip, resize_bilinear, AugmentConfig, AugmentMode};
pub use batches::{make_batches, BatchMode, BatchSampler};
pub use import::{import_folder, DatasetManifest};
pub use split::{split, Split, SplitMode, SplitSpec};
pub use synth::gen_synthetic;

use crate::tensor::Tensor;

/// An `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub class_id: usize,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Images addressed by position; a sample's id is its index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
    /// Display name per class id.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.class_id).collect()
    }

    /// Sample ids grouped by class, each group in ascending id order.
    pub fn ids_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (id, img) in self.images.iter().enumerate() {
            out[img.class_id].push(id);
        }
        out
    }
}
