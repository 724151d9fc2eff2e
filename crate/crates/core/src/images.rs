//! Image decoding, resizing to the network input size and a per-image cache of
//! prepared tensors.

use std::collections::HashMap;
use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array3, Array4};

use crate::data::Sample;
use crate::encoders::{prepare_image, BackboneKind, IMAGE_SIDE};
use crate::nn::Real;
use crate::{Error, Result};

/// Decodes an image file and resizes it to 224×224 RGB.
pub fn load_resized(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let side = IMAGE_SIDE as u32;
    Ok(image::imageops::resize(&img.to_rgb8(), side, side, FilterType::Triangle))
}

/// Prepared (normalized and stemmed) tensors, one per distinct image id.
#[derive(Clone, Debug, Default)]
pub struct ImageStore<F> {
    index: HashMap<String, usize>,
    tensors: Vec<Array3<F>>,
}

impl<F: Real> ImageStore<F> {
    pub fn new() -> Self {
        ImageStore {
            index: HashMap::new(),
            tensors: Vec::new(),
        }
    }

    /// Loads every image referenced by `samples` that is not cached yet.
    pub fn extend<'a>(&mut self, kind: BackboneKind, samples: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
        for s in samples {
            if self.index.contains_key(&s.image_id) {
                continue;
            }
            let tensor = prepare_image(kind, &load_resized(&s.image_path)?)?;
            self.index.insert(s.image_id.clone(), self.tensors.len());
            self.tensors.push(tensor);
        }
        Ok(())
    }

    pub fn build<'a>(kind: BackboneKind, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut store = Self::new();
        store.extend(kind, samples)?;
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn tensor(&self, image_id: &str) -> Option<&Array3<F>> {
        self.position(image_id).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Array3<F>] {
        &self.tensors
    }

    /// Stacks the tensors of `image_ids` into a batch.
    pub fn batch(&self, image_ids: &[&str]) -> Result<Array4<F>> {
        let views = image_ids
            .iter()
            .map(|id| {
                self.tensor(id)
                    .ok_or_else(|| Error::InvalidInput(format!("image `{id}` is not in the store")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::encoders::stack_images(&views))
    }
}
