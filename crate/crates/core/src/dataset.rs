//! Patch-feature data model.
//!
//! A [`PatchFeatureMap`] is one image's `H x W` grid of `C`-dimensional
//! features, as produced by some frozen external encoder. A
//! [`FeatureDataset`] is a collection of such maps with class ids and,
//! optionally, per-image contamination labels and per-patch ground-truth
//! masks. Truth labels exist for auditing and evaluation only; training code
//! never reads them.

use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(&'static str),
    #[error("non-finite feature value at flat index {0}")]
    NonFinite(usize),
    #[error("dimensions must be nonzero")]
    ZeroDim,
    #[error("value length {got} does not match H*W*C = {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("images of class {class} disagree on shape")]
    ShapeMismatch { class: u32 },
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("per-image field lengths disagree: {0}")]
    Misaligned(&'static str),
    #[error("image {0} is labeled normal but its mask is not all-zero")]
    MaskOnNormal(usize),
    #[error("anomaly pool exhausted for class {class}: needed {needed}, have {available}")]
    InsufficientPool {
        class: u32,
        needed: usize,
        available: usize,
    },
}

/// One image's dense `H x W x C` feature grid, row-major in `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl PatchFeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DataError::ZeroDim);
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(DataError::BadLength {
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn patch_count(&self) -> usize {
        self.height * self.width
    }

    /// The `C`-dim feature at grid position `(h, w)`.
    pub fn patch(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Row-major iterator over `(h, w, feature)`.
    pub fn patches(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        let w = self.width;
        self.values
            .chunks_exact(self.channels)
            .enumerate()
            .map(move |(i, v)| (i / w, i % w, v))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A collection of feature maps with class ids, optional hidden
/// contamination labels, and optional per-patch ground-truth masks.
///
/// Images of the same class always share one `(H, W, C)` shape. Masks, when
/// present, are `H*W` grids aligned with the patch grid and are all-zero
/// exactly for images labeled normal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    images: Vec<PatchFeatureMap>,
    class_ids: Vec<u32>,
    truth_labels: Option<Vec<bool>>,
    pixel_masks: Option<Vec<Vec<bool>>>,
}

impl FeatureDataset {
    pub fn new(
        images: Vec<PatchFeatureMap>,
        class_ids: Vec<u32>,
        truth_labels: Option<Vec<bool>>,
        pixel_masks: Option<Vec<Vec<bool>>>,
    ) -> Result<Self, DataError> {
        if class_ids.len() != images.len() {
            return Err(DataError::Misaligned("class_ids"));
        }
        if let Some(labels) = &truth_labels {
            if labels.len() != images.len() {
                return Err(DataError::Misaligned("truth_labels"));
            }
        }
        if let Some(masks) = &pixel_masks {
            if masks.len() != images.len() {
                return Err(DataError::Misaligned("pixel_masks"));
            }
            for (i, (mask, image)) in masks.iter().zip(images.iter()).enumerate() {
                if mask.len() != image.patch_count() {
                    return Err(DataError::Misaligned("mask grid"));
                }
                if let Some(labels) = &truth_labels {
                    if !labels[i] && mask.iter().any(|&m| m) {
                        return Err(DataError::MaskOnNormal(i));
                    }
                }
            }
        }
        // Shape agreement within each class.
        for (i, image) in images.iter().enumerate() {
            let class = class_ids[i];
            if let Some(j) = class_ids[..i].iter().position(|&c| c == class) {
                if images[j].shape() != image.shape() {
                    return Err(DataError::ShapeMismatch { class });
                }
            }
        }
        Ok(Self {
            images,
            class_ids,
            truth_labels,
            pixel_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &PatchFeatureMap {
        &self.images[index]
    }

    pub fn images(&self) -> &[PatchFeatureMap] {
        &self.images
    }

    pub fn class_id(&self, index: usize) -> u32 {
        self.class_ids[index]
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    /// Sorted, deduplicated class ids.
    pub fn classes(&self) -> Vec<u32> {
        let mut classes = self.class_ids.clone();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    /// Indices of all images of `class`, in dataset order.
    pub fn class_indices(&self, class: u32) -> Vec<usize> {
        self.class_ids
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Shape shared by the images of `class`.
    pub fn class_shape(&self, class: u32) -> Result<(usize, usize, usize), DataError> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|i| self.images[i].shape())
            .ok_or(DataError::UnknownClass(class))
    }

    pub fn truth_labels(&self) -> Option<&[bool]> {
        self.truth_labels.as_deref()
    }

    pub fn truth_label(&self, index: usize) -> Option<bool> {
        self.truth_labels.as_ref().map(|l| l[index])
    }

    pub fn mask(&self, index: usize) -> Option<&[bool]> {
        self.pixel_masks.as_ref().map(|m| m[index].as_slice())
    }

    pub fn masks(&self) -> Option<&[Vec<bool>]> {
        self.pixel_masks.as_deref()
    }

    /// Fraction of images whose truth label is anomalous, when labels exist.
    pub fn noise_ratio(&self) -> Option<f64> {
        let labels = self.truth_labels.as_ref()?;
        if labels.is_empty() {
            return None;
        }
        let anomalous = labels.iter().filter(|&&l| l).count();
        Some(anomalous as f64 / labels.len() as f64)
    }

    /// New dataset holding clones of the selected images, in `indices` order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let class_ids = indices.iter().map(|&i| self.class_ids[i]).collect();
        let truth_labels = self
            .truth_labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let pixel_masks = self
            .pixel_masks
            .as_ref()
            .map(|m| indices.iter().map(|&i| m[i].clone()).collect());
        Self {
            images,
            class_ids,
            truth_labels,
            pixel_masks,
        }
    }
}

/// Back-reference from a pooled patch to its source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRef {
    /// Index into the originating dataset.
    pub image: usize,
    pub h: usize,
    pub w: usize,
}

/// All patch features of one class, flattened in `(image, h, w)`
/// lexicographic order.
#[derive(Debug, Clone)]
pub struct PatchPool {
    class_id: u32,
    channels: usize,
    vectors: Vec<f64>,
    refs: Vec<PatchRef>,
}

impl PatchPool {
    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        let start = index * self.channels;
        &self.vectors[start..start + self.channels]
    }

    pub fn refs(&self) -> &[PatchRef] {
        &self.refs
    }

    pub fn iter(&self) -> impl Iterator<Item = (PatchRef, &[f64])> {
        self.refs
            .iter()
            .copied()
            .zip(self.vectors.chunks_exact(self.channels))
    }
}

/// Flattens every patch feature of `class_id` into one pool with
/// back-references, ordered by ascending image index then row-major `(h, w)`.
pub fn pool_patch_features(
    dataset: &FeatureDataset,
    class_id: u32,
) -> Result<PatchPool, DataError> {
    let (_, _, channels) = dataset.class_shape(class_id)?;
    let indices = dataset.class_indices(class_id);
    let patches_per_image = dataset.image(indices[0]).patch_count();
    let mut vectors = Vec::with_capacity(indices.len() * patches_per_image * channels);
    let mut refs = Vec::with_capacity(indices.len() * patches_per_image);
    for &i in &indices {
        for (h, w, feature) in dataset.image(i).patches() {
            vectors.extend_from_slice(feature);
            refs.push(PatchRef { image: i, h, w });
        }
    }
    Ok(PatchPool {
        class_id,
        channels,
        vectors,
        refs,
    })
}

/// Test helper: an all-zero mask grid.
pub fn empty_mask(height: usize, width: usize) -> Vec<bool> {
    vec![false; height * width]
}
