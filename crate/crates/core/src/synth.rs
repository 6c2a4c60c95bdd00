//! Synthetic contaminated datasets.
//!
//! Classes are Gaussian mixtures in feature space; anomalous images are
//! clean draws with one contiguous rectangle of patches redrawn from the
//! same mixture displaced along a per-class random unit direction. The
//! rectangle doubles as the ground-truth mask, so pixel-level metrics are
//! exercisable. Everything is a pure function of `(spec, seed)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::dataset::{DataError, FeatureDataset, PatchFeatureMap};

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Gaussians per class; centers are drawn from a unit normal.
    pub cluster_count: usize,
    /// Standard deviation of each Gaussian.
    pub cluster_spread: f64,
    /// Displacement of the anomalous mixture along the class's random unit
    /// direction. Zero is permitted but degenerate: anomalous patches become
    /// statistically indistinguishable from normal ones.
    pub anomaly_shift: f64,
    /// Inclusive (min, max) side lengths, in patches, of the redrawn
    /// rectangle.
    pub anomaly_region: (usize, usize),
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes == 0
            || self.images_per_class == 0
            || self.height == 0
            || self.width == 0
            || self.channels == 0
            || self.cluster_count == 0
        {
            return Err(DataError::InvalidSpec("all counts must be >= 1"));
        }
        let (lo, hi) = self.anomaly_region;
        if lo == 0 || lo > hi {
            return Err(DataError::InvalidSpec("anomaly_region must satisfy 1 <= min <= max"));
        }
        if hi > self.height.min(self.width) {
            return Err(DataError::InvalidSpec("anomaly_region max exceeds min(H, W)"));
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread < 0.0 {
            return Err(DataError::InvalidSpec("cluster_spread must be finite and >= 0"));
        }
        if !self.anomaly_shift.is_finite() || self.anomaly_shift < 0.0 {
            return Err(DataError::InvalidSpec("anomaly_shift must be finite and >= 0"));
        }
        Ok(())
    }
}

struct ClassModel {
    centers: Vec<Vec<f64>>,
    shift_dir: Vec<f64>,
}

impl ClassModel {
    fn draw(spec: &SynthSpec, rng: &mut ChaCha12Rng) -> Self {
        let centers = (0..spec.cluster_count)
            .map(|_| (0..spec.channels).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut shift_dir: Vec<f64>;
        loop {
            shift_dir = (0..spec.channels).map(|_| rng.sample(StandardNormal)).collect();
            let norm = crate::math::sqrt(shift_dir.iter().map(|v| v * v).sum());
            if norm > 1e-12 {
                for v in &mut shift_dir {
                    *v /= norm;
                }
                break;
            }
        }
        Self { centers, shift_dir }
    }

    fn sample_patch(&self, spec: &SynthSpec, shifted: bool, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let center = &self.centers[rng.random_range(0..self.centers.len())];
        let mut patch = Vec::with_capacity(spec.channels);
        for c in 0..spec.channels {
            let noise: f64 = rng.sample(StandardNormal);
            let mut v = center[c] + spec.cluster_spread * noise;
            if shifted {
                v += spec.anomaly_shift * self.shift_dir[c];
            }
            patch.push(v);
        }
        patch
    }
}

/// Generates `(clean, anomaly_pool)` per the spec: `images_per_class` clean
/// images per class, and the same number of anomalous ones whose masks mark
/// exactly the redrawn rectangle. Deterministic in `spec.seed`; each class
/// uses its own RNG stream.
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
) -> Result<(FeatureDataset, FeatureDataset), DataError> {
    spec.validate()?;
    let mut clean_images = Vec::new();
    let mut clean_classes = Vec::new();
    let mut pool_images = Vec::new();
    let mut pool_classes = Vec::new();
    let mut pool_masks = Vec::new();

    for class in 0..spec.classes {
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        rng.set_stream(class as u64);
        let model = ClassModel::draw(spec, &mut rng);

        for _ in 0..spec.images_per_class {
            clean_images.push(clean_image(spec, &model, &mut rng));
            clean_classes.push(class as u32);
        }
        for _ in 0..spec.images_per_class {
            let (image, mask) = anomalous_image(spec, &model, &mut rng);
            pool_images.push(image);
            pool_masks.push(mask);
            pool_classes.push(class as u32);
        }
    }

    let n_clean = clean_images.len();
    let clean_mask = vec![false; spec.height * spec.width];
    let clean = FeatureDataset::new(
        clean_images,
        clean_classes,
        Some(vec![false; n_clean]),
        Some(vec![clean_mask; n_clean]),
    )?;
    let n_pool = pool_images.len();
    let pool = FeatureDataset::new(
        pool_images,
        pool_classes,
        Some(vec![true; n_pool]),
        Some(pool_masks),
    )?;
    Ok((clean, pool))
}

fn clean_image(spec: &SynthSpec, model: &ClassModel, rng: &mut ChaCha12Rng) -> PatchFeatureMap {
    let mut values = Vec::with_capacity(spec.height * spec.width * spec.channels);
    for _ in 0..spec.height * spec.width {
        values.extend_from_slice(&model.sample_patch(spec, false, rng));
    }
    PatchFeatureMap::new(spec.height, spec.width, spec.channels, values)
        .expect("generated dims are valid")
}

fn anomalous_image(
    spec: &SynthSpec,
    model: &ClassModel,
    rng: &mut ChaCha12Rng,
) -> (PatchFeatureMap, Vec<bool>) {
    let base = clean_image(spec, model, rng);
    let (lo, hi) = spec.anomaly_region;
    let rect_h = rng.random_range(lo..=hi);
    let rect_w = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=spec.height - rect_h);
    let left = rng.random_range(0..=spec.width - rect_w);

    let mut values = base.values().to_vec();
    let mut mask = vec![false; spec.height * spec.width];
    for h in top..top + rect_h {
        for w in left..left + rect_w {
            let patch = model.sample_patch(spec, true, rng);
            let start = (h * spec.width + w) * spec.channels;
            values[start..start + spec.channels].copy_from_slice(&patch);
            mask[h * spec.width + w] = true;
        }
    }
    let image = PatchFeatureMap::new(spec.height, spec.width, spec.channels, values)
        .expect("generated dims are valid");
    (image, mask)
}

/// A contaminated training set plus the identities of the injected images.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub dataset: FeatureDataset,
    /// Indices into the anomaly pool, in injected order; injected images
    /// keep their identity so the same ones can appear in a test split.
    pub pool_indices: Vec<usize>,
}

/// Mixes sampled anomaly-pool images into `clean` so that the per-class
/// anomalous fraction is the nearest achievable to `ratio`. Sampling is
/// stratified by class and deterministic in `seed`. The injected images are
/// appended after the clean block, grouped by ascending class.
pub fn inject_contamination(
    clean: &FeatureDataset,
    anomaly_pool: &FeatureDataset,
    ratio: f64,
    seed: u64,
) -> Result<Injection, DataError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(DataError::InvalidSpec("ratio must be in [0, 1)"));
    }

    let mut picked: Vec<usize> = Vec::new();
    for class in clean.classes() {
        let n = clean.class_indices(class).len();
        // Solve a / (n + a) = ratio for the anomaly count and round to the
        // nearest achievable integer.
        let needed = libm::round(ratio * n as f64 / (1.0 - ratio)) as usize;
        if needed == 0 {
            continue;
        }
        let candidates = anomaly_pool.class_indices(class);
        if candidates.len() < needed {
            return Err(DataError::InsufficientPool {
                class,
                needed,
                available: candidates.len(),
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), needed)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        chosen.sort_unstable();
        picked.extend(chosen);
    }

    let mut images: Vec<PatchFeatureMap> = clean.images().to_vec();
    let mut class_ids = clean.class_ids().to_vec();
    let mut labels: Vec<bool> = match clean.truth_labels() {
        Some(l) => l.to_vec(),
        None => vec![false; clean.len()],
    };
    let want_masks = clean.masks().is_some() || anomaly_pool.masks().is_some();
    let mut masks: Option<Vec<Vec<bool>>> = if want_masks {
        Some(match clean.masks() {
            Some(m) => m.to_vec(),
            None => clean
                .images()
                .iter()
                .map(|img| vec![false; img.patch_count()])
                .collect(),
        })
    } else {
        None
    };

    for &p in &picked {
        images.push(anomaly_pool.image(p).clone());
        class_ids.push(anomaly_pool.class_id(p));
        labels.push(true);
        if let Some(masks) = masks.as_mut() {
            masks.push(match anomaly_pool.mask(p) {
                Some(m) => m.to_vec(),
                None => vec![false; anomaly_pool.image(p).patch_count()],
            });
        }
    }

    let dataset = FeatureDataset::new(images, class_ids, Some(labels), masks)?;
    Ok(Injection {
        dataset,
        pool_indices: picked,
    })
}
