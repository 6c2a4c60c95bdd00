//! Bootstrapped memory-bank ensembles.
//!
//! A memory bank holds every patch feature of a subsample of same-class
//! training images. A patch's score against a bank is its Euclidean
//! distance to the nearest stored vector, and the ensemble score is the
//! average over the banks. Subsampling is at image granularity: an image
//! contributes either all of its patches to a bank or none, so an
//! anomalous training image is absent from a fraction of the banks and its
//! patches keep nonzero scores there.

use alloc::vec::Vec;
use core::num::NonZeroUsize;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use alloc::collections::BTreeMap;

use crate::dataset::{DataError, FeatureDataset, PatchFeatureMap};
use crate::math::sqrt;

/// Per-patch scalar scores on an `height x width` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 {
            return Err(DataError::ZeroDim);
        }
        if values.len() != height * width {
            return Err(DataError::BadLength {
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// All patch vectors of a set of same-class images.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    class_id: u32,
    channels: usize,
    vectors: Vec<f64>,
    image_indices: Vec<usize>,
}

impl MemoryBank {
    /// Builds a bank from the given dataset images, which must all belong
    /// to `class_id`. `image_indices` must be nonempty.
    pub fn from_images(
        dataset: &FeatureDataset,
        class_id: u32,
        mut image_indices: Vec<usize>,
    ) -> Result<Self, DataError> {
        if image_indices.is_empty() {
            return Err(DataError::InvalidSpec("memory bank needs at least one image"));
        }
        image_indices.sort_unstable();
        image_indices.dedup();
        let mut channels = None;
        let mut vectors = Vec::new();
        for &i in &image_indices {
            if i >= dataset.len() || dataset.class_id(i) != class_id {
                return Err(DataError::ShapeMismatch { class: class_id });
            }
            let image = dataset.image(i);
            match channels {
                None => channels = Some(image.channels()),
                Some(c) if c != image.channels() => {
                    return Err(DataError::ShapeMismatch { class: class_id })
                }
                _ => {}
            }
            vectors.extend_from_slice(image.values());
        }
        Ok(Self {
            class_id,
            channels: channels.expect("nonempty"),
            vectors,
            image_indices,
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of stored patch vectors.
    pub fn len(&self) -> usize {
        self.vectors.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.channels..(i + 1) * self.channels]
    }

    /// Source images, ascending.
    pub fn image_indices(&self) -> &[usize] {
        &self.image_indices
    }

    /// Euclidean distance from `query` to the nearest stored vector.
    pub fn nn_distance(&self, query: &[f64]) -> Result<f64, DataError> {
        if query.len() != self.channels {
            return Err(DataError::Misaligned("query channel count differs from bank"));
        }
        let mut best = f64::INFINITY;
        for chunk in self.vectors.chunks_exact(self.channels) {
            let mut acc = 0.0;
            for (a, b) in chunk.iter().zip(query) {
                let d = a - b;
                acc += d * d;
            }
            if acc < best {
                best = acc;
            }
        }
        Ok(sqrt(best))
    }

    /// Scores every patch of `image` against this bank.
    pub fn score_image(&self, image: &PatchFeatureMap) -> Result<ScoreMap, DataError> {
        let mut values = Vec::with_capacity(image.patch_count());
        for (_, _, feature) in image.patches() {
            values.push(self.nn_distance(feature)?);
        }
        ScoreMap::new(image.height(), image.width(), values)
    }
}

/// `bank_count` bootstrapped banks per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEnsemble {
    banks: BTreeMap<u32, Vec<MemoryBank>>,
    subsample_ratio: f64,
}

impl MemoryEnsemble {
    /// Builds the ensemble over every class in `dataset`. Each bank draws
    /// `ceil(ratio * class size)` images without replacement, independently
    /// per bank; each class uses its own RNG stream of `seed`.
    pub fn build(
        dataset: &FeatureDataset,
        bank_count: NonZeroUsize,
        subsample_ratio: f64,
        seed: u64,
    ) -> Result<Self, DataError> {
        if !(subsample_ratio > 0.0 && subsample_ratio <= 1.0) {
            return Err(DataError::InvalidSpec("subsample_ratio must be in (0, 1]"));
        }
        let mut banks = BTreeMap::new();
        for class in dataset.classes() {
            let members = dataset.class_indices(class);
            let take = subsample_count(members.len(), subsample_ratio);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(class as u64);
            let mut class_banks = Vec::with_capacity(bank_count.get());
            for _ in 0..bank_count.get() {
                let chosen: Vec<usize> =
                    rand::seq::index::sample(&mut rng, members.len(), take)
                        .into_iter()
                        .map(|i| members[i])
                        .collect();
                class_banks.push(MemoryBank::from_images(dataset, class, chosen)?);
            }
            banks.insert(class, class_banks);
        }
        Ok(Self {
            banks,
            subsample_ratio,
        })
    }

    pub fn subsample_ratio(&self) -> f64 {
        self.subsample_ratio
    }

    pub fn classes(&self) -> Vec<u32> {
        self.banks.keys().copied().collect()
    }

    pub fn banks(&self, class: u32) -> Result<&[MemoryBank], DataError> {
        self.banks
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(DataError::UnknownClass(class))
    }

    /// Ensemble score: the per-patch average of the bank score maps for
    /// `class`.
    pub fn score_image(
        &self,
        class: u32,
        image: &PatchFeatureMap,
    ) -> Result<ScoreMap, DataError> {
        let banks = self.banks(class)?;
        let mut acc = alloc::vec![0.0f64; image.patch_count()];
        for bank in banks {
            let map = bank.score_image(image)?;
            for (a, v) in acc.iter_mut().zip(map.values()) {
                *a += v;
            }
        }
        let scale = 1.0 / banks.len() as f64;
        for a in &mut acc {
            *a *= scale;
        }
        ScoreMap::new(image.height(), image.width(), acc)
    }

    /// Scores every image of `dataset` against its own class's banks, in
    /// dataset order. This is the cached teacher signal for distillation.
    pub fn score_dataset(&self, dataset: &FeatureDataset) -> Result<Vec<ScoreMap>, DataError> {
        let mut out = Vec::with_capacity(dataset.len());
        for i in 0..dataset.len() {
            out.push(self.score_image(dataset.class_id(i), dataset.image(i))?);
        }
        Ok(out)
    }
}

fn subsample_count(class_size: usize, ratio: f64) -> usize {
    let raw = libm::ceil(ratio * class_size as f64) as usize;
    raw.clamp(1, class_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, SynthSpec};

    fn bank_count(n: usize) -> NonZeroUsize {
        NonZeroUsize::new(n).unwrap()
    }

    fn tiny_dataset(classes: usize, per_class: usize) -> FeatureDataset {
        let spec = SynthSpec {
            classes,
            images_per_class: per_class,
            height: 3,
            width: 3,
            channels: 2,
            cluster_count: 2,
            cluster_spread: 0.3,
            anomaly_shift: 1.0,
            anomaly_region: (1, 2),
            seed: 21,
        };
        generate_synthetic_dataset(&spec).unwrap().0
    }

    #[test]
    fn nn_distance_matches_brute_force() {
        let data = tiny_dataset(1, 6);
        let bank =
            MemoryBank::from_images(&data, 0, (0..data.len()).collect()).unwrap();
        let query = [0.25f64, -0.75];

        // Independent oracle: scan every patch of every image directly.
        let mut best = f64::INFINITY;
        for img in data.images() {
            for (_, _, f) in img.patches() {
                let d = ((f[0] - query[0]).powi(2) + (f[1] - query[1]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        assert_eq!(bank.nn_distance(&query).unwrap(), best);
    }

    #[test]
    fn nn_distance_on_a_hand_checked_bank() {
        // Bank {(0,0), (1,0), (0,2)}, query (1,1): distances sqrt(2), 1,
        // sqrt(2), so the minimum is exactly 1.
        let images = alloc::vec![
            PatchFeatureMap::new(1, 1, 2, alloc::vec![0.0, 0.0]).unwrap(),
            PatchFeatureMap::new(1, 1, 2, alloc::vec![1.0, 0.0]).unwrap(),
            PatchFeatureMap::new(1, 1, 2, alloc::vec![0.0, 2.0]).unwrap(),
        ];
        let data = FeatureDataset::new(images, alloc::vec![0, 0, 0], None, None).unwrap();
        let bank = MemoryBank::from_images(&data, 0, alloc::vec![0, 1, 2]).unwrap();
        assert_eq!(bank.nn_distance(&[1.0, 1.0]).unwrap(), 1.0);
        let single = MemoryBank::from_images(&data, 0, alloc::vec![2]).unwrap();
        let q = [3.0, 6.0];
        assert_eq!(single.nn_distance(&q).unwrap(), 5.0);
        assert!(bank.nn_distance(&[1.0]).is_err());
    }

    #[test]
    fn own_patches_score_zero() {
        let data = tiny_dataset(1, 4);
        let bank =
            MemoryBank::from_images(&data, 0, (0..data.len()).collect()).unwrap();
        let map = bank.score_image(data.image(2)).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn growing_a_bank_never_raises_scores() {
        let data = tiny_dataset(1, 6);
        let small = MemoryBank::from_images(&data, 0, alloc::vec![0, 1]).unwrap();
        let large = MemoryBank::from_images(&data, 0, alloc::vec![0, 1, 2, 3]).unwrap();
        let probe = data.image(5);
        let s = small.score_image(probe).unwrap();
        let l = large.score_image(probe).unwrap();
        for (a, b) in l.values().iter().zip(s.values()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn ensemble_average_is_exact_and_bounded() {
        let data = tiny_dataset(1, 10);
        let ensemble = MemoryEnsemble::build(&data, bank_count(7), 0.3, 5).unwrap();
        let probe = tiny_dataset(1, 12);
        let image = probe.image(11);
        let combined = ensemble.score_image(0, image).unwrap();

        let banks = ensemble.banks(0).unwrap();
        let maps: Vec<ScoreMap> = banks
            .iter()
            .map(|b| b.score_image(image).unwrap())
            .collect();
        for p in 0..image.patch_count() {
            let mean: f64 =
                maps.iter().map(|m| m.values()[p]).sum::<f64>() / maps.len() as f64;
            let lo = maps.iter().map(|m| m.values()[p]).fold(f64::INFINITY, f64::min);
            let hi = maps
                .iter()
                .map(|m| m.values()[p])
                .fold(f64::NEG_INFINITY, f64::max);
            let got = combined.values()[p];
            assert!((got - mean).abs() < 1e-12);
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }

    #[test]
    fn full_ratio_banks_are_identical() {
        let data = tiny_dataset(1, 5);
        let ensemble = MemoryEnsemble::build(&data, bank_count(4), 1.0, 9).unwrap();
        let banks = ensemble.banks(0).unwrap();
        for b in banks {
            assert_eq!(b.image_indices(), &[0, 1, 2, 3, 4]);
        }
        // With every image in every bank the ensemble equals a single bank.
        let map = ensemble.score_image(0, data.image(1)).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn banks_stay_inside_their_class() {
        let data = tiny_dataset(3, 8);
        let ensemble = MemoryEnsemble::build(&data, bank_count(10), 0.25, 1).unwrap();
        assert_eq!(ensemble.classes(), alloc::vec![0, 1, 2]);
        for class in ensemble.classes() {
            let members = data.class_indices(class);
            for bank in ensemble.banks(class).unwrap() {
                assert_eq!(bank.image_indices().len(), 2); // ceil(0.25 * 8)
                for idx in bank.image_indices() {
                    assert!(members.contains(idx));
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let data = tiny_dataset(2, 9);
        let a = MemoryEnsemble::build(&data, bank_count(6), 0.4, 42).unwrap();
        let b = MemoryEnsemble::build(&data, bank_count(6), 0.4, 42).unwrap();
        let c = MemoryEnsemble::build(&data, bank_count(6), 0.4, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn subsample_count_rounds_up_and_clamps() {
        assert_eq!(subsample_count(10, 0.1), 1);
        assert_eq!(subsample_count(10, 0.25), 3);
        assert_eq!(subsample_count(10, 1.0), 10);
        assert_eq!(subsample_count(3, 0.01), 1);
    }

    #[test]
    fn score_dataset_uses_each_images_class() {
        let data = tiny_dataset(2, 4);
        let ensemble = MemoryEnsemble::build(&data, bank_count(3), 0.5, 2).unwrap();
        let maps = ensemble.score_dataset(&data).unwrap();
        assert_eq!(maps.len(), data.len());
        for (i, map) in maps.iter().enumerate() {
            let direct = ensemble
                .score_image(data.class_id(i), data.image(i))
                .unwrap();
            assert_eq!(*map, direct);
        }
    }

    #[test]
    fn unknown_class_is_reported() {
        let data = tiny_dataset(1, 3);
        let ensemble = MemoryEnsemble::build(&data, bank_count(2), 0.5, 0).unwrap();
        let err = ensemble.score_image(7, data.image(0)).unwrap_err();
        assert_eq!(err, DataError::UnknownClass(7));
    }
}
