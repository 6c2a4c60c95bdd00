//! The trainable student and its two objectives.
//!
//! The student is a per-patch bottleneck map `R^C -> R^h -> R^C` with a
//! tanh hidden layer, `h = max(2, ceil(C/4))`. Its reconstruction score is
//! the Euclidean distance between a patch feature and its reconstruction,
//! so a patch the student has learned scores near zero. Distillation fits
//! the student's score map to a cached teacher map; fine-tuning minimizes
//! the mean score itself. Both losses come with exact analytic gradients;
//! the scores' square-root kink at zero takes the subgradient 0.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::dataset::{DataError, FeatureDataset, PatchFeatureMap};
use crate::math::{powi, sqrt, tanh, KahanSum};
use crate::memory::ScoreMap;

/// Hidden width for `channels` input channels.
pub fn hidden_width(channels: usize) -> usize {
    channels.div_ceil(4).max(2)
}

/// Student parameters, flat layout `[W1 (h x C) | b1 (h) | W2 (C x h) | b2 (C)]`,
/// both weight blocks row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructor {
    channels: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl Reconstructor {
    pub fn param_count_for(channels: usize) -> usize {
        let h = hidden_width(channels);
        2 * h * channels + h + channels
    }

    /// Fan-in scaled zero-mean init, biases zero. Deterministic in `seed`.
    pub fn init(channels: usize, seed: u64) -> Result<Self, DataError> {
        if channels == 0 {
            return Err(DataError::ZeroDim);
        }
        let h = hidden_width(channels);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut params = vec![0.0; Self::param_count_for(channels)];
        let w1_scale = 1.0 / sqrt(channels as f64);
        for p in params.iter_mut().take(h * channels) {
            let z: f64 = rng.sample(StandardNormal);
            *p = w1_scale * z;
        }
        let w2_scale = 1.0 / sqrt(h as f64);
        let w2_start = h * channels + h;
        for p in params.iter_mut().skip(w2_start).take(channels * h) {
            let z: f64 = rng.sample(StandardNormal);
            *p = w2_scale * z;
        }
        Ok(Self {
            channels,
            hidden: h,
            params,
        })
    }

    pub fn from_params(channels: usize, params: Vec<f64>) -> Result<Self, DataError> {
        if channels == 0 {
            return Err(DataError::ZeroDim);
        }
        let expected = Self::param_count_for(channels);
        if params.len() != expected {
            return Err(DataError::BadLength {
                expected,
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            channels,
            hidden: hidden_width(channels),
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Finiteness is the caller's responsibility while mutating.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1(&self) -> &[f64] {
        &self.params[..self.hidden * self.channels]
    }

    fn b1(&self) -> &[f64] {
        let s = self.hidden * self.channels;
        &self.params[s..s + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let s = self.hidden * self.channels + self.hidden;
        &self.params[s..s + self.channels * self.hidden]
    }

    fn b2(&self) -> &[f64] {
        let s = 2 * self.hidden * self.channels + self.hidden;
        &self.params[s..]
    }

    /// Forward pass for one patch. Fills `hidden_out` (post-tanh) and
    /// `residual` (reconstruction minus input); returns the score.
    fn forward_patch(&self, x: &[f64], hidden_out: &mut [f64], residual: &mut [f64]) -> f64 {
        let (h, c) = (self.hidden, self.channels);
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        for j in 0..h {
            let mut u = b1[j];
            for (wc, xc) in w1[j * c..(j + 1) * c].iter().zip(x) {
                u += wc * xc;
            }
            hidden_out[j] = tanh(u);
        }
        let mut sq = 0.0;
        for ci in 0..c {
            let mut y = b2[ci];
            for (wj, aj) in w2[ci * h..(ci + 1) * h].iter().zip(hidden_out.iter()) {
                y += wj * aj;
            }
            let e = y - x[ci];
            residual[ci] = e;
            sq += e * e;
        }
        sqrt(sq)
    }

    /// Accumulates `d(loss)/d(params)` into `grad` for one patch, given
    /// `dscore = d(loss)/d(score)` and the forward intermediates. A zero
    /// score is the kink of the square root: subgradient 0, no-op.
    fn backward_patch(
        &self,
        x: &[f64],
        hidden_act: &[f64],
        residual: &[f64],
        score: f64,
        dscore: f64,
        grad: &mut [f64],
    ) {
        if dscore == 0.0 || score == 0.0 {
            return;
        }
        let (h, c) = (self.hidden, self.channels);
        let w2 = self.w2();
        let w1_len = h * c;
        let w2_start = w1_len + h;
        let b2_start = w2_start + c * h;

        // d(loss)/dy_c = dscore * e_c / score; y is linear in W2, b2.
        let mut da = vec![0.0; h];
        for ci in 0..c {
            let dy = dscore * residual[ci] / score;
            grad[b2_start + ci] += dy;
            for j in 0..h {
                grad[w2_start + ci * h + j] += dy * hidden_act[j];
                da[j] += w2[ci * h + j] * dy;
            }
        }
        for j in 0..h {
            let du = da[j] * (1.0 - hidden_act[j] * hidden_act[j]);
            grad[w1_len + j] += du;
            for (ci, xc) in x.iter().enumerate() {
                grad[j * c + ci] += du * xc;
            }
        }
    }

    fn check_image(&self, image: &PatchFeatureMap) -> Result<(), DataError> {
        if image.channels() != self.channels {
            return Err(DataError::Misaligned("image channels differ from student"));
        }
        Ok(())
    }

    /// Per-patch reconstruction scores of `image`.
    pub fn score_image(&self, image: &PatchFeatureMap) -> Result<ScoreMap, DataError> {
        self.check_image(image)?;
        let mut hidden = vec![0.0; self.hidden];
        let mut residual = vec![0.0; self.channels];
        let mut values = Vec::with_capacity(image.patch_count());
        for (_, _, x) in image.patches() {
            values.push(self.forward_patch(x, &mut hidden, &mut residual));
        }
        ScoreMap::new(image.height(), image.width(), values)
    }

    /// Scores every image, in dataset order.
    pub fn score_dataset(&self, dataset: &FeatureDataset) -> Result<Vec<ScoreMap>, DataError> {
        dataset.images().iter().map(|i| self.score_image(i)).collect()
    }
}

/// Distillation objective: mean over the batch of the Frobenius norm of
/// the score-map difference to the teacher. Overwrites `grad` with the
/// exact gradient and returns the loss.
pub fn distill_loss_and_grad(
    model: &Reconstructor,
    batch: &[&PatchFeatureMap],
    targets: &[&ScoreMap],
    grad: &mut [f64],
) -> Result<f64, DataError> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(DataError::Misaligned("batch and targets must align and be nonempty"));
    }
    if grad.len() != model.param_count() {
        return Err(DataError::BadLength {
            expected: model.param_count(),
            got: grad.len(),
        });
    }
    grad.fill(0.0);
    let mut hidden = vec![0.0; model.hidden()];
    let mut residual = vec![0.0; model.channels()];
    // Per-image scratch keeps the reduction order fixed: grad is a sum of
    // whole per-image gradients, so duplicate images contribute identical
    // addends.
    let mut image_grad = vec![0.0; grad.len()];
    let mut loss = KahanSum::new();
    for (image, target) in batch.iter().zip(targets) {
        model.check_image(image)?;
        if target.len() != image.patch_count() {
            return Err(DataError::Misaligned("target map does not match image grid"));
        }
        // Pass 1: scores and the per-image Frobenius norm.
        let mut scores = Vec::with_capacity(image.patch_count());
        let mut sq = 0.0;
        for ((_, _, x), &t) in image.patches().zip(target.values()) {
            let s = model.forward_patch(x, &mut hidden, &mut residual);
            sq += (s - t) * (s - t);
            scores.push(s);
        }
        let norm = sqrt(sq);
        loss.add(norm);
        if norm == 0.0 {
            continue;
        }
        // Pass 2: backprop d(norm)/d(s_hw) = (s_hw - t_hw) / norm.
        image_grad.fill(0.0);
        for (((_, _, x), &t), &s) in image.patches().zip(target.values()).zip(&scores) {
            let fresh = model.forward_patch(x, &mut hidden, &mut residual);
            debug_assert_eq!(fresh, s);
            model.backward_patch(x, &hidden, &residual, s, (s - t) / norm, &mut image_grad);
        }
        for (g, ig) in grad.iter_mut().zip(&image_grad) {
            *g += ig;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok(loss.total() * scale)
}

/// Fine-tuning objective: mean over batch and patches of the
/// reconstruction score. Overwrites `grad`; returns the loss.
pub fn finetune_loss_and_grad(
    model: &Reconstructor,
    batch: &[&PatchFeatureMap],
    grad: &mut [f64],
) -> Result<f64, DataError> {
    if batch.is_empty() {
        return Err(DataError::Misaligned("batch must be nonempty"));
    }
    if grad.len() != model.param_count() {
        return Err(DataError::BadLength {
            expected: model.param_count(),
            got: grad.len(),
        });
    }
    grad.fill(0.0);
    let mut hidden = vec![0.0; model.hidden()];
    let mut residual = vec![0.0; model.channels()];
    let mut image_grad = vec![0.0; grad.len()];
    let mut loss = KahanSum::new();
    for image in batch {
        model.check_image(image)?;
        let dscore = 1.0 / image.patch_count() as f64;
        let mut image_sum = KahanSum::new();
        image_grad.fill(0.0);
        for (_, _, x) in image.patches() {
            let s = model.forward_patch(x, &mut hidden, &mut residual);
            image_sum.add(s);
            model.backward_patch(x, &hidden, &residual, s, dscore, &mut image_grad);
        }
        loss.add(image_sum.total() * dscore);
        for (g, ig) in grad.iter_mut().zip(&image_grad) {
            *g += ig;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok(loss.total() * scale)
}

/// Adaptive-moment optimizer state. One instance per training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - powi(self.beta1, self.step);
        let bc2 = 1.0 - powi(self.beta2, self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (sqrt(v_hat) + self.epsilon);
        }
    }
}

/// Shared optimizer/loop settings for both training phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Everything but the iteration budget at its default.
    pub fn with_iterations(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.iterations == 0 {
            return Err(DataError::InvalidSpec("iterations must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(DataError::InvalidSpec("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DataError::InvalidSpec("learning_rate must be positive"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(DataError::InvalidSpec("moment coefficients must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(DataError::InvalidSpec("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self, param_count: usize) -> Adam {
        Adam::new(param_count, self.learning_rate, self.beta1, self.beta2, self.epsilon)
    }
}

/// Draws shuffled without-replacement batches, reshuffling at each epoch.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha12Rng,
}

impl BatchSampler {
    /// `stream` isolates this sampler's draws from other uses of `seed`.
    pub(crate) fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            order: (0..len).collect(),
            pos: usize::MAX, // forces a shuffle on first use
            rng,
        }
    }

    pub(crate) fn reset(&mut self, indices: Vec<usize>) {
        self.order = indices;
        self.pos = usize::MAX;
    }

    /// Next batch of at most `batch_size` indices; shorter only at the tail
    /// of an epoch.
    pub(crate) fn next_batch(&mut self, batch_size: usize, out: &mut Vec<usize>) {
        use rand::seq::SliceRandom;
        out.clear();
        if self.order.is_empty() {
            return;
        }
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        out.extend_from_slice(&self.order[self.pos..end]);
        self.pos = end;
    }
}

/// Distillation outcome: the frozen initialization for phase 3 plus the
/// per-iteration loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub model: Reconstructor,
    pub loss_history: Vec<f64>,
}

/// Phase 2: trains a fresh student against the cached teacher maps for
/// `config.iterations` minibatch steps. Batches are drawn without
/// replacement in shuffled epochs. The whole run is a pure function of
/// `(dataset, cache, config)`.
pub fn train_distill(
    dataset: &FeatureDataset,
    cache: &[ScoreMap],
    config: &TrainConfig,
) -> Result<DistillOutcome, DataError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DataError::InvalidSpec("dataset must be nonempty"));
    }
    if cache.len() != dataset.len() {
        return Err(DataError::Misaligned("score cache does not cover the dataset"));
    }
    let channels = dataset.image(0).channels();
    if dataset.images().iter().any(|i| i.channels() != channels) {
        return Err(DataError::Misaligned("one student requires a uniform channel count"));
    }

    let mut model = Reconstructor::init(channels, config.seed)?;
    let mut adam = config.adam(model.param_count());
    let mut sampler = BatchSampler::new(dataset.len(), config.seed, 1);
    let mut grad = vec![0.0; model.param_count()];
    let mut batch_idx = Vec::with_capacity(config.batch_size);
    let mut loss_history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        sampler.next_batch(config.batch_size, &mut batch_idx);
        let images: Vec<&PatchFeatureMap> = batch_idx.iter().map(|&i| dataset.image(i)).collect();
        let targets: Vec<&ScoreMap> = batch_idx.iter().map(|&i| &cache[i]).collect();
        let loss = distill_loss_and_grad(&model, &images, &targets, &mut grad)?;
        adam.step(model.params_mut(), &grad);
        loss_history.push(loss);
    }
    Ok(DistillOutcome {
        model,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::dist;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> PatchFeatureMap {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let values = (0..h * w * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        PatchFeatureMap::new(h, w, c, values).unwrap()
    }

    #[test]
    fn hidden_width_clamps_at_two() {
        assert_eq!(hidden_width(1), 2);
        assert_eq!(hidden_width(4), 2);
        assert_eq!(hidden_width(8), 2);
        assert_eq!(hidden_width(9), 3);
        assert_eq!(hidden_width(16), 4);
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = Reconstructor::init(4, 3).unwrap();
        let b = Reconstructor::init(4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Reconstructor::init(4, 4).unwrap());
        let map = a.score_image(&random_image(3, 3, 4, 9)).unwrap();
        assert!(map.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn single_patch_forward_matches_external_oracle() {
        // Recompute the two-layer pass with independent loops and libm.
        let model = Reconstructor::init(3, 11).unwrap();
        let x = [0.4, -1.2, 0.7];
        let image = PatchFeatureMap::new(1, 1, 3, x.to_vec()).unwrap();
        let got = model.score_image(&image).unwrap().values()[0];

        let (c, h) = (3usize, hidden_width(3));
        let p = model.params();
        let mut y = alloc::vec![0.0f64; c];
        for ci in 0..c {
            y[ci] = p[2 * h * c + h + ci]; // b2
        }
        for j in 0..h {
            let mut u = p[h * c + j]; // b1
            for ci in 0..c {
                u += p[j * c + ci] * x[ci];
            }
            let a = libm::tanh(u);
            for ci in 0..c {
                y[ci] += p[h * c + h + ci * h + j] * a;
            }
        }
        let want = dist(&y, &x);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn manual_identity_parameters_score_zero() {
        // W2 = 0 makes the output the constant b2; set b2 to the patch
        // value and every score vanishes.
        let x = [0.3, -0.6];
        let c = 2;
        let h = hidden_width(c);
        let mut params = alloc::vec![0.0; Reconstructor::param_count_for(c)];
        params[h * c] = 0.5; // arbitrary b1
        let b2_start = 2 * h * c + h;
        params[b2_start..].copy_from_slice(&x);
        let model = Reconstructor::from_params(c, params).unwrap();
        let values: Vec<f64> = core::iter::repeat(x).take(4).flatten().collect();
        let image = PatchFeatureMap::new(2, 2, c, values).unwrap();
        let map = model.score_image(&image).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));

        // Fixed point: loss 0 and subgradient 0 for both objectives.
        let mut grad = alloc::vec![1.0; model.param_count()];
        let loss = finetune_loss_and_grad(&model, &[&image], &mut grad).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let target = ScoreMap::new(2, 2, alloc::vec![0.0; 4]).unwrap();
        let mut grad2 = alloc::vec![1.0; model.param_count()];
        let loss2 = distill_loss_and_grad(&model, &[&image], &[&target], &mut grad2).unwrap();
        assert_eq!(loss2, 0.0);
        assert!(grad2.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scores_commute_with_patch_permutation() {
        let model = Reconstructor::init(3, 2).unwrap();
        let image = random_image(2, 3, 3, 5);
        let base = model.score_image(&image).unwrap();
        // Reverse the patch order.
        let mut values = Vec::new();
        for p in (0..image.patch_count()).rev() {
            let h = p / image.width();
            let w = p % image.width();
            values.extend_from_slice(image.patch(h, w));
        }
        let reversed = PatchFeatureMap::new(2, 3, 3, values).unwrap();
        let permuted = model.score_image(&reversed).unwrap();
        let mut want: Vec<f64> = base.values().to_vec();
        want.reverse();
        assert_eq!(permuted.values(), &want[..]);
    }

    #[test]
    fn c1_linear_regime_matches_hand_derivation() {
        // C = 1, h = 2, W1 = 0: the net computes the constant
        // y = w21*tanh(t1) + w22*tanh(t2) + b, so on a single patch x the
        // finetune loss is |y - x| and the gradient follows by hand:
        //   d/db2 = sign(e), d/dw2j = sign(e)*tanh(tj),
        //   d/db1j = sign(e)*w2j*(1 - tanh(tj)^2), d/dw1j = that * x.
        let (t1, t2, w21, w22, b) = (0.3, -0.2, 0.5, -0.7, 0.1);
        let x = 2.0;
        // Layout: [w11, w12 | b11, b12 | w21, w22 | b2].
        let params = alloc::vec![0.0, 0.0, t1, t2, w21, w22, b];
        let model = Reconstructor::from_params(1, params).unwrap();
        let image = PatchFeatureMap::new(1, 1, 1, alloc::vec![x]).unwrap();

        let y = w21 * libm::tanh(t1) + w22 * libm::tanh(t2) + b;
        let e: f64 = y - x;
        let sign = e.signum();
        let want_loss = e.abs();
        let want_grad = alloc::vec![
            sign * w21 * (1.0 - libm::tanh(t1) * libm::tanh(t1)) * x,
            sign * w22 * (1.0 - libm::tanh(t2) * libm::tanh(t2)) * x,
            sign * w21 * (1.0 - libm::tanh(t1) * libm::tanh(t1)),
            sign * w22 * (1.0 - libm::tanh(t2) * libm::tanh(t2)),
            sign * libm::tanh(t1),
            sign * libm::tanh(t2),
            sign,
        ];

        let mut grad = alloc::vec![0.0; 7];
        let loss = finetune_loss_and_grad(&model, &[&image], &mut grad).unwrap();
        assert!((loss - want_loss).abs() <= 1e-14);
        for (g, w) in grad.iter().zip(&want_grad) {
            assert!((g - w).abs() <= 1e-14, "{g} vs {w}");
        }

        // Distillation against target t: loss |s - t|, gradient scaled by
        // sign(s - t) instead of the lone score sign.
        let t = 0.5;
        let target = ScoreMap::new(1, 1, alloc::vec![t]).unwrap();
        let s = want_loss; // score of the single patch
        let outer = (s - t).signum();
        let mut dgrad = alloc::vec![0.0; 7];
        let dloss = distill_loss_and_grad(&model, &[&image], &[&target], &mut dgrad).unwrap();
        assert!((dloss - (s - t).abs()).abs() <= 1e-14);
        for (g, w) in dgrad.iter().zip(&want_grad) {
            assert!((g - outer * w).abs() <= 1e-14);
        }
    }

    fn finite_difference_check(
        loss_of: &mut dyn FnMut(&Reconstructor) -> f64,
        model: &Reconstructor,
        analytic: &[f64],
    ) -> f64 {
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..model.param_count() {
            let mut plus = model.clone();
            plus.params_mut()[i] += step;
            let mut minus = model.clone();
            minus.params_mut()[i] -= step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn finetune_gradient_passes_central_differences() {
        for trial in 0..5u64 {
            let model = Reconstructor::init(4, 100 + trial).unwrap();
            let images: Vec<PatchFeatureMap> =
                (0..3).map(|i| random_image(2, 2, 4, 7 * trial + i)).collect();
            let batch: Vec<&PatchFeatureMap> = images.iter().collect();
            let mut grad = alloc::vec![0.0; model.param_count()];
            finetune_loss_and_grad(&model, &batch, &mut grad).unwrap();
            let worst = finite_difference_check(
                &mut |m| {
                    let mut g = alloc::vec![0.0; m.param_count()];
                    finetune_loss_and_grad(m, &batch, &mut g).unwrap()
                },
                &model,
                &grad,
            );
            assert!(worst <= 1e-4, "trial {trial}: rel err {worst}");
        }
    }

    #[test]
    fn distill_gradient_passes_central_differences() {
        for trial in 0..5u64 {
            let model = Reconstructor::init(5, 200 + trial).unwrap();
            let images: Vec<PatchFeatureMap> =
                (0..3).map(|i| random_image(2, 3, 5, 50 + 7 * trial + i)).collect();
            let batch: Vec<&PatchFeatureMap> = images.iter().collect();
            let mut rng = ChaCha12Rng::seed_from_u64(900 + trial);
            let targets: Vec<ScoreMap> = images
                .iter()
                .map(|img| {
                    let v = (0..img.patch_count())
                        .map(|_| rng.random_range(0.0..2.0))
                        .collect();
                    ScoreMap::new(img.height(), img.width(), v).unwrap()
                })
                .collect();
            let trefs: Vec<&ScoreMap> = targets.iter().collect();
            let mut grad = alloc::vec![0.0; model.param_count()];
            distill_loss_and_grad(&model, &batch, &trefs, &mut grad).unwrap();
            let worst = finite_difference_check(
                &mut |m| {
                    let mut g = alloc::vec![0.0; m.param_count()];
                    distill_loss_and_grad(m, &batch, &trefs, &mut g).unwrap()
                },
                &model,
                &grad,
            );
            assert!(worst <= 1e-4, "trial {trial}: rel err {worst}");
        }
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grad_unchanged() {
        let model = Reconstructor::init(3, 8).unwrap();
        let image = random_image(2, 2, 3, 77);
        let mut g1 = alloc::vec![0.0; model.param_count()];
        let l1 = finetune_loss_and_grad(&model, &[&image], &mut g1).unwrap();
        let mut g2 = alloc::vec![0.0; model.param_count()];
        let l2 = finetune_loss_and_grad(&model, &[&image, &image], &mut g2).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn adam_zero_grad_is_a_no_op_and_first_step_is_bounded() {
        let mut adam = Adam::new(3, 1e-3, 0.9, 0.999, 1e-8);
        let mut params = alloc::vec![0.5, -0.25, 1.0];
        let before = params.clone();
        adam.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, before);

        let mut adam = Adam::new(3, 1e-3, 0.9, 0.999, 1e-8);
        let grad = [0.2, -3.0, 1e-7];
        adam.step(&mut params, &grad);
        for i in 0..3 {
            let delta = params[i] - before[i];
            assert!(delta.abs() <= 1e-3 * (1.0 + 1e-6));
            if grad[i].abs() > 1e-9 {
                assert_eq!(delta.signum(), -grad[i].signum());
            }
        }
    }

    #[test]
    fn batch_sampler_covers_each_epoch_without_replacement() {
        let mut sampler = BatchSampler::new(10, 4, 1);
        let mut batch = Vec::new();
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        for _ in 0..5 {
            sampler.next_batch(3, &mut batch);
            seen.extend_from_slice(&batch);
            sizes.push(batch.len());
        }
        // Epochs never interleave: the 10 elements split 3+3+3+1, then a
        // reshuffled epoch starts with a fresh batch of 3.
        assert_eq!(sizes, alloc::vec![3, 3, 3, 1, 3]);
        let mut first: Vec<usize> = seen[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(seen[10..].iter().all(|&i| i < 10));
    }

    #[test]
    fn train_distill_reduces_loss_and_is_deterministic() {
        let spec = crate::synth::SynthSpec {
            classes: 1,
            images_per_class: 16,
            height: 4,
            width: 4,
            channels: 4,
            cluster_count: 2,
            cluster_spread: 0.2,
            anomaly_shift: 1.5,
            anomaly_region: (1, 2),
            seed: 33,
        };
        let (data, _) = crate::synth::generate_synthetic_dataset(&spec).unwrap();
        let ensemble = crate::memory::MemoryEnsemble::build(
            &data,
            core::num::NonZeroUsize::new(5).unwrap(),
            0.25,
            17,
        )
        .unwrap();
        let cache = ensemble.score_dataset(&data).unwrap();
        let config = TrainConfig::with_iterations(120, 3);
        let out = train_distill(&data, &cache, &config).unwrap();
        assert_eq!(out.loss_history.len(), 120);
        assert!(
            out.loss_history[119] < out.loss_history[0],
            "no progress: {} -> {}",
            out.loss_history[0],
            out.loss_history[119]
        );
        let again = train_distill(&data, &cache, &config).unwrap();
        assert_eq!(out, again);

        let mut bad = config;
        bad.iterations = 0;
        assert!(train_distill(&data, &cache, &bad).is_err());
        assert!(train_distill(&data, &cache[..3], &config).is_err());
    }
}
