//! Progressive self-selection.
//!
//! Each image gets a robust score (mean of its top-n% patch scores) from
//! the frozen distilled model and from the current model; the selection
//! score interpolates the two with a weight that ramps from the frozen
//! model to the current one. Images scoring strictly below their class's
//! median + k_t * MAD threshold form the next epoch's training subset.
//! The schedules ramp over the iteration budget: alpha_t = min(1, 2t/T)
//! and k_t = k * t / T, refreshed only at epoch boundaries.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::dataset::{DataError, FeatureDataset};
use crate::math::KahanSum;
use crate::memory::ScoreMap;
use crate::reconstructor::{
    finetune_loss_and_grad, BatchSampler, Reconstructor, TrainConfig,
};

/// Mean of the top `ceil(n_percent * H * W / 100)` patch scores.
pub fn robust_max(map: &ScoreMap, n_percent: f64) -> Result<f64, DataError> {
    if !(n_percent > 0.0 && n_percent <= 100.0) {
        return Err(DataError::InvalidSpec("n_percent must lie in (0, 100]"));
    }
    if map.is_empty() {
        return Err(DataError::ZeroDim);
    }
    let len = map.len();
    let count = (libm::ceil(n_percent * len as f64 / 100.0) as usize).clamp(1, len);
    let mut sorted: Vec<f64> = map.values().to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut acc = KahanSum::new();
    for &v in &sorted[..count] {
        acc.add(v);
    }
    Ok(acc.total() / count as f64)
}

/// Robust max of every map, in order.
pub fn robust_max_scores(maps: &[ScoreMap], n_percent: f64) -> Result<Vec<f64>, DataError> {
    maps.iter().map(|m| robust_max(m, n_percent)).collect()
}

/// `(alpha_t, k_t)` for iteration `t` of `total` with final critical value
/// `k`. Both endpoints are exact: `t = total` gives `(1, k)`.
pub fn schedule(t: usize, total: usize, k: f64) -> Result<(f64, f64), DataError> {
    if t == 0 || t > total {
        return Err(DataError::InvalidSpec("schedule iteration must satisfy 1 <= t <= T"));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(DataError::InvalidSpec("critical value k must be finite and >= 0"));
    }
    let ratio = t as f64 / total as f64;
    let alpha = (2.0 * ratio).min(1.0);
    Ok((alpha, k * ratio))
}

/// `(1 - alpha) * frozen + alpha * current`.
pub fn selection_score(frozen: f64, current: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * frozen + alpha * current
}

/// Median with the even-length convention: mean of the two central order
/// statistics.
pub fn median(values: &[f64]) -> Result<f64, DataError> {
    if values.is_empty() {
        return Err(DataError::ZeroDim);
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// `median(etas) + critical * MAD(etas)` for one class.
pub fn class_threshold(etas: &[f64], critical: f64) -> Result<f64, DataError> {
    if !(critical >= 0.0 && critical.is_finite()) {
        return Err(DataError::InvalidSpec("critical value must be finite and >= 0"));
    }
    let med = median(etas)?;
    let deviations: Vec<f64> = etas.iter().map(|e| (e - med).abs()).collect();
    let mad = median(&deviations)?;
    Ok(med + critical * mad)
}

/// Strict-inequality filter per class; a class whose filter comes back
/// empty (all scores tied, or a threshold below every score) falls back to
/// its at-or-below-median half so training never starves. Returns
/// ascending image indices.
pub fn select_subset(
    dataset: &FeatureDataset,
    etas: &[f64],
    thresholds: &BTreeMap<u32, f64>,
) -> Result<Vec<usize>, DataError> {
    if etas.len() != dataset.len() {
        return Err(DataError::Misaligned("one selection score per image required"));
    }
    let mut selected = Vec::new();
    for class in dataset.classes() {
        let tau = *thresholds.get(&class).ok_or(DataError::UnknownClass(class))?;
        let members = dataset.class_indices(class);
        let strict: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| etas[i] < tau)
            .collect();
        if strict.is_empty() {
            let class_etas: Vec<f64> = members.iter().map(|&i| etas[i]).collect();
            let med = median(&class_etas)?;
            selected.extend(members.iter().copied().filter(|&i| etas[i] <= med));
        } else {
            selected.extend(strict);
        }
    }
    selected.sort_unstable();
    Ok(selected)
}

/// One selection refresh: schedules, per-class thresholds, and the subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub iteration: usize,
    pub total: usize,
    pub alpha: f64,
    pub critical: f64,
    pub thresholds: BTreeMap<u32, f64>,
    pub selected: Vec<usize>,
    pub etas: Vec<f64>,
}

impl SelectionState {
    /// Thresholds and subset from already-interpolated scores.
    pub fn from_etas(
        dataset: &FeatureDataset,
        etas: Vec<f64>,
        iteration: usize,
        total: usize,
        alpha: f64,
        critical: f64,
    ) -> Result<Self, DataError> {
        let mut thresholds = BTreeMap::new();
        for class in dataset.classes() {
            let class_etas: Vec<f64> = dataset
                .class_indices(class)
                .iter()
                .map(|&i| etas[i])
                .collect();
            thresholds.insert(class, class_threshold(&class_etas, critical)?);
        }
        let selected = select_subset(dataset, &etas, &thresholds)?;
        Ok(Self {
            iteration,
            total,
            alpha,
            critical,
            thresholds,
            selected,
            etas,
        })
    }
}

/// Interpolated selection scores for the whole dataset: per image,
/// `(1 - alpha) * frozen[i] + alpha * robust_max(current model's map)`.
pub fn selection_scores(
    model: &Reconstructor,
    dataset: &FeatureDataset,
    frozen: &[f64],
    alpha: f64,
    n_percent: f64,
) -> Result<Vec<f64>, DataError> {
    if frozen.len() != dataset.len() {
        return Err(DataError::Misaligned("one frozen score per image required"));
    }
    let mut etas = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let map = model.score_image(dataset.image(i))?;
        let current = robust_max(&map, n_percent)?;
        etas.push(selection_score(frozen[i], current, alpha));
    }
    Ok(etas)
}

/// One audit line per (epoch, class). `contaminated` counts selected
/// images whose hidden truth label is anomalous, when labels exist; it is
/// never used for training decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionAuditRow {
    pub epoch: usize,
    pub iteration: usize,
    pub class_id: u32,
    pub alpha: f64,
    pub critical: f64,
    pub threshold: f64,
    pub class_size: usize,
    pub selected: usize,
    pub contaminated: Option<usize>,
}

fn audit_rows(
    dataset: &FeatureDataset,
    epoch: usize,
    iteration: usize,
    alpha: f64,
    critical: f64,
    thresholds: &BTreeMap<u32, f64>,
    selected: &[usize],
    out: &mut Vec<SelectionAuditRow>,
) {
    for class in dataset.classes() {
        let members = dataset.class_indices(class);
        let chosen: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|&i| dataset.class_id(i) == class)
            .collect();
        let contaminated = dataset
            .truth_labels()
            .map(|labels| chosen.iter().filter(|&&i| labels[i]).count());
        out.push(SelectionAuditRow {
            epoch,
            iteration,
            class_id: class,
            alpha,
            critical,
            threshold: thresholds.get(&class).copied().unwrap_or(f64::INFINITY),
            class_size: members.len(),
            selected: chosen.len(),
            contaminated,
        });
    }
}

/// Phase-3 result. `final_state` holds the end-of-training selection
/// scores (`alpha = 1`, so they reflect only the final model), the basis
/// for ranking-based review.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub model: Reconstructor,
    pub loss_history: Vec<f64>,
    pub audit: Vec<SelectionAuditRow>,
    pub final_state: SelectionState,
}

/// Phase 3: fine-tune `init` for `config.iterations` steps, refreshing the
/// training subset at every epoch boundary. The first epoch trains on the
/// full dataset. `frozen` are the cached robust scores of the distilled
/// model (or any ablation's stand-in); `k` is the final critical value and
/// `n_percent` the robust-max window. Pure function of its arguments.
pub fn finetune_with_selection(
    init: Reconstructor,
    frozen: &[f64],
    dataset: &FeatureDataset,
    config: &TrainConfig,
    k: f64,
    n_percent: f64,
) -> Result<FinetuneOutcome, DataError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DataError::InvalidSpec("dataset must be nonempty"));
    }
    if frozen.len() != dataset.len() {
        return Err(DataError::Misaligned("one frozen score per image required"));
    }
    if let Some(i) = frozen.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite(i));
    }
    if !(n_percent > 0.0 && n_percent <= 100.0) {
        return Err(DataError::InvalidSpec("n_percent must lie in (0, 100]"));
    }
    if !(k >= 0.0 && k.is_finite()) {
        return Err(DataError::InvalidSpec("critical value k must be finite and >= 0"));
    }

    let total = config.iterations;
    let mut model = init;
    let mut adam = config.adam(model.param_count());
    let mut sampler = BatchSampler::new(dataset.len(), config.seed, 2);
    let mut grad = alloc::vec![0.0; model.param_count()];
    let mut batch_idx = Vec::with_capacity(config.batch_size);
    let mut loss_history = Vec::with_capacity(total);
    let mut audit = Vec::new();

    // Epoch 1 trains on all of the data.
    let mut selected: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_len = selected.len().div_ceil(config.batch_size);
    let mut iters_into_epoch = 0usize;
    let mut epoch = 1usize;
    let full_thresholds: BTreeMap<u32, f64> = dataset
        .classes()
        .into_iter()
        .map(|c| (c, f64::INFINITY))
        .collect();
    audit_rows(dataset, epoch, 0, 0.0, 0.0, &full_thresholds, &selected, &mut audit);

    for t in 1..=total {
        if iters_into_epoch == epoch_len {
            epoch += 1;
            iters_into_epoch = 0;
            let (alpha, critical) = schedule(t, total, k)?;
            let etas = selection_scores(&model, dataset, frozen, alpha, n_percent)?;
            let state = SelectionState::from_etas(dataset, etas, t, total, alpha, critical)?;
            audit_rows(
                dataset,
                epoch,
                t,
                alpha,
                critical,
                &state.thresholds,
                &state.selected,
                &mut audit,
            );
            selected = state.selected;
            epoch_len = selected.len().div_ceil(config.batch_size);
            sampler.reset(selected.clone());
        }
        sampler.next_batch(config.batch_size, &mut batch_idx);
        let images: Vec<&crate::dataset::PatchFeatureMap> =
            batch_idx.iter().map(|&i| dataset.image(i)).collect();
        let loss = finetune_loss_and_grad(&model, &images, &mut grad)?;
        adam.step(model.params_mut(), &grad);
        loss_history.push(loss);
        iters_into_epoch += 1;
    }

    let (alpha, critical) = schedule(total, total, k)?;
    let etas = selection_scores(&model, dataset, frozen, alpha, n_percent)?;
    let final_state = SelectionState::from_etas(dataset, etas, total, total, alpha, critical)?;
    Ok(FinetuneOutcome {
        model,
        loss_history,
        audit,
        final_state,
    })
}

/// The no-selection ablation: plain fine-tuning on every image for the
/// same iteration budget.
pub fn finetune_all(
    init: Reconstructor,
    dataset: &FeatureDataset,
    config: &TrainConfig,
) -> Result<(Reconstructor, Vec<f64>), DataError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DataError::InvalidSpec("dataset must be nonempty"));
    }
    let mut model = init;
    let mut adam = config.adam(model.param_count());
    let mut sampler = BatchSampler::new(dataset.len(), config.seed, 2);
    let mut grad = alloc::vec![0.0; model.param_count()];
    let mut batch_idx = Vec::with_capacity(config.batch_size);
    let mut loss_history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        sampler.next_batch(config.batch_size, &mut batch_idx);
        let images: Vec<&crate::dataset::PatchFeatureMap> =
            batch_idx.iter().map(|&i| dataset.image(i)).collect();
        let loss = finetune_loss_and_grad(&model, &images, &mut grad)?;
        adam.step(model.params_mut(), &grad);
        loss_history.push(loss);
    }
    Ok((model, loss_history))
}
