//! The three-phase pipeline driver.
//!
//! A run writes a fixed layout under its output directory:
//!
//! ```text
//! cache/        train.meds, test.meds (synthetic inputs), ensemble_scores.medc
//! checkpoints/  distilled.medp (unless skipped), final.medp
//! reports/      config.toml, metrics.txt, distill_loss.tsv, finetune_loss.tsv,
//!               selection_audit.tsv, alc_ranking.tsv
//! ```
//!
//! Phases run strictly in order: data, memory (phase 1), distill (phase 2),
//! finetune (phase 3), eval. Phase 2 consumes the completed score cache and
//! phase 3 the distilled checkpoint, so neither can start before its input
//! artifact exists. Errors carry the phase they surfaced in. Every artifact
//! is a pure function of (config, seeds), byte for byte.

use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use meds_core::dataset::{DataError, FeatureDataset};
use meds_core::memory::{MemoryEnsemble, ScoreMap};
use meds_core::metrics::{self, MetricError, RankedScores};
use meds_core::reconstructor::{train_distill, Reconstructor, TrainConfig};
use meds_core::selection::{finetune_with_selection, robust_max_scores};
use meds_core::synth::{generate_synthetic_dataset, inject_contamination};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::files::{self, FileError};
use crate::report::{self, ranking_rows, ReportError};

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("config render: {0}")]
    Render(#[from] toml::ser::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A stage error plus the phase it surfaced in.
#[derive(Debug, Error)]
#[error("phase {phase}: {source}")]
pub struct PipelineError {
    pub phase: &'static str,
    #[source]
    pub source: StageError,
}

fn at<E: Into<StageError>>(phase: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        phase,
        source: e.into(),
    }
}

/// The resolved data for one run. `train` may be contaminated; `test` is
/// only present for synthetic inputs or an explicit test file.
pub struct Experiment {
    pub train: FeatureDataset,
    pub test: Option<FeatureDataset>,
}

/// Appends `b`'s images after `a`'s; optional sections survive only when
/// both sides carry them.
fn concat_datasets(a: &FeatureDataset, b: &FeatureDataset) -> Result<FeatureDataset, DataError> {
    let images = a.images().iter().chain(b.images()).cloned().collect();
    let class_ids = a.class_ids().iter().chain(b.class_ids()).copied().collect();
    let labels = match (a.truth_labels(), b.truth_labels()) {
        (Some(x), Some(y)) => Some(x.iter().chain(y).copied().collect()),
        _ => None,
    };
    let masks = match (a.masks(), b.masks()) {
        (Some(x), Some(y)) => Some(x.iter().chain(y).cloned().collect()),
        _ => None,
    };
    FeatureDataset::new(images, class_ids, labels, masks)
}

/// Materializes the run's datasets. Synthetic inputs generate
/// `train_normals + test_normals` clean images per class, contaminate the
/// first block at the configured ratio, and hold out the rest as test
/// normals together with the entire anomaly pool, so injected anomalies
/// also appear in the test split.
pub fn build_experiment(config: &PipelineConfig) -> Result<Experiment, StageError> {
    if let Some(synth) = &config.input.synth {
        let spec = synth.to_spec(config.seeds.data);
        let (clean, pool) = generate_synthetic_dataset(&spec)?;
        let per_class = synth.train_normals + synth.test_normals;
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for class in 0..synth.classes {
            let base = class * per_class;
            train_idx.extend(base..base + synth.train_normals);
            test_idx.extend(base + synth.train_normals..base + per_class);
        }
        let train_clean = clean.subset(&train_idx);
        let injection = inject_contamination(
            &train_clean,
            &pool,
            synth.noise_ratio,
            config.seeds.data.wrapping_add(1),
        )?;
        let test = concat_datasets(&clean.subset(&test_idx), &pool)?;
        Ok(Experiment {
            train: injection.dataset,
            test: Some(test),
        })
    } else {
        let train_path = config
            .input
            .train_file
            .as_ref()
            .ok_or(ConfigError::Invalid("input needs train_file or [input.synth]"))?;
        let train = files::read_feature_file(train_path)?;
        let test = config
            .input
            .test_file
            .as_ref()
            .map(files::read_feature_file)
            .transpose()?;
        Ok(Experiment { train, test })
    }
}

pub fn train_config(config: &PipelineConfig, iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: config.optimizer.batch_size,
        learning_rate: config.optimizer.learning_rate,
        beta1: config.optimizer.beta1,
        beta2: config.optimizer.beta2,
        epsilon: config.optimizer.epsilon,
        seed: config.seeds.training,
    }
}

/// Channel count shared by every image; training one student requires it.
pub fn uniform_channels(dataset: &FeatureDataset) -> Result<usize, DataError> {
    if dataset.is_empty() {
        return Err(DataError::InvalidSpec("dataset must be nonempty"));
    }
    let channels = dataset.image(0).channels();
    if dataset.images().iter().any(|i| i.channels() != channels) {
        return Err(DataError::Misaligned("uniform channel count required"));
    }
    Ok(channels)
}

/// Patch-level AUROC of score maps against pixel masks over the whole
/// dataset; `None` when masks are missing or only one patch class exists.
pub fn patch_auroc(
    dataset: &FeatureDataset,
    maps: &[ScoreMap],
) -> Result<Option<f64>, MetricError> {
    let Some(masks) = dataset.masks() else {
        return Ok(None);
    };
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flatten().copied().collect();
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Ok(None);
    }
    let ranked = RankedScores::new(scores, labels)?;
    Ok(Some(metrics::auroc(&ranked)?))
}

/// Image- and pixel-level test metrics for a trained model. Metrics whose
/// preconditions the dataset cannot meet (no labels, no masked regions)
/// are omitted rather than failing, so degenerate test splits still
/// evaluate; real faults (misalignment, non-finite scores) propagate.
pub fn evaluate_model(
    model: &Reconstructor,
    test: &FeatureDataset,
    n_percent: f64,
    fpr_limit: f64,
) -> Result<Vec<(String, f64)>, StageError> {
    let maps = model.score_dataset(test)?;
    let mut rows = Vec::new();
    let push = |rows: &mut Vec<(String, f64)>,
                    name: &str,
                    result: Result<f64, MetricError>|
     -> Result<(), StageError> {
        match result {
            Ok(v) => {
                rows.push((name.to_string(), v));
                Ok(())
            }
            Err(MetricError::Undefined(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    };
    if let Some(labels) = test.truth_labels() {
        let image_scores = robust_max_scores(&maps, n_percent)?;
        let ranked = RankedScores::new(image_scores, labels.to_vec())?;
        push(&mut rows, "image.auroc", metrics::auroc(&ranked))?;
        push(&mut rows, "image.ap", metrics::average_precision(&ranked))?;
    }
    if let Some(masks) = test.masks() {
        let scores: Vec<f64> = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
        let labels: Vec<bool> = masks.iter().flatten().copied().collect();
        if labels.iter().any(|&l| l) {
            let ranked = RankedScores::new(scores, labels)?;
            push(&mut rows, "pixel.ap", metrics::average_precision(&ranked))?;
            push(&mut rows, "pixel.aupro", metrics::aupro(&maps, masks, fpr_limit))?;
        }
    }
    Ok(rows)
}

/// Ranking quality of final selection scores against hidden labels.
pub fn alc_metrics(etas: &[f64], labels: &[bool]) -> Result<Vec<(String, f64)>, StageError> {
    if !labels.iter().any(|&l| l) {
        return Ok(Vec::new());
    }
    Ok(vec![
        (
            "alc.auprc".to_string(),
            metrics::alc_auprc(etas, labels)?,
        ),
        (
            "alc.inspection_depth".to_string(),
            metrics::inspection_depth(etas, labels)?,
        ),
    ])
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub metrics: Vec<(String, f64)>,
}

pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<RunOutcome, PipelineError> {
    config.validate().map_err(at("config"))?;
    let cache_dir = out.join("cache");
    let ckpt_dir = out.join("checkpoints");
    let reports_dir = out.join("reports");
    for dir in [&cache_dir, &ckpt_dir, &reports_dir] {
        fs::create_dir_all(dir).map_err(at("config"))?;
    }
    let rendered = toml::to_string_pretty(config).map_err(at("config"))?;
    fs::write(reports_dir.join("config.toml"), rendered).map_err(at("config"))?;

    // Phase 0: materialize data.
    let experiment = build_experiment(config).map_err(at("data"))?;
    let train = &experiment.train;
    if config.input.synth.is_some() {
        files::write_feature_file(train, cache_dir.join("train.meds")).map_err(at("data"))?;
        if let Some(test) = &experiment.test {
            files::write_feature_file(test, cache_dir.join("test.meds")).map_err(at("data"))?;
        }
    }

    let mut rows: Vec<(String, f64)> = Vec::new();
    if let Some(ratio) = train.noise_ratio() {
        rows.push(("train.noise_ratio".to_string(), ratio));
    }

    // Phase 1: bootstrapped memory ensemble and its score cache.
    let bank_count = NonZeroUsize::new(config.ensemble.size)
        .ok_or(ConfigError::Invalid("ensemble.size must be positive"))
        .map_err(at("memory"))?;
    let ensemble = MemoryEnsemble::build(
        train,
        bank_count,
        config.ensemble.subsample_ratio,
        config.seeds.ensemble,
    )
    .map_err(at("memory"))?;
    let teacher = ensemble.score_dataset(train).map_err(at("memory"))?;
    files::write_score_cache(&teacher, cache_dir.join("ensemble_scores.medc"))
        .map_err(at("memory"))?;
    if let Some(auroc) = patch_auroc(train, &teacher).map_err(at("memory"))? {
        rows.push(("train.patch_auroc".to_string(), auroc));
    }

    // Phase 2: distill the cache into the student, unless the ablation
    // freezes the memory scores directly.
    let n_percent = config.finetune.top_percent;
    let mut distilled: Option<Reconstructor> = None;
    let frozen: Vec<f64> = if config.ablation.memory_criteria {
        robust_max_scores(&teacher, n_percent).map_err(at("distill"))?
    } else {
        let outcome = train_distill(
            train,
            &teacher,
            &train_config(config, config.distill.iterations),
        )
        .map_err(at("distill"))?;
        files::write_checkpoint(&outcome.model, ckpt_dir.join("distilled.medp"))
            .map_err(at("distill"))?;
        report::write_loss_history(reports_dir.join("distill_loss.tsv"), &outcome.loss_history)
            .map_err(at("distill"))?;
        if let Some(&loss) = outcome.loss_history.last() {
            rows.push(("distill.final_loss".to_string(), loss));
        }
        let maps = outcome.model.score_dataset(train).map_err(at("distill"))?;
        let frozen = robust_max_scores(&maps, n_percent).map_err(at("distill"))?;
        distilled = Some(outcome.model);
        frozen
    };

    // Phase 3: fine-tune with progressive selection.
    let init = if config.ablation.memory_criteria || config.ablation.no_distill_init {
        let channels = uniform_channels(train).map_err(at("finetune"))?;
        Reconstructor::init(channels, config.seeds.training).map_err(at("finetune"))?
    } else {
        distilled.clone().expect("distillation ran")
    };
    let outcome = finetune_with_selection(
        init,
        &frozen,
        train,
        &train_config(config, config.finetune.iterations),
        config.finetune.critical_value,
        n_percent,
    )
    .map_err(at("finetune"))?;
    files::write_checkpoint(&outcome.model, ckpt_dir.join("final.medp")).map_err(at("finetune"))?;
    report::write_loss_history(reports_dir.join("finetune_loss.tsv"), &outcome.loss_history)
        .map_err(at("finetune"))?;
    report::write_audit(reports_dir.join("selection_audit.tsv"), &outcome.audit)
        .map_err(at("finetune"))?;
    if let Some(&loss) = outcome.loss_history.last() {
        rows.push(("finetune.final_loss".to_string(), loss));
    }

    // Eval: selection quality on train, detection quality on test.
    let state = &outcome.final_state;
    rows.push(("selection.size".to_string(), state.selected.len() as f64));
    if let Some(labels) = train.truth_labels() {
        let kept_normal = state.selected.iter().filter(|&&i| !labels[i]).count();
        let total_normal = labels.iter().filter(|&&l| !l).count();
        if !state.selected.is_empty() {
            rows.push((
                "selection.precision".to_string(),
                kept_normal as f64 / state.selected.len() as f64,
            ));
        }
        if total_normal > 0 {
            rows.push((
                "selection.recall".to_string(),
                kept_normal as f64 / total_normal as f64,
            ));
        }
        rows.extend(alc_metrics(&state.etas, labels).map_err(at("eval"))?);
        let ranking = ranking_rows(&state.etas, train.class_ids(), Some(labels));
        report::write_ranking(reports_dir.join("alc_ranking.tsv"), &ranking)
            .map_err(at("eval"))?;
    }
    if let Some(test) = &experiment.test {
        rows.extend(
            evaluate_model(
                &outcome.model,
                test,
                n_percent,
                config.metrics.fpr_limit,
            )
            .map_err(at("eval"))?,
        );
    }
    report::write_metrics(reports_dir.join("metrics.txt"), &rows).map_err(at("eval"))?;

    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        metrics: rows,
    })
}
