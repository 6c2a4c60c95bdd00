//! Pipeline configuration: one TOML file plus flag overrides; flags win.

use std::fs;
use std::path::{Path, PathBuf};

use meds_core::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "MEDS_OUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Exactly one of `train_file` or `synth` must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthInput>,
}

/// Synthetic experiment: `train_normals + test_normals` clean images per
/// class are generated alongside an equally sized anomaly pool. Training
/// data is the first `train_normals` per class contaminated at
/// `noise_ratio`; the test split is the held-out normals plus the entire
/// pool, injected images included.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthInput {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_normals")]
    pub train_normals: usize,
    #[serde(default = "default_test_normals")]
    pub test_normals: usize,
    #[serde(default = "default_grid")]
    pub height: usize,
    #[serde(default = "default_grid")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_cluster_count")]
    pub cluster_count: usize,
    #[serde(default = "default_cluster_spread")]
    pub cluster_spread: f64,
    #[serde(default = "default_anomaly_shift")]
    pub anomaly_shift: f64,
    #[serde(default = "default_anomaly_region")]
    pub anomaly_region: (usize, usize),
    #[serde(default = "default_noise_ratio")]
    pub noise_ratio: f64,
}

fn default_classes() -> usize {
    2
}
fn default_train_normals() -> usize {
    50
}
fn default_test_normals() -> usize {
    30
}
fn default_grid() -> usize {
    8
}
fn default_channels() -> usize {
    4
}
fn default_cluster_count() -> usize {
    3
}
fn default_cluster_spread() -> f64 {
    0.15
}
fn default_anomaly_shift() -> f64 {
    2.0
}
fn default_anomaly_region() -> (usize, usize) {
    (2, 4)
}
fn default_noise_ratio() -> f64 {
    0.1
}

impl Default for SynthInput {
    fn default() -> Self {
        toml::from_str("").expect("field defaults")
    }
}

impl SynthInput {
    /// The generator spec; clean images cover both splits so the pool
    /// matches their count.
    pub fn to_spec(&self, data_seed: u64) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            images_per_class: self.train_normals + self.test_normals,
            height: self.height,
            width: self.width,
            channels: self.channels,
            cluster_count: self.cluster_count,
            cluster_spread: self.cluster_spread,
            anomaly_shift: self.anomaly_shift,
            anomaly_region: self.anomaly_region,
            seed: data_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_ensemble_size")]
    pub size: usize,
    #[serde(default = "default_subsample_ratio")]
    pub subsample_ratio: f64,
}

fn default_ensemble_size() -> usize {
    100
}
fn default_subsample_ratio() -> f64 {
    0.1
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            size: default_ensemble_size(),
            subsample_ratio: default_subsample_ratio(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_distill_iters")]
    pub iterations: usize,
}

fn default_distill_iters() -> usize {
    500
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: default_distill_iters(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_finetune_iters")]
    pub iterations: usize,
    /// MAD multiplier `k` at the end of the schedule.
    #[serde(default = "default_critical_value")]
    pub critical_value: f64,
    /// Robust-max window: mean of the top `n` percent of patch scores.
    #[serde(default = "default_top_percent")]
    pub top_percent: f64,
}

fn default_finetune_iters() -> usize {
    10000
}
fn default_critical_value() -> f64 {
    1.0
}
fn default_top_percent() -> f64 {
    1.0
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: default_finetune_iters(),
            critical_value: default_critical_value(),
            top_percent: default_top_percent(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_fpr_limit")]
    pub fpr_limit: f64,
}

fn default_fpr_limit() -> f64 {
    0.3
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fpr_limit: default_fpr_limit(),
        }
    }
}

/// The three independent randomness sources: `data` drives synthesis and
/// contamination, `ensemble` drives bank subsampling, `training` drives
/// initialization and batch order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default = "default_data_seed")]
    pub data: u64,
    #[serde(default = "default_ensemble_seed")]
    pub ensemble: u64,
    #[serde(default = "default_training_seed")]
    pub training: u64,
}

fn default_data_seed() -> u64 {
    1
}
fn default_ensemble_seed() -> u64 {
    2
}
fn default_training_seed() -> u64 {
    3
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: default_data_seed(),
            ensemble: default_ensemble_seed(),
            training: default_training_seed(),
        }
    }
}

/// Structural ablations. `no_distill_init` fine-tunes from random weights
/// while still distilling a frozen selection criterion; `memory_criteria`
/// skips distillation and freezes the ensemble's own image scores instead
/// (it implies a random init).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default)]
    pub no_distill_init: bool,
    #[serde(default)]
    pub memory_criteria: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.input.train_file, &self.input.synth) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "input.train_file and input.synth are mutually exclusive",
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "input needs train_file or a [input.synth] table",
                ))
            }
            _ => {}
        }
        if self.input.synth.is_some() && self.input.test_file.is_some() {
            return Err(ConfigError::Invalid(
                "input.test_file does not combine with [input.synth]",
            ));
        }
        if let Some(synth) = &self.input.synth {
            if synth.train_normals == 0 {
                return Err(ConfigError::Invalid("synth.train_normals must be positive"));
            }
            if !(0.0..1.0).contains(&synth.noise_ratio) {
                return Err(ConfigError::Invalid("synth.noise_ratio must be in [0, 1)"));
            }
            synth
                .to_spec(self.seeds.data)
                .validate()
                .map_err(|_| ConfigError::Invalid("synth geometry is invalid"))?;
        }
        if self.ensemble.size == 0 {
            return Err(ConfigError::Invalid("ensemble.size must be positive"));
        }
        if !(self.ensemble.subsample_ratio > 0.0 && self.ensemble.subsample_ratio <= 1.0) {
            return Err(ConfigError::Invalid(
                "ensemble.subsample_ratio must be in (0, 1]",
            ));
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid("optimizer.learning_rate must be positive"));
        }
        if opt.batch_size == 0 {
            return Err(ConfigError::Invalid("optimizer.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&opt.beta1) || !(0.0..1.0).contains(&opt.beta2) {
            return Err(ConfigError::Invalid("optimizer betas must be in [0, 1)"));
        }
        if !(opt.epsilon > 0.0 && opt.epsilon.is_finite()) {
            return Err(ConfigError::Invalid("optimizer.epsilon must be positive"));
        }
        if self.distill.iterations == 0 {
            return Err(ConfigError::Invalid("distill.iterations must be positive"));
        }
        if self.finetune.iterations == 0 {
            return Err(ConfigError::Invalid("finetune.iterations must be positive"));
        }
        if !(self.finetune.critical_value >= 0.0 && self.finetune.critical_value.is_finite()) {
            return Err(ConfigError::Invalid(
                "finetune.critical_value must be a finite nonnegative number",
            ));
        }
        if !(self.finetune.top_percent > 0.0 && self.finetune.top_percent <= 100.0) {
            return Err(ConfigError::Invalid(
                "finetune.top_percent must be in (0, 100]",
            ));
        }
        if !(self.metrics.fpr_limit > 0.0 && self.metrics.fpr_limit <= 1.0) {
            return Err(ConfigError::Invalid("metrics.fpr_limit must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Command-line overrides; every `Some` wins over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub ensemble_size: Option<usize>,
    pub subsample_ratio: Option<f64>,
    pub distill_iters: Option<usize>,
    pub finetune_iters: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub critical_value: Option<f64>,
    pub top_percent: Option<f64>,
    pub fpr_limit: Option<f64>,
    pub noise_ratio: Option<f64>,
    /// Shorthand: data, ensemble, training become `s`, `s+1`, `s+2`.
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub ensemble_seed: Option<u64>,
    pub training_seed: Option<u64>,
    pub no_distill_init: bool,
    pub memory_criteria: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) -> Result<(), ConfigError> {
        if let Some(v) = self.ensemble_size {
            config.ensemble.size = v;
        }
        if let Some(v) = self.subsample_ratio {
            config.ensemble.subsample_ratio = v;
        }
        if let Some(v) = self.distill_iters {
            config.distill.iterations = v;
        }
        if let Some(v) = self.finetune_iters {
            config.finetune.iterations = v;
        }
        if let Some(v) = self.learning_rate {
            config.optimizer.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            config.optimizer.batch_size = v;
        }
        if let Some(v) = self.critical_value {
            config.finetune.critical_value = v;
        }
        if let Some(v) = self.top_percent {
            config.finetune.top_percent = v;
        }
        if let Some(v) = self.fpr_limit {
            config.metrics.fpr_limit = v;
        }
        if let Some(v) = self.noise_ratio {
            match &mut config.input.synth {
                Some(synth) => synth.noise_ratio = v,
                None => {
                    return Err(ConfigError::Invalid(
                        "--noise-ratio needs a synthetic input",
                    ))
                }
            }
        }
        if let Some(s) = self.seed {
            config.seeds = Seeds {
                data: s,
                ensemble: s.wrapping_add(1),
                training: s.wrapping_add(2),
            };
        }
        if let Some(s) = self.data_seed {
            config.seeds.data = s;
        }
        if let Some(s) = self.ensemble_seed {
            config.seeds.ensemble = s;
        }
        if let Some(s) = self.training_seed {
            config.seeds.training = s;
        }
        if self.no_distill_init {
            config.ablation.no_distill_init = true;
        }
        if self.memory_criteria {
            config.ablation.memory_criteria = true;
        }
        Ok(())
    }
}

/// Output root precedence: `--out` flag, then `[output].dir`, then the
/// `MEDS_OUT_ROOT` environment variable, then `./meds-out`.
pub fn resolve_out_root(flag: Option<&Path>, config: Option<&PipelineConfig>) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = config.and_then(|c| c.output.dir.as_deref()) {
        return dir.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(OUT_ROOT_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("meds-out")
}
