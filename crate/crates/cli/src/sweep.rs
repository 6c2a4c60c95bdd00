//! Seeded hyperparameter sweeps: one full pipeline run per value along a
//! single axis, all sharing the base config's seeds. Rows are isolated in
//! their own directories; a failing row is marked in the summary and never
//! stops the others.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::{ConfigError, PipelineConfig};
use crate::pipeline::{run_pipeline, PipelineError, StageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NoiseRatio,
    SubsampleRatio,
    EnsembleSize,
    DistillIters,
    CriticalValue,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::NoiseRatio,
        SweepAxis::SubsampleRatio,
        SweepAxis::EnsembleSize,
        SweepAxis::DistillIters,
        SweepAxis::CriticalValue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NoiseRatio => "noise_ratio",
            SweepAxis::SubsampleRatio => "subsample_ratio",
            SweepAxis::EnsembleSize => "ensemble_size",
            SweepAxis::DistillIters => "distill_iters",
            SweepAxis::CriticalValue => "critical_value",
        }
    }

    fn apply(self, config: &mut PipelineConfig, value: f64) -> Result<(), ConfigError> {
        let as_count = || -> Result<usize, ConfigError> {
            if value.fract() == 0.0 && value >= 1.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(ConfigError::Invalid("axis value must be a positive integer"))
            }
        };
        match self {
            SweepAxis::NoiseRatio => match &mut config.input.synth {
                Some(synth) => synth.noise_ratio = value,
                None => {
                    return Err(ConfigError::Invalid(
                        "noise_ratio sweep needs a synthetic input",
                    ))
                }
            },
            SweepAxis::SubsampleRatio => config.ensemble.subsample_ratio = value,
            SweepAxis::EnsembleSize => config.ensemble.size = as_count()?,
            SweepAxis::DistillIters => config.distill.iterations = as_count()?,
            SweepAxis::CriticalValue => config.finetune.critical_value = value,
        }
        Ok(())
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                format!("unknown axis {s:?}, expected one of {}", names.join(", "))
            })
    }
}

pub struct SweepRow {
    pub value: f64,
    pub outcome: Result<Vec<(String, f64)>, PipelineError>,
}

pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summary_path: PathBuf,
}

/// Columns every summary table reports, in order; absent values print `-`.
pub const SUMMARY_METRICS: [&str; 6] = [
    "image.auroc",
    "image.ap",
    "pixel.ap",
    "pixel.aupro",
    "selection.precision",
    "train.patch_auroc",
];

pub fn run_sweep(
    base: &PipelineConfig,
    axis: SweepAxis,
    values: &[f64],
    out_root: &Path,
) -> Result<SweepOutcome, PipelineError> {
    let wrap = |e: std::io::Error| PipelineError {
        phase: "sweep",
        source: StageError::Io(e),
    };
    if values.is_empty() {
        return Err(PipelineError {
            phase: "sweep",
            source: StageError::Config(ConfigError::Invalid("sweep needs at least one value")),
        });
    }
    let axis_dir = out_root.join("sweeps").join(axis.name());
    fs::create_dir_all(&axis_dir).map_err(wrap)?;

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let outcome = (|| {
            let mut config = base.clone();
            axis.apply(&mut config, value).map_err(|e| PipelineError {
                phase: "config",
                source: e.into(),
            })?;
            let row_dir = axis_dir.join(value.to_string());
            run_pipeline(&config, &row_dir).map(|o| o.metrics)
        })();
        rows.push(SweepRow { value, outcome });
    }

    let mut table = String::from("value\tstatus");
    for name in SUMMARY_METRICS {
        table.push('\t');
        table.push_str(name);
    }
    table.push('\n');
    for row in &rows {
        table.push_str(&row.value.to_string());
        match &row.outcome {
            Ok(metrics) => {
                table.push_str("\tok");
                for name in SUMMARY_METRICS {
                    table.push('\t');
                    match metrics.iter().find(|(n, _)| n == name) {
                        Some((_, v)) => table.push_str(&v.to_string()),
                        None => table.push('-'),
                    }
                }
            }
            Err(e) => {
                let message = e.to_string().replace(['\t', '\n'], " ");
                table.push_str("\tfailed: ");
                table.push_str(&message);
                for _ in SUMMARY_METRICS {
                    table.push_str("\t-");
                }
            }
        }
        table.push('\n');
    }
    let summary_path = axis_dir.join("summary.tsv");
    fs::write(&summary_path, table).map_err(wrap)?;

    Ok(SweepOutcome {
        axis,
        rows,
        summary_path,
    })
}
