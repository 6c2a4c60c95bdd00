//! `meds`: memory ensembles, score distillation, and progressive selection
//! for noise-robust anomaly detection on patch-feature tensors.
//!
//! Every command exits 0 on success. On failure the last stderr line is
//! `MEDS-ERROR <message>` and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use meds_cli::config::{resolve_out_root, ConfigError, Overrides, PipelineConfig};
use meds_cli::files::{self, FileError};
use meds_cli::infer::upsample_nearest;
use meds_cli::pipeline::{
    build_experiment, evaluate_model, patch_auroc, run_pipeline, uniform_channels, PipelineError,
};
use meds_cli::report::{self, format_metrics, ranking_rows, ReportError};
use meds_cli::sweep::{run_sweep, SweepAxis};
use meds_core::dataset::DataError;
use meds_core::memory::MemoryEnsemble;
use meds_core::metrics::MetricError;
use meds_core::reconstructor::{train_distill, Reconstructor, TrainConfig};
use meds_core::selection::{finetune_with_selection, robust_max, robust_max_scores};
use meds_core::theory::{sample_separable_instance, verify_theorem};

#[derive(Parser)]
#[command(
    name = "meds",
    version,
    about = "Noise-robust anomaly detection: memory ensembles, score distillation, progressive selection"
)]
struct Cli {
    /// Output root; defaults to $MEDS_OUT_ROOT, then ./meds-out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic contaminated experiment and write its feature files.
    GenSynth(GenSynthArgs),
    /// Build the bootstrapped memory ensemble and cache its score maps.
    MemoryScore(MemoryScoreArgs),
    /// Distill a cached score map set into a student checkpoint.
    Distill(DistillArgs),
    /// Fine-tune a checkpoint with progressive self-selection.
    Finetune(FinetuneArgs),
    /// Run the full three-phase pipeline from a config file.
    Run(RunArgs),
    /// Run the pipeline once per value along one hyperparameter axis.
    Sweep(SweepArgs),
    /// Check the bank-size gap bounds on random separable instances.
    TheoryVerify(TheoryVerifyArgs),
    /// Rank training images by final selection score for label correction.
    AlcRank(AlcRankArgs),
    /// Evaluate a checkpoint on a test feature file.
    Eval(EvalArgs),
    /// Score one image with a checkpoint at a chosen resolution.
    Infer(InferArgs),
}

/// Flag overrides shared by the config-driven commands; flags win over the
/// config file.
#[derive(Args, Default)]
struct OverrideArgs {
    #[arg(long, value_name = "B")]
    ensemble_size: Option<usize>,
    #[arg(long, value_name = "RHO")]
    subsample_ratio: Option<f64>,
    #[arg(long, value_name = "T")]
    distill_iters: Option<usize>,
    #[arg(long, value_name = "T")]
    finetune_iters: Option<usize>,
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "K")]
    critical_value: Option<f64>,
    #[arg(long, value_name = "PCT")]
    top_percent: Option<f64>,
    #[arg(long, value_name = "F")]
    fpr_limit: Option<f64>,
    #[arg(long, value_name = "R")]
    noise_ratio: Option<f64>,
    /// Shorthand: data, ensemble, training seeds become s, s+1, s+2.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    #[arg(long, value_name = "S")]
    data_seed: Option<u64>,
    #[arg(long, value_name = "S")]
    ensemble_seed: Option<u64>,
    #[arg(long, value_name = "S")]
    training_seed: Option<u64>,
    /// Fine-tune from random weights; distillation still provides the
    /// frozen selection criterion.
    #[arg(long)]
    no_distill_init: bool,
    /// Skip distillation; freeze the memory ensemble's image scores as the
    /// selection criterion and fine-tune from random weights.
    #[arg(long)]
    memory_criteria: bool,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            ensemble_size: self.ensemble_size,
            subsample_ratio: self.subsample_ratio,
            distill_iters: self.distill_iters,
            finetune_iters: self.finetune_iters,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            critical_value: self.critical_value,
            top_percent: self.top_percent,
            fpr_limit: self.fpr_limit,
            noise_ratio: self.noise_ratio,
            seed: self.seed,
            data_seed: self.data_seed,
            ensemble_seed: self.ensemble_seed,
            training_seed: self.training_seed,
            no_distill_init: self.no_distill_init,
            memory_criteria: self.memory_criteria,
        }
    }
}

#[derive(Args)]
struct GenSynthArgs {
    /// Pipeline config with an [input.synth] table.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct MemoryScoreArgs {
    /// Training feature file.
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    #[arg(long, default_value_t = 100, value_name = "B")]
    ensemble_size: usize,
    #[arg(long, default_value_t = 0.1, value_name = "RHO")]
    subsample_ratio: f64,
    #[arg(long, default_value_t = 2, value_name = "S")]
    seed: u64,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Score cache produced by memory-score.
    #[arg(long, value_name = "FILE")]
    cache: PathBuf,
    #[arg(long, default_value_t = 500, value_name = "T")]
    distill_iters: usize,
    #[arg(long, default_value_t = 1e-3, value_name = "LR")]
    lr: f64,
    #[arg(long, default_value_t = 8, value_name = "N")]
    batch_size: usize,
    #[arg(long, default_value_t = 3, value_name = "S")]
    training_seed: u64,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Checkpoint providing the frozen selection criterion (and, unless
    /// --random-init, the starting weights).
    #[arg(long, value_name = "FILE")]
    init: PathBuf,
    /// Freeze robust-max scores of this cache instead of the init model's.
    #[arg(long, value_name = "FILE")]
    criteria_cache: Option<PathBuf>,
    /// Start from fresh random weights.
    #[arg(long)]
    random_init: bool,
    #[arg(long, default_value_t = 10000, value_name = "T")]
    finetune_iters: usize,
    #[arg(long, default_value_t = 1.0, value_name = "K")]
    critical_value: f64,
    #[arg(long, default_value_t = 1.0, value_name = "PCT")]
    top_percent: f64,
    #[arg(long, default_value_t = 1e-3, value_name = "LR")]
    lr: f64,
    #[arg(long, default_value_t = 8, value_name = "N")]
    batch_size: usize,
    #[arg(long, default_value_t = 3, value_name = "S")]
    training_seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// noise_ratio, subsample_ratio, ensemble_size, distill_iters or
    /// critical_value.
    #[arg(long, value_name = "AXIS")]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true, value_name = "V,V,...")]
    values: Vec<f64>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct TheoryVerifyArgs {
    #[arg(long, default_value_t = 20, value_name = "N")]
    instances: usize,
    #[arg(long, default_value_t = 200, value_name = "N")]
    max_pool: usize,
    #[arg(long, default_value_t = 8, value_name = "C")]
    max_channels: usize,
    /// Bank sizes 1..=m are all verified.
    #[arg(long, default_value_t = 50, value_name = "M")]
    max_bank: usize,
    #[arg(long, default_value_t = 1e-9, value_name = "TOL")]
    tolerance: f64,
    #[arg(long, default_value_t = 7, value_name = "S")]
    seed: u64,
}

#[derive(Args)]
struct AlcRankArgs {
    /// Labeled training feature file.
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Final model checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0, value_name = "PCT")]
    top_percent: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1.0, value_name = "PCT")]
    top_percent: f64,
    #[arg(long, default_value_t = 0.3, value_name = "F")]
    fpr_limit: f64,
}

#[derive(Args)]
struct InferArgs {
    /// Feature file holding the image to score.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Image index within the file.
    #[arg(long, default_value_t = 0, value_name = "I")]
    image: usize,
    /// Output resolution; defaults to the score grid itself.
    #[arg(long, value_name = "H")]
    height: Option<usize>,
    #[arg(long, value_name = "W")]
    width: Option<usize>,
    #[arg(long, default_value_t = 1.0, value_name = "PCT")]
    top_percent: f64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Pipeline(#[from] PipelineError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("file: {0}")]
    File(#[from] FileError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("usage: {0}")]
    Usage(String),
    #[error("verify: {0}")]
    Verify(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                // --help and --version land here.
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            eprintln!("MEDS-ERROR usage: invalid arguments");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("MEDS-ERROR {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let out_flag = cli.out.as_deref();
    match cli.command {
        Command::GenSynth(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            if config.input.synth.is_none() {
                return Err(CliError::Usage(
                    "gen-synth needs an [input.synth] table in the config".into(),
                ));
            }
            let out = resolve_out_root(out_flag, Some(&config));
            let cache = out.join("cache");
            std::fs::create_dir_all(&cache)?;
            let experiment = build_experiment(&config).map_err(|e| PipelineError {
                phase: "data",
                source: e,
            })?;
            let train_path = cache.join("train.meds");
            files::write_feature_file(&experiment.train, &train_path)?;
            let ratio = experiment.train.noise_ratio().unwrap_or(0.0);
            println!(
                "wrote {} ({} images, noise ratio {ratio})",
                train_path.display(),
                experiment.train.len()
            );
            if let Some(test) = &experiment.test {
                let test_path = cache.join("test.meds");
                files::write_feature_file(test, &test_path)?;
                println!("wrote {} ({} images)", test_path.display(), test.len());
            }
            Ok(())
        }
        Command::MemoryScore(args) => {
            let out = resolve_out_root(out_flag, None);
            let cache_dir = out.join("cache");
            let reports_dir = out.join("reports");
            std::fs::create_dir_all(&cache_dir)?;
            std::fs::create_dir_all(&reports_dir)?;
            let train = files::read_feature_file(&args.train)?;
            let bank_count = std::num::NonZeroUsize::new(args.ensemble_size)
                .ok_or_else(|| CliError::Usage("--ensemble-size must be positive".into()))?;
            let ensemble =
                MemoryEnsemble::build(&train, bank_count, args.subsample_ratio, args.seed)?;
            let maps = ensemble.score_dataset(&train)?;
            let cache_path = cache_dir.join("ensemble_scores.medc");
            files::write_score_cache(&maps, &cache_path)?;
            println!("wrote {} ({} maps)", cache_path.display(), maps.len());
            if let Some(auroc) = patch_auroc(&train, &maps)? {
                let rows = vec![("train.patch_auroc".to_string(), auroc)];
                report::write_metrics(reports_dir.join("memory_metrics.txt"), &rows)?;
                print!("{}", format_metrics(&rows));
            }
            Ok(())
        }
        Command::Distill(args) => {
            let out = resolve_out_root(out_flag, None);
            let ckpt_dir = out.join("checkpoints");
            let reports_dir = out.join("reports");
            std::fs::create_dir_all(&ckpt_dir)?;
            std::fs::create_dir_all(&reports_dir)?;
            let train = files::read_feature_file(&args.train)?;
            let cache = files::read_score_cache(&args.cache)?;
            let config = TrainConfig {
                iterations: args.distill_iters,
                batch_size: args.batch_size,
                learning_rate: args.lr,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                seed: args.training_seed,
            };
            let outcome = train_distill(&train, &cache, &config)?;
            let path = ckpt_dir.join("distilled.medp");
            files::write_checkpoint(&outcome.model, &path)?;
            report::write_loss_history(
                reports_dir.join("distill_loss.tsv"),
                &outcome.loss_history,
            )?;
            println!("wrote {}", path.display());
            if let Some(&loss) = outcome.loss_history.last() {
                println!("distill.final_loss = {loss}");
            }
            Ok(())
        }
        Command::Finetune(args) => {
            let out = resolve_out_root(out_flag, None);
            let ckpt_dir = out.join("checkpoints");
            let reports_dir = out.join("reports");
            std::fs::create_dir_all(&ckpt_dir)?;
            std::fs::create_dir_all(&reports_dir)?;
            let train = files::read_feature_file(&args.train)?;
            let criteria_model = files::read_checkpoint(&args.init)?;
            let frozen = match &args.criteria_cache {
                Some(path) => {
                    let maps = files::read_score_cache(path)?;
                    robust_max_scores(&maps, args.top_percent)?
                }
                None => {
                    let maps = criteria_model.score_dataset(&train)?;
                    robust_max_scores(&maps, args.top_percent)?
                }
            };
            let init = if args.random_init {
                Reconstructor::init(uniform_channels(&train)?, args.training_seed)?
            } else {
                criteria_model
            };
            let config = TrainConfig {
                iterations: args.finetune_iters,
                batch_size: args.batch_size,
                learning_rate: args.lr,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                seed: args.training_seed,
            };
            let outcome = finetune_with_selection(
                init,
                &frozen,
                &train,
                &config,
                args.critical_value,
                args.top_percent,
            )?;
            let path = ckpt_dir.join("final.medp");
            files::write_checkpoint(&outcome.model, &path)?;
            report::write_loss_history(
                reports_dir.join("finetune_loss.tsv"),
                &outcome.loss_history,
            )?;
            report::write_audit(reports_dir.join("selection_audit.tsv"), &outcome.audit)?;
            println!("wrote {}", path.display());
            println!("selection.size = {}", outcome.final_state.selected.len());
            if let Some(&loss) = outcome.loss_history.last() {
                println!("finetune.final_loss = {loss}");
            }
            Ok(())
        }
        Command::Run(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            let out = resolve_out_root(out_flag, Some(&config));
            let outcome = run_pipeline(&config, &out)?;
            print!("{}", format_metrics(&outcome.metrics));
            println!("artifacts: {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Sweep(args) => {
            let config = load_config(&args.config, &args.overrides)?;
            let out = resolve_out_root(out_flag, Some(&config));
            let outcome = run_sweep(&config, args.axis, &args.values, &out)?;
            for row in &outcome.rows {
                match &row.outcome {
                    Ok(_) => println!("{} = {}: ok", outcome.axis, row.value),
                    Err(e) => println!("{} = {}: failed ({e})", outcome.axis, row.value),
                }
            }
            println!("summary: {}", outcome.summary_path.display());
            Ok(())
        }
        Command::TheoryVerify(args) => cmd_theory_verify(args, out_flag),
        Command::AlcRank(args) => {
            let out = resolve_out_root(out_flag, None);
            let reports_dir = out.join("reports");
            std::fs::create_dir_all(&reports_dir)?;
            let train = files::read_feature_file(&args.train)?;
            let labels = train
                .truth_labels()
                .ok_or_else(|| CliError::Usage("alc-rank needs truth labels".into()))?
                .to_vec();
            let model = files::read_checkpoint(&args.checkpoint)?;
            let maps = model.score_dataset(&train)?;
            let etas = robust_max_scores(&maps, args.top_percent)?;
            let rows = ranking_rows(&etas, train.class_ids(), Some(&labels));
            let path = reports_dir.join("alc_ranking.tsv");
            report::write_ranking(&path, &rows)?;
            println!("wrote {}", path.display());
            let metric_rows = meds_cli::pipeline::alc_metrics(&etas, &labels)
                .map_err(|e| PipelineError {
                    phase: "eval",
                    source: e,
                })?;
            print!("{}", format_metrics(&metric_rows));
            Ok(())
        }
        Command::Eval(args) => {
            let out = resolve_out_root(out_flag, None);
            let reports_dir = out.join("reports");
            std::fs::create_dir_all(&reports_dir)?;
            let test = files::read_feature_file(&args.test)?;
            let model = files::read_checkpoint(&args.checkpoint)?;
            let rows = evaluate_model(&model, &test, args.top_percent, args.fpr_limit)
                .map_err(|e| PipelineError {
                    phase: "eval",
                    source: e,
                })?;
            report::write_metrics(reports_dir.join("eval_metrics.txt"), &rows)?;
            print!("{}", format_metrics(&rows));
            Ok(())
        }
        Command::Infer(args) => {
            let out = resolve_out_root(out_flag, None);
            let reports_dir = out.join("reports");
            std::fs::create_dir_all(&reports_dir)?;
            let input = files::read_feature_file(&args.input)?;
            if args.image >= input.len() {
                return Err(CliError::Usage(format!(
                    "image index {} out of range (file holds {})",
                    args.image,
                    input.len()
                )));
            }
            let model = files::read_checkpoint(&args.checkpoint)?;
            let map = model.score_image(input.image(args.image))?;
            let score = robust_max(&map, args.top_percent)?;
            let out_h = args.height.unwrap_or(map.height());
            let out_w = args.width.unwrap_or(map.width());
            let resized = upsample_nearest(&map, out_h, out_w)?;
            let mut grid = String::new();
            for h in 0..resized.height() {
                for w in 0..resized.width() {
                    if w > 0 {
                        grid.push('\t');
                    }
                    grid.push_str(&resized.at(h, w).to_string());
                }
                grid.push('\n');
            }
            let path = reports_dir.join(format!("infer_{}.tsv", args.image));
            std::fs::write(&path, grid)?;
            println!("wrote {}", path.display());
            println!("image.score = {score}");
            Ok(())
        }
    }
}

fn load_config(path: &std::path::Path, overrides: &OverrideArgs) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::load(path)?;
    overrides.to_overrides().apply(&mut config)?;
    config.validate()?;
    Ok(config)
}

/// splitmix64; spreads one seed into per-instance parameters.
fn mix(seed: u64, lane: u64) -> u64 {
    let mut z = seed.wrapping_add(lane.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cmd_theory_verify(
    args: TheoryVerifyArgs,
    out_flag: Option<&std::path::Path>,
) -> Result<(), CliError> {
    if args.instances == 0 || args.max_pool < 20 || args.max_channels == 0 || args.max_bank == 0 {
        return Err(CliError::Usage(
            "theory-verify needs instances >= 1, max-pool >= 20, max-channels >= 1, max-bank >= 1"
                .into(),
        ));
    }
    let out = resolve_out_root(out_flag, None);
    let reports_dir = out.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    let bank_sizes: Vec<usize> = (1..=args.max_bank).collect();
    let mut text = String::new();
    let mut failures = 0usize;
    for i in 0..args.instances {
        let lane = 3 * i as u64;
        let pool_size = 20 + (mix(args.seed, lane) % (args.max_pool as u64 - 19)) as usize;
        let channels = 1 + (mix(args.seed, lane + 1) % args.max_channels as u64) as usize;
        let instance_seed = mix(args.seed, lane + 2);
        let (pool, q_norm, q_anom) =
            sample_separable_instance(pool_size, channels, instance_seed)?;
        let report = verify_theorem(&pool, &q_norm, &q_anom, &bank_sizes)?;
        let ok = report.holds(args.tolerance);
        if !ok {
            failures += 1;
        }
        println!(
            "instance {i}: pool={pool_size} channels={channels} m=1..{} {}",
            args.max_bank,
            if ok { "PASS" } else { "FAIL" }
        );
        text.push_str(&format!("# instance {i}\n"));
        text.push_str(&report::format_theorem_report(&report, args.tolerance));
        text.push('\n');
    }
    let path = reports_dir.join("theory.txt");
    std::fs::write(&path, text)?;
    println!(
        "theory-verify: {}/{} instances hold (tolerance {})",
        args.instances - failures,
        args.instances,
        args.tolerance
    );
    println!("wrote {}", path.display());
    if failures > 0 {
        return Err(CliError::Verify(format!(
            "{failures} of {} instances violated the bounds",
            args.instances
        )));
    }
    Ok(())
}
