//! The acceptance gate: ten numbered checks, each printing one
//! `ACCEPTANCE <id> <name>: PASS|FAIL` line. Run
//! `cargo test --test acceptance -- --nocapture` to see the lines; a plain
//! `cargo test` exercises the same checks.
//!
//! Expected values come from oracles written in this file: exhaustive tuple
//! enumeration, pairwise counting, central finite differences, and a
//! standalone region sweep. The oracles deliberately share no code with the
//! library paths they check.

use std::collections::BTreeMap;
use std::fs;
use std::num::NonZeroUsize;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use meds_cli::config::PipelineConfig;
use meds_cli::files;
use meds_cli::pipeline::{build_experiment, patch_auroc, run_pipeline};
use meds_core::dataset::{FeatureDataset, PatchFeatureMap};
use meds_core::memory::{MemoryEnsemble, ScoreMap};
use meds_core::metrics::{
    alc_auprc, aupro, auroc, average_precision, inspection_depth, RankedScores,
};
use meds_core::reconstructor::{distill_loss_and_grad, finetune_loss_and_grad, Reconstructor};
use meds_core::selection::{
    class_threshold, finetune_all, robust_max_scores, schedule, SelectionState,
};
use meds_core::synth::{generate_synthetic_dataset, SynthSpec};
use meds_core::theory::{
    expected_nn_distance_exact, expected_nn_distance_mc, integer_weight_argmax,
    optimal_bank_size, sample_separable_instance, spatial_proportion, FinitePool, GapAnalysis,
};

fn criterion<F: FnOnce()>(id: usize, name: &str, body: F) {
    let result = catch_unwind(AssertUnwindSafe(body));
    let verdict = if result.is_ok() { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {id} {name}: {verdict}");
    if let Err(panic) = result {
        std::panic::resume_unwind(panic);
    }
}

/// splitmix64 of `seed ^ f(lane)`: cheap deterministic randomness for test
/// instances, unrelated to the library's generators.
fn mix(seed: u64, lane: u64) -> u64 {
    let mut z = seed ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(seed: u64, lane: u64) -> f64 {
    (mix(seed, lane) >> 11) as f64 / (1u64 << 53) as f64
}

fn config_from(text: &str) -> PipelineConfig {
    let config: PipelineConfig = toml::from_str(text).expect("valid config");
    config.validate().expect("config in range");
    config
}

fn metric(rows: &[(String, f64)], name: &str) -> f64 {
    rows.iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| panic!("metric {name} missing from {rows:?}"))
}

// --- 1: the bank-size theorem on sampled separable instances ---------------

#[test]
fn criterion_01() {
    criterion(1, "theorem-gap-and-peak", || {
        const TOL: f64 = 1e-9;
        let start = Instant::now();
        let mut peaks_checked = 0usize;
        for i in 0..20u64 {
            let pool_size = 20 + ((i * 37) % 181) as usize;
            let channels = 1 + (i % 8) as usize;
            assert!(pool_size <= 200 && channels <= 8);
            let (pool, q_norm, q_anom) =
                sample_separable_instance(pool_size, channels, 1000 + i).expect("instance");
            let analysis = GapAnalysis::new(&pool, &q_norm, &q_anom).expect("analysis");
            assert!(analysis.is_strictly_separable(), "instance {i} not separable");

            for m in 1..=50 {
                let gap = analysis.gap(m);
                let first = analysis.gap_first_order(m);
                let bound = analysis.remainder_bound(m);
                assert!(gap > 0.0, "instance {i}, m = {m}: gap {gap} not positive");
                assert!(
                    first <= gap + TOL,
                    "instance {i}, m = {m}: first-order term {first} above gap {gap}"
                );
                assert!(
                    gap - first <= bound + TOL,
                    "instance {i}, m = {m}: remainder {} above bound {bound}",
                    gap - first
                );
            }
            // m = 1 has no curvature: the first-order term is the whole gap.
            assert!(
                (analysis.gap(1) - analysis.gap_first_order(1)).abs() <= TOL,
                "instance {i}: m = 1 must be exact"
            );

            // At every breakpoint with an interior proportion, the discrete
            // weight peaks at an integer neighbor of the continuous peak.
            // The weight is unimodal, so scanning past the peak suffices.
            for k in 0..analysis.breakpoints().len() {
                let pi = analysis.pi_norm_at(k);
                if !(pi > 0.0 && pi < 1.0) {
                    continue;
                }
                let m_star = optimal_bank_size(pi).expect("interior proportion");
                let m_max = (m_star.ceil() as usize + 2).max(2);
                let argmax = integer_weight_argmax(pi, m_max);
                let lo = (m_star.floor() as usize).max(1);
                let hi = (m_star.ceil() as usize).max(1);
                assert!(
                    argmax == lo || argmax == hi,
                    "instance {i}, breakpoint {k}: argmax {argmax} not in [{lo}, {hi}] \
                     (pi = {pi}, m* = {m_star})"
                );
                peaks_checked += 1;
            }
        }
        assert!(peaks_checked > 0, "no interior breakpoints seen");
        let elapsed = start.elapsed();
        assert!(
            elapsed < Duration::from_secs(10),
            "theorem suite took {elapsed:?}, budget is 10 s"
        );
    });
}

// --- 2: survival identity against full tuple enumeration -------------------

/// Distances from `q` to every pool vector, computed without the library.
fn plain_distances(pool: &FinitePool, q: &[f64]) -> Vec<f64> {
    (0..pool.len())
        .map(|i| {
            pool.vector(i)
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Minimum distance of every one of the `n^m` ordered draws.
fn enumerate_minima(distances: &[f64], m: usize) -> Vec<f64> {
    let n = distances.len();
    let count = n.pow(m as u32);
    let mut minima = Vec::with_capacity(count);
    for mut tuple in 0..count {
        let mut best = f64::INFINITY;
        for _ in 0..m {
            let d = distances[tuple % n];
            if d < best {
                best = d;
            }
            tuple /= n;
        }
        minima.push(best);
    }
    minima
}

#[test]
fn criterion_02() {
    criterion(2, "survival-enumeration", || {
        const TOL: f64 = 1e-12;
        let pools: &[(usize, &[f64])] = &[
            (1, &[0.5, -0.5, 1.5, 2.0]),
            (1, &[0.0, 0.0, 1.0, 3.0, -2.0, 7.0]),
            (2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            (3, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0, 0.5, 0.3, -0.7, 2.0]),
            (2, &[2.0, 1.0, -3.0, 0.5, 0.25, 0.25, 4.0, 4.0, 1.0, -1.0, 0.5, 2.5]),
        ];
        for &(channels, vectors) in pools {
            let pool = FinitePool::new(channels, vectors.to_vec()).expect("pool");
            let n = pool.len();
            // One generic query and one sitting on a pool point, so zero
            // distances and tied distances both appear.
            let generic: Vec<f64> = (0..channels).map(|c| 0.1 + 0.2 * c as f64).collect();
            let coincident = pool.vector(n - 1).to_vec();
            for q in [&generic, &coincident] {
                let distances = plain_distances(&pool, q);
                for m in 1..=3usize {
                    let minima = enumerate_minima(&distances, m);
                    let count = minima.len() as f64;
                    let mean = minima.iter().sum::<f64>() / count;
                    let exact = expected_nn_distance_exact(&pool, q, m).expect("exact");
                    assert!(
                        (exact - mean).abs() <= TOL,
                        "mean mismatch: exact {exact}, enumeration {mean} (n = {n}, m = {m})"
                    );

                    // Survival identity at each distinct radius, between
                    // radii, and beyond the largest distance.
                    let mut radii = distances.clone();
                    radii.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                    radii.dedup();
                    let mut probes = radii.clone();
                    probes.extend(radii.windows(2).map(|w| 0.5 * (w[0] + w[1])));
                    probes.push(radii.last().expect("nonempty") + 1.0);
                    for r in probes {
                        let pi = spatial_proportion(&pool, q, r).expect("proportion");
                        let survive =
                            minima.iter().filter(|&&d| d > r).count() as f64 / count;
                        let predicted = (1.0 - pi).powi(m as i32);
                        assert!(
                            (survive - predicted).abs() <= TOL,
                            "survival mismatch at r = {r}: enumerated {survive}, \
                             (1 - pi)^m = {predicted}"
                        );
                    }
                }
            }
        }
    });
}

// --- 3: Monte Carlo agreement with the closed form -------------------------

#[test]
fn criterion_03() {
    criterion(3, "monte-carlo-agreement", || {
        let mut checks = 0usize;
        let mut failures = 0usize;
        for i in 0..25u64 {
            let pool_size = 10 + ((i * 13) % 120) as usize;
            let channels = 1 + (i % 6) as usize;
            let (pool, q_norm, q_anom) =
                sample_separable_instance(pool_size, channels, 400 + i).expect("instance");
            for (qi, q) in [&q_norm, &q_anom].into_iter().enumerate() {
                let m = 1 + ((i as usize * 7 + qi * 3) % 20);
                let exact = expected_nn_distance_exact(&pool, q, m).expect("exact");
                for lane in 0..2u64 {
                    let seed = mix(77 + lane, i * 2 + qi as u64);
                    let mc = expected_nn_distance_mc(&pool, q, m, 100_000, seed).expect("mc");
                    checks += 1;
                    if (mc.mean - exact).abs() > 3.0 * mc.std_error {
                        failures += 1;
                    }
                }
            }
        }
        assert_eq!(checks, 100);
        // A three-standard-error gate leaves ~0.3% legitimate misses; allow
        // one in a hundred.
        assert!(
            failures <= 1,
            "{failures} of {checks} estimates fell outside three standard errors"
        );
    });
}

// --- 4: analytic gradients against central finite differences --------------

fn fd_batch(channels: usize, seed: u64) -> (FeatureDataset, FeatureDataset) {
    let spec = SynthSpec {
        classes: 1,
        images_per_class: 3,
        height: 2,
        width: 3,
        channels,
        cluster_count: 2,
        cluster_spread: 0.4,
        anomaly_shift: 1.0,
        anomaly_region: (1, 2),
        seed,
    };
    generate_synthetic_dataset(&spec).expect("synthetic data")
}

fn perturbed_model(channels: usize, seed: u64, lane: u64) -> Reconstructor {
    let mut model = Reconstructor::init(channels, seed).expect("init");
    for (j, p) in model.params_mut().iter_mut().enumerate() {
        *p += 0.35 * (unit(lane, j as u64) - 0.5);
    }
    model
}

fn assert_grad_matches(analytic: &[f64], loss_at: impl Fn(&[f64]) -> f64, theta: &[f64]) {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut probe = theta.to_vec();
    for j in 0..theta.len() {
        probe[j] = theta[j] + STEP;
        let plus = loss_at(&probe);
        probe[j] = theta[j] - STEP;
        let minus = loss_at(&probe);
        probe[j] = theta[j];
        let fd = (plus - minus) / (2.0 * STEP);
        let denom = analytic[j].abs().max(fd.abs()).max(1e-6);
        let rel = (analytic[j] - fd).abs() / denom;
        assert!(
            rel <= TOL,
            "param {j}: analytic {} vs finite difference {fd} (rel {rel:.2e})",
            analytic[j]
        );
    }
}

#[test]
fn criterion_04() {
    criterion(4, "gradient-finite-difference", || {
        for i in 0..10u64 {
            let channels = 2 + (i % 4) as usize;
            let (clean, pool) = fd_batch(channels, 60 + i);
            let batch = [clean.image(0), clean.image(1), pool.image(2)];
            let model = perturbed_model(channels, 500 + i, 91 + i);
            let teacher = perturbed_model(channels, 700 + i, 191 + i);
            let targets: Vec<ScoreMap> = batch
                .iter()
                .map(|img| teacher.score_image(img).expect("teacher map"))
                .collect();
            let target_refs: Vec<&ScoreMap> = targets.iter().collect();
            let mut grad = vec![0.0; model.param_count()];
            distill_loss_and_grad(&model, &batch, &target_refs, &mut grad).expect("loss");
            assert_grad_matches(
                &grad,
                |params| {
                    let probe =
                        Reconstructor::from_params(channels, params.to_vec()).expect("probe");
                    let mut scratch = vec![0.0; probe.param_count()];
                    distill_loss_and_grad(&probe, &batch, &target_refs, &mut scratch)
                        .expect("probe loss")
                },
                model.params(),
            );
        }
        for i in 0..10u64 {
            let channels = 2 + (i % 4) as usize;
            let (clean, pool) = fd_batch(channels, 160 + i);
            let batch = [clean.image(1), pool.image(0), pool.image(2)];
            let model = perturbed_model(channels, 800 + i, 291 + i);
            let mut grad = vec![0.0; model.param_count()];
            finetune_loss_and_grad(&model, &batch, &mut grad).expect("loss");
            assert_grad_matches(
                &grad,
                |params| {
                    let probe =
                        Reconstructor::from_params(channels, params.to_vec()).expect("probe");
                    let mut scratch = vec![0.0; probe.param_count()];
                    finetune_loss_and_grad(&probe, &batch, &mut scratch).expect("probe loss")
                },
                model.params(),
            );
        }
    });
}

// --- 5: ranking metrics against pairwise / sweep oracles --------------------

/// Probability a positive outranks a negative, ties half credit, by direct
/// pair counting.
fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Mean precision at each positive's rank. Valid only for distinct scores,
/// where ranks are convention-free.
fn oracle_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut positives = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        positives += 1;
        let higher = scores.iter().filter(|&&s| s > scores[i]).count();
        let pos_higher = scores
            .iter()
            .zip(labels)
            .filter(|&(&s, &l)| l && s > scores[i])
            .count();
        acc += (pos_higher + 1) as f64 / (higher + 1) as f64;
    }
    acc / positives as f64
}

/// 1-based rank of the worst-ranked positive over the total, distinct
/// scores only.
fn oracle_depth(scores: &[f64], labels: &[bool]) -> f64 {
    let mut worst = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li {
            let rank = scores.iter().filter(|&&s| s > scores[i]).count() + 1;
            worst = worst.max(rank);
        }
    }
    worst as f64 / scores.len() as f64
}

/// Connected components of a mask by an explicit stack walk.
fn oracle_regions(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            region.push(p);
            let (h, w) = (p / width, p % width);
            for (nh, nw) in [
                (h.wrapping_sub(1), w),
                (h + 1, w),
                (h, w.wrapping_sub(1)),
                (h, w + 1),
            ] {
                if nh < height && nw < width {
                    let q = nh * width + nw;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}

/// Region-overlap area by recomputing the full curve at every distinct
/// threshold from scratch.
fn oracle_aupro(maps: &[ScoreMap], masks: &[Vec<bool>], limit: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut normal_total = 0usize;
    for (img, mask) in masks.iter().enumerate() {
        for r in oracle_regions(mask, maps[img].height(), maps[img].width()) {
            regions.push((img, r));
        }
        normal_total += mask.iter().filter(|&&m| !m).count();
    }
    let mut thresholds: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.values().iter().copied())
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    thresholds.dedup();

    let mut points = vec![(0.0f64, 0.0f64)];
    for &t in &thresholds {
        let mut fp = 0usize;
        for (img, mask) in masks.iter().enumerate() {
            for (p, &m) in mask.iter().enumerate() {
                if !m && maps[img].values()[p] >= t {
                    fp += 1;
                }
            }
        }
        let pro = regions
            .iter()
            .map(|(img, region)| {
                let hit = region
                    .iter()
                    .filter(|&&p| maps[*img].values()[p] >= t)
                    .count();
                hit as f64 / region.len() as f64
            })
            .sum::<f64>()
            / regions.len() as f64;
        points.push((fp as f64 / normal_total as f64, pro));
    }

    let mut area = 0.0;
    for w in points.windows(2) {
        let (f0, p0) = w[0];
        let (f1, p1) = w[1];
        if f1 >= limit {
            let pm = if f1 > f0 {
                p0 + (p1 - p0) * (limit - f0) / (f1 - f0)
            } else {
                p1
            };
            area += (limit - f0) * (p0 + pm) / 2.0;
            return area / limit;
        }
        area += (f1 - f0) * (p0 + p1) / 2.0;
    }
    unreachable!("the lowest threshold admits every pixel, so FPR reaches 1")
}

#[test]
fn criterion_05() {
    criterion(5, "metric-oracles", || {
        const TOL: f64 = 1e-12;
        for k in 0..200u64 {
            let n = 2 + (mix(21, k) % 99) as usize;
            let mut labels: Vec<bool> = (0..n)
                .map(|i| unit(22, k * 101 + i as u64) < 0.5)
                .collect();
            labels[0] = true;
            labels[1] = false;
            // Every fourth instance quantizes scores to force ties; those
            // check the tie-aware ranking, the rest check all four metrics.
            let quantized = k % 4 == 3;
            let scores: Vec<f64> = (0..n)
                .map(|i| {
                    let lane = k * 101 + i as u64;
                    if quantized {
                        (mix(23, lane) % 6) as f64 * 0.25
                    } else {
                        unit(23, lane)
                    }
                })
                .collect();
            let ranked = RankedScores::new(scores.clone(), labels.clone()).expect("ranked");
            let got = auroc(&ranked).expect("both classes");
            let want = oracle_auroc(&scores, &labels);
            assert!((got - want).abs() <= TOL, "AUROC {got} vs oracle {want}");

            if !quantized {
                let mut sorted = scores.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                assert!(
                    sorted.windows(2).all(|w| w[0] < w[1]),
                    "instance {k} drew a score collision"
                );
                let got = average_precision(&ranked).expect("has positive");
                let want = oracle_ap(&scores, &labels);
                assert!((got - want).abs() <= TOL, "AP {got} vs oracle {want}");
                let got = alc_auprc(&scores, &labels).expect("has positive");
                assert!((got - want).abs() <= TOL, "AUPRC {got} vs oracle {want}");
                let got = inspection_depth(&scores, &labels).expect("has positive");
                let want = oracle_depth(&scores, &labels);
                assert!((got - want).abs() <= TOL, "depth {got} vs oracle {want}");
            }
        }

        // Region-overlap area on exhaustively swept 4x4 grids.
        for inst in 0..24u64 {
            let (h, w) = (4usize, 4usize);
            let mut maps = Vec::new();
            let mut masks = Vec::new();
            for img in 0..2u64 {
                let base = inst * 64 + img * 16;
                let mask: Vec<bool> = (0..16).map(|p| unit(31, base + p) < 0.35).collect();
                let values: Vec<f64> = (0..16)
                    .map(|p| {
                        if inst % 4 == 0 {
                            (mix(32, base + p) % 5) as f64 * 0.5
                        } else {
                            unit(32, base + p)
                        }
                    })
                    .collect();
                maps.push(ScoreMap::new(h, w, values).expect("map"));
                masks.push(mask);
            }
            if !masks.iter().flatten().any(|&m| m) {
                masks[0][5] = true;
            }
            if masks.iter().flatten().all(|&m| m) {
                masks[1][0] = false;
            }
            for limit in [0.3, 1.0] {
                let got = aupro(&maps, &masks, limit).expect("aupro");
                let want = oracle_aupro(&maps, &masks, limit);
                assert!(
                    (got - want).abs() <= TOL,
                    "AUPRO at limit {limit}: {got} vs oracle {want}"
                );
            }
        }
    });
}

// --- 6: the selection rule on worked examples -------------------------------

fn tiny_dataset(class_ids: Vec<u32>) -> FeatureDataset {
    let images = class_ids
        .iter()
        .map(|_| PatchFeatureMap::new(1, 1, 1, vec![0.0]).expect("patch"))
        .collect();
    FeatureDataset::new(images, class_ids, None, None).expect("dataset")
}

#[test]
fn criterion_06() {
    criterion(6, "selection-rule", || {
        // Median 3, absolute deviations {2, 1, 0, 1, 97}, MAD 1: the
        // threshold is exactly 4 and only the scores below it survive.
        let etas = vec![1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(class_threshold(&etas, 1.0).expect("threshold"), 4.0);
        let dataset = tiny_dataset(vec![0; 5]);
        let state =
            SelectionState::from_etas(&dataset, etas, 10, 10, 1.0, 1.0).expect("state");
        assert_eq!(state.thresholds.get(&0).copied(), Some(4.0));
        assert_eq!(state.selected, vec![0, 1, 2]);

        // Schedule endpoints are exact, and the blend saturates halfway.
        assert_eq!(schedule(10, 10, 1.7).expect("schedule"), (1.0, 1.7));
        assert_eq!(schedule(5, 10, 2.0).expect("schedule"), (1.0, 1.0));
        assert_eq!(schedule(200, 200, 0.0).expect("schedule"), (1.0, 0.0));

        // At zero critical value the threshold is the class median, so at
        // most the lower half survives (distinct scores; the tie fallback
        // would otherwise keep whole classes).
        for inst in 0..100u64 {
            let n = 1 + (mix(41, inst) % 40) as usize;
            let classes = 1 + (mix(42, inst) % 3) as u32;
            let class_ids: Vec<u32> = (0..n).map(|i| i as u32 % classes).collect();
            let dataset = tiny_dataset(class_ids);
            let etas: Vec<f64> = (0..n).map(|i| unit(43, inst * 101 + i as u64)).collect();
            let mut sorted = etas.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            assert!(sorted.windows(2).all(|w| w[0] < w[1]), "eta collision");
            let state =
                SelectionState::from_etas(&dataset, etas, 1, 10, 0.2, 0.0).expect("state");
            assert!(!state.selected.is_empty(), "selection must never starve");
            for class in dataset.classes() {
                let size = dataset.class_indices(class).len();
                let kept = state
                    .selected
                    .iter()
                    .filter(|&&i| dataset.class_id(i) == class)
                    .count();
                assert!(
                    kept <= size.div_ceil(2),
                    "class {class}: kept {kept} of {size} at zero critical value"
                );
            }
        }
    });
}

// --- 7-9: end-to-end behavior on contaminated synthetic data ----------------

/// The calibrated hard case: two well-separated Gaussian classes whose
/// student is just large enough to overfit anomalies when nothing filters
/// them, so selection is what separates the outcomes.
fn noisy_config(noise_ratio: f64) -> PipelineConfig {
    config_from(&format!(
        "[input.synth]\n\
         classes = 2\n\
         train_normals = 50\n\
         test_normals = 30\n\
         height = 8\n\
         width = 8\n\
         channels = 16\n\
         cluster_count = 2\n\
         cluster_spread = 0.15\n\
         anomaly_shift = 2.0\n\
         anomaly_region = [2, 4]\n\
         noise_ratio = {noise_ratio}\n"
    ))
}

/// The no-selection ablation, trained from the distilled checkpoint the
/// pipeline wrote, on exactly the same data.
fn plain_finetune(config: &PipelineConfig, out: &Path) -> (Reconstructor, FeatureDataset) {
    let experiment = build_experiment(config).expect("experiment");
    let init = files::read_checkpoint(out.join("checkpoints/distilled.medp")).expect("init");
    let train_cfg = meds_cli::pipeline::train_config(config, config.finetune.iterations);
    let (model, _) = finetune_all(init, &experiment.train, &train_cfg).expect("plain run");
    (model, experiment.train)
}

fn image_auroc(model: &Reconstructor, test: &FeatureDataset) -> f64 {
    let maps = model.score_dataset(test).expect("score test");
    let scores = robust_max_scores(&maps, 1.0).expect("robust max");
    let labels = test.truth_labels().expect("labels").to_vec();
    auroc(&RankedScores::new(scores, labels).expect("ranked")).expect("both classes")
}

#[test]
fn criterion_07() {
    criterion(7, "contamination-robustness", || {
        let config = noisy_config(0.4);
        let dir = tempfile::tempdir().expect("tempdir");
        let outcome = run_pipeline(&config, dir.path()).expect("pipeline");
        let meds = metric(&outcome.metrics, "image.auroc");
        assert!(meds >= 0.95, "image AUROC {meds} under 40% contamination");

        let (plain_model, _) = plain_finetune(&config, dir.path());
        let experiment = build_experiment(&config).expect("experiment");
        let plain = image_auroc(&plain_model, experiment.test.as_ref().expect("test split"));
        assert!(
            meds - plain >= 0.03,
            "selection gained only {:.4} over plain fine-tuning ({meds:.4} vs {plain:.4})",
            meds - plain
        );
    });
}

#[test]
fn criterion_08() {
    criterion(8, "subsampling-advantage", || {
        let config = noisy_config(0.4);
        let experiment = build_experiment(&config).expect("experiment");
        let train = &experiment.train;
        let score = |banks: usize, ratio: f64| {
            let ensemble = MemoryEnsemble::build(
                train,
                NonZeroUsize::new(banks).expect("positive"),
                ratio,
                2,
            )
            .expect("ensemble");
            let maps = ensemble.score_dataset(train).expect("score train");
            patch_auroc(train, &maps)
                .expect("finite scores")
                .expect("both patch classes")
        };
        let subsampled = score(100, 0.1);
        // At full subsampling every bank is the whole class pool, so one
        // bank reproduces any ensemble size; each image's own patches sit
        // in the pool and zero out its scores.
        let full = score(1, 1.0);
        assert!(
            subsampled > full + 0.05,
            "subsampled patch AUROC {subsampled:.4} does not beat full-pool {full:.4}"
        );
    });
}

#[test]
fn criterion_09() {
    criterion(9, "ranked-review", || {
        let config = noisy_config(0.2);
        let dir = tempfile::tempdir().expect("tempdir");
        let outcome = run_pipeline(&config, dir.path()).expect("pipeline");
        let meds_auprc = metric(&outcome.metrics, "alc.auprc");
        let meds_depth = metric(&outcome.metrics, "alc.inspection_depth");

        let (plain_model, train) = plain_finetune(&config, dir.path());
        let maps = plain_model.score_dataset(&train).expect("score train");
        let etas = robust_max_scores(&maps, 1.0).expect("robust max");
        let labels = train.truth_labels().expect("labels");
        let plain_auprc = alc_auprc(&etas, labels).expect("auprc");
        let plain_depth = inspection_depth(&etas, labels).expect("depth");

        assert!(
            meds_auprc >= plain_auprc,
            "review precision regressed: {meds_auprc:.4} vs plain {plain_auprc:.4}"
        );
        assert!(
            meds_depth <= plain_depth,
            "review depth regressed: {meds_depth:.4} vs plain {plain_depth:.4}"
        );
    });
}

// --- 10: bit-for-bit reproducibility ----------------------------------------

fn dir_snapshot(base: &Path, sub: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![base.join(sub)];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(base)
                    .expect("under base")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

#[test]
fn criterion_10() {
    criterion(10, "bit-determinism", || {
        let config = config_from(
            "[input.synth]\n\
             classes = 2\n\
             train_normals = 12\n\
             test_normals = 5\n\
             height = 4\n\
             width = 4\n\
             channels = 6\n\
             cluster_count = 2\n\
             cluster_spread = 0.3\n\
             anomaly_shift = 1.5\n\
             anomaly_region = [2, 2]\n\
             noise_ratio = 0.25\n\
             \n\
             [ensemble]\n\
             size = 10\n\
             subsample_ratio = 0.3\n\
             \n\
             [distill]\n\
             iterations = 60\n\
             \n\
             [finetune]\n\
             iterations = 150\n",
        );
        let dir_a = tempfile::tempdir().expect("tempdir");
        let dir_b = tempfile::tempdir().expect("tempdir");
        let a = run_pipeline(&config, dir_a.path()).expect("first run");
        let b = run_pipeline(&config, dir_b.path()).expect("second run");
        assert_eq!(a.metrics, b.metrics, "in-memory metrics diverged");

        for sub in ["reports", "checkpoints", "cache"] {
            let snap_a = dir_snapshot(dir_a.path(), sub);
            let snap_b = dir_snapshot(dir_b.path(), sub);
            assert_eq!(
                snap_a.keys().collect::<Vec<_>>(),
                snap_b.keys().collect::<Vec<_>>(),
                "artifact lists under {sub}/ diverged"
            );
            for (name, bytes) in &snap_a {
                assert!(
                    snap_b.get(name) == Some(bytes),
                    "artifact {name} is not byte-identical across runs"
                );
            }
        }
    });
}
