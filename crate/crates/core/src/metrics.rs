//! Ranking and segmentation metrics.
//!
//! Image-level AUROC and average precision, pixel-level AUPRO over
//! connected ground-truth regions, and the two review-effort metrics for
//! ranked label correction (AUPRC over contamination, inspection depth).
//! Every sweep breaks ties deterministically: stable by original index.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math::KahanSum;
use crate::memory::ScoreMap;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("scores and labels must be aligned and nonempty")]
    Misaligned,
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// Aligned (score, label) pairs; `true` marks the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl RankedScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricError> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(MetricError::Misaligned);
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite(i));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Indices sorted by descending score, ties by ascending index.
    fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .expect("finite")
                .then(a.cmp(&b))
        });
        order
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half (the Mann-Whitney statistic over P * N pairs).
pub fn auroc(ranked: &RankedScores) -> Result<f64, MetricError> {
    let p = ranked.positives();
    let n = ranked.len() - p;
    if p == 0 || n == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes"));
    }
    // Average ranks over ascending scores, tie groups share their mean rank.
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked.scores[a].partial_cmp(&ranked.scores[b]).expect("finite"));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && ranked.scores[order[j]] == ranked.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share the average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if ranked.labels[idx] {
                positive_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let u = positive_rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Area under the precision-recall curve by the descending-score sweep:
/// the mean over positives of precision at each positive's rank.
pub fn average_precision(ranked: &RankedScores) -> Result<f64, MetricError> {
    let p = ranked.positives();
    if p == 0 {
        return Err(MetricError::Undefined("average precision needs a positive"));
    }
    let order = ranked.descending_order();
    let mut tp = 0usize;
    let mut acc = KahanSum::new();
    for (rank0, &idx) in order.iter().enumerate() {
        if ranked.labels[idx] {
            tp += 1;
            acc.add(tp as f64 / (rank0 + 1) as f64);
        }
    }
    Ok(acc.total() / p as f64)
}

/// Connected components (4-connectivity) of a ground-truth mask grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    height: usize,
    width: usize,
    /// Flat pixel indices per component; components disjoint, nonempty.
    regions: Vec<Vec<usize>>,
}

impl RegionSet {
    pub fn from_mask(mask: &[bool], height: usize, width: usize) -> Result<Self, MetricError> {
        if mask.len() != height * width || height == 0 || width == 0 {
            return Err(MetricError::Misaligned);
        }
        let mut seen = alloc::vec![false; mask.len()];
        let mut regions = Vec::new();
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            let mut region = Vec::new();
            let mut queue = VecDeque::new();
            queue.push_back(start);
            seen[start] = true;
            while let Some(p) = queue.pop_front() {
                region.push(p);
                let (h, w) = (p / width, p % width);
                let mut push = |q: usize| {
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if h > 0 {
                    push(p - width);
                }
                if h + 1 < height {
                    push(p + width);
                }
                if w > 0 {
                    push(p - 1);
                }
                if w + 1 < width {
                    push(p + 1);
                }
            }
            region.sort_unstable();
            regions.push(region);
        }
        Ok(Self {
            height,
            width,
            regions,
        })
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Area under the per-region-overlap curve. Thresholds sweep the pooled
/// score range descending (a pixel is predicted anomalous when its score
/// is at or above the threshold); at each distinct value the curve gains
/// the point (false-positive rate over normal pixels, mean per-region
/// overlap). The area is the trapezoid integral from FPR 0 to `fpr_limit`,
/// with the endpoint interpolated, normalized by `fpr_limit`.
pub fn aupro(
    score_maps: &[ScoreMap],
    masks: &[Vec<bool>],
    fpr_limit: f64,
) -> Result<f64, MetricError> {
    if score_maps.is_empty() || score_maps.len() != masks.len() {
        return Err(MetricError::Misaligned);
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MetricError::Undefined("fpr_limit must lie in (0, 1]"));
    }

    // Assign each anomalous pixel its region; count normal pixels.
    let mut region_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(masks.len());
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut normal_total = 0usize;
    for (map, mask) in score_maps.iter().zip(masks) {
        if mask.len() != map.len() {
            return Err(MetricError::Misaligned);
        }
        let set = RegionSet::from_mask(mask, map.height(), map.width())?;
        let mut ids = alloc::vec![None; mask.len()];
        for region in set.regions() {
            let id = region_sizes.len();
            region_sizes.push(region.len());
            for &p in region {
                ids[p] = Some(id);
            }
        }
        normal_total += mask.iter().filter(|&&m| !m).count();
        region_of.push(ids);
    }
    if region_sizes.is_empty() {
        return Err(MetricError::Undefined("AUPRO needs a ground-truth region"));
    }
    if normal_total == 0 {
        return Err(MetricError::Undefined("AUPRO needs a normal pixel"));
    }
    let region_count = region_sizes.len() as f64;

    // Pool every pixel, sorted by descending score; equal scores enter
    // together.
    let mut pixels: Vec<(f64, usize, usize)> = Vec::new();
    for (i, map) in score_maps.iter().enumerate() {
        for (p, &s) in map.values().iter().enumerate() {
            pixels.push((s, i, p));
        }
    }
    pixels.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));

    let mut normal_hits = 0usize;
    let mut pro_sum = 0.0f64; // sum over regions of hit fraction
    let mut area = 0.0f64;
    let mut prev = (0.0f64, 0.0f64); // (fpr, pro), curve starts at origin
    let mut i = 0;
    while i < pixels.len() {
        let threshold = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == threshold {
            let (_, img, p) = pixels[i];
            match region_of[img][p] {
                Some(r) => pro_sum += 1.0 / region_sizes[r] as f64,
                None => normal_hits += 1,
            }
            i += 1;
        }
        let fpr = normal_hits as f64 / normal_total as f64;
        let pro = pro_sum / region_count;
        if fpr >= fpr_limit {
            let pro_at = if fpr > prev.0 {
                prev.1 + (pro - prev.1) * (fpr_limit - prev.0) / (fpr - prev.0)
            } else {
                pro
            };
            area += (fpr_limit - prev.0) * (prev.1 + pro_at) / 2.0;
            // Rounding can push a curve flat at 1 a few ulps past it.
            return Ok((area / fpr_limit).min(1.0));
        }
        area += (fpr - prev.0) * (prev.1 + pro) / 2.0;
        prev = (fpr, pro);
    }
    // fpr reaches 1 at the lowest threshold, so fpr_limit was crossed.
    unreachable!("final sweep point has FPR 1");
}

/// Average precision of contamination ranked by descending score: the
/// quality of a "review the most suspicious first" ordering.
pub fn alc_auprc(etas: &[f64], contaminated: &[bool]) -> Result<f64, MetricError> {
    average_precision(&RankedScores::new(etas.to_vec(), contaminated.to_vec())?)
}

/// Fraction of the ranking a reviewer must walk, top down, to meet every
/// contaminated sample: (1-based rank of the last one) / N.
pub fn inspection_depth(etas: &[f64], contaminated: &[bool]) -> Result<f64, MetricError> {
    let ranked = RankedScores::new(etas.to_vec(), contaminated.to_vec())?;
    if ranked.positives() == 0 {
        return Err(MetricError::Undefined("inspection depth needs a contaminated sample"));
    }
    let order = ranked.descending_order();
    let last = order
        .iter()
        .rposition(|&idx| ranked.labels[idx])
        .expect("positive present");
    Ok((last + 1) as f64 / ranked.len() as f64)
}
