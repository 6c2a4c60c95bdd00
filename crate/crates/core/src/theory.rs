//! Exact analysis of nearest-neighbor score gaps under bank subsampling.
//!
//! The model: a bank is built by drawing `m` vectors uniformly with
//! replacement from a finite pool of `N` candidates, and a query scores the
//! Euclidean distance to its nearest drawn vector. Everything here is in
//! terms of the spatial proportion
//!
//! ```text
//! pi(q, r) = |{z in pool : ||z - q|| <= r}| / N
//! ```
//!
//! a right-continuous step function of `r`. The expected score is
//! `E[D(q)] = integral of (1 - pi(q, r))^m dr`, so the gap between an
//! anomalous and a normal query,
//!
//! ```text
//! gap(m) = E[D(q_anom)] - E[D(q_norm)]
//! ```
//!
//! expands around `pi_norm` as `gap(m) = gap1(m) + remainder`, where
//!
//! ```text
//! gap1(m)  = integral of delta(r) * w(m, r) dr
//! w(m, r)  = m * (1 - pi_norm(r))^(m-1)
//! delta(r) = pi_norm(r) - pi_anom(r)
//! ```
//!
//! When `delta >= 0` everywhere (the anomalous query is never the better
//! covered one), convexity of `x^m` gives `0 <= gap - gap1 <= bound(m)`
//! with `bound` integrating `(m(m-1)/2) delta^2 (1 - pi_anom)^(m-2)`. For
//! fixed `r` the weight `w(m, r)` is unimodal in `m` and peaks at
//! `m* = -1 / ln(1 - pi_norm(r))`: larger banks downweight exactly the
//! radii that separate the two queries.
//!
//! All step functions are integrated exactly over their breakpoint grid;
//! nothing here is approximate except the explicit Monte Carlo check.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dataset::{DataError, PatchPool};
use crate::math::{dist, ln, powi, sqrt, KahanSum};

/// The finite candidate population banks draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePool {
    channels: usize,
    vectors: Vec<f64>,
}

impl FinitePool {
    pub fn new(channels: usize, vectors: Vec<f64>) -> Result<Self, DataError> {
        if channels == 0 {
            return Err(DataError::ZeroDim);
        }
        if vectors.len() < 2 * channels || vectors.len() % channels != 0 {
            return Err(DataError::BadLength {
                expected: (2 * channels).max(vectors.len().next_multiple_of(channels)),
                got: vectors.len(),
            });
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self { channels, vectors })
    }

    pub fn from_patch_pool(pool: &PatchPool) -> Self {
        let mut vectors = Vec::with_capacity(pool.len() * pool.channels());
        for i in 0..pool.len() {
            vectors.extend_from_slice(pool.vector(i));
        }
        Self {
            channels: pool.channels(),
            vectors,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.channels..(i + 1) * self.channels]
    }

    /// Distances from every pool vector to `q`, ascending.
    pub fn sorted_distances(&self, q: &[f64]) -> Result<Vec<f64>, DataError> {
        if q.len() != self.channels {
            return Err(DataError::Misaligned("query channel count differs from pool"));
        }
        let mut d: Vec<f64> = self
            .vectors
            .chunks_exact(self.channels)
            .map(|z| dist(z, q))
            .collect();
        d.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
        Ok(d)
    }
}

/// `pi(q, r)`: the fraction of the pool within radius `r` of `q`.
pub fn spatial_proportion(pool: &FinitePool, q: &[f64], r: f64) -> Result<f64, DataError> {
    let d = pool.sorted_distances(q)?;
    let count = d.partition_point(|&v| v <= r);
    Ok(count as f64 / d.len() as f64)
}

/// `E[D(q)]` for a bank of `m` with-replacement draws, via the survival
/// identity over the distinct distance values:
/// `E[D] = sum_k v_k * (P[D >= v_k] - P[D >= v_{k+1}])` with
/// `P[D >= v] = (|{d >= v}| / N)^m`.
pub fn expected_nn_distance_exact(
    pool: &FinitePool,
    q: &[f64],
    m: usize,
) -> Result<f64, DataError> {
    if m == 0 {
        return Err(DataError::InvalidSpec("bank size m must be >= 1"));
    }
    let d = pool.sorted_distances(q)?;
    let n = d.len();
    let mut acc = KahanSum::new();
    let mut k = 0;
    while k < n {
        let v = d[k];
        let mut j = k;
        while j < n && d[j] == v {
            j += 1;
        }
        // d[k..] are the values >= v; d[j..] are the values > v.
        let s_here = powi((n - k) as f64 / n as f64, m as u64);
        let s_next = powi((n - j) as f64 / n as f64, m as u64);
        acc.add(v * (s_here - s_next));
        k = j;
    }
    Ok(acc.total())
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

fn mc_summary(samples: &[f64]) -> McEstimate {
    let n = samples.len();
    let mut sum = KahanSum::new();
    for &s in samples {
        sum.add(s);
    }
    let mean = sum.total() / n as f64;
    let mut var = KahanSum::new();
    for &s in samples {
        var.add((s - mean) * (s - mean));
    }
    let std_error = if n > 1 {
        sqrt(var.total() / (n as f64 - 1.0)) / sqrt(n as f64)
    } else {
        f64::INFINITY
    };
    McEstimate {
        mean,
        std_error,
        trials: n,
    }
}

/// Monte Carlo estimate of `E[D(q)]` under the same with-replacement model
/// as [`expected_nn_distance_exact`].
pub fn expected_nn_distance_mc(
    pool: &FinitePool,
    q: &[f64],
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate, DataError> {
    if m == 0 || trials == 0 {
        return Err(DataError::InvalidSpec("m and trials must be >= 1"));
    }
    let d = pool.sorted_distances(q)?;
    let n = d.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut best = f64::INFINITY;
        for _ in 0..m {
            let v = d[rng.random_range(0..n)];
            if v < best {
                best = v;
            }
        }
        samples.push(best);
    }
    Ok(mc_summary(&samples))
}

/// Monte Carlo estimate of `E[D(q)]` when the `m` draws are made without
/// replacement, the regime actual banks operate in. Distinct draws cover at
/// least as much of the pool, so this lies at or below the
/// with-replacement expectation.
pub fn expected_nn_distance_mc_without_replacement(
    pool: &FinitePool,
    q: &[f64],
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate, DataError> {
    if m == 0 || trials == 0 {
        return Err(DataError::InvalidSpec("m and trials must be >= 1"));
    }
    let d = pool.sorted_distances(q)?;
    let n = d.len();
    if m > n {
        return Err(DataError::InvalidSpec("m exceeds pool size for without-replacement draws"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let best = rand::seq::index::sample(&mut rng, n, m)
            .into_iter()
            .map(|i| d[i])
            .fold(f64::INFINITY, f64::min);
        samples.push(best);
    }
    Ok(mc_summary(&samples))
}

/// The two spatial-proportion step functions of a (pool, normal query,
/// anomalous query) triple on their shared breakpoint grid. Counts are kept
/// as integers so `delta` and the separability predicate are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GapAnalysis {
    n: usize,
    breakpoints: Vec<f64>,
    le_norm: Vec<usize>,
    le_anom: Vec<usize>,
}

impl GapAnalysis {
    pub fn new(pool: &FinitePool, q_norm: &[f64], q_anom: &[f64]) -> Result<Self, DataError> {
        let d_norm = pool.sorted_distances(q_norm)?;
        let d_anom = pool.sorted_distances(q_anom)?;
        let mut breakpoints: Vec<f64> = d_norm.iter().chain(d_anom.iter()).copied().collect();
        breakpoints.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
        breakpoints.dedup();
        let le_norm = breakpoints
            .iter()
            .map(|&r| d_norm.partition_point(|&v| v <= r))
            .collect();
        let le_anom = breakpoints
            .iter()
            .map(|&r| d_anom.partition_point(|&v| v <= r))
            .collect();
        Ok(Self {
            n: d_norm.len(),
            breakpoints,
            le_norm,
            le_anom,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.n
    }

    /// Distinct radii where either step function jumps, ascending.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// `pi_norm` on `[breakpoints[k], breakpoints[k+1])`.
    pub fn pi_norm_at(&self, k: usize) -> f64 {
        self.le_norm[k] as f64 / self.n as f64
    }

    /// `pi_anom` on `[breakpoints[k], breakpoints[k+1])`.
    pub fn pi_anom_at(&self, k: usize) -> f64 {
        self.le_anom[k] as f64 / self.n as f64
    }

    /// `delta` on `[breakpoints[k], breakpoints[k+1])`.
    pub fn delta_at(&self, k: usize) -> f64 {
        (self.le_norm[k] as f64 - self.le_anom[k] as f64) / self.n as f64
    }

    /// Exact integral of `f(pi_norm(r), pi_anom(r))` over the support.
    fn integrate(&self, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        let mut acc = KahanSum::new();
        for k in 0..self.breakpoints.len().saturating_sub(1) {
            let len = self.breakpoints[k + 1] - self.breakpoints[k];
            acc.add(len * f(self.pi_norm_at(k), self.pi_anom_at(k)));
        }
        acc.total()
    }

    /// `gap(m)` integrated over the breakpoint grid.
    pub fn gap(&self, m: usize) -> f64 {
        self.integrate(|pn, pa| powi(1.0 - pa, m as u64) - powi(1.0 - pn, m as u64))
    }

    /// First-order gap `gap1(m)`.
    pub fn gap_first_order(&self, m: usize) -> f64 {
        self.integrate(|pn, pa| m as f64 * powi(1.0 - pn, m as u64 - 1) * (pn - pa))
    }

    /// Upper bound on `gap(m) - gap1(m)`, valid whenever `delta >= 0`
    /// everywhere. Zero for `m = 1`, where the expansion is exact.
    pub fn remainder_bound(&self, m: usize) -> f64 {
        if m < 2 {
            return 0.0;
        }
        let scale = m as f64 * (m as f64 - 1.0) / 2.0;
        self.integrate(|pn, pa| {
            let delta = pn - pa;
            scale * delta * delta * powi(1.0 - pa, m as u64 - 2)
        })
    }

    /// `delta >= 0` everywhere, and `delta > 0` with `pi_norm < 1` on some
    /// interval of positive length.
    pub fn is_strictly_separable(&self) -> bool {
        let all_nonneg = (0..self.breakpoints.len()).all(|k| self.le_norm[k] >= self.le_anom[k]);
        let strict_somewhere = (0..self.breakpoints.len().saturating_sub(1))
            .any(|k| self.le_norm[k] > self.le_anom[k] && self.le_norm[k] < self.n);
        all_nonneg && strict_somewhere
    }

    /// The breakpoint interval whose `pi_norm` is closest to `target`,
    /// among intervals with `0 < pi_norm < 1`. Returns its `pi_norm`.
    pub fn pi_norm_nearest(&self, target: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        for k in 0..self.breakpoints.len() {
            let pi = self.pi_norm_at(k);
            if pi > 0.0 && pi < 1.0 {
                let better = match best {
                    None => true,
                    Some(b) => (pi - target).abs() < (b - target).abs(),
                };
                if better {
                    best = Some(pi);
                }
            }
        }
        best
    }
}

/// `w(m, r)` expressed through `pi = pi_norm(r)`.
pub fn weight(m: usize, pi_norm: f64) -> f64 {
    m as f64 * powi(1.0 - pi_norm, m as u64 - 1)
}

/// Continuous maximizer `m* = -1 / ln(1 - pi)` of the weight at fixed
/// radius. Requires `0 < pi < 1`.
pub fn optimal_bank_size(pi_norm: f64) -> Result<f64, DataError> {
    if !(pi_norm > 0.0 && pi_norm < 1.0) {
        return Err(DataError::InvalidSpec("pi must lie strictly inside (0, 1)"));
    }
    Ok(-1.0 / ln(1.0 - pi_norm))
}

/// Brute-force integer argmax of `w(m, pi)` over `1..=m_max`. Ties keep the
/// smaller `m`.
pub fn integer_weight_argmax(pi_norm: f64, m_max: usize) -> usize {
    let mut best_m = 1;
    let mut best_w = weight(1, pi_norm);
    for m in 2..=m_max {
        let w = weight(m, pi_norm);
        if w > best_w {
            best_w = w;
            best_m = m;
        }
    }
    best_m
}

/// A randomly constructed strictly-separable instance: a Gaussian cloud
/// pool, a normal query inside it, and an anomalous query displaced along
/// a random direction. Displacements start moderate and grow until the
/// strict-separability predicate holds, so instances near the boundary of
/// separability are produced when possible. Deterministic in `seed`.
pub fn sample_separable_instance(
    pool_size: usize,
    channels: usize,
    seed: u64,
) -> Result<(FinitePool, Vec<f64>, Vec<f64>), DataError> {
    if pool_size < 2 || channels == 0 {
        return Err(DataError::InvalidSpec("need pool_size >= 2 and channels >= 1"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut vectors = Vec::with_capacity(pool_size * channels);
    for _ in 0..pool_size * channels {
        vectors.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
    }
    let pool = FinitePool::new(channels, vectors)?;

    let mut query = ChaCha12Rng::seed_from_u64(seed);
    query.set_stream(1);
    // A normal query near a pool point, jittered so distances vary.
    let anchor: usize = query.random_range(0..pool_size);
    let q_norm: Vec<f64> = pool
        .vector(anchor)
        .iter()
        .map(|v| v + 0.05 * query.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let mut direction: Vec<f64> = (0..channels)
        .map(|_| query.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let norm = sqrt(direction.iter().map(|v| v * v).sum());
    if norm > 1e-12 {
        for d in &mut direction {
            *d /= norm;
        }
    } else {
        direction[0] = 1.0;
    }
    // Push the anomalous query outward until strictly separable.
    let mut radius = 1.0;
    loop {
        let q_anom: Vec<f64> = q_norm
            .iter()
            .zip(&direction)
            .map(|(q, d)| q + radius * d)
            .collect();
        let analysis = GapAnalysis::new(&pool, &q_norm, &q_anom)?;
        if analysis.is_strictly_separable() {
            return Ok((pool, q_norm, q_anom));
        }
        radius *= 1.5;
        debug_assert!(radius < 1e6, "separability unreachable");
    }
}

/// One bank size's worth of verified quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremRow {
    pub m: usize,
    /// Gap integrated over the breakpoint grid.
    pub gap: f64,
    /// The same gap as a difference of survival-form expectations.
    pub gap_by_survival: f64,
    pub first_order: f64,
    pub remainder_bound: f64,
}

impl TheoremRow {
    /// The claimed inequalities at absolute tolerance `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        self.gap > 0.0
            && (self.gap - self.gap_by_survival).abs() <= tol
            && self.first_order <= self.gap + tol
            && self.gap - self.first_order <= self.remainder_bound + tol
    }
}

/// Weight-peak verdict at a fixed representative radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakCheck {
    pub pi_norm: f64,
    /// `m*` at that radius.
    pub continuous: f64,
    /// Integer argmax over `1..=m_max`.
    pub integer: usize,
    pub m_max: usize,
}

impl PeakCheck {
    pub fn holds(&self) -> bool {
        let lo = libm::floor(self.continuous).max(1.0);
        let hi = libm::ceil(self.continuous);
        let lo = (lo as usize).min(self.m_max);
        let hi = (hi as usize).clamp(1, self.m_max);
        self.integer == lo || self.integer == hi
    }
}

/// Full verification report for one (pool, q_norm, q_anom) instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub pool_size: usize,
    pub separable: bool,
    pub rows: Vec<TheoremRow>,
    pub peak: Option<PeakCheck>,
}

impl TheoremReport {
    /// True when the instance is separable and every row and the peak
    /// check hold at tolerance `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        self.separable
            && self.rows.iter().all(|r| r.holds(tol))
            && self.peak.map(|p| p.holds()).unwrap_or(false)
    }
}

/// Evaluates every claim for the given bank sizes. The peak check uses the
/// breakpoint interval with `pi_norm` nearest 0.3; `None` if no interval
/// has `pi_norm` strictly inside `(0, 1)`.
pub fn verify_theorem(
    pool: &FinitePool,
    q_norm: &[f64],
    q_anom: &[f64],
    bank_sizes: &[usize],
) -> Result<TheoremReport, DataError> {
    let analysis = GapAnalysis::new(pool, q_norm, q_anom)?;
    let m_max = bank_sizes.iter().copied().max().unwrap_or(1);
    let mut rows = Vec::with_capacity(bank_sizes.len());
    for &m in bank_sizes {
        if m == 0 {
            return Err(DataError::InvalidSpec("bank size m must be >= 1"));
        }
        let e_anom = expected_nn_distance_exact(pool, q_anom, m)?;
        let e_norm = expected_nn_distance_exact(pool, q_norm, m)?;
        rows.push(TheoremRow {
            m,
            gap: analysis.gap(m),
            gap_by_survival: e_anom - e_norm,
            first_order: analysis.gap_first_order(m),
            remainder_bound: analysis.remainder_bound(m),
        });
    }
    let peak = analysis.pi_norm_nearest(0.3).map(|pi| PeakCheck {
        pi_norm: pi,
        continuous: -1.0 / ln(1.0 - pi),
        integer: integer_weight_argmax(pi, m_max),
        m_max,
    });
    Ok(TheoremReport {
        pool_size: analysis.pool_size(),
        separable: analysis.is_strictly_separable(),
        rows,
        peak,
    })
}
