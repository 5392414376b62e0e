//! Rank-sensitivity statistics: Kendall's tau-a between paraphrase rank and
//! accuracy change, percentile bootstrap intervals, and Jaccard-stratified
//! accuracy curves.

use std::collections::BTreeMap;
use std::fmt;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(test)]
use crate::evaluate::Outcome;
use crate::evaluate::{ItemOutcome, PairedEvalRecord};
use crate::semantic::Bin;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("bootstrap needs at least one resample")]
    NoResamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub tau: f64,
    pub n: usize,
    pub n_c: u64,
    pub n_d: u64,
}

/// Counts strictly inverted pairs in `v` by merge sort. Equal values are not
/// inversions.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Number of pairs tied within groups of equal keys in a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for x in sorted {
        if prev.as_ref() == Some(&x) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
        }
        prev = Some(x);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Kendall's tau-a over `(rank, delta)` points: `(n_c - n_d) / (n(n-1)/2)`.
/// Pairs tied in either coordinate count as neither concordant nor
/// discordant. Runs in O(n log n).
pub fn kendall_tau(points: &[(usize, f64)]) -> Result<TauEstimate, StatsError> {
    let n = points.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints(n));
    }
    // `+ 0.0` folds -0.0 into 0.0 so bit-level tie detection agrees with `==`.
    let mut sorted: Vec<(usize, f64)> = points.iter().map(|&(r, d)| (r, d + 0.0)).collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let total = (n as u64) * (n as u64 - 1) / 2;
    let ties_rank = tied_pairs(sorted.iter().map(|p| p.0));
    let ties_both = tied_pairs(sorted.iter().map(|p| (p.0, p.1.to_bits())));
    let mut deltas: Vec<f64> = sorted.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(n);
    // Within equal ranks the deltas are ascending, so every strict inversion
    // is a pair with distinct ranks and distinct deltas: a discordant pair.
    let n_d = count_inversions(&mut deltas, &mut buf);
    let ties_delta = tied_pairs(deltas.iter().map(|d| d.to_bits()));
    let n_c = total + ties_both - ties_rank - ties_delta - n_d;
    let tau = (n_c as f64 - n_d as f64) / total as f64;
    Ok(TauEstimate { tau, n, n_c, n_d })
}

/// Linear interpolation between closest order statistics of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// tau*(b) in resample order.
    pub resamples: Vec<f64>,
    /// Resamples with fewer than two distinct points (scored 0).
    pub degenerate: usize,
}

/// Tau-a of a bootstrap resample given as draw counts per original point.
///
/// Only pairs of draws from two different original points are compared; two
/// copies of the same observation are not a pair. With every count at most
/// one this is exactly [`kendall_tau`]. Returns `None` when fewer than two
/// distinct points were drawn.
pub fn resample_tau(points: &[(usize, f64)], counts: &[u64]) -> Option<f64> {
    let drawn: Vec<usize> = (0..points.len()).filter(|&i| counts[i] > 0).collect();
    if drawn.len() < 2 {
        return None;
    }
    let (mut pairs, mut score) = (0u64, 0i64);
    for (a, &i) in drawn.iter().enumerate() {
        for &j in &drawn[a + 1..] {
            let w = counts[i] * counts[j];
            pairs += w;
            let dr = points[i].0.cmp(&points[j].0) as i64;
            let dd = match points[i].1.partial_cmp(&points[j].1) {
                Some(o) => o as i64,
                None => 0,
            };
            score += dr * dd * w as i64;
        }
    }
    Some(score as f64 / pairs as f64)
}

/// Percentile bootstrap (2.5th/97.5th) for Kendall's tau.
///
/// Each resample draws `n` points with replacement and scores them with
/// [`resample_tau`]; resamples that hit a single point score 0. Resample `b`
/// draws from ChaCha20 stream `b` under `seed`, so resamples are independent
/// of evaluation order.
pub fn bootstrap_ci(
    points: &[(usize, f64)],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapCi, StatsError> {
    let n = points.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints(n));
    }
    if resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    let mut taus = Vec::with_capacity(resamples);
    let mut degenerate = 0;
    let mut counts = vec![0u64; n];
    for b in 0..resamples {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        match resample_tau(points, &counts) {
            Some(t) => taus.push(t),
            None => {
                degenerate += 1;
                taus.push(0.0);
            }
        }
    }
    if degenerate > 0 {
        log::info!("{degenerate} of {resamples} bootstrap resamples were degenerate (tau* = 0)");
    }
    let mut sorted = taus.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        lo: percentile(&sorted, 0.025),
        hi: percentile(&sorted, 0.975),
        resamples: taus,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankFilter {
    All,
    Ge3,
}

impl RankFilter {
    pub fn keeps(self, rank: usize) -> bool {
        match self {
            RankFilter::All => true,
            RankFilter::Ge3 => rank >= 3,
        }
    }
}

impl fmt::Display for RankFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankFilter::All => "all",
            RankFilter::Ge3 => "ge3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub model_id: String,
    pub dataset: String,
    pub rank_filter: RankFilter,
    pub estimate: TauEstimate,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub resamples: Vec<f64>,
    pub b: usize,
    pub seed: u64,
}

impl TauReport {
    /// The point estimate lies outside its own percentile band. Possible with
    /// small n; reported, not an error.
    pub fn estimate_outside_ci(&self) -> bool {
        self.estimate.tau < self.ci_lo || self.estimate.tau > self.ci_hi
    }

    pub fn ci_excludes_zero(&self) -> bool {
        self.ci_hi < 0.0 || self.ci_lo > 0.0
    }
}

/// Tau and bootstrap interval over the `(rank, delta)` points of one
/// model/dataset. Records must share the model and dataset of the first.
pub fn tau_report(
    records: &[PairedEvalRecord],
    rank_filter: RankFilter,
    resamples: usize,
    seed: u64,
) -> Result<TauReport, StatsError> {
    let kept: Vec<&PairedEvalRecord> = records
        .iter()
        .filter(|r| rank_filter.keeps(r.rank))
        .collect();
    let points: Vec<(usize, f64)> = kept.iter().map(|r| (r.rank, r.delta)).collect();
    let estimate = kendall_tau(&points)?;
    let ci = bootstrap_ci(&points, resamples, seed)?;
    Ok(TauReport {
        model_id: kept[0].model_id.clone(),
        dataset: kept[0].dataset.clone(),
        rank_filter,
        estimate,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        resamples: ci.resamples,
        b: resamples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rank: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Paraphrase accuracy by rank, restricted to one Jaccard bin (or to none for
/// the unfiltered curve).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCurve {
    pub bin: Option<Bin>,
    pub points: Vec<CurvePoint>,
    /// Tau between rank and accuracy; `None` with fewer than two ranks.
    pub tau: Option<TauEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedCurves {
    pub unfiltered: StratumCurve,
    pub bins: Vec<StratumCurve>,
    pub omitted_bins: Vec<Bin>,
}

fn curve(items: &[&ItemOutcome], bin: Option<Bin>) -> StratumCurve {
    let mut by_rank: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for item in items {
        let e = by_rank.entry(item.rank).or_default();
        e.0 += 1;
        e.1 += usize::from(item.correct);
    }
    let points: Vec<CurvePoint> = by_rank
        .into_iter()
        .map(|(rank, (n, correct))| CurvePoint {
            rank,
            n,
            accuracy: correct as f64 / n as f64,
        })
        .collect();
    let pairs: Vec<(usize, f64)> = points.iter().map(|p| (p.rank, p.accuracy)).collect();
    StratumCurve {
        bin,
        tau: kendall_tau(&pairs).ok(),
        points,
    }
}

/// Accuracy-by-rank curves for paraphrase items, overall and per Jaccard bin.
/// Items without a Jaccard value, and original-question items, are ignored.
pub fn stratified_curves(items: &[ItemOutcome], bins: &[Bin]) -> StratifiedCurves {
    let para: Vec<&ItemOutcome> = items
        .iter()
        .filter(|i| i.rank > 0 && i.jaccard.is_some())
        .collect();
    let mut out = StratifiedCurves {
        unfiltered: curve(&para, None),
        bins: Vec::new(),
        omitted_bins: Vec::new(),
    };
    for &bin in bins {
        let inside: Vec<&ItemOutcome> = para
            .iter()
            .copied()
            .filter(|i| i.jaccard.is_some_and(|j| bin.contains(j)))
            .collect();
        if inside.is_empty() {
            log::info!("Jaccard bin [{}, {}) is empty; omitted", bin.lo, bin.hi);
            out.omitted_bins.push(bin);
        } else {
            out.bins.push(curve(&inside, Some(bin)));
        }
    }
    out
}
