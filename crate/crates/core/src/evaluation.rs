//! Ground truth and retrieval metrics.
//!
//! A query's top-1 match is correct when the matched reference timestamp
//! lies within the localization threshold of the ground-truth reference
//! time (closed interval). "Precision at 100% recall" retrieves the top-1
//! match of every query, so it is the fraction of queries matched
//! correctly. Precision-recall curves instead retrieve a query only when
//! its best distance is below a similarity threshold.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::distance::{best_match_per_query, DistanceMatrix, MatrixKind};
use crate::error::{config, Error, Result};
use crate::timefmt;

/// Default localization threshold: 5 s.
pub const DEFAULT_LOC_THRESHOLD_US: u64 = 5_000_000;

/// Default number of similarity thresholds in a precision-recall sweep.
pub const DEFAULT_SWEEP_POINTS: usize = 100;

/// Localization thresholds 0, 1, ..., 10 s.
pub fn default_loc_sweep_us() -> Vec<u64> {
    (0..=10).map(|s| s * 1_000_000).collect()
}

/// One query-time to reference-time correspondence. Reference times may be
/// fractional after interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GtPair {
    pub query_t_us: u64,
    pub ref_t_us: f64,
}

/// Correspondences ordered by strictly increasing query time.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pairs: Vec<GtPair>,
}

impl GroundTruth {
    pub fn new(pairs: Vec<GtPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if !(p.ref_t_us.is_finite() && p.ref_t_us >= 0.0) {
                return Err(config(format!(
                    "ground-truth reference time must be finite and non-negative, got {}",
                    p.ref_t_us
                )));
            }
            if i > 0 && p.query_t_us <= pairs[i - 1].query_t_us {
                return Err(Error::Unordered {
                    line: i + 1,
                    t: p.query_t_us,
                    previous: pairs[i - 1].query_t_us,
                });
            }
        }
        Ok(Self { pairs })
    }

    pub fn from_us(pairs: &[(u64, u64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(q, r)| GtPair {
                    query_t_us: q,
                    ref_t_us: r as f64,
                })
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[GtPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reference time recorded for exactly `query_t_us`.
    pub fn lookup(&self, query_t_us: u64) -> Option<f64> {
        self.pairs
            .binary_search_by_key(&query_t_us, |p| p.query_t_us)
            .ok()
            .map(|i| self.pairs[i].ref_t_us)
    }
}

/// Result of [`interpolate_ground_truth`].
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub ground_truth: GroundTruth,
    /// Grid points outside the anchors' query-time coverage.
    pub dropped: usize,
}

/// Piecewise-linear interpolation of reference times at the grid instants.
/// Instants outside `[first, last]` anchor query time are dropped and counted.
pub fn interpolate_ground_truth(anchors: &GroundTruth, grid: &[u64]) -> Result<Interpolated> {
    let a = anchors.pairs();
    if a.len() < 2 {
        return Err(config(
            "ground-truth interpolation needs at least 2 anchors",
        ));
    }
    let (lo, hi) = (a[0].query_t_us, a[a.len() - 1].query_t_us);
    let mut pairs = Vec::with_capacity(grid.len());
    let mut dropped = 0;
    for &t in grid {
        if t < lo || t > hi {
            dropped += 1;
            continue;
        }
        // first anchor with query time >= t
        let k = a.partition_point(|p| p.query_t_us < t);
        let ref_t = if a[k].query_t_us == t {
            a[k].ref_t_us
        } else {
            let (p0, p1) = (a[k - 1], a[k]);
            let frac = (t - p0.query_t_us) as f64 / (p1.query_t_us - p0.query_t_us) as f64;
            p0.ref_t_us + frac * (p1.ref_t_us - p0.ref_t_us)
        };
        pairs.push(GtPair {
            query_t_us: t,
            ref_t_us: ref_t,
        });
    }
    Ok(Interpolated {
        ground_truth: GroundTruth::new(pairs)?,
        dropped,
    })
}

/// `|matched - gt| <= threshold`.
pub fn is_true_positive(matched_ref_t_us: u64, gt_ref_t_us: f64, loc_threshold_us: u64) -> bool {
    (matched_ref_t_us as f64 - gt_ref_t_us).abs() <= loc_threshold_us as f64
}

/// Ground-truth reference time for every query row of `d`.
pub fn ground_truth_per_query(d: &DistanceMatrix, gt: &GroundTruth) -> Result<Vec<f64>> {
    d.query_t_us()
        .iter()
        .map(|&t| gt.lookup(t).ok_or(Error::MissingGroundTruth { t_us: t }))
        .collect()
}

/// Counts and rates of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub retrieved: usize,
    pub total_queries: usize,
    pub loc_threshold_us: u64,
    /// `None` when every query retrieves its top-1 match.
    pub sim_threshold: Option<f64>,
}

impl EvalResult {
    fn from_counts(tp: usize, retrieved: usize, total: usize, loc: u64, sim: Option<f64>) -> Self {
        Self {
            precision: if retrieved == 0 {
                1.0
            } else {
                tp as f64 / retrieved as f64
            },
            recall: if total == 0 {
                1.0
            } else {
                tp as f64 / total as f64
            },
            tp,
            fp: retrieved - tp,
            retrieved,
            total_queries: total,
            loc_threshold_us: loc,
            sim_threshold: sim,
        }
    }
}

struct Matches {
    /// Best-match score per query (distance, or `1 - vote` for vote matrices).
    score: Vec<f64>,
    correct: Vec<bool>,
}

fn top1(d: &DistanceMatrix, gt: &GroundTruth, loc: u64) -> Result<Matches> {
    let gt_ref = ground_truth_per_query(d, gt)?;
    let best = best_match_per_query(d);
    let score = best
        .iter()
        .map(|&(_, v)| match d.kind() {
            MatrixKind::Distance => v,
            MatrixKind::Votes => 1.0 - v,
        })
        .collect();
    let correct = best
        .iter()
        .zip(&gt_ref)
        .map(|(&(j, _), &g)| is_true_positive(d.ref_t_us()[j], g, loc))
        .collect();
    Ok(Matches { score, correct })
}

/// Every query retrieves its top-1 match; precision is the fraction of
/// correct matches and recall is 1.
pub fn precision_at_full_recall(
    d: &DistanceMatrix,
    gt: &GroundTruth,
    loc_threshold_us: u64,
) -> Result<EvalResult> {
    let m = top1(d, gt, loc_threshold_us)?;
    let tp = m.correct.iter().filter(|&&c| c).count();
    let n = m.correct.len();
    let mut r = EvalResult::from_counts(tp, n, n, loc_threshold_us, None);
    // All queries are retrieved, so recall is 1 regardless of correctness.
    r.recall = 1.0;
    Ok(r)
}

/// `points` thresholds evenly spaced over the range of row minima. The last
/// threshold is nudged just above the maximum so the sweep ends with every
/// query retrieved.
pub fn default_sweep(d: &DistanceMatrix, points: usize) -> Vec<f64> {
    let minima: Vec<f64> = best_match_per_query(d).iter().map(|m| m.1).collect();
    if minima.is_empty() || points == 0 {
        return Vec::new();
    }
    let lo = minima.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = minima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sweep: Vec<f64> = if points == 1 {
        vec![hi]
    } else {
        (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect()
    };
    *sweep.last_mut().unwrap() = hi.next_up();
    sweep
}

/// Precision and recall when a query is retrieved only if its best
/// distance is strictly below the threshold.
pub fn precision_recall_curve(
    d: &DistanceMatrix,
    gt: &GroundTruth,
    loc_threshold_us: u64,
    sweep: &[f64],
) -> Result<Vec<EvalResult>> {
    if d.kind() == MatrixKind::Votes {
        return Err(Error::Unsupported(
            "vote matrices carry no similarity and cannot be swept".into(),
        ));
    }
    if sweep.is_empty() {
        return Err(config("similarity sweep is empty"));
    }
    if sweep.iter().any(|s| s.is_nan()) || sweep.windows(2).any(|p| p[1] < p[0]) {
        return Err(config("similarity sweep must be ascending"));
    }
    let m = top1(d, gt, loc_threshold_us)?;
    let n = m.score.len();
    Ok(sweep
        .iter()
        .map(|&s| {
            let (mut tp, mut retrieved) = (0, 0);
            for (&score, &ok) in m.score.iter().zip(&m.correct) {
                if score < s {
                    retrieved += 1;
                    tp += ok as usize;
                }
            }
            EvalResult::from_counts(tp, retrieved, n, loc_threshold_us, Some(s))
        })
        .collect())
}

/// [`precision_at_full_recall`] at each localization threshold.
pub fn precision_vs_loc_threshold(
    d: &DistanceMatrix,
    gt: &GroundTruth,
    thresholds_us: &[u64],
) -> Result<Vec<EvalResult>> {
    if thresholds_us.windows(2).any(|p| p[1] < p[0]) {
        return Err(config("localization thresholds must be ascending"));
    }
    thresholds_us
        .iter()
        .map(|&loc| precision_at_full_recall(d, gt, loc))
        .collect()
}

/// Reads `t_query_s,t_ref_s` rows (no header).
pub fn read_ground_truth<R: BufRead>(source: R) -> Result<GroundTruth> {
    let mut pairs = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let row = line.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let bad = |f: &str| Error::Parse {
            line: lineno,
            reason: format!("invalid time {f:?}"),
        };
        let query_t_us = timefmt::parse_seconds_as_us(fields[0])
            .and_then(timefmt::round_us)
            .ok_or_else(|| bad(fields[0]))?;
        let ref_t_us = timefmt::parse_seconds_as_us(fields[1]).ok_or_else(|| bad(fields[1]))?;
        if let Some(prev) = pairs.last().map(|p: &GtPair| p.query_t_us) {
            if query_t_us <= prev {
                return Err(Error::Unordered {
                    line: lineno,
                    t: query_t_us,
                    previous: prev,
                });
            }
        }
        pairs.push(GtPair {
            query_t_us,
            ref_t_us,
        });
    }
    GroundTruth::new(pairs)
}

pub fn write_ground_truth<W: Write>(gt: &GroundTruth, mut sink: W) -> std::io::Result<()> {
    for p in gt.pairs() {
        writeln!(
            sink,
            "{},{}",
            timefmt::format_int_us_as_seconds(p.query_t_us),
            timefmt::format_us_as_seconds(p.ref_t_us)
        )?;
    }
    sink.flush()
}

/// Which parameter fills the `threshold` column of an evaluation CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdColumn {
    /// Similarity threshold of a precision-recall sweep.
    Similarity,
    /// Localization threshold, in seconds.
    Localization,
}

/// Writes `threshold,precision,recall,tp,fp,retrieved,total` rows.
pub fn write_eval_csv<W: Write>(
    results: &[EvalResult],
    column: ThresholdColumn,
    mut sink: W,
) -> std::io::Result<()> {
    writeln!(sink, "threshold,precision,recall,tp,fp,retrieved,total")?;
    for r in results {
        let threshold = match column {
            ThresholdColumn::Similarity => {
                r.sim_threshold.map(|s| s.to_string()).unwrap_or_default()
            }
            ThresholdColumn::Localization => timefmt::format_int_us_as_seconds(r.loc_threshold_us),
        };
        writeln!(
            sink,
            "{threshold},{},{},{},{},{},{}",
            r.precision, r.recall, r.tp, r.fp, r.retrieved, r.total_queries
        )?;
    }
    sink.flush()
}
