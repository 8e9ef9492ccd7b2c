//! Fusion of per-member distance matrices.
//!
//! Each temporal window family yields one distance matrix; the ensemble is an
//! elementwise combination of them. The mean rule is the default. The sum
//! rule differs from it only by the constant `1/|E|` and retrieves the same
//! matches, so it is not offered separately.
//!
//! Two variants change what is being fused rather than how:
//! - [`approximate_combine`] describes the query with a single window size
//!   and compares it against every reference family, so only one query
//!   descriptor has to be extracted per place.
//! - [`cross_window_combine`] compares every query family against every
//!   reference family, giving `k^2` members for `k` families.
//!
//! Means are accumulated incrementally (`m += (x - m) / k`), which returns
//! a value exactly when all inputs equal it. Fusing identical members, or a
//! single one, therefore reproduces the member bit-for-bit.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorSequence;
use crate::distance::{argmin, build_distance_matrix, DistanceMatrix, MatrixKind, Metric};
use crate::error::{config, Error, Result};
use crate::evaluation::{ground_truth_per_query, is_true_positive, GroundTruth};

/// Default grid of per-member weights for the weighted rule.
pub const DEFAULT_WEIGHT_GRID: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

/// How member matrices are fused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EnsembleRule {
    Mean,
    Product,
    /// Mean of the two central values for an even member count.
    Median,
    Min,
    Max,
    /// Mean after discarding the `trim` smallest and `trim` largest values
    /// of every entry.
    TrimmedMean {
        trim: usize,
    },
    /// `(1/|E|) * sum(alpha_k * D_k)`; weights are not renormalized.
    Weighted {
        weights: Vec<f64>,
    },
    /// One-hot vote for the modal top-1 reference of every query.
    MajorityVote,
}

impl EnsembleRule {
    pub fn trimmed_mean() -> Self {
        EnsembleRule::TrimmedMean { trim: 1 }
    }

    /// Checks rule parameters against the number of members.
    pub fn validate(&self, members: usize) -> Result<()> {
        match self {
            EnsembleRule::TrimmedMean { trim } if 2 * trim >= members => Err(config(format!(
                "trimmed mean with trim {trim} needs more than {} members, got {members}",
                2 * trim
            ))),
            EnsembleRule::Weighted { weights } if weights.len() != members => Err(config(format!(
                "{} weights given for {members} members",
                weights.len()
            ))),
            EnsembleRule::Weighted { weights }
                if weights.iter().any(|&a| !(a > 0.0 && a.is_finite())) =>
            {
                Err(config("weights must be positive and finite"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleRule::Mean => f.write_str("mean"),
            EnsembleRule::Product => f.write_str("product"),
            EnsembleRule::Median => f.write_str("median"),
            EnsembleRule::Min => f.write_str("min"),
            EnsembleRule::Max => f.write_str("max"),
            EnsembleRule::TrimmedMean { trim } => write!(f, "trimmed_mean(trim={trim})"),
            EnsembleRule::Weighted { weights } => {
                let w: Vec<String> = weights.iter().map(|a| a.to_string()).collect();
                write!(f, "weighted({})", w.join(","))
            }
            EnsembleRule::MajorityVote => f.write_str("majority_vote"),
        }
    }
}

/// Incremental mean; exact when all values are equal.
fn running_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.into_iter().enumerate() {
        if k == 0 {
            mean = v;
        } else {
            mean += (v - mean) / (k + 1) as f64;
        }
    }
    mean
}

fn check_members(members: &[DistanceMatrix]) -> Result<&DistanceMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::Shape("at least one member matrix is required".into()))?;
    for m in &members[1..] {
        if !m.is_aligned_with(first) {
            return Err(Error::Shape(format!(
                "member `{}` ({}x{}) does not match `{}` ({}x{}) in shape or timestamps",
                m.label(),
                m.rows(),
                m.cols(),
                first.label(),
                first.rows(),
                first.cols()
            )));
        }
    }
    if let Some(m) = members.iter().find(|m| m.kind() != MatrixKind::Distance) {
        return Err(Error::Unsupported(format!(
            "member `{}` is a vote matrix and cannot be fused",
            m.label()
        )));
    }
    Ok(first)
}

/// Fuses aligned member matrices entry by entry.
///
/// Members must share shape and timestamps. A single member is accepted and
/// returned unchanged (up to the label) by every averaging rule.
pub fn combine(members: &[DistanceMatrix], rule: &EnsembleRule) -> Result<DistanceMatrix> {
    if *rule == EnsembleRule::MajorityVote {
        return majority_vote(members);
    }
    let first = check_members(members)?;
    rule.validate(members.len())?;
    let (rows, cols) = (first.rows(), first.cols());
    let n = members.len();

    let fuse = |stack: &mut Vec<f64>| -> f64 {
        match rule {
            EnsembleRule::Mean => running_mean(stack.iter().copied()),
            EnsembleRule::Product => stack.iter().product(),
            EnsembleRule::Min => stack.iter().copied().fold(f64::INFINITY, f64::min),
            EnsembleRule::Max => stack.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            EnsembleRule::Median => {
                stack.sort_by(f64::total_cmp);
                if n % 2 == 1 {
                    stack[n / 2]
                } else {
                    (stack[n / 2 - 1] + stack[n / 2]) / 2.0
                }
            }
            EnsembleRule::TrimmedMean { trim } => {
                stack.sort_by(f64::total_cmp);
                running_mean(stack[*trim..n - *trim].iter().copied())
            }
            EnsembleRule::Weighted { weights } => {
                running_mean(stack.iter().zip(weights).map(|(d, a)| a * d))
            }
            EnsembleRule::MajorityVote => unreachable!(),
        }
    };

    let data: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut stack = Vec::with_capacity(n);
            (0..cols)
                .map(|j| {
                    stack.clear();
                    stack.extend(members.iter().map(|m| m.get(i, j)));
                    fuse(&mut stack)
                })
                .collect::<Vec<_>>()
        })
        .collect();

    DistanceMatrix::new(
        data,
        first.query_t_us().to_vec(),
        first.ref_t_us().to_vec(),
        rule.to_string(),
    )
}

/// One-hot matrix marking, for every query, the modal top-1 reference
/// across members. Ties on the mode go to the smallest column.
pub fn majority_vote(members: &[DistanceMatrix]) -> Result<DistanceMatrix> {
    let first = check_members(members)?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut data = vec![0.0; rows * cols];
    let mut tally = vec![0usize; cols];
    for i in 0..rows {
        tally.iter_mut().for_each(|c| *c = 0);
        for m in members {
            tally[argmin(m.row(i))] += 1;
        }
        let mut winner = 0;
        for j in 1..cols {
            if tally[j] > tally[winner] {
                winner = j;
            }
        }
        data[i * cols + winner] = 1.0;
    }
    DistanceMatrix::with_kind(
        data,
        first.query_t_us().to_vec(),
        first.ref_t_us().to_vec(),
        EnsembleRule::MajorityVote.to_string(),
        MatrixKind::Votes,
    )
}

fn check_reference_members(r_members: &[DescriptorSequence]) -> Result<()> {
    let first = r_members
        .first()
        .ok_or_else(|| Error::Shape("at least one reference member is required".into()))?;
    for r in &r_members[1..] {
        if r.timestamps() != first.timestamps() {
            return Err(Error::Shape(format!(
                "reference member `{}` is not sampled at the same instants as `{}`",
                r.source(),
                first.source()
            )));
        }
    }
    Ok(())
}

/// Mean-fuses the matrices comparing one query sequence (single window
/// size) against each reference member.
pub fn approximate_combine(
    q_single: &DescriptorSequence,
    r_members: &[DescriptorSequence],
    metric: Metric,
) -> Result<DistanceMatrix> {
    check_reference_members(r_members)?;
    let members = r_members
        .par_iter()
        .map(|r| build_distance_matrix(q_single, r, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(&members, &EnsembleRule::Mean)?
        .with_label(format!("approximate({})", q_single.source())))
}

/// The `k^2` matrices comparing every query family with every reference
/// family, ordered by query family then reference family.
pub fn cross_window_members(
    q_members: &[DescriptorSequence],
    r_members: &[DescriptorSequence],
    metric: Metric,
) -> Result<Vec<DistanceMatrix>> {
    if q_members.len() != r_members.len() {
        return Err(Error::Shape(format!(
            "{} query families but {} reference families",
            q_members.len(),
            r_members.len()
        )));
    }
    check_reference_members(r_members)?;
    let pairs: Vec<(usize, usize)> = (0..q_members.len())
        .flat_map(|a| (0..r_members.len()).map(move |b| (a, b)))
        .collect();
    pairs
        .par_iter()
        .map(|&(a, b)| build_distance_matrix(&q_members[a], &r_members[b], metric))
        .collect()
}

/// Mean of all [`cross_window_members`].
pub fn cross_window_combine(
    q_members: &[DescriptorSequence],
    r_members: &[DescriptorSequence],
    metric: Metric,
) -> Result<DistanceMatrix> {
    let members = cross_window_members(q_members, r_members, metric)?;
    let k2 = members.len();
    Ok(combine(&members, &EnsembleRule::Mean)?.with_label(format!("cross_window(members={k2})")))
}

/// Lazily enumerates every weight vector over `grid` in lexicographic order
/// (first member varies slowest).
pub fn enumerate_weight_grid(member_count: usize, grid: &[f64]) -> WeightGrid {
    let total = (grid.len() as u128)
        .checked_pow(member_count as u32)
        .unwrap_or(u128::MAX);
    WeightGrid {
        grid: grid.to_vec(),
        member_count,
        next: 0,
        total,
    }
}

#[derive(Debug, Clone)]
pub struct WeightGrid {
    grid: Vec<f64>,
    member_count: usize,
    next: u128,
    total: u128,
}

impl WeightGrid {
    pub fn total(&self) -> u128 {
        self.total
    }

    /// The `index`-th vector of the enumeration.
    pub fn weights_at(&self, mut index: u128) -> Vec<f64> {
        let base = self.grid.len() as u128;
        let mut w = vec![0.0; self.member_count];
        for slot in w.iter_mut().rev() {
            *slot = self.grid[(index % base) as usize];
            index /= base;
        }
        w
    }
}

impl Iterator for WeightGrid {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.next >= self.total {
            return None;
        }
        let w = self.weights_at(self.next);
        self.next += 1;
        Some(w)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        let n = usize::try_from(left).unwrap_or(usize::MAX);
        (n, usize::try_from(left).ok())
    }
}

/// Precision at full recall of the weighted rule for every weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearch {
    /// One entry per vector, in enumeration order.
    pub precisions: Vec<f64>,
    pub best_index: usize,
    pub best_weights: Vec<f64>,
    pub best_precision: f64,
}

/// Scores every weight vector of the grid by precision at 100% recall.
///
/// Vectors are scored in parallel; the best is the highest precision, ties
/// going to the earliest vector in enumeration order.
pub fn weight_search(
    members: &[DistanceMatrix],
    gt: &GroundTruth,
    loc_threshold_us: u64,
    grid: &[f64],
) -> Result<WeightSearch> {
    let first = check_members(members)?;
    if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(config(
            "weight grid must be non-empty with positive finite values",
        ));
    }
    let space = enumerate_weight_grid(members.len(), grid);
    let total = usize::try_from(space.total())
        .ok()
        .filter(|&t| t <= 100_000_000)
        .ok_or_else(|| config("weight grid is too large to search exhaustively"))?;

    let gt_ref = ground_truth_per_query(first, gt)?;
    let (rows, cols) = (first.rows(), first.cols());
    let correct: Vec<Vec<bool>> = gt_ref
        .iter()
        .map(|&g| {
            first
                .ref_t_us()
                .iter()
                .map(|&r| is_true_positive(r, g, loc_threshold_us))
                .collect()
        })
        .collect();

    let precisions: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let weights = space.weights_at(idx as u128);
            let mut fused = vec![0.0; cols];
            let mut tp = 0usize;
            for (i, row_ok) in correct.iter().enumerate() {
                for (j, slot) in fused.iter_mut().enumerate() {
                    *slot =
                        running_mean(members.iter().zip(&weights).map(|(m, a)| a * m.get(i, j)));
                }
                if row_ok[argmin(&fused)] {
                    tp += 1;
                }
            }
            if rows == 0 {
                1.0
            } else {
                tp as f64 / rows as f64
            }
        })
        .collect();

    let mut best_index = 0;
    for (i, &p) in precisions.iter().enumerate() {
        if p > precisions[best_index] {
            best_index = i;
        }
    }
    Ok(WeightSearch {
        best_weights: space.weights_at(best_index as u128),
        best_precision: precisions[best_index],
        best_index,
        precisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> DistanceMatrix {
        DistanceMatrix::new(
            data,
            (0..rows as u64).collect(),
            (0..cols as u64).collect(),
            "m",
        )
        .unwrap()
    }

    #[test]
    fn mean_of_two() {
        let a = matrix(1, 2, vec![0.0, 2.0]);
        let b = matrix(1, 2, vec![2.0, 0.0]);
        assert_eq!(
            combine(&[a, b], &EnsembleRule::Mean).unwrap().data(),
            &[1.0, 1.0]
        );
    }

    #[test]
    fn mean_of_identical_members_is_exact() {
        let a = matrix(2, 2, vec![0.1, 0.7, 1.3, 1.0 / 3.0]);
        let members = vec![a.clone(); 7];
        assert_eq!(
            combine(&members, &EnsembleRule::Mean).unwrap().data(),
            a.data()
        );
    }

    #[test]
    fn trimmed_mean_drops_extremes() {
        let members: Vec<_> = [1.0, 5.0, 100.0]
            .iter()
            .map(|&v| matrix(1, 1, vec![v]))
            .collect();
        let fused = combine(&members, &EnsembleRule::trimmed_mean()).unwrap();
        assert_eq!(fused.data(), &[5.0]);
        assert!(combine(&members[..2], &EnsembleRule::trimmed_mean()).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        let members: Vec<_> = [4.0, 1.0, 3.0, 2.0]
            .iter()
            .map(|&v| matrix(1, 1, vec![v]))
            .collect();
        assert_eq!(
            combine(&members, &EnsembleRule::Median).unwrap().data(),
            &[2.5]
        );
        assert_eq!(
            combine(&members[..3], &EnsembleRule::Median)
                .unwrap()
                .data(),
            &[3.0]
        );
    }

    #[test]
    fn product_min_max() {
        let a = matrix(1, 2, vec![0.5, 0.0]);
        let b = matrix(1, 2, vec![0.4, 1.5]);
        let m = [a, b];
        assert_eq!(
            combine(&m, &EnsembleRule::Product).unwrap().data(),
            &[0.2, 0.0]
        );
        assert_eq!(combine(&m, &EnsembleRule::Min).unwrap().data(), &[0.4, 0.0]);
        assert_eq!(combine(&m, &EnsembleRule::Max).unwrap().data(), &[0.5, 1.5]);
    }

    #[test]
    fn weighted_validation() {
        let m = vec![matrix(1, 1, vec![1.0]); 2];
        let rule = EnsembleRule::Weighted { weights: vec![1.0] };
        assert!(combine(&m, &rule).is_err());
        let rule = EnsembleRule::Weighted {
            weights: vec![1.0, 0.0],
        };
        assert!(combine(&m, &rule).is_err());
        let rule = EnsembleRule::Weighted {
            weights: vec![0.5, 1.5],
        };
        assert_eq!(combine(&m, &rule).unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = matrix(1, 2, vec![0.0, 1.0]);
        let b = matrix(2, 1, vec![0.0, 1.0]);
        assert!(matches!(
            combine(&[a, b], &EnsembleRule::Mean),
            Err(Error::Shape(_))
        ));
        assert!(combine(&[], &EnsembleRule::Mean).is_err());
    }

    #[test]
    fn vote_examples() {
        // three members voting columns 1, 1, 2
        let m = vec![
            matrix(1, 3, vec![0.5, 0.1, 0.9]),
            matrix(1, 3, vec![0.5, 0.2, 0.9]),
            matrix(1, 3, vec![0.5, 0.3, 0.1]),
        ];
        let v = majority_vote(&m).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 0.0]);
        assert_eq!(v.kind(), MatrixKind::Votes);

        // 2 members voting 0 and 1: tie goes to column 0
        let m = vec![matrix(1, 2, vec![0.1, 0.9]), matrix(1, 2, vec![0.9, 0.1])];
        assert_eq!(majority_vote(&m).unwrap().data(), &[1.0, 0.0]);

        // votes cannot be fused again
        let v = majority_vote(&m).unwrap();
        assert!(combine(&[v.clone(), v], &EnsembleRule::Mean).is_err());
    }

    #[test]
    fn weight_grid_enumeration() {
        assert_eq!(enumerate_weight_grid(1, &DEFAULT_WEIGHT_GRID).count(), 5);
        let all: Vec<_> = enumerate_weight_grid(2, &DEFAULT_WEIGHT_GRID).collect();
        assert_eq!(all.len(), 25);
        assert_eq!(all[0], vec![0.5, 0.5]);
        assert_eq!(all[1], vec![0.5, 0.75]);
        assert_eq!(all[24], vec![1.5, 1.5]);
        let one: Vec<_> = enumerate_weight_grid(3, &[1.0]).collect();
        assert_eq!(one, vec![vec![1.0, 1.0, 1.0]]);
        assert_eq!(
            enumerate_weight_grid(9, &DEFAULT_WEIGHT_GRID).total(),
            1_953_125
        );
        assert_eq!(
            enumerate_weight_grid(9, &DEFAULT_WEIGHT_GRID).size_hint().0,
            1_953_125
        );
    }

    #[test]
    fn rule_labels() {
        assert_eq!(EnsembleRule::Mean.to_string(), "mean");
        assert_eq!(
            EnsembleRule::trimmed_mean().to_string(),
            "trimmed_mean(trim=1)"
        );
        assert_eq!(
            EnsembleRule::Weighted {
                weights: vec![0.5, 1.0]
            }
            .to_string(),
            "weighted(0.5,1)"
        );
    }
}
