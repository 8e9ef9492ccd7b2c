//! End-to-end matching: windows, descriptors, member matrices, fusion and
//! evaluation. The CLI and the synthetic experiment both go through here.

use std::collections::BTreeSet;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::descriptors::{
    describe_family, describe_window_set, DescriptorParams, DescriptorSequence,
};
use crate::distance::{build_distance_matrix, DistanceMatrix, MatrixKind, Metric};
use crate::ensemble::{approximate_combine, combine, majority_vote, EnsembleRule};
use crate::error::{config, Error, Result};
use crate::evaluation::{
    default_loc_sweep_us, default_sweep, interpolate_ground_truth, precision_at_full_recall,
    precision_recall_curve, precision_vs_loc_threshold, EvalResult, GroundTruth,
    DEFAULT_LOC_THRESHOLD_US, DEFAULT_SWEEP_POINTS,
};
use crate::events::{filter_bursts, remove_hot_pixels, EventStream, HotPixelReport};
use crate::windowing::{
    build_window_set, sample_grid, split_fixed_count, CountSpec, WindowSpec,
    DEFAULT_NORMALIZED_COUNTS, DEFAULT_SAMPLE_INTERVAL_US, DEFAULT_SPANS_US,
};

/// Normalized count of the single query window used by the approximate
/// ensemble.
pub const DEFAULT_APPROXIMATE_COUNT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    pub hot_pixels: bool,
    pub sigma_k: f64,
    pub bursts: bool,
    pub burst_delta_us: u64,
    pub burst_frac: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            hot_pixels: true,
            sigma_k: 5.0,
            bursts: true,
            burst_delta_us: 500,
            burst_frac: 0.25,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_k > 0.0) {
            return Err(config("filter.sigma_k must be positive"));
        }
        if self.burst_delta_us == 0 {
            return Err(config("filter.burst_delta_us must be positive"));
        }
        if !(self.burst_frac > 0.0 && self.burst_frac <= 1.0) {
            return Err(config("filter.burst_frac must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Output of [`apply_filters`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub input_events: usize,
    pub hot_pixels: Vec<(u16, u16)>,
    pub hot_pixel_events_removed: usize,
    pub burst_events_removed: usize,
    pub output_events: usize,
}

/// Hot-pixel removal then burst removal, each when enabled.
pub fn apply_filters(
    stream: &EventStream,
    params: &FilterParams,
) -> Result<(EventStream, FilterReport)> {
    params.validate()?;
    let input_events = stream.len();
    let (after_hot, hot) = if params.hot_pixels {
        remove_hot_pixels(stream, params.sigma_k)?
    } else {
        (stream.clone(), HotPixelReport::default())
    };
    let after_burst = if params.bursts {
        filter_bursts(&after_hot, params.burst_delta_us, params.burst_frac)?
    } else {
        after_hot.clone()
    };
    let report = FilterReport {
        input_events,
        hot_pixels: hot.pixels,
        hot_pixel_events_removed: hot.removed_events,
        burst_events_removed: after_hot.len() - after_burst.len(),
        output_events: after_burst.len(),
    };
    Ok((after_burst, report))
}

/// Everything between loaded inputs and evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub counts: Vec<CountSpec>,
    pub spans_us: Vec<u64>,
    pub descriptor: DescriptorParams,
    pub metric: Metric,
    pub rule: EnsembleRule,
    pub dt_us: u64,
    pub loc_threshold_us: u64,
    /// Query window of the approximate ensemble; `None` skips it.
    pub approximate: Option<CountSpec>,
    pub sweep_points: usize,
    pub loc_sweep_us: Vec<u64>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            counts: DEFAULT_NORMALIZED_COUNTS
                .iter()
                .map(|&c| CountSpec::Normalized(c))
                .collect(),
            spans_us: DEFAULT_SPANS_US.to_vec(),
            descriptor: DescriptorParams::default(),
            metric: Metric::Sad,
            rule: EnsembleRule::Mean,
            dt_us: DEFAULT_SAMPLE_INTERVAL_US,
            loc_threshold_us: DEFAULT_LOC_THRESHOLD_US,
            approximate: Some(CountSpec::Normalized(DEFAULT_APPROXIMATE_COUNT)),
            sweep_points: DEFAULT_SWEEP_POINTS,
            loc_sweep_us: default_loc_sweep_us(),
        }
    }
}

impl PipelineParams {
    pub fn member_count(&self) -> usize {
        self.counts.len() + self.spans_us.len()
    }

    /// Checks everything that does not depend on the input data.
    pub fn validate(&self) -> Result<()> {
        if self.member_count() == 0 {
            return Err(config(
                "window grids are empty: configure at least one count or span",
            ));
        }
        if self.spans_us.contains(&0) {
            return Err(config("window spans must be positive"));
        }
        for c in self.counts.iter().chain(&self.approximate) {
            match *c {
                CountSpec::Absolute(0) => return Err(config("window counts must be positive")),
                CountSpec::Normalized(v) if !(v > 0.0 && v.is_finite()) => {
                    return Err(config("normalized window counts must be positive"))
                }
                _ => {}
            }
        }
        if !(self.descriptor.clip > 0.0) {
            return Err(config("descriptor.clip must be positive"));
        }
        if self.dt_us == 0 {
            return Err(config("dt_us must be positive"));
        }
        if self.loc_threshold_us == 0 {
            return Err(config("loc_threshold_us must be positive"));
        }
        if self.loc_sweep_us.windows(2).any(|p| p[1] < p[0]) {
            return Err(config("loc_sweep_us must be ascending"));
        }
        self.rule.validate(self.member_count())
    }

    fn validate_for_members(&self, members: usize) -> Result<()> {
        if members == 0 {
            return Err(config("no ensemble members"));
        }
        self.rule.validate(members)
    }
}

/// A matrix with its evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub matrix: DistanceMatrix,
    pub full_recall: EvalResult,
    /// Empty for vote matrices.
    pub pr_curve: Vec<EvalResult>,
    pub loc_curve: Vec<EvalResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub ground_truth: GroundTruth,
    /// Query grid instants without ground truth, left out of evaluation.
    pub dropped_queries: usize,
    pub members: Vec<Scored>,
    pub ensemble: Scored,
    pub approximate: Option<Scored>,
}

impl PipelineOutput {
    pub fn member_precisions(&self) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.full_recall.precision)
            .collect()
    }
}

/// One descriptor sequence per configured family, sampled on `grid`.
pub fn describe_stream(
    stream: &EventStream,
    grid: &[u64],
    params: &PipelineParams,
) -> Result<Vec<DescriptorSequence>> {
    let ws = build_window_set(stream, &params.counts, &params.spans_us)?;
    describe_window_set(&ws, stream, grid, &params.descriptor)
}

fn describe_single(
    stream: &EventStream,
    grid: &[u64],
    spec: CountSpec,
    params: &PipelineParams,
) -> Result<DescriptorSequence> {
    let n = spec.resolve(stream.geometry())?;
    let windows = split_fixed_count(stream, n)?;
    describe_family(
        WindowSpec::FixedCount(n),
        &windows,
        stream,
        grid,
        &params.descriptor,
    )
}

/// Runs the whole pipeline on two event streams. Query instants are the
/// `dt_us` grid of the query stream restricted to the span of `anchors`.
pub fn run_on_streams(
    query: &EventStream,
    reference: &EventStream,
    anchors: &GroundTruth,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    params.validate()?;
    params.descriptor.sad.validate(query.geometry())?;
    params.descriptor.sad.validate(reference.geometry())?;
    let full_grid = sample_grid(query, params.dt_us)?;
    let interp = interpolate_ground_truth(anchors, &full_grid)?;
    let q_grid: Vec<u64> = interp
        .ground_truth
        .pairs()
        .iter()
        .map(|p| p.query_t_us)
        .collect();
    if q_grid.is_empty() {
        return Err(Error::Alignment(
            "ground truth covers none of the query grid".into(),
        ));
    }
    let r_grid = sample_grid(reference, params.dt_us)?;
    info!(
        "{} query instants ({} outside ground truth), {} reference instants, {} members",
        q_grid.len(),
        interp.dropped,
        r_grid.len(),
        params.member_count()
    );

    let (q_side, r_members) = rayon::join(
        || -> Result<_> {
            let members = describe_stream(query, &q_grid, params)?;
            let single = params
                .approximate
                .map(|spec| describe_single(query, &q_grid, spec, params))
                .transpose()?;
            Ok((members, single))
        },
        || describe_stream(reference, &r_grid, params),
    );
    let (q_members, q_single) = q_side?;
    fuse_and_score(
        &q_members,
        &r_members?,
        q_single.as_ref(),
        interp.ground_truth,
        interp.dropped,
        params,
    )
}

/// Runs matching and evaluation on precomputed descriptor sequences, one
/// query and one reference sequence per member. Query rows outside the
/// anchors' span are dropped before matching.
pub fn run_on_descriptors(
    q_members: &[DescriptorSequence],
    r_members: &[DescriptorSequence],
    anchors: &GroundTruth,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    params.validate_for_members(q_members.len())?;
    if q_members.len() != r_members.len() {
        return Err(Error::Shape(format!(
            "{} query descriptor files but {} reference files",
            q_members.len(),
            r_members.len()
        )));
    }
    let q_times = q_members[0].timestamps();
    let interp = interpolate_ground_truth(anchors, &q_times)?;
    let keep: BTreeSet<u64> = interp
        .ground_truth
        .pairs()
        .iter()
        .map(|p| p.query_t_us)
        .collect();
    let q_members = q_members
        .iter()
        .map(|s| restrict(s, &keep))
        .collect::<Result<Vec<_>>>()?;
    fuse_and_score(
        &q_members,
        r_members,
        None,
        interp.ground_truth,
        interp.dropped,
        params,
    )
}

fn restrict(seq: &DescriptorSequence, keep: &BTreeSet<u64>) -> Result<DescriptorSequence> {
    let items = seq
        .items()
        .iter()
        .filter(|d| keep.contains(&d.t_us))
        .cloned()
        .collect();
    DescriptorSequence::new(seq.source().clone(), items)
}

/// Fuses member matrices with the configured rule.
pub fn fuse(members: &[DistanceMatrix], rule: &EnsembleRule) -> Result<DistanceMatrix> {
    match rule {
        EnsembleRule::MajorityVote => majority_vote(members),
        _ => combine(members, rule),
    }
}

/// Builds and evaluates one matrix per member, the fused matrix and, when
/// `q_single` is given, the approximate ensemble.
pub fn fuse_and_score(
    q_members: &[DescriptorSequence],
    r_members: &[DescriptorSequence],
    q_single: Option<&DescriptorSequence>,
    ground_truth: GroundTruth,
    dropped_queries: usize,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    params.validate_for_members(q_members.len())?;
    if q_members.len() != r_members.len() {
        return Err(Error::Shape(format!(
            "{} query members but {} reference members",
            q_members.len(),
            r_members.len()
        )));
    }
    let matrices = q_members
        .iter()
        .zip(r_members)
        .map(|(q, r)| build_distance_matrix(q, r, params.metric))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse(&matrices, &params.rule)?.with_label(params.rule.to_string());
    let approximate = q_single
        .map(|q| approximate_combine(q, r_members, params.metric))
        .transpose()?;
    debug!("fused {} members with {}", matrices.len(), params.rule);

    let score = |m: DistanceMatrix| score_matrix(m, &ground_truth, params);
    let members = matrices
        .into_iter()
        .map(score)
        .collect::<Result<Vec<_>>>()?;
    let ensemble = score(fused)?;
    let approximate = approximate.map(score).transpose()?;
    Ok(PipelineOutput {
        ground_truth,
        dropped_queries,
        members,
        ensemble,
        approximate,
    })
}

/// Full-recall precision, the similarity sweep (distance matrices only) and
/// the localization-threshold sweep.
pub fn score_matrix(
    matrix: DistanceMatrix,
    gt: &GroundTruth,
    params: &PipelineParams,
) -> Result<Scored> {
    let full_recall = precision_at_full_recall(&matrix, gt, params.loc_threshold_us)?;
    let pr_curve = match matrix.kind() {
        MatrixKind::Votes => Vec::new(),
        MatrixKind::Distance if params.sweep_points == 0 => Vec::new(),
        MatrixKind::Distance => {
            let sweep = default_sweep(&matrix, params.sweep_points);
            precision_recall_curve(&matrix, gt, params.loc_threshold_us, &sweep)?
        }
    };
    let loc_curve = precision_vs_loc_threshold(&matrix, gt, &params.loc_sweep_us)?;
    Ok(Scored {
        matrix,
        full_recall,
        pr_curve,
        loc_curve,
    })
}
