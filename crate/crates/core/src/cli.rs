//! Command-line front end.
//!
//! Every subcommand reads the same TOML config (all keys optional), applies
//! `--set section.key=value` overrides on top, validates the result and only
//! then touches the inputs. Outputs go to `output.dir` together with a
//! `manifest.json` holding the resolved config and SHA-256 digests of every
//! input and output file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::descriptors::{
    load_descriptors, write_descriptors, AccumulationMode, DescriptorParams, SadParams,
};
use crate::distance::{
    build_distance_matrix, read_matrix_csv, write_matrix_csv, DistanceMatrix, MatrixKind, Metric,
};
use crate::ensemble::EnsembleRule;
use crate::error::{config, Error};
use crate::evaluation::{
    default_loc_sweep_us, interpolate_ground_truth, read_ground_truth, write_eval_csv,
    write_ground_truth, GroundTruth, ThresholdColumn, DEFAULT_LOC_THRESHOLD_US,
    DEFAULT_SWEEP_POINTS,
};
use crate::events::{parse_event_csv, write_event_csv, EventStream, SensorGeometry};
use crate::pipeline::{
    apply_filters, describe_stream, fuse, run_on_descriptors, run_on_streams, score_matrix,
    FilterParams, PipelineOutput, PipelineParams, Scored, DEFAULT_APPROXIMATE_COUNT,
};
use crate::synthetic::{generate_dataset, SyntheticConfig};
use crate::windowing::{
    build_window_set, sample_grid, CountSpec, DEFAULT_NORMALIZED_COUNTS,
    DEFAULT_SAMPLE_INTERVAL_US, DEFAULT_SPANS_US,
};

/// Environment variable holding the `env_logger` filter.
pub const LOG_ENV: &str = "EVPR_LOG";

pub const MANIFEST_FILE: &str = "manifest.json";

/// An error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub type CliResult<T> = std::result::Result<T, StageError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: Into<Error>> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub width: u16,
    pub height: u16,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            width: SensorGeometry::DAVIS346.width(),
            height: SensorGeometry::DAVIS346.height(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsConfig {
    /// Event counts normalized by `width * height`.
    pub counts: Vec<f64>,
    /// Absolute event counts.
    pub event_counts: Vec<usize>,
    pub spans_us: Vec<u64>,
}

impl Default for WindowsConfig {
    fn default() -> Self {
        Self {
            counts: DEFAULT_NORMALIZED_COUNTS.to_vec(),
            event_counts: Vec::new(),
            spans_us: DEFAULT_SPANS_US.to_vec(),
        }
    }
}

/// Where `run` gets its descriptors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Event CSVs, described with the SAD descriptor.
    Events,
    /// Precomputed descriptor CSVs, one file per member.
    Descriptors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorConfig {
    pub input: InputKind,
    pub mode: AccumulationMode,
    pub clip: f64,
    pub down_width: usize,
    pub down_height: usize,
    pub patch: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        let d = DescriptorParams::default();
        Self {
            input: InputKind::Events,
            mode: d.mode,
            clip: d.clip,
            down_width: d.sad.down_width,
            down_height: d.sad.down_height,
            patch: d.sad.patch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub metric: Metric,
    /// Query sampling interval.
    pub dt_us: u64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Sad,
            dt_us: DEFAULT_SAMPLE_INTERVAL_US,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleName {
    Mean,
    Product,
    Median,
    Min,
    Max,
    TrimmedMean,
    Weighted,
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub rule: RuleName,
    /// Values dropped per side by `trimmed_mean`.
    pub trim: usize,
    /// One weight per member for `weighted`.
    pub weights: Vec<f64>,
    pub approximate: bool,
    /// Normalized count of the approximate ensemble's query window.
    pub approximate_count: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            rule: RuleName::Mean,
            trim: 1,
            weights: Vec::new(),
            approximate: true,
            approximate_count: DEFAULT_APPROXIMATE_COUNT,
        }
    }
}

impl EnsembleConfig {
    pub fn rule(&self) -> EnsembleRule {
        match self.rule {
            RuleName::Mean => EnsembleRule::Mean,
            RuleName::Product => EnsembleRule::Product,
            RuleName::Median => EnsembleRule::Median,
            RuleName::Min => EnsembleRule::Min,
            RuleName::Max => EnsembleRule::Max,
            RuleName::TrimmedMean => EnsembleRule::TrimmedMean { trim: self.trim },
            RuleName::Weighted => EnsembleRule::Weighted {
                weights: self.weights.clone(),
            },
            RuleName::MajorityVote => EnsembleRule::MajorityVote,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub loc_threshold_us: u64,
    /// Points of the similarity-threshold sweep; 0 disables PR curves.
    pub sweep_points: usize,
    /// Localization thresholds for the precision-vs-threshold curve.
    pub loc_sweep_us: Vec<u64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            loc_threshold_us: DEFAULT_LOC_THRESHOLD_US,
            sweep_points: DEFAULT_SWEEP_POINTS,
            loc_sweep_us: default_loc_sweep_us(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("evpr-out"),
        }
    }
}

/// Resolved configuration shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub sensor: SensorConfig,
    pub filter: FilterParams,
    pub windows: WindowsConfig,
    pub descriptor: DescriptorConfig,
    pub matching: MatchingConfig,
    pub ensemble: EnsembleConfig,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
    pub synthetic: SyntheticConfig,
}

impl PipelineConfig {
    /// Defaults, overlaid with `file` (if any), overlaid with `overrides`
    /// of the form `section.key=value`. Values are parsed as TOML and fall
    /// back to plain strings.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> crate::Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                text.parse::<toml::Table>()
                    .map_err(|e| config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn geometry(&self) -> crate::Result<SensorGeometry> {
        SensorGeometry::new(self.sensor.width, self.sensor.height)
    }

    pub fn member_count(&self) -> usize {
        self.windows.counts.len() + self.windows.event_counts.len() + self.windows.spans_us.len()
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        let d = &self.descriptor;
        PipelineParams {
            counts: self
                .windows
                .counts
                .iter()
                .map(|&c| CountSpec::Normalized(c))
                .chain(
                    self.windows
                        .event_counts
                        .iter()
                        .map(|&n| CountSpec::Absolute(n)),
                )
                .collect(),
            spans_us: self.windows.spans_us.clone(),
            descriptor: DescriptorParams {
                mode: d.mode,
                clip: d.clip,
                sad: SadParams {
                    down_width: d.down_width,
                    down_height: d.down_height,
                    patch: d.patch,
                },
            },
            metric: self.matching.metric,
            rule: self.ensemble.rule(),
            dt_us: self.matching.dt_us,
            loc_threshold_us: self.evaluation.loc_threshold_us,
            approximate: (self.ensemble.approximate && d.input == InputKind::Events)
                .then_some(CountSpec::Normalized(self.ensemble.approximate_count)),
            sweep_points: self.evaluation.sweep_points,
            loc_sweep_us: self.evaluation.loc_sweep_us.clone(),
        }
    }

    /// Checks the settings used by matching and evaluation.
    pub fn validate(&self) -> crate::Result<()> {
        let geometry = self.geometry()?;
        self.filter.validate()?;
        let params = self.pipeline_params();
        params.validate()?;
        if self.descriptor.input == InputKind::Events {
            params.descriptor.sad.validate(geometry)?;
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> crate::Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| config(format!("override {item:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config(format!("override key {key:?}: {part} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest and file helpers

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

fn digest(path: String, bytes: &[u8]) -> FileDigest {
    FileDigest {
        path,
        sha256: hex::encode(Sha256::digest(bytes)),
        bytes: bytes.len() as u64,
    }
}

/// Collects outputs in memory so nothing is written before every stage
/// succeeded, then writes them in insertion order.
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(
        &mut self,
        rel: impl Into<String>,
        write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> CliResult<()> {
        let mut buf = Vec::new();
        write(&mut buf).stage("write")?;
        self.files.push((rel.into(), buf));
        Ok(())
    }

    /// Writes every file plus the manifest, then reads each back to confirm
    /// its digest.
    fn commit(
        self,
        dir: &Path,
        command: &str,
        cfg: &PipelineConfig,
        inputs: Vec<FileDigest>,
    ) -> CliResult<Manifest> {
        let mut outputs = Vec::with_capacity(self.files.len());
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).stage("write")?;
            }
            fs::write(&path, bytes).stage("write")?;
            outputs.push(digest(rel.clone(), bytes));
        }
        for d in &outputs {
            let back = fs::read(dir.join(&d.path)).stage("write")?;
            if digest(d.path.clone(), &back) != *d {
                return Err(StageError {
                    stage: "write",
                    source: Error::Io(std::io::Error::other(format!(
                        "{} changed after writing",
                        d.path
                    ))),
                });
            }
        }
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: cfg.clone(),
            inputs,
            outputs,
        };
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Io(std::io::Error::other(e)))
            .stage("write")?;
        fs::write(dir.join(MANIFEST_FILE), json).stage("write")?;
        info!(
            "wrote {} files to {}",
            manifest.outputs.len() + 1,
            dir.display()
        );
        Ok(manifest)
    }
}

struct Inputs {
    digests: Vec<FileDigest>,
}

impl Inputs {
    fn new() -> Self {
        Self {
            digests: Vec::new(),
        }
    }

    fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path)
            .map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", path.display()),
                ))
            })
            .stage("load")?;
        self.digests
            .push(digest(path.display().to_string(), &bytes));
        Ok(bytes)
    }

    fn events(&mut self, path: &Path, geometry: SensorGeometry) -> CliResult<EventStream> {
        let bytes = self.read(path)?;
        parse_event_csv(bytes.as_slice(), geometry)
            .map_err(|e| in_file(path, e))
            .stage("load")
    }

    fn ground_truth(&mut self, path: &Path) -> CliResult<GroundTruth> {
        let bytes = self.read(path)?;
        read_ground_truth(bytes.as_slice())
            .map_err(|e| in_file(path, e))
            .stage("load")
    }

    fn descriptors(&mut self, path: &Path) -> CliResult<crate::descriptors::DescriptorSequence> {
        let bytes = self.read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        load_descriptors(bytes.as_slice(), &name)
            .map_err(|e| in_file(path, e))
            .stage("load")
    }

    fn matrix(&mut self, path: &Path, kind: MatrixKind) -> CliResult<DistanceMatrix> {
        let bytes = self.read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        read_matrix_csv(bytes.as_slice(), &name, kind)
            .map_err(|e| in_file(path, e))
            .stage("load")
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, reason } => Error::Parse {
            line,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Applies the configured filters; writes `filtered.csv` and
/// `filter_report.json`.
pub fn cmd_filter(events: &Path, cfg: &PipelineConfig) -> CliResult<Manifest> {
    cfg.geometry()
        .and_then(|_| cfg.filter.validate())
        .stage("config")?;
    let mut inputs = Inputs::new();
    let stream = inputs.events(events, cfg.geometry().stage("config")?)?;
    let (filtered, report) = apply_filters(&stream, &cfg.filter).stage("filter")?;
    info!(
        "removed {} hot-pixel and {} burst events",
        report.hot_pixel_events_removed, report.burst_events_removed
    );
    let mut out = Outputs::new();
    out.add("filtered.csv", |b| write_event_csv(&filtered, b))?;
    out.add("filter_report.json", |b| {
        serde_json::to_writer_pretty(&mut *b, &report)?;
        b.push(b'\n');
        Ok(())
    })?;
    out.commit(&cfg.output.dir, "filter", cfg, inputs.digests)
}

/// Writes `reference.csv`, `query.csv` and `ground_truth.csv` generated
/// from `[synthetic]`.
pub fn cmd_synth(cfg: &PipelineConfig) -> CliResult<Manifest> {
    cfg.synthetic.validate().stage("config")?;
    let data = generate_dataset(&cfg.synthetic).stage("synth")?;
    info!(
        "generated {} reference and {} query events over {} places",
        data.reference.stream.len(),
        data.query.stream.len(),
        data.world.n_places()
    );
    let mut out = Outputs::new();
    out.add("reference.csv", |b| {
        write_event_csv(&data.reference.stream, b)
    })?;
    out.add("query.csv", |b| write_event_csv(&data.query.stream, b))?;
    out.add("ground_truth.csv", |b| {
        write_ground_truth(&data.ground_truth, b)
    })?;
    out.commit(&cfg.output.dir, "synth", cfg, Vec::new())
}

/// Full pipeline. With `descriptor.input = "events"`, `query` and
/// `reference` each hold one event CSV; with `"descriptors"`, one
/// descriptor CSV per member, paired by position.
pub fn cmd_run(
    query: &[PathBuf],
    reference: &[PathBuf],
    gt: &Path,
    cfg: &PipelineConfig,
) -> CliResult<Manifest> {
    cfg.validate().stage("config")?;
    let params = cfg.pipeline_params();
    let mut inputs = Inputs::new();
    let output = match cfg.descriptor.input {
        InputKind::Events => {
            if query.len() != 1 || reference.len() != 1 {
                return Err(config(
                    "event input takes exactly one query and one reference file",
                ))
                .stage("config");
            }
            let geometry = cfg.geometry().stage("config")?;
            let q = inputs.events(&query[0], geometry)?;
            let r = inputs.events(&reference[0], geometry)?;
            let anchors = inputs.ground_truth(gt)?;
            let (q, r) = if cfg.filter.hot_pixels || cfg.filter.bursts {
                let q = apply_filters(&q, &cfg.filter).stage("filter")?.0;
                let r = apply_filters(&r, &cfg.filter).stage("filter")?.0;
                (q, r)
            } else {
                (q, r)
            };
            run_on_streams(&q, &r, &anchors, &params).stage("run")?
        }
        InputKind::Descriptors => {
            if query.is_empty() || query.len() != reference.len() {
                return Err(config(
                    "descriptor input needs matching, non-empty query and reference lists",
                ))
                .stage("config");
            }
            let q = query
                .iter()
                .map(|p| inputs.descriptors(p))
                .collect::<CliResult<Vec<_>>>()?;
            let r = reference
                .iter()
                .map(|p| inputs.descriptors(p))
                .collect::<CliResult<Vec<_>>>()?;
            let anchors = inputs.ground_truth(gt)?;
            run_on_descriptors(&q, &r, &anchors, &params).stage("run")?
        }
    };
    let mut out = Outputs::new();
    write_run_outputs(&output, &mut out)?;
    out.commit(&cfg.output.dir, "run", cfg, inputs.digests)
}

fn write_run_outputs(output: &PipelineOutput, out: &mut Outputs) -> CliResult<()> {
    let mut named: Vec<(String, &Scored)> = output
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| (format!("member_{i:02}_{}", m.matrix.label()), m))
        .collect();
    named.push(("ensemble".to_string(), &output.ensemble));
    if let Some(a) = &output.approximate {
        named.push(("approximate".to_string(), a));
    }

    out.add("summary.csv", |b| {
        use std::io::Write;
        writeln!(b, "matrix,label,precision,recall,tp,fp,retrieved,total")?;
        for (name, s) in &named {
            let r = &s.full_recall;
            writeln!(
                b,
                "{name},{},{},{},{},{},{},{}",
                s.matrix.label(),
                r.precision,
                r.recall,
                r.tp,
                r.fp,
                r.retrieved,
                r.total_queries
            )?;
        }
        Ok(())
    })?;
    for (name, s) in &named {
        out.add(format!("matrices/{name}.csv"), |b| {
            write_matrix_csv(&s.matrix, b)
        })?;
        write_eval_outputs(s, &format!("eval/{name}"), out)?;
    }
    out.add("ground_truth.csv", |b| {
        write_ground_truth(&output.ground_truth, b)
    })
}

fn write_eval_outputs(s: &Scored, prefix: &str, out: &mut Outputs) -> CliResult<()> {
    out.add(format!("{prefix}_full_recall.csv"), |b| {
        write_eval_csv(&[s.full_recall], ThresholdColumn::Localization, b)
    })?;
    if !s.pr_curve.is_empty() {
        out.add(format!("{prefix}_pr.csv"), |b| {
            write_eval_csv(&s.pr_curve, ThresholdColumn::Similarity, b)
        })?;
    }
    if !s.loc_curve.is_empty() {
        out.add(format!("{prefix}_loc.csv"), |b| {
            write_eval_csv(&s.loc_curve, ThresholdColumn::Localization, b)
        })?;
    }
    Ok(())
}

/// Writes `windows.csv` listing every window of every configured family.
pub fn cmd_windows(events: &Path, cfg: &PipelineConfig) -> CliResult<Manifest> {
    cfg.validate().stage("config")?;
    let params = cfg.pipeline_params();
    let mut inputs = Inputs::new();
    let stream = inputs.events(events, cfg.geometry().stage("config")?)?;
    let ws = build_window_set(&stream, &params.counts, &params.spans_us).stage("windows")?;
    let mut out = Outputs::new();
    out.add("windows.csv", |b| {
        use std::io::Write;
        writeln!(b, "family,index,start_idx,end_idx,t_start_us,t_end_us")?;
        for family in &ws.families {
            for (i, w) in family.windows.iter().enumerate() {
                writeln!(
                    b,
                    "{},{i},{},{},{},{}",
                    family.spec, w.start_idx, w.end_idx, w.t_start_us, w.t_end_us
                )?;
            }
        }
        Ok(())
    })?;
    out.commit(&cfg.output.dir, "windows", cfg, inputs.digests)
}

/// Writes `descriptors/<family>.csv` for every family, sampled every
/// `matching.dt_us`.
pub fn cmd_describe(events: &Path, cfg: &PipelineConfig) -> CliResult<Manifest> {
    cfg.validate().stage("config")?;
    let params = cfg.pipeline_params();
    let mut inputs = Inputs::new();
    let stream = inputs.events(events, cfg.geometry().stage("config")?)?;
    let grid = sample_grid(&stream, params.dt_us).stage("describe")?;
    let sequences = describe_stream(&stream, &grid, &params).stage("describe")?;
    let mut out = Outputs::new();
    for (i, seq) in sequences.iter().enumerate() {
        out.add(format!("descriptors/{i:02}_{}.csv", seq.source()), |b| {
            write_descriptors(seq, b)
        })?;
    }
    out.commit(&cfg.output.dir, "describe", cfg, inputs.digests)
}

/// Writes `distance.csv` comparing two descriptor CSVs.
pub fn cmd_distance(query: &Path, reference: &Path, cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut inputs = Inputs::new();
    let q = inputs.descriptors(query)?;
    let r = inputs.descriptors(reference)?;
    let d = build_distance_matrix(&q, &r, cfg.matching.metric).stage("distance")?;
    let mut out = Outputs::new();
    out.add("distance.csv", |b| write_matrix_csv(&d, b))?;
    out.commit(&cfg.output.dir, "distance", cfg, inputs.digests)
}

/// Writes `fused.csv`, the configured rule applied to member matrix CSVs.
pub fn cmd_ensemble(members: &[PathBuf], cfg: &PipelineConfig) -> CliResult<Manifest> {
    let rule = cfg.ensemble.rule();
    rule.validate(members.len()).stage("config")?;
    let mut inputs = Inputs::new();
    let matrices = members
        .iter()
        .map(|p| inputs.matrix(p, MatrixKind::Distance))
        .collect::<CliResult<Vec<_>>>()?;
    let fused = fuse(&matrices, &rule)
        .stage("ensemble")?
        .with_label(rule.to_string());
    let mut out = Outputs::new();
    out.add("fused.csv", |b| write_matrix_csv(&fused, b))?;
    out.commit(&cfg.output.dir, "ensemble", cfg, inputs.digests)
}

/// Writes `eval_full_recall.csv` and, where applicable, `eval_pr.csv` and
/// `eval_loc.csv` for one matrix CSV.
pub fn cmd_evaluate(
    matrix: &Path,
    gt: &Path,
    votes: bool,
    cfg: &PipelineConfig,
) -> CliResult<Manifest> {
    cfg.validate().stage("config")?;
    let params = cfg.pipeline_params();
    let mut inputs = Inputs::new();
    let kind = if votes {
        MatrixKind::Votes
    } else {
        MatrixKind::Distance
    };
    let d = inputs.matrix(matrix, kind)?;
    let anchors = inputs.ground_truth(gt)?;
    // Anchors are interpolated onto the matrix rows; rows they do not
    // cover are left out.
    let interp = interpolate_ground_truth(&anchors, d.query_t_us()).stage("evaluate")?;
    let gt = interp.ground_truth;
    if gt.is_empty() {
        return Err(Error::Alignment(
            "ground truth covers none of the matrix rows".into(),
        ))
        .stage("evaluate");
    }
    let d = d.select_rows(|t| gt.lookup(t).is_some());
    info!(
        "evaluating {} rows ({} outside ground truth)",
        d.rows(),
        interp.dropped
    );
    let scored = score_matrix(d, &gt, &params).stage("evaluate")?;
    let mut out = Outputs::new();
    write_eval_outputs(&scored, "eval", &mut out)?;
    out.commit(&cfg.output.dir, "evaluate", cfg, inputs.digests)
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "evpr",
    version,
    about = "Temporal-window ensembles for event-camera place recognition"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file; every key is optional.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set ensemble.rule=median`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (same as `--set output.dir=...`).
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove hot pixels and bursts from an event CSV.
    Filter {
        #[arg(long)]
        events: PathBuf,
    },
    /// Generate a synthetic query/reference pair with ground truth.
    Synth,
    /// Run windowing, description, matching, fusion and evaluation.
    Run {
        #[arg(long, num_args = 1.., required = true)]
        query: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
    },
    /// List the windows of every configured family.
    Windows {
        #[arg(long)]
        events: PathBuf,
    },
    /// Compute one descriptor sequence per family.
    Describe {
        #[arg(long)]
        events: PathBuf,
    },
    /// Build a distance matrix from two descriptor CSVs.
    Distance {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Fuse member distance matrices.
    Ensemble {
        #[arg(long = "member", num_args = 1.., required = true)]
        members: Vec<PathBuf>,
    },
    /// Evaluate a matrix against ground truth.
    Evaluate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// The matrix holds majority votes rather than distances.
        #[arg(long)]
        votes: bool,
    },
    /// Print the resolved config as TOML.
    Config,
}

impl Cli {
    pub fn resolve_config(&self) -> CliResult<PipelineConfig> {
        let mut overrides = self.common.overrides.clone();
        if let Some(out) = &self.common.out {
            overrides.push(format!(
                "output.dir={}",
                toml::Value::String(out.display().to_string())
            ));
        }
        PipelineConfig::load(self.common.config.as_deref(), &overrides).stage("config")
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Filter { events } => cmd_filter(events, &cfg).map(drop),
        Command::Synth => cmd_synth(&cfg).map(drop),
        Command::Run {
            query,
            reference,
            gt,
        } => cmd_run(query, reference, gt, &cfg).map(drop),
        Command::Windows { events } => cmd_windows(events, &cfg).map(drop),
        Command::Describe { events } => cmd_describe(events, &cfg).map(drop),
        Command::Distance { query, reference } => cmd_distance(query, reference, &cfg).map(drop),
        Command::Ensemble { members } => cmd_ensemble(members, &cfg).map(drop),
        Command::Evaluate { matrix, gt, votes } => cmd_evaluate(matrix, gt, *votes, &cfg).map(drop),
        Command::Config => {
            let text = toml::to_string(&cfg)
                .map_err(|e| config(e.to_string()))
                .stage("config")?;
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = PipelineConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.member_count(), 9);
        assert_eq!(cfg.pipeline_params(), PipelineParams::default());
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "[ensemble]\nrule = \"median\"\n[sensor]\nwidth = 64\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(
            Some(&path),
            &[
                "ensemble.rule=max".into(),
                "windows.spans_us=[1000]".into(),
                "output.dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.ensemble.rule, RuleName::Max);
        assert_eq!(cfg.sensor.width, 64);
        assert_eq!(cfg.windows.spans_us, vec![1000]);
        assert_eq!(cfg.output.dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(PipelineConfig::load(None, &["nope.key=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["ensemble.rule".into()]).is_err());
        assert!(PipelineConfig::load(None, &["sensor.width=-3".into()]).is_err());

        let empty = PipelineConfig::load(
            None,
            &["windows.counts=[]".into(), "windows.spans_us=[]".into()],
        )
        .unwrap();
        assert!(matches!(empty.validate(), Err(Error::Config(_))));

        let trim = PipelineConfig::load(
            None,
            &[
                "ensemble.rule=\"trimmed_mean\"".into(),
                "ensemble.trim=5".into(),
            ],
        )
        .unwrap();
        assert!(trim.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn stage_errors_are_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            output: OutputConfig {
                dir: dir.path().to_path_buf(),
            },
            ..PipelineConfig::default()
        };
        let err = cmd_filter(&dir.path().join("missing.csv"), &cfg).unwrap_err();
        assert_eq!(err.stage, "load");
        assert!(err.to_string().starts_with("[load] "));
    }
}
