//! Per-window descriptors and the distance functions that compare them.
//!
//! The built-in path accumulates a window into an event image and turns it
//! into a patch-normalized thumbnail compared by mean absolute difference.
//! Learned descriptors computed elsewhere enter through [`load_descriptors`]
//! and are compared by cosine distance. Whether such vectors were
//! L2-normalized before export does not matter for cosine distance.

use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::events::{EventStream, SensorGeometry};
use crate::timefmt;
use crate::windowing::{align_to_time, Window, WindowSet, WindowSpec};

/// Patches whose standard deviation falls below this are zeroed.
pub const DEGENERATE_PATCH_STD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// Sum of polarities, clipped to `[-clip, clip]`.
    SignedSum,
    /// Number of events per pixel.
    Count,
    /// 1 where at least one event fired.
    Binary,
}

/// A window's events accumulated onto the pixel grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EventImage {
    pub geometry: SensorGeometry,
    pub mode: AccumulationMode,
    pub pixels: Vec<f64>,
}

impl EventImage {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.geometry.width() as usize + x]
    }
}

pub fn accumulate_image(
    window: &Window,
    stream: &EventStream,
    mode: AccumulationMode,
    clip: f64,
) -> Result<EventImage> {
    if !(clip > 0.0) {
        return Err(config(format!("clip must be positive, got {clip}")));
    }
    let geometry = stream.geometry();
    let mut pixels = vec![0.0; geometry.pixel_count()];
    for e in &stream.events()[window.start_idx..window.end_idx] {
        let px = &mut pixels[geometry.index(e.x, e.y)];
        match mode {
            AccumulationMode::SignedSum => *px += e.p.sign() as f64,
            AccumulationMode::Count => *px += 1.0,
            AccumulationMode::Binary => *px = 1.0,
        }
    }
    if mode == AccumulationMode::SignedSum {
        pixels.iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
    }
    Ok(EventImage {
        geometry,
        mode,
        pixels,
    })
}

/// Thumbnail size and patch size of the SAD descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SadParams {
    pub down_width: usize,
    pub down_height: usize,
    pub patch: usize,
}

impl Default for SadParams {
    fn default() -> Self {
        Self {
            down_width: 32,
            down_height: 24,
            patch: 8,
        }
    }
}

impl SadParams {
    pub fn validate(&self, geometry: SensorGeometry) -> Result<()> {
        let (w, h) = (geometry.width() as usize, geometry.height() as usize);
        if self.down_width == 0 || self.down_height == 0 || self.patch == 0 {
            return Err(config(
                "descriptor thumbnail and patch sizes must be positive",
            ));
        }
        if self.down_width > w || self.down_height > h {
            return Err(config(format!(
                "thumbnail {}x{} is larger than the {w}x{h} sensor",
                self.down_width, self.down_height
            )));
        }
        if !self.down_width.is_multiple_of(self.patch)
            || !self.down_height.is_multiple_of(self.patch)
        {
            return Err(config(format!(
                "patch size {} must divide the {}x{} thumbnail",
                self.patch, self.down_width, self.down_height
            )));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.down_width * self.down_height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescriptorKind {
    Sad,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub t_us: u64,
    pub values: Vec<f64>,
    pub kind: DescriptorKind,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Where a descriptor sequence came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SequenceSource {
    Window(WindowSpec),
    External(String),
}

impl fmt::Display for SequenceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceSource::Window(spec) => spec.fmt(f),
            SequenceSource::External(name) => write!(f, "external-{name}"),
        }
    }
}

/// Time series of descriptors for one ensemble member. Timestamps are
/// strictly increasing and all vectors share one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSequence {
    source: SequenceSource,
    items: Vec<Descriptor>,
}

impl DescriptorSequence {
    pub fn new(source: SequenceSource, items: Vec<Descriptor>) -> Result<Self> {
        if let Some(first) = items.first() {
            let dim = first.dim();
            if dim == 0 {
                return Err(Error::Shape(
                    "descriptors must have at least one component".into(),
                ));
            }
            for (i, pair) in items.windows(2).enumerate() {
                if pair[1].dim() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        found: pair[1].dim(),
                    });
                }
                if pair[1].t_us <= pair[0].t_us {
                    return Err(Error::Unordered {
                        line: i + 2,
                        t: pair[1].t_us,
                        previous: pair[0].t_us,
                    });
                }
            }
        }
        Ok(Self { source, items })
    }

    pub fn source(&self) -> &SequenceSource {
        &self.source
    }

    pub fn items(&self) -> &[Descriptor] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Descriptor dimension, `None` for an empty sequence.
    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(Descriptor::dim)
    }

    pub fn timestamps(&self) -> Vec<u64> {
        self.items.iter().map(|d| d.t_us).collect()
    }
}

/// Area-weighted resampling taps from `src` samples onto `dst` samples.
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    // Work in units of 1/dst of a source pixel so every boundary is an integer.
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i * src, (i + 1) * src);
            (lo / dst..hi.div_ceil(dst))
                .filter_map(|x| {
                    let overlap = hi.min((x + 1) * dst).saturating_sub(lo.max(x * dst));
                    (overlap > 0).then(|| (x, overlap as f64 / src as f64))
                })
                .collect()
        })
        .collect()
}

/// Area-average downsampling followed by per-patch standardization.
///
/// Each `patch x patch` block of the thumbnail is shifted to zero mean and
/// scaled to unit population standard deviation; flat patches become zeros.
/// The result is flattened row-major over the whole thumbnail.
pub fn sad_descriptor(image: &EventImage, params: &SadParams, t_us: u64) -> Result<Descriptor> {
    params.validate(image.geometry)?;
    let (w, h) = (
        image.geometry.width() as usize,
        image.geometry.height() as usize,
    );
    let (dw, dh, patch) = (params.down_width, params.down_height, params.patch);
    let taps_x = area_taps(w, dw);
    let taps_y = area_taps(h, dh);

    // Horizontal pass, then vertical.
    let mut rows = vec![0.0; h * dw];
    for y in 0..h {
        let src = &image.pixels[y * w..(y + 1) * w];
        for (i, taps) in taps_x.iter().enumerate() {
            rows[y * dw + i] = taps.iter().map(|&(x, wt)| wt * src[x]).sum();
        }
    }
    let mut thumb = vec![0.0; dh * dw];
    for (j, taps) in taps_y.iter().enumerate() {
        for i in 0..dw {
            thumb[j * dw + i] = taps.iter().map(|&(y, wt)| wt * rows[y * dw + i]).sum();
        }
    }

    let area = (patch * patch) as f64;
    for py in (0..dh).step_by(patch) {
        for px in (0..dw).step_by(patch) {
            let cells =
                || (py..py + patch).flat_map(move |y| (px..px + patch).map(move |x| y * dw + x));
            let mean = cells().map(|k| thumb[k]).sum::<f64>() / area;
            let var = cells().map(|k| (thumb[k] - mean).powi(2)).sum::<f64>() / area;
            let std = var.sqrt();
            for k in cells() {
                thumb[k] = if std < DEGENERATE_PATCH_STD {
                    0.0
                } else {
                    (thumb[k] - mean) / std
                };
            }
        }
    }

    Ok(Descriptor {
        t_us,
        values: thumb,
        kind: DescriptorKind::Sad,
    })
}

/// Settings for turning windows into descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorParams {
    pub mode: AccumulationMode,
    pub clip: f64,
    pub sad: SadParams,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            mode: AccumulationMode::SignedSum,
            clip: 3.0,
            sad: SadParams::default(),
        }
    }
}

/// Describes one family at every grid instant.
pub fn describe_family(
    spec: WindowSpec,
    windows: &[Window],
    stream: &EventStream,
    grid: &[u64],
    params: &DescriptorParams,
) -> Result<DescriptorSequence> {
    check_grid(grid)?;
    let items = grid
        .par_iter()
        .map(|&t_star| {
            let k = align_to_time(windows, stream, t_star)?;
            let image = accumulate_image(&windows[k], stream, params.mode, params.clip)?;
            sad_descriptor(&image, &params.sad, t_star)
        })
        .collect::<Result<Vec<_>>>()?;
    DescriptorSequence::new(SequenceSource::Window(spec), items)
}

/// One descriptor sequence per family, each holding one SAD descriptor per
/// grid instant taken from the window aligned to that instant.
pub fn describe_window_set(
    ws: &WindowSet,
    stream: &EventStream,
    grid: &[u64],
    params: &DescriptorParams,
) -> Result<Vec<DescriptorSequence>> {
    check_grid(grid)?;
    params.sad.validate(stream.geometry())?;
    ws.families
        .par_iter()
        .map(|family| describe_family(family.spec, &family.windows, stream, grid, params))
        .collect()
}

fn check_grid(grid: &[u64]) -> Result<()> {
    if grid.is_empty() {
        return Err(config("sample grid is empty"));
    }
    if grid.windows(2).any(|p| p[1] <= p[0]) {
        return Err(config("sample grid must be strictly increasing"));
    }
    Ok(())
}

/// Reads `t_s,v1,...,vD` rows (no header) into an external sequence.
pub fn load_descriptors<R: BufRead>(source: R, name: &str) -> Result<DescriptorSequence> {
    let mut items: Vec<Descriptor> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let row = line.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let mut fields = row.split(',').map(str::trim);
        let t_raw = fields.next().unwrap_or_default();
        let t_us = timefmt::parse_seconds_as_us(t_raw)
            .and_then(timefmt::round_us)
            .ok_or_else(|| Error::Parse {
                line: lineno,
                reason: format!("invalid timestamp {t_raw:?}"),
            })?;
        let values = fields
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line: lineno,
                    reason: format!("invalid descriptor component {f:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                reason: "row has no descriptor components".into(),
            });
        }
        if let Some(prev) = items.last() {
            if values.len() != prev.dim() {
                return Err(Error::Parse {
                    line: lineno,
                    reason: format!("expected {} components, found {}", prev.dim(), values.len()),
                });
            }
            if t_us <= prev.t_us {
                return Err(Error::Unordered {
                    line: lineno,
                    t: t_us,
                    previous: prev.t_us,
                });
            }
        }
        items.push(Descriptor {
            t_us,
            values,
            kind: DescriptorKind::External,
        });
    }
    DescriptorSequence::new(SequenceSource::External(name.to_string()), items)
}

/// Writes the sequence as `t_s,v1,...,vD` rows with LF endings.
pub fn write_descriptors<W: Write>(seq: &DescriptorSequence, mut sink: W) -> std::io::Result<()> {
    for d in seq.items() {
        write!(sink, "{}", timefmt::format_int_us_as_seconds(d.t_us))?;
        for v in &d.values {
            write!(sink, ",{v}")?;
        }
        writeln!(sink)?;
    }
    sink.flush()
}

/// `1 - a.b / (|a| |b|)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::DegenerateDescriptor);
    }
    // sqrt(aa * aa) == aa exactly, so identical vectors give exactly 0.
    Ok((1.0 - dot / (aa * bb).sqrt()).clamp(0.0, 2.0))
}

/// Mean absolute difference `(1/D) * sum |a_i - b_i|`.
pub fn sad_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
