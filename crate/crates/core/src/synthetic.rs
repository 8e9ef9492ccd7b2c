//! Seeded synthetic traverses with exact ground truth.
//!
//! A world is a list of places, each a sparse map of edge pixels firing at a
//! fixed rate. A traverse visits the places in order, dwelling a fixed time
//! at each, and emits Poisson events from the current place's map plus a
//! uniform background. Two traverses of one world under different
//! conditions (rate, noise, dropout, dwell) form a query/reference pair.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`; uniforms take the top 53 bits of `next_u64` and
//! logarithms use `libm`, so outputs are bit-identical across platforms.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::evaluation::{GroundTruth, GtPair};
use crate::events::{Event, EventStream, Polarity, SensorGeometry};
use crate::pipeline::{run_on_streams, PipelineOutput, PipelineParams};

/// Event rate of an edge pixel, in events per second.
pub const DEFAULT_EDGE_RATE: f64 = 200.0;

/// Line segments drawn per place.
pub const DEFAULT_SEGMENTS_PER_PLACE: usize = 6;

// Stream selectors mixed into the seed so world and traverse draws never
// share a ChaCha stream.
const WORLD_STREAM: u64 = 0x5749_4f52_4c44;
const TRAVERSE_STREAM: u64 = 0x5452_4156;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `[0, 1)` with 53 random bits.
fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    ((uniform(rng) * n as f64) as usize).min(n - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    pub seed: u64,
    pub n_places: usize,
    pub width: u16,
    pub height: u16,
    pub segments_per_place: usize,
    pub edge_rate: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_places: 40,
            width: 64,
            height: 48,
            segments_per_place: DEFAULT_SEGMENTS_PER_PLACE,
            edge_rate: DEFAULT_EDGE_RATE,
        }
    }
}

impl WorldParams {
    pub fn geometry(&self) -> Result<SensorGeometry> {
        SensorGeometry::new(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.n_places < 2 {
            return Err(config("a synthetic world needs at least 2 places"));
        }
        if self.segments_per_place == 0 {
            return Err(config("segments_per_place must be at least 1"));
        }
        if !(self.edge_rate > 0.0 && self.edge_rate.is_finite()) {
            return Err(config("edge_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub geometry: SensorGeometry,
    /// Per place, per pixel (row-major) event intensity in events/s.
    pub place_patterns: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    pub fn n_places(&self) -> usize {
        self.place_patterns.len()
    }
}

/// A world with the default segment count and edge rate.
pub fn generate_world(
    seed: u64,
    n_places: usize,
    geometry: SensorGeometry,
) -> Result<SyntheticWorld> {
    generate_world_with(&WorldParams {
        seed,
        n_places,
        width: geometry.width(),
        height: geometry.height(),
        ..WorldParams::default()
    })
}

pub fn generate_world_with(params: &WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    let geometry = params.geometry()?;
    let (w, h) = (geometry.width() as usize, geometry.height() as usize);
    let mut rng = rng_for(params.seed, WORLD_STREAM);
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(params.n_places);
    while patterns.len() < params.n_places {
        let mut map = vec![0.0; w * h];
        for _ in 0..params.segments_per_place {
            let (x0, y0) = (below(&mut rng, w), below(&mut rng, h));
            let (x1, y1) = (below(&mut rng, w), below(&mut rng, h));
            rasterize(x0 as i64, y0 as i64, x1 as i64, y1 as i64, |x, y| {
                map[y * w + x] = params.edge_rate;
            });
        }
        // Redraw on the (unlikely) event of a repeated map.
        if !patterns.contains(&map) {
            patterns.push(map);
        }
    }
    Ok(SyntheticWorld {
        seed: params.seed,
        geometry,
        place_patterns: patterns,
    })
}

/// Bresenham line, endpoints included.
fn rasterize(mut x0: i64, mut y0: i64, x1: i64, y1: i64, mut plot: impl FnMut(usize, usize)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x0 as usize, y0 as usize);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraverseParams {
    pub seed: u64,
    pub dwell_s: f64,
    pub rate_scale: f64,
    /// Background events per pixel per second.
    pub noise_rate: f64,
    pub dropout: f64,
}

impl Default for TraverseParams {
    fn default() -> Self {
        Self {
            seed: 0,
            dwell_s: 2.0,
            rate_scale: 1.0,
            noise_rate: 0.0,
            dropout: 0.0,
        }
    }
}

impl TraverseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dwell_s > 0.0 && self.dwell_s.is_finite()) {
            return Err(config("dwell_s must be positive"));
        }
        // Zero is accepted and silences the place patterns.
        if !(self.rate_scale >= 0.0 && self.rate_scale.is_finite()) {
            return Err(config("rate_scale must be non-negative"));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return Err(config("noise_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn dwell_us(&self) -> f64 {
        self.dwell_s * 1e6
    }
}

/// Generated events plus the time of each place center.
#[derive(Debug, Clone, PartialEq)]
pub struct Traverse {
    pub stream: EventStream,
    pub place_centers_us: Vec<u64>,
}

/// Visits every place for `dwell_s`, drawing events at intensity
/// `rate_scale * pattern + noise_rate` per pixel.
///
/// The per-place process is sampled as one Poisson stream at the summed
/// rate with each event assigned to a pixel in proportion to its
/// intensity, which is equivalent to independent per-pixel processes.
/// Dropout is decided per event after it is drawn, so streams that differ
/// only in dropout keep a common subsequence.
pub fn generate_traverse(world: &SyntheticWorld, params: &TraverseParams) -> Result<Traverse> {
    params.validate()?;
    let rate_scale = params.rate_scale;
    let geometry = world.geometry;
    let w = geometry.width() as usize;
    let dwell_us = params.dwell_us();
    let mut rng = rng_for(params.seed, TRAVERSE_STREAM);
    let mut events = Vec::new();
    let mut centers = Vec::with_capacity(world.n_places());
    let mut cumulative = vec![0.0; geometry.pixel_count()];

    for (place, pattern) in world.place_patterns.iter().enumerate() {
        let start = place as f64 * dwell_us;
        let end = start + dwell_us;
        centers.push((start + dwell_us / 2.0).floor() as u64);

        let mut total = 0.0;
        for (c, &p) in cumulative.iter_mut().zip(pattern) {
            total += rate_scale * p + params.noise_rate;
            *c = total;
        }
        if total <= 0.0 {
            continue;
        }
        let rate_per_us = total / 1e6;
        let mut t = start;
        loop {
            t += -libm::log(1.0 - uniform(&mut rng)) / rate_per_us;
            if t >= end {
                break;
            }
            let target = uniform(&mut rng) * total;
            let px = cumulative
                .partition_point(|&c| c <= target)
                .min(cumulative.len() - 1);
            let polarity = if rng.next_u32() & 1 == 1 {
                Polarity::On
            } else {
                Polarity::Off
            };
            let keep = uniform(&mut rng) >= params.dropout;
            if keep {
                events.push(Event::new(
                    t.floor() as u64,
                    (px % w) as u16,
                    (px / w) as u16,
                    polarity,
                ));
            }
        }
    }
    Ok(Traverse {
        stream: EventStream::new(geometry, events)?,
        place_centers_us: centers,
    })
}

/// Pairs the place centers of a query and a reference traverse.
pub fn ground_truth_between(query: &Traverse, reference: &Traverse) -> Result<GroundTruth> {
    GroundTruth::new(
        query
            .place_centers_us
            .iter()
            .zip(&reference.place_centers_us)
            .map(|(&q, &r)| GtPair {
                query_t_us: q,
                ref_t_us: r as f64,
            })
            .collect(),
    )
}

/// Expected number of emitted events, `sum(intensity) * duration * (1 - dropout)`.
pub fn expected_event_count(world: &SyntheticWorld, params: &TraverseParams) -> f64 {
    let per_place: f64 = world
        .place_patterns
        .iter()
        .map(|p| {
            p.iter()
                .map(|&v| params.rate_scale * v + params.noise_rate)
                .sum::<f64>()
        })
        .sum();
    per_place * params.dwell_s * (1.0 - params.dropout)
}

/// A world and the two traverses drawn from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub world: WorldParams,
    pub reference: TraverseParams,
    pub query: TraverseParams,
}

impl Default for SyntheticConfig {
    /// The committed benchmark setting: 40 places, a clean reference and a
    /// dimmer, noisier, lossier query driven at a different pace.
    fn default() -> Self {
        Self {
            world: WorldParams::default(),
            reference: TraverseParams {
                seed: 1,
                dwell_s: 2.0,
                rate_scale: 1.0,
                noise_rate: 0.5,
                dropout: 0.0,
            },
            query: TraverseParams {
                seed: 2,
                dwell_s: 2.5,
                rate_scale: 0.6,
                noise_rate: 2.0,
                dropout: 0.2,
            },
        }
    }
}

impl SyntheticConfig {
    /// The same setting with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.reference.seed = seed.wrapping_mul(2).wrapping_add(1);
        self.query.seed = seed.wrapping_mul(2).wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reference.validate()?;
        self.query.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub world: SyntheticWorld,
    pub reference: Traverse,
    pub query: Traverse,
    /// Query place centers paired with reference place centers.
    pub ground_truth: GroundTruth,
}

/// Draws the world, then both traverses concurrently.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let world = generate_world_with(&cfg.world)?;
    let (reference, query) = rayon::join(
        || generate_traverse(&world, &cfg.reference),
        || generate_traverse(&world, &cfg.query),
    );
    let (reference, query) = (reference?, query?);
    let ground_truth = ground_truth_between(&query, &reference)?;
    Ok(SyntheticDataset {
        world,
        reference,
        query,
        ground_truth,
    })
}

/// Precision at 100% recall of every member, the fused matrix and the
/// approximate ensemble on one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub member_labels: Vec<String>,
    pub member_precisions: Vec<f64>,
    pub ensemble_precision: f64,
    pub approximate_precision: Option<f64>,
    pub output: PipelineOutput,
}

impl ExperimentReport {
    pub fn best_member(&self) -> f64 {
        self.member_precisions
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn member_mean(&self) -> f64 {
        self.member_precisions.iter().sum::<f64>() / self.member_precisions.len() as f64
    }
}

pub fn run_synthetic_experiment(
    cfg: &SyntheticConfig,
    params: &PipelineParams,
) -> Result<ExperimentReport> {
    params.validate()?;
    let data = generate_dataset(cfg)?;
    let output = run_on_streams(
        &data.query.stream,
        &data.reference.stream,
        &data.ground_truth,
        params,
    )?;
    Ok(ExperimentReport {
        member_labels: output
            .members
            .iter()
            .map(|m| m.matrix.label().to_string())
            .collect(),
        member_precisions: output.member_precisions(),
        ensemble_precision: output.ensemble.full_recall.precision,
        approximate_precision: output.approximate.as_ref().map(|a| a.full_recall.precision),
        output,
    })
}
