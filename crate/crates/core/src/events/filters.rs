//! Post-processing filters for sensor artifacts: hot pixels and bursts.
//!
//! Both filters only delete events and both are idempotent.

use super::EventStream;
use crate::error::{config, Result};

/// Outcome of [`remove_hot_pixels`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HotPixelReport {
    /// Flagged pixels as `(x, y)`, in row-major order.
    pub pixels: Vec<(u16, u16)>,
    /// Number of events deleted.
    pub removed_events: usize,
}

/// Removes every event of pixels whose event count is anomalously high.
///
/// A pixel is flagged when its count exceeds `mean + sigma_k * stddev` of the
/// per-pixel count distribution over all `W * H` pixels (population
/// statistics). Flagged pixels are zeroed and the statistics recomputed until
/// no further pixel is flagged, so the output is a fixed point of the filter.
/// `sigma_k` may be `f64::INFINITY`, which turns the filter into the identity.
pub fn remove_hot_pixels(
    stream: &EventStream,
    sigma_k: f64,
) -> Result<(EventStream, HotPixelReport)> {
    if sigma_k.is_nan() || sigma_k <= 0.0 {
        return Err(config(format!(
            "hot-pixel sigma_k must be positive, got {sigma_k}"
        )));
    }
    let geometry = stream.geometry();
    let n = geometry.pixel_count();
    let mut counts = vec![0u64; n];
    for e in stream.events() {
        counts[geometry.index(e.x, e.y)] += 1;
    }

    let mut flagged = vec![false; n];
    loop {
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let mean = total / n as f64;
        let var = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let threshold = mean + sigma_k * var.sqrt();

        let mut changed = false;
        for (i, c) in counts.iter_mut().enumerate() {
            if !flagged[i] && (*c as f64) > threshold {
                flagged[i] = true;
                *c = 0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let width = geometry.width() as usize;
    let pixels = flagged
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| ((i % width) as u16, (i / width) as u16))
        .collect();
    let filtered = stream.retain_subsequence(|_, e| !flagged[geometry.index(e.x, e.y)]);
    let report = HotPixelReport {
        pixels,
        removed_events: stream.len() - filtered.len(),
    };
    Ok((filtered, report))
}

/// Deletes every time bin in which more than `frac * W * H` distinct pixels
/// fired.
///
/// Bins are `[k * delta_us, (k + 1) * delta_us)` on the absolute timeline.
pub fn filter_bursts(stream: &EventStream, delta_us: u64, frac: f64) -> Result<EventStream> {
    if delta_us == 0 {
        return Err(config("burst bin width must be positive"));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(config(format!(
            "burst pixel fraction must lie in (0, 1], got {frac}"
        )));
    }
    let geometry = stream.geometry();
    let limit = frac * geometry.pixel_count() as f64;
    let events = stream.events();

    // Per-pixel marker holding the last bin (offset by one) that touched it.
    let mut seen = vec![0u64; geometry.pixel_count()];
    let mut drop = vec![false; events.len()];
    let mut start = 0;
    while start < events.len() {
        let bin = events[start].t / delta_us;
        let mut end = start;
        let mut distinct = 0usize;
        while end < events.len() && events[end].t / delta_us == bin {
            let px = geometry.index(events[end].x, events[end].y);
            if seen[px] != bin + 1 {
                seen[px] = bin + 1;
                distinct += 1;
            }
            end += 1;
        }
        if distinct as f64 > limit {
            drop[start..end].iter_mut().for_each(|d| *d = true);
        }
        start = end;
    }
    Ok(stream.retain_subsequence(|i, _| !drop[i]))
}
