//! Non-overlapping temporal windows over an event stream.
//!
//! A window family is produced by one [`WindowSpec`]: either a fixed number
//! of events per window or a fixed time span. A [`WindowSet`] holds several
//! families side by side; each family later becomes one ensemble member.
//! Because families cut the stream differently, they are brought to common
//! sample instants with [`align_to_time`].

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::events::{EventStream, SensorGeometry};

/// Normalized window sizes `N / (W * H)` used as the default count grid.
pub const DEFAULT_NORMALIZED_COUNTS: [f64; 4] = [0.1, 0.3, 0.6, 0.8];

/// Default time spans in microseconds (44, 66, 88, 120 and 140 ms).
pub const DEFAULT_SPANS_US: [u64; 5] = [44_000, 66_000, 88_000, 120_000, 140_000];

/// Default sampling interval: one sample per second.
pub const DEFAULT_SAMPLE_INTERVAL_US: u64 = 1_000_000;

/// How a family cuts the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowSpec {
    /// Exactly `N` events per window.
    FixedCount(usize),
    /// Windows spanning `tau` microseconds.
    FixedTime(u64),
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSpec::FixedCount(n) => write!(f, "count-{n}"),
            WindowSpec::FixedTime(tau) => write!(f, "time-{tau}us"),
        }
    }
}

/// A window size given either as an absolute event count or normalized by
/// the sensor resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CountSpec {
    Absolute(usize),
    Normalized(f64),
}

impl CountSpec {
    pub fn resolve(self, geometry: SensorGeometry) -> Result<usize> {
        match self {
            CountSpec::Absolute(0) => Err(config("fixed-count window size must be at least 1")),
            CountSpec::Absolute(n) => Ok(n),
            CountSpec::Normalized(n) => normalized_count(n, geometry),
        }
    }
}

/// One window: a half-open index range into the parent stream and the time
/// interval it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub spec: WindowSpec,
    pub start_idx: usize,
    pub end_idx: usize,
    pub t_start_us: u64,
    /// Exclusive.
    pub t_end_us: u64,
}

impl Window {
    #[inline]
    pub fn len(&self) -> usize {
        self.end_idx - self.start_idx
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.start_idx == self.end_idx
    }
}

/// All windows produced by one spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Family {
    pub spec: WindowSpec,
    pub windows: Vec<Window>,
}

/// The windows of every ensemble member, count families first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub families: Vec<Family>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn specs(&self) -> Vec<WindowSpec> {
        self.families.iter().map(|f| f.spec).collect()
    }
}

/// Cuts the stream into `floor(n / N)` windows of exactly `N` events. The
/// trailing `n mod N` events are dropped.
pub fn split_fixed_count(stream: &EventStream, n: usize) -> Result<Vec<Window>> {
    if n == 0 {
        return Err(config("fixed-count window size must be at least 1"));
    }
    let events = stream.events();
    let spec = WindowSpec::FixedCount(n);
    Ok((0..events.len() / n)
        .map(|k| {
            let (start, end) = (k * n, (k + 1) * n);
            Window {
                spec,
                start_idx: start,
                end_idx: end,
                t_start_us: events[start].t,
                t_end_us: events[end - 1].t + 1,
            }
        })
        .collect())
}

/// Cuts the stream into consecutive `[t0 + k*tau, t0 + (k+1)*tau)` windows,
/// `t0` being the first event's timestamp. Windows run through the last
/// event; empty windows are kept so indices stay linear in time.
pub fn split_fixed_time(stream: &EventStream, tau_us: u64) -> Result<Vec<Window>> {
    if tau_us == 0 {
        return Err(config("fixed-time window span must be at least 1 us"));
    }
    let events = stream.events();
    let (Some(t0), Some(t_last)) = (stream.first_t(), stream.last_t()) else {
        return Ok(Vec::new());
    };
    let spec = WindowSpec::FixedTime(tau_us);
    let count = (t_last - t0) / tau_us + 1;
    let mut windows = Vec::with_capacity(count as usize);
    let mut idx = 0;
    for k in 0..count {
        let t_start = t0 + k * tau_us;
        let t_end = t_start + tau_us;
        let start = idx;
        while idx < events.len() && events[idx].t < t_end {
            idx += 1;
        }
        windows.push(Window {
            spec,
            start_idx: start,
            end_idx: idx,
            t_start_us: t_start,
            t_end_us: t_end,
        });
    }
    Ok(windows)
}

/// Converts a normalized window size to an event count: `round(N~ * W * H)`,
/// rounding half away from zero, at least 1.
pub fn normalized_count(n_tilde: f64, geometry: SensorGeometry) -> Result<usize> {
    if !(n_tilde > 0.0 && n_tilde <= 1.0) {
        return Err(config(format!(
            "normalized window size must lie in (0, 1], got {n_tilde}"
        )));
    }
    let n = (n_tilde * geometry.pixel_count() as f64).round() as usize;
    Ok(n.max(1))
}

/// Splits `stream` once per requested size. Families are independent and
/// computed in parallel; the output order is `counts` then `spans`.
pub fn build_window_set(
    stream: &EventStream,
    counts: &[CountSpec],
    spans_us: &[u64],
) -> Result<WindowSet> {
    if counts.is_empty() && spans_us.is_empty() {
        return Err(config("at least one window size is required"));
    }
    let mut specs = Vec::with_capacity(counts.len() + spans_us.len());
    for c in counts {
        specs.push(WindowSpec::FixedCount(c.resolve(stream.geometry())?));
    }
    specs.extend(spans_us.iter().map(|&tau| WindowSpec::FixedTime(tau)));

    let families = specs
        .into_par_iter()
        .map(|spec| {
            let windows = match spec {
                WindowSpec::FixedCount(n) => split_fixed_count(stream, n)?,
                WindowSpec::FixedTime(tau) => split_fixed_time(stream, tau)?,
            };
            Ok(Family { spec, windows })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowSet { families })
}

/// Returns the index of the window that holds the event closest in time to
/// `t_star_us`. Equidistant events resolve to the earlier one, so a `t*`
/// past the last event lands in the last non-empty window.
pub fn align_to_time(family: &[Window], stream: &EventStream, t_star_us: u64) -> Result<usize> {
    let events = stream.events();
    let nonempty: Vec<usize> = (0..family.len())
        .filter(|&i| !family[i].is_empty())
        .collect();
    if nonempty.is_empty() {
        let label = family
            .first()
            .map(|w| w.spec.to_string())
            .unwrap_or_else(|| "<empty>".to_string());
        return Err(Error::Alignment(label));
    }
    let t_of = |w: usize, i: usize| events[family[w].start_idx + i].t;
    let last_t = |w: usize| events[family[w].end_idx - 1].t;

    // First covered event with timestamp >= t, as (position in `nonempty`, offset in window).
    let first_at_or_after = |t: u64| -> Option<(usize, usize)> {
        let pos = nonempty.partition_point(|&w| last_t(w) < t);
        let &w = nonempty.get(pos)?;
        let evs = &events[family[w].start_idx..family[w].end_idx];
        Some((pos, evs.partition_point(|e| e.t < t)))
    };

    let up = first_at_or_after(t_star_us);
    let below_t = match up {
        Some((0, 0)) => None,
        Some((pos, 0)) => Some(last_t(nonempty[pos - 1])),
        Some((pos, off)) => Some(t_of(nonempty[pos], off - 1)),
        None => Some(last_t(*nonempty.last().unwrap())),
    };

    let chosen = match (below_t, up) {
        (Some(tb), Some((pos, off))) => {
            let t_up = t_of(nonempty[pos], off);
            if t_star_us - tb <= t_up - t_star_us {
                first_at_or_after(tb).unwrap().0
            } else {
                pos
            }
        }
        (Some(tb), None) => first_at_or_after(tb).unwrap().0,
        (None, Some((pos, _))) => pos,
        (None, None) => unreachable!("family has at least one event"),
    };
    Ok(nonempty[chosen])
}

/// Sample instants `t0, t0 + dt, ...` up to the last event.
pub fn sample_grid(stream: &EventStream, dt_us: u64) -> Result<Vec<u64>> {
    if dt_us == 0 {
        return Err(config("sample interval must be at least 1 us"));
    }
    let (Some(t0), Some(t_last)) = (stream.first_t(), stream.last_t()) else {
        return Ok(Vec::new());
    };
    Ok((0..=(t_last - t0) / dt_us)
        .map(|k| t0 + k * dt_us)
        .collect())
}
