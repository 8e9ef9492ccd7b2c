//! Event records, sensor geometry and validated event streams.
//!
//! Timestamps are integer microseconds throughout. Polarity is normalized to
//! `-1`/`+1` at the boundary so downstream code never sees other encodings.

mod csv;
mod filters;

pub use self::csv::{parse_event_csv, read_event_csv, write_event_csv};
pub use self::filters::{filter_bursts, remove_hot_pixels, HotPixelReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Brightness-change direction of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    /// `-1` for [`Polarity::Off`], `+1` for [`Polarity::On`].
    #[inline]
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Off => -1,
            Polarity::On => 1,
        }
    }

    /// Accepts both the `{0, 1}` and the `{-1, 1}` encodings.
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            -1 | 0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }
}

/// A single brightness-change record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Sensor resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorGeometry {
    width: u16,
    height: u16,
}

impl SensorGeometry {
    /// DAVIS346 resolution.
    pub const DAVIS346: SensorGeometry = SensorGeometry {
        width: 346,
        height: 260,
    };

    pub fn new(width: u16, height: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "sensor geometry must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn width(&self) -> u16 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u16 {
        self.height
    }

    /// `W * H`.
    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn contains(&self, x: u64, y: u64) -> bool {
        x < self.width as u64 && y < self.height as u64
    }

    /// Row-major pixel index of `(x, y)`.
    #[inline]
    pub fn index(&self, x: u16, y: u16) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

/// A time-ordered sequence of events from one sensor.
///
/// Construction validates bounds and ordering; the stream is immutable
/// afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    geometry: SensorGeometry,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self> {
        let mut previous = None;
        for (i, e) in events.iter().enumerate() {
            let line = i + 1;
            if !geometry.contains(e.x as u64, e.y as u64) {
                return Err(Error::OutOfBounds {
                    line,
                    x: e.x as u64,
                    y: e.y as u64,
                    width: geometry.width,
                    height: geometry.height,
                });
            }
            if let Some(prev) = previous {
                if e.t < prev {
                    return Err(Error::Unordered {
                        line,
                        t: e.t,
                        previous: prev,
                    });
                }
            }
            previous = Some(e.t);
        }
        Ok(Self { geometry, events })
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        Self {
            geometry,
            events: Vec::new(),
        }
    }

    /// Keeps the events for which `keep` returns true. The result is a
    /// subsequence of `self`, so no revalidation is needed.
    pub(crate) fn retain_subsequence(&self, mut keep: impl FnMut(usize, &Event) -> bool) -> Self {
        let events = self
            .events
            .iter()
            .enumerate()
            .filter(|(i, e)| keep(*i, e))
            .map(|(_, e)| *e)
            .collect();
        Self {
            geometry: self.geometry,
            events,
        }
    }

    #[inline]
    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    #[inline]
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.events.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_t(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}
