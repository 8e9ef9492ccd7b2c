use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Event, EventStream, Polarity, SensorGeometry};
use crate::error::{Error, Result};

const HEADER: &str = "t,x,y,p";

/// Parses `t_us,x,y,p` rows into a validated stream.
///
/// An optional `t,x,y,p` header on the first line is skipped, blank lines are
/// ignored and both LF and CRLF line endings are accepted. Polarity may use
/// either the `{0,1}` or the `{-1,1}` encoding.
pub fn parse_event_csv<R: BufRead>(source: R, geometry: SensorGeometry) -> Result<EventStream> {
    let mut events = Vec::new();
    let mut previous: Option<u64> = None;

    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let row = line.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        if i == 0 && row.trim() == HEADER {
            continue;
        }

        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let t: u64 = parse_field(fields[0], "t", lineno)?;
        let x: u64 = parse_field(fields[1], "x", lineno)?;
        let y: u64 = parse_field(fields[2], "y", lineno)?;
        let code: i64 = parse_field(fields[3], "p", lineno)?;
        let p = Polarity::from_code(code).ok_or_else(|| Error::Parse {
            line: lineno,
            reason: format!("polarity must be one of -1, 0, 1; found {code}"),
        })?;

        if !geometry.contains(x, y) {
            return Err(Error::OutOfBounds {
                line: lineno,
                x,
                y,
                width: geometry.width(),
                height: geometry.height(),
            });
        }
        if let Some(prev) = previous {
            if t < prev {
                return Err(Error::Unordered {
                    line: lineno,
                    t,
                    previous: prev,
                });
            }
        }
        previous = Some(t);
        events.push(Event::new(t, x as u16, y as u16, p));
    }

    Ok(EventStream { geometry, events })
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        reason: format!("field `{name}` is not a valid integer: {raw:?}"),
    })
}

pub fn read_event_csv(path: &Path, geometry: SensorGeometry) -> Result<EventStream> {
    let file = File::open(path)?;
    parse_event_csv(BufReader::new(file), geometry)
}

/// Writes the header followed by one LF-terminated row per event, with
/// polarity as `-1`/`1`.
pub fn write_event_csv<W: Write>(stream: &EventStream, mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{HEADER}")?;
    for e in stream.events() {
        writeln!(sink, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
    }
    sink.flush()
}
