//! Event streams and their two on-disk formats.
//!
//! CSV: a `t,x,y,p` header followed by one event per line.
//!
//! Packed binary, all little-endian:
//!
//! ```text
//! offset 0   magic  b"CPDE"
//! offset 4   u8     version (1)
//! offset 5   u16    sensor width
//! offset 7   u16    sensor height
//! offset 9   records of 9 bytes: u32 t_us, u16 x, u16 y, u8 p
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPDE";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;
const RECORD_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// Polarity, 0 or 1.
    pub p: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u16,
    pub height: u16,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Packed,
}

impl EventFormat {
    /// Guesses the format from the leading bytes.
    pub fn sniff(bytes: &[u8]) -> EventFormat {
        if bytes.starts_with(MAGIC) {
            EventFormat::Packed
        } else {
            EventFormat::Csv
        }
    }
}

impl EventStream {
    pub fn new(width: u16, height: u16) -> Self {
        EventStream {
            events: Vec::new(),
            width,
            height,
            label: None,
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }

    pub fn in_bounds(&self) -> bool {
        self.events.iter().all(|e| e.x < self.width && e.y < self.height && e.p <= 1)
    }

    /// Stable sort by timestamp.
    pub fn sort(&mut self) {
        self.events.sort_by_key(|e| e.t);
    }
}

fn check_event(e: &Event, width: u16, height: u16, line: usize) -> Result<()> {
    if e.x >= width || e.y >= height {
        return Err(Error::Parse {
            line,
            msg: format!("coordinate ({}, {}) outside a {width}x{height} sensor", e.x, e.y),
        });
    }
    if e.p > 1 {
        return Err(Error::Parse {
            line,
            msg: format!("polarity {} is not 0 or 1", e.p),
        });
    }
    Ok(())
}

/// Parses CSV events for a `width x height` sensor. The `t,x,y,p` header
/// line is optional. Line numbers in errors are 1-based.
pub fn parse_csv(text: &str, width: u16, height: u16) -> Result<EventStream> {
    let mut stream = EventStream::new(width, height);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if i == 0 && rec.iter().eq(["t", "x", "y", "p"]) {
            continue;
        }
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields t,x,y,p, found {}", rec.len()),
            });
        }
        let bad = |name: &str, v: &str| Error::Parse {
            line,
            msg: format!("invalid {name} {v:?}"),
        };
        let e = Event {
            t: rec[0].parse().map_err(|_| bad("timestamp", &rec[0]))?,
            x: rec[1].parse().map_err(|_| bad("x", &rec[1]))?,
            y: rec[2].parse().map_err(|_| bad("y", &rec[2]))?,
            p: rec[3].parse().map_err(|_| bad("polarity", &rec[3]))?,
        };
        check_event(&e, width, height, line)?;
        stream.events.push(e);
    }
    stream.sort();
    Ok(stream)
}

/// Parses the packed binary format. Errors report the 1-based record index
/// as the line number (0 for the header).
pub fn parse_packed(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Parse {
            line: 0,
            msg: "missing CPDE header".into(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 0,
            msg: format!("unsupported version {}", bytes[4]),
        });
    }
    let width = u16::from_le_bytes([bytes[5], bytes[6]]);
    let height = u16::from_le_bytes([bytes[7], bytes[8]]);
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Parse {
            line: body.len() / RECORD_LEN + 1,
            msg: format!("truncated record ({} trailing bytes)", body.len() % RECORD_LEN),
        });
    }
    let mut stream = EventStream::new(width, height);
    stream.events.reserve(body.len() / RECORD_LEN);
    for (i, r) in body.chunks_exact(RECORD_LEN).enumerate() {
        let e = Event {
            t: u32::from_le_bytes([r[0], r[1], r[2], r[3]]) as u64,
            x: u16::from_le_bytes([r[4], r[5]]),
            y: u16::from_le_bytes([r[6], r[7]]),
            p: r[8],
        };
        check_event(&e, width, height, i + 1)?;
        stream.events.push(e);
    }
    stream.sort();
    Ok(stream)
}

/// Parses either format. `width`/`height` are only used by CSV, which does
/// not carry the sensor extent.
pub fn parse_events(bytes: &[u8], format: EventFormat, width: u16, height: u16) -> Result<EventStream> {
    match format {
        EventFormat::Packed => parse_packed(bytes),
        EventFormat::Csv => {
            let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
                line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
                msg: "invalid UTF-8".into(),
            })?;
            parse_csv(text, width, height)
        }
    }
}

pub fn to_csv(stream: &EventStream) -> String {
    let mut s = String::with_capacity(16 * stream.events.len() + 8);
    s.push_str("t,x,y,p\n");
    for e in &stream.events {
        let _ = writeln!(s, "{},{},{},{}", e.t, e.x, e.y, e.p);
    }
    s
}

pub fn to_packed(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.events.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    for e in &stream.events {
        let t = u32::try_from(e.t)
            .map_err(|_| Error::invalid(format!("timestamp {} does not fit the packed format", e.t)))?;
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p);
    }
    Ok(out)
}
