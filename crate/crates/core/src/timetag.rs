//! Detector time tags, gating plans and their on-disk formats.
//!
//! # Binary tag format
//!
//! A file is a sequence of 8-byte little-endian records. Bits 0..=62 hold the
//! tick (125 ps units) and bit 63 the channel: 0 = signal, 1 = idler. Ticks
//! must be non-decreasing through the file. There is no header.
//!
//! # CSV tag format
//!
//! One `tick,channel` record per line with `channel` ∈ {`S`, `I`}. A leading
//! `tick,channel` header line is optional.
//!
//! # Gating sidecar
//!
//! One `start_tick end_tick` pair per line (half-open, end exclusive). Blank
//! lines and lines starting with `#` are ignored.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Duration of one tick, seconds.
pub const TICK_SECONDS: f64 = 125e-12;
/// Largest representable tick.
pub const MAX_TICK: u64 = (1 << 63) - 1;
const CHANNEL_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Signal,
    Idler,
}

impl Channel {
    pub fn letter(self) -> char {
        match self {
            Channel::Signal => 'S',
            Channel::Idler => 'I',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimestampRecord {
    pub tick: u64,
    pub channel: Channel,
}

impl TimestampRecord {
    pub fn new(tick: u64, channel: Channel) -> Self {
        Self { tick, channel }
    }

    pub fn encode(&self) -> [u8; 8] {
        let flag = match self.channel {
            Channel::Signal => 0,
            Channel::Idler => CHANNEL_BIT,
        };
        ((self.tick & MAX_TICK) | flag).to_le_bytes()
    }

    pub fn decode(bytes: [u8; 8]) -> Self {
        let raw = u64::from_le_bytes(bytes);
        let channel = if raw & CHANNEL_BIT == 0 {
            Channel::Signal
        } else {
            Channel::Idler
        };
        Self {
            tick: raw & MAX_TICK,
            channel,
        }
    }
}

/// An ordered sequence of detector events. Order is not enforced on
/// construction; consumers that need it check [`TimestampStream::is_sorted`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimestampStream {
    pub records: Vec<TimestampRecord>,
}

impl TimestampStream {
    pub fn new(records: Vec<TimestampRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of the first record whose tick is smaller than its predecessor's.
    pub fn first_unsorted(&self) -> Option<usize> {
        self.records
            .windows(2)
            .position(|w| w[1].tick < w[0].tick)
            .map(|i| i + 1)
    }

    pub fn is_sorted(&self) -> bool {
        self.first_unsorted().is_none()
    }

    pub fn count(&self, channel: Channel) -> usize {
        self.records.iter().filter(|r| r.channel == channel).count()
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.records.iter().map(|r| r.tick).max()
    }

    /// Every tick shifted by `offset` (used for translation tests).
    pub fn shifted(&self, offset: u64) -> Self {
        Self::new(
            self.records
                .iter()
                .map(|r| TimestampRecord::new(r.tick + offset, r.channel))
                .collect(),
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatingError {
    #[error("gating plan has no active time")]
    Empty,
    #[error("gate {index} is empty or reversed: [{start}, {end})")]
    Reversed { index: usize, start: u64, end: u64 },
    #[error("gate {index} starts at {start} before the previous gate ends at {previous_end}")]
    Overlapping {
        index: usize,
        start: u64,
        previous_end: u64,
    },
}

/// Half-open tick windows `[start, end)` during which the source is active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingPlan {
    windows: Vec<(u64, u64)>,
}

impl GatingPlan {
    pub fn new(windows: Vec<(u64, u64)>) -> Result<Self, GatingError> {
        if windows.is_empty() {
            return Err(GatingError::Empty);
        }
        for (index, &(start, end)) in windows.iter().enumerate() {
            if end <= start {
                return Err(GatingError::Reversed { index, start, end });
            }
            if index > 0 {
                let previous_end = windows[index - 1].1;
                if start < previous_end {
                    return Err(GatingError::Overlapping {
                        index,
                        start,
                        previous_end,
                    });
                }
            }
        }
        Ok(Self { windows })
    }

    /// One window covering every event of `stream`.
    pub fn always_active(stream: &TimestampStream) -> Result<Self, GatingError> {
        match stream.last_tick() {
            Some(last) => Self::new(vec![(0, last + 1)]),
            None => Err(GatingError::Empty),
        }
    }

    pub fn windows(&self) -> &[(u64, u64)] {
        &self.windows
    }

    pub fn total_active_ticks(&self) -> u64 {
        self.windows.iter().map(|(s, e)| e - s).sum()
    }

    /// Total active time, seconds.
    pub fn total_active_time(&self) -> f64 {
        self.total_active_ticks() as f64 * TICK_SECONDS
    }

    pub fn contains(&self, tick: u64) -> bool {
        let idx = self.windows.partition_point(|&(_, end)| end <= tick);
        self.windows
            .get(idx)
            .is_some_and(|&(start, end)| start <= tick && tick < end)
    }

    pub fn shifted(&self, offset: u64) -> Self {
        Self {
            windows: self
                .windows
                .iter()
                .map(|(s, e)| (s + offset, e + offset))
                .collect(),
        }
    }

    /// Cursor for membership queries with non-decreasing ticks.
    pub fn cursor(&self) -> GateCursor<'_> {
        GateCursor {
            windows: &self.windows,
            index: 0,
        }
    }
}

/// Linear-time gate lookup for sorted ticks.
pub struct GateCursor<'a> {
    windows: &'a [(u64, u64)],
    index: usize,
}

impl GateCursor<'_> {
    pub fn contains(&mut self, tick: u64) -> bool {
        while self.index < self.windows.len() && self.windows[self.index].1 <= tick {
            self.index += 1;
        }
        self.windows
            .get(self.index)
            .is_some_and(|&(start, _)| start <= tick)
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("truncated record at byte offset {offset}: file length is not a multiple of 8")]
    Truncated { offset: u64 },
    #[error("tick decreases at byte offset {offset} ({tick} after {previous})")]
    Unsorted {
        offset: u64,
        tick: u64,
        previous: u64,
    },
    #[error("malformed line at byte offset {offset}: {reason}")]
    BadLine { offset: u64, reason: String },
    #[error(transparent)]
    Gating(#[from] GatingError),
}

pub fn write_binary<W: Write>(w: W, stream: &TimestampStream) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    for r in &stream.records {
        w.write_all(&r.encode())?;
    }
    w.flush()
}

pub fn read_binary<R: Read>(r: R) -> Result<TimestampStream, FormatError> {
    let mut r = BufReader::new(r);
    let mut records = Vec::new();
    let mut offset = 0u64;
    let mut buf = [0u8; 8];
    loop {
        let mut filled = 0;
        while filled < 8 {
            let n = r.read(&mut buf[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            break;
        }
        if filled < 8 {
            return Err(FormatError::Truncated { offset });
        }
        let rec = TimestampRecord::decode(buf);
        if let Some(prev) = records.last().map(|p: &TimestampRecord| p.tick) {
            if rec.tick < prev {
                return Err(FormatError::Unsorted {
                    offset,
                    tick: rec.tick,
                    previous: prev,
                });
            }
        }
        records.push(rec);
        offset += 8;
    }
    Ok(TimestampStream::new(records))
}

pub fn write_csv<W: Write>(w: W, stream: &TimestampStream) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "tick,channel")?;
    for r in &stream.records {
        writeln!(w, "{},{}", r.tick, r.channel.letter())?;
    }
    w.flush()
}

/// Calls `f(byte_offset, trimmed_line)` for every non-blank, non-comment line.
fn for_each_line<R: Read, F>(r: R, mut f: F) -> Result<(), FormatError>
where
    F: FnMut(u64, &str) -> Result<(), FormatError>,
{
    let mut r = BufReader::new(r);
    let mut offset = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            f(offset, t)?;
        }
        offset += n as u64;
    }
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<TimestampStream, FormatError> {
    let mut records: Vec<TimestampRecord> = Vec::new();
    let mut first = true;
    for_each_line(r, |offset, line| {
        let is_header = first && line.eq_ignore_ascii_case("tick,channel");
        first = false;
        if is_header {
            return Ok(());
        }
        let bad = |reason: String| FormatError::BadLine { offset, reason };
        let (tick, chan) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected `tick,channel`, got `{line}`")))?;
        let tick: u64 = tick
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad tick `{}`: {e}", tick.trim())))?;
        if tick > MAX_TICK {
            return Err(bad(format!("tick {tick} exceeds 63 bits")));
        }
        let channel = match chan.trim() {
            "S" | "s" => Channel::Signal,
            "I" | "i" => Channel::Idler,
            other => return Err(bad(format!("unknown channel `{other}`"))),
        };
        if let Some(prev) = records.last() {
            if tick < prev.tick {
                return Err(FormatError::Unsorted {
                    offset,
                    tick,
                    previous: prev.tick,
                });
            }
        }
        records.push(TimestampRecord::new(tick, channel));
        Ok(())
    })?;
    Ok(TimestampStream::new(records))
}

pub fn write_gating<W: Write>(w: W, plan: &GatingPlan) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    for (s, e) in plan.windows() {
        writeln!(w, "{s} {e}")?;
    }
    w.flush()
}

pub fn read_gating<R: Read>(r: R) -> Result<GatingPlan, FormatError> {
    let mut windows = Vec::new();
    for_each_line(r, |offset, line| {
        let bad = |reason: String| FormatError::BadLine { offset, reason };
        let mut parts = line.split_whitespace();
        let mut next = |name: &str| -> Result<u64, FormatError> {
            let tok = parts.next().ok_or_else(|| bad(format!("missing {name}")))?;
            tok.parse()
                .map_err(|e| bad(format!("bad {name} `{tok}`: {e}")))
        };
        let start = next("start_tick")?;
        let end = next("end_tick")?;
        if parts.next().is_some() {
            return Err(bad("expected exactly two fields".into()));
        }
        windows.push((start, end));
        Ok(())
    })?;
    Ok(GatingPlan::new(windows)?)
}

/// Reads a tag file, choosing CSV for a `.csv` extension and binary otherwise.
pub fn read_tag_file(path: &Path) -> Result<TimestampStream, FormatError> {
    let f = File::open(path)?;
    if is_csv(path) {
        read_csv(f)
    } else {
        read_binary(f)
    }
}

pub fn write_tag_file(path: &Path, stream: &TimestampStream) -> io::Result<()> {
    let f = File::create(path)?;
    if is_csv(path) {
        write_csv(f, stream)
    } else {
        write_binary(f, stream)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn channel_lives_in_the_top_bit() {
        let r = TimestampRecord::new(5, Channel::Idler);
        assert_eq!(r.encode(), [5, 0, 0, 0, 0, 0, 0, 0x80]);
        let r = TimestampRecord::new(0x0102, Channel::Signal);
        assert_eq!(r.encode(), [2, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut bytes = Vec::new();
        write_binary(
            &mut bytes,
            &TimestampStream::new(vec![TimestampRecord::new(1, Channel::Signal); 3]),
        )
        .unwrap();
        bytes.truncate(21);
        match read_binary(&bytes[..]) {
            Err(FormatError::Truncated { offset }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decreasing_tick_reports_offset() {
        let s = TimestampStream::new(vec![
            TimestampRecord::new(10, Channel::Signal),
            TimestampRecord::new(9, Channel::Idler),
        ]);
        let mut bytes = Vec::new();
        write_binary(&mut bytes, &s).unwrap();
        assert!(matches!(
            read_binary(&bytes[..]),
            Err(FormatError::Unsorted { offset: 8, .. })
        ));
        let csv = "tick,channel\n10,S\n9,I\n";
        assert!(matches!(
            read_csv(csv.as_bytes()),
            Err(FormatError::Unsorted { offset: 18, .. })
        ));
    }

    #[test]
    fn csv_errors_carry_offsets() {
        let csv = "0,S\n4,X\n";
        match read_csv(csv.as_bytes()) {
            Err(FormatError::BadLine { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_csv("12\n".as_bytes()).is_err());
    }

    #[test]
    fn csv_header_is_optional() {
        let a = read_csv("tick,channel\n3,S\n7,I\n".as_bytes()).unwrap();
        let b = read_csv("3,S\n7,I\n".as_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records[1], TimestampRecord::new(7, Channel::Idler));
    }

    #[test]
    fn gating_validation() {
        assert_eq!(GatingPlan::new(vec![]), Err(GatingError::Empty));
        assert!(matches!(
            GatingPlan::new(vec![(5, 5)]),
            Err(GatingError::Reversed { .. })
        ));
        assert!(matches!(
            GatingPlan::new(vec![(0, 10), (5, 20)]),
            Err(GatingError::Overlapping { index: 1, .. })
        ));
        let g = GatingPlan::new(vec![(0, 8), (16, 24)]).unwrap();
        assert_eq!(g.total_active_ticks(), 16);
        assert!((g.total_active_time() - 2e-9).abs() < 1e-24);
        assert!(
            g.contains(0) && g.contains(7) && !g.contains(8) && g.contains(16) && !g.contains(24)
        );
    }

    #[test]
    fn gating_sidecar_parses_comments() {
        let text = "# gates\n0 8\n\n16 24\n";
        let g = read_gating(text.as_bytes()).unwrap();
        assert_eq!(g.windows(), &[(0, 8), (16, 24)]);
        assert!(matches!(
            read_gating("0 8 9\n".as_bytes()),
            Err(FormatError::BadLine { offset: 0, .. })
        ));
        assert!(matches!(
            read_gating("".as_bytes()),
            Err(FormatError::Gating(GatingError::Empty))
        ));
    }

    #[test]
    fn cursor_agrees_with_binary_search() {
        let g = GatingPlan::new(vec![(3, 7), (10, 11), (20, 30)]).unwrap();
        let mut c = g.cursor();
        for t in 0..40 {
            assert_eq!(c.contains(t), g.contains(t), "t={t}");
        }
    }

    proptest! {
        #[test]
        fn binary_and_csv_round_trip(mut ticks in proptest::collection::vec((0u64..MAX_TICK, any::<bool>()), 0..200)) {
            ticks.sort();
            let s = TimestampStream::new(ticks.iter().map(|&(t, i)| TimestampRecord::new(t, if i { Channel::Idler } else { Channel::Signal })).collect());
            let mut bin = Vec::new();
            write_binary(&mut bin, &s).unwrap();
            prop_assert_eq!(bin.len(), 8 * s.len());
            prop_assert_eq!(&read_binary(&bin[..]).unwrap(), &s);
            let mut csv = Vec::new();
            write_csv(&mut csv, &s).unwrap();
            prop_assert_eq!(&read_csv(&csv[..]).unwrap(), &s);
        }
    }
}
