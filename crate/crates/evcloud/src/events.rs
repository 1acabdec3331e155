//! Raw event streams: loading, windowing, denoising, downsampling, and
//! normalization into fixed-size point samples.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// One sensor event. Timestamps are microseconds.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// Polarity, 0 or 1.
    pub p: u8,
}

/// Time-ordered event recording with sensor geometry.
///
/// Invariants: `t` non-decreasing; every event inside `width` x `height`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

/// One sliding window: inclusive index range into the source stream.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub start_index: usize,
    pub end_index: usize,
    /// Window length in microseconds.
    pub interval_us: u64,
}

/// What a sample is labeled with.
#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(u32),
    /// Translation (meters) then orientation (Euler angles, radians).
    /// Metrics convert angle errors to degrees at report time.
    Pose([f32; 6]),
    /// Pupil center in pixels.
    Pupil([f32; 2]),
}

/// Normalized N x 3 point sample: rows are (x/w, y/h, t scaled to [0,1]),
/// sorted by time with ties broken by original event index.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    coords: Vec<f32>,
    n: usize,
    pub window_id: usize,
    pub label: Option<Label>,
    /// Set when the window had a single distinct timestamp; times are all 0.
    pub degenerate: bool,
}

impl PointSample {
    pub fn new(
        coords: Vec<f32>,
        window_id: usize,
        label: Option<Label>,
        degenerate: bool,
    ) -> Self {
        assert!(coords.len() % 3 == 0, "point sample needs 3 coords per row");
        let n = coords.len() / 3;
        let s = PointSample {
            coords,
            n,
            window_id,
            label,
            degenerate,
        };
        debug_assert!(s.check_invariants(), "point sample invariants violated");
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> [f32; 3] {
        [
            self.coords[i * 3],
            self.coords[i * 3 + 1],
            self.coords[i * 3 + 2],
        ]
    }

    pub fn check_invariants(&self) -> bool {
        if self.coords.len() != self.n * 3 {
            return false;
        }
        let mut prev_t = 0.0f32;
        for i in 0..self.n {
            let p = self.point(i);
            if !p.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return false;
            }
            if p[2] < prev_t {
                return false;
            }
            prev_t = p[2];
        }
        true
    }
}

/// Which problem the labels encode.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Cpr,
    Eye,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "cpr" => Ok(Task::Cpr),
            "eye" => Ok(Task::Eye),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected classify|cpr|eye)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Cpr => "cpr",
            Task::Eye => "eye",
        })
    }
}

/// Windowing + sampling configuration for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub task: Task,
    pub window_us: u64,
    pub overlap_us: u64,
    pub n_points: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.overlap_us >= self.window_us {
            return Err(Error::Config(format!(
                "overlap {}us must be < window {}us",
                self.overlap_us, self.window_us
            )));
        }
        if self.n_points == 0 {
            return Err(Error::Config("n_points must be > 0".into()));
        }
        Ok(())
    }
}

/// On-disk event encodings.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "binary" => Ok(Format::Binary),
            other => Err(Error::Config(format!(
                "unknown format '{other}' (expected csv|binary)"
            ))),
        }
    }
}

pub const EVTB_MAGIC: &[u8; 4] = b"EVTB";
pub const EVTB_VERSION: u32 = 1;
pub const EVTB_RECORD: usize = 14;

impl EventStream {
    /// Build from possibly unordered events; sorts stably by timestamp so
    /// equal-time events keep their input order.
    pub fn from_unordered(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        for e in &events {
            if e.x >= width || e.y >= height {
                return Err(Error::Validation(format!(
                    "event at t={} out of bounds: ({}, {}) on {}x{} sensor",
                    e.t, e.x, e.y, width, height
                )));
            }
            if e.p > 1 {
                return Err(Error::Validation(format!(
                    "event at t={} has polarity {} (want 0 or 1)",
                    e.t, e.p
                )));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    /// Parse `t_us,x,y,p` lines. Lines starting with `#` and blank lines are
    /// skipped. `origin` labels errors (usually the file path).
    pub fn parse_csv(bytes: &[u8], width: u16, height: u16, origin: &str) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::parse(origin, 0, "file is not valid UTF-8"))?;
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |what: &str| {
                fields
                    .next()
                    .map(str::trim)
                    .ok_or_else(|| Error::parse(origin, lineno, format!("missing {what} field")))
            };
            let t: u64 = parse_field(next("t")?, origin, lineno, "t")?;
            let x: u16 = parse_field(next("x")?, origin, lineno, "x")?;
            let y: u16 = parse_field(next("y")?, origin, lineno, "y")?;
            let p: u8 = parse_field(next("p")?, origin, lineno, "p")?;
            if fields.next().is_some() {
                return Err(Error::parse(origin, lineno, "trailing fields after polarity"));
            }
            if p > 1 {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("polarity {p} out of range (want 0 or 1)"),
                ));
            }
            events.push(Event { t, x, y, p });
        }
        Self::from_unordered(width, height, events)
    }

    /// Parse the little-endian binary container (magic `EVTB`).
    pub fn parse_binary(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |off: usize, msg: &str| Error::parse(origin, off, msg);
        if bytes.len() < 24 {
            return Err(err(bytes.len(), "truncated header (need 24 bytes)"));
        }
        if &bytes[0..4] != EVTB_MAGIC {
            return Err(err(0, "bad magic (want EVTB)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != EVTB_VERSION {
            return Err(err(4, &format!("unsupported version {version}")));
        }
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if width == 0 || width > u16::MAX as u32 || height == 0 || height > u16::MAX as u32 {
            return Err(err(8, &format!("bad sensor geometry {width}x{height}")));
        }
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let body = &bytes[24..];
        let expect = (count as usize)
            .checked_mul(EVTB_RECORD)
            .ok_or_else(|| err(16, "record count overflows"))?;
        if body.len() < expect {
            return Err(err(
                24 + body.len(),
                &format!(
                    "truncated body: {count} records need {expect} bytes, have {}",
                    body.len()
                ),
            ));
        }
        if body.len() > expect {
            return Err(err(24 + expect, "trailing bytes after last record"));
        }
        let mut events = Vec::with_capacity(count as usize);
        for i in 0..count as usize {
            let r = &body[i * EVTB_RECORD..(i + 1) * EVTB_RECORD];
            let p = r[12];
            if p > 1 {
                return Err(err(
                    24 + i * EVTB_RECORD + 12,
                    &format!("record {i}: polarity {p} out of range"),
                ));
            }
            events.push(Event {
                t: u64::from_le_bytes(r[0..8].try_into().unwrap()),
                x: u16::from_le_bytes(r[8..10].try_into().unwrap()),
                y: u16::from_le_bytes(r[10..12].try_into().unwrap()),
                p,
            });
        }
        Self::from_unordered(width as u16, height as u16, events)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.events.len() * EVTB_RECORD);
        out.extend_from_slice(EVTB_MAGIC);
        out.extend_from_slice(&EVTB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.p);
            out.push(0);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# t_us,x,y,p\n");
        for e in &self.events {
            s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
        }
        s
    }
}

fn parse_field<T: FromStr>(s: &str, origin: &str, line: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(origin, line, format!("bad {what} value '{s}'")))
}

/// Load a recording. CSV carries no geometry, so `sensor` is required for it;
/// for binary the header's geometry wins and `sensor`, when given, must agree.
pub fn load_events(
    path: impl AsRef<Path>,
    format: Format,
    sensor: Option<(u16, u16)>,
) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    match format {
        Format::Csv => {
            let (w, h) = sensor.ok_or_else(|| {
                Error::Config("csv event input needs sensor geometry (width/height)".into())
            })?;
            EventStream::parse_csv(&bytes, w, h, &origin)
        }
        Format::Binary => {
            let s = EventStream::parse_binary(&bytes, &origin)?;
            if let Some((w, h)) = sensor {
                if (s.width, s.height) != (w, h) {
                    return Err(Error::Validation(format!(
                        "{origin}: header geometry {}x{} != configured {w}x{h}",
                        s.width, s.height
                    )));
                }
            }
            Ok(s)
        }
    }
}

/// Enumerate sliding windows aligned to the first event.
///
/// Slot `i` covers the half-open interval
/// `[t0 + i*(R - overlap), t0 + i*(R - overlap) + R)`; only slots holding at
/// least one event are returned, paired with their slot index.
pub fn slide_windows(stream: &EventStream, r_us: u64, overlap_us: u64) -> Vec<(usize, Window)> {
    assert!(r_us > overlap_us, "window {r_us}us must exceed overlap {overlap_us}us");
    let ev = &stream.events;
    if ev.is_empty() {
        return Vec::new();
    }
    let t0 = ev[0].t;
    let t_last = ev[ev.len() - 1].t;
    let stride = r_us - overlap_us;
    let max_slot = ((t_last - t0) / stride) as usize;
    let mut out = Vec::new();
    for slot in 0..=max_slot {
        let start = t0 + slot as u64 * stride;
        let end = start.saturating_add(r_us);
        let j = ev.partition_point(|e| e.t < start);
        let l = ev.partition_point(|e| e.t < end);
        if l > j {
            let w = Window {
                start_index: j,
                end_index: l - 1,
                interval_us: r_us,
            };
            debug_assert!(ev[w.end_index].t - ev[w.start_index].t <= r_us);
            out.push((slot, w));
        }
    }
    out
}

/// Spatiotemporal neighbor filter: an event survives iff at least
/// `min_neighbors` *other* events lie within Chebyshev distance `radius_px`
/// and time distance `dt_us` (both inclusive). Order is preserved. All
/// arithmetic is integral, so results are exact.
pub fn denoise(
    stream: &EventStream,
    radius_px: u16,
    dt_us: u64,
    min_neighbors: usize,
) -> EventStream {
    assert!(
        radius_px > 0 && dt_us > 0 && min_neighbors > 0,
        "denoise parameters must be positive"
    );
    let ev = &stream.events;
    let n = ev.len();
    let mut keep = Vec::with_capacity(n);
    let mut lo = 0usize;
    let mut hi = 0usize;
    for i in 0..n {
        while ev[i].t - ev[lo].t > dt_us {
            lo += 1;
        }
        if hi < i + 1 {
            hi = i + 1;
        }
        while hi < n && ev[hi].t - ev[i].t <= dt_us {
            hi += 1;
        }
        let mut count = 0usize;
        for j in lo..hi {
            if j == i {
                continue;
            }
            if ev[i].x.abs_diff(ev[j].x) <= radius_px && ev[i].y.abs_diff(ev[j].y) <= radius_px {
                count += 1;
                if count >= min_neighbors {
                    break;
                }
            }
        }
        keep.push(count >= min_neighbors);
    }
    EventStream {
        width: stream.width,
        height: stream.height,
        events: ev
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(e, _)| *e)
            .collect(),
    }
}

/// Choose `n` event indices (into `events`) for one window.
///
/// With at least `n` events: uniform sample without replacement. With fewer:
/// every event is kept and the remainder is drawn with replacement, so no
/// information is discarded. The result is sorted by (t, index); indices may
/// repeat only in the under-full case.
pub fn downsample(events: &[Event], n: usize, seed: u64) -> Vec<u32> {
    assert!(!events.is_empty(), "downsample needs a non-empty window");
    assert!(n > 0);
    let count = events.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<u32> = if count >= n {
        rand::seq::index::sample(&mut rng, count, n)
            .into_iter()
            .map(|i| i as u32)
            .collect()
    } else {
        let mut v: Vec<u32> = (0..count as u32).collect();
        for _ in count..n {
            v.push(rng.gen_range(0..count as u32));
        }
        v
    };
    idx.sort_unstable_by_key(|&i| (events[i as usize].t, i));
    idx
}

/// Normalize sampled events into a point sample: x/w, y/h, and time rescaled
/// by the sampled window's own min/max timestamps. A single distinct
/// timestamp yields all-zero times and sets the degenerate flag.
pub fn normalize(
    events: &[Event],
    sampled: &[u32],
    width: u16,
    height: u16,
    window_id: usize,
    label: Option<Label>,
) -> PointSample {
    assert!(!sampled.is_empty(), "normalize needs sampled indices");
    let t_min = sampled.iter().map(|&i| events[i as usize].t).min().unwrap();
    let t_max = sampled.iter().map(|&i| events[i as usize].t).max().unwrap();
    let degenerate = t_min == t_max;
    let span = (t_max - t_min) as f64;
    let (wf, hf) = (width as f64, height as f64);
    let mut coords = Vec::with_capacity(sampled.len() * 3);
    for &i in sampled {
        let e = &events[i as usize];
        coords.push((e.x as f64 / wf) as f32);
        coords.push((e.y as f64 / hf) as f32);
        let tn = if degenerate {
            0.0
        } else {
            ((e.t - t_min) as f64 / span) as f32
        };
        coords.push(tn);
    }
    PointSample::new(coords, window_id, label, degenerate)
}
