//! On-disk dataset layout: a directory of per-window event files plus a
//! `manifest.csv` naming each file and its label. Loading runs the full
//! pipeline (denoise -> downsample -> normalize -> stage geometry).

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{self, Event, EventStream, Label, EVTB_MAGIC};
use crate::model::{fnv1a64, PreparedSample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.csv";

pub const DENOISE_RADIUS_PX: u16 = 2;
pub const DENOISE_DT_US: u64 = 5_000;
pub const DENOISE_MIN_NEIGHBORS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory, forward slashes.
    pub path: String,
    pub label: Label,
}

/// Parse manifest text. One `path,kind,...` line per sample; `#` comments and
/// blank lines are skipped. Errors carry 1-based line numbers.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::parse("manifest", lineno, "want `path,kind,...`"));
        }
        let path = fields[0].to_string();
        if path.is_empty() {
            return Err(Error::parse("manifest", lineno, "empty path"));
        }
        if Path::new(&path).is_absolute() || path.split('/').any(|c| c == "..") {
            return Err(Error::parse(
                "manifest",
                lineno,
                "path must be relative and not escape the dataset directory",
            ));
        }
        let want_f32s = |fields: &[&str], n: usize| -> Result<Vec<f32>> {
            if fields.len() != n {
                return Err(Error::parse(
                    "manifest",
                    lineno,
                    format!("want {n} numeric fields, got {}", fields.len()),
                ));
            }
            fields
                .iter()
                .map(|f| {
                    f.parse::<f32>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            Error::parse("manifest", lineno, format!("bad number '{f}'"))
                        })
                })
                .collect()
        };
        let label = match fields[1] {
            "class" => {
                if fields.len() != 3 {
                    return Err(Error::parse("manifest", lineno, "want `path,class,<id>`"));
                }
                let id = fields[2].parse::<u32>().map_err(|_| {
                    Error::parse("manifest", lineno, format!("bad class id '{}'", fields[2]))
                })?;
                Label::Class(id)
            }
            "pupil" => {
                let v = want_f32s(&fields[2..], 2)?;
                Label::Pupil([v[0], v[1]])
            }
            "pose" => {
                let v = want_f32s(&fields[2..], 6)?;
                Label::Pose([v[0], v[1], v[2], v[3], v[4], v[5]])
            }
            other => {
                return Err(Error::parse(
                    "manifest",
                    lineno,
                    format!("unknown label kind '{other}'"),
                ))
            }
        };
        entries.push(ManifestEntry { path, label });
    }
    Ok(entries)
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# path,kind,label fields\n");
    for e in entries {
        match &e.label {
            Label::Class(c) => s.push_str(&format!("{},class,{}\n", e.path, c)),
            Label::Pupil(p) => s.push_str(&format!("{},pupil,{},{}\n", e.path, p[0], p[1])),
            Label::Pose(p) => s.push_str(&format!(
                "{},pose,{},{},{},{},{},{}\n",
                e.path, p[0], p[1], p[2], p[3], p[4], p[5]
            )),
        }
    }
    s
}

pub fn write_manifest(dir: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.as_ref().join(MANIFEST_NAME);
    std::fs::write(&path, manifest_text(entries)).map_err(|e| Error::io(&path, e))
}

/// Remove per-window temporal structure for the ablation runs: timestamps
/// are shuffled across the window's events, then events re-sorted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeAblation {
    None,
    PermuteTimestamps,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mpath = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let entries = parse_manifest(&text)?;
        if entries.is_empty() {
            return Err(Error::Validation(format!(
                "manifest {} has no samples",
                mpath.display()
            )));
        }
        Ok(Dataset { dir, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Run every sample through the pipeline and cache its stage geometry.
    pub fn prepare(&self, run: &RunConfig, ablation: TimeAblation) -> Result<Vec<PreparedSample>> {
        let sensor = (run.sensor_width, run.sensor_height);
        let mut out = Vec::with_capacity(self.entries.len());
        for (wid, entry) in self.entries.iter().enumerate() {
            let path = self.dir.join(&entry.path);
            let stream = load_sample_events(&path, sensor)?;
            if stream.events.is_empty() {
                return Err(Error::Validation(format!(
                    "sample {} has no events",
                    path.display()
                )));
            }
            let seed = sample_seed(run.model.seed, &entry.path);
            let sample = pipeline(
                &stream,
                run.model.n_points,
                seed,
                wid,
                Some(entry.label.clone()),
                ablation,
            );
            out.push(PreparedSample::from_sample(&sample, &run.model)?);
        }
        Ok(out)
    }
}

/// Per-sample RNG stream: run seed mixed with the sample's manifest path, so
/// shuffling the manifest or rerunning gives identical samples.
pub fn sample_seed(run_seed: u64, path: &str) -> u64 {
    run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(fnv1a64(path.as_bytes()))
}

/// denoise -> downsample -> (optional time permutation) -> normalize.
pub fn pipeline(
    stream: &EventStream,
    n_points: usize,
    seed: u64,
    window_id: usize,
    label: Option<Label>,
    ablation: TimeAblation,
) -> crate::events::PointSample {
    let cleaned = events::denoise(
        stream,
        DENOISE_RADIUS_PX,
        DENOISE_DT_US,
        DENOISE_MIN_NEIGHBORS,
    );
    // A pathologically sparse window would denoise to nothing; keep the raw
    // events rather than dropping the sample.
    let ev: &[Event] = if cleaned.events.len() >= 8 {
        &cleaned.events
    } else {
        &stream.events
    };
    let sampled = events::downsample(ev, n_points, seed);
    match ablation {
        TimeAblation::None => {
            events::normalize(ev, &sampled, stream.width, stream.height, window_id, label)
        }
        TimeAblation::PermuteTimestamps => {
            let mut picked: Vec<Event> = sampled.iter().map(|&i| ev[i as usize]).collect();
            let mut ts: Vec<u64> = picked.iter().map(|e| e.t).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ab1a);
            ts.shuffle(&mut rng);
            for (e, t) in picked.iter_mut().zip(ts) {
                e.t = t;
            }
            picked.sort_by_key(|e| (e.t, e.x, e.y, e.p));
            let all: Vec<u32> = (0..picked.len() as u32).collect();
            events::normalize(&picked, &all, stream.width, stream.height, window_id, label)
        }
    }
}

/// Sniff the event file format: EVTB magic means binary, otherwise CSV with
/// the configured sensor geometry.
pub fn load_sample_events(path: &Path, sensor: (u16, u16)) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if bytes.len() >= 4 && &bytes[0..4] == EVTB_MAGIC {
        EventStream::parse_binary(&bytes, &origin)
    } else {
        EventStream::parse_csv(&bytes, sensor.0, sensor.1, &origin)
    }
}

/// Cut a recording into per-window event streams (used by `prep`).
pub fn split_windows(stream: &EventStream, window_us: u64, overlap_us: u64) -> Vec<EventStream> {
    events::slide_windows(stream, window_us, overlap_us)
        .into_iter()
        .map(|(_, w)| EventStream {
            width: stream.width,
            height: stream.height,
            events: stream.events[w.start_index..=w.end_index].to_vec(),
        })
        .collect()
}
