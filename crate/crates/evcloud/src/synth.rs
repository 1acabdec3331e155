//! Synthetic dataset generators: desk-scale stand-ins with controllable
//! structure. The classification classes share a spatial footprint and differ
//! in motion, so temporal features carry most of the signal; the eye task is
//! a bright dot whose window-end position is the regression target.

use crate::config::RunConfig;
use crate::dataset::{write_manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Label, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::Path;

pub const CLS_SENSOR: u16 = 128;
pub const CLS_WINDOW_US: u64 = 100_000;
pub const EYE_SENSOR: (u16, u16) = (240, 180);
pub const EYE_WINDOW_US: u64 = 4_400;
/// Generator self-check bounds on mean signal events per eye window.
pub const EYE_EVENTS_BOUNDS: (f64, f64) = (1_200.0, 2_400.0);

/// Distinct RNG stream per (split, sample); splitmix-style mixing.
fn mix_seed(base: u64, split: u32, idx: u64) -> u64 {
    let mut z = base ^ (split as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ idx.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sorted_times(rng: &mut ChaCha8Rng, n: usize, window_us: u64) -> Vec<u64> {
    let mut ts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..window_us)).collect();
    ts.sort_unstable();
    ts
}

fn clamp_px(v: f64, hi: u16) -> u16 {
    (v.round().max(0.0) as i64).min(hi as i64 - 1).max(0) as u16
}

// ── classification ─────────────────────────────────────────────────────────

/// Signal and noise events for one classification window.
///
/// All three classes trace the same annulus at a constant angular speed over
/// a whole number of revolutions, so every class has the same angularly
/// uniform dwell and the aggregated (x, y) footprints match; only the motion
/// differs. Class 0 orbits once counter-clockwise, class 1 once clockwise,
/// class 2 makes 2-3 revolutions in a random direction. Permute the
/// timestamps and the classes become indistinguishable by construction.
fn classify_parts(seed: u64, class: u32) -> (Vec<Event>, Vec<Event>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = CLS_SENSOR;
    let n_sig = rng.gen_range(1_300..1_800);
    let ts = sorted_times(&mut rng, n_sig, CLS_WINDOW_US);
    let cx = 64.0 + rng.gen_range(-8.0..8.0);
    let cy = 64.0 + rng.gen_range(-8.0..8.0);
    let radius = rng.gen_range(28.0..40.0);
    let phase = rng.gen_range(0.0..TAU);
    let flip = rng.gen_bool(0.5);
    let revs: f64 = match class {
        0 => 1.0,
        1 => -1.0,
        2 => {
            let r = if rng.gen_bool(0.5) { 2.0 } else { 3.0 };
            if flip {
                -r
            } else {
                r
            }
        }
        _ => panic!("classification generator supports classes 0..3"),
    };
    let mut signal = Vec::with_capacity(n_sig);
    for &t in &ts {
        let s = t as f64 / CLS_WINDOW_US as f64;
        let theta = phase + revs * TAU * s;
        let x = cx + radius * theta.cos() + rng.gen_range(-1.5..1.5);
        let y = cy + radius * theta.sin() + rng.gen_range(-1.5..1.5);
        signal.push(Event {
            t,
            x: clamp_px(x, w),
            y: clamp_px(y, w),
            p: rng.gen_range(0..=1),
        });
    }
    // ~10% of the final stream is uniform noise.
    let n_noise = n_sig / 9;
    let noise = (0..n_noise)
        .map(|_| Event {
            t: rng.gen_range(0..CLS_WINDOW_US),
            x: rng.gen_range(0..w),
            y: rng.gen_range(0..w),
            p: rng.gen_range(0..=1),
        })
        .collect();
    (signal, noise)
}

pub fn classify_sample(seed: u64, class: u32) -> EventStream {
    let (mut signal, noise) = classify_parts(seed, class);
    signal.extend(noise);
    EventStream::from_unordered(CLS_SENSOR, CLS_SENSOR, signal).expect("generator in bounds")
}

/// Bhattacharyya coefficient of aggregated (x, y) histograms; 1 = identical.
pub fn spatial_bhattacharyya(a: &[EventStream], b: &[EventStream], bins: usize) -> f64 {
    let hist = |streams: &[EventStream]| {
        let mut h = vec![0.0f64; bins * bins];
        let mut total = 0.0;
        for s in streams {
            for e in &s.events {
                let bx = (e.x as usize * bins) / s.width as usize;
                let by = (e.y as usize * bins) / s.height as usize;
                h[by * bins + bx] += 1.0;
                total += 1.0;
            }
        }
        h.iter_mut().for_each(|v| *v /= total);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(p, q)| (p * q).sqrt()).sum()
}

// ── eye tracking ───────────────────────────────────────────────────────────

struct EyeTrajectory {
    base: [f64; 2],
    amp: [[f64; 2]; 2],
    freq: [f64; 2],
    phase: [[f64; 2]; 2],
}

impl EyeTrajectory {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        EyeTrajectory {
            base: [rng.gen_range(30.0..210.0), rng.gen_range(30.0..150.0)],
            amp: [
                [rng.gen_range(4.0..12.0), rng.gen_range(2.0..6.0)],
                [rng.gen_range(4.0..12.0), rng.gen_range(2.0..6.0)],
            ],
            freq: [rng.gen_range(0.5..1.5), rng.gen_range(1.5..3.0)],
            phase: [
                [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
                [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)],
            ],
        }
    }

    #[cfg(test)]
    fn stationary(x: f64, y: f64) -> Self {
        EyeTrajectory {
            base: [x, y],
            amp: [[0.0; 2]; 2],
            freq: [1.0, 2.0],
            phase: [[0.0; 2]; 2],
        }
    }

    /// Center position at fraction s of the window.
    fn at(&self, s: f64) -> [f64; 2] {
        let mut p = self.base;
        for axis in 0..2 {
            for (k, &f) in self.freq.iter().enumerate() {
                p[axis] += self.amp[axis][k] * (TAU * f * s + self.phase[axis][k]).sin();
            }
        }
        p
    }
}

fn eye_events(rng: &mut ChaCha8Rng, traj: &EyeTrajectory) -> Vec<Event> {
    let (w, h) = EYE_SENSOR;
    let n_sig = rng.gen_range(1_400..2_200);
    let dot_r = rng.gen_range(3.0..6.0);
    let ts = sorted_times(rng, n_sig, EYE_WINDOW_US);
    let mut events = Vec::with_capacity(n_sig + n_sig / 12);
    for &t in &ts {
        let s = t as f64 / EYE_WINDOW_US as f64;
        let c = traj.at(s);
        // Uniform point in the dot's disk.
        let r = dot_r * rng.gen_range(0.0f64..1.0).sqrt();
        let a = rng.gen_range(0.0..TAU);
        events.push(Event {
            t,
            x: clamp_px(c[0] + r * a.cos(), w),
            y: clamp_px(c[1] + r * a.sin(), h),
            p: rng.gen_range(0..=1),
        });
    }
    for _ in 0..n_sig / 12 {
        events.push(Event {
            t: rng.gen_range(0..EYE_WINDOW_US),
            x: rng.gen_range(0..w),
            y: rng.gen_range(0..h),
            p: rng.gen_range(0..=1),
        });
    }
    events
}

/// One eye window and its label: the dot center at the window's end.
pub fn eye_sample(seed: u64) -> (EventStream, [f32; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = EyeTrajectory::random(&mut rng);
    let events = eye_events(&mut rng, &traj);
    let stream =
        EventStream::from_unordered(EYE_SENSOR.0, EYE_SENSOR.1, events).expect("in bounds");
    let end = traj.at(1.0);
    (stream, [end[0] as f32, end[1] as f32])
}

// ── on-disk generation ─────────────────────────────────────────────────────

pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
    pub config_path: std::path::PathBuf,
}

fn write_split(
    dir: &Path,
    streams_labels: Vec<(EventStream, Label)>,
) -> Result<Vec<ManifestEntry>> {
    let events_dir = dir.join("events");
    std::fs::create_dir_all(&events_dir).map_err(|e| Error::io(&events_dir, e))?;
    let mut entries = Vec::with_capacity(streams_labels.len());
    for (i, (stream, label)) in streams_labels.into_iter().enumerate() {
        let rel = format!("events/{i:05}.evt");
        let path = dir.join(&rel);
        std::fs::write(&path, stream.to_binary()).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry { path: rel, label });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Generate the 3-class motion dataset under `out/{train,test}` and write a
/// ready-to-train `run.cfg`.
pub fn synth_classification(
    out: &Path,
    seed: u64,
    n_classes: u32,
    n_train: usize,
    n_test: usize,
    n_points: usize,
) -> Result<SynthSummary> {
    assert!(n_classes >= 2 && n_train > 0 && n_test > 0 && n_points > 0);
    assert!(n_classes <= 3, "generator defines 3 motion classes");
    for (split_tag, count, sub) in [(0u32, n_train, "train"), (1u32, n_test, "test")] {
        let samples: Vec<(EventStream, Label)> = (0..count)
            .map(|i| {
                let class = (i as u32) % n_classes;
                let stream = classify_sample(mix_seed(seed, split_tag, i as u64), class);
                (stream, Label::Class(class))
            })
            .collect();
        write_split(&out.join(sub), samples)?;
    }
    let mut run = RunConfig::defaults(Task::Classify);
    run.model.task = Task::Classify;
    run.model.n_points = n_points;
    run.model.centroids = [n_points / 2, n_points / 4, n_points / 8];
    run.model.k = run.model.k.min(run.model.centroids[2]);
    run.model.dims = [16, 32, 64];
    run.model.out_width = n_classes as usize;
    run.model.seed = seed;
    run.data.n_points = n_points;
    run.data.window_us = CLS_WINDOW_US;
    run.data.overlap_us = 0;
    run.sensor_width = CLS_SENSOR;
    run.sensor_height = CLS_SENSOR;
    run.epochs = 30;
    run.batch = 32;
    run.lr = 2e-3;
    run.validate()?;
    let config_path = out.join("run.cfg");
    run.write(&config_path)?;
    Ok(SynthSummary {
        train: n_train,
        test: n_test,
        config_path,
    })
}

/// Generate the dot-tracking dataset under `out/{train,test}`.
pub fn synth_eye(
    out: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
    n_points: usize,
) -> Result<SynthSummary> {
    assert!(n_train > 0 && n_test > 0 && n_points > 0);
    for (split_tag, count, sub) in [(2u32, n_train, "train"), (3u32, n_test, "test")] {
        let samples: Vec<(EventStream, Label)> = (0..count)
            .map(|i| {
                let (stream, center) = eye_sample(mix_seed(seed, split_tag, i as u64));
                (stream, Label::Pupil(center))
            })
            .collect();
        write_split(&out.join(sub), samples)?;
    }
    let mut run = RunConfig::defaults(Task::Eye);
    run.model.n_points = n_points;
    run.model.centroids = [n_points / 2, n_points / 4, n_points / 8];
    run.model.k = run.model.k.min(run.model.centroids[2]);
    run.model.dims = [16, 32, 64];
    run.model.seed = seed;
    run.data.n_points = n_points;
    run.sensor_width = EYE_SENSOR.0;
    run.sensor_height = EYE_SENSOR.1;
    run.epochs = 50;
    run.batch = 16;
    run.lr = 2e-3;
    run.validate()?;
    let config_path = out.join("run.cfg");
    run.write(&config_path)?;
    Ok(SynthSummary {
        train: n_train,
        test: n_test,
        config_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    #[test]
    fn same_seed_identical_bytes() {
        let a = classify_sample(99, 1).to_binary();
        let b = classify_sample(99, 1).to_binary();
        assert_eq!(a, b);
        let (ea, la) = eye_sample(7);
        let (eb, lb) = eye_sample(7);
        assert_eq!(ea.to_binary(), eb.to_binary());
        assert_eq!(la, lb);
    }

    #[test]
    fn all_classes_share_footprint() {
        let gather = |class: u32, base: u64| -> Vec<EventStream> {
            (0..80).map(|i| classify_sample(base + i, class)).collect()
        };
        let (a, b, c) = (gather(0, 1000), gather(1, 2000), gather(2, 3000));
        for (x, y, tag) in [(&a, &b, "0/1"), (&a, &c, "0/2"), (&b, &c, "1/2")] {
            let bc = spatial_bhattacharyya(x, y, 32);
            assert!(bc > 0.95, "classes {tag} should be spatially alike, bc={bc:.3}");
        }
    }

    /// Unwrapped angle swept by the noise-free signal, in revolutions.
    fn swept_revs(signal: &[Event], cx: f64, cy: f64) -> f64 {
        let mut total = 0.0;
        let mut last: Option<f64> = None;
        for e in signal {
            let th = (e.y as f64 - cy).atan2(e.x as f64 - cx);
            if let Some(prev) = last {
                let mut d = th - prev;
                while d > std::f64::consts::PI {
                    d -= TAU;
                }
                while d < -std::f64::consts::PI {
                    d += TAU;
                }
                total += d;
            }
            last = Some(th);
        }
        total / TAU
    }

    #[test]
    fn classes_differ_only_in_rotation() {
        for seed in 0..12u64 {
            let mean = |sig: &[Event]| {
                let n = sig.len() as f64;
                let (sx, sy) = sig
                    .iter()
                    .fold((0.0, 0.0), |(ax, ay), e| (ax + e.x as f64, ay + e.y as f64));
                (sx / n, sy / n)
            };
            let revs_of = |class: u32| {
                let (signal, _) = classify_parts(seed, class);
                let (cx, cy) = mean(&signal);
                swept_revs(&signal, cx, cy)
            };
            let r0 = revs_of(0);
            let r1 = revs_of(1);
            let r2 = revs_of(2);
            assert!((r0 - 1.0).abs() < 0.1, "class 0 swept {r0:.2} revs");
            assert!((r1 + 1.0).abs() < 0.1, "class 1 swept {r1:.2} revs");
            assert!(
                (r2.abs() - 2.0).abs() < 0.1 || (r2.abs() - 3.0).abs() < 0.1,
                "class 2 swept {r2:.2} revs"
            );
        }
    }

    #[test]
    fn stationary_dot_label_is_its_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = EyeTrajectory::stationary(120.0, 90.0);
        assert_eq!(traj.at(0.37), [120.0, 90.0]);
        assert_eq!(traj.at(1.0), [120.0, 90.0]);
        let events = eye_events(&mut rng, &traj);
        // All signal events sit within the dot radius of the center.
        let close = events
            .iter()
            .filter(|e| {
                let dx = e.x as f64 - 120.0;
                let dy = e.y as f64 - 90.0;
                (dx * dx + dy * dy).sqrt() <= 7.0
            })
            .count();
        assert!(close as f64 / events.len() as f64 > 0.9);
    }

    #[test]
    fn eye_event_counts_within_bounds() {
        let mean = (0..30u64)
            .map(|i| eye_sample(i).0.events.len() as f64)
            .sum::<f64>()
            / 30.0;
        assert!(
            (EYE_EVENTS_BOUNDS.0..EYE_EVENTS_BOUNDS.1).contains(&mean),
            "mean events/window {mean}"
        );
    }

    #[test]
    fn eye_label_inside_sensor() {
        for i in 0..50u64 {
            let (_, label) = eye_sample(i);
            assert!(label[0] > 0.0 && label[0] < EYE_SENSOR.0 as f32);
            assert!(label[1] > 0.0 && label[1] < EYE_SENSOR.1 as f32);
        }
    }

    #[test]
    fn generated_tree_opens_and_trains_shape() {
        let tmp = tempfile::tempdir().unwrap();
        let summary = synth_classification(tmp.path(), 42, 3, 9, 6, 64).unwrap();
        assert_eq!(summary.train, 9);
        let run = RunConfig::load(&summary.config_path).unwrap();
        assert_eq!(run.model.n_points, 64);
        let train = Dataset::open(tmp.path().join("train")).unwrap();
        let test = Dataset::open(tmp.path().join("test")).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 6);
        // Balanced classes in generation order.
        let classes: Vec<u32> = train
            .entries
            .iter()
            .map(|e| match e.label {
                Label::Class(c) => c,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(&classes[0..3], &[0, 1, 2]);
    }

    #[test]
    fn regeneration_is_reproducible_across_dirs() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        synth_eye(t1.path(), 11, 4, 2, 64).unwrap();
        synth_eye(t2.path(), 11, 4, 2, 64).unwrap();
        for sub in ["train", "test"] {
            let m1 = std::fs::read(t1.path().join(sub).join("manifest.csv")).unwrap();
            let m2 = std::fs::read(t2.path().join(sub).join("manifest.csv")).unwrap();
            assert_eq!(m1, m2);
            let f1 = std::fs::read(t1.path().join(sub).join("events/00000.evt")).unwrap();
            let f2 = std::fs::read(t2.path().join(sub).join("events/00000.evt")).unwrap();
            assert_eq!(f1, f2);
        }
    }
}
