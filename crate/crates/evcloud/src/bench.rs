//! Inference latency measurement: eval-mode forward passes over seeded random
//! samples, reported as P5/P50/P95 wall times.

use crate::error::{Error, Result};
use crate::events::{Label, PointSample, Task};
use crate::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const WARMUP: usize = 10;
const SAMPLE_POOL: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct BenchResult {
    pub iters: usize,
    pub p5_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Deterministic pool of random N-point samples (content depends only on the
/// seed; timings of course do not).
pub fn bench_samples(cfg: &ModelConfig, seed: u64) -> Vec<PointSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..SAMPLE_POOL)
        .map(|wid| {
            let n = cfg.n_points;
            let mut coords = Vec::with_capacity(n * 3);
            for i in 0..n {
                coords.push(rng.gen_range(0.0..1.0));
                coords.push(rng.gen_range(0.0..1.0));
                // Strictly increasing times, jittered.
                coords.push((i as f32 + rng.gen_range(0.0..0.5)) / n as f32);
            }
            let label = match cfg.task {
                Task::Classify => Label::Class(0),
                Task::Cpr => Label::Pose([0.0; 6]),
                Task::Eye => Label::Pupil([0.0, 0.0]),
            };
            PointSample::new(coords, wid, Some(label), false)
        })
        .collect()
}

/// Nearest-rank percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Time `iters` single-sample forward passes (geometry included), after 10
/// discarded warmup passes.
pub fn bench_latency(cfg: &ModelConfig, iters: usize, seed: u64) -> Result<BenchResult> {
    if iters < 20 {
        return Err(Error::Contract(format!(
            "bench needs iters >= 20, got {iters}"
        )));
    }
    cfg.validate()?;
    let model = Model::<f32>::build(cfg.clone())?;
    let samples = bench_samples(cfg, seed);
    for i in 0..WARMUP {
        model.forward(&samples[i % samples.len()])?;
    }
    let mut times_ms = Vec::with_capacity(iters);
    for i in 0..iters {
        let s = &samples[i % samples.len()];
        let t0 = Instant::now();
        let out = model.forward(s)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        times_ms.push(dt);
    }
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let result = BenchResult {
        iters,
        p5_ms: percentile(&times_ms, 5.0),
        p50_ms: percentile(&times_ms, 50.0),
        p95_ms: percentile(&times_ms, 95.0),
    };
    assert!(result.p5_ms <= result.p50_ms && result.p50_ms <= result.p95_ms);
    Ok(result)
}
