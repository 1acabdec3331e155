use evcloud::blocks::Aggregation;
use evcloud::dataset::{Dataset, TimeAblation};
use evcloud::synth::synth_classification;
use evcloud::train::{train_loop, TrainOpts};

#[test]
#[ignore]
fn throughput_probe() {
    let dir = std::env::temp_dir().join("evprobe");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = std::time::Instant::now();
    synth_classification(&dir, 7, 3, 240, 60, 512).unwrap();
    println!("gen: {:.1?}", t0.elapsed());

    let ablate = std::env::var("EV_PROBE_ABLATE").is_ok();
    let ta = if ablate { TimeAblation::PermuteTimestamps } else { TimeAblation::None };
    let run = evcloud::config::RunConfig::load(&dir.join("run.cfg")).unwrap();
    let t1 = std::time::Instant::now();
    let train = Dataset::open(&dir.join("train"))
        .unwrap()
        .prepare(&run, ta)
        .unwrap();
    let test = Dataset::open(&dir.join("test"))
        .unwrap()
        .prepare(&run, ta)
        .unwrap();
    println!("prepare {} samples: {:.1?}", train.len() + test.len(), t1.elapsed());

    evcloud::tensor::tape::prof_reset();
    let mut short = run.clone();
    let eps: usize = std::env::var("EV_PROBE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(2);
    short.epochs = eps;
    let opts = TrainOpts {
        agg: if ablate { Aggregation::Max } else { Aggregation::Attention },
        stop: None,
    };
    let t2 = std::time::Instant::now();
    let out = train_loop(&short, &train, &test, &dir.join("out"), &opts).unwrap();
    let dt = t2.elapsed();
    println!(
        "{} epochs on {} samples: {:.1?} ({:.2} s/epoch at this size, {:.1} s/epoch at 2400)",
        eps,
        train.len(),
        dt,
        dt.as_secs_f64() / eps as f64,
        dt.as_secs_f64() / eps as f64 * 2400.0 / train.len() as f64
    );
    evcloud::tensor::tape::prof_dump();
    for r in &out.rows {
        println!("epoch {} loss {:.4} acc {:.4} {:.1}s", r.epoch, r.train_loss, r.eval_metric, r.seconds);
    }
}
