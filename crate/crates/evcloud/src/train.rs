//! Training loop: seeded shuffling, Adam with a cosine learning-rate decay,
//! per-epoch evaluation, best-checkpoint retention, and a metrics.csv log.

use crate::blocks::{Aggregation, Phase};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::events::{Label, Task};
use crate::model::{Model, PreparedSample};
use crate::objectives::{
    accuracy, cpr_loss, label_smooth_ce, mean_px_error, mse_px, pixel_rate, pose_error, wmse_loss,
};
use crate::tensor::tape::Tape;
use crate::tensor::{cosine_lr, AdamState, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CKPT_FILE: &str = "model.emck";
pub const METRICS_FILE: &str = "metrics.csv";
const EVAL_BATCH: usize = 64;
/// Max global gradient norm per step; keeps early steps from destabilizing.
const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub enum StopRule {
    /// Stop once the eval metric reaches this value (classification).
    MetricAtLeast(f64),
    /// Stop once mean pixel error and the 10px rate both reach target (eye).
    EyeTarget { mean_px: f64, p10: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOpts {
    pub agg: Aggregation,
    pub stop: Option<StopRule>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            agg: Aggregation::Attention,
            stop: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub primary: f64,
    pub extras: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub rows: Vec<EpochRow>,
    pub ckpt_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Whether larger eval metrics are better for this task.
pub fn higher_better(task: Task) -> bool {
    matches!(task, Task::Classify)
}

fn check_labels(task: Task, samples: &[PreparedSample], what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let ok = matches!(
            (task, &s.label),
            (Task::Classify, Some(Label::Class(_)))
                | (Task::Cpr, Some(Label::Pose(_)))
                | (Task::Eye, Some(Label::Pupil(_)))
        );
        if !ok {
            return Err(Error::Contract(format!(
                "{what} sample {i} label {:?} does not fit task {task}",
                s.label
            )));
        }
    }
    Ok(())
}

fn class_labels(batch: &[&PreparedSample]) -> Vec<u32> {
    batch
        .iter()
        .map(|s| match s.label {
            Some(Label::Class(c)) => c,
            _ => unreachable!("labels checked at startup"),
        })
        .collect()
}

/// Eval-mode forward over all samples; returns flat [n, out_width] outputs.
fn forward_all(model: &Model<f32>, samples: &[PreparedSample], agg: Aggregation) -> Vec<f32> {
    let mut out = Vec::with_capacity(samples.len() * model.cfg.out_width);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let y = model.forward_batch(&mut tape, &refs, agg, Phase::Eval);
        out.extend_from_slice(tape.value(y).data());
    }
    out
}

/// Task metrics on a prepared split. Primary metric: accuracy (classify,
/// higher better), mean pixel error (eye, lower better), mean translation
/// error in meters (pose, lower better).
pub fn evaluate(
    model: &Model<f32>,
    samples: &[PreparedSample],
    run: &RunConfig,
    agg: Aggregation,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluate on empty split".into()));
    }
    check_labels(run.model.task, samples, "eval")?;
    let outputs = forward_all(model, samples, agg);
    match run.model.task {
        Task::Classify => {
            let labels: Vec<u32> = samples
                .iter()
                .map(|s| match s.label {
                    Some(Label::Class(c)) => c,
                    _ => unreachable!(),
                })
                .collect();
            let acc = accuracy(&outputs, model.cfg.out_width, &labels)?;
            Ok(EvalReport {
                primary: acc,
                extras: vec![],
            })
        }
        Task::Eye => {
            let (w, h) = (run.sensor_width as f64, run.sensor_height as f64);
            let preds: Vec<[f64; 2]> = outputs
                .chunks(2)
                .map(|c| [c[0] as f64 * w, c[1] as f64 * h])
                .collect();
            let gts: Vec<[f64; 2]> = samples
                .iter()
                .map(|s| match s.label {
                    Some(Label::Pupil(p)) => [p[0] as f64, p[1] as f64],
                    _ => unreachable!(),
                })
                .collect();
            Ok(EvalReport {
                primary: mean_px_error(&preds, &gts),
                extras: vec![
                    ("p3".into(), pixel_rate(&preds, &gts, 3.0)),
                    ("p5".into(), pixel_rate(&preds, &gts, 5.0)),
                    ("p10".into(), pixel_rate(&preds, &gts, 10.0)),
                    ("mse_px".into(), mse_px(&preds, &gts)),
                ],
            })
        }
        Task::Cpr => {
            let mut meters = 0.0;
            let mut degrees = 0.0;
            for (s, out) in samples.iter().zip(outputs.chunks(6)) {
                let gt = match s.label {
                    Some(Label::Pose(p)) => p,
                    _ => unreachable!(),
                };
                let (m, d) = pose_error(
                    [out[0] as f64, out[1] as f64, out[2] as f64],
                    [out[3] as f64, out[4] as f64, out[5] as f64],
                    [gt[0] as f64, gt[1] as f64, gt[2] as f64],
                    [gt[3] as f64, gt[4] as f64, gt[5] as f64],
                );
                meters += m;
                degrees += d;
            }
            let n = samples.len() as f64;
            Ok(EvalReport {
                primary: meters / n,
                extras: vec![("degrees".into(), degrees / n)],
            })
        }
    }
}

fn stop_reached(rule: StopRule, task: Task, report: &EvalReport) -> bool {
    match rule {
        StopRule::MetricAtLeast(t) => {
            if higher_better(task) {
                report.primary >= t
            } else {
                report.primary <= t
            }
        }
        StopRule::EyeTarget { mean_px, p10 } => {
            let got_p10 = report
                .extras
                .iter()
                .find(|(k, _)| k == "p10")
                .map(|(_, v)| *v)
                .unwrap_or(0.0);
            report.primary < mean_px && got_p10 >= p10
        }
    }
}

pub fn train_loop(
    run: &RunConfig,
    train: &[PreparedSample],
    test: &[PreparedSample],
    out_dir: &Path,
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    run.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("train and test splits must be non-empty".into()));
    }
    for s in train.iter().chain(test) {
        if s.n != run.model.n_points {
            return Err(Error::Contract(format!(
                "sample has {} points, config wants {}",
                s.n, run.model.n_points
            )));
        }
    }
    check_labels(run.model.task, train, "train")?;
    check_labels(run.model.task, test, "test")?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model = Model::<f32>::build(run.model.clone())?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.numel()).collect();
    let mut adam = AdamState::<f32>::new(&sizes);

    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CKPT_FILE);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "epoch,train_loss,eval_metric,lr,seconds")
        .map_err(|e| Error::io(&metrics_path, e))?;

    let steps_per_epoch = train.len().div_ceil(run.batch);
    let total_steps = run.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(run.model.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let hb = higher_better(run.model.task);
    let mut best_metric = if hb { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut best_epoch = 0usize;
    let mut rows: Vec<EpochRow> = Vec::with_capacity(run.epochs);
    let mut step = 0usize;

    for epoch in 1..=run.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut lr_epoch = None;
        for chunk in order.chunks(run.batch) {
            let lr = cosine_lr(run.lr, step as u64, total_steps as u64);
            lr_epoch.get_or_insert(lr);
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let out = model.forward_batch(&mut tape, &batch, opts.agg, Phase::Train);
            let loss = match run.model.task {
                Task::Classify => {
                    let labels = class_labels(&batch);
                    label_smooth_ce(&mut tape, out, &labels, run.loss.epsilon)?
                }
                Task::Eye => {
                    let (w, h) = (run.sensor_width as f32, run.sensor_height as f32);
                    let data: Vec<f32> = batch
                        .iter()
                        .flat_map(|s| match s.label {
                            Some(Label::Pupil(p)) => [p[0] / w, p[1] / h],
                            _ => unreachable!(),
                        })
                        .collect();
                    let target = tape.leaf(Tensor::new(vec![batch.len(), 2], data));
                    wmse_loss(&mut tape, out, target, run.loss.w_x, run.loss.w_y)
                }
                Task::Cpr => {
                    let data: Vec<f32> = batch
                        .iter()
                        .flat_map(|s| match s.label {
                            Some(Label::Pose(p)) => p,
                            _ => unreachable!(),
                        })
                        .collect();
                    let target = tape.leaf(Tensor::new(vec![batch.len(), 6], data));
                    // L2 on weight matrices only (not biases/norm scales).
                    let weights: Vec<_> = model
                        .params()
                        .iter()
                        .filter(|p| p.value.shape().len() == 2)
                        .map(|p| tape.param(p))
                        .collect();
                    cpr_loss(&mut tape, out, target, &weights, &run.loss)
                }
            };
            let loss_val = tape.value(loss).data()[0] as f64;
            if std::env::var("EV_TRACE").is_ok() && loss_val > 50.0 {
                eprintln!("-- trace of step {step} (loss {loss_val:.2}) --");
                crate::blocks::TRACE.with(|t| t.set(true));
                let mut scratch = Tape::new();
                model.forward_batch(&mut scratch, &batch, opts.agg, Phase::Static);
                crate::blocks::TRACE.with(|t| t.set(false));
            }
            if !loss_val.is_finite() {
                return Err(Error::Contract(format!(
                    "training diverged at epoch {epoch} (loss {loss_val})"
                )));
            }
            loss_sum += loss_val * batch.len() as f64;
            tape.backward(loss);
            // Global-norm clip: the sequence block's unnormalized interior
            // can spike gradients early in training.
            // Params outside the active graph (e.g. attention weights under
            // the max-aggregation ablation) have no gradient and stay put.
            let mut sq_sum = 0.0f64;
            for p in model.params() {
                if let Some(g) = tape.grad_by_name(&p.name) {
                    sq_sum += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
            }
            let gnorm = sq_sum.sqrt();
            if std::env::var("EV_STEPLOG").is_ok() {
                eprintln!("step {step} lr {lr:.5} loss {loss_val:.4} gnorm {gnorm:.3}");
            }
            let clip = if gnorm > GRAD_CLIP_NORM {
                (GRAD_CLIP_NORM / gnorm) as f32
            } else {
                1.0
            };
            adam.begin_step();
            for (idx, p) in model.params_mut().into_iter().enumerate() {
                let Some(g) = tape.grad_by_name(&p.name) else {
                    continue;
                };
                if clip < 1.0 {
                    let scaled: Vec<f32> = g.iter().map(|&v| v * clip).collect();
                    adam.update(idx, p.value.data_mut(), &scaled, lr as f32);
                } else {
                    adam.update(idx, p.value.data_mut(), g, lr as f32);
                }
            }
            step += 1;
        }
        let report = evaluate(&model, test, run, opts.agg)?;
        let seconds = t0.elapsed().as_secs_f64();
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_metric: report.primary,
            lr: lr_epoch.unwrap_or(0.0),
            seconds,
        };
        writeln!(
            metrics,
            "{},{:.6},{:.6},{:.8},{:.3}",
            row.epoch, row.train_loss, row.eval_metric, row.lr, row.seconds
        )
        .map_err(|e| Error::io(&metrics_path, e))?;
        rows.push(row);

        let improved = if hb {
            report.primary > best_metric
        } else {
            report.primary < best_metric
        };
        if improved {
            best_metric = report.primary;
            best_epoch = epoch;
            let bytes = model.to_bytes();
            // Never persist a checkpoint that cannot be read back verbatim.
            let reread = Model::<f32>::from_bytes(&bytes, run.model.clone())?.to_bytes();
            if reread != bytes {
                return Err(Error::Checkpoint(
                    "checkpoint failed its load-verify round trip".into(),
                ));
            }
            std::fs::write(&ckpt_path, &bytes).map_err(|e| Error::io(&ckpt_path, e))?;
        }
        if let Some(rule) = opts.stop {
            if stop_reached(rule, run.model.task, &report) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        epochs_run: rows.len(),
        best_epoch,
        best_metric,
        rows,
        ckpt_path,
        metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{pipeline, TimeAblation};
    use crate::synth;

    fn tiny_run(seed: u64) -> RunConfig {
        let mut run = RunConfig::defaults(Task::Classify);
        run.model.task = Task::Classify;
        run.model.n_points = 64;
        run.model.centroids = [32, 16, 8];
        run.model.dims = [8, 8, 16];
        run.model.k = 4;
        run.model.out_width = 3;
        run.model.seed = seed;
        run.data.n_points = 64;
        run.sensor_width = synth::CLS_SENSOR;
        run.sensor_height = synth::CLS_SENSOR;
        run.batch = 8;
        run.epochs = 5;
        run.lr = 2e-3;
        run
    }

    fn tiny_split(run: &RunConfig, count: usize, tag: u64) -> Vec<PreparedSample> {
        (0..count)
            .map(|i| {
                let class = (i % 3) as u32;
                let stream = synth::classify_sample(tag * 10_000 + i as u64, class);
                let sample = pipeline(
                    &stream,
                    run.model.n_points,
                    i as u64 ^ tag,
                    i,
                    Some(Label::Class(class)),
                    TimeAblation::None,
                );
                PreparedSample::from_sample(&sample, &run.model).unwrap()
            })
            .collect()
    }

    #[test]
    fn loss_decreases_over_five_epochs() {
        let run = tiny_run(1);
        let train = tiny_split(&run, 24, 1);
        let test = tiny_split(&run, 9, 2);
        let tmp = tempfile::tempdir().unwrap();
        let out = train_loop(&run, &train, &test, tmp.path(), &TrainOpts::default()).unwrap();
        assert_eq!(out.epochs_run, 5);
        assert!(
            out.rows[4].train_loss < out.rows[0].train_loss,
            "epoch5 {} vs epoch1 {}",
            out.rows[4].train_loss,
            out.rows[0].train_loss
        );
        assert!(out.ckpt_path.exists());
        let text = std::fs::read_to_string(&out.metrics_path).unwrap();
        assert!(text.starts_with("epoch,train_loss,eval_metric,lr,seconds\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn one_epoch_is_bit_deterministic() {
        let mut run = tiny_run(9);
        run.epochs = 1;
        let train = tiny_split(&run, 16, 3);
        let test = tiny_split(&run, 8, 4);
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let o1 = train_loop(&run, &train, &test, t1.path(), &TrainOpts::default()).unwrap();
        let o2 = train_loop(&run, &train, &test, t2.path(), &TrainOpts::default()).unwrap();
        assert_eq!(
            std::fs::read(&o1.ckpt_path).unwrap(),
            std::fs::read(&o2.ckpt_path).unwrap(),
            "checkpoints must be bit-identical"
        );
        let strip_seconds = |p: &Path| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        assert_eq!(strip_seconds(&o1.metrics_path), strip_seconds(&o2.metrics_path));
    }

    #[test]
    fn stop_rule_halts_early() {
        let run = tiny_run(5);
        let train = tiny_split(&run, 12, 5);
        let test = tiny_split(&run, 6, 6);
        let tmp = tempfile::tempdir().unwrap();
        let opts = TrainOpts {
            stop: Some(StopRule::MetricAtLeast(0.0)),
            ..Default::default()
        };
        let out = train_loop(&run, &train, &test, tmp.path(), &opts).unwrap();
        assert_eq!(out.epochs_run, 1);
    }

    #[test]
    fn label_task_mismatch_fails_before_training() {
        let run = tiny_run(2);
        let mut train = tiny_split(&run, 4, 7);
        // Corrupt one label into the wrong task's kind.
        train[2].label = Some(Label::Pupil([3.0, 4.0]));
        let test = tiny_split(&run, 4, 8);
        let tmp = tempfile::tempdir().unwrap();
        let e = train_loop(&run, &train, &test, tmp.path(), &TrainOpts::default()).unwrap_err();
        assert!(e.to_string().contains("does not fit task"), "{e}");
        assert!(!tmp.path().join(CKPT_FILE).exists());
    }

    #[test]
    fn cosine_lr_recorded_decreases() {
        let run = tiny_run(3);
        let train = tiny_split(&run, 12, 9);
        let test = tiny_split(&run, 6, 10);
        let tmp = tempfile::tempdir().unwrap();
        let out = train_loop(&run, &train, &test, tmp.path(), &TrainOpts::default()).unwrap();
        let lrs: Vec<f64> = out.rows.iter().map(|r| r.lr).collect();
        for w in lrs.windows(2) {
            assert!(w[1] < w[0], "lr must decay: {lrs:?}");
        }
    }
}
