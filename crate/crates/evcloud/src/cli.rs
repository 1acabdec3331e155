//! Command-line front end: prep | synth | train | eval | bench | count.

use crate::bench::bench_latency;
use crate::blocks::Aggregation;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, ManifestEntry, TimeAblation};
use crate::error::{Error, Result};
use crate::events::{Label, Task};
use crate::model::{count_flops, count_params, Model};
use crate::synth;
use crate::train::{evaluate, train_loop, StopRule, TrainOpts};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "evcloud",
    version,
    about = "Event-camera point-cloud models: dataset tooling, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Classify,
    Eye,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggArg {
    Attention,
    Max,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cut labeled recordings (data/<class>/*.csv|*.evt) into window files
    Prep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
        format: FormatArg,
    },
    /// Generate a synthetic dataset (train/ and test/ splits plus run.cfg)
    Synth {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train on data/<train|test>, writing model.emck and metrics.csv to --out
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = AggArg::Attention)]
        agg: AggArg,
        /// Ablation: shuffle timestamps within each window before normalizing
        #[arg(long)]
        permute_time: bool,
        /// Stop early once the eval metric reaches this value
        #[arg(long)]
        target: Option<f64>,
    },
    /// Evaluate a checkpoint on one dataset split directory
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Report P5/P50/P95 single-sample inference latency
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter and FLOP counts for a config
    Count {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Prep {
            config,
            data,
            out,
            format,
        } => prep(&config, &data, &out, format),
        Cmd::Synth {
            task,
            out,
            seed,
            train_count,
            test_count,
            points,
        } => {
            let summary = match task {
                TaskArg::Classify => synth::synth_classification(
                    &out,
                    seed,
                    3,
                    train_count.unwrap_or(2400),
                    test_count.unwrap_or(600),
                    points.unwrap_or(512),
                )?,
                TaskArg::Eye => synth::synth_eye(
                    &out,
                    seed,
                    train_count.unwrap_or(1200),
                    test_count.unwrap_or(300),
                    points.unwrap_or(1024),
                )?,
            };
            println!(
                "wrote {} train / {} test samples under {}",
                summary.train,
                summary.test,
                out.display()
            );
            println!("config: {}", summary.config_path.display());
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            out,
            seed,
            agg,
            permute_time,
            target,
        } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.model.seed = s;
            }
            let ablation = if permute_time {
                TimeAblation::PermuteTimestamps
            } else {
                TimeAblation::None
            };
            let train_set = Dataset::open(data.join("train"))?.prepare(&run, ablation)?;
            let test_set = Dataset::open(data.join("test"))?.prepare(&run, ablation)?;
            let opts = TrainOpts {
                agg: match agg {
                    AggArg::Attention => Aggregation::Attention,
                    AggArg::Max => Aggregation::Max,
                },
                stop: target.map(StopRule::MetricAtLeast),
            };
            let outcome = train_loop(&run, &train_set, &test_set, &out, &opts)?;
            println!(
                "trained {} epochs; best eval metric {:.6} at epoch {}",
                outcome.epochs_run, outcome.best_metric, outcome.best_epoch
            );
            println!("checkpoint: {}", outcome.ckpt_path.display());
            println!("metrics:    {}", outcome.metrics_path.display());
            Ok(())
        }
        Cmd::Eval { config, data, ckpt } => {
            let run = RunConfig::load(&config)?;
            let model = Model::<f32>::load(&ckpt, run.model.clone())?;
            let samples = Dataset::open(&data)?.prepare(&run, TimeAblation::None)?;
            let report = evaluate(&model, &samples, &run, Aggregation::Attention)?;
            println!("samples: {}", samples.len());
            println!("metric: {:.6}", report.primary);
            for (k, v) in &report.extras {
                println!("{k}: {v:.6}");
            }
            Ok(())
        }
        Cmd::Bench {
            config,
            iters,
            seed,
        } => {
            let run = RunConfig::load(&config)?;
            let r = bench_latency(&run.model, iters, seed)?;
            println!(
                "latency over {} iterations (ms): P5 {:.3}  P50 {:.3}  P95 {:.3}",
                r.iters, r.p5_ms, r.p50_ms, r.p95_ms
            );
            Ok(())
        }
        Cmd::Count { config } => {
            let run = RunConfig::load(&config)?;
            let params = count_params(&run.model);
            let flops = count_flops(&run.model, run.model.n_points);
            println!("params: {params}");
            println!(
                "flops:  {flops} ({:.3} GFLOPs at N={})",
                flops as f64 / 1e9,
                run.model.n_points
            );
            Ok(())
        }
    }
}

/// Window every recording under `data/<class>/` into per-sample files.
fn prep(config: &Path, data: &Path, out: &Path, format: FormatArg) -> Result<()> {
    let run = RunConfig::load(config)?;
    if run.model.task != Task::Classify {
        return Err(Error::Config(
            "prep expects a classification layout: data/<class>/recordings".into(),
        ));
    }
    let mut class_dirs: Vec<(u32, PathBuf)> = Vec::new();
    let rd = std::fs::read_dir(data).map_err(|e| Error::io(data, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(data, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let class: u32 = name.parse().map_err(|_| {
            Error::Config(format!(
                "class directory '{name}' must be a non-negative integer"
            ))
        })?;
        class_dirs.push((class, path));
    }
    if class_dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no class directories under {}",
            data.display()
        )));
    }
    class_dirs.sort();
    let events_dir = out.join("events");
    std::fs::create_dir_all(&events_dir).map_err(|e| Error::io(&events_dir, e))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut next = 0usize;
    for (class, dir) in class_dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let stream =
                dataset::load_sample_events(&file, (run.sensor_width, run.sensor_height))?;
            for window in dataset::split_windows(&stream, run.data.window_us, run.data.overlap_us)
            {
                let (rel, bytes) = match format {
                    FormatArg::Binary => {
                        (format!("events/{next:06}.evt"), window.to_binary())
                    }
                    FormatArg::Csv => (
                        format!("events/{next:06}.csv"),
                        window.to_csv().into_bytes(),
                    ),
                };
                let path = out.join(&rel);
                std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                entries.push(ManifestEntry {
                    path: rel,
                    label: Label::Class(class),
                });
                next += 1;
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Validation(
            "no windows produced; recordings may be empty".into(),
        ));
    }
    dataset::write_manifest(out, &entries)?;
    println!("wrote {} windows to {}", entries.len(), out.display());
    Ok(())
}
