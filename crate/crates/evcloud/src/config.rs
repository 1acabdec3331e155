//! Flat `key = value` run configuration. Unknown keys are rejected so typos
//! fail loudly; `to_text` is the canonical serialization (fixed key order).

use crate::error::{Error, Result};
use crate::events::{DatasetSpec, Task};
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub loss: LossConfig,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub sensor_width: u16,
    pub sensor_height: u16,
}

const KEYS: &[&str] = &[
    "alpha",
    "batch",
    "beta",
    "centroids",
    "conv_width",
    "dims",
    "epochs",
    "epsilon",
    "head_hidden",
    "k",
    "lambda",
    "lr",
    "n_points",
    "out_width",
    "overlap_us",
    "seed",
    "sensor_height",
    "sensor_width",
    "ssm_expand",
    "ssm_state",
    "task",
    "w_x",
    "w_y",
    "window_us",
];

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let (n, dims, out, window, overlap, sensor) = match task {
            Task::Classify => (1024, [32, 64, 128], 10, 500_000, 250_000, (128, 128)),
            Task::Cpr => (1024, [32, 64, 128], 6, 500_000, 250_000, (346, 260)),
            Task::Eye => (1024, [32, 64, 128], 2, 4_400, 0, (240, 180)),
        };
        RunConfig {
            model: ModelConfig {
                task,
                n_points: n,
                centroids: [n / 2, n / 4, n / 8],
                dims,
                k: 24,
                out_width: out,
                head_hidden: 256,
                ssm_state: 16,
                ssm_expand: 1.5,
                conv_width: 4,
                seed: 42,
            },
            data: DatasetSpec {
                task,
                window_us: window,
                overlap_us: overlap,
                n_points: n,
            },
            loss: LossConfig::default(),
            batch: 32,
            epochs: 30,
            lr: 1e-3,
            sensor_width: sensor.0,
            sensor_height: sensor.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.data.n_points != self.model.n_points {
            return Err(Error::Config(format!(
                "dataset n_points {} != model n_points {}",
                self.data.n_points, self.model.n_points
            )));
        }
        if self.data.task != self.model.task {
            return Err(Error::Config("dataset task != model task".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: BTreeMap<&str, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected `key = value`, got '{line}'"))
            })?;
            let k = k.trim();
            let v = v.trim();
            let key = KEYS
                .iter()
                .find(|&&known| known == k)
                .ok_or_else(|| Error::Config(format!("line {lineno}: unknown key '{k}'")))?;
            if seen.insert(key, v.to_string()).is_some() {
                return Err(Error::Config(format!("line {lineno}: duplicate key '{k}'")));
            }
        }
        let task: Task = match seen.get("task") {
            Some(v) => Task::from_str(v)?,
            None => return Err(Error::Config("missing required key 'task'".into())),
        };
        let mut cfg = Self::defaults(task);
        let get_num = |seen: &BTreeMap<&str, String>, key: &str| -> Result<Option<f64>> {
            match seen.get(key) {
                None => Ok(None),
                Some(v) => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("key '{key}': bad number '{v}'"))),
            }
        };
        let get_usize = |seen: &BTreeMap<&str, String>, key: &str| -> Result<Option<usize>> {
            match seen.get(key) {
                None => Ok(None),
                Some(v) => v
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("key '{key}': bad integer '{v}'"))),
            }
        };
        let get_list3 = |seen: &BTreeMap<&str, String>, key: &str| -> Result<Option<[usize; 3]>> {
            match seen.get(key) {
                None => Ok(None),
                Some(v) => {
                    let parts: Vec<_> = v.split(',').map(str::trim).collect();
                    if parts.len() != 3 {
                        return Err(Error::Config(format!(
                            "key '{key}': want 3 comma-separated values, got '{v}'"
                        )));
                    }
                    let mut out = [0usize; 3];
                    for (o, p) in out.iter_mut().zip(&parts) {
                        *o = p.parse().map_err(|_| {
                            Error::Config(format!("key '{key}': bad integer '{p}'"))
                        })?;
                    }
                    Ok(Some(out))
                }
            }
        };

        if let Some(v) = get_usize(&seen, "n_points")? {
            cfg.model.n_points = v;
            cfg.data.n_points = v;
            cfg.model.centroids = [v / 2, v / 4, v / 8];
        }
        if let Some(v) = get_list3(&seen, "centroids")? {
            cfg.model.centroids = v;
        }
        if let Some(v) = get_list3(&seen, "dims")? {
            cfg.model.dims = v;
        }
        if let Some(v) = get_usize(&seen, "k")? {
            cfg.model.k = v;
        }
        if let Some(v) = get_usize(&seen, "out_width")? {
            cfg.model.out_width = v;
        }
        if let Some(v) = get_usize(&seen, "head_hidden")? {
            cfg.model.head_hidden = v;
        }
        if let Some(v) = get_usize(&seen, "ssm_state")? {
            cfg.model.ssm_state = v;
        }
        if let Some(v) = get_num(&seen, "ssm_expand")? {
            cfg.model.ssm_expand = v;
        }
        if let Some(v) = get_usize(&seen, "conv_width")? {
            cfg.model.conv_width = v;
        }
        if let Some(v) = get_num(&seen, "seed")? {
            cfg.model.seed = v as u64;
        }
        if let Some(v) = get_num(&seen, "window_us")? {
            cfg.data.window_us = v as u64;
        }
        if let Some(v) = get_num(&seen, "overlap_us")? {
            cfg.data.overlap_us = v as u64;
        }
        if let Some(v) = get_usize(&seen, "batch")? {
            cfg.batch = v;
        }
        if let Some(v) = get_usize(&seen, "epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = get_num(&seen, "lr")? {
            cfg.lr = v;
        }
        if let Some(v) = get_num(&seen, "epsilon")? {
            cfg.loss.epsilon = v;
        }
        if let Some(v) = get_num(&seen, "alpha")? {
            cfg.loss.alpha = v;
        }
        if let Some(v) = get_num(&seen, "beta")? {
            cfg.loss.beta = v;
        }
        if let Some(v) = get_num(&seen, "lambda")? {
            cfg.loss.lambda = v;
        }
        if let Some(v) = get_num(&seen, "w_x")? {
            cfg.loss.w_x = v;
        }
        if let Some(v) = get_num(&seen, "w_y")? {
            cfg.loss.w_y = v;
        }
        if let Some(v) = get_usize(&seen, "sensor_width")? {
            cfg.sensor_width = u16::try_from(v)
                .map_err(|_| Error::Config(format!("sensor_width {v} out of range")))?;
        }
        if let Some(v) = get_usize(&seen, "sensor_height")? {
            cfg.sensor_height = u16::try_from(v)
                .map_err(|_| Error::Config(format!("sensor_height {v} out of range")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text)
    }

    /// Canonical rendering: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "alpha = {}\nbatch = {}\nbeta = {}\ncentroids = {},{},{}\nconv_width = {}\ndims = {},{},{}\nepochs = {}\nepsilon = {}\nhead_hidden = {}\nk = {}\nlambda = {}\nlr = {}\nn_points = {}\nout_width = {}\noverlap_us = {}\nseed = {}\nsensor_height = {}\nsensor_width = {}\nssm_expand = {}\nssm_state = {}\ntask = {}\nw_x = {}\nw_y = {}\nwindow_us = {}\n",
            self.loss.alpha,
            self.batch,
            self.loss.beta,
            m.centroids[0],
            m.centroids[1],
            m.centroids[2],
            m.conv_width,
            m.dims[0],
            m.dims[1],
            m.dims[2],
            self.epochs,
            self.loss.epsilon,
            m.head_hidden,
            m.k,
            self.loss.lambda,
            self.lr,
            m.n_points,
            m.out_width,
            self.data.overlap_us,
            m.seed,
            self.sensor_height,
            self.sensor_width,
            m.ssm_expand,
            m.ssm_state,
            m.task,
            self.loss.w_x,
            self.loss.w_y,
            self.data.window_us,
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path.as_ref(), e))
    }
}
