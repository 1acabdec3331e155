//! Model assembly: a three-stage hierarchy over grouped point features, task
//! heads, parameter/FLOP counting, and checkpoint serialization.

use crate::blocks::{Aggregation, BnParams, Phase, Stage, StageBatchGeom};
use crate::error::{Error, Result};
use crate::events::{Label, PointSample, Task};
use crate::geometry::{self, StageGeom};
use crate::ssm::{dt_rank_for, inner_width};
use crate::tensor::optim::Param;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kaiming_uniform, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Everything needed to build the network deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub n_points: usize,
    /// Per-stage centroid counts; strict halving from n_points.
    pub centroids: [usize; 3],
    /// Per-stage feature widths, non-decreasing.
    pub dims: [usize; 3],
    pub k: usize,
    /// Classifier class count, or 6 (pose) / 2 (pupil) for regression.
    pub out_width: usize,
    pub head_hidden: usize,
    pub ssm_state: usize,
    pub ssm_expand: f64,
    pub conv_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_points == 0 {
            bad.push("n_points must be positive".to_string());
        }
        if self.centroids[0] * 2 != self.n_points
            || self.centroids[1] * 2 != self.centroids[0]
            || self.centroids[2] * 2 != self.centroids[1]
        {
            bad.push(format!(
                "centroids {:?} must halve from n_points {}",
                self.centroids, self.n_points
            ));
        }
        if !(self.dims[0] <= self.dims[1] && self.dims[1] <= self.dims[2]) {
            bad.push(format!("dims {:?} must be non-decreasing", self.dims));
        }
        if self.dims[0] == 0 {
            bad.push("dims must be positive".to_string());
        }
        if self.k == 0 || self.k > self.centroids[2] {
            bad.push(format!(
                "k {} must be in 1..={} (smallest stage)",
                self.k, self.centroids[2]
            ));
        }
        let out_ok = match self.task {
            Task::Classify => self.out_width >= 2,
            Task::Cpr => self.out_width == 6,
            Task::Eye => self.out_width == 2,
        };
        if !out_ok {
            bad.push(format!(
                "out_width {} inconsistent with task {}",
                self.out_width, self.task
            ));
        }
        if self.head_hidden == 0 {
            bad.push("head_hidden must be positive".to_string());
        }
        if self.ssm_state == 0 || self.conv_width == 0 {
            bad.push("ssm_state and conv_width must be positive".to_string());
        }
        if inner_width(self.dims[0], self.ssm_expand) == 0 {
            bad.push(format!("ssm_expand {} too small", self.ssm_expand));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Canonical one-line-per-field rendering; the checkpoint digest is the
    /// FNV-1a64 of exactly this text, so it pins the full build config.
    pub fn canonical_text(&self) -> String {
        format!(
            "centroids = {},{},{}\nconv_width = {}\ndims = {},{},{}\nhead_hidden = {}\nk = {}\nn_points = {}\nout_width = {}\nseed = {}\nssm_expand = {}\nssm_state = {}\ntask = {}\n",
            self.centroids[0],
            self.centroids[1],
            self.centroids[2],
            self.conv_width,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.head_hidden,
            self.k,
            self.n_points,
            self.out_width,
            self.seed,
            self.ssm_expand,
            self.ssm_state,
            self.task,
        )
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A point sample with its stage geometry precomputed. Geometry depends only
/// on coordinates, so datasets cache this once per sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub coords: Vec<f32>,
    pub n: usize,
    pub geoms: Vec<StageGeom>,
    pub label: Option<Label>,
    pub degenerate: bool,
}

impl PreparedSample {
    pub fn from_sample(s: &PointSample, cfg: &ModelConfig) -> Result<Self> {
        if s.n() != cfg.n_points {
            return Err(Error::Contract(format!(
                "sample has {} points, model wants {}",
                s.n(),
                cfg.n_points
            )));
        }
        let geoms = geometry::prepare_stages(s.coords(), &cfg.centroids, cfg.k)?;
        Ok(PreparedSample {
            coords: s.coords().to_vec(),
            n: s.n(),
            geoms,
            label: s.label.clone(),
            degenerate: s.degenerate,
        })
    }
}

pub struct Model<E: Real> {
    pub cfg: ModelConfig,
    pub stages: Vec<Stage<E>>,
    pub head_w1: Param<E>,
    pub head_b1: Param<E>,
    pub head_w2: Param<E>,
    pub head_b2: Param<E>,
}

impl<E: Real> Model<E> {
    /// Allocate and initialize all parameters from the config seed.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut stages = Vec::with_capacity(3);
        let mut d_prev = 0usize;
        for (i, &d) in cfg.dims.iter().enumerate() {
            stages.push(Stage::new(
                &format!("stage{}", i + 1),
                d_prev,
                d,
                cfg.ssm_state,
                cfg.ssm_expand,
                cfg.conv_width,
                &mut rng,
            ));
            d_prev = d;
        }
        let d3 = cfg.dims[2];
        let hidden = cfg.head_hidden;
        let out = cfg.out_width;
        Ok(Model {
            head_w1: Param::new("head.w1", kaiming_uniform(&mut rng, vec![d3, hidden], d3)),
            head_b1: Param::new("head.b1", Tensor::zeros(vec![hidden])),
            head_w2: Param::new("head.w2", kaiming_uniform(&mut rng, vec![hidden, out], hidden)),
            head_b2: Param::new("head.b2", Tensor::zeros(vec![out])),
            cfg,
            stages,
        })
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.extend(s.params());
        }
        v.push(&self.head_w1);
        v.push(&self.head_b1);
        v.push(&self.head_w2);
        v.push(&self.head_b2);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.extend(s.params_mut());
        }
        v.push(&mut self.head_w1);
        v.push(&mut self.head_b1);
        v.push(&mut self.head_w2);
        v.push(&mut self.head_b2);
        v
    }

    fn bns(&self) -> Vec<&BnParams<E>> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.push(&s.lift.bn);
            v.push(&s.pre.bn1);
            v.push(&s.pre.bn2);
            v.push(&s.post.bn1);
            v.push(&s.post.bn2);
        }
        v
    }

    /// Batched forward over prepared samples: returns [B, out_width].
    pub fn forward_batch(
        &self,
        tape: &mut Tape<E>,
        batch: &[&PreparedSample],
        agg: Aggregation,
        phase: Phase,
    ) -> Var {
        assert!(!batch.is_empty());
        for s in batch {
            assert_eq!(s.n, self.cfg.n_points, "prepared sample size mismatch");
        }
        let mut feats: Option<Var> = None;
        let mut t_prev = self.cfg.n_points;
        for (i, stage) in self.stages.iter().enumerate() {
            let geoms: Vec<&StageGeom> = batch.iter().map(|s| &s.geoms[i]).collect();
            let gb = StageBatchGeom::<E>::assemble(&geoms, t_prev);
            feats = Some(stage.forward(tape, &gb, feats, agg, phase));
            t_prev = self.cfg.centroids[i];
        }
        let feats = feats.unwrap();
        // Global per-sample max pool over the surviving centroids.
        let pooled = tape.group_max(feats, self.cfg.centroids[2]);
        crate::blocks::tmax(tape, "pooled", pooled);
        let w1 = tape.param(&self.head_w1);
        let b1 = tape.param(&self.head_b1);
        let h = tape.linear(pooled, w1, Some(b1));
        let h = tape.relu(h);
        let w2 = tape.param(&self.head_w2);
        let b2 = tape.param(&self.head_b2);
        let out = tape.linear(h, w2, Some(b2));
        crate::blocks::tmax(tape, "logits", out);
        match self.cfg.task {
            Task::Eye => tape.sigmoid(out),
            _ => out,
        }
    }

    /// Single-sample eval-mode forward (prepares geometry inline).
    pub fn forward(&self, sample: &PointSample) -> Result<Vec<E>> {
        let prep = PreparedSample::from_sample(sample, &self.cfg)?;
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &[&prep], Aggregation::Attention, Phase::Eval);
        Ok(tape.value(out).data().to_vec())
    }

    // ── checkpointing ─────────────────────────────────────────────────────

    fn arrays(&self) -> Vec<(String, Vec<usize>, Vec<E>)> {
        let mut v: Vec<(String, Vec<usize>, Vec<E>)> = self
            .params()
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.value.data().to_vec(),
                )
            })
            .collect();
        for bn in self.bns() {
            let run = bn.running.borrow();
            v.push((
                format!("{}.running_mean", bn.prefix()),
                vec![bn.d],
                run.0.clone(),
            ));
            v.push((
                format!("{}.running_var", bn.prefix()),
                vec![bn.d],
                run.1.clone(),
            ));
        }
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.cfg.digest().to_le_bytes());
        for (name, shape, data) in self.arrays() {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(shape.len() as u8);
            for &d in &shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &data {
                out.extend_from_slice(&v.to_f32_().to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Build from config, then overwrite every array from the checkpoint.
    /// The stored digest must match the config's.
    pub fn load(path: impl AsRef<Path>, cfg: ModelConfig) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes, cfg)
    }

    pub fn from_bytes(bytes: &[u8], cfg: ModelConfig) -> Result<Self> {
        let stored = parse_checkpoint(bytes)?;
        if stored.digest != cfg.digest() {
            return Err(Error::Checkpoint(format!(
                "incompatible checkpoint: config digest {:016x} != expected {:016x}",
                stored.digest,
                cfg.digest()
            )));
        }
        let mut model = Self::build(cfg)?;
        let mut want: Vec<(String, Vec<usize>)> = model
            .arrays()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for rec in &stored.arrays {
            let pos = want
                .iter()
                .position(|(n, _)| n == &rec.name)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected array '{}' in checkpoint", rec.name))
                })?;
            let (_, shape) = want.swap_remove(pos);
            if shape != rec.shape {
                return Err(Error::Checkpoint(format!(
                    "array '{}' has shape {:?}, model wants {:?}",
                    rec.name, rec.shape, shape
                )));
            }
            model.set_array(&rec.name, &rec.data);
        }
        if !want.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing {} arrays (first: '{}')",
                want.len(),
                want[0].0
            )));
        }
        Ok(model)
    }

    fn set_array(&mut self, name: &str, data: &[f32]) {
        for p in self.params_mut() {
            if p.name == name {
                for (dst, &src) in p.value.data_mut().iter_mut().zip(data) {
                    *dst = E::from_f32_(src);
                }
                return;
            }
        }
        for bn in self.bns() {
            let mean_name = format!("{}.running_mean", bn.prefix());
            let var_name = format!("{}.running_var", bn.prefix());
            if name == mean_name || name == var_name {
                let mut run = bn.running.borrow_mut();
                let dst = if name == mean_name { &mut run.0 } else { &mut run.1 };
                for (d, &s) in dst.iter_mut().zip(data) {
                    *d = E::from_f32_(s);
                }
                return;
            }
        }
        unreachable!("set_array called with unknown name {name}");
    }
}

pub const CKPT_MAGIC: &[u8; 4] = b"EMCK";
pub const CKPT_VERSION: u32 = 1;

struct StoredArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

struct StoredCheckpoint {
    digest: u64,
    arrays: Vec<StoredArray>,
}

/// Decode the checkpoint container. Records run to end-of-file; any
/// truncation is a clean error.
fn parse_checkpoint(bytes: &[u8]) -> Result<StoredCheckpoint> {
    let err = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < 16 {
        return Err(err("truncated checkpoint header".into()));
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(err("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let digest = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let mut arrays = Vec::new();
    let mut at = 16usize;
    while at < bytes.len() {
        let need = |n: usize, at: usize| {
            if at + n > bytes.len() {
                Err(err(format!("truncated checkpoint at byte {at}")))
            } else {
                Ok(())
            }
        };
        need(2, at)?;
        let name_len = u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()) as usize;
        at += 2;
        need(name_len, at)?;
        let name = std::str::from_utf8(&bytes[at..at + name_len])
            .map_err(|_| err(format!("non-UTF-8 array name at byte {at}")))?
            .to_string();
        at += name_len;
        need(1, at)?;
        let rank = bytes[at] as usize;
        at += 1;
        need(rank * 4, at)?;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for r in 0..rank {
            let d = u32::from_le_bytes(bytes[at + r * 4..at + r * 4 + 4].try_into().unwrap())
                as usize;
            shape.push(d);
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| err(format!("array '{name}' shape overflows")))?;
        }
        at += rank * 4;
        need(numel * 4, at)?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f32::from_le_bytes(
                bytes[at + i * 4..at + i * 4 + 4].try_into().unwrap(),
            ));
        }
        at += numel * 4;
        arrays.push(StoredArray { name, shape, data });
    }
    Ok(StoredCheckpoint { digest, arrays })
}

// ── counting ───────────────────────────────────────────────────────────────

/// Trainable scalars in one stage.
pub fn count_stage_params(
    d_in: usize,
    d: usize,
    state: usize,
    expand: f64,
    conv_width: usize,
) -> u64 {
    let inner = inner_width(d, expand) as u64;
    let r = dt_rank_for(d) as u64;
    let (d_in, d, state, cw) = (d_in as u64, d as u64, state as u64, conv_width as u64);
    let lift = (3 + 2 * d_in) * d + 2 * d;
    let resb = 2 * d * d + 4 * d;
    let tag = d + 1;
    let seq = d                      // pre-norm gain
        + d * 2 * inner              // in_proj
        + inner * cw + inner         // conv w + b
        + inner * (r + 2 * state)    // x_proj
        + r * inner + inner          // dt_proj + bias
        + inner * state              // a_log
        + inner                      // skip
        + inner * d; // out_proj
    lift + resb + tag + seq + resb
}

pub fn count_head_params(d_in: usize, hidden: usize, out: usize) -> u64 {
    (d_in * hidden + hidden + hidden * out + out) as u64
}

/// Exact trainable parameter count for a config (closed form; asserted equal
/// to the built model's sum in tests).
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let mut total = 0u64;
    let mut d_prev = 0usize;
    for &d in &cfg.dims {
        total += count_stage_params(d_prev, d, cfg.ssm_state, cfg.ssm_expand, cfg.conv_width);
        d_prev = d;
    }
    total + count_head_params(cfg.dims[2], cfg.head_hidden, cfg.out_width)
}

/// FLOPs for one forward pass at `n` points: 2x multiply-accumulates over
/// linear layers, attention scoring and mixing, the scan recurrence, and the
/// sampling/grouping distance computations (8 FLOPs per point pair).
pub fn count_flops(cfg: &ModelConfig, n: usize) -> u64 {
    let k = cfg.k as u64;
    let state = cfg.ssm_state as u64;
    let cw = cfg.conv_width as u64;
    let mut flops = 0u64;
    let mut t_prev = n as u64;
    let mut d_prev = 0u64;
    for (i, &dd) in cfg.dims.iter().enumerate() {
        let d = dd as u64;
        let t = cfg.centroids[i] as u64;
        let inner = inner_width(dd, cfg.ssm_expand) as u64;
        let r = dt_rank_for(dd) as u64;
        // Farthest-point selection and KNN both touch t * t_prev pairs.
        flops += 8 * t_prev * t * 2;
        let rows_g = t * k;
        flops += 2 * rows_g * (3 + 2 * d_prev) * d; // lift
        flops += 2 * rows_g * 2 * d * d; // pre residual block
        flops += 2 * rows_g * d; // attention scoring
        flops += 2 * rows_g * d; // attention weighted sum
        flops += 4 * t * d; // pre-norm
        flops += 2 * t * d * 2 * inner; // in_proj
        flops += 2 * t * inner * cw; // conv
        flops += 2 * t * inner * (r + 2 * state); // x_proj
        flops += 2 * t * r * inner; // dt_proj
        flops += 2 * t * inner * state * 4; // scan recurrence
        flops += 2 * t * inner; // skip path
        flops += 2 * t * inner * d; // out_proj
        flops += 2 * t * 2 * d * d; // post residual block
        t_prev = t;
        d_prev = d;
    }
    let (d3, h, out) = (
        cfg.dims[2] as u64,
        cfg.head_hidden as u64,
        cfg.out_width as u64,
    );
    flops + 2 * (d3 * h + h * out)
}

pub fn classify_config(n_points: usize, dims: [usize; 3], classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        task: Task::Classify,
        n_points,
        centroids: [n_points / 2, n_points / 4, n_points / 8],
        dims,
        k: 24,
        out_width: classes,
        head_hidden: 256,
        ssm_state: 16,
        ssm_expand: 1.5,
        conv_width: 4,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            task: Task::Classify,
            n_points: 32,
            centroids: [16, 8, 4],
            dims: [8, 8, 16],
            k: 4,
            out_width: 3,
            head_hidden: 16,
            ssm_state: 4,
            ssm_expand: 1.5,
            conv_width: 4,
            seed,
        }
    }

    fn sample_for(cfg: &ModelConfig, seed: u64) -> PointSample {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.n_points;
        let mut coords = Vec::with_capacity(n * 3);
        for i in 0..n {
            coords.push(rng.gen_range(0.0..1.0));
            coords.push(rng.gen_range(0.0..1.0));
            coords.push(i as f32 / n as f32);
        }
        PointSample::new(coords, 0, Some(Label::Class(0)), false)
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(small_cfg(7)).unwrap();
        let b = Model::<f32>::build(small_cfg(7)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
    }

    #[test]
    fn different_seeds_give_different_outputs() {
        let a = Model::<f32>::build(small_cfg(1)).unwrap();
        let b = Model::<f32>::build(small_cfg(2)).unwrap();
        let s = sample_for(&a.cfg, 5);
        let ya = a.forward(&s).unwrap();
        let yb = b.forward(&s).unwrap();
        assert_ne!(ya, yb);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = Model::<f32>::build(small_cfg(3)).unwrap();
        let s = sample_for(&m.cfg, 9);
        assert_eq!(m.forward(&s).unwrap(), m.forward(&s).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_n() {
        let m = Model::<f32>::build(small_cfg(3)).unwrap();
        let mut bad_cfg = small_cfg(3);
        bad_cfg.n_points = 64;
        bad_cfg.centroids = [32, 16, 8];
        let s = sample_for(&bad_cfg, 1);
        assert!(matches!(m.forward(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn eye_outputs_in_unit_interval() {
        let mut cfg = small_cfg(11);
        cfg.task = Task::Eye;
        cfg.out_width = 2;
        let m = Model::<f32>::build(cfg).unwrap();
        let s = sample_for(&m.cfg, 2);
        let y = m.forward(&s).unwrap();
        assert_eq!(y.len(), 2);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0), "{y:?}");
    }

    #[test]
    fn config_validation_reports_offenders() {
        let mut cfg = small_cfg(0);
        cfg.centroids = [16, 8, 2];
        cfg.dims = [16, 8, 8];
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("halve"), "{e}");
        assert!(e.contains("non-decreasing"), "{e}");
    }

    #[test]
    fn count_params_matches_built_model() {
        for (n, dims) in [(64usize, [8usize, 16, 32]), (32, [8, 8, 16])] {
            let mut cfg = small_cfg(0);
            cfg.n_points = n;
            cfg.centroids = [n / 2, n / 4, n / 8];
            cfg.dims = dims;
            let m = Model::<f32>::build(cfg.clone()).unwrap();
            let actual: u64 = m.params().iter().map(|p| p.value.numel() as u64).sum();
            assert_eq!(count_params(&cfg), actual, "{dims:?}");
        }
    }

    #[test]
    fn head_param_count_hand_value() {
        // 128*256 + 256 + 256*10 + 10 = 35594
        assert_eq!(count_head_params(128, 256, 10), 35_594);
    }

    #[test]
    fn flops_double_when_points_double() {
        for dims in [[32usize, 64, 128], [64, 128, 256]] {
            let cfg = classify_config(1024, dims, 10, 0);
            let f1 = count_flops(&cfg, 1024) as f64;
            let cfg2 = classify_config(2048, dims, 10, 0);
            let f2 = count_flops(&cfg2, 2048) as f64;
            let ratio = f2 / f1;
            assert!((1.9..=2.1).contains(&ratio), "{dims:?}: ratio {ratio}");
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let m = Model::<f32>::build(small_cfg(5)).unwrap();
        let bytes = m.to_bytes();
        let m2 = Model::<f32>::from_bytes(&bytes, small_cfg(5)).unwrap();
        assert_eq!(bytes, m2.to_bytes(), "save -> load -> save must be identical");
    }

    #[test]
    fn checkpoint_rejects_cross_config_and_truncation() {
        let m = Model::<f32>::build(small_cfg(5)).unwrap();
        let bytes = m.to_bytes();
        let other = small_cfg(6); // different seed -> different digest
        let e = Model::<f32>::from_bytes(&bytes, other).err().unwrap();
        assert!(matches!(e, Error::Checkpoint(_)), "{e}");
        assert!(e.to_string().contains("digest"), "{e}");

        let e = Model::<f32>::from_bytes(&bytes[..bytes.len() - 3], small_cfg(5))
            .err()
            .unwrap();
        assert!(e.to_string().contains("truncated"), "{e}");
    }

    #[test]
    fn fnv_known_vector() {
        // FNV-1a 64 of empty input is the offset basis.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
