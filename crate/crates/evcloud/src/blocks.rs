//! Per-stage building blocks: batch-normed linear lift, residual MLP block,
//! temporal attention aggregation (with a max-pool ablation), and the full
//! stage composition around the sequence block.

use crate::ssm::MambaParams;
use crate::tensor::optim::Param;
use crate::tensor::tape::{BnMode, Tape, Var};
use crate::tensor::{kaiming_uniform, Real, Tensor};
use rand::Rng;
use std::cell::RefCell;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

thread_local! {
    pub static TRACE: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

pub fn tmax<E: Real>(tape: &Tape<E>, what: &str, v: Var) {
    if TRACE.with(|t| t.get()) {
        let m = tape
            .value(v)
            .data()
            .iter()
            .fold(E::zero(), |a, &x| a.max(x.abs()));
        eprintln!("  trace {what}: max|x| {m}");
    }
}

/// Forward-pass mode.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; running statistics updated in place.
    Train,
    /// Batch statistics; running statistics untouched. Pure — used by
    /// gradient checks.
    Static,
    /// Running statistics.
    Eval,
}

/// Batch norm: trainable gamma/beta plus running statistics (interior
/// mutability so a shared model reference can still update them in train
/// mode; the crate is single-threaded).
pub struct BnParams<E: Real> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub running: RefCell<(Vec<E>, Vec<E>)>,
    pub d: usize,
}

impl<E: Real> BnParams<E> {
    pub fn new(prefix: &str, d: usize) -> Self {
        BnParams {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::full(vec![d], E::one())),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(vec![d])),
            running: RefCell::new((vec![E::zero(); d], vec![E::one(); d])),
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, phase: Phase) -> Var {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let eps = E::lit(BN_EPS);
        match phase {
            Phase::Train => {
                let mut run = self.running.borrow_mut();
                let (rm, rv) = &mut *run;
                tape.batch_norm(
                    x,
                    g,
                    b,
                    eps,
                    BnMode::Train {
                        momentum: E::lit(BN_MOMENTUM),
                        running: Some((rm, rv)),
                    },
                )
            }
            Phase::Static => tape.batch_norm(
                x,
                g,
                b,
                eps,
                BnMode::Train {
                    momentum: E::lit(BN_MOMENTUM),
                    running: None,
                },
            ),
            Phase::Eval => {
                let run = self.running.borrow();
                tape.batch_norm(
                    x,
                    g,
                    b,
                    eps,
                    BnMode::Eval {
                        mean: &run.0,
                        var: &run.1,
                    },
                )
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    /// Name prefix shared by this layer's arrays (checkpoints store the
    /// running stats under `<prefix>.running_mean` / `.running_var`).
    pub fn prefix(&self) -> &str {
        self.gamma
            .name
            .strip_suffix(".gamma")
            .expect("bn gamma name ends with .gamma")
    }
}

/// Linear (no bias) -> batch norm -> relu.
pub struct LinBn<E: Real> {
    pub w: Param<E>,
    pub bn: BnParams<E>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<E: Real> LinBn<E> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        LinBn {
            w: Param::new(
                format!("{prefix}.w"),
                kaiming_uniform(rng, vec![d_in, d_out], d_in),
            ),
            bn: BnParams::new(&format!("{prefix}.bn"), d_out),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, phase: Phase) -> Var {
        let w = tape.param(&self.w);
        let h = tape.linear(x, w, None);
        let n = self.bn.forward(tape, h, phase);
        tape.relu(n)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = vec![&self.w];
        v.extend(self.bn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v = vec![&mut self.w];
        v.extend(self.bn.params_mut());
        v
    }
}

/// relu(x + BN(Lin(relu(BN(Lin(x)))))), equal widths throughout.
pub struct ResBlock<E: Real> {
    pub lin1: Param<E>,
    pub bn1: BnParams<E>,
    pub lin2: Param<E>,
    pub bn2: BnParams<E>,
    pub d: usize,
}

impl<E: Real> ResBlock<E> {
    pub fn new(prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            lin1: Param::new(
                format!("{prefix}.lin1"),
                kaiming_uniform(rng, vec![d, d], d),
            ),
            bn1: BnParams::new(&format!("{prefix}.bn1"), d),
            lin2: Param::new(
                format!("{prefix}.lin2"),
                kaiming_uniform(rng, vec![d, d], d),
            ),
            bn2: BnParams::new(&format!("{prefix}.bn2"), d),
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var, phase: Phase) -> Var {
        assert_eq!(
            tape.value(x).dims2().1,
            self.d,
            "res_block width mismatch"
        );
        let w1 = tape.param(&self.lin1);
        let h = tape.linear(x, w1, None);
        let h = self.bn1.forward(tape, h, phase);
        let h = tape.relu(h);
        let w2 = tape.param(&self.lin2);
        let h = tape.linear(h, w2, None);
        let h = self.bn2.forward(tape, h, phase);
        let s = tape.add(x, h);
        tape.relu(s)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = vec![&self.lin1];
        v.extend(self.bn1.params());
        v.push(&self.lin2);
        v.extend(self.bn2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v = vec![&mut self.lin1];
        v.extend(self.bn1.params_mut());
        v.push(&mut self.lin2);
        v.extend(self.bn2.params_mut());
        v
    }
}

/// Temporal attention aggregation: score each neighbor with a D -> 1 linear,
/// softmax over the K axis, weighted-sum the neighbor features.
pub struct TagParams<E: Real> {
    pub w: Param<E>,
    pub b: Param<E>,
    pub d: usize,
}

impl<E: Real> TagParams<E> {
    pub fn new(prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        TagParams {
            w: Param::new(format!("{prefix}.w"), kaiming_uniform(rng, vec![d, 1], d)),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(vec![1])),
            d,
        }
    }

    /// s: [groups*K, D] -> [groups, D].
    pub fn forward(&self, tape: &mut Tape<E>, s: Var, groups: usize, k: usize) -> Var {
        let (rows, _) = tape.value(s).dims2();
        assert_eq!(rows, groups * k, "tag: rows {rows} != {groups}x{k}");
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let scores = tape.linear(s, w, Some(b));
        let scores = tape.reshape(scores, vec![groups, k]);
        let weights = tape.softmax(scores, 1);
        tape.group_weighted_sum(s, weights)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Ablation baseline: per-feature max over each group of K rows.
pub fn max_aggregate<E: Real>(tape: &mut Tape<E>, s: Var, k: usize) -> Var {
    tape.group_max(s, k)
}

/// Which aggregation a stage uses over the K axis.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Attention,
    Max,
}

/// Batch-assembled geometry for one stage: indices are into the previous
/// stage's row-stacked [B*T_prev, D] feature tensor.
pub struct StageBatchGeom<E: Real> {
    /// [B*T'*K] neighbor gather rows.
    pub group_idx: Vec<u32>,
    /// [B*T'*K] centroid gather rows (each centroid repeated K times).
    pub centroid_rep: Vec<u32>,
    /// Standardized offsets, [B*T'*K, 3].
    pub rel: Tensor<E>,
    /// Per-sample centroid gather rows, [B*T'] (for carrying coords/labels).
    pub centroid_rows: Vec<u32>,
    pub batch: usize,
    pub t_prime: usize,
    pub k: usize,
}

impl<E: Real> StageBatchGeom<E> {
    /// Stack per-sample stage geometry, offsetting indices by each sample's
    /// row base in the previous stage tensor.
    pub fn assemble(samples: &[&crate::geometry::StageGeom], t_prev: usize) -> Self {
        assert!(!samples.is_empty());
        let t_prime = samples[0].t_prime;
        let k = samples[0].groups.k;
        let b = samples.len();
        let mut group_idx = Vec::with_capacity(b * t_prime * k);
        let mut centroid_rep = Vec::with_capacity(b * t_prime * k);
        let mut centroid_rows = Vec::with_capacity(b * t_prime);
        let mut rel = Vec::with_capacity(b * t_prime * k * 3);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.t_prime, t_prime, "ragged batch");
            assert_eq!(s.groups.k, k);
            let base = (i * t_prev) as u32;
            for &g in &s.groups.indices {
                group_idx.push(base + g);
            }
            for &c in &s.centroids {
                centroid_rows.push(base + c);
                for _ in 0..k {
                    centroid_rep.push(base + c);
                }
            }
            rel.extend(s.groups.rel_coords.iter().map(|&v| E::from_f32_(v)));
        }
        StageBatchGeom {
            group_idx,
            centroid_rep,
            rel: Tensor::new(vec![b * t_prime * k, 3], rel),
            centroid_rows,
            batch: b,
            t_prime,
            k,
        }
    }
}

/// One full stage: lift -> residual block -> aggregation over K -> sequence
/// block over the T' centroids -> residual block.
pub struct Stage<E: Real> {
    pub lift: LinBn<E>,
    pub pre: ResBlock<E>,
    pub tag: TagParams<E>,
    pub seq: MambaParams<E>,
    pub post: ResBlock<E>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<E: Real> Stage<E> {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        state: usize,
        expand: f64,
        conv_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let group_width = 3 + 2 * d_in;
        Stage {
            lift: LinBn::new(&format!("{prefix}.lift"), group_width, d_out, rng),
            pre: ResBlock::new(&format!("{prefix}.pre"), d_out, rng),
            tag: TagParams::new(&format!("{prefix}.tag"), d_out, rng),
            seq: MambaParams::new(&format!("{prefix}.seq"), d_out, state, expand, conv_width, rng),
            post: ResBlock::new(&format!("{prefix}.post"), d_out, rng),
            d_in,
            d_out,
        }
    }

    /// prev_feats: [B*T_prev, d_in] (None only when d_in == 0, i.e. stage 1).
    /// Returns [B*T', d_out].
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        geom: &StageBatchGeom<E>,
        prev_feats: Option<Var>,
        agg: Aggregation,
        phase: Phase,
    ) -> Var {
        let rel = tape.leaf(geom.rel.clone());
        let rows = match (self.d_in, prev_feats) {
            (0, _) => rel,
            (_, Some(prev)) => {
                let nbr = tape.gather_rows(prev, &geom.group_idx);
                let cent = tape.gather_rows(prev, &geom.centroid_rep);
                tape.concat_cols(&[rel, nbr, cent])
            }
            (d, None) => panic!("stage with d_in={d} needs previous features"),
        };
        tmax(tape, "rows", rows);
        let h = self.lift.forward(tape, rows, phase);
        tmax(tape, "lift", h);
        let h = self.pre.forward(tape, h, phase);
        tmax(tape, "pre", h);
        let groups = geom.batch * geom.t_prime;
        let sa = match agg {
            Aggregation::Attention => self.tag.forward(tape, h, groups, geom.k),
            Aggregation::Max => max_aggregate(tape, h, geom.k),
        };
        tmax(tape, "agg", sa);
        let st = self.seq.forward(tape, sa, geom.batch, geom.t_prime);
        tmax(tape, "seq", st);
        let out = self.post.forward(tape, st, phase);
        tmax(tape, "post", out);
        out
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = self.lift.params();
        v.extend(self.pre.params());
        v.extend(self.tag.params());
        v.extend(self.seq.params());
        v.extend(self.post.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v = self.lift.params_mut();
        v.extend(self.pre.params_mut());
        v.extend(self.tag.params_mut());
        v.extend(self.seq.params_mut());
        v.extend(self.post.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn res_block_with_zero_weights_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ResBlock::<f32>::new("rb", 3, &mut rng);
        for p in [&mut block.lin1, &mut block.lin2] {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(
            vec![2, 3],
            vec![1.0, -2.0, 0.5, -0.1, 3.0, -4.0],
        ));
        let y = block.forward(&mut tape, x, Phase::Static);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn res_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResBlock::<f32>::new("rb", 8, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![5, 8], |i| (i as f32).sin()));
        let y = block.forward(&mut tape, x, Phase::Static);
        assert_eq!(tape.value(y).shape(), &[5, 8]);
    }

    #[test]
    fn tag_uniform_when_scorer_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tag = TagParams::<f32>::new("t", 2, &mut rng);
        tag.w.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        // one group, K=3
        let s = tape.leaf(Tensor::new(vec![3, 2], vec![1., 4., 2., 5., 6., 9.]));
        let y = tag.forward(&mut tape, s, 1, 3);
        let d = tape.value(y).data();
        assert!((d[0] - 3.0).abs() < 1e-6, "mean over K: {d:?}");
        assert!((d[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn tag_k1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tag = TagParams::<f32>::new("t", 2, &mut rng);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]));
        let y = tag.forward(&mut tape, s, 2, 1);
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn tag_hand_weighted_sum() {
        // S1=[1,0], S2=[0,1]; scorer picks scores [ln2, 0] -> SA=[2/3, 1/3].
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tag = TagParams::<f32>::new("t", 2, &mut rng);
        tag.w.value.data_mut().copy_from_slice(&[std::f32::consts::LN_2, 0.0]);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]));
        let y = tag.forward(&mut tape, s, 1, 2);
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-6, "{d:?}");
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn tag_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tag = TagParams::<f64>::new("t", 3, &mut rng);
        let (groups, k, d) = (4usize, 5usize, 3usize);
        let data: Vec<f64> = (0..groups * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![groups * k, d], data.clone()));
        let y = tag.forward(&mut tape, s, groups, k);
        let got = tape.value(y).data().to_vec();

        let wd = tag.w.value.data();
        let bd = tag.b.value.data()[0];
        for g in 0..groups {
            // scores -> stable softmax -> weighted sum, straight from math
            let scores: Vec<f64> = (0..k)
                .map(|kk| {
                    let row = &data[(g * k + kk) * d..(g * k + kk + 1) * d];
                    row.iter().zip(wd).map(|(a, b)| a * b).sum::<f64>() + bd
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(weights.iter().all(|&w| w >= 0.0));
            for j in 0..d {
                let want: f64 = (0..k)
                    .map(|kk| weights[kk] * data[(g * k + kk) * d + j])
                    .sum();
                let gotv = got[g * d + j];
                assert!((gotv - want).abs() < 1e-9, "g{g} j{j}: {gotv} vs {want}");
            }
        }
    }

    #[test]
    fn max_aggregate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (groups, k, d) = (3usize, 4usize, 5usize);
        let data: Vec<f32> = (0..groups * k * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![groups * k, d], data.clone()));
        let y = max_aggregate(&mut tape, s, k);
        for g in 0..groups {
            for j in 0..d {
                let want = (0..k)
                    .map(|kk| data[(g * k + kk) * d + j])
                    .fold(f32::MIN, f32::max);
                assert_eq!(tape.value(y).data()[g * d + j], want);
            }
        }
    }

    #[test]
    fn res_block_gradients_match_finite_differences() {
        use crate::tensor::check;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = ResBlock::<f64>::new("rb", 3, &mut rng);
        // Nudge inputs away from relu kinks by keeping values generic.
        let x = Tensor::new(
            vec![4, 3],
            (0..12).map(|i| 0.37 * ((i as f64) + 0.21).sin() + 0.11).collect(),
        );
        let w1 = block.lin1.value.clone();
        let w2 = block.lin2.value.clone();
        check::assert_grads("res_block", &[x, w1, w2], |tape, v| {
            let g1 = tape.leaf_grad(Tensor::full(vec![3], 1.0));
            let b1 = tape.leaf_grad(Tensor::zeros(vec![3]));
            let g2 = tape.leaf_grad(Tensor::full(vec![3], 1.0));
            let b2 = tape.leaf_grad(Tensor::zeros(vec![3]));
            let h = tape.linear(v[0], v[1], None);
            let h = tape.batch_norm(h, g1, b1, 1e-5, BnMode::Train { momentum: 0.9, running: None });
            let h = tape.relu(h);
            let h = tape.linear(h, v[2], None);
            let h = tape.batch_norm(h, g2, b2, 1e-5, BnMode::Train { momentum: 0.9, running: None });
            let s = tape.add(v[0], h);
            let r = tape.relu(s);
            tape.sum_all(r)
        });
    }

    #[test]
    fn stage_shapes_and_grad_reachability() {
        use crate::geometry;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 32usize;
        let coords: Vec<f32> = (0..n)
            .flat_map(|i| {
                vec![
                    rng.gen_range(0.0..1.0f32),
                    rng.gen_range(0.0..1.0f32),
                    i as f32 / n as f32,
                ]
            })
            .collect();
        let geoms = geometry::prepare_stages(&coords, &[16, 8], 4).unwrap();
        let stage1 = Stage::<f32>::new("s1", 0, 8, 4, 1.5, 4, &mut rng);
        let stage2 = Stage::<f32>::new("s2", 8, 12, 4, 1.5, 4, &mut rng);

        let mut tape = Tape::new();
        let g1 = StageBatchGeom::assemble(&[&geoms[0]], n);
        let f1 = stage1.forward(&mut tape, &g1, None, Aggregation::Attention, Phase::Static);
        assert_eq!(tape.value(f1).shape(), &[16, 8]);
        let g2 = StageBatchGeom::assemble(&[&geoms[1]], 16);
        let f2 = stage2.forward(&mut tape, &g2, Some(f1), Aggregation::Attention, Phase::Static);
        assert_eq!(tape.value(f2).shape(), &[8, 12]);

        let loss = tape.sum_all(f2);
        tape.backward(loss);
        // Gradient must reach stage-1 parameters through the whole stack.
        let g = tape.grad_by_name("s1.lift.w").expect("stage-1 lift grad");
        assert!(g.iter().any(|&v| v != 0.0), "stage-1 gradient is all zero");
    }
}
