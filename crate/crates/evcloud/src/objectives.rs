//! Loss builders (on-tape, differentiable) and plain evaluation metrics.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Label smoothing mass moved off the true class.
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub w_x: f64,
    pub w_y: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.1,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1e-5,
            w_x: 1.0,
            w_y: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon {} must be in [0,1)",
                self.epsilon
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("w_x", self.w_x),
            ("w_y", self.w_y),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Mean label-smoothed cross-entropy over the batch. The target puts 1-eps
/// on the true class and eps/(n-1) on each other class.
pub fn label_smooth_ce<E: Real>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[u32],
    epsilon: f64,
) -> Result<Var> {
    let (b, n) = tape.value(logits).dims2();
    if n < 2 {
        return Err(Error::Contract(format!("need >= 2 classes, got {n}")));
    }
    if labels.len() != b {
        return Err(Error::Contract(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    let off = epsilon / (n as f64 - 1.0);
    let mut target = Tensor::full(vec![b, n], E::lit(off));
    for (r, &c) in labels.iter().enumerate() {
        if c as usize >= n {
            return Err(Error::Contract(format!("class {c} out of range 0..{n}")));
        }
        target.data_mut()[r * n + c as usize] = E::lit(1.0 - epsilon);
    }
    let lsm = tape.log_softmax(logits, 1);
    let tgt = tape.leaf(target);
    let prod = tape.mul(tgt, lsm);
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, E::lit(-1.0 / b as f64)))
}

/// Pose loss: alpha*||dp||_2 + beta*||dq||_2 (means over the batch, norms not
/// squared) + lambda * sum of squared weights.
pub fn cpr_loss<E: Real>(
    tape: &mut Tape<E>,
    pred: Var,
    target: Var,
    weights: &[Var],
    cfg: &LossConfig,
) -> Var {
    let (b, w) = tape.value(pred).dims2();
    assert_eq!(w, 6, "pose prediction must be [B,6]");
    assert_eq!(tape.value(target).dims2(), (b, 6));
    let diff = tape.sub(pred, target);
    let norm_of = |tape: &mut Tape<E>, x: Var, start: usize| {
        let part = tape.slice_cols(x, start, 3);
        let sq = tape.mul(part, part);
        let rows = tape.row_sum(sq);
        let norms = tape.sqrt(rows);
        let s = tape.sum_all(norms);
        tape.scale(s, E::lit(1.0 / b as f64))
    };
    let p_term = norm_of(tape, diff, 0);
    let q_term = norm_of(tape, diff, 3);
    let p_term = tape.scale(p_term, E::lit(cfg.alpha));
    let q_term = tape.scale(q_term, E::lit(cfg.beta));
    let mut loss = tape.add(p_term, q_term);
    if cfg.lambda > 0.0 {
        let mut reg: Option<Var> = None;
        for &w in weights {
            let sq = tape.mul(w, w);
            let s = tape.sum_all(sq);
            reg = Some(match reg {
                Some(r) => tape.add(r, s),
                None => s,
            });
        }
        if let Some(r) = reg {
            let r = tape.scale(r, E::lit(cfg.lambda));
            loss = tape.add(loss, r);
        }
    }
    loss
}

/// Weighted MSE for 2-d regression: w_x*mean(dx^2) + w_y*mean(dy^2).
pub fn wmse_loss<E: Real>(tape: &mut Tape<E>, pred: Var, target: Var, w_x: f64, w_y: f64) -> Var {
    let (b, w) = tape.value(pred).dims2();
    assert_eq!(w, 2, "pupil prediction must be [B,2]");
    assert_eq!(tape.value(target).dims2(), (b, 2));
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    let col = |tape: &mut Tape<E>, c: usize, w: f64| {
        let part = tape.slice_cols(sq, c, 1);
        let s = tape.sum_all(part);
        tape.scale(s, E::lit(w / b as f64))
    };
    let x_term = col(tape, 0, w_x);
    let y_term = col(tape, 1, w_y);
    tape.add(x_term, y_term)
}

// ── plain metrics ──────────────────────────────────────────────────────────

/// Fraction of rows whose argmax (ties -> lowest index) equals the label.
pub fn accuracy(logits: &[f32], n_classes: usize, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy over empty set".into()));
    }
    assert_eq!(logits.len(), labels.len() * n_classes);
    let mut correct = 0usize;
    for (i, &lab) in labels.iter().enumerate() {
        let row = &logits[i * n_classes..(i + 1) * n_classes];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best as u32 == lab {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// (translation error in meters, orientation error in degrees).
/// Orientation inputs are radian Euler triplets; the Euclidean norm of the
/// angle difference is converted to degrees.
pub fn pose_error(p_hat: [f64; 3], q_hat: [f64; 3], p: [f64; 3], q: [f64; 3]) -> (f64, f64) {
    let norm3 = |a: [f64; 3], b: [f64; 3]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    (norm3(p_hat, p), norm3(q_hat, q).to_degrees())
}

/// Fraction of predictions strictly closer than `p` pixels to ground truth.
pub fn pixel_rate(preds: &[[f64; 2]], gts: &[[f64; 2]], p: f64) -> f64 {
    assert_eq!(preds.len(), gts.len());
    assert!(!preds.is_empty());
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(a, g)| {
            let d2 = (a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2);
            d2.sqrt() < p
        })
        .count();
    hits as f64 / preds.len() as f64
}

/// Mean squared Euclidean distance in pixels.
pub fn mse_px(preds: &[[f64; 2]], gts: &[[f64; 2]]) -> f64 {
    assert_eq!(preds.len(), gts.len());
    assert!(!preds.is_empty());
    preds
        .iter()
        .zip(gts)
        .map(|(a, g)| (a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2))
        .sum::<f64>()
        / preds.len() as f64
}

/// Mean Euclidean pixel distance.
pub fn mean_px_error(preds: &[[f64; 2]], gts: &[[f64; 2]]) -> f64 {
    assert_eq!(preds.len(), gts.len());
    assert!(!preds.is_empty());
    preds
        .iter()
        .zip(gts)
        .map(|(a, g)| ((a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2)).sqrt())
        .sum::<f64>()
        / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_of<E: Real>(tape: &Tape<E>, v: Var) -> f64 {
        tape.value(v).data()[0].to_f64_()
    }

    #[test]
    fn ce_eps_zero_hand_value() {
        // softmax of [ln 0.9, ln 0.1] is [0.9, 0.1]
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]));
        let loss = label_smooth_ce(&mut tape, logits, &[0], 0.0).unwrap();
        assert!((scalar_of(&tape, loss) - 0.10536).abs() < 1e-4);
    }

    #[test]
    fn ce_smoothed_hand_value() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]));
        let loss = label_smooth_ce(&mut tape, logits, &[0], 0.1).unwrap();
        // -(0.9 ln 0.9 + 0.1 ln 0.1)
        assert!((scalar_of(&tape, loss) - 0.32508).abs() < 1e-4);
    }

    #[test]
    fn ce_uniform_is_ln_n() {
        for n in [2usize, 5, 17] {
            let mut tape = Tape::<f64>::new();
            let logits = tape.leaf(Tensor::zeros(vec![1, n]));
            for eps in [0.0, 0.1, 0.5] {
                let loss = label_smooth_ce(&mut tape, logits, &[1], eps).unwrap();
                assert!(
                    (scalar_of(&tape, loss) - (n as f64).ln()).abs() < 1e-9,
                    "n={n} eps={eps}"
                );
            }
        }
    }

    #[test]
    fn ce_rejects_bad_class_and_width() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 3]));
        assert!(label_smooth_ce(&mut tape, logits, &[3], 0.0).is_err());
        let narrow = tape.leaf(Tensor::zeros(vec![1, 1]));
        assert!(label_smooth_ce(&mut tape, narrow, &[0], 0.0).is_err());
    }

    #[test]
    fn ce_eps_zero_matches_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(2..8);
            let b = rng.gen_range(1..5);
            let data: Vec<f64> = (0..b * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<u32> = (0..b).map(|_| rng.gen_range(0..n) as u32).collect();
            let mut tape = Tape::<f64>::new();
            let logits = tape.leaf(Tensor::new(vec![b, n], data.clone()));
            let loss = label_smooth_ce(&mut tape, logits, &labels, 0.0).unwrap();
            let mut plain = 0.0;
            for (i, &lab) in labels.iter().enumerate() {
                let row = &data[i * n..(i + 1) * n];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                plain += lse - row[lab as usize];
            }
            plain /= b as f64;
            assert!((scalar_of(&tape, loss) - plain).abs() < 1e-7);
        }
    }

    #[test]
    fn ce_minimized_at_smoothed_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let eps = 0.2;
        let eval = |probs: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
            let l = tape.leaf(Tensor::new(vec![1, n], logits));
            let loss = label_smooth_ce(&mut tape, l, &[2], eps).unwrap();
            scalar_of(&tape, loss)
        };
        let mut target = vec![eps / (n as f64 - 1.0); n];
        target[2] = 1.0 - eps;
        let at_target = eval(&target);
        for _ in 0..100 {
            let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= s);
            assert!(at_target <= eval(&probs) + 1e-12);
        }
    }

    #[test]
    fn cpr_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 6], vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]));
        let target = tape.leaf(Tensor::zeros(vec![1, 6]));
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let loss = cpr_loss(&mut tape, pred, target, &[], &cfg);
        assert!((scalar_of(&tape, loss) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn cpr_perfect_is_zero_and_reg_counts() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 6], vec![1.0; 6]));
        let target = tape.leaf(Tensor::new(vec![1, 6], vec![1.0; 6]));
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            ..Default::default()
        };
        let loss = cpr_loss(&mut tape, pred, target, &[w], &cfg);
        // 1^2 + 2^2 = 5, scaled by lambda = 1
        assert!((scalar_of(&tape, loss) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn cpr_gradient_matches_finite_differences() {
        // Away from zero error by construction; target fixed inside f.
        let inputs = vec![Tensor::new(
            vec![2, 6],
            vec![
                0.8, -0.3, 1.2, 0.4, -0.9, 0.2, //
                -1.1, 0.6, 0.3, -0.2, 0.7, 1.4,
            ],
        )];
        check::assert_grads("cpr_loss", &inputs, |tape, vars| {
            let target = tape.leaf(Tensor::new(
                vec![2, 6],
                vec![0.1, 0.1, 0.2, -0.3, 0.0, 0.5, 0.2, -0.4, 0.9, 0.3, 0.1, 0.0],
            ));
            let cfg = LossConfig {
                alpha: 1.3,
                beta: 0.7,
                lambda: 0.0,
                ..Default::default()
            };
            cpr_loss(tape, vars[0], target, &[], &cfg)
        });
    }

    #[test]
    fn wmse_hand_values() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let target = tape.leaf(Tensor::zeros(vec![1, 2]));
        let loss = wmse_loss(&mut tape, pred, target, 1.0, 1.0);
        assert!((scalar_of(&tape, loss) - 25.0).abs() < 1e-9);

        let pred = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 7.0]));
        let target = tape.leaf(Tensor::zeros(vec![1, 2]));
        let loss = wmse_loss(&mut tape, pred, target, 2.0, 0.0);
        assert!((scalar_of(&tape, loss) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn wmse_perfect_is_zero() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.1, 0.9]));
        let target = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.1, 0.9]));
        let loss = wmse_loss(&mut tape, pred, target, 1.0, 1.0);
        assert_eq!(scalar_of(&tape, loss), 0.0);
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[0.9, 0.1, 0.2, 0.8], 2, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.1, 0.8, 0.2], 2, &[0, 1]).unwrap(), 0.5);
        // tie -> lowest index wins
        assert_eq!(accuracy(&[0.5, 0.5], 2, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.5, 0.5], 2, &[1]).unwrap(), 0.0);
        assert!(matches!(
            accuracy(&[], 3, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 7usize;
        let b = 40usize;
        let logits: Vec<f32> = (0..b * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u32> = (0..b).map(|_| rng.gen_range(0..n) as u32).collect();
        let mut correct = 0;
        for i in 0..b {
            let row = &logits[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == labels[i] {
                correct += 1;
            }
        }
        let want = correct as f64 / b as f64;
        assert_eq!(accuracy(&logits, n, &labels).unwrap(), want);
    }

    #[test]
    fn pose_error_units() {
        let z = [0.0; 3];
        assert_eq!(pose_error(z, z, z, z), (0.0, 0.0));
        let (m, _) = pose_error([1.0, 0.0, 0.0], z, z, z);
        assert!((m - 1.0).abs() < 1e-12);
        let (_, deg) = pose_error(z, [std::f64::consts::PI / 180.0, 0.0, 0.0], z, z);
        assert!((deg - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pixel_rate_boundary_is_strict() {
        let gts = [[0.0, 0.0], [0.0, 0.0]];
        let preds = [[2.9, 0.0], [3.0, 0.0]];
        assert_eq!(pixel_rate(&preds, &gts, 3.0), 0.5);
        assert_eq!(pixel_rate(&gts, &gts, 0.5), 1.0);
        assert_eq!(mse_px(&gts, &gts), 0.0);
    }

    proptest! {
        #[test]
        fn pixel_rate_monotone_in_p(
            pts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 1..40),
            p1 in 0.0f64..50.0,
            dp in 0.0f64..50.0,
        ) {
            let preds: Vec<[f64;2]> = pts.iter().map(|&(a,b,_,_)| [a,b]).collect();
            let gts: Vec<[f64;2]> = pts.iter().map(|&(_,_,c,d)| [c,d]).collect();
            prop_assert!(pixel_rate(&preds, &gts, p1) <= pixel_rate(&preds, &gts, p1 + dp));
        }

        #[test]
        fn ce_is_positive_and_finite(
            vals in proptest::collection::vec(-10.0f64..10.0, 2..12),
            lab in 0usize..2,
        ) {
            let n = vals.len();
            let mut tape = Tape::<f64>::new();
            let logits = tape.leaf(Tensor::new(vec![1, n], vals));
            let loss = label_smooth_ce(&mut tape, logits, &[(lab % n) as u32], 0.1).unwrap();
            let v = scalar_of(&tape, loss);
            prop_assert!(v.is_finite() && v > 0.0);
        }
    }
}
