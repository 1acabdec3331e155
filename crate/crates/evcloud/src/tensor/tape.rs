//! Reverse-mode gradient tape.
//!
//! Nodes form an append-only arena; every op's inputs have strictly smaller
//! indices, so reverse index order is a topological replay. `backward` resets
//! all gradient buffers before seeding, so replaying the same tape twice
//! yields bit-identical gradients.

use super::{matmul_acc, matmul_tn_acc, transpose, Real, Tensor};
use super::optim::Param;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<E: Real> {
    data: Tensor<E>,
    grad: Option<Vec<E>>,
    op: Op<E>,
}

struct ScanCtx<E: Real> {
    u: Var,
    delta: Var,
    b_in: Var,
    c_in: Var,
    a_log: Var,
    skip: Var,
    seqs: usize,
    seq_len: usize,
    state: usize,
    /// Hidden state after every step, [rows, channels*state].
    h: Vec<E>,
    /// ZOH decay exp(delta*a) per step, [rows, channels*state]; saved so the
    /// backward pass doesn't redo the exponentials.
    abar: Vec<E>,
}

enum Op<E: Real> {
    Leaf { trainable: bool },
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Silu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    /// Train-mode batch norm; normalized activations and per-feature inverse
    /// stddev are saved for the backward pass.
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<E>, inv_std: Vec<E> },
    /// Eval-mode batch norm against fixed (running) statistics.
    EvalNorm { x: Var, gamma: Var, beta: Var, mean: Vec<E>, inv_std: Vec<E> },
    /// Per-row RMS normalization with a learnable gain; the inverse RMS of
    /// each row is saved for the backward pass.
    RmsNorm { x: Var, g: Var, inv_rms: Vec<E> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: E },
    GatherRows { x: Var, idx: Vec<u32> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    GroupMax { x: Var, arg: Vec<u32> },
    GroupWeightedSum { feats: Var, weights: Var },
    CausalConv { x: Var, w: Var, b: Var, seqs: usize, seq_len: usize },
    Scan(Box<ScanCtx<E>>),
    RowSum { x: Var },
    SumAll { x: Var },
    Sqrt { x: Var },
}

/// Batch-norm mode for [`Tape::batch_norm`].
pub enum BnMode<'a, E: Real> {
    /// Normalize by current-batch statistics (population 1/B variance).
    /// When `running` is given, updates it in place:
    /// `r = momentum * r + (1 - momentum) * batch_stat`.
    Train {
        momentum: E,
        running: Option<(&'a mut [E], &'a mut [E])>,
    },
    /// Normalize by fixed statistics.
    Eval { mean: &'a [E], var: &'a [E] },
}

pub struct Tape<E: Real> {
    nodes: Vec<Node<E>>,
    needs: Vec<bool>,
    /// Parameters bound this pass, in bind order: (name, node index).
    bound: Vec<(String, usize)>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            needs: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a bound parameter, by name.
    pub fn grad_by_name(&self, name: &str) -> Option<&[E]> {
        let idx = self.bound.iter().find(|(n, _)| n == name)?.1;
        self.nodes[idx].grad.as_deref()
    }

    /// Parameters bound this pass, in deterministic bind order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(n, i)| (n.as_str(), Var(*i)))
    }

    fn push(&mut self, data: Tensor<E>, op: Op<E>) -> Var {
        prof_mark(op_name(&op));
        debug_assert!(
            data.is_finite(),
            "non-finite values produced by a tape op (node {})",
            self.nodes.len()
        );
        let needs = match &op {
            Op::Leaf { trainable } => *trainable,
            other => op_inputs(other).iter().any(|v| self.needs[v.0]),
        };
        self.nodes.push(Node {
            data,
            grad: None,
            op,
        });
        self.needs.push(needs);
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf { trainable: false })
    }

    /// Differentiable leaf.
    pub fn leaf_grad(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf { trainable: true })
    }

    /// Bind a parameter's current value as a differentiable leaf. Binding the
    /// same name twice returns the original node.
    pub fn param(&mut self, p: &Param<E>) -> Var {
        if let Some((_, i)) = self.bound.iter().find(|(n, _)| n == &p.name) {
            return Var(*i);
        }
        let v = self.leaf_grad(p.value.clone());
        self.bound.push((p.name.clone(), v.0));
        v
    }

    // ── forward ops ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![E::zero(); m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b })
    }

    /// x[m,k] * w[k,n] + b[n] (bias broadcast over rows).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.value(x).dims2();
        let (k2, n) = self.value(w).dims2();
        assert_eq!(k, k2, "linear: input width {k} vs weight {k2}");
        let mut out = match b {
            Some(bv) => {
                let bd = self.value(bv).data();
                assert_eq!(bd.len(), n, "linear: bias len {} vs {n}", bd.len());
                let mut o = Vec::with_capacity(m * n);
                for _ in 0..m {
                    o.extend_from_slice(bd);
                }
                o
            }
            None => vec![E::zero(); m * n],
        };
        matmul_acc(
            self.value(x).data(),
            self.value(w).data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let d = self.value(x);
        let out = Tensor::new(
            d.shape().to_vec(),
            d.data().iter().map(|&v| v.max(E::zero())).collect(),
        );
        self.push(out, Op::Relu { x })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let d = self.value(x);
        let out = Tensor::new(
            d.shape().to_vec(),
            d.data().iter().map(|&v| v * sigmoid_s(v)).collect(),
        );
        self.push(out, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let d = self.value(x);
        let out = Tensor::new(
            d.shape().to_vec(),
            d.data().iter().map(|&v| sigmoid_s(v)).collect(),
        );
        self.push(out, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let d = self.value(x);
        let out = Tensor::new(
            d.shape().to_vec(),
            d.data().iter().map(|&v| softplus_s(v)).collect(),
        );
        self.push(out, Op::Softplus { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let out = softmax_fwd(self.value(x), axis, false);
        self.push(out, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let out = softmax_fwd(self.value(x), axis, true);
        self.push(out, Op::LogSoftmax { x, axis })
    }

    /// Batch norm over rows of a 2-D tensor, per feature column.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: E,
        mode: BnMode<E>,
    ) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert_eq!(self.value(gamma).numel(), cols, "batch_norm: gamma width");
        assert_eq!(self.value(beta).numel(), cols, "batch_norm: beta width");
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();

        match mode {
            BnMode::Train { momentum, running } => {
                assert!(
                    rows >= 2,
                    "batch_norm: degenerate batch, train mode needs >= 2 rows (got {rows})"
                );
                let inv_rows = E::one() / E::lit(rows as f64);
                let mut mean = vec![E::zero(); cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        mean[j] = mean[j] + row[j];
                    }
                }
                for m in mean.iter_mut() {
                    *m = *m * inv_rows;
                }
                // Population (1/B) variance.
                let mut var = vec![E::zero(); cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let d = row[j] - mean[j];
                        var[j] = var[j] + d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v = *v * inv_rows;
                }
                if let Some((rm, rv)) = running {
                    let keep = momentum;
                    let take = E::one() - momentum;
                    for j in 0..cols {
                        rm[j] = keep * rm[j] + take * mean[j];
                        rv[j] = keep * rv[j] + take * var[j];
                    }
                }
                let inv_std: Vec<E> =
                    var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![E::zero(); rows * cols];
                let mut out = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        let h = (xd[r * cols + j] - mean[j]) * inv_std[j];
                        xhat[r * cols + j] = h;
                        out[r * cols + j] = gd[j] * h + bd[j];
                    }
                }
                self.push(
                    Tensor::new(vec![rows, cols], out),
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                )
            }
            BnMode::Eval { mean, var } => {
                assert_eq!(mean.len(), cols);
                assert_eq!(var.len(), cols);
                let inv_std: Vec<E> =
                    var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
                let mut out = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        out[r * cols + j] =
                            gd[j] * (xd[r * cols + j] - mean[j]) * inv_std[j] + bd[j];
                    }
                }
                self.push(
                    Tensor::new(vec![rows, cols], out),
                    Op::EvalNorm {
                        x,
                        gamma,
                        beta,
                        mean: mean.to_vec(),
                        inv_std,
                    },
                )
            }
        }
    }

    /// Row-wise RMS normalization: y[r,j] = x[r,j] / rms(x[r,:]) * g[j].
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: E) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert_eq!(self.value(g).numel(), cols, "rms_norm: gain width");
        let xd = self.value(x).data();
        let gd = self.value(g).data();
        let inv_cols = E::one() / E::lit(cols as f64);
        let mut inv_rms = vec![E::zero(); rows];
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut ms = E::zero();
            for &v in row {
                ms = ms + v * v;
            }
            let ir = E::one() / (ms * inv_cols + eps).sqrt();
            inv_rms[r] = ir;
            for j in 0..cols {
                out[r * cols + j] = row[j] * ir * gd[j];
            }
        }
        self.push(
            Tensor::new(vec![rows, cols], out),
            Op::RmsNorm { x, g, inv_rms },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.ew2(a, b, |x, y| x + y);
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.ew2(a, b, |x, y| x - y);
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.ew2(a, b, |x, y| x * y);
        self.push(out, Op::Mul { a, b })
    }

    fn ew2(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let (da, db) = (self.value(a), self.value(b));
        assert_eq!(
            da.shape(),
            db.shape(),
            "elementwise op on mismatched shapes"
        );
        Tensor::new(
            da.shape().to_vec(),
            da.data()
                .iter()
                .zip(db.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn scale(&mut self, x: Var, k: E) -> Var {
        let d = self.value(x);
        let out = Tensor::new(
            d.shape().to_vec(),
            d.data().iter().map(|&v| v * k).collect(),
        );
        self.push(out, Op::Scale { x, k })
    }

    /// out[i, :] = x[idx[i], :]
    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Var {
        let (rows, cols) = self.value(x).dims2();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            let i = i as usize;
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        self.push(
            Tensor::new(vec![idx.len(), cols], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![rows, total], out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert!(start + len <= cols, "slice_cols: {start}+{len} > {cols}");
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        self.push(
            Tensor::new(vec![rows, len], out),
            Op::SliceCols { x, start },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let d = self.value(x);
        assert_eq!(
            d.numel(),
            shape.iter().product::<usize>(),
            "reshape: numel mismatch"
        );
        let out = Tensor::new(shape, d.data().to_vec());
        self.push(out, Op::Reshape { x })
    }

    /// Max over consecutive row groups: x[g*group + i, :] -> out[g, :].
    /// Ties go to the first (lowest) row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert!(group > 0 && rows % group == 0, "group_max: {rows} % {group}");
        let groups = rows / group;
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); groups * cols];
        let mut arg = vec![0u32; groups * cols];
        for g in 0..groups {
            let base = g * group;
            out[g * cols..(g + 1) * cols]
                .copy_from_slice(&xd[base * cols..(base + 1) * cols]);
            for j in 0..cols {
                arg[g * cols + j] = base as u32;
            }
            for i in 1..group {
                let r = base + i;
                for j in 0..cols {
                    let v = xd[r * cols + j];
                    if v > out[g * cols + j] {
                        out[g * cols + j] = v;
                        arg[g * cols + j] = r as u32;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![groups, cols], out), Op::GroupMax { x, arg })
    }

    /// Weighted sum over consecutive row groups:
    /// out[g, :] = sum_k weights[g, k] * feats[g*k_len + k, :].
    pub fn group_weighted_sum(&mut self, feats: Var, weights: Var) -> Var {
        let (rows, cols) = self.value(feats).dims2();
        let (groups, k_len) = self.value(weights).dims2();
        assert_eq!(rows, groups * k_len, "group_weighted_sum: row mismatch");
        let fd = self.value(feats).data();
        let wd = self.value(weights).data();
        let mut out = vec![E::zero(); groups * cols];
        for g in 0..groups {
            let orow = &mut out[g * cols..(g + 1) * cols];
            for k in 0..k_len {
                let w = wd[g * k_len + k];
                let frow = &fd[(g * k_len + k) * cols..(g * k_len + k + 1) * cols];
                for j in 0..cols {
                    orow[j] = orow[j] + w * frow[j];
                }
            }
        }
        self.push(
            Tensor::new(vec![groups, cols], out),
            Op::GroupWeightedSum { feats, weights },
        )
    }

    /// Depthwise causal conv along each sequence: x is [seqs*seq_len, ch],
    /// w is [ch, width], b is [ch]. Positions before the sequence start are
    /// zero.
    pub fn causal_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        seqs: usize,
        seq_len: usize,
    ) -> Var {
        let (rows, ch) = self.value(x).dims2();
        assert_eq!(rows, seqs * seq_len, "causal_conv1d: rows");
        let (ch2, width) = self.value(w).dims2();
        assert_eq!(ch, ch2, "causal_conv1d: channels");
        assert_eq!(self.value(b).numel(), ch, "causal_conv1d: bias");
        let xd = self.value(x).data();
        // Transposed taps [width, ch] so the channel loop is contiguous.
        let wt = transpose(self.value(w).data(), ch, width);
        let bd = self.value(b).data();
        let mut out = vec![E::zero(); rows * ch];
        for s in 0..seqs {
            for t in 0..seq_len {
                let row = s * seq_len + t;
                let orow = &mut out[row * ch..(row + 1) * ch];
                orow.copy_from_slice(bd);
                for tap in 0..width {
                    let src = t as isize + tap as isize - (width as isize - 1);
                    if src < 0 {
                        continue;
                    }
                    let srow = s * seq_len + src as usize;
                    let xrow = &xd[srow * ch..(srow + 1) * ch];
                    let wrow = &wt[tap * ch..(tap + 1) * ch];
                    for c in 0..ch {
                        orow[c] = orow[c] + xrow[c] * wrow[c];
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![rows, ch], out),
            Op::CausalConv {
                x,
                w,
                b,
                seqs,
                seq_len,
            },
        )
    }

    /// Selective scan with zero-order-hold discretization, h_0 = 0:
    ///   a        = -exp(a_log)                        [ch, state]
    ///   a_bar    = exp(delta * a)
    ///   b_bar    = ((exp(delta*a) - 1) / a) * b_in    (-> delta*b_in for |delta*a| < 1e-6)
    ///   h_t      = a_bar (.) h_{t-1} + b_bar * u_t
    ///   y[t, c]  = <c_in[t, :], h[c, :]> + skip[c] * u[t, c]
    ///
    /// u, delta: [rows, ch]; b_in, c_in: [rows, state]; skip: [ch];
    /// rows = seqs * seq_len. delta must be positive.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        b_in: Var,
        c_in: Var,
        a_log: Var,
        skip: Var,
        seqs: usize,
        seq_len: usize,
    ) -> Var {
        let (rows, ch) = self.value(u).dims2();
        assert_eq!(rows, seqs * seq_len, "selective_scan: rows");
        assert_eq!(self.value(delta).dims2(), (rows, ch), "selective_scan: delta");
        let (_, state) = self.value(b_in).dims2();
        assert_eq!(self.value(b_in).dims2(), (rows, state));
        assert_eq!(self.value(c_in).dims2(), (rows, state));
        assert_eq!(self.value(a_log).dims2(), (ch, state), "selective_scan: a_log");
        assert_eq!(self.value(skip).numel(), ch, "selective_scan: skip");
        assert!(
            self.value(delta).data().iter().all(|&d| d > E::zero()),
            "selective_scan: delta must be positive"
        );

        let ud = self.value(u).data();
        let dd = self.value(delta).data();
        let bd = self.value(b_in).data();
        let cd = self.value(c_in).data();
        let skipd = self.value(skip).data();
        let a: Vec<E> = self
            .value(a_log)
            .data()
            .iter()
            .map(|&v| -v.exp())
            .collect();

        let cs = ch * state;
        let mut h_all = vec![E::zero(); rows * cs];
        let mut y = vec![E::zero(); rows * ch];
        let mut abar = vec![E::zero(); state];
        for s in 0..seqs {
            for t in 0..seq_len {
                let row = s * seq_len + t;
                let brow = &bd[row * state..(row + 1) * state];
                let crow = &cd[row * state..(row + 1) * state];
                // Split h_all so the previous step stays readable.
                let (done, rest) = h_all.split_at_mut(row * cs);
                let hrow = &mut rest[..cs];
                if t > 0 {
                    hrow.copy_from_slice(&done[(row - 1) * cs..]);
                }
                for c in 0..ch {
                    let dlt = dd[row * ch + c];
                    let uv = ud[row * ch + c];
                    let arow = &a[c * state..(c + 1) * state];
                    let hcs = &mut hrow[c * state..(c + 1) * state];
                    for st in 0..state {
                        abar[st] = (dlt * arow[st]).fast_exp();
                    }
                    let mut acc = E::zero();
                    for st in 0..state {
                        let prod = dlt * arow[st];
                        // Second-order series where the quotient cancels.
                        let coef = if prod.abs() < E::lit(1e-6) {
                            dlt * (E::one() + prod * E::lit(0.5))
                        } else {
                            (abar[st] - E::one()) / arow[st]
                        };
                        let h = abar[st] * hcs[st] + coef * brow[st] * uv;
                        hcs[st] = h;
                        acc = acc + crow[st] * h;
                    }
                    y[row * ch + c] = acc + skipd[c] * uv;
                }
            }
        }
        self.push(
            Tensor::new(vec![rows, ch], y),
            Op::Scan(Box::new(ScanCtx {
                u,
                delta,
                b_in,
                c_in,
                a_log,
                skip,
                seqs,
                seq_len,
                state,
                h: h_all,
            })),
        )
    }

    /// Sum over axis 1 of a 2-D tensor: [r, c] -> [r, 1].
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (rows, cols) = self.value(x).dims2();
        let xd = self.value(x).data();
        let out: Vec<E> = (0..rows)
            .map(|r| {
                let mut acc = E::zero();
                for j in 0..cols {
                    acc = acc + xd[r * cols + j];
                }
                acc
            })
            .collect();
        self.push(Tensor::new(vec![rows, 1], out), Op::RowSum { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { x })
    }

    /// Elementwise sqrt; the derivative at exactly 0 is taken as 0
    /// (subgradient), so norms of zero vectors backpropagate zeros.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let d = self.value(x);
        assert!(
            d.data().iter().all(|&v| v >= E::zero()),
            "sqrt: negative input"
        );
        let out = Tensor::new(
            d.shape().to_vec(),
            d.data().iter().map(|&v| v.sqrt()).collect(),
        );
        self.push(out, Op::Sqrt { x })
    }

    // ── backward ──────────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. All gradient buffers are cleared
    /// first, so calling this twice produces identical results.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].data.numel(),
            1,
            "backward: loss must be scalar"
        );
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &hi[0];
            let dy = node.grad.as_deref().expect("grad present");
            prof_mark("between");
            backward_op(node, dy, lo, &self.needs);
            prof_mark(op_name_bwd(&node.op));
        }
    }
}


// ── temporary profiling (EV_PROF) ─────────────────────────────────────────
use std::cell::RefCell;
thread_local! {
    static PROF: RefCell<std::collections::HashMap<&'static str, (f64, u64)>> =
        RefCell::new(std::collections::HashMap::new());
    static LAST: std::cell::Cell<Option<std::time::Instant>> = std::cell::Cell::new(None);
}
fn op_name<E: Real>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf { .. } => "Leaf",
        Op::Matmul { .. } => "Matmul",
        Op::Linear { .. } => "Linear",
        Op::Relu { .. } => "Relu",
        Op::Silu { .. } => "Silu",
        Op::Sigmoid { .. } => "Sigmoid",
        Op::Softplus { .. } => "Softplus",
        Op::Softmax { .. } => "Softmax",
        Op::LogSoftmax { .. } => "LogSoftmax",
        Op::BatchNorm { .. } => "BatchNorm",
        Op::EvalNorm { .. } => "EvalNorm",
        Op::RmsNorm { .. } => "RmsNorm",
        Op::Add { .. } => "Add",
        Op::Sub { .. } => "Sub",
        Op::Mul { .. } => "Mul",
        Op::Scale { .. } => "Scale",
        Op::GatherRows { .. } => "GatherRows",
        Op::ConcatCols { .. } => "ConcatCols",
        Op::SliceCols { .. } => "SliceCols",
        Op::Reshape { .. } => "Reshape",
        Op::GroupMax { .. } => "GroupMax",
        Op::GroupWeightedSum { .. } => "GroupWeightedSum",
        Op::CausalConv { .. } => "CausalConv",
        Op::Scan(_) => "Scan",
        Op::RowSum { .. } => "RowSum",
        Op::SumAll { .. } => "SumAll",
        Op::Sqrt { .. } => "Sqrt",
    }
}
pub fn prof_reset() {
    PROF.with(|p| p.borrow_mut().clear());
    LAST.with(|l| l.set(Some(std::time::Instant::now())));
}
pub fn prof_dump() {
    PROF.with(|p| {
        let mut v: Vec<_> = p.borrow().iter().map(|(k, &(t, c))| (*k, t, c)).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (k, t, c) in v {
            eprintln!("{k:>20}: {:8.1} ms  x{c}", t * 1e3);
        }
    });
}
fn prof_mark(name: &'static str) {
    if std::env::var("EV_PROF").is_err() { return; }
    let now = std::time::Instant::now();
    LAST.with(|l| {
        if let Some(prev) = l.get() {
            let dt = now.duration_since(prev).as_secs_f64();
            PROF.with(|p| {
                let mut m = p.borrow_mut();
                let e = m.entry(name).or_insert((0.0, 0));
                e.0 += dt;
                e.1 += 1;
            });
        }
        l.set(Some(std::time::Instant::now()));
    });
}


fn op_name_bwd<E: Real>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf { .. } => "b:Leaf",
        Op::Matmul { .. } => "b:Matmul",
        Op::Linear { .. } => "b:Linear",
        Op::Relu { .. } => "b:Relu",
        Op::Silu { .. } => "b:Silu",
        Op::Sigmoid { .. } => "b:Sigmoid",
        Op::Softplus { .. } => "b:Softplus",
        Op::Softmax { .. } => "b:Softmax",
        Op::LogSoftmax { .. } => "b:LogSoftmax",
        Op::BatchNorm { .. } => "b:BatchNorm",
        Op::EvalNorm { .. } => "b:EvalNorm",
        Op::RmsNorm { .. } => "b:RmsNorm",
        Op::Add { .. } => "b:Add",
        Op::Sub { .. } => "b:Sub",
        Op::Mul { .. } => "b:Mul",
        Op::Scale { .. } => "b:Scale",
        Op::GatherRows { .. } => "b:GatherRows",
        Op::ConcatCols { .. } => "b:ConcatCols",
        Op::SliceCols { .. } => "b:SliceCols",
        Op::Reshape { .. } => "b:Reshape",
        Op::GroupMax { .. } => "b:GroupMax",
        Op::GroupWeightedSum { .. } => "b:GroupWeightedSum",
        Op::CausalConv { .. } => "b:CausalConv",
        Op::Scan(_) => "b:Scan",
        Op::RowSum { .. } => "b:RowSum",
        Op::SumAll { .. } => "b:SumAll",
        Op::Sqrt { .. } => "b:Sqrt",
    }
}
// ── scalar helpers ────────────────────────────────────────────────────────

#[inline(always)]
fn sigmoid_s<E: Real>(x: E) -> E {
    E::one() / (E::one() + (-x).fast_exp())
}

/// Overflow-safe ln(1 + e^x).
#[inline(always)]
fn softplus_s<E: Real>(x: E) -> E {
    if x > E::zero() {
        x + (-x).fast_exp().ln_1p()
    } else {
        x.fast_exp().ln_1p()
    }
}

/// Softmax (or log-softmax) along `axis` of an arbitrary-shape tensor.
fn softmax_fwd<E: Real>(x: &Tensor<E>, axis: usize, log: bool) -> Tensor<E> {
    let shape = x.shape();
    assert!(axis < shape.len(), "softmax: axis {axis} of {shape:?}");
    let l = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * l * inner + i;
            let mut mx = xd[base];
            for k in 1..l {
                mx = mx.max(xd[base + k * inner]);
            }
            let mut z = E::zero();
            for k in 0..l {
                z = z + (xd[base + k * inner] - mx).fast_exp();
            }
            if log {
                let lz = z.ln();
                for k in 0..l {
                    out[base + k * inner] = xd[base + k * inner] - mx - lz;
                }
            } else {
                let inv = E::one() / z;
                for k in 0..l {
                    out[base + k * inner] = (xd[base + k * inner] - mx).fast_exp() * inv;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn op_inputs<E: Real>(op: &Op<E>) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Matmul { a, b } => vec![*a, *b],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            if let Some(b) = b {
                v.push(*b);
            }
            v
        }
        Op::Relu { x }
        | Op::Silu { x }
        | Op::Sigmoid { x }
        | Op::Softplus { x }
        | Op::Softmax { x, .. }
        | Op::LogSoftmax { x, .. }
        | Op::Scale { x, .. }
        | Op::GatherRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::Reshape { x }
        | Op::GroupMax { x, .. }
        | Op::RowSum { x }
        | Op::SumAll { x }
        | Op::Sqrt { x } => vec![*x],
        Op::BatchNorm { x, gamma, beta, .. } | Op::EvalNorm { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        Op::RmsNorm { x, g, .. } => vec![*x, *g],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::ConcatCols { parts } => parts.clone(),
        Op::GroupWeightedSum { feats, weights } => vec![*feats, *weights],
        Op::CausalConv { x, w, b, .. } => vec![*x, *w, *b],
        Op::Scan(ctx) => vec![ctx.u, ctx.delta, ctx.b_in, ctx.c_in, ctx.a_log, ctx.skip],
    }
}

/// Get-or-allocate the gradient buffer of node `v`.
fn gbuf<'a, E: Real>(lo: &'a mut [Node<E>], v: Var) -> &'a mut [E] {
    let node = &mut lo[v.0];
    let n = node.data.numel();
    node.grad.get_or_insert_with(|| vec![E::zero(); n])
}

/// Data of node `v` plus its gradient buffer (same node, split borrow).
fn data_grad<'a, E: Real>(lo: &'a mut [Node<E>], v: Var) -> (&'a Tensor<E>, &'a mut [E]) {
    let node = &mut lo[v.0];
    let n = node.data.numel();
    let g = node.grad.get_or_insert_with(|| vec![E::zero(); n]);
    (&node.data, g)
}

/// Two distinct nodes, mutably.
fn node_pair<'a, E: Real>(
    lo: &'a mut [Node<E>],
    i: Var,
    j: Var,
) -> (&'a mut Node<E>, &'a mut Node<E>) {
    assert_ne!(i.0, j.0);
    if i.0 < j.0 {
        let (l, r) = lo.split_at_mut(j.0);
        (&mut l[i.0], &mut r[0])
    } else {
        let (l, r) = lo.split_at_mut(i.0);
        (&mut r[0], &mut l[j.0])
    }
}

fn grad_of<'a, E: Real>(node: &'a mut Node<E>) -> &'a mut [E] {
    let n = node.data.numel();
    node.grad.get_or_insert_with(|| vec![E::zero(); n])
}

fn add_into<E: Real>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn backward_op<E: Real>(node: &Node<E>, dy: &[E], lo: &mut [Node<E>], needs: &[bool]) {
    match &node.op {
        Op::Leaf { .. } => {}

        Op::Matmul { a, b } => {
            let (m, _) = lo[a.0].data.dims2();
            let (k, n) = lo[b.0].data.dims2();
            if *a == *b {
                // Square self-product: accumulate both contributions via temps.
                let ad = lo[a.0].data.data().to_vec();
                let mut da = vec![E::zero(); ad.len()];
                let bt = transpose(&ad, k, n);
                matmul_acc(dy, &bt, m, n, k, &mut da);
                matmul_tn_acc(&ad, dy, m, m, n, &mut da);
                add_into(gbuf(lo, *a), &da);
                return;
            }
            let (na, nb) = node_pair(lo, *a, *b);
            if needs[a.0] {
                // da = dy * b^T
                let bt = transpose(nb.data.data(), k, n);
                matmul_acc(dy, &bt, m, n, k, grad_of(na));
            }
            if needs[b.0] {
                // db = a^T * dy
                matmul_tn_acc(na.data.data(), dy, m, k, n, grad_of(nb));
            }
        }

        Op::Linear { x, w, b } => {
            let (m, k) = lo[x.0].data.dims2();
            let (_, n) = lo[w.0].data.dims2();
            {
                let (nx, nw) = node_pair(lo, *x, *w);
                if needs[x.0] {
                    let wt = transpose(nw.data.data(), k, n);
                    matmul_acc(dy, &wt, m, n, k, grad_of(nx));
                }
                if needs[w.0] {
                    matmul_tn_acc(nx.data.data(), dy, m, k, n, grad_of(nw));
                }
            }
            if let Some(bv) = b {
                if needs[bv.0] {
                    let g = gbuf(lo, *bv);
                    for r in 0..m {
                        for j in 0..n {
                            g[j] = g[j] + dy[r * n + j];
                        }
                    }
                }
            }
        }

        Op::Relu { x } => {
            if needs[x.0] {
                // Branchless: the mask multiply vectorizes, the compare-and-
                // skip does not.
                let (d, g) = data_grad(lo, *x);
                for (i, &v) in d.data().iter().enumerate() {
                    let m = if v > E::zero() { E::one() } else { E::zero() };
                    g[i] = g[i] + dy[i] * m;
                }
            }
        }

        Op::Silu { x } => {
            if needs[x.0] {
                let (d, g) = data_grad(lo, *x);
                for (i, &v) in d.data().iter().enumerate() {
                    let s = sigmoid_s(v);
                    g[i] = g[i] + dy[i] * s * (E::one() + v * (E::one() - s));
                }
            }
        }

        Op::Sigmoid { x } => {
            if needs[x.0] {
                let y = node.data.data();
                let g = gbuf(lo, *x);
                for i in 0..y.len() {
                    g[i] = g[i] + dy[i] * y[i] * (E::one() - y[i]);
                }
            }
        }

        Op::Softplus { x } => {
            if needs[x.0] {
                let (d, g) = data_grad(lo, *x);
                for (i, &v) in d.data().iter().enumerate() {
                    g[i] = g[i] + dy[i] * sigmoid_s(v);
                }
            }
        }

        Op::Softmax { x, axis } => {
            if needs[x.0] {
                let y = node.data.data();
                let shape = node.data.shape();
                let l = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let g = gbuf(lo, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * l * inner + i;
                        let mut dot = E::zero();
                        for k in 0..l {
                            let idx = base + k * inner;
                            dot = dot + dy[idx] * y[idx];
                        }
                        for k in 0..l {
                            let idx = base + k * inner;
                            g[idx] = g[idx] + y[idx] * (dy[idx] - dot);
                        }
                    }
                }
            }
        }

        Op::LogSoftmax { x, axis } => {
            if needs[x.0] {
                let y = node.data.data();
                let shape = node.data.shape();
                let l = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let g = gbuf(lo, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * l * inner + i;
                        let mut sum = E::zero();
                        for k in 0..l {
                            sum = sum + dy[base + k * inner];
                        }
                        for k in 0..l {
                            let idx = base + k * inner;
                            g[idx] = g[idx] + dy[idx] - y[idx].fast_exp() * sum;
                        }
                    }
                }
            }
        }

        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            // One pass accumulates the column sums s0 = Σdy and s1 = Σdy·xhat;
            // these double as dbeta/dgamma, and dxhat = dy*gamma makes
            // sum(dxhat) = gamma*s0 and sum(dxhat*xhat) = gamma*s1, so the
            // input gradient needs only one more pass:
            // dx = inv_std*gamma/R * (R*dy - s0 - xhat*s1).
            let (rows, cols) = node.data.dims2();
            let mut s0 = vec![E::zero(); cols];
            let mut s1 = vec![E::zero(); cols];
            for r in 0..rows {
                for j in 0..cols {
                    let d = dy[r * cols + j];
                    s0[j] = s0[j] + d;
                    s1[j] = s1[j] + d * xhat[r * cols + j];
                }
            }
            if needs[beta.0] {
                let g = gbuf(lo, *beta);
                for j in 0..cols {
                    g[j] = g[j] + s0[j];
                }
            }
            if needs[gamma.0] {
                let g = gbuf(lo, *gamma);
                for j in 0..cols {
                    g[j] = g[j] + s1[j];
                }
            }
            if needs[x.0] {
                let gd = lo[gamma.0].data.data().to_vec();
                let inv_rows = E::one() / E::lit(rows as f64);
                let rn = E::lit(rows as f64);
                let scale: Vec<E> = (0..cols)
                    .map(|j| inv_std[j] * gd[j] * inv_rows)
                    .collect();
                let g = gbuf(lo, *x);
                for r in 0..rows {
                    for j in 0..cols {
                        let dx = scale[j]
                            * (rn * dy[r * cols + j] - s0[j] - xhat[r * cols + j] * s1[j]);
                        g[r * cols + j] = g[r * cols + j] + dx;
                    }
                }
            }
        }

        Op::EvalNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let (rows, cols) = node.data.dims2();
            if needs[beta.0] {
                let g = gbuf(lo, *beta);
                for r in 0..rows {
                    for j in 0..cols {
                        g[j] = g[j] + dy[r * cols + j];
                    }
                }
            }
            if needs[gamma.0] {
                let xd = lo[x.0].data.data().to_vec();
                let g = gbuf(lo, *gamma);
                for r in 0..rows {
                    for j in 0..cols {
                        g[j] = g[j]
                            + dy[r * cols + j] * (xd[r * cols + j] - mean[j]) * inv_std[j];
                    }
                }
            }
            if needs[x.0] {
                let gd = lo[gamma.0].data.data().to_vec();
                let g = gbuf(lo, *x);
                for r in 0..rows {
                    for j in 0..cols {
                        g[r * cols + j] = g[r * cols + j] + dy[r * cols + j] * gd[j] * inv_std[j];
                    }
                }
            }
        }

        Op::RmsNorm { x, g, inv_rms } => {
            let (rows, cols) = node.data.dims2();
            let xd = lo[x.0].data.data().to_vec();
            let inv_cols = E::one() / E::lit(cols as f64);
            if needs[g.0] {
                let gg = gbuf(lo, *g);
                for r in 0..rows {
                    let ir = inv_rms[r];
                    for j in 0..cols {
                        gg[j] = gg[j] + dy[r * cols + j] * xd[r * cols + j] * ir;
                    }
                }
            }
            if needs[x.0] {
                // du = dy * g; dx = ir * (du - u * mean(du * u)) with
                // u = x * ir; the second term is the rms term's pullback.
                let gd = lo[g.0].data.data().to_vec();
                let gx = gbuf(lo, *x);
                for r in 0..rows {
                    let ir = inv_rms[r];
                    let mut dot = E::zero();
                    for j in 0..cols {
                        dot = dot + dy[r * cols + j] * gd[j] * xd[r * cols + j] * ir;
                    }
                    let m = dot * inv_cols;
                    for j in 0..cols {
                        let du = dy[r * cols + j] * gd[j];
                        let u = xd[r * cols + j] * ir;
                        gx[r * cols + j] = gx[r * cols + j] + ir * (du - u * m);
                    }
                }
            }
        }

        Op::Add { a, b } => {
            if needs[a.0] {
                add_into(gbuf(lo, *a), dy);
            }
            if needs[b.0] {
                add_into(gbuf(lo, *b), dy);
            }
        }

        Op::Sub { a, b } => {
            if needs[a.0] {
                add_into(gbuf(lo, *a), dy);
            }
            if needs[b.0] {
                let g = gbuf(lo, *b);
                for (gv, &d) in g.iter_mut().zip(dy) {
                    *gv = *gv - d;
                }
            }
        }

        Op::Mul { a, b } => {
            if *a == *b {
                let (d, g) = data_grad(lo, *a);
                let two = E::lit(2.0);
                for (i, &v) in d.data().iter().enumerate() {
                    g[i] = g[i] + two * v * dy[i];
                }
                return;
            }
            let (na, nb) = node_pair(lo, *a, *b);
            if needs[a.0] {
                let bd: Vec<E> = nb.data.data().to_vec();
                let g = grad_of(na);
                for i in 0..bd.len() {
                    g[i] = g[i] + dy[i] * bd[i];
                }
            }
            if needs[b.0] {
                let ad: Vec<E> = na.data.data().to_vec();
                let g = grad_of(nb);
                for i in 0..ad.len() {
                    g[i] = g[i] + dy[i] * ad[i];
                }
            }
        }

        Op::Scale { x, k } => {
            if needs[x.0] {
                let g = gbuf(lo, *x);
                for (gv, &d) in g.iter_mut().zip(dy) {
                    *gv = *gv + *k * d;
                }
            }
        }

        Op::GatherRows { x, idx } => {
            if needs[x.0] {
                let cols = lo[x.0].data.dims2().1;
                let g = gbuf(lo, *x);
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut g[i as usize * cols..(i as usize + 1) * cols];
                    let src = &dy[r * cols..(r + 1) * cols];
                    add_into(dst, src);
                }
            }
        }

        Op::ConcatCols { parts } => {
            let total = node.data.dims2().1;
            let rows = node.data.dims2().0;
            let mut start = 0;
            for &p in parts {
                let w = lo[p.0].data.dims2().1;
                if needs[p.0] {
                    let g = gbuf(lo, p);
                    for r in 0..rows {
                        let src = &dy[r * total + start..r * total + start + w];
                        add_into(&mut g[r * w..(r + 1) * w], src);
                    }
                }
                start += w;
            }
        }

        Op::SliceCols { x, start } => {
            if needs[x.0] {
                let (rows, len) = node.data.dims2();
                let cols = lo[x.0].data.dims2().1;
                let g = gbuf(lo, *x);
                for r in 0..rows {
                    let dst = &mut g[r * cols + start..r * cols + start + len];
                    add_into(dst, &dy[r * len..(r + 1) * len]);
                }
            }
        }

        Op::Reshape { x } => {
            if needs[x.0] {
                add_into(gbuf(lo, *x), dy);
            }
        }

        Op::GroupMax { x, arg } => {
            if needs[x.0] {
                let cols = node.data.dims2().1;
                let g = gbuf(lo, *x);
                for (o, &src_row) in arg.iter().enumerate() {
                    let j = o % cols;
                    g[src_row as usize * cols + j] = g[src_row as usize * cols + j] + dy[o];
                }
            }
        }

        Op::GroupWeightedSum { feats, weights } => {
            let (groups, k_len) = lo[weights.0].data.dims2();
            let cols = lo[feats.0].data.dims2().1;
            let (nf, nw) = node_pair(lo, *feats, *weights);
            if needs[weights.0] {
                let fd = nf.data.data();
                let gw = grad_of(nw);
                for g in 0..groups {
                    let dyrow = &dy[g * cols..(g + 1) * cols];
                    for k in 0..k_len {
                        let frow = &fd[(g * k_len + k) * cols..(g * k_len + k + 1) * cols];
                        let mut dot = E::zero();
                        for j in 0..cols {
                            dot = dot + dyrow[j] * frow[j];
                        }
                        gw[g * k_len + k] = gw[g * k_len + k] + dot;
                    }
                }
            }
            if needs[feats.0] {
                let wd: Vec<E> = nw.data.data().to_vec();
                let gf = grad_of(nf);
                for g in 0..groups {
                    let dyrow = &dy[g * cols..(g + 1) * cols];
                    for k in 0..k_len {
                        let w = wd[g * k_len + k];
                        let dst = &mut gf[(g * k_len + k) * cols..(g * k_len + k + 1) * cols];
                        for j in 0..cols {
                            dst[j] = dst[j] + w * dyrow[j];
                        }
                    }
                }
            }
        }

        Op::CausalConv {
            x,
            w,
            b,
            seqs,
            seq_len,
        } => {
            let (_, ch) = lo[x.0].data.dims2();
            let width = lo[w.0].data.dims2().1;
            {
                let (nx, nw) = node_pair(lo, *x, *w);
                let xd: &[E] = nx.data.data();
                let wd: &[E] = nw.data.data();
                // Temps keep the split borrows simple.
                let mut dx = vec![E::zero(); xd.len()];
                let mut dw = vec![E::zero(); wd.len()];
                for s in 0..*seqs {
                    for t in 0..*seq_len {
                        let row = s * seq_len + t;
                        let dyrow = &dy[row * ch..(row + 1) * ch];
                        for tap in 0..width {
                            let src = t as isize + tap as isize - (width as isize - 1);
                            if src < 0 {
                                continue;
                            }
                            let srow = s * seq_len + src as usize;
                            for c in 0..ch {
                                dw[c * width + tap] =
                                    dw[c * width + tap] + xd[srow * ch + c] * dyrow[c];
                                dx[srow * ch + c] =
                                    dx[srow * ch + c] + wd[c * width + tap] * dyrow[c];
                            }
                        }
                    }
                }
                if needs[x.0] {
                    add_into(grad_of(nx), &dx);
                }
                if needs[w.0] {
                    add_into(grad_of(nw), &dw);
                }
            }
            if needs[b.0] {
                let g = gbuf(lo, *b);
                let rows = seqs * seq_len;
                for r in 0..rows {
                    for c in 0..ch {
                        g[c] = g[c] + dy[r * ch + c];
                    }
                }
            }
        }

        Op::Scan(ctx) => {
            backward_scan(ctx, dy, node_shape_ch(node), lo, needs);
        }

        Op::RowSum { x } => {
            if needs[x.0] {
                let cols = lo[x.0].data.dims2().1;
                let g = gbuf(lo, *x);
                for (r, &d) in dy.iter().enumerate() {
                    for j in 0..cols {
                        g[r * cols + j] = g[r * cols + j] + d;
                    }
                }
            }
        }

        Op::SumAll { x } => {
            if needs[x.0] {
                let d = dy[0];
                let g = gbuf(lo, *x);
                for gv in g.iter_mut() {
                    *gv = *gv + d;
                }
            }
        }

        Op::Sqrt { x } => {
            if needs[x.0] {
                let y = node.data.data();
                let half = E::lit(0.5);
                let g = gbuf(lo, *x);
                for i in 0..y.len() {
                    if y[i] > E::zero() {
                        g[i] = g[i] + dy[i] * half / y[i];
                    }
                }
            }
        }
    }
}

fn node_shape_ch<E: Real>(node: &Node<E>) -> usize {
    node.data.dims2().1
}

/// Reverse pass of the selective scan. All input gradients are computed into
/// temporaries during a read-only sweep, then accumulated.
fn backward_scan<E: Real>(
    ctx: &ScanCtx<E>,
    dy: &[E],
    ch: usize,
    lo: &mut [Node<E>],
    needs: &[bool],
) {
    let state = ctx.state;
    let cs = ch * state;
    let ud = lo[ctx.u.0].data.data();
    let dd = lo[ctx.delta.0].data.data();
    let bd = lo[ctx.b_in.0].data.data();
    let cd = lo[ctx.c_in.0].data.data();
    let skipd = lo[ctx.skip.0].data.data();
    let a: Vec<E> = lo[ctx.a_log.0]
        .data
        .data()
        .iter()
        .map(|&v| -v.exp())
        .collect();

    let rows = ctx.seqs * ctx.seq_len;
    let mut du = vec![E::zero(); rows * ch];
    let mut ddelta = vec![E::zero(); rows * ch];
    let mut db = vec![E::zero(); rows * state];
    let mut dc = vec![E::zero(); rows * state];
    let mut da = vec![E::zero(); cs];
    let mut dskip = vec![E::zero(); ch];

    let tiny = E::lit(1e-6);
    let half = E::lit(0.5);
    let zeros = vec![E::zero(); cs];
    let mut dh = vec![E::zero(); cs];
    for s in 0..ctx.seqs {
        dh.iter_mut().for_each(|v| *v = E::zero());
        for t in (0..ctx.seq_len).rev() {
            let row = s * ctx.seq_len + t;
            let h_t = &ctx.h[row * cs..(row + 1) * cs];
            let h_prev: &[E] = if t > 0 {
                &ctx.h[(row - 1) * cs..row * cs]
            } else {
                &zeros
            };
            let brow = &bd[row * state..(row + 1) * state];
            let crow = &cd[row * state..(row + 1) * state];
            for c in 0..ch {
                let dy_rc = dy[row * ch + c];
                let uv = ud[row * ch + c];
                let dlt = dd[row * ch + c];
                let arow = &a[c * state..(c + 1) * state];
                let dhrow = &mut dh[c * state..(c + 1) * state];
                dskip[c] = dskip[c] + dy_rc * uv;
                let mut du_acc = dy_rc * skipd[c];
                let mut dd_acc = E::zero();
                for st in 0..state {
                    let av = arow[st];
                    let prod = dlt * av;
                    let abar = prod.fast_exp();
                    let (coef, dcoef_da) = if prod.abs() < tiny {
                        (dlt * (E::one() + prod * half), dlt * dlt * half)
                    } else {
                        let coef = (abar - E::one()) / av;
                        (coef, (dlt * abar - coef) / av)
                    };
                    let dh_cs = dhrow[st] + dy_rc * crow[st];
                    let dabar = dh_cs * h_prev[c * state + st];
                    let dbbar = dh_cs * uv;
                    du_acc = du_acc + dh_cs * coef * brow[st];
                    db[row * state + st] = db[row * state + st] + dbbar * coef;
                    dd_acc = dd_acc + dabar * av * abar + dbbar * abar * brow[st];
                    da[c * state + st] =
                        da[c * state + st] + dabar * dlt * abar + dbbar * dcoef_da * brow[st];
                    dc[row * state + st] = dc[row * state + st] + dy_rc * h_t[c * state + st];
                    dhrow[st] = dh_cs * abar;
                }
                du[row * ch + c] = du[row * ch + c] + du_acc;
                ddelta[row * ch + c] = ddelta[row * ch + c] + dd_acc;
            }
        }
    }

    if needs[ctx.u.0] {
        add_into(gbuf(lo, ctx.u), &du);
    }
    if needs[ctx.delta.0] {
        add_into(gbuf(lo, ctx.delta), &ddelta);
    }
    if needs[ctx.b_in.0] {
        add_into(gbuf(lo, ctx.b_in), &db);
    }
    if needs[ctx.c_in.0] {
        add_into(gbuf(lo, ctx.c_in), &dc);
    }
    if needs[ctx.a_log.0] {
        // a = -exp(a_log)  =>  d a_log = d a * a
        let g = gbuf(lo, ctx.a_log);
        for i in 0..cs {
            g[i] = g[i] + da[i] * a[i];
        }
    }
    if needs[ctx.skip.0] {
        add_into(gbuf(lo, ctx.skip), &dskip);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![rows, cols], v.to_vec())
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t2(2, 2, &[1., 2., 3., 4.]));
        let i = tape.leaf(t2(2, 2, &[1., 0., 0., 1.]));
        let y = tape.matmul(a, i);
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    #[should_panic(expected = "matmul: inner dims")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t2(2, 3, &[0.; 6]));
        let b = tape.leaf(t2(2, 2, &[0.; 4]));
        let _ = tape.matmul(a, b);
    }

    #[test]
    fn silu_at_one() {
        // silu(1) = 1/(1+e^-1) = 0.731059
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t2(1, 1, &[1.0]));
        let y = tape.silu(x);
        assert!((tape.value(y).data()[0] - 0.731_059).abs() < 1e-4);
    }

    #[test]
    fn softmax_hand_value() {
        // softmax([ln 2, 0]) = [2/3, 1/3]
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t2(1, 2, &[std::f32::consts::LN_2, 0.0]));
        let y = tape.softmax(x, 1);
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-4, "{d:?}");
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f32>::new();
        let vals = [0.3f32, -1.2, 2.5, 0.0, 7.0, -3.0];
        let x = tape.leaf(t2(2, 3, &vals));
        let y = tape.softmax(x, 1);
        for r in 0..2 {
            let s: f32 = tape.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        //

        let shifted: Vec<f32> = vals.iter().map(|v| v + 100.0).collect();
        let xs = tape.leaf(t2(2, 3, &shifted));
        let ys = tape.softmax(xs, 1);
        for i in 0..6 {
            assert!((tape.value(y).data()[i] - tape.value(ys).data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_hand_value() {
        // x = [[1],[3]] train mode -> [-1, 1] (mean 2, population var 1)
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t2(2, 1, &[1.0, 3.0]));
        let g = tape.leaf(Tensor::new(vec![1], vec![1.0]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]));
        let y = tape.batch_norm(
            x,
            g,
            b,
            1e-5,
            BnMode::Train {
                momentum: 0.9,
                running: None,
            },
        );
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-4, "{d:?}");
        assert!((d[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_hand_value_and_grads() {
        // Row [3, 4]: rms = sqrt(12.5), gains [1, 2].
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]));
        let g = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = tape.rms_norm(x, g, 0.0);
        let d = tape.value(y).data();
        let rms = 12.5f64.sqrt();
        assert!((d[0] - 3.0 / rms).abs() < 1e-12);
        assert!((d[1] - 8.0 / rms).abs() < 1e-12);

        let xs = Tensor::new(vec![2, 3], vec![0.4, -0.9, 1.2, 0.05, 0.33, -0.71]);
        let gs = Tensor::new(vec![3], vec![1.1, 0.7, -0.4]);
        crate::tensor::check::assert_grads("rms_norm", &[xs, gs], |tape, v| {
            let y = tape.rms_norm(v[0], v[1], 1e-6);
            let s = tape.silu(y);
            tape.sum_all(s)
        });
    }

    #[test]
    fn rms_norm_output_row_scale_is_unit() {
        // With unit gains every output row has RMS 1 regardless of the
        // input's scale.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t2(2, 4, &[100.0, -250.0, 30.0, 75.0, 1e-3, 2e-3, -5e-4, 3e-3]));
        let g = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]));
        let y = tape.rms_norm(x, g, 1e-12);
        let d = tape.value(y).data();
        for r in 0..2 {
            let ms: f32 = (0..4).map(|j| d[r * 4 + j] * d[r * 4 + j]).sum::<f32>() / 4.0;
            assert!((ms - 1.0).abs() < 1e-4, "row {r} ms {ms}");
        }
    }

    #[test]
    fn batch_norm_running_stats_update() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t2(2, 1, &[1.0, 3.0]));
        let g = tape.leaf(Tensor::new(vec![1], vec![1.0]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]));
        let mut rm = vec![0.0f32];
        let mut rv = vec![1.0f32];
        let _ = tape.batch_norm(
            x,
            g,
            b,
            1e-5,
            BnMode::Train {
                momentum: 0.9,
                running: Some((&mut rm, &mut rv)),
            },
        );
        // r = 0.9*r + 0.1*batch: mean 2 -> 0.2, var 1 -> 0.9*1 + 0.1*1 = 1.0
        assert!((rm[0] - 0.2).abs() < 1e-6);
        assert!((rv[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "degenerate batch")]
    fn batch_norm_single_row_train_panics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t2(1, 1, &[1.0]));
        let g = tape.leaf(Tensor::new(vec![1], vec![1.0]));
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]));
        let _ = tape.batch_norm(
            x,
            g,
            b,
            1e-5,
            BnMode::Train {
                momentum: 0.9,
                running: None,
            },
        );
    }

    #[test]
    fn backward_through_mul_square() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf_grad(t2(1, 3, &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_replay_is_bit_identical() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf_grad(t2(2, 2, &[0.3, -1.0, 2.0, 0.7]));
        let w = tape.leaf_grad(t2(2, 2, &[0.1, 0.2, -0.4, 0.9]));
        let h = tape.matmul(x, w);
        let s = tape.silu(h);
        let loss = tape.sum_all(s);
        tape.backward(loss);
        let g1: Vec<f32> = tape.grad(w).unwrap().to_vec();
        tape.backward(loss);
        let g2: Vec<f32> = tape.grad(w).unwrap().to_vec();
        assert_eq!(g1, g2, "replay must be bit-identical");
        assert!(g1.iter().any(|&v| v != 0.0));
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_non_scalar_loss_panics() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf_grad(t2(1, 2, &[1.0, 2.0]));
        tape.backward(x);
    }

    #[test]
    fn group_max_forward_and_ties() {
        let mut tape = Tape::<f32>::new();
        // two groups of 2 rows, 2 cols; tie in group 1 col 0 -> first row wins
        let x = tape.leaf_grad(t2(4, 2, &[1., 5., 3., 2., 7., 7., 7., 9.]));
        let y = tape.group_max(x, 2);
        assert_eq!(tape.value(y).data(), &[3., 5., 7., 9.]);
        let s = tape.sum_all(y);
        tape.backward(s);
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[0., 1., 1., 0., 1., 0., 0., 1.]);
    }

    #[test]
    fn gather_scatter_roundtrip_grad() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf_grad(t2(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let y = tape.gather_rows(x, &[2, 0, 2]);
        assert_eq!(tape.value(y).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = tape.sum_all(y);
        tape.backward(s);
        // row 2 gathered twice -> grad 2
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn scan_hand_value_scalar_case() {
        // delta=1, a=-1, b=c=1, skip=0, x=[1,0] -> y = [0.632120, 0.232544]
        let mut tape = Tape::<f64>::new();
        let u = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 0.0]));
        let delta = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        let c = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]));
        // a = -exp(a_log) = -1 -> a_log = 0
        let a_log = tape.leaf(Tensor::new(vec![1, 1], vec![0.0]));
        let skip = tape.leaf(Tensor::new(vec![1], vec![0.0]));
        let y = tape.selective_scan(u, delta, b, c, a_log, skip, 1, 2);
        let d = tape.value(y).data();
        assert!((d[0] - 0.632_120).abs() < 1e-5, "{d:?}");
        assert!((d[1] - 0.232_544).abs() < 1e-5, "{d:?}");
    }

    #[test]
    #[should_panic(expected = "delta must be positive")]
    fn scan_nonpositive_delta_panics() {
        let mut tape = Tape::<f32>::new();
        let u = tape.leaf(t2(1, 1, &[1.0]));
        let delta = tape.leaf(t2(1, 1, &[0.0]));
        let b = tape.leaf(t2(1, 1, &[1.0]));
        let c = tape.leaf(t2(1, 1, &[1.0]));
        let a_log = tape.leaf(t2(1, 1, &[0.0]));
        let skip = tape.leaf(Tensor::new(vec![1], vec![0.0]));
        let _ = tape.selective_scan(u, delta, b, c, a_log, skip, 1, 1);
    }

    #[test]
    fn scan_is_causal() {
        // Perturbing a suffix never changes earlier outputs, bit for bit.
        let mk = |suffix: f32| {
            let mut tape = Tape::<f32>::new();
            let u = tape.leaf(t2(4, 2, &[0.3, -0.2, 0.9, 0.1, 0.5, suffix, -1.0, suffix]));
            let delta = tape.leaf(t2(4, 2, &[0.5; 8]));
            let b = tape.leaf(t2(4, 3, &[0.4; 12]));
            let c = tape.leaf(t2(4, 3, &[0.7; 12]));
            let a_log = tape.leaf(t2(2, 3, &[0.1, -0.3, 0.2, 0.0, 0.4, -0.1]));
            let skip = tape.leaf(Tensor::new(vec![2], vec![0.5, -0.25]));
            let y = tape.selective_scan(u, delta, b, c, a_log, skip, 1, 4);
            tape.value(y).data().to_vec()
        };
        let y1 = mk(10.0);
        let y2 = mk(-3.0);
        assert_eq!(&y1[..4], &y2[..4], "prefix must not depend on suffix");
        assert_ne!(&y1[4..], &y2[4..]);
    }

    #[test]
    fn concat_slice_inverse() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t2(2, 2, &[1., 2., 5., 6.]));
        let b = tape.leaf(t2(2, 1, &[3., 7.]));
        let c = tape.concat_cols(&[a, b]);
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 5., 6., 7.]);
        let s = tape.slice_cols(c, 2, 1);
        assert_eq!(tape.value(s).data(), &[3., 7.]);
    }
}
