//! Selective state-space sequence block: zero-order-hold discretization, the
//! sequential scan (the tape op), and the gated block that wraps them.

use crate::tensor::optim::Param;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kaiming_uniform, Real, Tensor};
use rand::Rng;

/// Zero-order-hold discretization of one diagonal state channel:
/// `abar = exp(delta*a)`, `bbar = ((exp(delta*a) - 1) / a) * b`. For
/// `|delta*a| < 1e-6` the quotient cancels catastrophically, so the
/// second-order series `delta*(1 + delta*a/2)` is used instead.
pub fn discretize<E: Real>(delta: E, a: E, b: E) -> (E, E) {
    debug_assert!(delta > E::zero(), "discretize: delta must be positive");
    let prod = delta * a;
    let abar = prod.exp();
    let bbar = if prod.abs() < E::lit(1e-6) {
        delta * (E::one() + prod * E::lit(0.5)) * b
    } else {
        (abar - E::one()) / a * b
    };
    (abar, bbar)
}

/// Parameters of one gated selective-SSM block over `d` channels.
///
/// Layout: RMS pre-norm, input projection d -> 2*inner (value ++ gate, no
/// bias), depthwise causal conv (width `conv_width`) on the value path, a
/// projection to (dt_rank + 2*state) producing per-step delta/B/C,
/// softplus-positive delta via a (dt_rank -> inner) projection with bias,
/// diagonal state matrix a = -exp(a_log), skip path, output projection
/// inner -> d (no bias), and a residual add of the un-normalized block input.
///
/// The pre-norm matters: the interior is roughly cubic in its input scale
/// (value, gate, and the input-dependent scan coefficients all grow with x),
/// so feeding it heavy-tailed activations destabilizes training.
pub struct MambaParams<E: Real> {
    pub norm_g: Param<E>,
    pub in_proj: Param<E>,
    pub conv_w: Param<E>,
    pub conv_b: Param<E>,
    pub x_proj: Param<E>,
    pub dt_proj: Param<E>,
    pub dt_bias: Param<E>,
    pub a_log: Param<E>,
    pub skip: Param<E>,
    pub out_proj: Param<E>,
    pub d: usize,
    pub inner: usize,
    pub state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
}

/// inner = round(expand * d), dt_rank = ceil(d / 16).
pub fn inner_width(d: usize, expand: f64) -> usize {
    (expand * d as f64).round() as usize
}

pub fn dt_rank_for(d: usize) -> usize {
    d.div_ceil(16)
}

impl<E: Real> MambaParams<E> {
    pub fn new(
        prefix: &str,
        d: usize,
        state: usize,
        expand: f64,
        conv_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = inner_width(d, expand);
        let dt_rank = dt_rank_for(d);
        assert!(inner > 0 && state > 0 && conv_width > 0);
        let name = |s: &str| format!("{prefix}.{s}");

        // delta bias such that softplus(bias) lands in [0.001, 0.1]:
        // bias = ln(e^lo - 1) .. ln(e^hi - 1).
        let lo = (0.001f64.exp() - 1.0).ln();
        let hi = (0.1f64.exp() - 1.0).ln();
        let dt_bias = Tensor::from_fn(vec![inner], |_| E::lit(rng.gen_range(lo..hi)));

        // a = -exp(a_log) = -(j+1) for state slot j, every channel.
        let a_log = Tensor::from_fn(vec![inner, state], |i| {
            let j = i % state;
            E::lit(((j + 1) as f64).ln())
        });

        MambaParams {
            norm_g: Param::new(name("norm_g"), Tensor::full(vec![d], E::one())),
            in_proj: Param::new(name("in_proj"), kaiming_uniform(rng, vec![d, 2 * inner], d)),
            conv_w: Param::new(
                name("conv_w"),
                kaiming_uniform(rng, vec![inner, conv_width], conv_width),
            ),
            conv_b: Param::new(name("conv_b"), Tensor::zeros(vec![inner])),
            x_proj: Param::new(
                name("x_proj"),
                kaiming_uniform(rng, vec![inner, dt_rank + 2 * state], inner),
            ),
            dt_proj: Param::new(
                name("dt_proj"),
                kaiming_uniform(rng, vec![dt_rank, inner], dt_rank),
            ),
            dt_bias: Param::new(name("dt_bias"), dt_bias),
            a_log: Param::new(name("a_log"), a_log),
            skip: Param::new(name("skip"), Tensor::full(vec![inner], E::one())),
            // Residual branch starts at zero, so a fresh stack is the
            // identity map. Without this an untrained eval-mode forward blows
            // up: y scales like u^3 through the scan and the gate squares it
            // again, compounding across stages.
            out_proj: Param::new(name("out_proj"), Tensor::zeros(vec![inner, d])),
            d,
            inner,
            state,
            dt_rank,
            conv_width,
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        vec![
            &self.norm_g,
            &self.in_proj,
            &self.conv_w,
            &self.conv_b,
            &self.x_proj,
            &self.dt_proj,
            &self.dt_bias,
            &self.a_log,
            &self.skip,
            &self.out_proj,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        vec![
            &mut self.norm_g,
            &mut self.in_proj,
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.x_proj,
            &mut self.dt_proj,
            &mut self.dt_bias,
            &mut self.a_log,
            &mut self.skip,
            &mut self.out_proj,
        ]
    }

    /// x: [seqs*seq_len, d] -> same shape, with the residual added.
    pub fn forward(&self, tape: &mut Tape<E>, x: Var, seqs: usize, seq_len: usize) -> Var {
        let norm_g = tape.param(&self.norm_g);
        let in_proj = tape.param(&self.in_proj);
        let conv_w = tape.param(&self.conv_w);
        let conv_b = tape.param(&self.conv_b);
        let x_proj = tape.param(&self.x_proj);
        let dt_proj = tape.param(&self.dt_proj);
        let dt_bias = tape.param(&self.dt_bias);
        let a_log = tape.param(&self.a_log);
        let skip = tape.param(&self.skip);
        let out_proj = tape.param(&self.out_proj);

        let xn = tape.rms_norm(x, norm_g, E::lit(1e-6));
        let xz = tape.linear(xn, in_proj, None);
        let val = tape.slice_cols(xz, 0, self.inner);
        let gate = tape.slice_cols(xz, self.inner, self.inner);

        let conv = tape.causal_conv1d(val, conv_w, conv_b, seqs, seq_len);
        let u = tape.silu(conv);

        let proj = tape.linear(u, x_proj, None);
        let dt_in = tape.slice_cols(proj, 0, self.dt_rank);
        let b_in = tape.slice_cols(proj, self.dt_rank, self.state);
        let c_in = tape.slice_cols(proj, self.dt_rank + self.state, self.state);
        let dt = tape.linear(dt_in, dt_proj, Some(dt_bias));
        let delta = tape.softplus(dt);

        let y = tape.selective_scan(u, delta, b_in, c_in, a_log, skip, seqs, seq_len);
        let g = tape.silu(gate);
        let gated = tape.mul(y, g);
        let out = tape.linear(gated, out_proj, None);
        tape.add(out, x)
    }
}
