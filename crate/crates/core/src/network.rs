//! The coordinate network: a sine-activation MLP mapping encoded inputs
//! to the four kinetic parameters, with exact reverse-mode gradients.
//!
//! The architecture is fixed: hidden affine layers with sine activations
//! (the first pre-activation scaled by `w0`) and a final affine layer
//! with four outputs. Reduced widths are supported for gradient-check
//! tests; production fits use three 512-wide hidden layers.
//!
//! Forward and backward run over row-major batches. Every output element
//! is accumulated in a fixed order by exactly one task, so results are
//! bit-reproducible for any thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::KineticParams;

pub const DEFAULT_W0: f64 = 30.0;
pub const N_OUTPUTS: usize = 4;

// ---------------------------------------------------------------------------
// Small dense kernels
// ---------------------------------------------------------------------------

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] = x[k].mul_add(y[k], acc[k]);
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

/// Rows processed together so a weight row is re-read from L1 instead of
/// re-streamed from memory for every batch row.
const ROW_BLOCK: usize = 16;

/// `y[r] = x[r] . w[o] + bias[o]` for every row and output unit.
fn linear_forward(x: &[f64], in_dim: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let out_dim = bias.len();
    let run_block = |blk: usize, yblk: &mut [f64]| {
        let r0 = blk * ROW_BLOCK;
        let rows_here = yblk.len() / out_dim;
        let xblk = &x[r0 * in_dim..(r0 + rows_here) * in_dim];
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let b = bias[o];
            for r in 0..rows_here {
                yblk[r * out_dim + o] = dot(&xblk[r * in_dim..(r + 1) * in_dim], wrow) + b;
            }
        }
    };
    let rows = out.len() / out_dim;
    if rows * in_dim * out_dim >= PAR_FLOP_CUTOFF {
        use rayon::prelude::*;
        out.par_chunks_mut(ROW_BLOCK * out_dim)
            .enumerate()
            .for_each(|(blk, yblk)| run_block(blk, yblk));
    } else {
        for (blk, yblk) in out.chunks_mut(ROW_BLOCK * out_dim).enumerate() {
            run_block(blk, yblk);
        }
    }
}

/// Weight/bias gradients: `gw[o] = sum_b d[b][o] * x[b]`, `gb[o] = sum_b d[b][o]`.
/// Output units are processed in blocks so each streamed `x` row feeds
/// several accumulator rows from cache.
fn linear_grad_weights(
    d: &[f64],
    out_dim: usize,
    x: &[f64],
    in_dim: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let rows = d.len() / out_dim;
    let run_block = |blk: usize, gwblk: &mut [f64], gbblk: &mut [f64]| {
        let o0 = blk * ROW_BLOCK;
        let units_here = gbblk.len();
        gwblk.fill(0.0);
        gbblk.fill(0.0);
        for b in 0..rows {
            let xrow = &x[b * in_dim..(b + 1) * in_dim];
            let drow = &d[b * out_dim..(b + 1) * out_dim];
            for u in 0..units_here {
                let alpha = drow[o0 + u];
                gbblk[u] += alpha;
                if alpha != 0.0 {
                    axpy(alpha, xrow, &mut gwblk[u * in_dim..(u + 1) * in_dim]);
                }
            }
        }
    };
    if rows * in_dim * out_dim >= PAR_FLOP_CUTOFF {
        use rayon::prelude::*;
        gw.par_chunks_mut(ROW_BLOCK * in_dim)
            .zip(gb.par_chunks_mut(ROW_BLOCK))
            .enumerate()
            .for_each(|(blk, (gwblk, gbblk))| run_block(blk, gwblk, gbblk));
    } else {
        for (blk, (gwblk, gbblk)) in gw
            .chunks_mut(ROW_BLOCK * in_dim)
            .zip(gb.chunks_mut(ROW_BLOCK))
            .enumerate()
        {
            run_block(blk, gwblk, gbblk);
        }
    }
}

/// Input gradients: `gx[b] = sum_o d[b][o] * w[o]`, blocked over batch
/// rows so weight rows are reused from cache.
fn linear_grad_inputs(d: &[f64], out_dim: usize, w: &[f64], in_dim: usize, gx: &mut [f64]) {
    let run_block = |blk: usize, gxblk: &mut [f64]| {
        gxblk.fill(0.0);
        let r0 = blk * ROW_BLOCK;
        let rows_here = gxblk.len() / in_dim;
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            for r in 0..rows_here {
                let alpha = d[(r0 + r) * out_dim + o];
                if alpha != 0.0 {
                    axpy(alpha, wrow, &mut gxblk[r * in_dim..(r + 1) * in_dim]);
                }
            }
        }
    };
    let rows = gx.len() / in_dim;
    if rows * in_dim * out_dim >= PAR_FLOP_CUTOFF {
        use rayon::prelude::*;
        gx.par_chunks_mut(ROW_BLOCK * in_dim)
            .enumerate()
            .for_each(|(blk, gxblk)| run_block(blk, gxblk));
    } else {
        for (blk, gxblk) in gx.chunks_mut(ROW_BLOCK * in_dim).enumerate() {
            run_block(blk, gxblk);
        }
    }
}

/// Below this many multiply-adds a kernel runs serially.
const PAR_FLOP_CUTOFF: usize = 1 << 18;

// ---------------------------------------------------------------------------
// Parameter head
// ---------------------------------------------------------------------------

/// Maps the four raw network outputs onto kinetic parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ParamHead {
    /// Softplus on the three rates, sigmoid on Vb: every output is a
    /// valid parameter vector, so the forward ODE model is well defined
    /// throughout training.
    #[default]
    Softplus,
    /// Raw linear outputs. Can emit negative rates; intended for
    /// comparisons against the unconstrained formulation.
    Linear,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ParamHead {
    /// Raw outputs that map onto the given parameters (head inverse).
    pub fn raw_for(&self, p: &KineticParams) -> [f64; 4] {
        match self {
            ParamHead::Softplus => {
                // softplus^-1(y) = y + ln(1 - exp(-y))
                let inv = |y: f64| {
                    let y = y.max(1e-6);
                    y + (-(-y).exp()).ln_1p()
                };
                let vb = p.vb.clamp(1e-6, 1.0 - 1e-6);
                [inv(p.k1), inv(p.k2), inv(p.k3), (vb / (1.0 - vb)).ln()]
            }
            ParamHead::Linear => p.as_array(),
        }
    }

    #[inline]
    pub fn apply(&self, raw: [f64; 4]) -> KineticParams {
        match self {
            ParamHead::Softplus => KineticParams::new(
                softplus(raw[0]),
                softplus(raw[1]),
                softplus(raw[2]),
                sigmoid(raw[3]),
            ),
            ParamHead::Linear => KineticParams::from_array(raw),
        }
    }

    /// Elementwise derivative d(param_i)/d(raw_i).
    #[inline]
    pub fn derivative(&self, raw: [f64; 4]) -> [f64; 4] {
        match self {
            ParamHead::Softplus => {
                let s = sigmoid(raw[3]);
                [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2]), s * (1.0 - s)]
            }
            ParamHead::Linear => [1.0; 4],
        }
    }
}

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    w: usize,
    b: usize,
    in_dim: usize,
    out_dim: usize,
}

/// Sine-activation MLP with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SineMlp {
    input_dim: usize,
    hidden: Vec<usize>,
    pub w0: f64,
    params: Vec<f64>,
    layers: Vec<LayerSpan>,
}

impl SineMlp {
    /// Production architecture: three 512-wide sine layers.
    pub fn new(seed: u64, input_dim: usize, w0: f64) -> Self {
        Self::with_dims(seed, input_dim, &[512, 512, 512], w0)
    }

    /// Arbitrary hidden widths (reduced copies for gradient checks).
    pub fn with_dims(seed: u64, input_dim: usize, hidden: &[usize], w0: f64) -> Self {
        assert!(!hidden.is_empty(), "need at least one hidden layer");
        assert!(input_dim > 0 && w0 > 0.0);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut offset = 0usize;
        let mut prev = input_dim;
        for (&width, _) in hidden.iter().zip(0..) {
            layers.push(LayerSpan { w: offset, b: offset + prev * width, in_dim: prev, out_dim: width });
            offset += prev * width + width;
            prev = width;
        }
        layers.push(LayerSpan {
            w: offset,
            b: offset + prev * N_OUTPUTS,
            in_dim: prev,
            out_dim: N_OUTPUTS,
        });
        offset += prev * N_OUTPUTS + N_OUTPUTS;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; offset];
        for (l, span) in layers.iter().enumerate() {
            // First layer: U[-1/fan_in, 1/fan_in]. Deeper layers:
            // U[-sqrt(6/fan_in)/w0, sqrt(6/fan_in)/w0], the sine-network
            // initialization that keeps activation statistics stable.
            let limit = if l == 0 {
                1.0 / span.in_dim as f64
            } else {
                (6.0 / span.in_dim as f64).sqrt() / w0
            };
            for p in &mut params[span.w..span.b + span.out_dim] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Self { input_dim: input_dim.max(1), hidden: hidden.to_vec(), w0, params, layers }
    }

    /// Rebuild from persisted weights.
    pub fn from_parts(
        input_dim: usize,
        hidden: Vec<usize>,
        w0: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        let template = Self::with_dims(0, input_dim, &hidden, w0);
        if params.len() != template.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a network that needs {}",
                params.len(),
                template.params.len()
            )));
        }
        Ok(Self { params, ..template })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Overwrite the output-layer bias; used to center the initial
    /// prediction on a parameter prior instead of the head's image of
    /// the near-zero raw outputs.
    pub fn set_output_bias(&mut self, bias: &[f64; N_OUTPUTS]) {
        let span = *self.layers.last().unwrap();
        self.params[span.b..span.b + N_OUTPUTS].copy_from_slice(bias);
    }

    fn layer_w(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.w..s.w + s.in_dim * s.out_dim]
    }

    fn layer_b(&self, l: usize) -> &[f64] {
        let s = self.layers[l];
        &self.params[s.b..s.b + s.out_dim]
    }

    /// Forward pass over a row-major batch; caches activations for the
    /// matching backward pass.
    pub fn forward_batch(&self, inputs: &[f64], acts: &mut Activations) {
        let rows = inputs.len() / self.input_dim;
        debug_assert_eq!(rows * self.input_dim, inputs.len());
        acts.reset(self, rows);
        acts.input.clear();
        acts.input.extend_from_slice(inputs);

        let n_hidden = self.hidden.len();
        for l in 0..n_hidden {
            let span = self.layers[l];
            let (x, in_dim) = if l == 0 {
                (&acts.input[..], self.input_dim)
            } else {
                (&acts.post[l - 1][..], span.in_dim)
            };
            // Split borrows: pre[l] is written, post[l-1] only read.
            let pre = std::mem::take(&mut acts.pre[l]);
            let mut pre = pre;
            linear_forward(x, in_dim, self.layer_w(l), self.layer_b(l), &mut pre);
            if l == 0 {
                for v in pre.iter_mut() {
                    *v *= self.w0;
                }
            }
            for (h, p) in acts.post[l].iter_mut().zip(&pre) {
                *h = p.sin();
            }
            acts.pre[l] = pre;
        }
        let last = &acts.post[n_hidden - 1];
        linear_forward(
            last,
            self.layers[n_hidden].in_dim,
            self.layer_w(n_hidden),
            self.layer_b(n_hidden),
            &mut acts.raw,
        );
    }

    /// Reverse-mode gradients of a scalar loss with respect to every
    /// weight, given `upstream = dL/draw` for each batch row. Writes the
    /// flat gradient (same layout as `params`) into `grad`.
    pub fn backward_batch(&self, acts: &Activations, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if acts.raw.len() != upstream.len() {
            return Err(Error::State(
                "cached activations do not match the upstream gradient batch".into(),
            ));
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient buffer length".into()));
        }
        let rows = upstream.len() / N_OUTPUTS;
        let n_hidden = self.hidden.len();

        // Output layer.
        let span = self.layers[n_hidden];
        {
            let (gw, gb) = split_grad(grad, span);
            linear_grad_weights(upstream, N_OUTPUTS, &acts.post[n_hidden - 1], span.in_dim, gw, gb);
        }
        let mut d_post = vec![0.0f64; rows * span.in_dim];
        linear_grad_inputs(upstream, N_OUTPUTS, self.layer_w(n_hidden), span.in_dim, &mut d_post);

        for l in (0..n_hidden).rev() {
            let span = self.layers[l];
            // d(pre) = d(post) .* cos(pre), with the first layer's w0
            // chain factor folded in.
            let scale = if l == 0 { self.w0 } else { 1.0 };
            let mut d_pre = d_post;
            for (d, p) in d_pre.iter_mut().zip(&acts.pre[l]) {
                *d *= p.cos() * scale;
            }
            let x: &[f64] = if l == 0 { &acts.input } else { &acts.post[l - 1] };
            {
                let (gw, gb) = split_grad(grad, span);
                linear_grad_weights(&d_pre, span.out_dim, x, span.in_dim, gw, gb);
            }
            if l > 0 {
                let mut next = vec![0.0f64; rows * span.in_dim];
                linear_grad_inputs(&d_pre, span.out_dim, self.layer_w(l), span.in_dim, &mut next);
                d_post = next;
            } else {
                d_post = d_pre; // input gradients are not needed
            }
        }
        Ok(())
    }

    /// Single-input forward pass with NaN diagnostics, returning the
    /// constrained kinetic parameters.
    pub fn forward(&self, head: ParamHead, input: &[f64]) -> Result<KineticParams> {
        if input.len() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != network input dim {}",
                input.len(),
                self.input_dim
            )));
        }
        let mut cur = input.to_vec();
        for (l, span) in self.layers.iter().enumerate() {
            let mut next = vec![0.0f64; span.out_dim];
            linear_forward(&cur, span.in_dim, self.layer_w(l), self.layer_b(l), &mut next);
            if l == 0 {
                for v in &mut next {
                    *v *= self.w0;
                }
            }
            if l < self.hidden.len() {
                for v in &mut next {
                    *v = v.sin();
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("NaN/Inf after layer {l}")));
            }
            cur = next;
        }
        Ok(head.apply([cur[0], cur[1], cur[2], cur[3]]))
    }

    /// Raw head inputs for a batch (inference convenience).
    pub fn raw_outputs(&self, inputs: &[f64], acts: &mut Activations) -> Vec<[f64; 4]> {
        self.forward_batch(inputs, acts);
        acts.raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
    }
}

fn split_grad(grad: &mut [f64], span: LayerSpan) -> (&mut [f64], &mut [f64]) {
    let (_, rest) = grad.split_at_mut(span.w);
    let (gw, rest) = rest.split_at_mut(span.in_dim * span.out_dim);
    let (gb, _) = rest.split_at_mut(span.out_dim);
    (gw, gb)
}

/// Cached activations from a batched forward pass.
#[derive(Debug, Default)]
pub struct Activations {
    input: Vec<f64>,
    /// Per hidden layer: pre-activation (after the w0 scale).
    pre: Vec<Vec<f64>>,
    /// Per hidden layer: sin(pre).
    post: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

impl Activations {
    pub fn new() -> Self {
        Self::default()
    }

    fn reset(&mut self, net: &SineMlp, rows: usize) {
        let n_hidden = net.hidden.len();
        self.pre.resize(n_hidden, Vec::new());
        self.post.resize(n_hidden, Vec::new());
        for (l, &width) in net.hidden.iter().enumerate() {
            self.pre[l].resize(rows * width, 0.0);
            self.post[l].resize(rows * width, 0.0);
        }
        self.raw.resize(rows * N_OUTPUTS, 0.0);
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::central_diff;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = SineMlp::new(9, 512, DEFAULT_W0);
        let b = SineMlp::new(9, 512, DEFAULT_W0);
        assert_eq!(a.params(), b.params());

        let first = a.layer_w(0);
        let bound = 1.0 / 512.0;
        assert!(first.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn deeper_layer_moments_match_uniform_distribution() {
        // U[-a, a] has sd a/sqrt(3) with a = sqrt(6/512)/w0.
        let net = SineMlp::new(3, 512, DEFAULT_W0);
        let w = net.layer_w(1);
        assert_eq!(w.len(), 512 * 512);
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expect = (6.0f64 / 512.0).sqrt() / (DEFAULT_W0 * 3.0f64.sqrt());
        assert!(
            (var.sqrt() - expect).abs() <= 0.05 * expect,
            "sd {} vs {}",
            var.sqrt(),
            expect
        );
    }

    #[test]
    fn zero_network_outputs_head_of_zero() {
        let mut net = SineMlp::with_dims(1, 8, &[8, 8, 8], DEFAULT_W0);
        net.params_mut().fill(0.0);
        let p = net.forward(ParamHead::Softplus, &[0.3; 8]).unwrap();
        assert_eq!(p.vb, 0.5);
        let ln2 = std::f64::consts::LN_2;
        assert!((p.k1 - ln2).abs() < 1e-15);
        assert!((p.k2 - ln2).abs() < 1e-15);
        assert!((p.k3 - ln2).abs() < 1e-15);
    }

    #[test]
    fn outputs_satisfy_parameter_ranges() {
        let net = SineMlp::with_dims(5, 16, &[16, 16, 16], DEFAULT_W0);
        let mut acts = Activations::new();
        let inputs: Vec<f64> = (0..64 * 16).map(|i| ((i * 37 % 100) as f64 / 50.0) - 1.0).collect();
        for raw in net.raw_outputs(&inputs, &mut acts) {
            let p = ParamHead::Softplus.apply(raw);
            assert!(p.k1 > 0.0 && p.k2 > 0.0 && p.k3 > 0.0);
            assert!(p.vb > 0.0 && p.vb < 1.0);
            p.validate().unwrap();
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = SineMlp::with_dims(2, 12, &[16, 16, 16], DEFAULT_W0);
        let x = vec![0.25; 12];
        let a = net.forward(ParamHead::Softplus, &x).unwrap();
        let b = net.forward(ParamHead::Softplus, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let net = SineMlp::with_dims(11, 10, &[16, 16, 16], DEFAULT_W0);
        let mut acts = Activations::new();
        let inputs: Vec<f64> = (0..5 * 10).map(|i| (i as f64 * 0.7).sin()).collect();
        let raws = net.raw_outputs(&inputs, &mut acts);
        for (r, raw) in raws.iter().enumerate() {
            let p_batch = ParamHead::Softplus.apply(*raw);
            let p_single = net
                .forward(ParamHead::Softplus, &inputs[r * 10..(r + 1) * 10])
                .unwrap();
            assert!((p_batch.k1 - p_single.k1).abs() < 1e-14);
            assert!((p_batch.vb - p_single.vb).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = SineMlp::with_dims(4, 6, &[16, 16, 16], DEFAULT_W0);
        let mut acts = Activations::new();
        let inputs = vec![0.1; 3 * 6];
        net.forward_batch(&inputs, &mut acts);
        let mut grad = vec![1.0; net.n_params()];
        net.backward_batch(&acts, &vec![0.0; 12], &mut grad).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_upstream() {
        let net = SineMlp::with_dims(8, 6, &[16, 16, 16], DEFAULT_W0);
        let mut acts = Activations::new();
        let inputs: Vec<f64> = (0..2 * 6).map(|i| (i as f64 * 0.3).cos()).collect();
        net.forward_batch(&inputs, &mut acts);
        let upstream: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let scaled: Vec<f64> = upstream.iter().map(|u| 2.5 * u).collect();
        let mut g1 = vec![0.0; net.n_params()];
        let mut g2 = vec![0.0; net.n_params()];
        net.backward_batch(&acts, &upstream, &mut g1).unwrap();
        net.backward_batch(&acts, &scaled, &mut g2).unwrap();
        // Scaling commutes with the whole chain up to reassociation
        // rounding, which is bounded by the largest gradient magnitude.
        let gmax = g2.iter().map(|g| g.abs()).fold(1e-300, f64::max);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.5 * a - b).abs() <= 1e-13 * gmax, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        // Scalar loss L = sum_i c_i * param_i over a 2-row batch on a
        // 16-wide copy of the architecture.
        let mut net = SineMlp::with_dims(77, 6, &[16, 16, 16], DEFAULT_W0);
        let inputs: Vec<f64> = (0..2 * 6).map(|i| (0.41 * i as f64).sin()).collect();
        let coeff = [0.7, -0.3, 0.5, 1.1];
        let head = ParamHead::Softplus;

        let loss = |net: &SineMlp| -> f64 {
            let mut acts = Activations::new();
            net.forward_batch(&inputs, &mut acts);
            acts.raw()
                .chunks_exact(4)
                .map(|r| {
                    let p = head.apply([r[0], r[1], r[2], r[3]]).as_array();
                    p.iter().zip(&coeff).map(|(v, c)| v * c).sum::<f64>()
                })
                .sum()
        };

        let mut acts = Activations::new();
        net.forward_batch(&inputs, &mut acts);
        let upstream: Vec<f64> = acts
            .raw()
            .chunks_exact(4)
            .flat_map(|r| {
                let d = head.derivative([r[0], r[1], r[2], r[3]]);
                [coeff[0] * d[0], coeff[1] * d[1], coeff[2] * d[2], coeff[3] * d[3]]
            })
            .collect();
        let mut grad = vec![0.0; net.n_params()];
        net.backward_batch(&acts, &upstream, &mut grad).unwrap();

        let n = net.n_params();
        let gmax = grad.iter().map(|g| g.abs()).fold(1e-12, f64::max);
        for idx in (0..n).step_by(97) {
            let orig = net.params()[idx];
            let fd = central_diff(
                |w| {
                    net.params_mut()[idx] = w;
                    let v = loss(&net);
                    net.params_mut()[idx] = orig;
                    v
                },
                orig,
                1e-6,
            );
            let denom = grad[idx].abs().max(fd.abs()).max(1e-7 * gmax);
            assert!(
                (grad[idx] - fd).abs() / denom < crate::tolerances::JACOBIAN_VS_FD_REL,
                "param {idx}: analytic {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let net = SineMlp::with_dims(1, 4, &[8], DEFAULT_W0);
        let mut acts = Activations::new();
        net.forward_batch(&vec![0.0; 8], &mut acts);
        let mut grad = vec![0.0; net.n_params()];
        assert!(matches!(
            net.backward_batch(&acts, &vec![0.0; 4], &mut grad),
            Err(Error::State(_))
        ));
    }
}
