//! Neural building blocks: linear layers, (bi)directional LSTM stacks with
//! optional projection and frame decimation, and the six-layer VGG-style
//! convolutional front end.
//!
//! Parameters live in plain [`Tensor`]s owned by layer structs. To run a
//! layer, its tensors are bound onto a [`Tape`] through a [`Binder`], which
//! records a (name, handle) pair per parameter; the bound mirror structs
//! then drive the tape. One model can thus be bound onto many tapes (one
//! per utterance) while the optimizer sees a single named parameter set.

use crate::numerics::{Tape, Tensor, Var};
use rand::Rng;

/// Uniform init in [-0.1, 0.1], gradient-enabled.
pub fn init_uniform(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
    Tensor::new(shape, data).with_grad()
}

/// A named collection of parameter tensors. Visit order is fixed per
/// implementor, and names are stable across runs, so optimizers and
/// checkpoints can address parameters without positional coupling.
pub trait ParamSet {
    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));
}

/// Records parameter tensors onto a tape under stable names.
///
/// `frozen` strips `requires_grad`, which turns every downstream op into a
/// pure value computation (decoding path).
pub struct Binder<'t> {
    tape: &'t mut Tape,
    frozen: bool,
    pairs: Vec<(String, Var)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape, frozen: bool) -> Self {
        Binder {
            tape,
            frozen,
            pairs: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: String, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.grad = None;
        if self.frozen {
            c.requires_grad = false;
        }
        let v = self.tape.leaf(c);
        self.pairs.push((name, v));
        v
    }

    /// Ends the binding phase, releasing the tape borrow.
    pub fn finish(self) -> Vec<(String, Var)> {
        self.pairs
    }
}

pub struct LinearLayer {
    pub weight: Tensor, // [out, in]; rows are output units
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn seeded(out_dim: usize, in_dim: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: init_uniform(rng, vec![out_dim, in_dim]),
            bias: with_bias.then(|| init_uniform(rng, vec![out_dim])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.b"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.b"), b);
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundLinear {
        BoundLinear {
            w: b.bind(format!("{prefix}.w"), &self.weight),
            b: self.bias.as_ref().map(|t| b.bind(format!("{prefix}.b"), t)),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Option<Var>,
}

impl BoundLinear {
    pub fn apply_vec(&self, t: &mut Tape, x: Var) -> Var {
        let y = t.matvec(self.w, x);
        match self.b {
            Some(b) => t.add(y, b),
            None => y,
        }
    }

    pub fn apply_rows(&self, t: &mut Tape, x: Var) -> Var {
        let y = t.matmul_tb(x, self.w);
        match self.b {
            Some(b) => t.add_vec_to_rows(y, b),
            None => y,
        }
    }
}

/// One LSTM cell's parameters. Gates are packed along the first axis in the
/// order input, forget, cell, output.
pub struct LstmCell {
    pub w_x: Tensor, // [4H, D_in]
    pub w_h: Tensor, // [4H, H]
    pub b: Tensor,   // [4H]
    pub hidden: usize,
}

impl LstmCell {
    pub fn seeded(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmCell {
            w_x: init_uniform(rng, vec![4 * hidden, input_dim]),
            w_h: init_uniform(rng, vec![4 * hidden, hidden]),
            b: init_uniform(rng, vec![4 * hidden]),
            hidden,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.wx"), &self.w_x);
        f(format!("{prefix}.wh"), &self.w_h);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wx"), &mut self.w_x);
        f(format!("{prefix}.wh"), &mut self.w_h);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundLstmCell {
        BoundLstmCell {
            w_x: b.bind(format!("{prefix}.wx"), &self.w_x),
            w_h: b.bind(format!("{prefix}.wh"), &self.w_h),
            b: b.bind(format!("{prefix}.b"), &self.b),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLstmCell {
    w_x: Var,
    w_h: Var,
    b: Var,
    pub hidden: usize,
}

impl BoundLstmCell {
    pub fn zero_state(&self, t: &mut Tape) -> (Var, Var) {
        let h = t.constant(Tensor::zeros(vec![self.hidden]));
        let c = t.constant(Tensor::zeros(vec![self.hidden]));
        (h, c)
    }

    /// One step; returns the new (hidden, cell) pair.
    pub fn step(&self, t: &mut Tape, x: Var, state: (Var, Var)) -> (Var, Var) {
        let h = self.hidden;
        let (h_prev, c_prev) = state;
        let gx = t.matvec(self.w_x, x);
        let gh = t.matvec(self.w_h, h_prev);
        let s = t.add(gx, gh);
        let pre = t.add(s, self.b);
        let i_pre = t.slice_1d(pre, 0, h);
        let f_pre = t.slice_1d(pre, h, h);
        let g_pre = t.slice_1d(pre, 2 * h, h);
        let o_pre = t.slice_1d(pre, 3 * h, h);
        let i = t.sigmoid(i_pre);
        let f = t.sigmoid(f_pre);
        let g = t.tanh(g_pre);
        let o = t.sigmoid(o_pre);
        let fc = t.mul(f, c_prev);
        let ig = t.mul(i, g);
        let c = t.add(fc, ig);
        let ct = t.tanh(c);
        let h_new = t.mul(o, ct);
        (h_new, c)
    }
}

pub struct LstmStackLayer {
    pub fwd: LstmCell,
    pub bwd: Option<LstmCell>,
    pub proj: Option<LinearLayer>,
    pub decimation: usize,
}

/// Stack of LSTM layers. After each layer's full-length output (optionally
/// projected), frames at indices 0, d, 2d, … are kept, ⌊len/d⌋ of them.
pub struct LstmStack {
    pub layers: Vec<LstmStackLayer>,
    out_dim: usize,
}

/// Distributes an overall subsampling factor over layers, halving early:
/// (4, 2 layers) → [2, 2]; (4, 1 layer) → [4]; (2, 3 layers) → [2, 1, 1].
pub fn split_decimation(total: usize, layers: usize) -> Vec<usize> {
    let mut remaining = total.max(1);
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        let d = if i + 1 == layers {
            remaining
        } else if remaining > 1 {
            2
        } else {
            1
        };
        out.push(d);
        remaining = (remaining / d).max(1);
    }
    out
}

impl LstmStack {
    pub fn seeded(
        input_dim: usize,
        cells: usize,
        num_layers: usize,
        bidirectional: bool,
        projection: Option<usize>,
        decimation: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(num_layers >= 1, "lstm stack needs at least one layer");
        assert_eq!(decimation.len(), num_layers);
        let mut layers = Vec::with_capacity(num_layers);
        let mut d_in = input_dim;
        for l in 0..num_layers {
            let raw_out = if bidirectional { 2 * cells } else { cells };
            let layer = LstmStackLayer {
                fwd: LstmCell::seeded(d_in, cells, rng),
                bwd: bidirectional.then(|| LstmCell::seeded(d_in, cells, rng)),
                proj: projection.map(|p| LinearLayer::seeded(p, raw_out, false, rng)),
                decimation: decimation[l],
            };
            d_in = projection.unwrap_or(raw_out);
            layers.push(layer);
        }
        LstmStack {
            layers,
            out_dim: d_in,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Frames produced for an input of length `t` (successive floors).
    pub fn output_len(&self, t: usize) -> usize {
        self.layers.iter().fold(t, |acc, l| acc / l.decimation)
    }

    /// Smallest input length that still yields one output frame.
    pub fn min_input_len(&self) -> usize {
        self.layers.iter().map(|l| l.decimation).product()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.fwd.visit(&format!("{prefix}.l{i}.fwd"), f);
            if let Some(b) = &l.bwd {
                b.visit(&format!("{prefix}.l{i}.bwd"), f);
            }
            if let Some(p) = &l.proj {
                p.visit(&format!("{prefix}.l{i}.proj"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.fwd.visit_mut(&format!("{prefix}.l{i}.fwd"), f);
            if let Some(b) = &mut l.bwd {
                b.visit_mut(&format!("{prefix}.l{i}.bwd"), f);
            }
            if let Some(p) = &mut l.proj {
                p.visit_mut(&format!("{prefix}.l{i}.proj"), f);
            }
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundLstmStack {
        BoundLstmStack {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| BoundLstmStackLayer {
                    fwd: l.fwd.bind(b, &format!("{prefix}.l{i}.fwd")),
                    bwd: l.bwd.as_ref().map(|c| c.bind(b, &format!("{prefix}.l{i}.bwd"))),
                    proj: l.proj.as_ref().map(|p| p.bind(b, &format!("{prefix}.l{i}.proj"))),
                    decimation: l.decimation,
                })
                .collect(),
        }
    }
}

pub struct BoundLstmStackLayer {
    fwd: BoundLstmCell,
    bwd: Option<BoundLstmCell>,
    proj: Option<BoundLinear>,
    decimation: usize,
}

pub struct BoundLstmStack {
    layers: Vec<BoundLstmStackLayer>,
}

fn run_direction(t: &mut Tape, cell: &BoundLstmCell, x: Var, reverse: bool) -> Vec<Var> {
    let rows = t.shape(x)[0];
    let (mut h, mut c) = cell.zero_state(t);
    let mut hs = vec![h; rows];
    let order: Vec<usize> = if reverse {
        (0..rows).rev().collect()
    } else {
        (0..rows).collect()
    };
    for i in order {
        let xi = t.row(x, i);
        let (h2, c2) = cell.step(t, xi, (h, c));
        hs[i] = h2;
        h = h2;
        c = c2;
    }
    hs
}

impl BoundLstmStack {
    /// `[T, D] → [T', H]` with T' = the stack's successive-floor length.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let mut cur = x;
        for layer in &self.layers {
            let fwd = run_direction(t, &layer.fwd, cur, false);
            let mut out = t.stack_rows(&fwd);
            if let Some(bwd) = &layer.bwd {
                let back = run_direction(t, bwd, cur, true);
                let bmat = t.stack_rows(&back);
                out = t.concat_cols(out, bmat);
            }
            if let Some(p) = &layer.proj {
                out = p.apply_rows(t, out);
            }
            if layer.decimation > 1 {
                out = t.decimate_rows(out, layer.decimation);
            }
            cur = out;
        }
        cur
    }
}

pub struct ConvLayer {
    pub weight: Tensor, // [out_ch, in_ch·9]
    pub bias: Tensor,   // [out_ch]
}

impl ConvLayer {
    fn seeded(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        ConvLayer {
            weight: init_uniform(rng, vec![out_ch, in_ch * 9]),
            bias: init_uniform(rng, vec![out_ch]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.weight);
        f(format!("{prefix}.b"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.weight);
        f(format!("{prefix}.b"), &mut self.bias);
    }
}

/// conv(1→64) · conv(64→64) · pool2 · conv(64→128) · conv(128→128) · pool2,
/// ReLU after every convolution, same-padding, channels flattened back onto
/// the feature axis at the end. Both axes shrink by exactly ⌊·/4⌋.
pub struct VggFrontEnd {
    convs: [ConvLayer; 4],
}

pub const VGG_CHANNELS: [(usize, usize); 4] = [(1, 64), (64, 64), (64, 128), (128, 128)];

impl VggFrontEnd {
    pub fn seeded(rng: &mut impl Rng) -> Self {
        let convs = VGG_CHANNELS.map(|(i, o)| ConvLayer::seeded(i, o, rng));
        VggFrontEnd { convs }
    }

    pub fn output_len(t: usize) -> usize {
        t / 4
    }

    pub fn output_dim(d: usize) -> usize {
        128 * (d / 4)
    }

    pub fn min_input_len() -> usize {
        4
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv{i}"), f);
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundVgg {
        let bound = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    b.bind(format!("{prefix}.conv{i}.w"), &c.weight),
                    b.bind(format!("{prefix}.conv{i}.b"), &c.bias),
                )
            })
            .collect::<Vec<_>>();
        BoundVgg {
            convs: [bound[0], bound[1], bound[2], bound[3]],
        }
    }
}

pub struct BoundVgg {
    convs: [(Var, Var); 4],
}

impl BoundVgg {
    /// `[T, D] → [⌊T/4⌋, 128·⌊D/4⌋]`. Inputs shorter than 4 on either axis
    /// are rejected upstream with an input-too-short error.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (rows, d) = (t.shape(x)[0], t.shape(x)[1]);
        assert!(
            rows >= 4 && d >= 4,
            "vgg forward needs at least a 4x4 input, got {}x{}",
            rows,
            d
        );
        let mut cur = t.reshape(x, vec![1, rows, d]);
        for (stage, &(w, b)) in self.convs.iter().enumerate() {
            let c = t.conv3x3(cur, w, b);
            cur = t.relu(c);
            if stage == 1 || stage == 3 {
                cur = t.maxpool2x2(cur);
            }
        }
        t.channels_to_rows(cur)
    }
}
