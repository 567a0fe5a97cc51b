use super::tensor::{logaddexp, softmax_into, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    MatmulTB(Var, Var),
    MatVec(Var, Var),
    TMatVec(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax1d(Var),
    LogSoftmax1d(Var),
    LogSumExp(Var),
    Sum(Var),
    Dot(Var, Var),
    Concat1d(Var, Var),
    Slice1d { input: Var, start: usize },
    RowOf { input: Var, row: usize },
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    DecimateRows { input: Var, stride: usize },
    Reshape(Var),
    Conv3x3 { input: Var, weight: Var, bias: Var },
    MaxPool2x2(Var),
    ChannelsToRows(Var),
    AddVecToRows { mat: Var, vec: Var },
    CtcLoss { logits: Var, labels: Vec<usize>, blank: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Values are recorded eagerly; `backward` replays the list in reverse and
/// accumulates into the persistent gradient buffer of every `requires_grad`
/// leaf. Repeated backward calls accumulate until [`Tape::zero_grads`].
/// Accumulation follows recording order, so runs are bit-reproducible.
///
/// A tape is single-owner state: one worker builds and differentiates it.
/// Parallel training uses one tape per utterance.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.iter().all(|&e| e > 0));
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input node. Gradients flow into it iff the tensor was
    /// marked `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires = t.requires_grad;
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, requires)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a scalar node.
    pub fn value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.data.len(), 1, "value() on non-scalar node {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat_dims(&self, v: Var, op: &str) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "{}: expected a matrix, got shape {:?}", op, s);
        (s[0], s[1])
    }

    fn vec_len(&self, v: Var, op: &str) -> usize {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 1, "{}: expected a vector, got shape {:?}", op, s);
        s[0]
    }

    fn chw_dims(&self, v: Var, op: &str) -> (usize, usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(
            s.len(),
            3,
            "{}: expected [channels, height, width], got shape {:?}",
            op,
            s
        );
        (s[0], s[1], s[2])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "add: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "sub: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "mul: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), rg)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.mat_dims(a, "matmul");
        let (kb, n) = self.mat_dims(b, "matmul");
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions differ, lhs is [{}, {}], rhs is [{}, {}]",
            m, ka, kb, n
        );
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for k in 0..ka {
                    let f = av[i * ka + k];
                    for (o, &bb) in orow.iter_mut().zip(&bv[k * n..(k + 1) * n]) {
                        *o += f * bb;
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![m, n], out, Op::Matmul(a, b), rg)
    }

    /// `a · bᵀ`: `[m,k] × [n,k] → [m,n]`. Rows of `b` are the projection
    /// vectors, which keeps per-output-unit weights contiguous.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.mat_dims(a, "matmul_tb");
        let (n, kb) = self.mat_dims(b, "matmul_tb");
        assert_eq!(
            ka, kb,
            "matmul_tb: inner dimensions differ, lhs is [{}, {}], rhs is [{}, {}]",
            m, ka, n, kb
        );
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &av[i * ka..(i + 1) * ka];
                for j in 0..n {
                    let brow = &bv[j * kb..(j + 1) * kb];
                    out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![m, n], out, Op::MatmulTB(a, b), rg)
    }

    /// `[r,c] × [c] → [r]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = self.mat_dims(m, "matvec");
        let lv = self.vec_len(v, "matvec");
        assert_eq!(
            c, lv,
            "matvec: matrix [{}, {}] does not match vector [{}]",
            r, c, lv
        );
        let mv = &self.nodes[m.0].data;
        let vv = &self.nodes[v.0].data;
        let out: Vec<f64> = (0..r)
            .map(|i| mv[i * c..(i + 1) * c].iter().zip(vv).map(|(x, y)| x * y).sum())
            .collect();
        let rg = self.requires(m) || self.requires(v);
        self.push(vec![r], out, Op::MatVec(m, v), rg)
    }

    /// `mᵀ v`: `[r,c] × [r] → [c]`.
    pub fn tmatvec(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = self.mat_dims(m, "tmatvec");
        let lv = self.vec_len(v, "tmatvec");
        assert_eq!(
            r, lv,
            "tmatvec: matrix [{}, {}] does not match vector [{}]",
            r, c, lv
        );
        let mut out = vec![0.0; c];
        {
            let mv = &self.nodes[m.0].data;
            let vv = &self.nodes[v.0].data;
            for i in 0..r {
                let f = vv[i];
                for (o, &x) in out.iter_mut().zip(&mv[i * c..(i + 1) * c]) {
                    *o += f * x;
                }
            }
        }
        let rg = self.requires(m) || self.requires(v);
        self.push(vec![c], out, Op::TMatVec(m, v), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Relu(a), rg)
    }

    pub fn softmax_1d(&mut self, a: Var) -> Var {
        let n = self.vec_len(a, "softmax_1d");
        let mut out = vec![0.0; n];
        softmax_into(&self.nodes[a.0].data, &mut out);
        let rg = self.requires(a);
        self.push(vec![n], out, Op::Softmax1d(a), rg)
    }

    pub fn log_softmax_1d(&mut self, a: Var) -> Var {
        let n = self.vec_len(a, "log_softmax_1d");
        let x = &self.nodes[a.0].data;
        let lse = super::tensor::logsumexp(x);
        let out = x.iter().map(|v| v - lse).collect();
        let rg = self.requires(a);
        self.push(vec![n], out, Op::LogSoftmax1d(a), rg)
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        self.vec_len(a, "logsumexp");
        let v = super::tensor::logsumexp(&self.nodes[a.0].data);
        let rg = self.requires(a);
        self.push(vec![1], vec![v], Op::LogSumExp(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![v], Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let la = self.vec_len(a, "dot");
        let lb = self.vec_len(b, "dot");
        assert_eq!(la, lb, "dot: vector lengths differ, [{}] vs [{}]", la, lb);
        let v = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![1], vec![v], Op::Dot(a, b), rg)
    }

    pub fn concat_1d(&mut self, a: Var, b: Var) -> Var {
        let la = self.vec_len(a, "concat_1d");
        let lb = self.vec_len(b, "concat_1d");
        let mut data = Vec::with_capacity(la + lb);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![la + lb], data, Op::Concat1d(a, b), rg)
    }

    pub fn slice_1d(&mut self, a: Var, start: usize, len: usize) -> Var {
        let la = self.vec_len(a, "slice_1d");
        assert!(
            len >= 1 && start + len <= la,
            "slice_1d: range {}..{} out of bounds for vector [{}]",
            start,
            start + len,
            la
        );
        let data = self.nodes[a.0].data[start..start + len].to_vec();
        let rg = self.requires(a);
        self.push(vec![len], data, Op::Slice1d { input: a, start }, rg)
    }

    pub fn row(&mut self, m: Var, r: usize) -> Var {
        let (rows, cols) = self.mat_dims(m, "row");
        assert!(r < rows, "row: index {} out of bounds for [{}, {}]", r, rows, cols);
        let data = self.nodes[m.0].data[r * cols..(r + 1) * cols].to_vec();
        let rg = self.requires(m);
        self.push(vec![cols], data, Op::RowOf { input: m, row: r }, rg)
    }

    /// Stacks equal-length vectors into a `[len(vs), cols]` matrix.
    pub fn stack_rows(&mut self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty(), "stack_rows: no rows given");
        let cols = self.vec_len(vs[0], "stack_rows");
        let mut data = Vec::with_capacity(vs.len() * cols);
        let mut rg = false;
        for &v in vs {
            let lv = self.vec_len(v, "stack_rows");
            assert_eq!(lv, cols, "stack_rows: row lengths differ, [{}] vs [{}]", cols, lv);
            data.extend_from_slice(&self.nodes[v.0].data);
            rg |= self.requires(v);
        }
        self.push(vec![vs.len(), cols], data, Op::StackRows(vs.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.mat_dims(a, "concat_cols");
        let (rb, cb) = self.mat_dims(b, "concat_cols");
        assert_eq!(
            ra, rb,
            "concat_cols: row counts differ, [{}, {}] vs [{}, {}]",
            ra, ca, rb, cb
        );
        let mut data = Vec::with_capacity(ra * (ca + cb));
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..ra {
                data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![ra, ca + cb], data, Op::ConcatCols(a, b), rg)
    }

    /// Keeps rows `0, stride, 2·stride, …`, exactly `⌊rows/stride⌋` of them.
    pub fn decimate_rows(&mut self, m: Var, stride: usize) -> Var {
        let (rows, cols) = self.mat_dims(m, "decimate_rows");
        assert!(stride >= 1, "decimate_rows: stride must be at least 1");
        let out_rows = rows / stride;
        assert!(
            out_rows >= 1,
            "decimate_rows: stride {} leaves no rows of [{}, {}]",
            stride,
            rows,
            cols
        );
        let mv = &self.nodes[m.0].data;
        let mut data = Vec::with_capacity(out_rows * cols);
        for i in 0..out_rows {
            let r = i * stride;
            data.extend_from_slice(&mv[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires(m);
        self.push(vec![out_rows, cols], data, Op::DecimateRows { input: m, stride }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.nodes[a.0].data.len(),
            "reshape: {:?} and {:?} hold different element counts",
            self.nodes[a.0].shape,
            shape
        );
        let data = self.nodes[a.0].data.clone();
        let rg = self.requires(a);
        self.push(shape, data, Op::Reshape(a), rg)
    }

    /// 3×3 same-padding convolution. `input` is `[C,H,W]`, `weight` is
    /// `[O, C·9]` with kernel taps row-major, `bias` is `[O]`; output `[O,H,W]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (c_in, h, w) = self.chw_dims(input, "conv3x3");
        let (c_out, wk) = self.mat_dims(weight, "conv3x3");
        let lb = self.vec_len(bias, "conv3x3");
        assert_eq!(
            wk,
            c_in * 9,
            "conv3x3: weight [{}, {}] does not match {} input channels",
            c_out,
            wk,
            c_in
        );
        assert_eq!(
            lb, c_out,
            "conv3x3: bias [{}] does not match {} output channels",
            lb, c_out
        );
        let mut out = vec![0.0; c_out * h * w];
        {
            let iv = &self.nodes[input.0].data;
            let wv = &self.nodes[weight.0].data;
            let bv = &self.nodes[bias.0].data;
            for o in 0..c_out {
                let oplane = &mut out[o * h * w..(o + 1) * h * w];
                oplane.fill(bv[o]);
                for c in 0..c_in {
                    let iplane = &iv[c * h * w..(c + 1) * h * w];
                    let taps = &wv[o * wk + c * 9..o * wk + c * 9 + 9];
                    for (k, &tap) in taps.iter().enumerate() {
                        let dh = (k / 3) as isize - 1;
                        let dw = (k % 3) as isize - 1;
                        shifted_axpy(oplane, iplane, h, w, dh, dw, tap);
                    }
                }
            }
        }
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        self.push(vec![c_out, h, w], out, Op::Conv3x3 { input, weight, bias }, rg)
    }

    /// 2×2 max pooling, stride 2, trailing odd row/column dropped:
    /// `[C,H,W] → [C, ⌊H/2⌋, ⌊W/2⌋]`.
    pub fn maxpool2x2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.chw_dims(a, "maxpool2x2");
        assert!(
            h >= 2 && w >= 2,
            "maxpool2x2: plane [{} x {}] is smaller than the 2x2 window",
            h,
            w
        );
        let (h2, w2) = (h / 2, w / 2);
        let iv = &self.nodes[a.0].data;
        let mut out = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            let ip = &iv[ci * h * w..(ci + 1) * h * w];
            let op = &mut out[ci * h2 * w2..(ci + 1) * h2 * w2];
            for oh in 0..h2 {
                for ow in 0..w2 {
                    let (r, cc) = (2 * oh, 2 * ow);
                    let m = ip[r * w + cc]
                        .max(ip[r * w + cc + 1])
                        .max(ip[(r + 1) * w + cc])
                        .max(ip[(r + 1) * w + cc + 1]);
                    op[oh * w2 + ow] = m;
                }
            }
        }
        let rg = self.requires(a);
        self.push(vec![c, h2, w2], out, Op::MaxPool2x2(a), rg)
    }

    /// `[C,H,W] → [H, C·W]`: one row per original time step, channels
    /// laid out side by side.
    pub fn channels_to_rows(&mut self, a: Var) -> Var {
        let (c, h, w) = self.chw_dims(a, "channels_to_rows");
        let iv = &self.nodes[a.0].data;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                let src = &iv[ci * h * w + hi * w..ci * h * w + (hi + 1) * w];
                let dst = &mut out[hi * c * w + ci * w..hi * c * w + (ci + 1) * w];
                dst.copy_from_slice(src);
            }
        }
        let rg = self.requires(a);
        self.push(vec![h, c * w], out, Op::ChannelsToRows(a), rg)
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_vec_to_rows(&mut self, m: Var, v: Var) -> Var {
        let (r, c) = self.mat_dims(m, "add_vec_to_rows");
        let lv = self.vec_len(v, "add_vec_to_rows");
        assert_eq!(
            c, lv,
            "add_vec_to_rows: matrix [{}, {}] does not match vector [{}]",
            r, c, lv
        );
        let vv = &self.nodes[v.0].data;
        let data = self.nodes[m.0]
            .data
            .chunks(c)
            .flat_map(|row| row.iter().zip(vv).map(|(x, y)| x + y))
            .collect();
        let rg = self.requires(m) || self.requires(v);
        self.push(vec![r, c], data, Op::AddVecToRows { mat: m, vec: v }, rg)
    }

    /// Negative log-probability of `labels` under the blank-augmented
    /// alignment lattice over `logits` (`[T, K]`, unnormalized). Returns a
    /// scalar; an unreachable label sequence (too few frames) yields +∞ and
    /// a zero gradient.
    pub fn ctc_loss(&mut self, logits: Var, labels: &[usize], blank: usize) -> Var {
        let (t_len, cols) = self.mat_dims(logits, "ctc_loss");
        assert!(blank < cols, "ctc_loss: blank {} outside {} columns", blank, cols);
        for &l in labels {
            assert!(
                l < cols && l != blank,
                "ctc_loss: label {} invalid for {} columns with blank {}",
                l,
                cols,
                blank
            );
        }
        let lp = log_softmax_rows(&self.nodes[logits.0].data, t_len, cols);
        let z = extend_with_blanks(labels, blank);
        let (_alpha, logp) = ctc_alpha(&lp, t_len, cols, &z, blank);
        let loss = -logp;
        let rg = self.requires(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::CtcLoss {
                logits,
                labels: labels.to_vec(),
                blank,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar loss. Gradients land in the persistent
    /// buffers of `requires_grad` leaves and accumulate across calls.
    pub fn backward(&mut self, loss: Var) {
        let ln = &self.nodes[loss.0];
        assert_eq!(
            ln.data.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            ln.shape
        );
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let n = &mut self.nodes[i];
                    let g = n.grad.get_or_insert_with(|| vec![0.0; gout.len()]);
                    for (a, b) in g.iter_mut().zip(&gout) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut scratch, a, |g| axpy(g, &gout, 1.0));
                    self.acc(&mut scratch, b, |g| axpy(g, &gout, 1.0));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut scratch, a, |g| axpy(g, &gout, 1.0));
                    self.acc(&mut scratch, b, |g| axpy(g, &gout, -1.0));
                }
                Op::Mul(a, b) => {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    self.acc(&mut scratch, a, |g| {
                        for ((g, &go), &bv) in g.iter_mut().zip(&gout).zip(bd) {
                            *g += go * bv;
                        }
                    });
                    self.acc(&mut scratch, b, |g| {
                        for ((g, &go), &av) in g.iter_mut().zip(&gout).zip(ad) {
                            *g += go * av;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    self.acc(&mut scratch, a, |g| axpy(g, &gout, c));
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    // dA[i,p] = Σ_j gout[i,j]·B[p,j]
                    self.acc(&mut scratch, a, |g| {
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                g[i * k + p] += dot_slices(grow, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    });
                    // dB[p,j] = Σ_i A[i,p]·gout[i,j]
                    self.acc(&mut scratch, b, |g| {
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(&mut g[p * n..(p + 1) * n], grow, ad[i * k + p]);
                            }
                        }
                    });
                }
                Op::MatmulTB(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[0];
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    // dA[i,:] = Σ_j gout[i,j]·B[j,:]
                    self.acc(&mut scratch, a, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                axpy(&mut g[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k], gout[i * n + j]);
                            }
                        }
                    });
                    // dB[j,:] = Σ_i gout[i,j]·A[i,:]
                    self.acc(&mut scratch, b, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                axpy(&mut g[j * k..(j + 1) * k], &ad[i * k..(i + 1) * k], gout[i * n + j]);
                            }
                        }
                    });
                }
                Op::MatVec(m, v) => {
                    let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    let md = &self.nodes[m.0].data;
                    let vd = &self.nodes[v.0].data;
                    self.acc(&mut scratch, m, |g| {
                        for i in 0..r {
                            axpy(&mut g[i * c..(i + 1) * c], vd, gout[i]);
                        }
                    });
                    self.acc(&mut scratch, v, |g| {
                        for i in 0..r {
                            axpy(g, &md[i * c..(i + 1) * c], gout[i]);
                        }
                    });
                }
                Op::TMatVec(m, v) => {
                    let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    let md = &self.nodes[m.0].data;
                    let vd = &self.nodes[v.0].data;
                    self.acc(&mut scratch, m, |g| {
                        for i in 0..r {
                            axpy(&mut g[i * c..(i + 1) * c], &gout, vd[i]);
                        }
                    });
                    self.acc(&mut scratch, v, |g| {
                        for (gi, row) in g.iter_mut().zip(md.chunks(c)) {
                            *gi += dot_slices(row, &gout);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yd = &self.nodes[i].data;
                    self.acc(&mut scratch, a, |g| {
                        for ((g, &go), &y) in g.iter_mut().zip(&gout).zip(yd) {
                            *g += go * (1.0 - y * y);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yd = &self.nodes[i].data;
                    self.acc(&mut scratch, a, |g| {
                        for ((g, &go), &y) in g.iter_mut().zip(&gout).zip(yd) {
                            *g += go * y * (1.0 - y);
                        }
                    });
                }
                Op::Relu(a) => {
                    let yd = &self.nodes[i].data;
                    self.acc(&mut scratch, a, |g| {
                        for ((g, &go), &y) in g.iter_mut().zip(&gout).zip(yd) {
                            if y > 0.0 {
                                *g += go;
                            }
                        }
                    });
                }
                Op::Softmax1d(a) => {
                    let yd = &self.nodes[i].data;
                    let inner: f64 = gout.iter().zip(yd).map(|(g, y)| g * y).sum();
                    self.acc(&mut scratch, a, |g| {
                        for ((g, &go), &y) in g.iter_mut().zip(&gout).zip(yd) {
                            *g += y * (go - inner);
                        }
                    });
                }
                Op::LogSoftmax1d(a) => {
                    let yd = &self.nodes[i].data;
                    let gsum: f64 = gout.iter().sum();
                    self.acc(&mut scratch, a, |g| {
                        for ((g, &go), &y) in g.iter_mut().zip(&gout).zip(yd) {
                            *g += go - y.exp() * gsum;
                        }
                    });
                }
                Op::LogSumExp(a) => {
                    let y = self.nodes[i].data[0];
                    if y != f64::NEG_INFINITY {
                        let xd = &self.nodes[a.0].data;
                        self.acc(&mut scratch, a, |g| {
                            for (g, &x) in g.iter_mut().zip(xd) {
                                *g += gout[0] * (x - y).exp();
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    self.acc(&mut scratch, a, |g| {
                        for g in g.iter_mut() {
                            *g += gout[0];
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    self.acc(&mut scratch, a, |g| axpy(g, bd, gout[0]));
                    self.acc(&mut scratch, b, |g| axpy(g, ad, gout[0]));
                }
                Op::Concat1d(a, b) => {
                    let la = self.nodes[a.0].data.len();
                    self.acc(&mut scratch, a, |g| axpy(g, &gout[..la], 1.0));
                    self.acc(&mut scratch, b, |g| axpy(g, &gout[la..], 1.0));
                }
                Op::Slice1d { input, start } => {
                    let len = gout.len();
                    self.acc(&mut scratch, input, |g| {
                        axpy(&mut g[start..start + len], &gout, 1.0)
                    });
                }
                Op::RowOf { input, row } => {
                    let c = self.nodes[input.0].shape[1];
                    self.acc(&mut scratch, input, |g| {
                        axpy(&mut g[row * c..(row + 1) * c], &gout, 1.0)
                    });
                }
                Op::StackRows(vs) => {
                    let cols = self.nodes[i].shape[1];
                    for (r, &v) in vs.iter().enumerate() {
                        self.acc(&mut scratch, v, |g| {
                            axpy(g, &gout[r * cols..(r + 1) * cols], 1.0)
                        });
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].shape[1];
                    let cb = self.nodes[b.0].shape[1];
                    let rows = self.nodes[a.0].shape[0];
                    self.acc(&mut scratch, a, |g| {
                        for r in 0..rows {
                            axpy(
                                &mut g[r * ca..(r + 1) * ca],
                                &gout[r * (ca + cb)..r * (ca + cb) + ca],
                                1.0,
                            );
                        }
                    });
                    self.acc(&mut scratch, b, |g| {
                        for r in 0..rows {
                            axpy(
                                &mut g[r * cb..(r + 1) * cb],
                                &gout[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                                1.0,
                            );
                        }
                    });
                }
                Op::DecimateRows { input, stride } => {
                    let cols = self.nodes[input.0].shape[1];
                    let out_rows = gout.len() / cols;
                    self.acc(&mut scratch, input, |g| {
                        for r in 0..out_rows {
                            axpy(
                                &mut g[r * stride * cols..(r * stride + 1) * cols],
                                &gout[r * cols..(r + 1) * cols],
                                1.0,
                            );
                        }
                    });
                }
                Op::Reshape(a) => {
                    self.acc(&mut scratch, a, |g| axpy(g, &gout, 1.0));
                }
                Op::Conv3x3 { input, weight, bias } => {
                    let (c_in, h, w) = (
                        self.nodes[input.0].shape[0],
                        self.nodes[input.0].shape[1],
                        self.nodes[input.0].shape[2],
                    );
                    let c_out = self.nodes[weight.0].shape[0];
                    let wk = c_in * 9;
                    let id = &self.nodes[input.0].data;
                    let wd = &self.nodes[weight.0].data;
                    self.acc(&mut scratch, input, |g| {
                        for o in 0..c_out {
                            let gplane = &gout[o * h * w..(o + 1) * h * w];
                            for c in 0..c_in {
                                let gin = &mut g[c * h * w..(c + 1) * h * w];
                                let taps = &wd[o * wk + c * 9..o * wk + c * 9 + 9];
                                for (k, &tap) in taps.iter().enumerate() {
                                    let dh = (k / 3) as isize - 1;
                                    let dw = (k % 3) as isize - 1;
                                    shifted_axpy(gin, gplane, h, w, -dh, -dw, tap);
                                }
                            }
                        }
                    });
                    self.acc(&mut scratch, weight, |g| {
                        for o in 0..c_out {
                            let gplane = &gout[o * h * w..(o + 1) * h * w];
                            for c in 0..c_in {
                                let iplane = &id[c * h * w..(c + 1) * h * w];
                                for k in 0..9 {
                                    let dh = (k / 3) as isize - 1;
                                    let dw = (k % 3) as isize - 1;
                                    g[o * wk + c * 9 + k] += shifted_dot(gplane, iplane, h, w, dh, dw);
                                }
                            }
                        }
                    });
                    self.acc(&mut scratch, bias, |g| {
                        for o in 0..c_out {
                            g[o] += gout[o * h * w..(o + 1) * h * w].iter().sum::<f64>();
                        }
                    });
                }
                Op::MaxPool2x2(a) => {
                    let (c, h, w) = (
                        self.nodes[a.0].shape[0],
                        self.nodes[a.0].shape[1],
                        self.nodes[a.0].shape[2],
                    );
                    let (h2, w2) = (h / 2, w / 2);
                    let id = &self.nodes[a.0].data;
                    // The first window cell attaining the max (scan order) takes
                    // the whole gradient, matching the forward comparison chain.
                    self.acc(&mut scratch, a, |g| {
                        for ci in 0..c {
                            let ip = &id[ci * h * w..(ci + 1) * h * w];
                            let gp = &gout[ci * h2 * w2..(ci + 1) * h2 * w2];
                            let go = &mut g[ci * h * w..(ci + 1) * h * w];
                            for oh in 0..h2 {
                                for ow in 0..w2 {
                                    let (r, cc) = (2 * oh, 2 * ow);
                                    let idxs = [
                                        r * w + cc,
                                        r * w + cc + 1,
                                        (r + 1) * w + cc,
                                        (r + 1) * w + cc + 1,
                                    ];
                                    let mut best = idxs[0];
                                    for &ix in &idxs[1..] {
                                        if ip[ix] > ip[best] {
                                            best = ix;
                                        }
                                    }
                                    go[best] += gp[oh * w2 + ow];
                                }
                            }
                        }
                    });
                }
                Op::ChannelsToRows(a) => {
                    let (c, h, w) = (
                        self.nodes[a.0].shape[0],
                        self.nodes[a.0].shape[1],
                        self.nodes[a.0].shape[2],
                    );
                    self.acc(&mut scratch, a, |g| {
                        for ci in 0..c {
                            for hi in 0..h {
                                axpy(
                                    &mut g[ci * h * w + hi * w..ci * h * w + (hi + 1) * w],
                                    &gout[hi * c * w + ci * w..hi * c * w + (ci + 1) * w],
                                    1.0,
                                );
                            }
                        }
                    });
                }
                Op::AddVecToRows { mat, vec } => {
                    let c = self.nodes[vec.0].shape[0];
                    self.acc(&mut scratch, mat, |g| axpy(g, &gout, 1.0));
                    self.acc(&mut scratch, vec, |g| {
                        for row in gout.chunks(c) {
                            axpy(g, row, 1.0);
                        }
                    });
                }
                Op::CtcLoss { logits, labels, blank } => {
                    let (t_len, cols) =
                        (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let ld = &self.nodes[logits.0].data;
                    let dlogits = ctc_logit_grad(ld, t_len, cols, &labels, blank);
                    if let Some(dl) = dlogits {
                        self.acc(&mut scratch, logits, |g| axpy(g, &dl, gout[0]));
                    }
                }
            }
        }
    }

    fn acc(&self, scratch: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = scratch[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        f(buf);
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

#[inline]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// dst[h,w] += s · src[h+dh, w+dw] over coordinates valid in both planes.
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, dh: isize, dw: isize, s: f64) {
    let h0 = (-dh).max(0) as usize;
    let h1 = ((h as isize).min(h as isize - dh)).max(0) as usize;
    let w0 = (-dw).max(0) as usize;
    let w1 = ((w as isize).min(w as isize - dw)).max(0) as usize;
    if w0 >= w1 {
        return;
    }
    for row in h0..h1 {
        let srow = ((row as isize + dh) as usize) * w;
        let d = &mut dst[row * w + w0..row * w + w1];
        let sr = &src[(srow as isize + w0 as isize + dw) as usize
            ..(srow as isize + w1 as isize + dw) as usize];
        axpy(d, sr, s);
    }
}

/// Σ a[h,w] · b[h+dh, w+dw] over coordinates valid in both planes.
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, dh: isize, dw: isize) -> f64 {
    let h0 = (-dh).max(0) as usize;
    let h1 = ((h as isize).min(h as isize - dh)).max(0) as usize;
    let w0 = (-dw).max(0) as usize;
    let w1 = ((w as isize).min(w as isize - dw)).max(0) as usize;
    if w0 >= w1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for row in h0..h1 {
        let srow = ((row as isize + dh) as usize) * w;
        acc += dot_slices(
            &a[row * w + w0..row * w + w1],
            &b[(srow as isize + w0 as isize + dw) as usize
                ..(srow as isize + w1 as isize + dw) as usize],
        );
    }
    acc
}

fn log_softmax_rows(logits: &[f64], t_len: usize, cols: usize) -> Vec<f64> {
    let mut lp = vec![0.0; t_len * cols];
    for (dst, src) in lp.chunks_mut(cols).zip(logits.chunks(cols)) {
        let lse = super::tensor::logsumexp(src);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    lp
}

fn extend_with_blanks(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * labels.len() + 1);
    z.push(blank);
    for &l in labels {
        z.push(l);
        z.push(blank);
    }
    z
}

/// Forward lattice pass. `alpha[t·S + s]` is the log-probability of emitting
/// the first s+1 extended symbols within frames 0..=t; the total is the
/// log-sum of the two final states.
fn ctc_alpha(lp: &[f64], t_len: usize, cols: usize, z: &[usize], blank: usize) -> (Vec<f64>, f64) {
    let s_len = z.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = lp[z[0]];
    if s_len > 1 {
        alpha[1] = lp[z[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = logaddexp(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && z[s] != blank && z[s] != z[s - 2] {
                a = logaddexp(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * cols + z[s]];
        }
    }
    let mut logp = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len >= 2 {
        logp = logaddexp(logp, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    (alpha, logp)
}

/// Mirror of `ctc_alpha` from the sequence end; `beta[t·S + s]` includes the
/// emission at frame t, so the state posterior divides one emission back out.
fn ctc_beta(lp: &[f64], t_len: usize, cols: usize, z: &[usize], blank: usize) -> Vec<f64> {
    let s_len = z.len();
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = lp[(t_len - 1) * cols + z[s_len - 1]];
    if s_len >= 2 {
        beta[(t_len - 1) * s_len + s_len - 2] = lp[(t_len - 1) * cols + z[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = logaddexp(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && z[s + 2] != blank && z[s + 2] != z[s] {
                b = logaddexp(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = b + lp[t * cols + z[s]];
        }
    }
    beta
}

/// ∂(−log P)/∂logits via lattice posteriors; None when the sequence is
/// unreachable (the +∞ loss is flat).
fn ctc_logit_grad(
    logits: &[f64],
    t_len: usize,
    cols: usize,
    labels: &[usize],
    blank: usize,
) -> Option<Vec<f64>> {
    let lp = log_softmax_rows(logits, t_len, cols);
    let z = extend_with_blanks(labels, blank);
    let s_len = z.len();
    let (alpha, logp) = ctc_alpha(&lp, t_len, cols, &z, blank);
    if logp == f64::NEG_INFINITY {
        return None;
    }
    let beta = ctc_beta(&lp, t_len, cols, &z, blank);
    let mut grad = vec![0.0; t_len * cols];
    let mut post = vec![0.0; cols];
    for t in 0..t_len {
        post.fill(0.0);
        let mut total = 0.0;
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let b = beta[t * s_len + s];
            if b == f64::NEG_INFINITY {
                continue;
            }
            let p = (a + b - lp[t * cols + z[s]] - logp).exp();
            post[z[s]] += p;
            total += p;
        }
        // d lp[k] = -post[k]; chain through log-softmax.
        for k in 0..cols {
            grad[t * cols + k] = lp[t * cols + k].exp() * total - post[k];
        }
    }
    Some(grad)
}
