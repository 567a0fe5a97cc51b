//! Character-level recurrent language model for shallow fusion during
//! search. Scores are cumulative log probabilities over labels plus
//! end-of-sequence, added to the beam's joint score under the γ weight.
//!
//! Training runs on a tape like the recognizer. Scoring is incremental
//! plain arithmetic: one small state per hypothesis, no tape. The two paths
//! are held together by the batch-vs-incremental equivalence test.

use crate::error::{Error, Result};
use crate::layers::{init_uniform, Binder, BoundLinear, BoundLstmCell, LinearLayer, LstmCell, ParamSet};
use crate::model::optim::AdaDelta;
use crate::numerics::{logsumexp, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::ctc::LabelAlphabet;

pub struct CharLm {
    pub alphabet: LabelAlphabet,
    /// Rows follow the shared embedding layout (labels, blank, sos, eos);
    /// the blank row is simply never read.
    embedding: Tensor,
    core: LstmCell,
    out: LinearLayer,
    embed_dim: usize,
    hidden: usize,
}

impl CharLm {
    pub fn seeded(
        alphabet: LabelAlphabet,
        embed_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CharLm {
            embedding: init_uniform(rng, vec![alphabet.embed_rows(), embed_dim]),
            core: LstmCell::seeded(embed_dim, hidden, rng),
            out: LinearLayer::seeded(alphabet.dec_cols(), hidden, true, rng),
            alphabet,
            embed_dim,
            hidden,
        }
    }

    /// All-zero parameters: every step emits the uniform distribution.
    pub fn uniform(alphabet: LabelAlphabet, embed_dim: usize, hidden: usize) -> Self {
        let zero = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, vec![0.0; n]).with_grad()
        };
        CharLm {
            embedding: zero(vec![alphabet.embed_rows(), embed_dim]),
            core: LstmCell {
                w_x: zero(vec![4 * hidden, embed_dim]),
                w_h: zero(vec![4 * hidden, hidden]),
                b: zero(vec![4 * hidden]),
                hidden,
            },
            out: LinearLayer {
                weight: zero(vec![alphabet.dec_cols(), hidden]),
                bias: Some(zero(vec![alphabet.dec_cols()])),
            },
            alphabet,
            embed_dim,
            hidden,
        }
    }

    fn bind(&self, b: &mut Binder) -> BoundCharLm {
        BoundCharLm {
            embedding: b.bind("embed".into(), &self.embedding),
            core: self.core.bind(b, "core"),
            out: self.out.bind(b, "out"),
        }
    }

    fn embedding_row(&self, id: usize) -> &[f64] {
        &self.embedding.data()[id * self.embed_dim..(id + 1) * self.embed_dim]
    }

    /// One plain-arithmetic recurrent step: consume `id`, produce the next
    /// log distribution. Mirrors the tape ops bit for bit in structure.
    fn step_values(&self, id: usize, h: &[f64], c: &[f64]) -> LmState {
        let hid = self.hidden;
        let x = self.embedding_row(id);
        let wx = self.core.w_x.data();
        let wh = self.core.w_h.data();
        let b = self.core.b.data();
        let mut pre = vec![0.0; 4 * hid];
        for (r, p) in pre.iter_mut().enumerate() {
            let mut zx = 0.0;
            for (k, &xv) in x.iter().enumerate() {
                zx += wx[r * self.embed_dim + k] * xv;
            }
            let mut zh = 0.0;
            for (k, &hv) in h.iter().enumerate() {
                zh += wh[r * hid + k] * hv;
            }
            *p = zx + zh + b[r];
        }
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_new = vec![0.0; hid];
        let mut c_new = vec![0.0; hid];
        for j in 0..hid {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[hid + j]);
            let g = pre[2 * hid + j].tanh();
            let o = sigmoid(pre[3 * hid + j]);
            c_new[j] = f * c[j] + i * g;
            h_new[j] = o * c_new[j].tanh();
        }
        let w = self.out.weight.data();
        let bias = self.out.bias.as_ref().expect("output head has a bias").data();
        let mut logits = vec![0.0; self.alphabet.dec_cols()];
        for (r, l) in logits.iter_mut().enumerate() {
            let mut z = bias[r];
            for (k, &hv) in h_new.iter().enumerate() {
                z += w[r * hid + k] * hv;
            }
            *l = z;
        }
        let lse = logsumexp(&logits);
        let log_probs = logits.into_iter().map(|z| z - lse).collect();
        LmState {
            h: h_new,
            c: c_new,
            log_probs,
        }
    }
}

impl ParamSet for CharLm {
    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("embed".into(), &self.embedding);
        self.core.visit("core", f);
        self.out.visit("out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embed".into(), &mut self.embedding);
        self.core.visit_mut("core", f);
        self.out.visit_mut("out", f);
    }
}

/// Scoring state after consuming some prefix: the recurrent state and the
/// ready log distribution over the next symbol.
#[derive(Clone, Debug)]
pub struct LmState {
    h: Vec<f64>,
    c: Vec<f64>,
    /// Log probabilities over labels plus end-of-sequence, indexed by
    /// decoder column.
    pub log_probs: Vec<f64>,
}

/// State after consuming only the start symbol.
pub fn lm_init(lm: &CharLm) -> LmState {
    lm.step_values(
        lm.alphabet.sos_id(),
        &vec![0.0; lm.hidden],
        &vec![0.0; lm.hidden],
    )
}

/// Scores extending the prefix by `c` and advances the state.
/// `c` is a label id or the end-of-sequence id.
pub fn lm_score_extend(lm: &CharLm, state: &LmState, c: usize) -> Result<(LmState, f64)> {
    if c >= lm.alphabet.size() && c != lm.alphabet.eos_id() {
        return Err(Error::Alphabet(format!(
            "symbol id {c} is neither a label nor end-of-sequence"
        )));
    }
    let lp = state.log_probs[lm.alphabet.dec_col(c)];
    let next = lm.step_values(c, &state.h, &state.c);
    Ok((next, lp))
}

/// Whole-sequence log probability (labels then end-of-sequence) in one
/// tape pass. The oracle twin of chaining [`lm_score_extend`].
pub fn lm_score_full(lm: &CharLm, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, true);
    let bound = lm.bind(&mut binder);
    binder.finish();
    let mut state = bound.core.zero_state(&mut tape);
    let mut prev = lm.alphabet.sos_id();
    let mut total = 0.0;
    for l in 0..=labels.len() {
        let y = if l < labels.len() {
            labels[l]
        } else {
            lm.alphabet.eos_id()
        };
        let (s, lp) = bound.step(&mut tape, state, prev);
        total += tape.data(lp)[lm.alphabet.dec_col(y)];
        state = s;
        prev = y;
    }
    total
}

struct BoundCharLm {
    embedding: Var,
    core: BoundLstmCell,
    out: BoundLinear,
}

impl BoundCharLm {
    fn step(&self, t: &mut Tape, state: (Var, Var), prev: usize) -> ((Var, Var), Var) {
        let x = t.row(self.embedding, prev);
        let state = self.core.step(t, x, state);
        let logits = self.out.apply_vec(t, state.0);
        let lp = t.log_softmax_1d(logits);
        (state, lp)
    }

    /// Σ −log p(y_l | y_<l) over the transcript plus end-of-sequence.
    fn sequence_nll(&self, t: &mut Tape, alphabet: &LabelAlphabet, labels: &[usize]) -> Var {
        let mut state = self.core.zero_state(t);
        let mut prev = alphabet.sos_id();
        let mut total: Option<Var> = None;
        for l in 0..=labels.len() {
            let y = if l < labels.len() {
                labels[l]
            } else {
                alphabet.eos_id()
            };
            let (s, lp) = self.step(t, state, prev);
            state = s;
            let mut pick = vec![0.0; alphabet.dec_cols()];
            pick[alphabet.dec_col(y)] = 1.0;
            let pick = t.constant(Tensor::vector(pick));
            let term = t.dot(lp, pick);
            total = Some(match total {
                Some(acc) => t.add(acc, term),
                None => term,
            });
            prev = y;
        }
        let total = total.expect("the end-of-sequence step always exists");
        t.scale(total, -1.0)
    }
}

#[derive(Clone, Debug)]
pub struct LmTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

#[derive(Clone, Debug)]
pub struct LmEpochStats {
    pub epoch: usize,
    /// Mean per-symbol negative log-likelihood over the epoch.
    pub mean_nll: f64,
}

/// Next-character cross-entropy training with the same optimizer the
/// recognizer uses.
pub fn lm_train(
    lm: &mut CharLm,
    opt: &mut AdaDelta,
    transcripts: &[Vec<usize>],
    opts: &LmTrainOptions,
) -> Result<Vec<LmEpochStats>> {
    if transcripts.is_empty() {
        return Err(Error::Config("language model corpus is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut stats = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..transcripts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let mut nll_sum = 0.0;
        let mut symbols = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in chunk {
                let tr = &transcripts[i];
                let mut tape = Tape::new();
                let mut binder = Binder::new(&mut tape, false);
                let bound = lm.bind(&mut binder);
                let pairs = binder.finish();
                let loss = bound.sequence_nll(&mut tape, &lm.alphabet, tr);
                nll_sum += tape.value(loss);
                symbols += tr.len() + 1;
                tape.backward(loss);
                for (name, var) in pairs {
                    if let Some(g) = tape.grad(var) {
                        match acc.get_mut(&name) {
                            Some(dst) => {
                                for (d, s) in dst.iter_mut().zip(g) {
                                    *d += s;
                                }
                            }
                            None => {
                                acc.insert(name, g.to_vec());
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            lm.visit_params_mut(&mut |name, t| {
                if let Some(g) = acc.get(&name) {
                    t.grad = Some(g.iter().map(|&v| v * inv).collect());
                }
            });
            opt.step(lm);
        }
        stats.push(LmEpochStats {
            epoch,
            mean_nll: nll_sum / symbols as f64,
        });
    }
    Ok(stats)
}

/// exp(mean per-symbol negative log-likelihood), end-of-sequence included.
pub fn perplexity(lm: &CharLm, transcripts: &[Vec<usize>]) -> f64 {
    let mut nll = 0.0;
    let mut symbols = 0usize;
    for tr in transcripts {
        let mut state = lm_init(lm);
        for l in 0..=tr.len() {
            let y = if l < tr.len() { tr[l] } else { lm.alphabet.eos_id() };
            let (next, lp) = lm_score_extend(lm, &state, y).expect("ids come from the alphabet");
            nll -= lp;
            state = next;
        }
        symbols += tr.len() + 1;
    }
    (nll / symbols as f64).exp()
}
