//! The multi-stream recognizer: N stream encoders, per-stream frame
//! attention, a second attention level that weights the streams, one shared
//! decoder, and one CTC head per stream (or one shared head).
//!
//! The model owns plain parameter tensors. Every forward pass binds them
//! onto a fresh tape ([`MultiStreamModel::bind`]), so training can run one
//! tape per utterance in parallel while the optimizer addresses parameters
//! by name.

pub mod optim;
pub mod trainer;

pub use optim::{AdaDelta, StepOutcome, DEFAULT_CLIP_NORM, DEFAULT_EPS, DEFAULT_RHO};
pub use trainer::{train, EpochStats, TrainItem, TrainOptions};

use crate::attention::{
    attend, han_fuse, BoundContentAttention, BoundStreamAttention, ContentAttention,
    StreamAttention,
};
use crate::ctc::{ctc_loss, multi_ctc_loss, LabelAlphabet};
use crate::error::{Error, Result};
use crate::layers::{
    init_uniform, Binder, BoundLinear, BoundLstmCell, BoundLstmStack, BoundVgg, LinearLayer,
    LstmCell, LstmStack, ParamSet, VggFrontEnd,
};
use crate::numerics::{Tape, Tensor, Var};
use rand::Rng;

/// How one stream turns frames into encoder states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Bidirectional LSTM stack; decimation between layers gives the
    /// stream's subsampling factor.
    Recurrent,
    /// Convolutional front end (fixed 4x subsampling) under a bidirectional
    /// LSTM stack with no further decimation.
    ConvRecurrent,
}

/// Static description of one stream's encoder and its input.
#[derive(Clone, Debug)]
pub struct StreamSpec {
    pub kind: EncoderKind,
    /// Total temporal subsampling; output length is ⌊T/subsample⌋.
    pub subsample: usize,
    /// LSTM layers in the stack.
    pub layers: usize,
    /// Feature dimension of this stream's input.
    pub input_dim: usize,
}

/// Everything needed to build the model deterministically from one seed.
#[derive(Clone, Debug)]
pub struct ModelHyper {
    pub alphabet_size: usize,
    pub streams: Vec<StreamSpec>,
    pub encoder_cells: usize,
    pub encoder_projection: Option<usize>,
    pub attention_dim: usize,
    pub decoder_cells: usize,
    pub embed_dim: usize,
    /// One CTC head reused by every stream instead of a head per stream.
    pub shared_ctc: bool,
    /// Fixed 1/N stream weights instead of the learned second-level
    /// attention.
    pub fixed_stream_weights: bool,
    /// Weight of the unigram target mix in the per-step cross entropy.
    pub label_smoothing: f64,
}

enum Encoder {
    Recurrent(LstmStack),
    ConvRecurrent { front: VggFrontEnd, lstm: LstmStack },
}

impl Encoder {
    fn out_dim(&self) -> usize {
        match self {
            Encoder::Recurrent(s) => s.out_dim(),
            Encoder::ConvRecurrent { lstm, .. } => lstm.out_dim(),
        }
    }

    fn min_input_len(&self) -> usize {
        match self {
            Encoder::Recurrent(s) => s.min_input_len(),
            Encoder::ConvRecurrent { lstm, .. } => {
                VggFrontEnd::min_input_len() * lstm.min_input_len()
            }
        }
    }

    fn output_len(&self, t: usize) -> usize {
        match self {
            Encoder::Recurrent(s) => s.output_len(t),
            Encoder::ConvRecurrent { lstm, .. } => lstm.output_len(VggFrontEnd::output_len(t)),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            Encoder::Recurrent(s) => s.visit(&format!("{prefix}.lstm"), f),
            Encoder::ConvRecurrent { front, lstm } => {
                front.visit(&format!("{prefix}.vgg"), f);
                lstm.visit(&format!("{prefix}.lstm"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Encoder::Recurrent(s) => s.visit_mut(&format!("{prefix}.lstm"), f),
            Encoder::ConvRecurrent { front, lstm } => {
                front.visit_mut(&format!("{prefix}.vgg"), f);
                lstm.visit_mut(&format!("{prefix}.lstm"), f);
            }
        }
    }

    fn bind(&self, b: &mut Binder, prefix: &str) -> BoundEncoder {
        match self {
            Encoder::Recurrent(s) => BoundEncoder::Recurrent(s.bind(b, &format!("{prefix}.lstm"))),
            Encoder::ConvRecurrent { front, lstm } => BoundEncoder::ConvRecurrent {
                front: front.bind(b, &format!("{prefix}.vgg")),
                lstm: lstm.bind(b, &format!("{prefix}.lstm")),
            },
        }
    }
}

enum BoundEncoder {
    Recurrent(BoundLstmStack),
    ConvRecurrent { front: BoundVgg, lstm: BoundLstmStack },
}

impl BoundEncoder {
    fn forward(&self, t: &mut Tape, x: Var) -> Var {
        match self {
            BoundEncoder::Recurrent(s) => s.forward(t, x),
            BoundEncoder::ConvRecurrent { front, lstm } => {
                let planes = front.forward(t, x);
                lstm.forward(t, planes)
            }
        }
    }
}

pub struct MultiStreamModel {
    pub hyper: ModelHyper,
    pub alphabet: LabelAlphabet,
    encoders: Vec<Encoder>,
    frame_attn: Vec<ContentAttention>,
    stream_attn: StreamAttention,
    embedding: Tensor,
    decoder: LstmCell,
    out_proj: LinearLayer,
    /// One entry when shared, one per stream otherwise.
    ctc_heads: Vec<LinearLayer>,
    /// Smoothing target over decoder columns. Estimated from the training
    /// transcripts, never trained, but saved with the parameters.
    unigram: Tensor,
}

impl MultiStreamModel {
    /// Builds all parameters from `rng` in a fixed order, so one seed gives
    /// one model.
    pub fn seeded(hyper: ModelHyper, rng: &mut impl Rng) -> Result<Self> {
        let alphabet = LabelAlphabet::new(hyper.alphabet_size)?;
        if hyper.streams.is_empty() {
            return Err(Error::Config("model needs at least one stream".into()));
        }
        if !(0.0..=1.0).contains(&hyper.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1], got {}",
                hyper.label_smoothing
            )));
        }
        for (i, s) in hyper.streams.iter().enumerate() {
            if ![1, 2, 4].contains(&s.subsample) {
                return Err(Error::Config(format!(
                    "stream {i}: subsampling factor {} not in {{1, 2, 4}}",
                    s.subsample
                )));
            }
            if s.layers == 0 {
                return Err(Error::Config(format!("stream {i}: needs at least one layer")));
            }
            if s.kind == EncoderKind::ConvRecurrent {
                if s.subsample != 4 {
                    return Err(Error::Config(format!(
                        "stream {i}: the convolutional front end fixes subsampling at 4, got {}",
                        s.subsample
                    )));
                }
                if s.input_dim < 4 {
                    return Err(Error::Config(format!(
                        "stream {i}: the convolutional front end needs input_dim >= 4, got {}",
                        s.input_dim
                    )));
                }
            }
            if s.input_dim == 0 {
                return Err(Error::Config(format!("stream {i}: input_dim must be positive")));
            }
        }

        let mut encoders = Vec::with_capacity(hyper.streams.len());
        for s in &hyper.streams {
            let enc = match s.kind {
                EncoderKind::Recurrent => {
                    let decim = crate::layers::split_decimation(s.subsample, s.layers);
                    Encoder::Recurrent(LstmStack::seeded(
                        s.input_dim,
                        hyper.encoder_cells,
                        s.layers,
                        true,
                        hyper.encoder_projection,
                        &decim,
                        rng,
                    ))
                }
                EncoderKind::ConvRecurrent => Encoder::ConvRecurrent {
                    front: VggFrontEnd::seeded(rng),
                    lstm: LstmStack::seeded(
                        VggFrontEnd::output_dim(s.input_dim),
                        hyper.encoder_cells,
                        s.layers,
                        true,
                        hyper.encoder_projection,
                        &vec![1; s.layers],
                        rng,
                    ),
                },
            };
            encoders.push(enc);
        }

        let ctx_dim = encoders[0].out_dim();
        if encoders.iter().any(|e| e.out_dim() != ctx_dim) {
            return Err(Error::Config(
                "stream fusion needs equal encoder output widths across streams".into(),
            ));
        }

        let frame_attn = encoders
            .iter()
            .map(|e| {
                ContentAttention::seeded(hyper.attention_dim, hyper.decoder_cells, e.out_dim(), rng)
            })
            .collect();
        let stream_attn = if hyper.fixed_stream_weights {
            StreamAttention::fixed()
        } else {
            StreamAttention::learned(hyper.attention_dim, hyper.decoder_cells, ctx_dim, rng)
        };
        let embedding = init_uniform(rng, vec![alphabet.embed_rows(), hyper.embed_dim]);
        let decoder = LstmCell::seeded(hyper.embed_dim + ctx_dim, hyper.decoder_cells, rng);
        let out_proj = LinearLayer::seeded(alphabet.dec_cols(), hyper.decoder_cells, true, rng);
        let head_count = if hyper.shared_ctc { 1 } else { encoders.len() };
        let ctc_heads = (0..head_count)
            .map(|_| LinearLayer::seeded(alphabet.ctc_cols(), ctx_dim, true, rng))
            .collect();
        let unigram = Tensor::vector(vec![1.0 / alphabet.dec_cols() as f64; alphabet.dec_cols()]);

        Ok(MultiStreamModel {
            hyper,
            alphabet,
            encoders,
            frame_attn,
            stream_attn,
            embedding,
            decoder,
            out_proj,
            ctc_heads,
            unigram,
        })
    }

    pub fn num_streams(&self) -> usize {
        self.encoders.len()
    }

    /// Encoder state width, equal across streams.
    pub fn context_dim(&self) -> usize {
        self.encoders[0].out_dim()
    }

    pub fn min_input_len(&self, stream: usize) -> usize {
        self.encoders[stream].min_input_len()
    }

    pub fn output_len(&self, stream: usize, t: usize) -> usize {
        self.encoders[stream].output_len(t)
    }

    /// Replaces the smoothing target. Must be a distribution over the
    /// decoder columns.
    pub fn set_unigram(&mut self, dist: Tensor) {
        assert_eq!(
            dist.shape(),
            &[self.alphabet.dec_cols()],
            "unigram: wrong shape"
        );
        let sum: f64 = dist.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "unigram: rows must sum to 1, got {sum}");
        self.unigram = dist;
    }

    fn head_name(&self, i: usize) -> String {
        if self.hyper.shared_ctc {
            "ctc".to_string()
        } else {
            format!("ctc{i}")
        }
    }

    /// Binds every parameter onto `b`'s tape and returns the runnable
    /// mirror.
    pub fn bind(&self, b: &mut Binder) -> BoundModel {
        let encoders = self
            .encoders
            .iter()
            .enumerate()
            .map(|(i, e)| e.bind(b, &format!("enc{i}")))
            .collect();
        let frame_attn = self
            .frame_attn
            .iter()
            .enumerate()
            .map(|(i, a)| a.bind(b, &format!("fatt{i}")))
            .collect();
        let stream_attn = self.stream_attn.bind(b, "hatt");
        let embedding = b.bind("embed".into(), &self.embedding);
        let decoder = self.decoder.bind(b, "dec");
        let out_proj = self.out_proj.bind(b, "out");
        let bound_heads: Vec<BoundLinear> = self
            .ctc_heads
            .iter()
            .enumerate()
            .map(|(i, h)| h.bind(b, &self.head_name(i)))
            .collect();
        let ctc_heads = (0..self.encoders.len())
            .map(|i| bound_heads[if self.hyper.shared_ctc { 0 } else { i }])
            .collect();
        let unigram = b.bind("unigram".into(), &self.unigram);

        BoundModel {
            alphabet: self.alphabet.clone(),
            specs: self.hyper.streams.clone(),
            min_len: self.encoders.iter().map(|e| e.min_input_len()).collect(),
            label_smoothing: self.hyper.label_smoothing,
            encoders,
            frame_attn,
            stream_attn,
            embedding,
            decoder,
            out_proj,
            ctc_heads,
            unigram,
        }
    }
}

impl ParamSet for MultiStreamModel {
    fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&format!("enc{i}"), f);
        }
        for (i, a) in self.frame_attn.iter().enumerate() {
            a.visit(&format!("fatt{i}"), f);
        }
        self.stream_attn.visit("hatt", f);
        f("embed".into(), &self.embedding);
        self.decoder.visit("dec", f);
        self.out_proj.visit("out", f);
        for (i, h) in self.ctc_heads.iter().enumerate() {
            h.visit(&self.head_name(i), f);
        }
        f("unigram".into(), &self.unigram);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        let heads: Vec<String> = (0..self.ctc_heads.len()).map(|i| self.head_name(i)).collect();
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&format!("enc{i}"), f);
        }
        for (i, a) in self.frame_attn.iter_mut().enumerate() {
            a.visit_mut(&format!("fatt{i}"), f);
        }
        self.stream_attn.visit_mut("hatt", f);
        f("embed".into(), &mut self.embedding);
        self.decoder.visit_mut("dec", f);
        self.out_proj.visit_mut("out", f);
        for (i, h) in self.ctc_heads.iter_mut().enumerate() {
            h.visit_mut(&heads[i], f);
        }
        f("unigram".into(), &mut self.unigram);
    }
}

/// One decoder step's outputs: the new recurrent state, the log label
/// distribution, and the attention rows behind it.
pub struct DecoderStep {
    pub state: (Var, Var),
    /// `[|U|+1]` log probabilities over labels and end-of-sequence.
    pub log_probs: Var,
    /// Per-stream frame-attention weights, each `[T'_i]`.
    pub frame_weights: Vec<Var>,
    /// Stream weights `[N]`.
    pub stream_weights: Var,
}

/// Loss parts of one utterance under the joint objective.
pub struct MtlLoss {
    pub total: Var,
    /// Value of the attention branch, or 0 when λ = 1 skips it.
    pub attention_value: f64,
    /// Value of the mean lattice branch, or 0 when λ = 0 skips it.
    pub ctc_value: f64,
    /// Streams whose lattice had no feasible alignment this utterance.
    pub infeasible_streams: usize,
}

/// Tape-bound model. All methods only append to the tape; the caller owns
/// `backward`.
pub struct BoundModel {
    pub alphabet: LabelAlphabet,
    specs: Vec<StreamSpec>,
    min_len: Vec<usize>,
    label_smoothing: f64,
    encoders: Vec<BoundEncoder>,
    frame_attn: Vec<BoundContentAttention>,
    stream_attn: BoundStreamAttention,
    embedding: Var,
    decoder: BoundLstmCell,
    out_proj: BoundLinear,
    ctc_heads: Vec<BoundLinear>,
    unigram: Var,
}

impl BoundModel {
    pub fn num_streams(&self) -> usize {
        self.encoders.len()
    }

    /// Runs encoder i over `inputs[i]`. Multi-resolution setups pass the
    /// shared features once per stream; the copies may then differ, which
    /// is how decode-time corruption targets a single stream.
    pub fn encode(&self, t: &mut Tape, inputs: &[Tensor]) -> Result<Vec<Var>> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::Config(format!(
                "model has {} streams but {} inputs were given",
                self.encoders.len(),
                inputs.len()
            )));
        }
        let mut out = Vec::with_capacity(self.encoders.len());
        for (i, (enc, spec)) in self.encoders.iter().zip(&self.specs).enumerate() {
            let x = &inputs[i];
            if x.cols() != spec.input_dim {
                return Err(Error::Config(format!(
                    "stream {i}: expected {} feature columns, got {}",
                    spec.input_dim,
                    x.cols()
                )));
            }
            if x.rows() < self.min_len[i] {
                return Err(Error::InputTooShort {
                    stream: i,
                    message: format!(
                        "{} frames, encoder needs at least {}",
                        x.rows(),
                        self.min_len[i]
                    ),
                });
            }
            let xv = t.constant(x.clone());
            out.push(enc.forward(t, xv));
        }
        Ok(out)
    }

    /// Per-stream unnormalized label-posterior rows `[T'_i, |U|+1]`.
    pub fn ctc_logits(&self, t: &mut Tape, enc: &[Var]) -> Vec<Var> {
        enc.iter()
            .zip(&self.ctc_heads)
            .map(|(&e, head)| head.apply_rows(t, e))
            .collect()
    }

    pub fn initial_state(&self, t: &mut Tape) -> (Var, Var) {
        self.decoder.zero_state(t)
    }

    /// Advances the decoder one label: attend within each stream, weight
    /// the streams, feed the fused context and the previous label's
    /// embedding through the recurrent cell, and project to label
    /// log probabilities.
    pub fn decoder_step(
        &self,
        t: &mut Tape,
        enc: &[Var],
        state: (Var, Var),
        prev_id: usize,
    ) -> DecoderStep {
        let q_prev = state.0;
        let mut contexts = Vec::with_capacity(enc.len());
        let mut frame_weights = Vec::with_capacity(enc.len());
        for (&h, att) in enc.iter().zip(&self.frame_attn) {
            let (ctx, w) = attend(t, att, q_prev, h);
            contexts.push(ctx);
            frame_weights.push(w);
        }
        let (fused, stream_weights) = han_fuse(t, &self.stream_attn, q_prev, &contexts);
        let emb = t.row(self.embedding, prev_id);
        let x = t.concat_1d(emb, fused);
        let state = self.decoder.step(t, x, state);
        let logits = self.out_proj.apply_vec(t, state.0);
        let log_probs = t.log_softmax_1d(logits);
        DecoderStep {
            state,
            log_probs,
            frame_weights,
            stream_weights,
        }
    }

    /// Teacher-forced sequence cross entropy: the decoder consumes the
    /// ground-truth previous label at every step and must predict the next
    /// one, with end-of-sequence closing the sequence. Per-step terms mix
    /// in the unigram target by `label_smoothing` and are summed, not
    /// length-normalized.
    pub fn attention_sequence_loss(&self, t: &mut Tape, enc: &[Var], target: &[usize]) -> Var {
        let cols = self.alphabet.dec_cols();
        let w = self.label_smoothing;
        let unigram = t.data(self.unigram).to_vec();
        let mut state = self.initial_state(t);
        let mut prev = self.alphabet.sos_id();
        let mut total: Option<Var> = None;
        for l in 0..=target.len() {
            let step = self.decoder_step(t, enc, state, prev);
            state = step.state;
            let y = if l < target.len() {
                target[l]
            } else {
                self.alphabet.eos_id()
            };
            let mut mix: Vec<f64> = unigram.iter().map(|&u| w * u).collect();
            mix[self.alphabet.dec_col(y)] += 1.0 - w;
            let mix = t.constant(Tensor::vector(mix));
            let ce = t.dot(step.log_probs, mix);
            total = Some(match total {
                Some(acc) => t.add(acc, ce),
                None => ce,
            });
            prev = y;
            debug_assert_eq!(t.shape(step.log_probs), &[cols]);
        }
        let total = total.expect("at least the end-of-sequence step exists");
        t.scale(total, -1.0)
    }

    /// Probability rows (one per step, teacher-forced) without building a
    /// loss. Handy for comparing two models step by step.
    pub fn teacher_forced_step_dists(
        &self,
        t: &mut Tape,
        enc: &[Var],
        target: &[usize],
    ) -> Vec<Vec<f64>> {
        let mut state = self.initial_state(t);
        let mut prev = self.alphabet.sos_id();
        let mut rows = Vec::with_capacity(target.len() + 1);
        for l in 0..=target.len() {
            let step = self.decoder_step(t, enc, state, prev);
            state = step.state;
            rows.push(t.data(step.log_probs).iter().map(|&v| v.exp()).collect());
            if l < target.len() {
                prev = target[l];
            }
        }
        rows
    }

    /// λ-weighted joint objective: λ · mean lattice loss + (1−λ) · sequence
    /// cross entropy. A zero weight skips its branch entirely, so an
    /// infinite lattice loss cannot poison a pure-attention run.
    pub fn mtl_loss(
        &self,
        t: &mut Tape,
        enc: &[Var],
        target: &[usize],
        lambda: f64,
    ) -> Result<MtlLoss> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "lattice weight must lie in [0, 1], got {lambda}"
            )));
        }
        let mut infeasible = 0;
        let ctc = if lambda > 0.0 {
            let logits = self.ctc_logits(t, enc);
            let mut losses = Vec::with_capacity(logits.len());
            for lv in logits {
                let out = ctc_loss(t, lv, target, &self.alphabet);
                if !out.feasible {
                    infeasible += 1;
                }
                losses.push(out.loss);
            }
            Some(multi_ctc_loss(t, &losses))
        } else {
            None
        };
        let att = if lambda < 1.0 {
            Some(self.attention_sequence_loss(t, enc, target))
        } else {
            None
        };
        let total = match (ctc, att) {
            (Some(c), Some(a)) => {
                let cw = t.scale(c, lambda);
                let aw = t.scale(a, 1.0 - lambda);
                t.add(cw, aw)
            }
            (Some(c), None) => c,
            (None, Some(a)) => a,
            (None, None) => unreachable!("lambda is in [0, 1]"),
        };
        Ok(MtlLoss {
            total,
            attention_value: att.map_or(0.0, |a| t.value(a)),
            ctc_value: ctc.map_or(0.0, |c| t.value(c)),
            infeasible_streams: infeasible,
        })
    }
}

/// Label frequencies over the decoder columns (labels plus one
/// end-of-sequence per utterance), the target mix used by label smoothing.
/// Empty input falls back to uniform.
pub fn estimate_unigram(targets: &[Vec<usize>], alphabet: &LabelAlphabet) -> Tensor {
    let cols = alphabet.dec_cols();
    if targets.is_empty() {
        return Tensor::vector(vec![1.0 / cols as f64; cols]);
    }
    let mut counts = vec![0.0f64; cols];
    for tr in targets {
        for &id in tr {
            counts[alphabet.dec_col(id)] += 1.0;
        }
        counts[alphabet.dec_col(alphabet.eos_id())] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Tensor::vector(counts.into_iter().map(|c| c / total).collect())
}
