//! Label-synchronous beam search over the joint objective: attention
//! decoder log-probabilities, per-stream lattice prefix scores, and an
//! optional character-level language model, combined anew at every step.

use crate::ctc::{
    collapse, ctc_prefix_extend, ctc_prefix_init, multi_ctc_prefix_score, CtcPosteriors,
    CtcPrefixState, LabelAlphabet,
};
use crate::layers::Binder;
use crate::lm::{lm_init, lm_score_extend, CharLm, LmState};
use crate::model::MultiStreamModel;
use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Search knobs. `lambda` splits the score between the lattice mean and the
/// attention decoder exactly as in training; `gamma` scales the language
/// model on top.
#[derive(Clone, Debug)]
pub struct BeamConfig {
    pub width: usize,
    /// Lattice weight in [0, 1]; the attention branch gets 1 − lambda.
    pub lambda: f64,
    /// Language model weight; 0 turns the model off entirely.
    pub gamma: f64,
    /// Output length cap as a fraction of the shortest encoded stream.
    pub max_len_ratio: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 20,
            lambda: 0.3,
            gamma: 1.0,
            max_len_ratio: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lattice weight {} outside [0, 1]",
                self.lambda
            )));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("language model weight must be finite".into()));
        }
        if !(self.max_len_ratio > 0.0) || !self.max_len_ratio.is_finite() {
            return Err(Error::Config(format!(
                "length ratio {} must be positive",
                self.max_len_ratio
            )));
        }
        Ok(())
    }
}

/// Combines score parts. Zero-weight branches are skipped, not multiplied,
/// so an unused −∞ part can never poison the total: with `lambda` 0 an
/// infeasible lattice is invisible, with `lambda` 1 the attention score is,
/// and with `gamma` 0 the language model is.
pub fn joint_score(ctc_scores: &[f64], att_score: f64, lm_score: f64, lambda: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    if lambda > 0.0 {
        total += lambda * multi_ctc_prefix_score(ctc_scores);
    }
    if lambda < 1.0 {
        total += (1.0 - lambda) * att_score;
    }
    if gamma != 0.0 {
        total += gamma * lm_score;
    }
    total
}

/// One search hypothesis. `score` is always recomputable from the stored
/// parts via `joint_score`, and `labels` ends with end-of-sequence exactly
/// when `finished` is set.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub score: f64,
    pub att_score: f64,
    /// Cumulative per-stream lattice prefix scores; all zero when the
    /// search ran with `lambda` 0 and never consulted the lattices.
    pub ctc_scores: Vec<f64>,
    pub lm_score: f64,
    pub finished: bool,
    /// Per step, per stream: the frame-attention row behind that step.
    pub frame_attention: Vec<Vec<Vec<f64>>>,
    /// Per step: the stream-weight row behind that step.
    pub stream_attention: Vec<Vec<f64>>,
    state: (Var, Var),
    ctc_states: Vec<CtcPrefixState>,
    lm_state: Option<LmState>,
}

impl Hypothesis {
    /// The label sequence without the closing end-of-sequence marker.
    pub fn emitted(&self) -> &[usize] {
        if self.finished {
            &self.labels[..self.labels.len() - 1]
        } else {
            &self.labels
        }
    }
}

/// Result of decoding one utterance.
pub struct DecodeOutcome {
    /// Finished hypotheses, best first. Ties break toward the
    /// lexicographically smaller label sequence, so the order is total.
    pub nbest: Vec<Hypothesis>,
    /// No hypothesis reached end-of-sequence with a finite score; `nbest`
    /// holds the single best open one instead.
    pub fallback_unfinished: bool,
    /// Largest |sum − 1| over every distribution consulted during the
    /// search: softmax outputs, both attention levels, and language model
    /// steps.
    pub norm_gap: f64,
}

fn track(gap: &mut f64, sum: f64) {
    let d = (sum - 1.0).abs();
    if d > *gap {
        *gap = d;
    }
}

fn exp_sum(log_probs: &[f64]) -> f64 {
    log_probs.iter().map(|&l| l.exp()).sum()
}

/// Score-then-labels order; scores must be finite by construction (−∞
/// candidates are dropped before ranking).
fn rank(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("hypothesis scores are finite")
            .then_with(|| a.labels.cmp(&b.labels))
    });
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.score > b.score || (a.score == b.score && a.labels < b.labels)
}

/// Decodes one utterance. The search is label-synchronous: every live
/// hypothesis advances the decoder one step, proposes every label plus
/// end-of-sequence, and the joint score ranks the pool down to `width`.
/// Extensions whose joint score is −∞ are dropped on the spot. Hypotheses
/// at the length cap may only close; closed ones are banked and compete at
/// the end on their final score, with no length normalization.
pub fn beam_search(
    model: &MultiStreamModel,
    lm: Option<&CharLm>,
    inputs: &[Tensor],
    cfg: &BeamConfig,
) -> Result<DecodeOutcome> {
    cfg.validate()?;
    let lm = lm.filter(|_| cfg.gamma != 0.0);
    if let Some(m) = lm {
        if m.alphabet != model.alphabet {
            return Err(Error::Config(
                "language model and acoustic model use different alphabets".into(),
            ));
        }
    }

    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, true);
    let bound = model.bind(&mut binder);
    binder.finish();
    let enc = bound.encode(&mut tape, inputs)?;
    let a = bound.alphabet.clone();
    let n_streams = enc.len();

    let posts = if cfg.lambda > 0.0 {
        let logits = bound.ctc_logits(&mut tape, &enc);
        let mut posts = Vec::with_capacity(n_streams);
        for &lg in &logits {
            let probs =
                Tensor::new(tape.shape(lg).to_vec(), tape.data(lg).to_vec()).softmax_rows();
            posts.push(CtcPosteriors::new(&probs, &a)?);
        }
        posts
    } else {
        Vec::new()
    };

    let shortest = enc
        .iter()
        .map(|&e| tape.shape(e)[0])
        .min()
        .expect("at least one stream");
    let max_len = (cfg.max_len_ratio * shortest as f64).floor() as usize;

    let root = Hypothesis {
        labels: Vec::new(),
        score: 0.0,
        att_score: 0.0,
        ctc_scores: vec![0.0; n_streams],
        lm_score: 0.0,
        finished: false,
        frame_attention: Vec::new(),
        stream_attention: Vec::new(),
        state: bound.initial_state(&mut tape),
        ctc_states: posts.iter().map(ctc_prefix_init).collect(),
        lm_state: lm.map(lm_init),
    };

    let mut live = vec![root];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut best_open: Option<Hypothesis> = None;
    let mut norm_gap = 0.0_f64;

    while !live.is_empty() {
        let mut pool: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let prev = hyp.labels.last().copied().unwrap_or_else(|| a.sos_id());
            let step = bound.decoder_step(&mut tape, &enc, hyp.state, prev);
            let lp = tape.data(step.log_probs).to_vec();
            track(&mut norm_gap, exp_sum(&lp));
            let frame_rows: Vec<Vec<f64>> = step
                .frame_weights
                .iter()
                .map(|&w| tape.data(w).to_vec())
                .collect();
            for row in &frame_rows {
                track(&mut norm_gap, row.iter().sum());
            }
            let stream_row = tape.data(step.stream_weights).to_vec();
            track(&mut norm_gap, stream_row.iter().sum());
            if let Some(st) = &hyp.lm_state {
                track(&mut norm_gap, exp_sum(&st.log_probs));
            }

            let at_cap = hyp.labels.len() >= max_len;
            for c in (0..a.size()).chain([a.eos_id()]) {
                let closing = c == a.eos_id();
                if at_cap && !closing {
                    continue;
                }
                let att_score = hyp.att_score + lp[a.dec_col(c)];
                let (ctc_states, ctc_scores) = if cfg.lambda > 0.0 {
                    let mut states = Vec::with_capacity(n_streams);
                    let mut scores = Vec::with_capacity(n_streams);
                    for (post, st) in posts.iter().zip(&hyp.ctc_states) {
                        let (ns, sc) = ctc_prefix_extend(post, &a, st, c);
                        states.push(ns);
                        scores.push(sc);
                    }
                    (states, scores)
                } else {
                    (hyp.ctc_states.clone(), hyp.ctc_scores.clone())
                };
                let (lm_state, lm_score) = match (&hyp.lm_state, lm) {
                    (Some(st), Some(m)) => {
                        let (ns, inc) = lm_score_extend(m, st, c)?;
                        (Some(ns), hyp.lm_score + inc)
                    }
                    _ => (None, hyp.lm_score),
                };
                let score = joint_score(&ctc_scores, att_score, lm_score, cfg.lambda, cfg.gamma);
                if score == f64::NEG_INFINITY {
                    continue;
                }
                let mut labels = hyp.labels.clone();
                labels.push(c);
                let mut frame_attention = hyp.frame_attention.clone();
                frame_attention.push(frame_rows.clone());
                let mut stream_attention = hyp.stream_attention.clone();
                stream_attention.push(stream_row.clone());
                let next = Hypothesis {
                    labels,
                    score,
                    att_score,
                    ctc_scores,
                    lm_score,
                    finished: closing,
                    frame_attention,
                    stream_attention,
                    state: step.state,
                    ctc_states,
                    lm_state,
                };
                if closing {
                    done.push(next);
                } else {
                    pool.push(next);
                }
            }
        }
        rank(&mut pool);
        pool.truncate(cfg.width);
        if let Some(h) = pool.first() {
            if best_open.as_ref().map_or(true, |b| better(h, b)) {
                best_open = Some(h.clone());
            }
        }
        live = pool;
    }

    if done.is_empty() {
        let h = best_open
            .ok_or_else(|| Error::Numeric("search produced no scorable hypothesis".into()))?;
        return Ok(DecodeOutcome {
            nbest: vec![h],
            fallback_unfinished: true,
            norm_gap,
        });
    }
    rank(&mut done);
    Ok(DecodeOutcome {
        nbest: done,
        fallback_unfinished: false,
        norm_gap,
    })
}

/// Frame-wise argmax over the posterior grid, then duplicate merging and
/// blank removal. The cheap lattice-only baseline.
pub fn ctc_greedy_decode(probs: &Tensor, alphabet: &LabelAlphabet) -> Result<Vec<usize>> {
    if probs.cols() != alphabet.ctc_cols() {
        return Err(Error::Numeric(format!(
            "posterior rows have {} columns, alphabet wants {}",
            probs.cols(),
            alphabet.ctc_cols()
        )));
    }
    let mut path = Vec::with_capacity(probs.rows());
    for t in 0..probs.rows() {
        let row = probs.row_slice(t);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate().skip(1) {
            if p > row[best] {
                best = k;
            }
        }
        path.push(best);
    }
    collapse(&path, alphabet)
}

/// One n-best report line: utterance id, rank, joint score, combined
/// lattice score, attention score, language model score, decoded string.
/// Tab-separated, scores to six decimals.
pub fn format_nbest_line(
    utt_id: &str,
    rank: usize,
    hyp: &Hypothesis,
    alphabet: &LabelAlphabet,
) -> String {
    format!(
        "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
        utt_id,
        rank,
        hyp.score,
        multi_ctc_prefix_score(&hyp.ctc_scores),
        hyp.att_score,
        hyp.lm_score,
        alphabet.decode_string(hyp.emitted()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::lm_score_full;
    use crate::model::optim::{AdaDelta, DEFAULT_CLIP_NORM, DEFAULT_EPS, DEFAULT_RHO};
    use crate::model::trainer::{train, TrainItem, TrainOptions};
    use crate::model::{EncoderKind, ModelHyper, StreamSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(dim: usize) -> StreamSpec {
        StreamSpec {
            kind: EncoderKind::Recurrent,
            subsample: 1,
            layers: 1,
            input_dim: dim,
        }
    }

    fn tiny_model(v: usize, streams: usize, dim: usize, seed: u64) -> MultiStreamModel {
        let hyper = ModelHyper {
            alphabet_size: v,
            streams: (0..streams).map(|_| spec(dim)).collect(),
            encoder_cells: 3,
            encoder_projection: None,
            attention_dim: 3,
            decoder_cells: 3,
            embed_dim: 2,
            shared_ctc: false,
            fixed_stream_weights: false,
            label_smoothing: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiStreamModel::seeded(hyper, &mut rng).unwrap()
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, d], data)
    }

    /// Attention score of a fixed sequence: run the decoder over it and sum
    /// the log-probabilities it assigns, closing marker included.
    fn replay_attention(model: &MultiStreamModel, inputs: &[Tensor], labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, true);
        let bound = model.bind(&mut binder);
        binder.finish();
        let enc = bound.encode(&mut tape, inputs).unwrap();
        let a = bound.alphabet.clone();
        let mut state = bound.initial_state(&mut tape);
        let mut prev = a.sos_id();
        let mut total = 0.0;
        for &c in labels.iter().chain(std::iter::once(&a.eos_id())) {
            let step = bound.decoder_step(&mut tape, &enc, state, prev);
            total += tape.data(step.log_probs)[a.dec_col(c)];
            state = step.state;
            prev = c;
        }
        total
    }

    fn posterior_grids(model: &MultiStreamModel, inputs: &[Tensor]) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, true);
        let bound = model.bind(&mut binder);
        binder.finish();
        let enc = bound.encode(&mut tape, inputs).unwrap();
        bound
            .ctc_logits(&mut tape, &enc)
            .into_iter()
            .map(|lg| Tensor::new(tape.shape(lg).to_vec(), tape.data(lg).to_vec()).softmax_rows())
            .collect()
    }

    /// Complete-sequence lattice score via a fresh prefix-extension chain.
    fn chained_ctc(post: &CtcPosteriors, a: &LabelAlphabet, labels: &[usize]) -> f64 {
        let mut st = ctc_prefix_init(post);
        for &c in labels {
            let (ns, _) = ctc_prefix_extend(post, a, &st, c);
            st = ns;
        }
        ctc_prefix_extend(post, a, &st, a.eos_id()).1
    }

    /// Scores every label sequence of length 0..=max_len and returns the
    /// best, breaking score ties toward the lexicographically smaller one.
    fn exhaustive_best(
        model: &MultiStreamModel,
        lm: Option<&CharLm>,
        inputs: &[Tensor],
        cfg: &BeamConfig,
        max_len: usize,
    ) -> (Vec<usize>, f64) {
        let a = model.alphabet.clone();
        let v = a.size();
        let posts: Vec<CtcPosteriors> = posterior_grids(model, inputs)
            .iter()
            .map(|g| CtcPosteriors::new(g, &a).unwrap())
            .collect();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for len in 0..=max_len {
            let count = v.pow(len as u32);
            for idx in 0..count {
                let mut seq = Vec::with_capacity(len);
                let mut rest = idx;
                for _ in 0..len {
                    seq.push(rest % v);
                    rest /= v;
                }
                seq.reverse();
                let att = replay_attention(model, inputs, &seq);
                let ctc: Vec<f64> = posts.iter().map(|p| chained_ctc(p, &a, &seq)).collect();
                let lm_sc = lm.map_or(0.0, |m| lm_score_full(m, &seq));
                let score = joint_score(&ctc, att, lm_sc, cfg.lambda, cfg.gamma);
                let take = match &best {
                    None => true,
                    Some((bl, bs)) => score > *bs || (score == *bs && seq < *bl),
                };
                if take {
                    best = Some((seq, score));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_matches_exhaustive_search_on_tiny_instances() {
        for seed in 0..5u64 {
            let model = tiny_model(2, 2, 3, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let lm = CharLm::seeded(model.alphabet.clone(), 3, 4, &mut rng);
            let inputs = vec![random_input(3, 3, 300 + seed); 2];
            let cfg = BeamConfig {
                width: 64,
                ..BeamConfig::default()
            };
            let out = beam_search(&model, Some(&lm), &inputs, &cfg).unwrap();
            assert!(!out.fallback_unfinished);
            let best = &out.nbest[0];
            let (want_labels, want_score) = exhaustive_best(&model, Some(&lm), &inputs, &cfg, 3);
            assert_eq!(best.emitted(), &want_labels[..], "seed {seed}");
            assert!(
                (best.score - want_score).abs() < 1e-9,
                "seed {seed}: beam {} exhaustive {}",
                best.score,
                want_score
            );
        }
    }

    #[test]
    fn score_parts_recompose_and_match_independent_scorers() {
        let model = tiny_model(3, 2, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lm = CharLm::seeded(model.alphabet.clone(), 3, 4, &mut rng);
        let inputs = vec![random_input(4, 3, 13); 2];
        let cfg = BeamConfig {
            width: 8,
            ..BeamConfig::default()
        };
        let out = beam_search(&model, Some(&lm), &inputs, &cfg).unwrap();
        let a = model.alphabet.clone();
        let posts: Vec<CtcPosteriors> = posterior_grids(&model, &inputs)
            .iter()
            .map(|g| CtcPosteriors::new(g, &a).unwrap())
            .collect();
        assert!(out.nbest.len() >= 3);
        for hyp in out.nbest.iter().take(3) {
            let recomposed =
                joint_score(&hyp.ctc_scores, hyp.att_score, hyp.lm_score, cfg.lambda, cfg.gamma);
            assert!((recomposed - hyp.score).abs() < 1e-12);
            let att = replay_attention(&model, &inputs, hyp.emitted());
            assert!((att - hyp.att_score).abs() < 1e-10);
            let lm_sc = lm_score_full(&lm, hyp.emitted());
            assert!((lm_sc - hyp.lm_score).abs() < 1e-10);
            for (post, &got) in posts.iter().zip(&hyp.ctc_scores) {
                let want = chained_ctc(post, &a, hyp.emitted());
                assert!((want - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_consulted_distribution_normalizes() {
        let model = tiny_model(3, 2, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let lm = CharLm::seeded(model.alphabet.clone(), 3, 4, &mut rng);
        let inputs = vec![random_input(5, 3, 23); 2];
        let out = beam_search(&model, Some(&lm), &inputs, &BeamConfig::default()).unwrap();
        assert!(out.norm_gap <= 1e-9, "norm gap {}", out.norm_gap);
    }

    #[test]
    fn attention_records_cover_every_step_of_the_winner() {
        let model = tiny_model(2, 2, 3, 31);
        let inputs = vec![random_input(4, 3, 32); 2];
        let cfg = BeamConfig {
            width: 4,
            gamma: 0.0,
            ..BeamConfig::default()
        };
        let out = beam_search(&model, None, &inputs, &cfg).unwrap();
        let best = &out.nbest[0];
        assert_eq!(best.frame_attention.len(), best.labels.len());
        assert_eq!(best.stream_attention.len(), best.labels.len());
        for step in &best.frame_attention {
            assert_eq!(step.len(), 2);
            for row in step {
                assert_eq!(row.len(), 4);
            }
        }
        for row in &best.stream_attention {
            assert_eq!(row.len(), 2);
        }
    }

    #[test]
    fn width_one_pure_attention_reproduces_greedy_on_a_trained_model() {
        let mut model = tiny_model_for_training(41);
        let a = model.alphabet.clone();
        let items: Vec<TrainItem> = [(0usize, vec![0, 1, 2]), (1, vec![2, 0]), (2, vec![1, 1, 0]), (3, vec![2, 2, 1])]
            .iter()
            .map(|(i, target)| TrainItem {
                utt_id: format!("utt-{i}"),
                inputs: vec![random_input(10, 4, 500 + *i as u64)],
                target: target.clone(),
            })
            .collect();
        let mut opt = AdaDelta::new(DEFAULT_RHO, DEFAULT_EPS, DEFAULT_CLIP_NORM);
        let opts = TrainOptions {
            epochs: 40,
            batch_size: 4,
            lambda: 0.0,
            shuffle_seed: 7,
        };
        train(&mut model, &mut opt, &items, &opts).unwrap();

        for item in &items {
            let cfg = BeamConfig {
                width: 1,
                lambda: 0.0,
                gamma: 0.0,
                max_len_ratio: 1.0,
            };
            let out = beam_search(&model, None, &item.inputs, &cfg).unwrap();

            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, true);
            let bound = model.bind(&mut binder);
            binder.finish();
            let enc = bound.encode(&mut tape, &item.inputs).unwrap();
            let max_len = tape.shape(enc[0])[0];
            let mut state = bound.initial_state(&mut tape);
            let mut prev = a.sos_id();
            let mut labels = Vec::new();
            let mut att = 0.0;
            for depth in 0..=max_len {
                let step = bound.decoder_step(&mut tape, &enc, state, prev);
                let lp = tape.data(step.log_probs);
                if depth == max_len {
                    att += lp[a.dec_col(a.eos_id())];
                    break;
                }
                let mut col = 0;
                for (k, &p) in lp.iter().enumerate().skip(1) {
                    if p > lp[col] {
                        col = k;
                    }
                }
                att += lp[col];
                let id = a.dec_col_to_id(col);
                if id == a.eos_id() {
                    break;
                }
                labels.push(id);
                state = step.state;
                prev = id;
            }

            assert_eq!(out.nbest[0].emitted(), &labels[..], "{}", item.utt_id);
            assert!((out.nbest[0].score - att).abs() < 1e-12);
        }
    }

    fn tiny_model_for_training(seed: u64) -> MultiStreamModel {
        let hyper = ModelHyper {
            alphabet_size: 3,
            streams: vec![StreamSpec {
                kind: EncoderKind::Recurrent,
                subsample: 1,
                layers: 1,
                input_dim: 4,
            }],
            encoder_cells: 12,
            encoder_projection: None,
            attention_dim: 8,
            decoder_cells: 12,
            embed_dim: 4,
            shared_ctc: false,
            fixed_stream_weights: true,
            label_smoothing: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiStreamModel::seeded(hyper, &mut rng).unwrap()
    }

    #[test]
    fn widening_the_beam_never_lowers_the_best_score() {
        let model = tiny_model(2, 2, 3, 51);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let lm = CharLm::seeded(model.alphabet.clone(), 3, 4, &mut rng);
        let inputs = vec![random_input(4, 3, 53); 2];
        let mut last = f64::NEG_INFINITY;
        for width in [1, 2, 4, 8, 32] {
            let cfg = BeamConfig {
                width,
                ..BeamConfig::default()
            };
            let out = beam_search(&model, Some(&lm), &inputs, &cfg).unwrap();
            let best = out.nbest[0].score;
            assert!(
                best >= last - 1e-12,
                "width {width}: {best} after {last}"
            );
            last = best;
        }
    }

    #[test]
    fn nbest_order_is_reproducible() {
        let model = tiny_model(3, 2, 3, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let lm = CharLm::seeded(model.alphabet.clone(), 3, 4, &mut rng);
        let inputs = vec![random_input(5, 3, 63); 2];
        let cfg = BeamConfig {
            width: 6,
            ..BeamConfig::default()
        };
        let one = beam_search(&model, Some(&lm), &inputs, &cfg).unwrap();
        let two = beam_search(&model, Some(&lm), &inputs, &cfg).unwrap();
        assert_eq!(one.nbest.len(), two.nbest.len());
        for (l, r) in one.nbest.iter().zip(&two.nbest) {
            assert_eq!(l.labels, r.labels);
            assert_eq!(l.score.to_bits(), r.score.to_bits());
        }
    }

    #[test]
    fn a_tight_length_cap_still_produces_a_closed_hypothesis() {
        let model = tiny_model(2, 1, 3, 71);
        let inputs = [random_input(3, 3, 72)];
        let cfg = BeamConfig {
            width: 4,
            gamma: 0.0,
            max_len_ratio: 0.1,
            ..BeamConfig::default()
        };
        let out = beam_search(&model, None, &inputs, &cfg).unwrap();
        assert!(!out.fallback_unfinished);
        assert_eq!(out.nbest.len(), 1);
        assert!(out.nbest[0].finished);
        assert!(out.nbest[0].emitted().is_empty());
    }

    #[test]
    fn zero_weight_branches_cannot_poison_the_total() {
        let inf = f64::NEG_INFINITY;
        assert_eq!(joint_score(&[inf], -1.0, -0.5, 0.0, 1.0), -1.5);
        let want = 0.3 * -2.0 + 0.7 * -1.0;
        assert!((joint_score(&[-2.0], -1.0, inf, 0.3, 0.0) - want).abs() < 1e-15);
        assert_eq!(joint_score(&[-2.0], inf, -0.5, 1.0, 1.0), -2.5);
        let mixed = joint_score(&[-2.5, -1.5], -1.0, -0.5, 0.3, 1.0);
        assert!((mixed - (0.3 * -2.0 + 0.7 * -1.0 + -0.5)).abs() < 1e-12);
        assert_eq!(joint_score(&[inf, -1.0], -1.0, 0.0, 0.5, 0.0), inf);
    }

    #[test]
    fn bad_search_knobs_are_rejected() {
        let model = tiny_model(2, 1, 3, 81);
        let inputs = [random_input(3, 3, 82)];
        for cfg in [
            BeamConfig { width: 0, ..BeamConfig::default() },
            BeamConfig { lambda: -0.1, ..BeamConfig::default() },
            BeamConfig { lambda: 1.5, ..BeamConfig::default() },
            BeamConfig { gamma: f64::NAN, ..BeamConfig::default() },
            BeamConfig { max_len_ratio: 0.0, ..BeamConfig::default() },
        ] {
            assert!(matches!(
                beam_search(&model, None, &inputs, &cfg),
                Err(Error::Config(_))
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let other = CharLm::seeded(LabelAlphabet::new(3).unwrap(), 3, 4, &mut rng);
        assert!(matches!(
            beam_search(&model, Some(&other), &inputs, &BeamConfig::default()),
            Err(Error::Config(_))
        ));
    }

    fn grid(rows: &[[f64; 3]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), 3], data)
    }

    #[test]
    fn greedy_lattice_decoding_merges_then_strips() {
        let a = LabelAlphabet::new(2).unwrap();
        let g = grid(&[
            [0.8, 0.1, 0.1],
            [0.7, 0.2, 0.1],
            [0.1, 0.1, 0.8],
            [0.2, 0.7, 0.1],
        ]);
        assert_eq!(ctc_greedy_decode(&g, &a).unwrap(), vec![0, 1]);
        let blanks = grid(&[[0.1, 0.1, 0.8], [0.2, 0.1, 0.7]]);
        assert_eq!(ctc_greedy_decode(&blanks, &a).unwrap(), Vec::<usize>::new());
        let repeat = grid(&[[0.8, 0.1, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1]]);
        assert_eq!(ctc_greedy_decode(&repeat, &a).unwrap(), vec![0, 0]);
        let wide = Tensor::new(vec![1, 4], vec![0.25; 4]);
        assert!(ctc_greedy_decode(&wide, &a).is_err());
    }

    #[test]
    fn nbest_lines_are_tab_separated_with_six_decimals() {
        let a = LabelAlphabet::new(3).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1], vec![0.0]));
        let hyp = Hypothesis {
            labels: vec![0, 2, a.eos_id()],
            score: -1.8,
            att_score: -1.0,
            ctc_scores: vec![-2.0],
            lm_score: -0.5,
            finished: true,
            frame_attention: Vec::new(),
            stream_attention: Vec::new(),
            state: (v, v),
            ctc_states: Vec::new(),
            lm_state: None,
        };
        assert_eq!(
            format_nbest_line("utt-7", 1, &hyp, &a),
            "utt-7\t1\t-1.800000\t-2.000000\t-1.000000\t-0.500000\tac"
        );
    }
}
