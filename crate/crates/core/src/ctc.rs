//! Alignment-lattice (CTC) machinery: the label alphabet, path collapse,
//! marginal sequence likelihood, incremental prefix scoring for the beam
//! search, and per-stream aggregation.

use crate::error::{Error, Result};
use crate::numerics::{logaddexp, Tape, Tensor, Var};

/// Dense id layout over the first `size` lowercase letters:
/// labels `0..size`, then blank, then sos, then eos.
///
/// Lattice heads emit `size + 1` columns (labels + blank at column `size`);
/// the decoder and language model emit `size + 1` columns too, but their
/// extra column is eos. [`LabelAlphabet::dec_col`] maps ids into the latter
/// space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAlphabet {
    size: usize,
}

pub const MAX_ALPHABET: usize = 26;

impl LabelAlphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size > MAX_ALPHABET {
            return Err(Error::Alphabet(format!(
                "alphabet size {} outside 1..={}",
                size, MAX_ALPHABET
            )));
        }
        Ok(LabelAlphabet { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank_id(&self) -> usize {
        self.size
    }

    pub fn sos_id(&self) -> usize {
        self.size + 1
    }

    pub fn eos_id(&self) -> usize {
        self.size + 2
    }

    /// Columns of a lattice-head output: labels plus blank.
    pub fn ctc_cols(&self) -> usize {
        self.size + 1
    }

    /// Columns of a decoder / language-model output: labels plus eos.
    pub fn dec_cols(&self) -> usize {
        self.size + 1
    }

    /// Embedding rows covering every id incl. sos/eos.
    pub fn embed_rows(&self) -> usize {
        self.size + 3
    }

    /// Column of `id` in decoder/LM output space.
    pub fn dec_col(&self, id: usize) -> usize {
        if id < self.size {
            id
        } else if id == self.eos_id() {
            self.size
        } else {
            panic!("id {} has no decoder output column", id)
        }
    }

    /// Inverse of [`LabelAlphabet::dec_col`].
    pub fn dec_col_to_id(&self, col: usize) -> usize {
        assert!(col <= self.size, "decoder column {} out of range", col);
        if col == self.size {
            self.eos_id()
        } else {
            col
        }
    }

    pub fn char_of(&self, id: usize) -> char {
        assert!(id < self.size, "id {} is not a plain label", id);
        (b'a' + id as u8) as char
    }

    pub fn id_of(&self, ch: char) -> Result<usize> {
        let off = (ch as i64) - ('a' as i64);
        if off < 0 || off as usize >= self.size {
            return Err(Error::Alphabet(format!(
                "symbol {:?} outside the first {} letters",
                ch, self.size
            )));
        }
        Ok(off as usize)
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode_string(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.char_of(i)).collect()
    }
}

/// Merges adjacent duplicates, then removes blanks. Errors on ids outside
/// U ∪ {blank}.
pub fn collapse(path: &[usize], alphabet: &LabelAlphabet) -> Result<Vec<usize>> {
    let blank = alphabet.blank_id();
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &s in path {
        if s > blank {
            return Err(Error::Alphabet(format!(
                "path symbol {} outside labels+blank (0..={})",
                s, blank
            )));
        }
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    Ok(out)
}

pub struct CtcOutcome {
    pub loss: Var,
    /// False when the target cannot be aligned in the available frames;
    /// the loss is then +∞ with a zero gradient.
    pub feasible: bool,
}

/// −log p(target | X) over `logits` (`[T', |U|+1]`, unnormalized rows).
pub fn ctc_loss(
    tape: &mut Tape,
    logits: Var,
    target: &[usize],
    alphabet: &LabelAlphabet,
) -> CtcOutcome {
    let cols = tape.shape(logits)[1];
    assert_eq!(
        cols,
        alphabet.ctc_cols(),
        "ctc_loss: logits have {} columns, alphabet wants {}",
        cols,
        alphabet.ctc_cols()
    );
    let loss = tape.ctc_loss(logits, target, alphabet.blank_id());
    let feasible = tape.value(loss).is_finite();
    CtcOutcome { loss, feasible }
}

/// Mean of per-stream lattice losses, as a tape node.
pub fn multi_ctc_loss(tape: &mut Tape, per_stream: &[Var]) -> Var {
    assert!(!per_stream.is_empty(), "multi_ctc_loss: no streams given");
    let mut acc = per_stream[0];
    for &v in &per_stream[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, 1.0 / per_stream.len() as f64)
}

/// Mean of per-stream prefix scores.
pub fn multi_ctc_prefix_score(per_stream: &[f64]) -> f64 {
    assert!(!per_stream.is_empty(), "multi_ctc_prefix_score: no streams given");
    per_stream.iter().sum::<f64>() / per_stream.len() as f64
}

/// Frame-wise label posteriors of one stream, stored in the log domain.
/// Construction enforces the normalization contract.
#[derive(Clone, Debug)]
pub struct CtcPosteriors {
    t_len: usize,
    cols: usize,
    blank: usize,
    lp: Vec<f64>,
}

impl CtcPosteriors {
    pub fn new(probs: &Tensor, alphabet: &LabelAlphabet) -> Result<Self> {
        let shape = probs.shape();
        assert_eq!(shape.len(), 2, "posteriors must be a [T, cols] matrix");
        let (t_len, cols) = (shape[0], shape[1]);
        if cols != alphabet.ctc_cols() {
            return Err(Error::Numeric(format!(
                "posterior rows have {} columns, alphabet wants {}",
                cols,
                alphabet.ctc_cols()
            )));
        }
        for t in 0..t_len {
            let row = probs.row_slice(t);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Numeric(format!(
                    "posterior row {} is not a distribution (sum {})",
                    t, sum
                )));
            }
        }
        let lp = probs.data().iter().map(|&p| p.ln()).collect();
        Ok(CtcPosteriors {
            t_len,
            cols,
            blank: alphabet.blank_id(),
            lp,
        })
    }

    pub fn frames(&self) -> usize {
        self.t_len
    }

    #[inline]
    fn at(&self, t: usize, k: usize) -> f64 {
        self.lp[t * self.cols + k]
    }
}

/// Two-track lattice occupancy for one hypothesis prefix: at each frame,
/// the log-probability that exactly the prefix has been emitted, split by
/// whether the last emitted frame was the final label (`gamma_n`) or a
/// blank/filler (`gamma_b`).
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    gamma_n: Vec<f64>,
    gamma_b: Vec<f64>,
    last: Option<usize>,
}

impl CtcPrefixState {
    /// exp γ_n + exp γ_b at frame t; never exceeds 1 (plus rounding).
    pub fn mass(&self, t: usize) -> f64 {
        self.gamma_n[t].exp() + self.gamma_b[t].exp()
    }

    pub fn frames(&self) -> usize {
        self.gamma_n.len()
    }
}

/// State of the empty prefix: γ_b accumulates all-blank mass, γ_n is empty.
pub fn ctc_prefix_init(post: &CtcPosteriors) -> CtcPrefixState {
    let t_len = post.frames();
    let mut gamma_b = vec![0.0; t_len];
    let mut acc = 0.0;
    for (t, g) in gamma_b.iter_mut().enumerate() {
        acc += post.at(t, post.blank);
        *g = acc;
    }
    CtcPrefixState {
        gamma_n: vec![f64::NEG_INFINITY; t_len],
        gamma_b,
        last: None,
    }
}

/// Extends a prefix by `c` (a label id, or eos for the complete-sequence
/// probability) and returns the new state with the cumulative prefix score
/// α_ctc. Scores go to −∞, never to an error, when frames run out.
pub fn ctc_prefix_extend(
    post: &CtcPosteriors,
    alphabet: &LabelAlphabet,
    state: &CtcPrefixState,
    c: usize,
) -> (CtcPrefixState, f64) {
    let t_len = post.frames();
    if c == alphabet.eos_id() {
        let complete = logaddexp(state.gamma_n[t_len - 1], state.gamma_b[t_len - 1]);
        return (state.clone(), complete);
    }
    assert!(
        c < alphabet.size(),
        "ctc_prefix_extend: {} is neither a label nor eos",
        c
    );
    let mut gamma_n = vec![f64::NEG_INFINITY; t_len];
    let mut gamma_b = vec![f64::NEG_INFINITY; t_len];
    let mut psi = f64::NEG_INFINITY;
    for t in 0..t_len {
        // Mass of paths that finish the parent prefix strictly before t and
        // admit c as a fresh emission (a repeat needs an intervening blank).
        let phi = if t == 0 {
            if state.last.is_none() {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else if state.last == Some(c) {
            state.gamma_b[t - 1]
        } else {
            logaddexp(state.gamma_b[t - 1], state.gamma_n[t - 1])
        };
        let lpc = post.at(t, c);
        let n_prev = if t == 0 { f64::NEG_INFINITY } else { gamma_n[t - 1] };
        gamma_n[t] = logaddexp(n_prev, phi) + lpc;
        if t > 0 {
            gamma_b[t] = logaddexp(gamma_b[t - 1], gamma_n[t - 1]) + post.at(t, post.blank);
        }
        psi = logaddexp(psi, phi + lpc);
    }
    (
        CtcPrefixState {
            gamma_n,
            gamma_b,
            last: Some(c),
        },
        psi,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeMap;

    fn ab() -> LabelAlphabet {
        LabelAlphabet::new(2).unwrap()
    }

    #[test]
    fn alphabet_layout() {
        let a = LabelAlphabet::new(8).unwrap();
        assert_eq!(a.blank_id(), 8);
        assert_eq!(a.sos_id(), 9);
        assert_eq!(a.eos_id(), 10);
        assert_eq!(a.ctc_cols(), 9);
        assert_eq!(a.dec_col(a.eos_id()), 8);
        assert_eq!(a.dec_col_to_id(8), a.eos_id());
        assert_eq!(a.encode("ah").unwrap(), vec![0, 7]);
        assert!(a.encode("z").is_err());
        assert!(LabelAlphabet::new(27).is_err());
        assert!(LabelAlphabet::new(0).is_err());
    }

    #[test]
    fn collapse_definition_cases() {
        let a = ab();
        let blank = a.blank_id();
        assert_eq!(
            collapse(&[0, 0, blank, 0, 1, 1], &a).unwrap(),
            vec![0, 0, 1]
        );
        assert_eq!(collapse(&[blank, blank, blank], &a).unwrap(), Vec::<usize>::new());
        assert!(matches!(collapse(&[0, 9], &a), Err(Error::Alphabet(_))));
    }

    #[test]
    fn collapse_matches_enumeration_over_length_three() {
        let a = LabelAlphabet::new(1).unwrap();
        let blank = a.blank_id();
        let mut seen = BTreeMap::new();
        for p0 in [0, blank] {
            for p1 in [0, blank] {
                for p2 in [0, blank] {
                    let c = collapse(&[p0, p1, p2], &a).unwrap();
                    *seen.entry(c).or_insert(0usize) += 1;
                }
            }
        }
        // Hand enumeration of the 8 paths over {a, -}:
        // [] from ---; [a] from a--, -a-, --a, aa-, -aa, aaa; [a,a] from a-a.
        assert_eq!(seen.get(&vec![]).copied(), Some(1));
        assert_eq!(seen.get(&vec![0]).copied(), Some(6));
        assert_eq!(seen.get(&vec![0, 0]).copied(), Some(1));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn dedup_adjacent(mut v: Vec<usize>) -> Vec<usize> {
            v.dedup();
            v
        }

        proptest! {
            // Collapse is not idempotent on its full image: [a,-,a] collapses
            // to [a,a], which re-collapses to [a]. What does hold: outputs are
            // blank-free, re-collapsing only merges adjacent repeats, and on
            // repeat-free sequences collapse is the identity.
            #[test]
            fn collapse_output_laws(path in proptest::collection::vec(0usize..3, 0..24)) {
                let a = ab();
                let once = collapse(&path, &a).unwrap();
                prop_assert!(once.iter().all(|&s| s != a.blank_id()));
                let twice = collapse(&once, &a).unwrap();
                prop_assert_eq!(&twice, &dedup_adjacent(once.clone()));
                if once.windows(2).all(|w| w[0] != w[1]) {
                    prop_assert_eq!(&twice, &once);
                }
            }
        }
    }

    #[test]
    fn ctc_loss_uniform_frozen_value() {
        let a = LabelAlphabet::new(1).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        let out = ctc_loss(&mut tape, logits, &[0], &a);
        assert!(out.feasible);
        assert!((tape.value(out.loss) - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn ctc_loss_infeasible_flag() {
        let a = ab();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
        let out = ctc_loss(&mut tape, logits, &[0, 1], &a);
        assert!(!out.feasible);
        assert!(tape.value(out.loss).is_infinite());
    }

    #[test]
    fn multi_ctc_mean_and_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(4.0));
        let m = multi_ctc_loss(&mut tape, &[a, b]);
        assert_eq!(tape.value(m), 3.0);
        let one = multi_ctc_loss(&mut tape, &[a]);
        assert_eq!(tape.value(one), 2.0);
        assert_eq!(multi_ctc_prefix_score(&[-1.0, -3.0]), -2.0);
        assert_eq!(multi_ctc_prefix_score(&[-1.5]), -1.5);
    }

    #[test]
    #[should_panic(expected = "no streams")]
    fn multi_ctc_prefix_empty_panics() {
        multi_ctc_prefix_score(&[]);
    }

    fn uniform_posteriors(t_len: usize, alphabet: &LabelAlphabet) -> CtcPosteriors {
        let cols = alphabet.ctc_cols();
        let p = 1.0 / cols as f64;
        let probs = Tensor::matrix(t_len, cols, vec![p; t_len * cols]);
        CtcPosteriors::new(&probs, alphabet).unwrap()
    }

    fn random_posteriors(t_len: usize, alphabet: &LabelAlphabet, rng: &mut ChaCha20Rng) -> CtcPosteriors {
        let cols = alphabet.ctc_cols();
        let mut data = Vec::with_capacity(t_len * cols);
        for _ in 0..t_len {
            let row: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.into_iter().map(|v| v / s));
        }
        CtcPosteriors::new(&Tensor::matrix(t_len, cols, data), alphabet).unwrap()
    }

    #[test]
    fn posterior_normalization_contract() {
        let a = ab();
        let bad = Tensor::matrix(1, 3, vec![0.5, 0.2, 0.2]);
        assert!(matches!(CtcPosteriors::new(&bad, &a), Err(Error::Numeric(_))));
    }

    #[test]
    fn prefix_init_definition() {
        let a = LabelAlphabet::new(1).unwrap();
        let probs = Tensor::matrix(1, 2, vec![0.7, 0.3]);
        let post = CtcPosteriors::new(&probs, &a).unwrap();
        let st = ctc_prefix_init(&post);
        assert!((st.gamma_b[0] - 0.3f64.ln()).abs() < 1e-12);
        assert_eq!(st.gamma_n[0], f64::NEG_INFINITY);
    }

    #[test]
    fn all_blank_certain_gives_certain_empty_sequence() {
        let a = LabelAlphabet::new(1).unwrap();
        let probs = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let post = CtcPosteriors::new(&probs, &a).unwrap();
        let st = ctc_prefix_init(&post);
        let (_, complete) = ctc_prefix_extend(&post, &a, &st, a.eos_id());
        assert!((complete - 0.0).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_blank_track_is_product_of_blanks() {
        let a = ab();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let post = random_posteriors(5, &a, &mut rng);
        let st = ctc_prefix_init(&post);
        let direct: f64 = (0..5).map(|t| post.at(t, a.blank_id())).sum();
        assert!((st.gamma_b[4] - direct).abs() < 1e-12);
    }

    #[test]
    fn extend_uniform_single_label_frozen_value() {
        let a = LabelAlphabet::new(1).unwrap();
        let post = uniform_posteriors(2, &a);
        let st = ctc_prefix_init(&post);
        let (_, score) = ctc_prefix_extend(&post, &a, &st, 0);
        assert!((score - 0.75f64.ln()).abs() < 1e-12);
    }

    /// Brute-force p(C|X) for every collapsed sequence, by path enumeration.
    fn enumerate_sequence_probs(post: &CtcPosteriors, alphabet: &LabelAlphabet) -> BTreeMap<Vec<usize>, f64> {
        let (t_len, cols) = (post.t_len, post.cols);
        let mut probs: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        let n_paths = cols.pow(t_len as u32);
        for code in 0..n_paths {
            let mut path = Vec::with_capacity(t_len);
            let mut c = code;
            for _ in 0..t_len {
                path.push(c % cols);
                c /= cols;
            }
            let lp: f64 = path.iter().enumerate().map(|(t, &s)| post.at(t, s)).sum();
            let collapsed = collapse(&path, alphabet).unwrap();
            let e = probs.entry(collapsed).or_insert(0.0);
            *e += lp.exp();
        }
        probs
    }

    #[test]
    fn prefix_scores_match_exhaustive_enumeration() {
        let a = ab();
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        for trial in 0..10 {
            let t_len = 1 + (trial % 4);
            let post = random_posteriors(t_len, &a, &mut rng);
            let table = enumerate_sequence_probs(&post, &a);

            // Walk every prefix up to length 3 and compare cumulative mass.
            let mut stack = vec![(Vec::<usize>::new(), ctc_prefix_init(&post))];
            while let Some((prefix, state)) = stack.pop() {
                let (_, complete) = ctc_prefix_extend(&post, &a, &state, a.eos_id());
                let want_complete = table.get(&prefix).copied().unwrap_or(0.0);
                assert!(
                    (complete.exp() - want_complete).abs() < 1e-9,
                    "complete({:?}): {} vs {}",
                    prefix,
                    complete.exp(),
                    want_complete
                );
                if prefix.len() >= 3 {
                    continue;
                }
                for c in 0..a.size() {
                    let (next, score) = ctc_prefix_extend(&post, &a, &state, c);
                    let mut h = prefix.clone();
                    h.push(c);
                    let want: f64 = table
                        .iter()
                        .filter(|(k, _)| k.len() >= h.len() && k[..h.len()] == h[..])
                        .map(|(_, v)| v)
                        .sum();
                    assert!(
                        (score.exp() - want).abs() < 1e-9,
                        "prefix({:?}): {} vs {}",
                        h,
                        score.exp(),
                        want
                    );
                    stack.push((h, next));
                }
            }
        }
    }

    #[test]
    fn prefix_consistency_and_mass_invariant() {
        let a = ab();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..10 {
            let t_len = rng.gen_range(2..7);
            let post = random_posteriors(t_len, &a, &mut rng);
            let root = ctc_prefix_init(&post);
            let mut frontier = vec![(root, 0.0f64)];
            for _depth in 0..3 {
                let mut next_frontier = Vec::new();
                for (state, parent_score) in &frontier {
                    let (_, complete) = ctc_prefix_extend(&post, &a, state, a.eos_id());
                    let mut mass = complete.exp();
                    for c in 0..a.size() {
                        let (next, score) = ctc_prefix_extend(&post, &a, state, c);
                        mass += score.exp();
                        for t in 0..next.frames() {
                            assert!(next.mass(t) <= 1.0 + 1e-9);
                        }
                        next_frontier.push((next, score));
                    }
                    assert!(
                        (mass - parent_score.exp()).abs() < 1e-9,
                        "children mass {} vs parent {}",
                        mass,
                        parent_score.exp()
                    );
                }
                frontier = next_frontier;
            }
        }
    }
}
