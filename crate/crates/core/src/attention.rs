//! Content-based attention, applied at two levels: over the frames of one
//! encoded stream, and over the per-stream context vectors (the stream
//! fusion step). Both levels share the functional form
//! `e_t = gᵀ tanh(Lin(q) + LinB(h_t))` with their own parameters.

use crate::layers::{Binder, BoundLinear, LinearLayer};
use crate::numerics::{Tape, Tensor, Var};
use rand::Rng;

pub struct ContentAttention {
    pub g: Tensor,            // [A]
    pub query: LinearLayer,   // [A, Q], no bias
    pub key: LinearLayer,     // [A, C], with bias
}

impl ContentAttention {
    pub fn seeded(attn_dim: usize, query_dim: usize, key_dim: usize, rng: &mut impl Rng) -> Self {
        ContentAttention {
            g: crate::layers::init_uniform(rng, vec![attn_dim]),
            query: LinearLayer::seeded(attn_dim, query_dim, false, rng),
            key: LinearLayer::seeded(attn_dim, key_dim, true, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.g"), &self.g);
        self.query.visit(&format!("{prefix}.q"), f);
        self.key.visit(&format!("{prefix}.k"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.g"), &mut self.g);
        self.query.visit_mut(&format!("{prefix}.q"), f);
        self.key.visit_mut(&format!("{prefix}.k"), f);
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundContentAttention {
        BoundContentAttention {
            g: b.bind(format!("{prefix}.g"), &self.g),
            query: self.query.bind(b, &format!("{prefix}.q")),
            key: self.key.bind(b, &format!("{prefix}.k")),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundContentAttention {
    g: Var,
    query: BoundLinear,
    key: BoundLinear,
}

/// Attention weights over the rows of `h` for query state `q_prev`, plus
/// the weighted context. Returns `(context, weights)`.
pub fn attend(
    t: &mut Tape,
    att: &BoundContentAttention,
    q_prev: Var,
    h: Var, // [T', C]
) -> (Var, Var) {
    let keyed = att.key.apply_rows(t, h); // [T', A]
    let qp = att.query.apply_vec(t, q_prev); // [A]
    let mixed = t.add_vec_to_rows(keyed, qp);
    let act = t.tanh(mixed);
    let scores = t.matvec(act, att.g); // [T']
    let weights = t.softmax_1d(scores);
    let context = t.tmatvec(h, weights); // [C]
    (context, weights)
}

/// Stream-level fusion. `None` is the fixed mode: β is the uniform 1/N
/// distribution rather than a learned function of the decoder state.
pub struct StreamAttention {
    pub att: Option<ContentAttention>,
}

impl StreamAttention {
    pub fn learned(attn_dim: usize, query_dim: usize, context_dim: usize, rng: &mut impl Rng) -> Self {
        StreamAttention {
            att: Some(ContentAttention::seeded(attn_dim, query_dim, context_dim, rng)),
        }
    }

    pub fn fixed() -> Self {
        StreamAttention { att: None }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        if let Some(a) = &self.att {
            a.visit(prefix, f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(a) = &mut self.att {
            a.visit_mut(prefix, f);
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundStreamAttention {
        BoundStreamAttention {
            att: self.att.as_ref().map(|a| a.bind(b, prefix)),
        }
    }
}

pub struct BoundStreamAttention {
    att: Option<BoundContentAttention>,
}

/// Convex combination of per-stream contexts. Returns `(fused, β)` with β
/// a distribution over streams.
pub fn han_fuse(
    t: &mut Tape,
    sa: &BoundStreamAttention,
    q_prev: Var,
    contexts: &[Var],
) -> (Var, Var) {
    assert!(!contexts.is_empty(), "han_fuse: no stream contexts");
    let n = contexts.len();
    let r = t.stack_rows(contexts); // [N, C]
    let beta = match &sa.att {
        Some(att) => {
            let keyed = att.key.apply_rows(t, r);
            let qp = att.query.apply_vec(t, q_prev);
            let mixed = t.add_vec_to_rows(keyed, qp);
            let act = t.tanh(mixed);
            let scores = t.matvec(act, att.g);
            t.softmax_1d(scores)
        }
        None => t.constant(Tensor::vector(vec![1.0 / n as f64; n])),
    };
    let fused = t.tmatvec(r, beta);
    (fused, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(att: &ContentAttention, q: Vec<f64>, h: Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, true);
        let bound = att.bind(&mut b, "a");
        b.finish();
        let qv = tape.constant(Tensor::vector(q));
        let hv = tape.constant(h);
        let (r, a) = attend(&mut tape, &bound, qv, hv);
        (tape.data(r).to_vec(), tape.data(a).to_vec())
    }

    #[test]
    fn zero_g_gives_uniform_weights_and_mean_context() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut att = ContentAttention::seeded(4, 3, 2, &mut rng);
        att.g.data_mut().fill(0.0);
        let h = Tensor::matrix(5, 2, (0..10).map(|i| i as f64).collect());
        let (r, a) = setup(&att, vec![0.3, -0.1, 0.8], h);
        for w in &a {
            assert!((w - 0.2).abs() < 1e-12);
        }
        // Column means of h: (0+2+4+6+8)/5 = 4, (1+3+5+7+9)/5 = 5.
        assert!((r[0] - 4.0).abs() < 1e-12);
        assert!((r[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_frame_is_certain() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let att = ContentAttention::seeded(4, 3, 2, &mut rng);
        let (r, a) = setup(&att, vec![0.5, 0.5, 0.5], Tensor::matrix(1, 2, vec![7.0, -2.0]));
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![7.0, -2.0]);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let att = ContentAttention::seeded(3, 2, 2, &mut rng);
        let q = vec![0.4, -0.6];
        let hdata: Vec<f64> = (0..8).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.3).collect();
        let (r, a) = setup(&att, q.clone(), Tensor::matrix(4, 2, hdata.clone()));

        let wq = att.query.weight.data();
        let wk = att.key.weight.data();
        let bk = att.key.bias.as_ref().unwrap().data();
        let g = att.g.data();
        let mut scores = Vec::new();
        for frame in 0..4 {
            let ht = &hdata[frame * 2..(frame + 1) * 2];
            let mut e = 0.0;
            for unit in 0..3 {
                let lin_q: f64 = wq[unit * 2] * q[0] + wq[unit * 2 + 1] * q[1];
                let lin_h: f64 = wk[unit * 2] * ht[0] + wk[unit * 2 + 1] * ht[1] + bk[unit];
                e += g[unit] * (lin_q + lin_h).tanh();
            }
            scores.push(e);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let want_a: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut want_r = [0.0; 2];
        for frame in 0..4 {
            for d in 0..2 {
                want_r[d] += want_a[frame] * hdata[frame * 2 + d];
            }
        }
        for (got, want) in a.iter().zip(&want_a) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in r.iter().zip(&want_r) {
            assert!((got - want).abs() < 1e-12);
        }
        let asum: f64 = a.iter().sum();
        assert!((asum - 1.0).abs() < 1e-9);
    }

    fn fuse(sa: &StreamAttention, q: Vec<f64>, contexts: Vec<Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, true);
        let bound = sa.bind(&mut b, "h");
        b.finish();
        let qv = tape.constant(Tensor::vector(q));
        let cvars: Vec<Var> = contexts
            .into_iter()
            .map(|c| tape.constant(Tensor::vector(c)))
            .collect();
        let (fused, beta) = han_fuse(&mut tape, &bound, qv, &cvars);
        (tape.data(fused).to_vec(), tape.data(beta).to_vec())
    }

    #[test]
    fn single_stream_fusion_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let sa = StreamAttention::learned(3, 2, 2, &mut rng);
        let (fused, beta) = fuse(&sa, vec![0.1, 0.2], vec![vec![1.5, -0.5]]);
        assert_eq!(beta, vec![1.0]);
        assert_eq!(fused, vec![1.5, -0.5]);
    }

    #[test]
    fn fixed_mode_is_midpoint_of_two_streams() {
        let sa = StreamAttention::fixed();
        let (fused, beta) = fuse(&sa, vec![0.0], vec![vec![2.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(beta, vec![0.5, 0.5]);
        assert!((fused[0] - 1.0).abs() < 1e-12);
        assert!((fused[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_contexts_fuse_to_that_context() {
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let sa = StreamAttention::learned(3, 2, 3, &mut rng);
        let c = vec![0.3, -1.2, 0.7];
        let (fused, beta) = fuse(&sa, vec![0.4, -0.4], vec![c.clone(), c.clone(), c.clone()]);
        let bsum: f64 = beta.iter().sum();
        assert!((bsum - 1.0).abs() < 1e-9);
        for (got, want) in fused.iter().zip(&c) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_context_stays_in_convex_hull() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(36);
        use rand::Rng;
        for _ in 0..20 {
            let mut crng = ChaCha20Rng::seed_from_u64(rng.gen());
            let sa = StreamAttention::learned(3, 2, 4, &mut crng);
            let contexts: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| crng.gen_range(-2.0..2.0)).collect())
                .collect();
            let q: Vec<f64> = (0..2).map(|_| crng.gen_range(-1.0..1.0)).collect();
            let (fused, beta) = fuse(&sa, q, contexts.clone());
            assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(beta.iter().all(|&b| b >= 0.0));
            for d in 0..4 {
                let lo = contexts.iter().map(|c| c[d]).fold(f64::INFINITY, f64::min);
                let hi = contexts.iter().map(|c| c[d]).fold(f64::NEG_INFINITY, f64::max);
                assert!(fused[d] >= lo - 1e-12 && fused[d] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_shift_invariant_in_scores() {
        // a_l is a softmax of the alignment energies, so adding any constant
        // to every energy leaves the weights unchanged.
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::vector(vec![0.1, -0.7, 2.2, 0.4]));
        let shift = tape.constant(Tensor::vector(vec![13.5; 4]));
        let e2 = tape.add(e, shift);
        let a1 = tape.softmax_1d(e);
        let a2 = tape.softmax_1d(e2);
        for (x, y) in tape.data(a1).to_vec().iter().zip(tape.data(a2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
