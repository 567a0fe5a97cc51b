//! Batched training: per-utterance tapes in parallel, one accumulated
//! AdaDelta step per batch.
//!
//! Determinism: the shuffle is seeded per epoch, workers only compute
//! (loss, gradients) pairs, and accumulation folds them in batch order on
//! one thread. Two runs from one seed update identically.

use super::optim::{AdaDelta, StepOutcome};
use super::MultiStreamModel;
use crate::error::{Error, Result};
use crate::layers::{Binder, ParamSet};
use crate::numerics::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// One training utterance: source feature matrices and the label ids.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub utt_id: String,
    pub inputs: Vec<Tensor>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Lattice weight λ of the joint objective.
    pub lambda: f64,
    pub shuffle_seed: u64,
}

/// Per-epoch training record.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean joint loss over utterances that produced a finite loss.
    pub mean_loss: f64,
    /// Utterances contributing gradient this epoch.
    pub utterances: usize,
    /// Utterances dropped for a non-finite loss.
    pub dropped_utterances: usize,
    /// Batches skipped whole (no finite loss, or non-finite gradients).
    pub skipped_steps: usize,
    /// Stream lattices with no feasible alignment, summed over utterances.
    pub infeasible_ctc: usize,
}

struct UttGrad {
    loss: f64,
    infeasible: usize,
    grads: BTreeMap<String, Vec<f64>>,
}

/// Forward + backward for one utterance on its own tape.
fn utterance_grads(model: &MultiStreamModel, item: &TrainItem, lambda: f64) -> Result<UttGrad> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, false);
    let bound = model.bind(&mut binder);
    let pairs = binder.finish();
    let enc = bound.encode(&mut tape, &item.inputs)?;
    let parts = bound.mtl_loss(&mut tape, &enc, &item.target, lambda)?;
    let loss = tape.value(parts.total);
    let mut grads = BTreeMap::new();
    if loss.is_finite() {
        tape.backward(parts.total);
        for (name, var) in pairs {
            if let Some(g) = tape.grad(var) {
                grads.insert(name, g.to_vec());
            }
        }
    }
    Ok(UttGrad {
        loss,
        infeasible: parts.infeasible_streams,
        grads,
    })
}

/// Runs `opts.epochs` passes over `items`, updating `model` in place.
pub fn train(
    model: &mut MultiStreamModel,
    opt: &mut AdaDelta,
    items: &[TrainItem],
    opts: &TrainOptions,
) -> Result<Vec<EpochStats>> {
    if items.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut stats = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut dropped = 0usize;
        let mut skipped = 0usize;
        let mut infeasible = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let results: Vec<UttGrad> = chunk
                .par_iter()
                .map(|&i| utterance_grads(model, &items[i], opts.lambda))
                .collect::<Result<_>>()?;

            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut finite = 0usize;
            for r in &results {
                infeasible += r.infeasible;
                if !r.loss.is_finite() {
                    dropped += 1;
                    continue;
                }
                finite += 1;
                loss_sum += r.loss;
                for (name, g) in &r.grads {
                    match acc.get_mut(name) {
                        Some(dst) => {
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += s;
                            }
                        }
                        None => {
                            acc.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            if finite == 0 {
                skipped += 1;
                continue;
            }
            used += finite;
            let inv = 1.0 / finite as f64;
            model.visit_params_mut(&mut |name, t| {
                if let Some(g) = acc.get(&name) {
                    t.grad = Some(g.iter().map(|&v| v * inv).collect());
                }
            });
            if opt.step(model) == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: if used > 0 { loss_sum / used as f64 } else { f64::NAN },
            utterances: used,
            dropped_utterances: dropped,
            skipped_steps: skipped,
            infeasible_ctc: infeasible,
        });
    }
    Ok(stats)
}
