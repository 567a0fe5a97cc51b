//! AdaDelta with global-norm gradient clipping.
//!
//! State is keyed by parameter name, not position, so it survives any
//! reordering of the visit sequence and serializes cleanly.

use crate::layers::ParamSet;
use std::collections::BTreeMap;

pub const DEFAULT_RHO: f64 = 0.95;
/// AdaDelta's step floor scales with sqrt(eps / (1−rho)). At desk scale the
/// usual 1e-8 moves parameters by only ~5e-4 per step, far too slow for the
/// few hundred updates a toy run affords, so the default sits at 1e-4.
pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

struct AdaState {
    eg2: Vec<f64>,
    edx2: Vec<f64>,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Parameters moved; the global gradient norm before clipping.
    Applied { grad_norm: f64 },
    /// A non-finite gradient appeared; nothing moved, gradients cleared.
    SkippedNonFinite,
    /// No parameter carried a gradient.
    NoGradients,
}

pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    /// Gradients are scaled down to this global L2 norm when they exceed it.
    pub clip_norm: f64,
    state: BTreeMap<String, AdaState>,
}

impl AdaDelta {
    pub fn new(rho: f64, eps: f64, clip_norm: f64) -> Self {
        assert!((0.0..1.0).contains(&rho), "rho must lie in [0, 1)");
        assert!(eps > 0.0, "eps must be positive");
        assert!(clip_norm > 0.0, "clip_norm must be positive");
        AdaDelta {
            rho,
            eps,
            clip_norm,
            state: BTreeMap::new(),
        }
    }

    /// Applies one accumulated-gradient step and clears the gradients.
    /// Steps with any non-finite gradient are dropped whole; a partial
    /// update would desynchronize the running averages.
    pub fn step(&mut self, params: &mut dyn ParamSet) -> StepOutcome {
        let mut sq_sum = 0.0f64;
        let mut have_grads = false;
        let mut finite = true;
        params.visit_params(&mut |_, t| {
            if let Some(g) = &t.grad {
                have_grads = true;
                for &v in g {
                    if !v.is_finite() {
                        finite = false;
                    }
                    sq_sum += v * v;
                }
            }
        });
        if !have_grads {
            return StepOutcome::NoGradients;
        }
        if !finite {
            params.visit_params_mut(&mut |_, t| t.grad = None);
            return StepOutcome::SkippedNonFinite;
        }
        let grad_norm = sq_sum.sqrt();
        let scale = if grad_norm > self.clip_norm {
            self.clip_norm / grad_norm
        } else {
            1.0
        };

        let (rho, eps) = (self.rho, self.eps);
        let state = &mut self.state;
        params.visit_params_mut(&mut |name, t| {
            let Some(g) = t.grad.take() else { return };
            let n = g.len();
            let s = state.entry(name).or_insert_with(|| AdaState {
                eg2: vec![0.0; n],
                edx2: vec![0.0; n],
            });
            let data = t.data_mut();
            for i in 0..n {
                let gi = g[i] * scale;
                s.eg2[i] = rho * s.eg2[i] + (1.0 - rho) * gi * gi;
                let dx = -((s.edx2[i] + eps).sqrt() / (s.eg2[i] + eps).sqrt()) * gi;
                s.edx2[i] = rho * s.edx2[i] + (1.0 - rho) * dx * dx;
                data[i] += dx;
                debug_assert!(data[i].is_finite(), "parameter {i} left finite range");
            }
        });
        StepOutcome::Applied { grad_norm }
    }

    /// Accumulator contents as (name, eg2, edx2) rows, ordered by name.
    pub fn state_entries(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.state
            .iter()
            .map(|(k, s)| (k.clone(), s.eg2.clone(), s.edx2.clone()))
            .collect()
    }

    /// Replaces the accumulators, e.g. when resuming from a checkpoint.
    /// Rows with mismatched eg2/edx2 lengths are rejected.
    pub fn restore_state(&mut self, entries: Vec<(String, Vec<f64>, Vec<f64>)>) -> Result<(), String> {
        let mut state = BTreeMap::new();
        for (name, eg2, edx2) in entries {
            if eg2.len() != edx2.len() {
                return Err(format!(
                    "optimizer state for {name} has {} eg2 values but {} edx2 values",
                    eg2.len(),
                    edx2.len()
                ));
            }
            state.insert(name, AdaState { eg2, edx2 });
        }
        self.state = state;
        Ok(())
    }
}
