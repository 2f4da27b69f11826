use crate::nn::{forward_frozen, MlpModel, NnError, ParamSnapshot, SnapshotOrigin};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::RetroConfig;

/// `F·⌊T/F⌋`, the step whose parameters serve as guidance at step `T`.
pub fn guidance_step_index(step: u64, frequency: u64) -> u64 {
    assert!(frequency >= 1, "update frequency must be ≥ 1");
    frequency * (step / frequency)
}

/// Lifecycle of the guidance snapshot `θ^{T_p}`.
///
/// Starts as an independent random initialization; from the first step
/// `T ≥ I_w` with `T mod F == 0` it holds post-update model parameters.
#[derive(Clone, Debug)]
pub struct GuidanceState<S> {
    snapshot: ParamSnapshot<S>,
    last_refresh_step: Option<u64>,
    rng_seed: u64,
    refresh_log: Vec<u64>,
}

impl<S: Scalar> GuidanceState<S> {
    /// Random-origin guidance drawn from its own RNG stream, so that
    /// creating it never perturbs the model's initialization.
    pub fn new_random(layer_sizes: &[usize], rng_seed: u64) -> Result<Self, NnError> {
        let model = MlpModel::<S>::init(layer_sizes, rng_seed)?;
        Ok(Self {
            snapshot: model.snapshot(0, SnapshotOrigin::RandomInit),
            last_refresh_step: None,
            rng_seed,
            refresh_log: Vec::new(),
        })
    }

    pub fn snapshot(&self) -> &ParamSnapshot<S> {
        &self.snapshot
    }

    pub fn origin(&self) -> SnapshotOrigin {
        self.snapshot.origin()
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// `None` while the random-origin snapshot is in use.
    pub fn last_refresh_step(&self) -> Option<u64> {
        self.last_refresh_step
    }

    /// Every step at which the snapshot was refreshed, in order.
    pub fn refresh_log(&self) -> &[u64] {
        &self.refresh_log
    }

    /// Called once per step, after the optimizer update. Refreshes from
    /// `model` when `step ≥ I_w` and `step mod F == 0`; returns whether it did.
    pub fn advance(&mut self, model: &MlpModel<S>, step: u64, cfg: &RetroConfig) -> bool {
        if step < cfg.warmup_steps || guidance_step_index(step, cfg.update_frequency_steps) != step {
            return false;
        }
        self.snapshot = model.snapshot(step, SnapshotOrigin::Trained);
        self.last_refresh_step = Some(step);
        self.refresh_log.push(step);
        true
    }

    /// Guidance predictions for `batch`; a constant with respect to the model.
    pub fn outputs(&self, layer_sizes: &[usize], batch: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        forward_frozen(&self.snapshot, layer_sizes, batch)
    }
}
