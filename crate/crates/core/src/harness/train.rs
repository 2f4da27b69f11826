use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, RunConfig};
use crate::data::{batches, BatchPlan, Batches, Dataset};
use crate::nn::MlpModel;
use crate::optim::Optimizer;
use crate::retro::{alpha_of_step, retro_loss, GuidanceState, RetroConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_BATCHES: u64 = 1;
pub const STREAM_GUIDANCE: u64 = 2;

/// Seed for one consumer of randomness, derived from the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub epoch: usize,
    pub task_loss: f64,
    pub retro_loss: f64,
    pub total_loss: f64,
    /// `1 + ⟨∇retro, ∇task⟩/‖∇task‖²`; 1 when the term is inactive, NaN
    /// when the task gradient vanishes.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub test_error: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: u64, reason: String },
}

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_digest: String,
    pub seed: u64,
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub refresh_steps: Vec<u64>,
    pub final_test_error: Option<f64>,
    pub final_train_error: Option<f64>,
    pub duration_secs: f64,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Misclassification rate of `model` on `data`, evaluated in chunks.
pub fn error_rate<S: Scalar>(model: &MlpModel<S>, data: &Dataset<S>) -> Result<f64, HarnessError> {
    const CHUNK: usize = 1000;
    let mut wrong = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + CHUNK).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let part = data.select(&idx)?;
        let probs = model.predict(part.inputs())?;
        wrong += part.error_rate(&probs) * part.len() as f64;
        start = end;
    }
    Ok(if data.is_empty() { 0.0 } else { wrong / data.len() as f64 })
}

/// Step-by-step training loop for one arm.
///
/// Each step: forward, cross-entropy, retrospective term against the
/// guidance outputs (always computed, applied only when active),
/// optimizer update, guidance refresh.
pub struct Trainer<'a, S: Scalar> {
    config: RunConfig,
    guidance_cfg: RetroConfig,
    train: &'a Dataset<S>,
    test: &'a Dataset<S>,
    model: MlpModel<S>,
    optimizer: Optimizer<S>,
    guidance: GuidanceState<S>,
    plan: BatchPlan,
    tape: Tape<S>,
    epoch: usize,
    current: Option<Batches<'a, S>>,
    step: u64,
    steps: Vec<StepRow>,
    evals: Vec<EvalRow>,
    status: Option<RunStatus>,
    started: Instant,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(config: &RunConfig, train: &'a Dataset<S>, test: &'a Dataset<S>) -> Result<Self, HarnessError> {
        config.validate()?;
        let sizes = &config.layer_sizes;
        for (name, d) in [("train", train), ("test", test)] {
            if d.width() != sizes[0] {
                return Err(HarnessError::Config(format!(
                    "{name} inputs have width {}, model expects {}",
                    d.width(),
                    sizes[0]
                )));
            }
            if d.class_count() > sizes[sizes.len() - 1] {
                return Err(HarnessError::Config(format!(
                    "{name} set has {} classes, model outputs {}",
                    d.class_count(),
                    sizes[sizes.len() - 1]
                )));
            }
        }
        let model = MlpModel::init(sizes, derive_seed(config.seed, STREAM_INIT))?;
        let guidance = GuidanceState::new_random(sizes, derive_seed(config.seed, STREAM_GUIDANCE))?;
        let plan = BatchPlan::new(
            derive_seed(config.seed, STREAM_BATCHES),
            config.batch_size,
            train.len(),
            config.epochs,
        )?;
        // A disabled arm behaves as if warm-up never ends, guidance included.
        let mut guidance_cfg = config.retro.clone();
        if !guidance_cfg.enabled {
            guidance_cfg.warmup_steps = u64::MAX;
        }
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer.clone())?,
            config: config.clone(),
            guidance_cfg,
            train,
            test,
            model,
            guidance,
            plan,
            tape: Tape::new(),
            epoch: 0,
            current: None,
            step: 0,
            steps: Vec::new(),
            evals: Vec::new(),
            status: None,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &MlpModel<S> {
        &self.model
    }

    pub fn guidance(&self) -> &GuidanceState<S> {
        &self.guidance
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.plan.total_steps()
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_some() || self.step >= self.total_steps()
    }

    /// Runs one optimizer step. Returns `None` once the run is over; a
    /// non-finite loss ends the run with an aborted status.
    pub fn step(&mut self) -> Result<Option<StepRow>, HarnessError> {
        if self.is_finished() {
            return Ok(None);
        }
        let batch = loop {
            if self.current.is_none() {
                self.current = Some(batches(self.train, &self.plan, self.epoch));
            }
            match self.current.as_mut().and_then(Iterator::next) {
                Some(b) => break b,
                None => {
                    self.current = None;
                    self.epoch += 1;
                }
            }
        };
        let t = self.step;
        let sizes = &self.config.layer_sizes;
        let classes = sizes[sizes.len() - 1];
        let retro_cfg = &self.config.retro;

        let guide = self.guidance.outputs(sizes, &batch.inputs)?;
        let target = Tensor::one_hot(&batch.labels, classes)?;

        let tape = &mut self.tape;
        tape.reset();
        let bound = self.model.bind(tape);
        let x = tape.constant(batch.inputs);
        let probs = self.model.forward(tape, &bound, x)?;
        let task = tape.cross_entropy(probs, &batch.labels)?;
        let y = tape.constant(target);
        let g = tape.constant(guide);
        let retro = retro_loss(tape, probs, y, g, S::of(retro_cfg.kappa), retro_cfg.norm)?;

        let task_value = tape.value(task)?.item().to_f64_lossy();
        let retro_value = tape.value(retro)?.item().to_f64_lossy();
        let active = retro_cfg.active_at(t);
        let task_grads = self.model.param_grads(&bound, &tape.backward(task)?)?;
        let (grads, total_value, alpha) = if active {
            let retro_grads = self.model.param_grads(&bound, &tape.backward(retro)?)?;
            let task_norm = task_grads.norm().to_f64_lossy();
            let proj = retro_grads.dot(&task_grads).to_f64_lossy() / task_norm;
            let alpha = alpha_of_step(task_norm, proj).unwrap_or(f64::NAN);
            (task_grads.sum(&retro_grads), task_value + retro_value, alpha)
        } else {
            (task_grads, task_value, 1.0)
        };

        let row = StepRow {
            step: t,
            epoch: self.epoch,
            task_loss: task_value,
            retro_loss: retro_value,
            total_loss: total_value,
            alpha,
        };
        self.steps.push(row.clone());
        if !task_value.is_finite() || !total_value.is_finite() {
            self.status = Some(RunStatus::Aborted {
                step: t,
                reason: format!("non-finite loss: task {task_value}, total {total_value}"),
            });
            return Ok(Some(row));
        }

        self.optimizer.apply(self.model.params_mut(), &grads)?;
        self.guidance.advance(&self.model, t, &self.guidance_cfg);
        self.step += 1;

        let every = self.config.eval_every_steps;
        if every > 0 && self.step.is_multiple_of(every) {
            self.evaluate(t)?;
        }
        Ok(Some(row))
    }

    fn evaluate(&mut self, step: u64) -> Result<f64, HarnessError> {
        let err = error_rate(&self.model, self.test)?;
        self.evals.push(EvalRow {
            step,
            test_error: err,
            test_accuracy: 1.0 - err,
        });
        Ok(err)
    }

    /// Trains to the end and returns the record.
    pub fn run(mut self) -> Result<RunRecord, HarnessError> {
        while self.step()?.is_some() {}
        self.finish()
    }

    /// Final evaluation (if the last step was not already evaluated) and
    /// the record of everything so far.
    pub fn finish(mut self) -> Result<RunRecord, HarnessError> {
        let status = self.status.clone().unwrap_or(RunStatus::Completed);
        let (final_test_error, final_train_error) = if status == RunStatus::Completed && self.step > 0 {
            let last = self.step - 1;
            let test_err = match self.evals.last() {
                Some(e) if e.step == last => e.test_error,
                _ => self.evaluate(last)?,
            };
            (Some(test_err), Some(error_rate(&self.model, self.train)?))
        } else {
            (None, None)
        };
        Ok(RunRecord {
            config_digest: self.config.digest(),
            seed: self.config.seed,
            steps: self.steps,
            evals: self.evals,
            refresh_steps: self.guidance.refresh_log().to_vec(),
            final_test_error,
            final_train_error,
            duration_secs: self.started.elapsed().as_secs_f64(),
            status,
            config: self.config,
        })
    }
}

/// One run on already loaded data.
pub fn train_on<S: Scalar>(config: &RunConfig, train: &Dataset<S>, test: &Dataset<S>) -> Result<RunRecord, HarnessError> {
    Trainer::new(config, train, test)?.run()
}

/// Loads the configured data (relative paths against `base_dir`) and
/// trains once in `f64`.
pub fn train_one(config: &RunConfig, base_dir: &Path) -> Result<RunRecord, HarnessError> {
    let (train, test) = config.dataset.load::<f64>(base_dir)?;
    train_on(config, &train, &test)
}
