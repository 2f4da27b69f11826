//! The retrospective loss and everything that feeds it.
//!
//! For a batch of current outputs `g`, one-hot targets `y` and guidance
//! outputs `g_p` produced by a frozen past snapshot,
//!
//! ```text
//! L_retro = mean_i [ (κ+1)·‖g_i − y_i‖ − κ·‖g_i − g_p,i‖ ]
//! ```
//!
//! The loss is unclamped and may be negative. Guidance outputs are
//! constants on the tape; only `g` receives gradient.

mod analysis;
mod guidance;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, Var};

pub use analysis::{
    alpha_of_step, consistency_probe, l2_retro_minimizer, scalar_retro_grad, AlphaRecord, AlphaTrace, Grid,
};
pub use guidance::{guidance_step_index, GuidanceState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetroError {
    #[error("guidance outputs are linked to trainable parameters; detach them first")]
    GuidanceLinked,
    #[error("gradient undefined at kink (g = {0})")]
    Kink(f64),
    #[error("empty grid")]
    EmptyGrid,
    #[error("grid [{lo}, {hi}] does not cover [{need_lo}, {need_hi}]")]
    GridTooNarrow { lo: f64, hi: f64, need_lo: f64, need_hi: f64 },
    #[error("invalid retrospective config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Distance used inside the retrospective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Norm {
    type Err = RetroError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(RetroError::Config(format!("unknown norm `{other}`"))),
        }
    }
}

/// Knobs of the retrospective term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetroConfig {
    pub enabled: bool,
    /// Weight κ ≥ 0.
    pub kappa: f64,
    /// Guidance refresh interval F ≥ 1, in optimizer steps.
    pub update_frequency_steps: u64,
    /// Steps I_w before the term is applied.
    pub warmup_steps: u64,
    pub norm: Norm,
}

impl Default for RetroConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kappa: 2.0,
            update_frequency_steps: 50,
            warmup_steps: 0,
            norm: Norm::L1,
        }
    }
}

impl RetroConfig {
    pub fn validate(&self) -> Result<(), RetroError> {
        if self.update_frequency_steps == 0 {
            return Err(RetroError::Config("update_frequency_steps must be ≥ 1".into()));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(RetroError::Config(format!("kappa must be finite and ≥ 0, got {}", self.kappa)));
        }
        Ok(())
    }

    /// Whether the term contributes to the objective at `step`.
    pub fn active_at(&self, step: u64) -> bool {
        self.enabled && step >= self.warmup_steps
    }
}

/// Per-row distance between two `[batch, d]` nodes.
pub fn row_distance<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var, norm: Norm) -> Result<Var, TensorError> {
    match norm {
        Norm::L1 => tape.row_l1_dist(a, b),
        Norm::L2 => tape.row_l2_dist(a, b),
    }
}

/// Batch mean of `(κ+1)·‖current − target‖ − κ·‖current − guidance‖`.
///
/// `guidance` must be a constant (for example the output of
/// [`crate::nn::forward_frozen`] inserted with [`Tape::constant`]).
pub fn retro_loss<S: Scalar>(
    tape: &mut Tape<S>,
    current: Var,
    target: Var,
    guidance: Var,
    kappa: S,
    norm: Norm,
) -> Result<Var, RetroError> {
    if tape.is_linked(guidance)? {
        return Err(RetroError::GuidanceLinked);
    }
    let pull = row_distance(tape, current, target, norm)?;
    let push = row_distance(tape, current, guidance, norm)?;
    let pull = tape.scale(pull, kappa + S::one())?;
    let push = tape.scale(push, kappa)?;
    let per_sample = tape.sub(pull, push)?;
    Ok(tape.mean(per_sample)?)
}

/// Task loss plus the retrospective term when it is active at `step`.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    task: Var,
    retro: Var,
    cfg: &RetroConfig,
    step: u64,
) -> Result<Var, TensorError> {
    if cfg.active_at(step) {
        tape.add(task, retro)
    } else {
        Ok(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn eval(c: &[f64], t: &[f64], g: &[f64], kappa: f64, norm: Norm) -> f64 {
        let mut tape = Tape::new();
        let c = tape.param(row(c));
        let t = tape.constant(row(t));
        let g = tape.constant(row(g));
        let r = retro_loss(&mut tape, c, t, g, kappa, norm).unwrap();
        tape.value(r).unwrap().item()
    }

    fn l1(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    }

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn worked_example() {
        // 3·(0.5 + 0.5) − 2·(0.3 + 0.3)
        let v = eval(&[0.5, 0.5], &[1.0, 0.0], &[0.2, 0.8], 2.0, Norm::L1);
        assert!((v - 1.8).abs() < 1e-12, "{v}");
    }

    #[test]
    fn exact_fit_and_coincident_guidance() {
        let y = [0.0, 1.0, 0.0];
        let g = [0.3, 0.3, 0.4];
        let v = eval(&y, &y, &g, 2.0, Norm::L1);
        assert!((v + 2.0 * l1(&y, &g)).abs() < 1e-12);

        let c = [0.1, 0.6, 0.3];
        let v = eval(&c, &y, &c, 2.0, Norm::L1);
        assert!((v - 3.0 * l1(&c, &y)).abs() < 1e-12);
        let v = eval(&c, &y, &c, 2.0, Norm::L2);
        assert!((v - 3.0 * l2(&c, &y)).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_of_per_sample_terms() {
        let c = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let (cv, tv, gv) = (tape.param(c), tape.constant(t), tape.constant(g));
        let r = retro_loss(&mut tape, cv, tv, gv, 2.0, Norm::L2).unwrap();
        let s0 = 3.0 * l2(&[0.5, 0.5], &[1.0, 0.0]) - 2.0 * l2(&[0.5, 0.5], &[0.2, 0.8]);
        let s1 = 3.0 * l2(&[0.9, 0.1], &[0.0, 1.0]) - 2.0 * l2(&[0.9, 0.1], &[0.5, 0.5]);
        assert!((tape.value(r).unwrap().item() - (s0 + s1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn linked_guidance_is_a_contract_violation() {
        let mut tape = Tape::new();
        let c = tape.param(row(&[0.5, 0.5]));
        let t = tape.constant(row(&[1.0, 0.0]));
        let g = tape.scale(c, 1.0).unwrap();
        assert_eq!(
            retro_loss(&mut tape, c, t, g, 2.0, Norm::L1),
            Err(RetroError::GuidanceLinked)
        );
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::new();
        let c = tape.param(row(&[0.5, 0.5]));
        let t = tape.constant(row(&[1.0, 0.0, 0.0]));
        let g = tape.constant(row(&[0.5, 0.5]));
        assert!(matches!(
            retro_loss(&mut tape, c, t, g, 2.0, Norm::L1),
            Err(RetroError::Tensor(TensorError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn guidance_gets_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.param(row(&[0.5, 0.5]));
        let t = tape.constant(row(&[1.0, 0.0]));
        let g = tape.constant(row(&[0.2, 0.8]));
        let r = retro_loss(&mut tape, c, t, g, 2.0, Norm::L1).unwrap();
        let grads = tape.backward(r).unwrap();
        assert!(grads.get(g).is_none());
        assert!(grads.get(t).is_none());
        // d/dc: 3·sgn(c − t) − 2·sgn(c − g) = [3·(−1) − 2·(+1), 3·(+1) − 2·(−1)]
        assert_eq!(grads.get(c).unwrap().data(), &[-5.0, 5.0]);
    }

    #[test]
    fn total_loss_composition() {
        let cfg = RetroConfig::default();
        let mut tape = Tape::<f64>::new();
        let task = tape.constant(Tensor::scalar(0.7));
        let retro = tape.constant(Tensor::scalar(-0.2));
        let total = total_loss(&mut tape, task, retro, &cfg, 0).unwrap();
        assert!((tape.value(total).unwrap().item() - 0.5).abs() < 1e-15);

        let zero = tape.constant(Tensor::scalar(0.0));
        let total = total_loss(&mut tape, task, zero, &cfg, 0).unwrap();
        assert_eq!(tape.value(total).unwrap().item(), 0.7);

        let off = RetroConfig { enabled: false, ..cfg.clone() };
        assert_eq!(total_loss(&mut tape, task, retro, &off, 10).unwrap(), task);
        let warm = RetroConfig { warmup_steps: 5, ..cfg };
        assert_eq!(total_loss(&mut tape, task, retro, &warm, 4).unwrap(), task);
        assert_ne!(total_loss(&mut tape, task, retro, &warm, 5).unwrap(), task);
    }

    #[test]
    fn total_gradient_is_sum_of_parts() {
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![1.2, 0.4]]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.5, 0.7, 0.3, -0.6]).unwrap();
        let y = Tensor::<f64>::one_hot(&[2, 0], 3).unwrap();
        let gp = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(w);
        let xv = tape.constant(x);
        let z = tape.matmul(xv, wv).unwrap();
        let p = tape.softmax(z).unwrap();
        let task = tape.cross_entropy(p, &[2, 0]).unwrap();
        let (yv, gv) = (tape.constant(y), tape.constant(gp));
        let retro = retro_loss(&mut tape, p, yv, gv, 2.0, Norm::L1).unwrap();
        let total = total_loss(&mut tape, task, retro, &RetroConfig::default(), 0).unwrap();
        let gt = tape.backward(total).unwrap();
        let ga = tape.backward(task).unwrap();
        let gb = tape.backward(retro).unwrap();
        for ((t, a), b) in gt.get(wv).unwrap().data().iter().zip(ga.get(wv).unwrap().data()).zip(gb.get(wv).unwrap().data()) {
            assert!((t - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RetroConfig::default().validate().is_ok());
        assert!(RetroConfig { update_frequency_steps: 0, ..Default::default() }.validate().is_err());
        assert!(RetroConfig { kappa: -1.0, ..Default::default() }.validate().is_err());
        assert!(RetroConfig { kappa: f64::NAN, ..Default::default() }.validate().is_err());
        assert_eq!("L2".parse::<Norm>().unwrap(), Norm::L2);
        assert!("l3".parse::<Norm>().is_err());
    }

    fn triple(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec(-2.0f64..2.0, d),
            prop::collection::vec(-2.0f64..2.0, d),
        )
    }

    proptest! {
        #[test]
        fn negative_iff_closer_to_target(
            (c, t, g) in (1usize..5).prop_flat_map(triple),
            kappa in 0.0f64..5.0,
            use_l2 in any::<bool>(),
        ) {
            let norm = if use_l2 { Norm::L2 } else { Norm::L1 };
            let dist = if use_l2 { l2 } else { l1 };
            let lhs = (kappa + 1.0) * dist(&c, &t);
            let rhs = kappa * dist(&c, &g);
            prop_assume!((lhs - rhs).abs() > 1e-9);
            let v = eval(&c, &t, &g, kappa, norm);
            prop_assert_eq!(v < 0.0, lhs < rhs);
        }

        #[test]
        fn zero_kappa_is_plain_l1(
            rows in 1usize..4,
            cols in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut mk = || Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (c, t, g) = (mk(), mk(), mk());
            let mut tape = Tape::new();
            let (cv, tv, gv) = (tape.param(c), tape.constant(t), tape.constant(g));
            let r = retro_loss(&mut tape, cv, tv, gv, 0.0, Norm::L1).unwrap();
            let d = tape.row_l1_dist(cv, tv).unwrap();
            let m = tape.mean(d).unwrap();
            prop_assert_eq!(tape.value(r).unwrap().item(), tape.value(m).unwrap().item());
            let whole = tape.l1_dist(cv, tv).unwrap();
            let whole = tape.value(whole).unwrap().item() / rows as f64;
            prop_assert!((tape.value(r).unwrap().item() - whole).abs() < 1e-12);
        }
    }
}
