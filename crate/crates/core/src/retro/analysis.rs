//! Scalar analysis of the L1/L2 retrospective term and the α view of an
//! update.

use serde::{Deserialize, Serialize};

use super::{Norm, RetroError};

/// Slope of the L1 retrospective term in a one-dimensional output space.
///
/// `g_t` is the current output, `g_star` the optimum and `g_tp` the
/// guidance output. Piecewise constant; undefined at `g_t ∈ {g_tp, g_star}`.
pub fn scalar_retro_grad(g_t: f64, g_star: f64, g_tp: f64, kappa: f64) -> Result<f64, RetroError> {
    if g_t == g_tp || g_t == g_star {
        return Err(RetroError::Kink(g_t));
    }
    let inner = 2.0 * kappa + 1.0;
    let slope = if g_tp < g_star {
        if g_t < g_tp {
            -1.0
        } else if g_t < g_star {
            -inner
        } else {
            1.0
        }
    } else if g_tp > g_star {
        if g_t > g_tp {
            1.0
        } else if g_t > g_star {
            inner
        } else {
            -1.0
        }
    } else if g_t > g_star {
        // guidance coincides with the optimum: (κ+1)·s − κ·s
        1.0
    } else {
        -1.0
    };
    Ok(slope)
}

/// Stationary point `g* + κ·(g* − g_tp)` of the squared-L2 retrospective
/// term in output space.
pub fn l2_retro_minimizer(g_star: f64, g_tp: f64, kappa: f64) -> f64 {
    g_star + kappa * (g_star - g_tp)
}

/// Effective learning-rate multiplier `1 + retro_proj / task_norm`.
///
/// `task_norm` is the task-gradient magnitude and `retro_proj` the signed
/// projection of the retro gradient onto the task direction. Returns
/// `None` when the task gradient vanishes.
pub fn alpha_of_step(task_norm: f64, retro_proj: f64) -> Option<f64> {
    if task_norm == 0.0 || !task_norm.is_finite() {
        return None;
    }
    Some(1.0 + retro_proj / task_norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub step: u64,
    pub grad_norm_task: f64,
    /// Signed projection of the retro gradient on the task direction.
    pub grad_norm_retro: f64,
    /// `NaN` when undefined.
    pub alpha: f64,
}

/// Per-step α values of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrace {
    pub records: Vec<AlphaRecord>,
}

impl AlphaTrace {
    pub fn push(&mut self, step: u64, task_norm: f64, retro_proj: f64) -> f64 {
        let alpha = alpha_of_step(task_norm, retro_proj).unwrap_or(f64::NAN);
        self.records.push(AlphaRecord {
            step,
            grad_norm_task: task_norm,
            grad_norm_retro: retro_proj,
            alpha,
        });
        alpha
    }
}

/// Evenly spaced evaluation points `lo, lo + step, …, ≤ hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    /// `[min(a, b) − 2, max(a, b) + 2]`.
    pub fn covering(a: f64, b: f64, step: f64) -> Self {
        Self {
            lo: a.min(b) - 2.0,
            hi: a.max(b) + 2.0,
            step,
        }
    }

    pub fn len(&self) -> usize {
        if !(self.step > 0.0) || !(self.hi >= self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return 0;
        }
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }
}

/// Brute-force argmin of a one-dimensional objective over `grid`.
///
/// With `Norm::L1` the objective is `|g − g*|` plus the L1 retrospective
/// term. With `Norm::L2` it is the retrospective term alone with squared
/// distances, `(κ+1)(g − g*)² − κ(g − g_tp)²`.
pub fn consistency_probe(g_star: f64, g_tp: f64, kappa: f64, norm: Norm, grid: &Grid) -> Result<f64, RetroError> {
    let n = grid.len();
    if n == 0 {
        return Err(RetroError::EmptyGrid);
    }
    let need = Grid::covering(g_star, g_tp, grid.step);
    if grid.lo > need.lo || grid.point(n - 1) < need.hi - grid.step {
        return Err(RetroError::GridTooNarrow {
            lo: grid.lo,
            hi: grid.hi,
            need_lo: need.lo,
            need_hi: need.hi,
        });
    }
    let objective = |g: f64| match norm {
        Norm::L1 => (g - g_star).abs() + (kappa + 1.0) * (g - g_star).abs() - kappa * (g - g_tp).abs(),
        Norm::L2 => (kappa + 1.0) * (g - g_star).powi(2) - kappa * (g - g_tp).powi(2),
    };
    let mut best = (f64::INFINITY, grid.lo);
    for i in 0..n {
        let g = grid.point(i);
        let v = objective(g);
        if v < best.0 {
            best = (v, g);
        }
    }
    Ok(best.1)
}
