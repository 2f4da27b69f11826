use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::HarnessError;
use crate::retro::{consistency_probe, l2_retro_minimizer, retro_loss, scalar_retro_grad, Grid, Norm};
use crate::tensor::{Tape, Tensor};

/// Slope of the L1 retrospective term at a scalar output, by autodiff.
pub fn autodiff_scalar_grad(g_t: f64, g_star: f64, g_tp: f64, kappa: f64) -> Result<f64, HarnessError> {
    let mut tape = Tape::<f64>::new();
    let cur = tape.param(Tensor::new([1, 1], vec![g_t])?);
    let y = tape.constant(Tensor::new([1, 1], vec![g_star])?);
    let g = tape.constant(Tensor::new([1, 1], vec![g_tp])?);
    let loss = retro_loss(&mut tape, cur, y, g, kappa, Norm::L1)?;
    let grads = tape.backward(loss)?;
    Ok(grads.get(cur).map_or(0.0, |t| t.item()))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradRow {
    pub kappa: f64,
    pub g_star: f64,
    pub g_tp: f64,
    pub g_t: f64,
    pub analytic: f64,
    pub autodiff: f64,
    pub matches: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeRow {
    pub norm: Norm,
    pub g_star: f64,
    pub g_tp: f64,
    pub kappa: f64,
    pub argmin: f64,
    pub expected: f64,
    pub abs_error: f64,
    pub within_step: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MinimizerRow {
    pub g_star: f64,
    pub g_tp: f64,
    pub kappa: f64,
    pub closed_form: f64,
    pub probe_argmin: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AnalysisReport {
    pub gradient_rows: Vec<GradRow>,
    pub probe_rows: Vec<ProbeRow>,
    pub minimizer_rows: Vec<MinimizerRow>,
}

impl AnalysisReport {
    pub fn gradient_mismatches(&self) -> usize {
        self.gradient_rows.iter().filter(|r| !r.matches).count()
    }

    pub fn probe_failures(&self, norm: Norm) -> usize {
        self.probe_rows.iter().filter(|r| r.norm == norm && !r.within_step).count()
    }
}

pub const GRID_STEP: f64 = 1e-3;
const SCAN_STEP: f64 = 0.01;
const SCAN_PAIRS: [(f64, f64); 2] = [(0.5, 0.2), (0.2, 0.5)];

/// Builds the analysis tables: a scan of the piecewise slope against
/// autodiff, grid argmins of the L1 and L2 objectives, and the L2
/// closed-form stationary point against its grid argmin.
pub fn analyze_report(probe_count: usize, seed: u64) -> Result<AnalysisReport, HarnessError> {
    let mut report = AnalysisReport::default();
    for kappa in [1.0, 2.0, 4.0] {
        for (g_star, g_tp) in SCAN_PAIRS {
            let n = ((1.0 / SCAN_STEP) as i64) * 2;
            for i in 0..=n {
                let g_t = -0.5 + i as f64 * SCAN_STEP;
                if (g_t - g_star).abs() < 1e-9 || (g_t - g_tp).abs() < 1e-9 {
                    continue;
                }
                let analytic = scalar_retro_grad(g_t, g_star, g_tp, kappa)?;
                let autodiff = autodiff_scalar_grad(g_t, g_star, g_tp, kappa)?;
                report.gradient_rows.push(GradRow {
                    kappa,
                    g_star,
                    g_tp,
                    g_t,
                    analytic,
                    autodiff,
                    matches: analytic == autodiff,
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probe_count {
        let g_star: f64 = rng.random_range(-1.0..1.0);
        let g_tp: f64 = rng.random_range(-1.0..1.0);
        let kappa: f64 = rng.random_range(0.5..4.0);
        let target = l2_retro_minimizer(g_star, g_tp, kappa);
        let grid = Grid::covering(g_star.min(g_tp).min(target), g_star.max(g_tp).max(target), GRID_STEP);
        for (norm, expected) in [(Norm::L1, g_star), (Norm::L2, target)] {
            let argmin = consistency_probe(g_star, g_tp, kappa, norm, &grid)?;
            let abs_error = (argmin - expected).abs();
            report.probe_rows.push(ProbeRow {
                norm,
                g_star,
                g_tp,
                kappa,
                argmin,
                expected,
                abs_error,
                within_step: abs_error <= GRID_STEP,
            });
            if norm == Norm::L2 {
                report.minimizer_rows.push(MinimizerRow {
                    g_star,
                    g_tp,
                    kappa,
                    closed_form: target,
                    probe_argmin: argmin,
                    abs_error,
                });
            }
        }
    }
    Ok(report)
}

/// Writes `piecewise_grad.csv`, `consistency.csv` and `l2_minimizer.csv`.
pub fn analyze(out_dir: &Path) -> Result<AnalysisReport, HarnessError> {
    let report = analyze_report(100, 0)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let write = |name: &str, f: &dyn Fn(&mut csv::Writer<std::fs::File>) -> csv::Result<()>| {
        let path = out_dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Csv(path.clone(), e.to_string()))?;
        f(&mut w).map_err(|e| HarnessError::Csv(path.clone(), e.to_string()))?;
        w.flush().map_err(|e| HarnessError::io(&path, e))
    };
    write("piecewise_grad.csv", &|w| report.gradient_rows.iter().try_for_each(|r| w.serialize(r)))?;
    write("consistency.csv", &|w| report.probe_rows.iter().try_for_each(|r| w.serialize(r)))?;
    write("l2_minimizer.csv", &|w| report.minimizer_rows.iter().try_for_each(|r| w.serialize(r)))?;
    Ok(report)
}
