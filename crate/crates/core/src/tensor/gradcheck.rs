use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Outcome of comparing `backward()` against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<S> {
    /// Max over coordinates of `|a − n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: S,
    pub max_abs_error: S,
    pub coordinates: usize,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Checks the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` builds a scalar loss on the tape it is handed, from the
/// parameter handles registered for `params` (in order). It is called
/// once for the analytic pass and twice per coordinate.
pub fn grad_check<S, F>(loss_fn: F, params: &[Tensor<S>], eps: S) -> Result<GradCheckReport<S>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if !(eps > S::zero()) {
        return Err(TensorError::Domain {
            op: "grad_check",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let eval = |values: &[Tensor<S>]| -> Result<S> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let root = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(root)?.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let floor = S::of(1e-8);
    let two_eps = eps + eps;
    let mut report = GradCheckReport {
        max_rel_error: S::zero(),
        max_abs_error: S::zero(),
        coordinates: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).ok_or(TensorError::ForeignVar)?.data().to_vec();
        for (ci, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / two_eps;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

/// One randomized graph from [`composite_suite`].
#[derive(Clone, Debug)]
pub struct CompositeCheck {
    pub name: &'static str,
    pub seed: u64,
    /// Distance of the evaluation point from the nearest kink.
    pub kink_margin: f64,
    pub report: GradCheckReport<f64>,
}

const KINK_MARGIN: f64 = 0.01;
const GRAPH_KINDS: usize = 6;

/// Builds `count` randomized composite graphs (matmul, ReLU, softmax,
/// cross-entropy, L1/L2 distances, reuse of one tensor in two branches)
/// and grad-checks each with `eps = 1e-5`.
///
/// Inputs are resampled until every ReLU input, L1 coordinate difference
/// and L2 distance is at least 0.01 away from its kink.
pub fn composite_suite(count: usize, seed: u64) -> Result<Vec<CompositeCheck>> {
    let mut out = Vec::with_capacity(count);
    for g in 0..count {
        let kind = g % GRAPH_KINDS;
        let mut attempt = 0u64;
        loop {
            let graph_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((g as u64) << 16)
                .wrapping_add(attempt);
            let graph = CompositeGraph::sample(kind, graph_seed)?;
            let margin = graph.kink_margin()?;
            attempt += 1;
            if margin < KINK_MARGIN {
                continue;
            }
            let report = grad_check(|tape, vars| graph.build(tape, vars), &graph.params, 1e-5)?;
            out.push(CompositeCheck {
                name: graph.name(),
                seed: graph_seed,
                kink_margin: margin,
                report,
            });
            break;
        }
    }
    Ok(out)
}

struct CompositeGraph {
    kind: usize,
    input: Tensor<f64>,
    labels: Vec<usize>,
    /// Random probability rows or regression targets, depending on kind.
    target: Tensor<f64>,
    guide: Tensor<f64>,
    params: Vec<Tensor<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data)
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|x| x / total));
    }
    Tensor::new(vec![rows, cols], data)
}

impl CompositeGraph {
    fn sample(kind: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.random_range(2..5);
        let n_in = rng.random_range(2..6);
        let hidden = rng.random_range(2..6);
        let classes = rng.random_range(2..5);
        let input = uniform(&mut rng, &[batch, n_in], 1.5)?;
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let target = random_probs(&mut rng, batch, classes)?;
        let guide = random_probs(&mut rng, batch, classes)?;
        let params = match kind {
            // two-layer MLP + cross-entropy
            0 => vec![
                uniform(&mut rng, &[n_in, hidden], 1.0)?,
                uniform(&mut rng, &[hidden], 0.5)?,
                uniform(&mut rng, &[hidden, classes], 1.0)?,
                uniform(&mut rng, &[classes], 0.5)?,
            ],
            // softmax, L1 to a target distribution, plus cross-entropy
            1 => vec![uniform(&mut rng, &[n_in, classes], 1.0)?],
            // ReLU regression with an L2 distance
            2 => vec![
                uniform(&mut rng, &[n_in, hidden], 1.0)?,
                uniform(&mut rng, &[hidden, classes], 1.0)?,
            ],
            // retrospective-style row distances on softmax outputs
            3 => vec![
                uniform(&mut rng, &[n_in, classes], 1.0)?,
                uniform(&mut rng, &[classes], 0.5)?,
            ],
            // one weight used twice
            4 => vec![
                uniform(&mut rng, &[n_in, n_in], 0.8)?,
                uniform(&mut rng, &[n_in, classes], 1.0)?,
            ],
            // log-softmax, elementwise product, mean
            _ => vec![
                uniform(&mut rng, &[n_in, classes], 1.0)?,
                uniform(&mut rng, &[batch, classes], 1.0)?,
            ],
        };
        Ok(Self {
            kind,
            input,
            labels,
            target,
            guide,
            params,
        })
    }

    fn name(&self) -> &'static str {
        match self.kind {
            0 => "mlp_cross_entropy",
            1 => "softmax_l1_cross_entropy",
            2 => "relu_l2_regression",
            3 => "row_l1_l2_retrospective",
            4 => "shared_weight",
            _ => "log_softmax_product",
        }
    }

    fn kink_margin(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        self.build(&mut tape, &vars)?;
        Ok(tape.min_kink_distance().unwrap_or(f64::INFINITY))
    }

    fn build(&self, tape: &mut Tape<f64>, p: &[Var]) -> Result<Var> {
        let x = tape.constant(self.input.clone());
        match self.kind {
            0 => {
                let z = tape.matmul(x, p[0])?;
                let z = tape.add_row(z, p[1])?;
                let h = tape.relu(z)?;
                let o = tape.matmul(h, p[2])?;
                let o = tape.add_row(o, p[3])?;
                let probs = tape.softmax(o)?;
                tape.cross_entropy(probs, &self.labels)
            }
            1 => {
                let z = tape.matmul(x, p[0])?;
                let probs = tape.softmax(z)?;
                let y = tape.constant(self.target.clone());
                let l1 = tape.l1_dist(probs, y)?;
                let ce = tape.cross_entropy(probs, &self.labels)?;
                tape.add(l1, ce)
            }
            2 => {
                let z = tape.matmul(x, p[0])?;
                let h = tape.relu(z)?;
                let o = tape.matmul(h, p[1])?;
                let y = tape.constant(self.target.clone());
                let d = tape.l2_dist(o, y)?;
                tape.scale(d, 0.7)
            }
            3 => {
                let z = tape.matmul(x, p[0])?;
                let z = tape.add_row(z, p[1])?;
                let probs = tape.softmax(z)?;
                let y = tape.constant(self.target.clone());
                let g = tape.constant(self.guide.clone());
                let pull = tape.row_l1_dist(probs, y)?;
                let push = tape.row_l1_dist(probs, g)?;
                let pull = tape.scale(pull, 3.0)?;
                let push = tape.scale(push, 2.0)?;
                let r = tape.sub(pull, push)?;
                let r = tape.mean(r)?;
                let d2 = tape.row_l2_dist(probs, g)?;
                let d2 = tape.mean(d2)?;
                let ce = tape.cross_entropy(probs, &self.labels)?;
                let s = tape.add(r, d2)?;
                tape.add(s, ce)
            }
            4 => {
                let z = tape.matmul(x, p[0])?;
                let h = tape.relu(z)?;
                let z2 = tape.matmul(h, p[0])?;
                let o = tape.matmul(z2, p[1])?;
                let probs = tape.softmax(o)?;
                tape.cross_entropy(probs, &self.labels)
            }
            _ => {
                let z = tape.matmul(x, p[0])?;
                let probs = tape.softmax(z)?;
                let lp = tape.log(probs)?;
                let prod = tape.mul(lp, p[1])?;
                tape.mean(prod)
            }
        }
    }
}
