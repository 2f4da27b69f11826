//! Multi-layer perceptron, parameter registry and frozen snapshots.

mod snapshot;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{kernels, GradMap, Tape, Tensor, TensorError, Var};

pub use snapshot::{forward_frozen, ParamSnapshot, SnapshotOrigin, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("need at least two layer sizes, all ≥ 1, got {0:?}")]
    InvalidLayers(Vec<usize>),
    #[error("input width {got} does not match model input size {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("snapshot does not match layer sizes: {0}")]
    SnapshotMismatch(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<S> {
    grads: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<S>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Elementwise sum; names missing on either side are taken as zero.
    pub fn sum(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (name, g) in &other.grads {
            match out.grads.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.grads.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    /// Inner product over all shared coordinates.
    pub fn dot(&self, other: &Self) -> S {
        self.grads
            .iter()
            .filter_map(|(name, a)| other.grads.get(name).map(|b| (a, b)))
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum::<S>())
            .sum()
    }

    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }
}

/// Fully connected network: ReLU on hidden layers, softmax output.
///
/// Parameters are named `w1, b1, w2, b2, …` with `wK: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel<S> {
    layer_sizes: Vec<usize>,
    params: Vec<Param<S>>,
}

/// Parameter handles for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn check_layers(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(NnError::InvalidLayers(layer_sizes.to_vec()));
    }
    Ok(())
}

/// Expected `(name, shape)` of every parameter for `layer_sizes`.
pub fn param_layout(layer_sizes: &[usize]) -> Vec<(String, Vec<usize>)> {
    layer_sizes
        .windows(2)
        .enumerate()
        .flat_map(|(i, w)| {
            [
                (format!("w{}", i + 1), vec![w[0], w[1]]),
                (format!("b{}", i + 1), vec![w[1]]),
            ]
        })
        .collect()
}

impl<S: Scalar> MlpModel<S> {
    /// Glorot-uniform weights `U(−a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases. Fully determined by `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        Self::init_with_rng(layer_sizes, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with_rng(layer_sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        check_layers(layer_sizes)?;
        let mut params = Vec::new();
        for (name, shape) in param_layout(layer_sizes) {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| S::of(rng.random_range(-a..a))).collect()
            } else {
                vec![S::zero(); n]
            };
            params.push(Param {
                name,
                tensor: Tensor::from_parts(shape, data, true)?,
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        check_layers(layer_sizes)?;
        let params = param_layout(layer_sizes)
            .into_iter()
            .map(|(name, shape)| {
                Ok(Param {
                    name,
                    tensor: Tensor::zeros(shape)?.with_requires_grad(true),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated layers")
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Concatenation of every parameter value in registry order.
    pub fn flat_values(&self) -> Vec<S> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.param(p.tensor.clone())).collect(),
        }
    }

    /// Recorded forward pass producing softmax probabilities `[batch, d]`.
    pub fn forward(&self, tape: &mut Tape<S>, bound: &BoundParams, input: Var) -> Result<Var> {
        let width = tape.value(input)?.cols();
        if width != self.input_size() {
            return Err(NnError::WidthMismatch {
                expected: self.input_size(),
                got: width,
            });
        }
        let layers = self.layer_sizes.len() - 1;
        let mut h = input;
        for l in 0..layers {
            let z = tape.matmul(h, bound.vars[2 * l])?;
            let z = tape.add_row(z, bound.vars[2 * l + 1])?;
            h = if l + 1 < layers { tape.relu(z)? } else { tape.softmax(z)? };
        }
        Ok(h)
    }

    /// Unrecorded forward pass; bit-identical to [`MlpModel::forward`].
    pub fn predict(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let tensors: Vec<&Tensor<S>> = self.params.iter().map(|p| &p.tensor).collect();
        eager_forward(&self.layer_sizes, &tensors, batch)
    }

    /// Collects the gradient of every parameter from `grads`.
    pub fn param_grads(&self, bound: &BoundParams, grads: &GradMap<S>) -> Result<ParamGrads<S>> {
        let mut out = ParamGrads::new();
        for (p, var) in self.params.iter().zip(&bound.vars) {
            let g = grads.get(*var).ok_or_else(|| NnError::MissingGrad(p.name.clone()))?;
            out.insert(p.name.clone(), g.clone());
        }
        Ok(out)
    }

    /// Deep copy of the current parameter values.
    pub fn snapshot(&self, step: u64, origin: SnapshotOrigin) -> ParamSnapshot<S> {
        ParamSnapshot::from_params(&self.params, step, origin)
    }

    /// Rebuilds a model whose parameters equal `snapshot`.
    pub fn from_snapshot(snapshot: &ParamSnapshot<S>, layer_sizes: &[usize]) -> Result<Self> {
        snapshot.check_layout(layer_sizes)?;
        let params = snapshot
            .entries()
            .iter()
            .map(|(name, t)| Param {
                name: name.clone(),
                tensor: t.clone().with_requires_grad(true),
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }
}

/// Forward pass over plain tensors, no tape.
pub(crate) fn eager_forward<S: Scalar>(
    layer_sizes: &[usize],
    params: &[&Tensor<S>],
    batch: &Tensor<S>,
) -> Result<Tensor<S>> {
    let width = batch.cols();
    if width != layer_sizes[0] {
        return Err(NnError::WidthMismatch {
            expected: layer_sizes[0],
            got: width,
        });
    }
    let rows = batch.rows();
    let layers = layer_sizes.len() - 1;
    let mut h = batch.data().to_vec();
    for l in 0..layers {
        let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
        let mut z = kernels::matmul(&h, params[2 * l].data(), rows, fan_in, fan_out);
        kernels::add_row_inplace(&mut z, params[2 * l + 1].data());
        h = if l + 1 < layers {
            kernels::relu_inplace(&mut z);
            z
        } else {
            kernels::softmax_rows(&z, fan_out)
        };
    }
    Ok(Tensor::new(vec![rows, *layer_sizes.last().unwrap()], h)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = MlpModel::<f64>::init(&[4, 3, 2], 1).unwrap();
        let b = MlpModel::<f64>::init(&[4, 3, 2], 1).unwrap();
        let c = MlpModel::<f64>::init(&[4, 3, 2], 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_values(), c.flat_values());
    }

    #[test]
    fn param_shapes_follow_layers() {
        let m = MlpModel::<f64>::init(&[4, 3, 2], 0).unwrap();
        let shapes: Vec<_> = m.params().iter().map(|p| (p.name.as_str(), p.tensor.shape().to_vec())).collect();
        assert_eq!(
            shapes,
            vec![("w1", vec![4, 3]), ("b1", vec![3]), ("w2", vec![3, 2]), ("b2", vec![2])]
        );
        assert!(m.params().iter().all(|p| p.tensor.requires_grad()));
        assert!(m.param("b1").unwrap().tensor.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn glorot_bounds() {
        let m = MlpModel::<f64>::init(&[10, 20], 3).unwrap();
        let a = (6.0f64 / 30.0).sqrt();
        assert!(m.param("w1").unwrap().tensor.data().iter().all(|x| x.abs() < a));
    }

    #[test]
    fn invalid_layers() {
        assert!(matches!(MlpModel::<f64>::init(&[], 0), Err(NnError::InvalidLayers(_))));
        assert!(MlpModel::<f64>::init(&[3], 0).is_err());
        assert!(MlpModel::<f64>::init(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_rows_are_distributions() {
        let m = MlpModel::<f64>::init(&[3, 5, 4], 9).unwrap();
        let x = batch(&[vec![0.1, -2.0, 3.0], vec![10.0, 0.0, -7.5]]);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(x);
        let p = m.forward(&mut tape, &bound, xv).unwrap();
        let p = tape.value(p).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::<f64>::zeros(&[3, 4, 5]).unwrap();
        let p = m.predict(&batch(&[vec![1.0, 2.0, 3.0]])).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn batching_matches_single_rows() {
        let m = MlpModel::<f64>::init(&[3, 6, 2], 4).unwrap();
        let r0 = vec![0.3, -0.2, 1.4];
        let r1 = vec![-1.1, 0.8, 0.05];
        let both = m.predict(&batch(&[r0.clone(), r1.clone()])).unwrap();
        let a = m.predict(&batch(&[r0])).unwrap();
        let b = m.predict(&batch(&[r1])).unwrap();
        let joined: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        for (x, y) in both.data().iter().zip(&joined) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch() {
        let m = MlpModel::<f64>::init(&[3, 2], 0).unwrap();
        let x = batch(&[vec![1.0, 2.0]]);
        assert!(matches!(m.predict(&x), Err(NnError::WidthMismatch { expected: 3, got: 2 })));
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(x);
        assert!(m.forward(&mut tape, &bound, xv).is_err());
    }

    #[test]
    fn tape_and_eager_forward_agree_bitwise() {
        let m = MlpModel::<f64>::init(&[4, 8, 3], 11).unwrap();
        let x = batch(&[vec![0.5, 1.5, -0.25, 2.0], vec![0.0, -1.0, 1.0, 0.1]]);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let p = m.forward(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), m.predict(&x).unwrap().data());
    }

    #[test]
    fn grads_cover_every_param() {
        let m = MlpModel::<f64>::init(&[2, 3, 2], 5).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.constant(batch(&[vec![1.0, -1.0]]));
        let p = m.forward(&mut tape, &bound, x).unwrap();
        let ce = tape.cross_entropy(p, &[1]).unwrap();
        let g = m.param_grads(&bound, &tape.backward(ce).unwrap()).unwrap();
        for p in m.params() {
            assert_eq!(g.get(&p.name).unwrap().shape(), p.tensor.shape());
        }
    }

    #[test]
    fn param_grads_algebra() {
        let mut a = ParamGrads::new();
        a.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut b = ParamGrads::new();
        b.insert("w", Tensor::vector(vec![3.0, -1.0]).unwrap());
        b.insert("b", Tensor::vector(vec![2.0]).unwrap());
        let s = a.sum(&b);
        assert_eq!(s.get("w").unwrap().data(), &[4.0, 1.0]);
        assert_eq!(s.get("b").unwrap().data(), &[2.0]);
        assert_eq!(a.dot(&b), 1.0);
        assert_eq!(b.norm(), (9.0f64 + 1.0 + 4.0).sqrt());
    }
}
