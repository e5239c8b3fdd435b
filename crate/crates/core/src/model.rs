//! Desk-scale MLP classifier with hand-written backpropagation.
//!
//! The model is a plain fully connected network: linear layers with ReLU or
//! tanh activations on the hidden layers and raw logits at the output. The
//! training loss is mean cross-entropy computed through a log-sum-exp
//! stabilization, and `loss_and_grad` returns its exact derivative. Sample
//! contributions are accumulated in a fixed order so results never depend on
//! scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TwaError};
use crate::params::{LayerPartition, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of the MLP: `layer_sizes = [d_in, hidden.., num_classes]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

/// Offsets of one layer's weight block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerDims {
    w_offset: usize,
    b_offset: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(TwaError::Input(
                "MLP needs at least input and output sizes".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(TwaError::Input("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total parameter count `D = sum (in_k + 1) * out_k`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// One partition group per layer (weights and bias together).
    pub fn layer_partition(&self) -> LayerPartition {
        let mut boundaries = vec![0];
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            offset += (w[0] + 1) * w[1];
            boundaries.push(offset);
        }
        LayerPartition::new(boundaries).expect("layer sizes are positive")
    }

    fn layout(&self) -> Vec<LayerDims> {
        let mut dims = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            dims.push(LayerDims {
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            offset += (fan_in + 1) * fan_out;
        }
        dims
    }
}

/// Loss value and its exact gradient over a batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub value: f64,
    pub gradient: ParamVector,
}

/// Fan-in-scaled uniform weights, zero biases; bit-identical for a fixed
/// seed.
pub fn init_params(spec: &MlpSpec) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = vec![0.0; spec.param_count()];
    for dims in spec.layout() {
        let bound = 1.0 / (dims.fan_in as f64).sqrt();
        for v in &mut data[dims.w_offset..dims.b_offset] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(ParamVector::from_raw(data))
}

fn check_shapes(spec: &MlpSpec, w: &ParamVector, data: &Dataset) -> Result<()> {
    spec.validate()?;
    if w.len() != spec.param_count() {
        return Err(TwaError::Dimension(format!(
            "parameter vector has length {}, model needs {}",
            w.len(),
            spec.param_count()
        )));
    }
    if data.d_in() != spec.input_dim() {
        return Err(TwaError::Dimension(format!(
            "dataset has {} features, model takes {}",
            data.d_in(),
            spec.input_dim()
        )));
    }
    if data.num_classes() > spec.num_classes() {
        return Err(TwaError::Dimension(format!(
            "dataset labels reach class {}, model outputs {}",
            data.num_classes() - 1,
            spec.num_classes()
        )));
    }
    Ok(())
}

/// Runs the network on one sample, storing post-activation values per layer.
/// `acts[0]` is the input; the final entry holds the raw logits.
fn forward(
    spec: &MlpSpec,
    layout: &[LayerDims],
    w: &[f64],
    x: &[f64],
    acts: &mut Vec<Vec<f64>>,
) {
    acts.clear();
    acts.push(x.to_vec());
    let last = layout.len() - 1;
    for (k, dims) in layout.iter().enumerate() {
        let out = {
            let input = &acts[k];
            let mut out = Vec::with_capacity(dims.fan_out);
            for j in 0..dims.fan_out {
                let row =
                    &w[dims.w_offset + j * dims.fan_in..dims.w_offset + (j + 1) * dims.fan_in];
                let mut z = w[dims.b_offset + j];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out.push(if k == last { z } else { spec.activation.apply(z) });
            }
            out
        };
        acts.push(out);
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over `rows` of `data` and its gradient w.r.t. `w`.
pub fn loss_and_grad(
    spec: &MlpSpec,
    w: &ParamVector,
    data: &Dataset,
    rows: &[usize],
) -> Result<BatchLoss> {
    check_shapes(spec, w, data)?;
    if rows.is_empty() {
        return Err(TwaError::Input("batch must be non-empty".into()));
    }
    let layout = spec.layout();
    let num_classes = spec.num_classes();
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    let mut acts: Vec<Vec<f64>> = Vec::new();

    for &row in rows {
        if row >= data.len() {
            return Err(TwaError::IndexOutOfRange {
                index: row,
                len: data.len(),
            });
        }
        forward(spec, &layout, w, data.feature_row(row), &mut acts);
        let logits = acts.last().unwrap();
        let label = data.label(row);
        let lse = log_sum_exp(logits);
        loss += lse - logits[label];

        // delta at the output: softmax(logits) - onehot(label)
        let mut delta: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
        delta[label] -= 1.0;
        debug_assert_eq!(delta.len(), num_classes);

        for (k, dims) in layout.iter().enumerate().rev() {
            let input = &acts[k];
            for (j, &dj) in delta.iter().enumerate() {
                let w_row =
                    &mut grad[dims.w_offset + j * dims.fan_in..dims.w_offset + (j + 1) * dims.fan_in];
                for (gi, xi) in w_row.iter_mut().zip(input) {
                    *gi += dj * xi;
                }
                grad[dims.b_offset + j] += dj;
            }
            if k > 0 {
                let mut prev = vec![0.0; dims.fan_in];
                for (j, &dj) in delta.iter().enumerate() {
                    let w_row =
                        &w[dims.w_offset + j * dims.fan_in..dims.w_offset + (j + 1) * dims.fan_in];
                    for (pi, wi) in prev.iter_mut().zip(w_row) {
                        *pi += wi * dj;
                    }
                }
                for (pi, &ai) in prev.iter_mut().zip(input) {
                    *pi *= spec.activation.derivative_from_output(ai);
                }
                delta = prev;
            }
        }
    }

    let m = rows.len() as f64;
    loss /= m;
    for g in &mut grad {
        *g /= m;
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(TwaError::Numeric(
            "loss or gradient is non-finite; activations likely overflowed".into(),
        ));
    }
    Ok(BatchLoss {
        value: loss,
        gradient: ParamVector::from_raw(grad),
    })
}

/// Fraction of argmax-correct predictions; argmax ties resolve to the lowest
/// class index.
pub fn evaluate(spec: &MlpSpec, w: &ParamVector, data: &Dataset) -> Result<f64> {
    check_shapes(spec, w, data)?;
    let layout = spec.layout();
    let mut acts: Vec<Vec<f64>> = Vec::new();
    let mut correct = 0usize;
    for i in 0..data.len() {
        forward(spec, &layout, w, data.feature_row(i), &mut acts);
        let logits = acts.last().unwrap();
        let mut best = 0;
        for (j, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = j;
            }
        }
        if best == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Central finite differences of the batch loss, for gradient verification.
pub fn finite_difference_gradient(
    spec: &MlpSpec,
    w: &ParamVector,
    data: &Dataset,
    rows: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; w.len()];
    let mut probe = w.as_slice().to_vec();
    for i in 0..w.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = loss_and_grad(spec, &ParamVector::from_raw(probe.clone()), data, rows)?.value;
        probe[i] = orig - step;
        let minus = loss_and_grad(spec, &ParamVector::from_raw(probe.clone()), data, rows)?.value;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// `|a - b| / max(1, |a|, |b|)`: relative error with an absolute floor.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};

    fn spec(sizes: &[usize], activation: Activation, seed: u64) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), activation, seed).unwrap()
    }

    #[test]
    fn param_counting() {
        assert_eq!(spec(&[2, 1], Activation::Relu, 0).param_count(), 3);
        assert_eq!(spec(&[2, 3, 2], Activation::Relu, 0).param_count(), 17);
    }

    #[test]
    fn init_bias_is_zero_and_deterministic() {
        let s = spec(&[2, 1], Activation::Relu, 0);
        let w = init_params(&s).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2], 0.0);
        let w2 = init_params(&s).unwrap();
        assert_eq!(w.as_slice(), w2.as_slice());
        // a different seed moves the weights
        let w3 = init_params(&spec(&[2, 1], Activation::Relu, 1)).unwrap();
        assert_ne!(w.as_slice(), w3.as_slice());
    }

    #[test]
    fn layer_partition_tiles_param_count() {
        let s = spec(&[2, 3, 2], Activation::Tanh, 0);
        let part = s.layer_partition();
        assert_eq!(part.boundaries(), &[0, 9, 17]);
        assert_eq!(part.total_len(), s.param_count());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        // single linear layer [1, 2] with equal rows: both logits always match
        let s = spec(&[1, 2], Activation::Relu, 0);
        let w = ParamVector::from_vec(vec![0.3, 0.3, 0.1, 0.1]).unwrap();
        let data = Dataset::new(vec![2.0, -1.0], 1, vec![0, 1], "t".into()).unwrap();
        let out = loss_and_grad(&s, &w, &data, &[0, 1]).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let activation = if seed % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            let s = spec(&[2, 5, 3, 2], activation, seed);
            let w = init_params(&s).unwrap();
            let data = make_synthetic(SyntheticKind::TwoMoons, 12, 0.25, seed).unwrap();
            let rows: Vec<usize> = (0..8).collect();
            let got = loss_and_grad(&s, &w, &data, &rows).unwrap();
            let fd = finite_difference_gradient(&s, &w, &data, &rows, 1e-5).unwrap();
            let worst = got
                .gradient
                .iter()
                .zip(&fd)
                .map(|(&a, &b)| relative_error(a, b))
                .fold(0.0, f64::max);
            assert!(worst < 1e-5, "seed {seed}: max relative error {worst:e}");
        }
    }

    #[test]
    fn duplicated_batch_preserves_mean() {
        let s = spec(&[2, 4, 2], Activation::Tanh, 3);
        let w = init_params(&s).unwrap();
        let data = make_synthetic(SyntheticKind::TwoGaussians, 10, 0.3, 3).unwrap();
        let rows: Vec<usize> = (0..5).collect();
        let doubled: Vec<usize> = rows.iter().chain(&rows).copied().collect();
        let a = loss_and_grad(&s, &w, &data, &rows).unwrap();
        let b = loss_and_grad(&s, &w, &data, &doubled).unwrap();
        assert!(relative_error(a.value, b.value) < 1e-12);
        for (x, y) in a.gradient.iter().zip(b.gradient.iter()) {
            assert!(relative_error(*x, *y) < 1e-12);
        }
    }

    #[test]
    fn loss_and_grad_is_deterministic() {
        let s = spec(&[2, 4, 2], Activation::Relu, 9);
        let w = init_params(&s).unwrap();
        let data = make_synthetic(SyntheticKind::TwoMoons, 16, 0.2, 9).unwrap();
        let rows: Vec<usize> = (0..16).collect();
        let a = loss_and_grad(&s, &w, &data, &rows).unwrap();
        let b = loss_and_grad(&s, &w, &data, &rows).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.gradient.as_slice(), b.gradient.as_slice());
    }

    #[test]
    fn overflowing_weights_raise_numeric_error() {
        let s = spec(&[1, 2, 2], Activation::Relu, 0);
        let mut w = vec![1e200; s.param_count()];
        w[0] = 1e200;
        let w = ParamVector::from_raw(w);
        let data = Dataset::new(vec![1e200], 1, vec![0], "t".into()).unwrap();
        assert!(matches!(
            loss_and_grad(&s, &w, &data, &[0]),
            Err(TwaError::Numeric(_))
        ));
    }

    #[test]
    fn perfect_and_inverted_classifiers() {
        // one linear layer that classifies by the sign of x
        let s = spec(&[1, 2], Activation::Relu, 0);
        let w = ParamVector::from_vec(vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
        let data = Dataset::new(vec![-2.0, 0.5, -1.0, 3.0], 1, vec![0, 1, 0, 1], "t".into())
            .unwrap();
        assert_eq!(evaluate(&s, &w, &data).unwrap(), 1.0);
        let flipped = Dataset::new(vec![-2.0, 0.5, -1.0, 3.0], 1, vec![1, 0, 1, 0], "t".into())
            .unwrap();
        assert_eq!(evaluate(&s, &w, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn constant_logits_tie_break_to_class_zero() {
        let s = spec(&[2, 2], Activation::Relu, 0);
        let w = ParamVector::from_raw(vec![0.0; s.param_count()]);
        let data = make_synthetic(SyntheticKind::TwoGaussians, 100, 0.1, 5).unwrap();
        // oracle: every prediction is class 0, so accuracy = share of 0 labels
        let zeros = data.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(zeros, 50);
        assert_eq!(evaluate(&s, &w, &data).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_is_invariant_under_duplication() {
        let s = spec(&[2, 3, 2], Activation::Tanh, 4);
        let w = init_params(&s).unwrap();
        let data = make_synthetic(SyntheticKind::TwoMoons, 20, 0.3, 4).unwrap();
        let acc = evaluate(&s, &w, &data).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let doubled_rows: Vec<usize> = (0..20).chain(0..20).collect();
        let doubled = data.select(&doubled_rows).unwrap();
        assert_eq!(evaluate(&s, &w, &doubled).unwrap(), acc);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let s = spec(&[2, 2], Activation::Relu, 0);
        let w = ParamVector::from_vec(vec![0.0; 5]).unwrap();
        let data = make_synthetic(SyntheticKind::TwoGaussians, 4, 0.1, 0).unwrap();
        assert!(matches!(
            evaluate(&s, &w, &data),
            Err(TwaError::Dimension(_))
        ));
        let w = init_params(&s).unwrap();
        let wide = Dataset::new(vec![1.0, 2.0, 3.0], 3, vec![0], "t".into()).unwrap();
        assert!(matches!(
            loss_and_grad(&s, &w, &wide, &[0]),
            Err(TwaError::Dimension(_))
        ));
    }
}
