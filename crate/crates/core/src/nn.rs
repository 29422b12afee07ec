//! Fixed-topology multilayer perceptron.
//!
//! Parameters live in one flat `f64` buffer ([`ParamVector`]) in canonical
//! layer-major order: for each layer, the weight matrix (shape
//! `out × in`, row-major) followed by the bias vector. Gradients
//! ([`GradientVector`]) share the layout, which makes them directly usable by
//! the continual-learning transforms.
//!
//! Inputs are batched as rows of a matrix. [`backward`] returns the gradient of
//! `Σ_rows ⟨output_row, output_grad_row⟩` with respect to both the parameters
//! and the inputs; a softmax output layer is differentiated jointly through
//! the normalization.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Softmax,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("a network needs at least an input and an output layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` per layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = offset;
            let bias = weights + fan_in * fan_out;
            offset = bias + fan_out;
            (weights, bias, fan_in, fan_out)
        })
    }
}

macro_rules! flat_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl std::ops::DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }
    };
}

flat_vector!(ParamVector);
flat_vector!(GradientVector);

impl GradientVector {
    pub fn dot(&self, other: &GradientVector) -> f64 {
        dot(self, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(self, self)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weight matrix and bias of one layer, borrowed from a flat buffer.
pub type LayerView<'a> = (ArrayView2<'a, f64>, ArrayView1<'a, f64>);

impl ParamVector {
    /// Borrows the parameters as per-layer `(weights, bias)` views.
    pub fn layers<'a>(&'a self, spec: &NetSpec) -> Vec<LayerView<'a>> {
        spec.layout()
            .map(|(w, b, fan_in, fan_out)| {
                let weights = ArrayView2::from_shape((fan_out, fan_in), &self.0[w..b]).unwrap();
                let bias = ArrayView1::from(&self.0[b..b + fan_out]);
                (weights, bias)
            })
            .collect()
    }

    /// Assembles a flat vector from per-layer `(weights, bias)` arrays.
    pub fn from_layers(spec: &NetSpec, layers: &[LayerView<'_>]) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::contract(format!(
                "{} layers given, spec has {}",
                layers.len(),
                spec.num_layers()
            )));
        }
        let mut values = Vec::with_capacity(spec.num_params());
        for ((w, b), (_, _, fan_in, fan_out)) in layers.iter().zip(spec.layout()) {
            if w.dim() != (fan_out, fan_in) || b.len() != fan_out {
                return Err(Error::contract("layer shape does not match spec"));
            }
            values.extend(w.iter());
            values.extend(b.iter());
        }
        Ok(Self(values))
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(spec: &NetSpec, seed: u64) -> ParamVector {
    let mut rng = seeding::rng(seed);
    let mut params = ParamVector::zeros(spec.num_params());
    for (w, b, fan_in, _) in spec.layout() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in &mut params.0[w..b] {
            *x = rng.gen_range(-bound..bound);
        }
    }
    params
}

/// Layer activations recorded by [`forward`]: the input followed by each
/// layer's post-activation output.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().unwrap()
    }

    pub fn batch_len(&self) -> usize {
        self.activations[0].nrows()
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

fn check_params(spec: &NetSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.num_params() {
        return Err(Error::contract(format!(
            "parameter vector has {} entries, spec needs {}",
            params.len(),
            spec.num_params()
        )));
    }
    Ok(())
}

/// Batched forward pass; `input` has one sample per row.
pub fn forward(spec: &NetSpec, params: &ParamVector, input: ArrayView2<'_, f64>) -> Result<Tape> {
    check_params(spec, params)?;
    if input.ncols() != spec.input_len() {
        return Err(Error::contract(format!(
            "input has {} features, network expects {}",
            input.ncols(),
            spec.input_len()
        )));
    }
    let layers = params.layers(spec);
    let last = layers.len() - 1;
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(input.to_owned());
    for (i, (w, b)) in layers.iter().enumerate() {
        let prev = activations.last().unwrap();
        let mut z = Array2::zeros((prev.nrows(), w.nrows()));
        general_mat_mul(1.0, prev, &w.t(), 0.0, &mut z);
        z += b;
        if i < last {
            z.mapv_inplace(|x| x.max(0.0));
        } else if spec.output_activation == OutputActivation::Softmax {
            softmax_rows(&mut z);
        }
        activations.push(z);
    }
    Ok(Tape { activations })
}

/// Single-sample convenience wrapper around [`forward`].
pub fn forward_one(spec: &NetSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, input.len()), input).unwrap();
    Ok(forward(spec, params, view)?.into_output().into_raw_vec_and_offset().0)
}

/// Gradient of `Σ_rows ⟨output, output_grad⟩`. Returns `(param_grad, input_grad)`.
pub fn backward(
    spec: &NetSpec,
    params: &ParamVector,
    tape: &Tape,
    output_grad: ArrayView2<'_, f64>,
) -> Result<(GradientVector, Array2<f64>)> {
    let mut grad = GradientVector::zeros(spec.num_params());
    let input_grad = backward_accumulate(spec, params, tape, output_grad, Some(&mut grad))?;
    Ok((grad, input_grad))
}

/// Like [`backward`] but adds into `param_grad` (or skips parameter
/// gradients entirely when `None`) and returns only the input gradient.
pub fn backward_accumulate(
    spec: &NetSpec,
    params: &ParamVector,
    tape: &Tape,
    output_grad: ArrayView2<'_, f64>,
    mut param_grad: Option<&mut GradientVector>,
) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    let out = tape.output();
    if output_grad.dim() != out.dim() || tape.activations.len() != spec.layer_sizes.len() {
        return Err(Error::contract(format!(
            "output gradient shape {:?} does not match forward output {:?}",
            output_grad.dim(),
            out.dim()
        )));
    }
    if let Some(g) = param_grad.as_deref() {
        if g.len() != spec.num_params() {
            return Err(Error::contract("gradient buffer length does not match spec"));
        }
    }

    let mut delta = output_grad.to_owned();
    if spec.output_activation == OutputActivation::Softmax {
        // d/dz of <softmax(z), g> = y ⊙ (g − <y, g>)
        for (mut d, y) in delta.rows_mut().into_iter().zip(out.rows()) {
            let inner = d.dot(&y);
            d.zip_mut_with(&y, |di, &yi| *di = yi * (*di - inner));
        }
    }

    let layers = params.layers(spec);
    let offsets: Vec<_> = spec.layout().collect();
    for l in (0..layers.len()).rev() {
        let a_prev = &tape.activations[l];
        if let Some(g) = param_grad.as_deref_mut() {
            let (w_off, b_off, fan_in, fan_out) = offsets[l];
            let (w_part, rest) = g.0[w_off..].split_at_mut(b_off - w_off);
            let mut dw = ArrayViewMut2::from_shape((fan_out, fan_in), w_part).unwrap();
            general_mat_mul(1.0, &delta.t(), a_prev, 1.0, &mut dw);
            let mut db = ArrayViewMut1::from(&mut rest[..fan_out]);
            db += &delta.sum_axis(Axis(0));
        }
        let (w, _) = &layers[l];
        let mut prev_delta = Array2::zeros((delta.nrows(), w.ncols()));
        general_mat_mul(1.0, &delta, w, 0.0, &mut prev_delta);
        if l > 0 {
            prev_delta.zip_mut_with(a_prev, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        delta = prev_delta;
    }
    Ok(delta)
}

/// Network specification bundled with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: ParamVector,
}

impl Network {
    pub fn new(spec: NetSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn from_params(spec: NetSpec, params: ParamVector) -> Result<Self> {
        check_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Tape> {
        forward(&self.spec, &self.params, input)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward_one(&self.spec, &self.params, input)
    }

    pub fn backward(
        &self,
        tape: &Tape,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(GradientVector, Array2<f64>)> {
        backward(&self.spec, &self.params, tape, output_grad)
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` along `grad` (descent).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "adam lengths differ: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Diagonal Fisher estimate: per-parameter mean of squared gradients.
pub fn estimate_fisher(samples: &[GradientVector]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("Fisher estimate needs at least one gradient sample"))?;
    let mut fisher = vec![0.0; first.len()];
    for s in samples {
        if s.len() != fisher.len() {
            return Err(Error::contract("gradient samples differ in length"));
        }
        for (f, g) in fisher.iter_mut().zip(s.iter()) {
            *f += g * g;
        }
    }
    let n = samples.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn spec(sizes: &[usize], out: OutputActivation) -> NetSpec {
        NetSpec::new(sizes.to_vec(), out).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let s = spec(&[4, 3, 2], OutputActivation::Linear);
        let a = init_params(&s, 11);
        assert_eq!(a, init_params(&s, 11));
        assert_ne!(a, init_params(&s, 12));
        for (w, b) in a.layers(&s) {
            assert!(b.iter().all(|&x| x == 0.0));
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            assert!(w.iter().all(|x| x.abs() <= bound));
        }
    }

    #[test]
    fn param_count() {
        assert_eq!(spec(&[4, 2], OutputActivation::Linear).num_params(), 10);
        assert_eq!(spec(&[20, 128, 128, 128, 5], OutputActivation::Softmax).num_params(), 36357);
        assert!(NetSpec::new(vec![3], OutputActivation::Linear).is_err());
    }

    #[test]
    fn zero_network_outputs() {
        let s = spec(&[3, 4, 5], OutputActivation::Softmax);
        let p = ParamVector::zeros(s.num_params());
        let y = forward_one(&s, &p, &[1.0, -2.0, 3.0]).unwrap();
        for v in y {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-15);
        }
        let s = spec(&[3, 4, 1], OutputActivation::Linear);
        let p = ParamVector::zeros(s.num_params());
        assert_eq!(forward_one(&s, &p, &[1.0, 2.0, 3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let s = spec(&[3, 2], OutputActivation::Linear);
        let p = init_params(&s, 1);
        assert!(matches!(forward_one(&s, &p, &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_layer_weight_gradient() {
        let s = spec(&[3, 2], OutputActivation::Linear);
        let p = init_params(&s, 5);
        let x = array![[0.5, -1.0, 2.0]];
        let g = array![[0.3, -0.7]];
        let tape = forward(&s, &p, x.view()).unwrap();
        let (pg, ig) = backward(&s, &p, &tape, g.view()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(pg[i * 3 + j], x[[0, j]] * g[[0, i]], epsilon = 1e-15);
            }
            assert_abs_diff_eq!(pg[6 + i], g[[0, i]], epsilon = 1e-15);
        }
        let (w, _) = &p.layers(&s)[0];
        for j in 0..3 {
            assert_abs_diff_eq!(ig[[0, j]], w[[0, j]] * 0.3 - w[[1, j]] * 0.7, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let s = spec(&[3, 4, 2], OutputActivation::Softmax);
        let p = init_params(&s, 5);
        let x = array![[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]];
        let tape = forward(&s, &p, x.view()).unwrap();
        let (pg, ig) = backward(&s, &p, &tape, Array2::zeros((2, 2)).view()).unwrap();
        assert!(pg.iter().all(|&v| v == 0.0));
        assert!(ig.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let s = spec(&[3, 2], OutputActivation::Linear);
        let p = init_params(&s, 5);
        let tape = forward(&s, &p, array![[0.5, -1.0, 2.0]].view()).unwrap();
        assert!(backward(&s, &p, &tape, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = AdamState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [0.37, -2.5, 1e3] {
            let mut adam = AdamState::new(1, 1e-4);
            let mut p = vec![0.0];
            adam.step(&mut p, &[g]).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            assert_abs_diff_eq!(p[0].abs(), 1e-4, epsilon = 1e-9);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = AdamState::new(2, 1e-2);
            let mut p = vec![0.1, 0.2];
            for k in 0..5 {
                adam.step(&mut p, &[k as f64, -0.5]).unwrap();
            }
            (p, adam)
        };
        assert_eq!(run(), run());
        let mut adam = AdamState::new(2, 1e-2);
        assert!(adam.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn fisher_estimates() {
        let g = GradientVector(vec![1.0, -2.0, 0.5]);
        assert_eq!(estimate_fisher(&[g.clone()]).unwrap(), vec![1.0, 4.0, 0.25]);
        let neg = GradientVector(g.iter().map(|x| -x).collect());
        assert_eq!(estimate_fisher(&[g.clone(), neg]).unwrap(), vec![1.0, 4.0, 0.25]);
        assert_eq!(estimate_fisher(&[GradientVector::zeros(3)]).unwrap(), vec![0.0; 3]);
        assert!(estimate_fisher(&[]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_assign_round_trip(seed in any::<u64>(), hidden in 1usize..6) {
            let s = spec(&[3, hidden, 2], OutputActivation::Linear);
            let p = init_params(&s, seed);
            let layers = p.layers(&s);
            prop_assert_eq!(ParamVector::from_layers(&s, &layers).unwrap(), p.clone());
        }

        #[test]
        fn softmax_is_positive_and_normalized(seed in any::<u64>(), x in prop::collection::vec(-50.0f64..50.0, 4)) {
            let s = spec(&[4, 6, 5], OutputActivation::Softmax);
            let p = init_params(&s, seed);
            let y = forward_one(&s, &p, &x).unwrap();
            prop_assert!(y.iter().all(|&v| v > 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn fisher_nonnegative_and_order_invariant(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6)
        ) {
            let samples: Vec<_> = rows.iter().cloned().map(GradientVector).collect();
            let f = estimate_fisher(&samples).unwrap();
            prop_assert!(f.iter().all(|&v| v >= 0.0));
            let mut rev = samples.clone();
            rev.reverse();
            let fr = estimate_fisher(&rev).unwrap();
            for (a, b) in f.iter().zip(&fr) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
