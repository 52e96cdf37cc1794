//! Dense feed-forward networks with analytic backpropagation, inverted
//! dropout and an adaptive-moment optimizer.
//!
//! Weights of layer `k` are stored as `(layer_sizes[k + 1], layer_sizes[k])`
//! matrices. Hidden layers share one activation; the output layer is linear.
//! Batched routines take row-major `(batch, features)` arrays.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::seed::{rng_from_seed, Rng};

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

    /// Derivative expressed through the activation's output value.
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

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Per-parameter tensors with the same shapes as an [`MlpParams`]; used for
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: params
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(
            "a network needs at least an input and an output size".into(),
        ));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    Ok(())
}

impl MlpParams {
    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// Scaled Glorot-uniform weights, zero biases.
    pub fn init(
        layer_sizes: &[usize],
        activation: Activation,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("weight_init_scale must be > 0, got {scale}")));
        }
        let mut params = Self::zeros(layer_sizes, activation)?;
        for w in &mut params.weights {
            let (fan_out, fan_in) = w.dim();
            let limit = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(params)
    }

    pub fn from_parts(
        layer_sizes: &[usize],
        activation: Activation,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let params = Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights,
            biases,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        validate_sizes(&self.layer_sizes)?;
        let n = self.layer_sizes.len() - 1;
        if self.weights.len() != n {
            return Err(Error::shape("layer count", n, self.weights.len()));
        }
        if self.biases.len() != n {
            return Err(Error::shape("bias count", n, self.biases.len()));
        }
        for k in 0..n {
            let (rows, cols) = self.weights[k].dim();
            if rows != self.layer_sizes[k + 1] {
                return Err(Error::shape("weight rows", self.layer_sizes[k + 1], rows));
            }
            if cols != self.layer_sizes[k] {
                return Err(Error::shape("weight columns", self.layer_sizes[k], cols));
            }
            if self.biases[k].len() != self.layer_sizes[k + 1] {
                return Err(Error::shape(
                    "bias length",
                    self.layer_sizes[k + 1],
                    self.biases[k].len(),
                ));
            }
        }
        if !self.is_finite() {
            return Err(Error::Config("parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), got));
        }
        Ok(())
    }

    /// Deterministic batched forward pass.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_cached(x, Dropout::Off).output)
    }

    /// Batched pass with independent inverted-dropout masks per row.
    pub fn forward_batch_dropout(
        &self,
        x: ArrayView2<'_, f64>,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Array2<f64>> {
        check_rate(dropout_rate)?;
        self.check_input(x.ncols())?;
        Ok(self.forward_cached(x, Dropout::Random(dropout_rate, rng)).output)
    }

    /// Forward pass that records what backpropagation needs. `dropout` draws
    /// one keep/drop decision per hidden unit per row.
    fn forward_cached(&self, x: ArrayView2<'_, f64>, mut dropout: Dropout<'_>) -> Cache {
        let last = self.n_layers() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut current: Option<Array2<f64>> = None;
        for k in 0..=last {
            let input = match &current {
                Some(a) => a.view(),
                None => x,
            };
            let mut z = input.dot(&self.weights[k].t());
            z += &self.biases[k];
            if k == last {
                return Cache {
                    input: x.to_owned(),
                    hidden,
                    masks,
                    output: z,
                };
            }
            let act = self.activation;
            z.mapv_inplace(|v| act.apply(v));
            let mask = match &mut dropout {
                Dropout::Off => None,
                Dropout::Random(rate, _) if *rate == 0.0 => None,
                Dropout::Random(rate, rng) => {
                    let keep_scale = 1.0 / (1.0 - *rate);
                    Some(Array2::from_shape_fn(z.raw_dim(), |_| {
                        if rng.random::<f64>() < *rate {
                            0.0
                        } else {
                            keep_scale
                        }
                    }))
                }
                Dropout::Fixed(rate, keep) => {
                    let keep_scale = 1.0 / (1.0 - *rate);
                    Some(Array2::from_shape_fn(z.raw_dim(), |(_, j)| {
                        if keep[k][j] {
                            keep_scale
                        } else {
                            0.0
                        }
                    }))
                }
            };
            let next = match &mask {
                Some(m) => &z * m,
                None => z.clone(),
            };
            hidden.push(z);
            masks.push(mask);
            current = Some(next);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradients summed over the batch rows of `cache`.
    fn backward_cached(&self, cache: &Cache, grad_out: &Array2<f64>) -> ParamGrads {
        let n = self.n_layers();
        let mut grads = ParamGrads::zeros_like(self);
        let mut delta = grad_out.clone();
        for k in (0..n).rev() {
            // input to layer k as seen in the forward pass (after dropout)
            let input: Array2<f64> = if k == 0 {
                cache.input.clone()
            } else {
                match &cache.masks[k - 1] {
                    Some(m) => &cache.hidden[k - 1] * m,
                    None => cache.hidden[k - 1].clone(),
                }
            };
            grads.weights[k] = delta.t().dot(&input);
            grads.biases[k] = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut d_act = delta.dot(&self.weights[k]);
                if let Some(m) = &cache.masks[k - 1] {
                    d_act *= m;
                }
                let act = self.activation;
                Zip::from(&mut d_act)
                    .and(&cache.hidden[k - 1])
                    .for_each(|d, &a| *d *= act.derivative_from_output(a));
                delta = d_act;
            }
        }
        grads
    }
}

enum Dropout<'a> {
    Off,
    Random(f64, &'a mut Rng),
    /// Explicit keep decisions per hidden layer, shared by every row.
    Fixed(f64, &'a [Vec<bool>]),
}

struct Cache {
    input: Array2<f64>,
    /// Post-activation values of each hidden layer, before dropout.
    hidden: Vec<Array2<f64>>,
    /// Per hidden layer: 0 or 1/(1-rate) multipliers, when dropout is active.
    masks: Vec<Option<Array2<f64>>>,
    output: Array2<f64>,
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice")
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.check_input(x.len())?;
    Ok(params.forward_cached(row(x), Dropout::Off).output.into_raw_vec_and_offset().0)
}

/// One stochastic pass with inverted dropout on every hidden layer.
pub fn mlp_forward_dropout(
    params: &MlpParams,
    x: &[f64],
    dropout_rate: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_rate(dropout_rate)?;
    params.check_input(x.len())?;
    Ok(params
        .forward_cached(row(x), Dropout::Random(dropout_rate, rng))
        .output
        .into_raw_vec_and_offset()
        .0)
}

/// Forward pass with explicit keep masks, one per hidden layer.
pub fn mlp_forward_masked(
    params: &MlpParams,
    x: &[f64],
    keep: &[Vec<bool>],
    dropout_rate: f64,
) -> Result<Vec<f64>> {
    check_rate(dropout_rate)?;
    params.check_input(x.len())?;
    let hidden_layers = params.n_layers() - 1;
    if keep.len() != hidden_layers {
        return Err(Error::shape("dropout masks", hidden_layers, keep.len()));
    }
    for (k, mask) in keep.iter().enumerate() {
        if mask.len() != params.layer_sizes[k + 1] {
            return Err(Error::shape("dropout mask width", params.layer_sizes[k + 1], mask.len()));
        }
    }
    Ok(params
        .forward_cached(row(x), Dropout::Fixed(dropout_rate, keep))
        .output
        .into_raw_vec_and_offset()
        .0)
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
    }
}

/// ∂loss/∂θ for a single input, given ∂loss/∂output.
pub fn backprop(params: &MlpParams, x: &[f64], loss_grad_at_output: &[f64]) -> Result<ParamGrads> {
    params.check_input(x.len())?;
    if loss_grad_at_output.len() != params.output_dim() {
        return Err(Error::shape(
            "output gradient",
            params.output_dim(),
            loss_grad_at_output.len(),
        ));
    }
    let cache = params.forward_cached(row(x), Dropout::Off);
    let g = row(loss_grad_at_output).to_owned();
    Ok(params.backward_cached(&cache, &g))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ParamGrads,
    pub second_moment: ParamGrads,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            first_moment: ParamGrads::zeros_like(params),
            second_moment: ParamGrads::zeros_like(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub fn optimizer_step(
    params: &mut MlpParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let n = params.n_layers();
    if grads.weights.len() != n || grads.biases.len() != n {
        return Err(Error::shape("gradient layers", n, grads.weights.len()));
    }
    for k in 0..n {
        if grads.weights[k].dim() != params.weights[k].dim() {
            return Err(Error::shape("gradient rows", params.weights[k].nrows(), grads.weights[k].nrows()));
        }
        if grads.biases[k].len() != params.biases[k].len() {
            return Err(Error::shape("gradient bias", params.biases[k].len(), grads.biases[k].len()));
        }
        let finite = grads.weights[k].iter().all(|v| v.is_finite())
            && grads.biases[k].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteGradient { layer: k });
        }
    }

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for k in 0..n {
        Zip::from(&mut params.weights[k])
            .and(&grads.weights[k])
            .and(&mut state.first_moment.weights[k])
            .and(&mut state.second_moment.weights[k])
            .for_each(update);
        Zip::from(&mut params.biases[k])
            .and(&grads.biases[k])
            .and(&mut state.first_moment.biases[k])
            .and(&mut state.second_moment.biases[k])
            .for_each(update);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub weight_init_scale: f64,
    /// Cosine decay target as a fraction of `learning_rate`; 1.0 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            learning_rate: 3e-3,
            dropout_rate: 0.0,
            seed: 0,
            weight_init_scale: 1.0,
            final_lr_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        check_rate(self.dropout_rate)?;
        if !(self.weight_init_scale > 0.0 && self.weight_init_scale.is_finite()) {
            return Err(Error::Config("weight_init_scale must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let progress = step as f64 / total.max(1) as f64;
        let floor = self.learning_rate * self.final_lr_fraction;
        floor
            + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean per-row loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch training. Shuffling and dropout masks come from `config.seed`;
/// the initial parameters are taken as given.
pub fn train(
    mut params: MlpParams,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    loss: &LossKind,
    config: &TrainConfig,
) -> Result<(MlpParams, TrainLog)> {
    config.validate()?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if targets.nrows() != n {
        return Err(Error::shape("target rows", n, targets.nrows()));
    }
    params.check_input(inputs.ncols())?;
    let out_dim = targets.ncols() * loss.heads_per_target();
    if out_dim != params.output_dim() {
        return Err(Error::shape("network outputs for loss", out_dim, params.output_dim()));
    }

    let mut rng = rng_from_seed(config.seed);
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut log = TrainLog::default();
    let mut last_finite = None;
    let in_dim = inputs.ncols();
    let t_dim = targets.ncols();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let bs = chunk.len();
            let mut xb = Array2::<f64>::zeros((bs, in_dim));
            let mut yb = Array2::<f64>::zeros((bs, t_dim));
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&inputs.row(i));
                yb.row_mut(r).assign(&targets.row(i));
            }
            let dropout = if config.dropout_rate > 0.0 {
                Dropout::Random(config.dropout_rate, &mut rng)
            } else {
                Dropout::Off
            };
            let cache = params.forward_cached(xb.view(), dropout);
            let mut grad_out = Array2::<f64>::zeros(cache.output.raw_dim());
            let mut batch_loss = 0.0;
            let scale = 1.0 / bs as f64;
            for r in 0..bs {
                let out = cache.output.row(r);
                let target = yb.row(r);
                let mut g = grad_out.row_mut(r);
                batch_loss += loss.row_loss_grad(
                    out.as_slice().expect("standard layout"),
                    target.as_slice().expect("standard layout"),
                    g.as_slice_mut().expect("standard layout"),
                );
                g *= scale;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    context: format!("non-finite loss at epoch {epoch}"),
                    last_finite_epoch: last_finite,
                });
            }
            epoch_loss += batch_loss;
            let grads = params.backward_cached(&cache, &grad_out);
            let lr = config.lr_at(epoch * batches_per_epoch + b, total_steps);
            optimizer_step(&mut params, &grads, &mut state, lr).map_err(|e| match e {
                Error::NonFiniteGradient { layer } => Error::Diverged {
                    context: format!("non-finite gradient in layer {layer} at epoch {epoch}"),
                    last_finite_epoch: last_finite,
                },
                other => other,
            })?;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Diverged {
                context: format!("non-finite parameters at epoch {epoch}"),
                last_finite_epoch: last_finite,
            });
        }
        log.epoch_losses.push(mean);
        last_finite = Some(epoch);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::QuantileLevel;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> Rng {
        rng_from_seed(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = MlpParams::from_parts(
            &[2, 2],
            Activation::Relu,
            vec![array![[1.0, 0.0], [0.0, 1.0]]],
            vec![array![0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(mlp_forward(&p, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 5, 4, 2], Activation::Relu).unwrap();
        assert_eq!(mlp_forward(&p, &[1.0, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_two_layer_relu() {
        // h = relu(W1 x + b1), y = W2 h + b2 with x = (1, 2)
        // W1 x + b1 = (0.5 - 0.4 + 0.1, -0.3 + 0.4 - 0.2) = (0.2, -0.1) -> relu (0.2, 0)
        // y = 1.5 * 0.2 + (-2) * 0 + 0.05 = 0.35
        let p = MlpParams::from_parts(
            &[2, 2, 1],
            Activation::Relu,
            vec![array![[0.5, -0.2], [-0.3, 0.2]], array![[1.5, -2.0]]],
            vec![array![0.1, -0.2], array![0.05]],
        )
        .unwrap();
        let y = mlp_forward(&p, &[1.0, 2.0]).unwrap();
        assert!((y[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn input_shape_is_checked() {
        let p = MlpParams::zeros(&[2, 1], Activation::Tanh).unwrap();
        assert!(matches!(mlp_forward(&p, &[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(backprop(&p, &[1.0, 2.0], &[1.0, 1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn from_parts_rejects_bad_shapes() {
        let r = MlpParams::from_parts(
            &[2, 1],
            Activation::Tanh,
            vec![Array2::zeros((2, 2))],
            vec![Array1::zeros(1)],
        );
        assert!(r.is_err());
        let r = MlpParams::from_parts(
            &[1, 1],
            Activation::Tanh,
            vec![array![[f64::NAN]]],
            vec![array![0.0]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn zero_dropout_matches_deterministic_pass() {
        let p = MlpParams::init(&[3, 8, 8, 2], Activation::Tanh, 1.0, &mut rng(1)).unwrap();
        let x = [0.3, -0.7, 1.1];
        let a = mlp_forward(&p, &x).unwrap();
        let b = mlp_forward_dropout(&p, &x, 0.0, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_keep_mask_doubles_hidden_activations_at_half_rate() {
        // identity output layer exposes the hidden activations
        let mut p = MlpParams::init(&[2, 3, 3], Activation::Tanh, 1.0, &mut rng(2)).unwrap();
        p.weights_mut()[1] = Array2::eye(3);
        p.biases_mut()[1] = Array1::zeros(3);
        let x = [0.4, -0.9];
        let plain = mlp_forward(&p, &x).unwrap();
        let masked = mlp_forward_masked(&p, &x, &[vec![true; 3]], 0.5).unwrap();
        for (m, v) in masked.iter().zip(&plain) {
            assert_eq!(*m, 2.0 * v);
        }
    }

    #[test]
    fn dropout_expectation_matches_deterministic_pass() {
        // Inverted dropout is unbiased for a network linear in its last hidden
        // layer; a single hidden layer keeps the expectation exact.
        let p = MlpParams::init(&[2, 16, 2], Activation::Tanh, 1.0, &mut rng(3)).unwrap();
        let x = [0.5, -0.25];
        let reference = mlp_forward(&p, &x).unwrap();
        let mut r = rng(4);
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..n {
            let y = mlp_forward_dropout(&p, &x, 0.3, &mut r).unwrap();
            for k in 0..2 {
                sum[k] += y[k];
                sum_sq[k] += y[k] * y[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sum_sq[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - reference[k]).abs() <= 3.0 * se,
                "output {k}: mean {mean} ref {} se {se}",
                reference[k]
            );
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let p = MlpParams::init(&[3, 5, 2], Activation::Tanh, 1.0, &mut rng(5)).unwrap();
        let g = backprop(&p, &[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn single_linear_neuron_gradient() {
        let p = MlpParams::from_parts(
            &[3, 1],
            Activation::Tanh,
            vec![array![[0.2, -0.5, 1.0]]],
            vec![array![0.3]],
        )
        .unwrap();
        let x = [1.5, -2.0, 0.25];
        let g = backprop(&p, &x, &[0.7]).unwrap();
        for j in 0..3 {
            assert!((g.weights[0][[0, j]] - 0.7 * x[j]).abs() < 1e-15);
        }
        assert_eq!(g.biases[0][0], 0.7);
    }

    /// Central finite differences of `sum(c ⊙ f(x))` with respect to every parameter.
    fn finite_difference(p: &MlpParams, x: &[f64], c: &[f64], h: f64) -> ParamGrads {
        let objective = |q: &MlpParams| -> f64 {
            mlp_forward(q, x).unwrap().iter().zip(c).map(|(a, b)| a * b).sum()
        };
        let mut out = ParamGrads::zeros_like(p);
        for k in 0..p.n_layers() {
            for idx in 0..p.weights[k].len() {
                let (r, col) = (idx / p.weights[k].ncols(), idx % p.weights[k].ncols());
                let mut plus = p.clone();
                plus.weights[k][[r, col]] += h;
                let mut minus = p.clone();
                minus.weights[k][[r, col]] -= h;
                out.weights[k][[r, col]] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
            for i in 0..p.biases[k].len() {
                let mut plus = p.clone();
                plus.biases[k][i] += h;
                let mut minus = p.clone();
                minus.biases[k][i] -= h;
                out.biases[k][i] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
        }
        out
    }

    fn max_rel_error(a: &ParamGrads, b: &ParamGrads) -> f64 {
        let pairs = a
            .weights
            .iter()
            .zip(&b.weights)
            .flat_map(|(x, y)| x.iter().zip(y.iter()))
            .chain(a.biases.iter().zip(&b.biases).flat_map(|(x, y)| x.iter().zip(y.iter())));
        pairs
            .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn backprop_matches_finite_differences_tanh() {
        let mut r = rng(6);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = MlpParams::init(&[2, 4, 2], Activation::Tanh, 1.0, &mut r).unwrap();
            let x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut r)).collect();
            let c: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut r)).collect();
            let analytic = backprop(&p, &x, &c).unwrap();
            let numeric = finite_difference(&p, &x, &c, 1e-5);
            worst = worst.max(max_rel_error(&analytic, &numeric));
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn optimizer_zero_gradient_is_a_no_op() {
        let mut p = MlpParams::init(&[2, 3, 1], Activation::Tanh, 1.0, &mut rng(7)).unwrap();
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        let g = ParamGrads::zeros_like(&p);
        optimizer_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn optimizer_moves_against_constant_gradient() {
        let mut p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let mut s = OptimizerState::new(&p);
        let mut g = ParamGrads::zeros_like(&p);
        g.weights[0][[0, 0]] = 0.5;
        g.biases[0][0] = -2.0;
        let mut prev = (0.0, 0.0);
        for _ in 0..50 {
            optimizer_step(&mut p, &g, &mut s, 0.01).unwrap();
            let now = (p.weights()[0][[0, 0]], p.biases()[0][0]);
            assert!(now.0 < prev.0);
            assert!(now.1 > prev.1);
            prev = now;
        }
        assert_eq!(s.step, 50);
    }

    #[test]
    fn optimizer_converges_on_scalar_quadratic() {
        // loss (θ - 3)², θ is the lone bias of a 1→1 net
        let mut p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let mut s = OptimizerState::new(&p);
        for _ in 0..500 {
            let theta = p.biases()[0][0];
            let mut g = ParamGrads::zeros_like(&p);
            g.biases[0][0] = 2.0 * (theta - 3.0);
            optimizer_step(&mut p, &g, &mut s, 0.05).unwrap();
        }
        assert!((p.biases()[0][0] - 3.0).abs() < 1e-2, "{}", p.biases()[0][0]);
    }

    #[test]
    fn optimizer_rejects_non_finite_gradient() {
        let mut p = MlpParams::zeros(&[1, 2, 1], Activation::Tanh).unwrap();
        let mut s = OptimizerState::new(&p);
        let mut g = ParamGrads::zeros_like(&p);
        g.biases[1][0] = f64::NAN;
        let err = optimizer_step(&mut p, &g, &mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { layer: 1 }));
        assert_eq!(s.step, 0);
    }

    fn column(values: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
    }

    #[test]
    fn linear_model_learns_identity() {
        let xs: Vec<f64> = (0..200).map(|i| -1.0 + 2.0 * i as f64 / 199.0).collect();
        let x = column(&xs);
        let p = MlpParams::init(&[1, 1], Activation::Tanh, 1.0, &mut rng(8)).unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let (p, log) = train(p, x.view(), x.view(), &LossKind::Mse, &cfg).unwrap();
        assert!(*log.epoch_losses.last().unwrap() < 1e-3);
        assert!((mlp_forward(&p, &[0.5]).unwrap()[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn median_of_constant_data_is_the_constant() {
        let x = Array2::<f64>::zeros((100, 1));
        let y = Array2::<f64>::from_elem((100, 1), 2.5);
        let p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let loss = LossKind::Pinball {
            levels: vec![QuantileLevel::new(0.5).unwrap()],
        };
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 20,
            learning_rate: 2e-2,
            seed: 2,
            ..TrainConfig::default()
        };
        let (p, _) = train(p, x.view(), y.view(), &loss, &cfg).unwrap();
        assert!((mlp_forward(&p, &[0.0]).unwrap()[0] - 2.5).abs() < 1e-2);
    }

    #[test]
    fn constant_predictor_recovers_normal_upper_quantile() {
        // Φ⁻¹(0.9) = 1.2815515655446004
        let mut r = rng(10);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let x = Array2::<f64>::zeros((n, 1));
        let y = column(&samples);
        let p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let loss = LossKind::Pinball {
            levels: vec![QuantileLevel::new(0.9).unwrap()],
        };
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 100,
            learning_rate: 2e-2,
            seed: 3,
            final_lr_fraction: 0.01,
            ..TrainConfig::default()
        };
        let (p, _) = train(p, x.view(), y.view(), &loss, &cfg).unwrap();
        let pred = mlp_forward(&p, &[0.0]).unwrap()[0];
        assert!((pred - 1.2815515655446004).abs() < 0.1, "{pred}");

        // and within optimizer tolerance of the empirical quantile
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let empirical = sorted[(0.9 * n as f64) as usize];
        assert!((pred - empirical).abs() < 0.03, "{pred} vs {empirical}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let mut r = rng(11);
        let x: Array2<f64> = Array2::from_shape_fn((64, 2), |_| r.random_range(-1.0..1.0));
        let y = x.map_axis(Axis(1), |row| (row[0] * 3.0).sin() + row[1]).insert_axis(Axis(1));
        let run = || {
            let p = MlpParams::init(&[2, 8, 1], Activation::Tanh, 1.0, &mut rng(12)).unwrap();
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 8,
                dropout_rate: 0.2,
                seed: 13,
                ..TrainConfig::default()
            };
            train(p, x.view(), y.view(), &LossKind::Mse, &cfg).unwrap().0
        };
        let a = run();
        let b = run();
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            for (u, v) in wa.iter().zip(wb.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let x = Array2::from_elem((8, 1), 1.0);
        let y = Array2::from_elem((8, 1), f64::INFINITY);
        let p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let err = train(p, x.view(), y.view(), &LossKind::Mse, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { last_finite_epoch: None, .. }));
    }

    #[test]
    fn train_rejects_empty_and_mismatched_data() {
        let p = MlpParams::zeros(&[1, 1], Activation::Tanh).unwrap();
        let x = Array2::<f64>::zeros((0, 1));
        assert!(train(p.clone(), x.view(), x.view(), &LossKind::Mse, &TrainConfig::default()).is_err());
        let x = Array2::<f64>::zeros((3, 1));
        let y = Array2::<f64>::zeros((3, 2));
        assert!(train(p, x.view(), y.view(), &LossKind::Mse, &TrainConfig::default()).is_err());
    }
}
