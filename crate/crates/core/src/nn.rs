//! Layers, initialization, MLP composition and the SGD optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How a weight matrix is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Gaussian { std: f64 },
    Zeros,
}

impl InitSpec {
    fn sample<T: Scalar>(self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
        match self {
            InitSpec::Zeros => Ok(vec![T::zero(); n]),
            InitSpec::Gaussian { std } => {
                if !(std.is_finite() && std >= 0.0) {
                    return Err(Error::arg(format!("gaussian std must be >= 0, got {std}")));
                }
                let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
                Ok((0..n).map(|_| T::lit(normal.sample(rng))).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Anything that owns trainable tensors, in a stable order.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Tensor<T>,
    /// `out`
    pub bias: Tensor<T>,
}

/// Fully connected network: `act(…act(x W₁ + b₁)…) W_L + b_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// An [`Mlp`] whose parameters have been recorded on a graph.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub(crate) layers: Vec<(Var, Var)>,
    hidden_activation: Activation,
    output_activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    /// Draws every hidden weight matrix from `hidden_init` and the last one
    /// from `final_init`. Biases start at zero.
    pub fn init(dims: &[usize], hidden_init: InitSpec, final_init: InitSpec, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::arg(format!("an MLP needs at least 2 dims, got {dims:?}")));
        }
        if dims.contains(&0) {
            return Err(Error::arg(format!("MLP dims must be positive, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let spec = if i == last { final_init } else { hidden_init };
                let weight = Tensor::new(vec![w[0], w[1]], spec.sample(w[0] * w[1], &mut rng)?)?;
                let bias = Tensor::zeros(vec![w[1]])?;
                Ok(Linear {
                    weight: weight.requiring_grad(),
                    bias: bias.requiring_grad(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        })
    }

    /// Wraps explicit layers; consecutive dimensions must chain.
    pub fn from_layers(layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("an MLP needs at least one layer"));
        }
        for l in &layers {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.weight.shape()[1]] {
                return Err(Error::Dimension {
                    op: "mlp layer",
                    lhs: l.weight.shape().to_vec(),
                    rhs: l.bias.shape().to_vec(),
                });
            }
        }
        for w in layers.windows(2) {
            if w[0].weight.shape()[1] != w[1].weight.shape()[0] {
                return Err(Error::Dimension {
                    op: "mlp chain",
                    lhs: w[0].weight.shape().to_vec(),
                    rhs: w[1].weight.shape().to_vec(),
                });
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Linear {
                weight: l.weight.requiring_grad(),
                bias: l.bias.requiring_grad(),
            })
            .collect();
        Ok(Self {
            layers,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        })
    }

    pub fn with_hidden_activation(mut self, act: Activation) -> Self {
        self.hidden_activation = act;
        self
    }

    pub fn with_output_activation(mut self, act: Activation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[1]
    }

    pub fn bind(&self, g: &Graph<T>) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (g.leaf(&l.weight), g.leaf(&l.bias)))
                .collect(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        }
    }

    /// Copies leaf gradients from `g` into the parameter tensors. Parameters
    /// the loss never touched receive an explicit zero gradient.
    pub fn absorb_grads(&mut self, g: &Graph<T>, vars: &MlpVars) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&vars.layers) {
            for (tensor, var) in [(&mut layer.weight, w), (&mut layer.bias, b)] {
                let grad = g.grad(var).unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
                tensor.accumulate_grad(&grad)?;
            }
        }
        Ok(())
    }

    /// Gradient-free evaluation on an `n × in` matrix.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let vars = self.bind(&g);
        let out = vars.forward(&g, g.constant(x))?;
        Ok(g.tensor(out))
    }
}

impl MlpVars {
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let in_dim = g.shape(self.layers[0].0)[0];
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != in_dim {
            return Err(Error::Dimension {
                op: "mlp forward",
                lhs: xs,
                rhs: vec![in_dim],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.add_row(g.matmul(h, w)?, b)?;
            let act = if i == last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            h = act.apply(g, h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(lr.is_finite() && lr > T::zero()) {
            return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::arg(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay.is_finite() && weight_decay >= T::zero()) {
            return Err(Error::arg(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Defaults for training: momentum 0.9, weight decay 5e-4.
    pub fn with_lr(lr: T) -> Result<Self> {
        Self::new(lr, T::lit(0.9), T::lit(0.0005))
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

/// `v ← momentum·v + g + weight_decay·w`, then `w ← w − lr·v`.
///
/// Velocity buffers are allocated on the first call and tied to the order
/// of `params` from then on.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], state: &mut SgdState<T>) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.velocity[i].len() != p.numel() {
            return Err(Error::State(format!(
                "velocity {i} has {} entries, parameter has shape {:?}",
                state.velocity[i].len(),
                p.shape()
            )));
        }
        if p.grad().is_none() {
            return Err(Error::State(format!(
                "parameter {i} (shape {:?}) has no gradient",
                p.shape()
            )));
        }
    }
    let (lr, mom, wd) = (state.lr, state.momentum, state.weight_decay);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let grad = p.grad().expect("checked above").to_vec();
        for ((w, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = mom * *vel + g + wd * *w;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

/// Gradient-reversal ramp `2 / (1 + exp(−γ·p)) − 1` for training progress `p`.
pub fn lambda_schedule(progress: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::arg(format!("progress must lie in [0, 1], got {progress}")));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::arg(format!("gamma must be positive, got {gamma}")));
    }
    Ok(2.0 / (1.0 + (-gamma * progress).exp()) - 1.0)
}
