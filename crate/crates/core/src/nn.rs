//! Fully-connected networks and the Adam optimizer.
//!
//! Parameters live in plain vectors ([`Param`]) so models are `Send` and
//! serializable. Each forward pass binds them into fresh leaf tensors with
//! [`Mlp::bind`]; after `backward` the gradients are read back with
//! [`BoundMlp::grads`] and handed to [`AdamState::step`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Slope used for leaky ReLU throughout the toolkit.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Identity,
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: &[usize], activation: Activation, final_activation: FinalActivation) -> Self {
        MlpSpec {
            layer_widths: layer_widths.to_vec(),
            activation,
            final_activation,
        }
    }

    /// Leaky-ReLU hidden layers with identity output, the default shape for
    /// every network in the pipelines.
    pub fn leaky(layer_widths: &[usize]) -> Self {
        MlpSpec::new(
            layer_widths,
            Activation::LeakyRelu(LEAKY_SLOPE),
            FinalActivation::Identity,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config("layer_widths", "need at least two widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("layer_widths", "widths must be positive"));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::config("activation", format!("leaky slope {s} not in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; shape.iter().product()],
        }
    }
}

/// Parameters of a multilayer perceptron: `[W0, b0, W1, b1, ...]` with
/// `W_i` shaped `[in, out]` (inputs are row vectors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Param>,
}

impl Mlp {
    /// He-uniform weights for (leaky) ReLU layers, Xavier-uniform otherwise;
    /// zero biases. A pure function of `(spec, seed)`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
        spec.validate()?;
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        let widths = &spec.layer_widths;
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for (layer, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let hidden = layer + 2 < widths.len();
            let he = hidden && matches!(spec.activation, Activation::Relu | Activation::LeakyRelu(_));
            let limit = if he {
                (6.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            params.push(Param {
                shape: vec![fan_in, fan_out],
                value: w,
            });
            params.push(Param::zeros(&[fan_out]));
        }
        Ok(Mlp {
            spec: spec.clone(),
            params,
        })
    }

    /// Leaf tensors that collect gradients.
    pub fn bind(&self) -> BoundMlp {
        self.bind_with(true)
    }

    /// Leaf tensors that are held fixed.
    pub fn bind_frozen(&self) -> BoundMlp {
        self.bind_with(false)
    }

    fn bind_with(&self, trainable: bool) -> BoundMlp {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    Tensor::param(&p.shape, p.value.clone())
                } else {
                    Tensor::new(&p.shape, p.value.clone())
                }
                .expect("param shape matches its values")
            })
            .collect();
        BoundMlp {
            spec: self.spec.clone(),
            tensors,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Evaluation-only forward pass on a plain row-major matrix.
    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let input = Tensor::matrix(rows, self.spec.input_width(), x.to_vec())?;
        Ok(self.bind_frozen().forward(&input)?.values().to_vec())
    }
}

pub struct BoundMlp {
    spec: MlpSpec,
    tensors: Vec<Tensor>,
}

impl BoundMlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(&self.spec, &self.tensors, x)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradients per parameter, zero where none reached the leaf.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Forward pass of an MLP given bound parameter tensors.
pub fn mlp_forward(spec: &MlpSpec, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[1] != spec.input_width() {
        return Err(Error::dim(
            "mlp_forward",
            format!(
                "input shape {:?} does not match first width {}",
                x.shape(),
                spec.input_width()
            ),
        ));
    }
    let layers = spec.layer_widths.len() - 1;
    if params.len() != 2 * layers {
        return Err(Error::dim(
            "mlp_forward",
            format!("expected {} parameter tensors, got {}", 2 * layers, params.len()),
        ));
    }
    let mut h = x.clone();
    for layer in 0..layers {
        h = h.matmul(&params[2 * layer])?.add(&params[2 * layer + 1])?;
        if layer + 1 < layers {
            h = match spec.activation {
                Activation::Relu => h.relu(),
                Activation::LeakyRelu(s) => h.leaky_relu(s),
                Activation::Tanh => h.tanh(),
                Activation::Identity => h,
            };
        }
    }
    Ok(match spec.final_activation {
        FinalActivation::Identity => h,
        FinalActivation::Softmax => h.softmax(1)?,
        FinalActivation::Sigmoid => h.sigmoid(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Param], lr: f64) -> Self {
        AdamState::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Param], lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0);
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} params but {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.len() != g.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param of {} values, gradient of {}", p.value.len(), g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    iteration: self.step_count as usize,
                    detail: "non-finite gradient".into(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [Param], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

/// Network plus its optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainable {
    pub net: Mlp,
    pub opt: AdamState,
}

impl Trainable {
    pub fn new(spec: &MlpSpec, seed: u64, lr: f64) -> Result<Self> {
        let net = Mlp::init(spec, seed)?;
        let opt = AdamState::new(&net.params, lr);
        Ok(Trainable { net, opt })
    }

    pub fn apply(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        self.opt.step(&mut self.net.params, grads)
    }
}
