//! Small multilayer perceptrons and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected layer; `weight` is `inputs × outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: vec![vec![0.0; outputs]; inputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights and biases uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut draw = || rng.random_range(-limit..limit);
        let weight = (0..inputs).map(|_| (0..outputs).map(|_| draw()).collect()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.len()
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    fn weight_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.weight)
    }

    fn bias_tensor(&self) -> Tensor {
        Tensor::from_vec(1, self.bias.len(), self.bias.clone()).expect("row")
    }
}

/// Hidden layers use `activation`; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

/// Parameter nodes of one network bound into a graph, weight then bias per layer.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    pub params: Vec<NodeId>,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output.
    /// Hidden layers get Glorot-uniform init; the output layer is zeroed when
    /// `zero_output` is set.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, zero_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i == last && zero_output {
                    Dense::zeros(w[0], w[1])
                } else {
                    Dense::glorot(w[0], w[1], rng)
                }
            })
            .collect();
        Self { activation, layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.inputs() * l.outputs() + l.outputs()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> MlpBinding {
        let mut params = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            params.push(g.input(layer.weight_tensor()));
            params.push(g.input(layer.bias_tensor()));
        }
        MlpBinding { params }
    }

    pub fn apply(&self, g: &mut Graph, binding: &MlpBinding, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = g.affine(h, binding.params[2 * i], binding.params[2 * i + 1]);
            if i < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        h
    }

    /// Plain evaluation of one input row, written without the graph.
    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.bias.clone();
            for (xi, wrow) in h.iter().zip(&layer.weight) {
                for (o, w) in out.iter_mut().zip(wrow) {
                    *o += xi * w;
                }
            }
            if i < last {
                for o in out.iter_mut() {
                    *o = match self.activation {
                        Activation::Tanh => o.tanh(),
                        Activation::Relu => o.max(0.0),
                    };
                }
            }
            h = out;
        }
        h
    }

    /// Visits every parameter block in binding order (weight rows, then bias, per layer).
    pub fn visit_params_mut(&mut self, mut visit: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            for row in &mut layer.weight {
                visit(row);
            }
            visit(&mut layer.bias);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn begin(&mut self, parameter_count: usize) {
        if self.first_moment.len() != parameter_count {
            self.first_moment = vec![0.0; parameter_count];
            self.second_moment = vec![0.0; parameter_count];
        }
        self.step += 1;
    }

    /// Updates the parameters at flat offset `offset`.
    pub fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[offset + k];
            let v = &mut self.second_moment[offset + k];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}
