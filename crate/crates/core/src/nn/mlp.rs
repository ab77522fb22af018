use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{sigmoid, Tape, Var};
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`.
    pub weight: Tensor,
    /// `1 × out`.
    pub bias: Tensor,
}

/// Fully connected network with ReLU hidden layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    #[serde(default)]
    pub output: Activation,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation from a seeded stream.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Tensor::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..=bound));
                let bias = Tensor::from_fn(1, w[1], |_, _| rng.random_range(-bound..=bound));
                Dense { weight, bias }
            })
            .collect();
        Mlp {
            layers,
            output: Activation::Identity,
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let mut m = Self::new(widths, 0);
        m.layers.iter_mut().for_each(|l| {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        });
        m
    }

    pub fn with_output(mut self, output: Activation) -> Self {
        self.output = output;
        self
    }

    /// Zeroes the final layer so the network outputs exactly zero (under
    /// identity output) while hidden layers keep their random init.
    pub fn zero_last_layer(mut self) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
        self
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_width()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Registers weights and biases as tape parameters.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Registers weights and biases as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Forward pass of `x (n × in)` using vars from [`Mlp::bind`].
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, NnError> {
        let [_, cols] = tape.shape(x);
        if cols != self.in_width() {
            return Err(NnError::DimensionMismatch {
                expected: vec![self.in_width()],
                found: vec![cols],
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (li, pair) in vars.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            h = tape.add_row(z, pair[1])?;
            if li < last {
                h = tape.relu(h);
            }
        }
        Ok(match self.output {
            Activation::Identity => h,
            Activation::Relu => tape.relu(h),
            Activation::Sigmoid => tape.sigmoid(h),
        })
    }

    /// Plain forward pass of `x (n × in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.cols() != self.in_width() {
            return Err(NnError::DimensionMismatch {
                expected: vec![self.in_width()],
                found: vec![x.cols()],
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?;
            for i in 0..h.rows() {
                for (o, b) in h.row_slice_mut(i).iter_mut().zip(l.bias.data()) {
                    *o += b;
                }
            }
            if li < last {
                h = h.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        Ok(match self.output {
            Activation::Identity => h,
            Activation::Relu => h.map(|v| v.max(0.0)),
            Activation::Sigmoid => h.map(sigmoid),
        })
    }
}
