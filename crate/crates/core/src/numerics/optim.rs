use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything exposing its parameters for optimizers and gradient checks.
pub trait HasParameters {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::param(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Adam or plain SGD. Moments are keyed by parameter name, so the update is
/// independent of the order in which parameters are handed over.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and zeroes the gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter `{}`",
                    p.name
                )));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let lr = self.learning_rate;
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                    p.zero_grad();
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
                for p in params.iter_mut() {
                    let (rows, cols) = p.value.shape();
                    let (m, v) = self
                        .moments
                        .entry(p.name.clone())
                        .or_insert_with(|| (Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)));
                    if m.shape() != (rows, cols) {
                        return Err(Error::dim(format!(
                            "moment shape for `{}` changed from {:?} to {:?}",
                            p.name,
                            m.shape(),
                            (rows, cols)
                        )));
                    }
                    let grads = p.grad.data();
                    let values = p.value.data_mut();
                    for (((x, g), mi), vi) in values
                        .iter_mut()
                        .zip(grads)
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *x -= lr * mhat / (vhat.sqrt() + eps);
                    }
                    p.zero_grad();
                }
            }
        }
        Ok(())
    }
}
