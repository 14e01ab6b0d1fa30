use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_DECAY: f64 = 0.9;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Adam, OptimizerKind::Sgd, OptimizerKind::RmsProp];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    /// First moment (ADAM only).
    pub first: Vec<T>,
    /// Second moment (ADAM and RMSProp).
    pub second: Vec<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::RmsProp => (Vec::new(), vec![T::zero(); num_params]),
            OptimizerKind::Adam => (vec![T::zero(); num_params], vec![T::zero(); num_params]),
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one update in place. Non-finite gradients abort before any
    /// parameter or accumulator is touched.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::LengthMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some((index, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient {
                index,
                value: g.as_f64(),
            });
        }
        self.step += 1;
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(EPSILON);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::RmsProp => {
                let rho = T::lit(RMSPROP_DECAY);
                let one_minus = T::lit(1.0 - RMSPROP_DECAY);
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    *v = rho * *v + one_minus * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::lit(ADAM_BETA1);
                let b2 = T::lit(ADAM_BETA2);
                let c1 = T::lit(1.0 - ADAM_BETA1);
                let c2 = T::lit(1.0 - ADAM_BETA2);
                let t = self.step as i32;
                let bias1 = T::lit(1.0 - ADAM_BETA1.powi(t));
                let bias2 = T::lit(1.0 - ADAM_BETA2.powi(t));
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = b1 * *m + c1 * g;
                    *v = b2 * *v + c2 * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
