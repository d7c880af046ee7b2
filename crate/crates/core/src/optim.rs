use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer with its per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    let (value, grad) = store.value_and_grad_mut(id);
                    for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = store
                        .ids()
                        .map(|id| vec![0.0; store.value(id).len()])
                        .collect();
                    self.v = self.m.clone();
                }
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((p, g), mi), vi) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
