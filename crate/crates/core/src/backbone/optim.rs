use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{param_update, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::config(format!("optimizer {other:?} (expected sgd or adam)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

/// Stateful first-order optimizer.
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd,
    Adam {
        m: Option<Params<T>>,
        v: Option<Params<T>>,
        step: i32,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam {
                m: None,
                v: None,
                step: 0,
            },
        }
    }

    /// Returns the updated parameters; `params` is left untouched.
    pub fn step(&mut self, params: &Params<T>, grads: &Params<T>, lr: T) -> Result<Params<T>> {
        match self {
            Self::Sgd => param_update(params, grads, lr),
            Self::Adam { m, v, step } => {
                params.check_aligned(grads)?;
                let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
                let m = m.get_or_insert_with(|| Params::zeros_like(params));
                let v = v.get_or_insert_with(|| Params::zeros_like(params));
                *step += 1;
                let c1 = T::one() - b1.powi(*step);
                let c2 = T::one() - b2.powi(*step);
                let mut out = params.clone();
                for (((p, g), mt), vt) in out
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for (((p, &g), mi), vi) in p.iter_mut().zip(g).zip(mt.iter_mut()).zip(vt.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                Ok(out)
            }
        }
    }
}
