use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParameterRegistry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adamw {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd {
        momentum: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
    Momentum { buf: Vec<f64> },
}

/// Per-parameter optimizer state. State of parameters that leave the
/// trainable set is kept as is and resumes if they return.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: BTreeMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    /// Updates exactly the parameters in `trainable` from their accumulated
    /// gradients. A gradient on any other parameter is a freeze violation.
    pub fn step(&mut self, registry: &mut ParameterRegistry, trainable: &BTreeSet<ParamId>, lr: f64) -> Result<()> {
        for (id, e) in registry.iter() {
            if e.grad.is_some() && !trainable.contains(&id) {
                return Err(Error::FreezeViolation {
                    name: e.name.clone(),
                    epoch: 0,
                });
            }
        }
        for &id in trainable {
            let entry = registry.get_mut(id);
            let grad = entry
                .grad
                .as_ref()
                .ok_or_else(|| Error::contract(format!("`{}` is trainable but has no gradient", entry.name)))?
                .data()
                .to_vec();
            let decay_applies = entry.value.rank() >= 2;
            let w = entry.value.data_mut();
            match self.config {
                OptimizerConfig::Adamw {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let slot = self.state.entry(id).or_insert_with(|| Slot::Adam {
                        m: vec![0.0; w.len()],
                        v: vec![0.0; w.len()],
                        t: 0,
                    });
                    let Slot::Adam { m, v, t } = slot else {
                        unreachable!("optimizer kind is fixed")
                    };
                    *t += 1;
                    let c1 = 1.0 - beta1.powi(*t);
                    let c2 = 1.0 - beta2.powi(*t);
                    let wd = if decay_applies { weight_decay } else { 0.0 };
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        w[i] -= lr * (update + wd * w[i]);
                    }
                }
                OptimizerConfig::Sgd { momentum } => {
                    let slot = self
                        .state
                        .entry(id)
                        .or_insert_with(|| Slot::Momentum { buf: vec![0.0; w.len()] });
                    let Slot::Momentum { buf } = slot else {
                        unreachable!("optimizer kind is fixed")
                    };
                    for i in 0..w.len() {
                        buf[i] = momentum * buf[i] + grad[i];
                        w[i] -= lr * buf[i];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParameterTag;
    use crate::tensor::Tensor;

    fn one_weight(grad: f64) -> (ParameterRegistry, ParamId, ParamId) {
        let mut reg = ParameterRegistry::new();
        let w = reg.register("w", ParameterTag::Head, Tensor::new(vec![1], vec![1.0]).unwrap());
        let f = reg.register("f", ParameterTag::Block(1), Tensor::new(vec![1], vec![3.0]).unwrap());
        reg.get_mut(w).grad = Some(Tensor::new(vec![1], vec![grad]).unwrap());
        (reg, w, f)
    }

    #[test]
    fn sgd_descends() {
        let (mut reg, w, f) = one_weight(0.5);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.0 });
        opt.step(&mut reg, &BTreeSet::from([w]), 0.1).unwrap();
        assert!(reg.get(w).value.data()[0] < 1.0);
        assert_eq!(reg.get(f).value.data()[0].to_bits(), 3f64.to_bits());
        assert!(!opt.has_state(f));
    }

    #[test]
    fn gradient_on_frozen_parameter_fails() {
        let (mut reg, _, f) = one_weight(0.5);
        reg.get_mut(f).grad = Some(Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let ids = BTreeSet::from([ParamId(0)]);
        assert!(matches!(opt.step(&mut reg, &ids, 0.1), Err(Error::FreezeViolation { .. })));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let (mut reg, w, _) = one_weight(2.0);
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.step(&mut reg, &BTreeSet::from([w]), 0.01).unwrap();
        // bias-corrected first step is lr · g/|g|; rank-1 params skip decay
        let after = reg.get(w).value.data()[0];
        assert!((after - (1.0 - 0.01)).abs() < 1e-8, "{after}");
    }
}
