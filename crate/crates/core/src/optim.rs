//! RMSprop optimizer.

use crate::autodiff::Tape;
use crate::params::{LeafMap, ParamStore, Payload};

/// Per-parameter running mean-square accumulators, one per learnable
/// tensor, kept in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    acc: Vec<(String, Vec<f64>)>,
}

impl RmsProp {
    pub fn new(store: &ParamStore) -> RmsProp {
        let acc = store
            .entries()
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::Param(t) => Some((e.name.clone(), vec![0.0; t.numel()])),
                Payload::Stats(_) => None,
            })
            .collect();
        RmsProp { acc }
    }

    /// Applies one update from the gradients accumulated on `tape` for the
    /// leaves in `leaves`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        tape: &Tape,
        leaves: &LeafMap,
        learning_rate: f64,
        decay: f64,
        epsilon: f64,
    ) {
        for (name, acc) in self.acc.iter_mut() {
            match tape.grad(leaves.get(name)) {
                Some(grad) => {
                    let param = store.param_mut(name);
                    rmsprop_update(param.data_mut(), grad, acc, learning_rate, decay, epsilon);
                }
                // Zero gradient: the parameter holds, the accumulator decays.
                None => {
                    for a in acc.iter_mut() {
                        *a *= decay;
                    }
                }
            }
        }
    }
}

/// One RMSprop update on a flat parameter slice:
/// `acc <- decay * acc + (1 - decay) * g^2; p <- p - lr * g / (sqrt(acc) + eps)`.
pub fn rmsprop_update(
    param: &mut [f64],
    grad: &[f64],
    acc: &mut [f64],
    learning_rate: f64,
    decay: f64,
    epsilon: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), acc.len());
    for i in 0..param.len() {
        let g = grad[i];
        acc[i] = decay * acc[i] + (1.0 - decay) * g * g;
        param[i] -= learning_rate * g / (acc[i].sqrt() + epsilon);
    }
}
