//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ParamSnapshot;
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied decoupled, and only to `.weight` matrices — biases, norm
    /// parameters, tokens, and position embeddings do not decay.
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment estimates, aligned with a snapshot's tensor order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSnapshot) -> Self {
        AdamState {
            m: params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One update. `grads` is aligned with the snapshot order; `None` entries
/// (parameters unreached by the loss) count as zero gradient.
pub fn adam_step(
    hyper: &AdamHyper,
    state: &mut AdamState,
    params: &mut ParamSnapshot,
    grads: &[Option<ArrayD<f64>>],
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (i, grad) in grads.iter().enumerate() {
        let name_decays = decays(params.by_index(i).0);
        let p = params.by_index_mut(i);
        let zero;
        let g = match grad {
            Some(g) => g,
            None => {
                zero = ArrayD::zeros(p.raw_dim());
                &zero
            }
        };
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        });
        let wd = if name_decays { hyper.weight_decay } else { 0.0 };
        ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + hyper.eps) + wd * *p);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn snapshot_with(name: &str, value: f64) -> ParamSnapshot {
        let mut p = ParamSnapshot::new();
        p.push(name, ArrayD::from_elem(IxDyn(&[2, 2]), value));
        p
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        // With bias correction, |update| = lr / (1 + eps') on step one.
        let mut params = snapshot_with("x.bias", 1.0);
        let mut state = AdamState::new(&params);
        let grads = vec![Some(ArrayD::from_elem(IxDyn(&[2, 2]), 0.5))];
        adam_step(&AdamHyper::with_weight_decay(0.0), &mut state, &mut params, &grads, 0.1).unwrap();
        let got = params.get("x.bias").unwrap()[[0, 0]];
        assert!((got - (1.0 - 0.1)).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn decay_applies_only_to_weight_matrices() {
        let hyper = AdamHyper::with_weight_decay(0.1);
        let mut weights = snapshot_with("layer.weight", 2.0);
        let mut state = AdamState::new(&weights);
        adam_step(&hyper, &mut state, &mut weights, &[None], 0.5).unwrap();
        assert!((weights.get("layer.weight").unwrap()[[0, 0]] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);

        let mut bias = snapshot_with("layer.bias", 2.0);
        let mut state = AdamState::new(&bias);
        adam_step(&hyper, &mut state, &mut bias, &[None], 0.5).unwrap();
        assert_eq!(bias.get("layer.bias").unwrap()[[0, 0]], 2.0);
    }
}
