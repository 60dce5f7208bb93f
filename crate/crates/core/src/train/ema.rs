//! Exponential moving average of model parameters, used as the evaluation
//! model.

use crate::error::{Error, Result};
use crate::model::ParamSnapshot;

#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamSnapshot,
}

impl EmaState {
    /// Shadow starts as a copy of the live parameters.
    pub fn new(live: &ParamSnapshot, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidConfig(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(EmaState {
            decay,
            shadow: live.clone(),
        })
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, per tensor.
pub fn ema_update(ema: &mut EmaState, live: &ParamSnapshot) -> Result<()> {
    if !ema.shadow.is_compatible(live) {
        return Err(Error::ShapeMismatch(
            "EMA shadow does not match live parameters".into(),
        ));
    }
    let d = ema.decay;
    for (i, (_, p)) in live.iter().enumerate() {
        let s = ema.shadow.by_index_mut(i);
        ndarray::Zip::from(s).and(p).for_each(|s, &p| {
            *s = d * *s + (1.0 - d) * p;
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn snap(v: f64) -> ParamSnapshot {
        let mut p = ParamSnapshot::new();
        p.push("w", ArrayD::from_elem(IxDyn(&[3]), v));
        p
    }

    #[test]
    fn decay_zero_copies_live() {
        let mut ema = EmaState::new(&snap(0.0), 0.0).unwrap();
        ema_update(&mut ema, &snap(7.0)).unwrap();
        assert_eq!(ema.shadow.get("w").unwrap()[[0]], 7.0);
    }

    #[test]
    fn decay_one_freezes_shadow() {
        let mut ema = EmaState::new(&snap(1.5), 1.0).unwrap();
        for _ in 0..10 {
            ema_update(&mut ema, &snap(-3.0)).unwrap();
        }
        assert_eq!(ema.shadow.get("w").unwrap()[[0]], 1.5);
    }

    #[test]
    fn closed_form_for_frozen_live_params() {
        // shadow_k = p + (s0 - p) * decay^k
        let (s0, p, decay, k) = (2.0, -1.0, 0.999, 100);
        let mut ema = EmaState::new(&snap(s0), decay).unwrap();
        let live = snap(p);
        for _ in 0..k {
            ema_update(&mut ema, &live).unwrap();
        }
        let want = p + (s0 - p) * decay.powi(k);
        let got = ema.shadow.get("w").unwrap()[[0]];
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut ema = EmaState::new(&snap(0.0), 0.5).unwrap();
        let mut other = ParamSnapshot::new();
        other.push("w", ArrayD::from_elem(IxDyn(&[4]), 0.0));
        assert!(ema_update(&mut ema, &other).is_err());
    }
}
