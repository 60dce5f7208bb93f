//! FixMatch and DeFixMatch instantiations of the algorithm interface.

use super::{
    unsupervised_loss, ExtraLossInputs, PseudoBatch, PseudoSource, PseudoWeights, SslAlgorithm,
};
use crate::autodiff::{Graph, NodeId};
use crate::dataset::TaskMode;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn validate_tau(tau: f64) -> Result<f64> {
    if !(tau > 0.5 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence threshold tau = {tau} outside (0.5, 1]"
        )));
    }
    Ok(tau)
}

/// Confidence-thresholded hard pseudo-labeling.
///
/// Single-label: the target is the argmax class (ties resolved to the lowest
/// index) and α = 1 iff the max softmax probability is ≥ τ. Multi-label, per
/// class: the target is [p ≥ 0.5] (0.5 counts as positive) and α = 1 iff
/// max(p, 1−p) ≥ τ. Both thresholds use the ≥ convention, so a confidence
/// exactly at τ passes; τ = 1 masks everything reachable with finite logits.
#[derive(Debug, Clone)]
pub struct FixMatch {
    tau: f64,
}

impl FixMatch {
    pub fn new(tau: f64) -> Result<Self> {
        Ok(FixMatch { tau: validate_tau(tau)? })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// The shared thresholding rule (also reused by DeFixMatch).
pub(crate) fn threshold_pseudo(
    weak_logits: &Array2<f64>,
    tau: f64,
    task: TaskMode,
    source: PseudoSource,
) -> PseudoBatch {
    let (n, k) = weak_logits.dim();
    match task {
        TaskMode::SingleLabel => {
            let probs = softmax_rows(weak_logits);
            let mut targets = Array2::<f64>::zeros((n, k));
            let mut alpha = Array1::<f64>::zeros(n);
            for i in 0..n {
                let row = probs.row(i);
                let mut best = 0usize;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                targets[[i, best]] = 1.0;
                alpha[i] = f64::from(row[best] >= tau);
            }
            PseudoBatch {
                targets,
                weights: PseudoWeights::PerSample(alpha),
                source,
            }
        }
        TaskMode::MultiLabel => {
            let mut targets = Array2::<f64>::zeros((n, k));
            let mut alpha = Array2::<f64>::zeros((n, k));
            for i in 0..n {
                for c in 0..k {
                    let p = sigmoid(weak_logits[[i, c]]);
                    targets[[i, c]] = f64::from(p >= 0.5);
                    alpha[[i, c]] = f64::from(p.max(1.0 - p) >= tau);
                }
            }
            PseudoBatch {
                targets,
                weights: PseudoWeights::PerSampleClass(alpha),
                source,
            }
        }
    }
}

impl SslAlgorithm for FixMatch {
    fn name(&self) -> &str {
        "fixmatch"
    }

    fn pseudo_labels(&self, weak_logits: &Array2<f64>, task: TaskMode) -> PseudoBatch {
        threshold_pseudo(weak_logits, self.tau, task, PseudoSource::SelfModel)
    }
}

/// FixMatch plus the debiasing term: the unsupervised-loss arithmetic applied
/// to the labeled batch with its sign flipped. The term is attached to
/// whichever model the algorithm drives (teacher and student symmetrically)
/// and enters the total with weight λ_U like the unsupervised loss it
/// mirrors.
#[derive(Debug, Clone)]
pub struct DeFixMatch {
    tau: f64,
}

impl DeFixMatch {
    pub fn new(tau: f64) -> Result<Self> {
        Ok(DeFixMatch { tau: validate_tau(tau)? })
    }
}

impl SslAlgorithm for DeFixMatch {
    fn name(&self) -> &str {
        "defixmatch"
    }

    fn needs_labeled_strong(&self) -> bool {
        true
    }

    fn pseudo_labels(&self, weak_logits: &Array2<f64>, task: TaskMode) -> PseudoBatch {
        threshold_pseudo(weak_logits, self.tau, task, PseudoSource::SelfModel)
    }

    fn extra_losses(
        &self,
        g: &mut Graph,
        inputs: &ExtraLossInputs<'_>,
    ) -> Result<Vec<(String, NodeId)>> {
        let strong = inputs.labeled_strong_logits.ok_or_else(|| {
            Error::InvalidConfig("debiasing requires strong views of labeled samples".into())
        })?;
        let pseudo = threshold_pseudo(
            inputs.labeled_weak_logits,
            self.tau,
            inputs.task,
            PseudoSource::SelfModel,
        );
        let term = unsupervised_loss(g, &pseudo, strong, inputs.task)?;
        let negated = g.scale(term, -1.0);
        Ok(vec![("debias".to_string(), negated)])
    }
}
