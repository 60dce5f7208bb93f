//! Loss layer: supervised/unsupervised objectives, the pluggable
//! SSL-algorithm interface, and the distillation criteria.
//!
//! All losses are built as graph nodes from *detached* pseudo targets, so
//! gradients never flow into the weak-view branch that generated them.
//! Batched values equal the mean of per-sample recomputation by construction;
//! the tests pin that against independent scalar oracles.

mod fixmatch;

pub use fixmatch::{DeFixMatch, FixMatch};

use crate::autodiff::{Graph, NodeId};
use crate::dataset::TaskMode;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Teacher/student objective weights (λ_U, λ_D).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_d: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_u < 0.0 || self.lambda_d < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillationCriterion {
    Mse,
    Mae,
    Cosine,
}

/// Who produced a pseudo batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoSource {
    Teacher,
    SelfModel,
}

/// Per-sample (single-label) or per sample-class (multi-label) loss gates.
#[derive(Debug, Clone, PartialEq)]
pub enum PseudoWeights {
    PerSample(Array1<f64>),
    PerSampleClass(Array2<f64>),
}

impl PseudoWeights {
    pub fn all_in_unit(&self) -> bool {
        match self {
            PseudoWeights::PerSample(a) => a.iter().all(|&v| (0.0..=1.0).contains(&v)),
            PseudoWeights::PerSampleClass(a) => a.iter().all(|&v| (0.0..=1.0).contains(&v)),
        }
    }

    /// Fraction of slots with weight > 0.
    pub fn pass_fraction(&self) -> f64 {
        let (passing, total) = match self {
            PseudoWeights::PerSample(a) => (a.iter().filter(|&&v| v > 0.0).count(), a.len()),
            PseudoWeights::PerSampleClass(a) => (a.iter().filter(|&&v| v > 0.0).count(), a.len()),
        };
        if total == 0 {
            0.0
        } else {
            passing as f64 / total as f64
        }
    }
}

/// Targets plus weights for one unlabeled (or debiased labeled) batch.
/// Targets are dense `[n, num_classes]` rows: one-hot (or soft) distributions
/// in single-label mode, per-class {0,1} decisions in multi-label mode.
#[derive(Debug, Clone)]
pub struct PseudoBatch {
    pub targets: Array2<f64>,
    pub weights: PseudoWeights,
    pub source: PseudoSource,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }
}

/// Everything an algorithm may consume to build extra loss terms (labeled
/// views for debiasing, in particular). Logit nodes live in `graph`.
pub struct ExtraLossInputs<'a> {
    /// Detached weak-view logits of the labeled batch from the pseudo-label
    /// source model (teacher in cross mode, self otherwise).
    pub labeled_weak_logits: &'a Array2<f64>,
    /// Strong-view logits of the labeled batch for the model being trained.
    pub labeled_strong_logits: Option<NodeId>,
    pub task: TaskMode,
}

/// A FixMatch-family SSL algorithm: weighting function α, pseudo-label
/// generator, per-sample criteria, and any extra loss terms. Implementations
/// must keep α in [0, 1].
pub trait SslAlgorithm: Send + Sync {
    fn name(&self) -> &str;

    /// λ_U proposed by the underlying algorithm.
    fn default_lambda_u(&self) -> f64 {
        1.0
    }

    /// Whether batches must carry strong views of labeled samples.
    fn needs_labeled_strong(&self) -> bool {
        false
    }

    /// Targets and α from detached weak-view logits.
    fn pseudo_labels(&self, weak_logits: &Array2<f64>, task: TaskMode) -> PseudoBatch;

    /// ℓ_L averaged over the batch.
    fn supervised_loss(
        &self,
        g: &mut Graph,
        logits: NodeId,
        targets: &Array2<f64>,
        task: TaskMode,
    ) -> Result<NodeId> {
        supervised_loss(g, logits, targets, task)
    }

    /// (1/n)·Σ α·ℓ_U against the pseudo targets.
    fn unsupervised_loss(
        &self,
        g: &mut Graph,
        pseudo: &PseudoBatch,
        strong_logits: NodeId,
        task: TaskMode,
    ) -> Result<NodeId> {
        unsupervised_loss(g, pseudo, strong_logits, task)
    }

    /// Named extra terms added to the total with weight λ_U.
    fn extra_losses(
        &self,
        _g: &mut Graph,
        _inputs: &ExtraLossInputs<'_>,
    ) -> Result<Vec<(String, NodeId)>> {
        Ok(Vec::new())
    }
}

/// Instantiate an algorithm from its config name.
pub fn algorithm_by_name(name: &str, tau: f64) -> Result<Box<dyn SslAlgorithm>> {
    match name {
        "fixmatch" => Ok(Box::new(FixMatch::new(tau)?)),
        "defixmatch" => Ok(Box::new(DeFixMatch::new(tau)?)),
        other => Err(Error::InvalidConfig(format!(
            "unknown SSL algorithm {other:?} (available: fixmatch, defixmatch)"
        ))),
    }
}

/// Mean supervised loss: cross-entropy over softmax (single-label) or mean
/// per-class BCE over sigmoids (multi-label). Targets are dense rows.
pub fn supervised_loss(
    g: &mut Graph,
    logits: NodeId,
    targets: &Array2<f64>,
    task: TaskMode,
) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if targets.nrows() == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if shape != [targets.nrows(), targets.ncols()] {
        return Err(Error::ShapeMismatch(format!(
            "logits {shape:?} vs targets {:?}",
            targets.shape()
        )));
    }
    Ok(match task {
        TaskMode::SingleLabel => {
            let rows = cross_entropy_rows(g, logits, targets);
            g.mean_all(rows)
        }
        TaskMode::MultiLabel => {
            let elems = g.bce_with_logits(logits, targets.clone().into_dyn());
            g.mean_all(elems)
        }
    })
}

/// α-weighted consistency loss normalized by the full batch size:
/// `(1/n)·Σ α_i·ℓ_U` (single-label) or `(1/(n·K))·Σ α_ic·ℓ_ic` (multi-label).
/// Exactly zero when every weight is zero. The same arithmetic serves
/// self-training (both predictions from one model) and cross-model training
/// (teacher pseudo targets, student strong predictions): the pseudo batch is
/// detached data either way, so gradients reach only `strong_logits`.
pub fn unsupervised_loss(
    g: &mut Graph,
    pseudo: &PseudoBatch,
    strong_logits: NodeId,
    task: TaskMode,
) -> Result<NodeId> {
    let shape = g.value(strong_logits).shape().to_vec();
    if shape != [pseudo.targets.nrows(), pseudo.targets.ncols()] {
        return Err(Error::ShapeMismatch(format!(
            "strong logits {shape:?} vs pseudo targets {:?}",
            pseudo.targets.shape()
        )));
    }
    let n = pseudo.len() as f64;
    Ok(match (task, &pseudo.weights) {
        (TaskMode::SingleLabel, PseudoWeights::PerSample(alpha)) => {
            let rows = cross_entropy_rows(g, strong_logits, &pseudo.targets);
            let weighted = g.mul_const(rows, alpha.clone().into_dyn());
            let total = g.sum_all(weighted);
            g.scale(total, 1.0 / n)
        }
        (TaskMode::MultiLabel, PseudoWeights::PerSampleClass(alpha)) => {
            let k = pseudo.targets.ncols() as f64;
            let elems = g.bce_with_logits(strong_logits, pseudo.targets.clone().into_dyn());
            let weighted = g.mul_const(elems, alpha.clone().into_dyn());
            let total = g.sum_all(weighted);
            g.scale(total, 1.0 / (n * k))
        }
        _ => {
            return Err(Error::ShapeMismatch(
                "pseudo weight kind does not match task mode".into(),
            ))
        }
    })
}

/// Per-row cross-entropy of dense target rows against log-softmax logits.
fn cross_entropy_rows(g: &mut Graph, logits: NodeId, targets: &Array2<f64>) -> NodeId {
    let logp = g.log_softmax_last(logits);
    let picked = g.mul_const(logp, targets.clone().into_dyn());
    let summed = g.sum_axis_last(picked);
    g.scale(summed, -1.0)
}

/// Distillation loss between the teacher's metatoken embeddings and the
/// student's distillation-token embeddings, mean over samples and dimensions.
/// Gradient stopping is the caller's contract: pass a detached teacher node
/// to train only the student.
pub fn distillation_loss(
    g: &mut Graph,
    teacher_embedding: NodeId,
    student_embedding: NodeId,
    criterion: DistillationCriterion,
) -> Result<NodeId> {
    let ts = g.value(teacher_embedding).shape().to_vec();
    let ss = g.value(student_embedding).shape().to_vec();
    if ts != ss {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths differ: {ts:?} vs {ss:?}"
        )));
    }
    Ok(match criterion {
        DistillationCriterion::Mse => {
            let d = g.sub(student_embedding, teacher_embedding);
            let sq = g.mul(d, d);
            g.mean_all(sq)
        }
        DistillationCriterion::Mae => {
            let d = g.sub(student_embedding, teacher_embedding);
            let a = g.abs(d);
            g.mean_all(a)
        }
        DistillationCriterion::Cosine => {
            // 1 − cosine similarity, averaged over rows; in [0, 2].
            let c = g.cosine_rows(student_embedding, teacher_embedding);
            let m = g.mean_all(c);
            g.affine(m, -1.0, 1.0)
        }
    })
}

/// Named scalar loss parts entering a total objective.
pub struct LossParts {
    pub supervised: NodeId,
    pub unsupervised: Option<NodeId>,
    pub distillation: Option<NodeId>,
    /// Extra algorithm terms, combined with weight λ_U.
    pub extras: Vec<(String, NodeId)>,
}

/// Total objective: `L_L + λ_U·(L_U + Σ extras) + λ_D·L_D`.
///
/// Zero weights skip their terms structurally, so λ_D = 0 rebuilds the
/// distillation-free objective bit for bit (and λ_U = λ_D = 0 the
/// supervised-only one).
pub fn total_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights) -> NodeId {
    let mut total = parts.supervised;
    if weights.lambda_u > 0.0 {
        let mut unsup: Option<NodeId> = parts.unsupervised;
        for (_, extra) in &parts.extras {
            unsup = Some(match unsup {
                Some(u) => g.add(u, *extra),
                None => *extra,
            });
        }
        if let Some(u) = unsup {
            let weighted = g.scale(u, weights.lambda_u);
            total = g.add(total, weighted);
        }
    }
    if weights.lambda_d > 0.0 {
        if let Some(d) = parts.distillation {
            let weighted = g.scale(d, weights.lambda_d);
            total = g.add(total, weighted);
        }
    }
    total
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Independent scalar re-computations used by tests only.

    use ndarray::{Array1, Array2};

    pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / z).collect()
    }

    pub fn ce_row(logits: &[f64], targets: &[f64]) -> f64 {
        let p = softmax_row(logits);
        -targets
            .iter()
            .zip(&p)
            .map(|(&t, &q)| if t == 0.0 { 0.0 } else { t * q.max(1e-300).ln() })
            .sum::<f64>()
    }

    pub fn bce_elem(logit: f64, target: f64) -> f64 {
        let p = 1.0 / (1.0 + (-logit).exp());
        -(target * p.max(1e-300).ln() + (1.0 - target) * (1.0 - p).max(1e-300).ln())
    }

    pub fn supervised_single(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let n = logits.nrows();
        (0..n)
            .map(|i| ce_row(logits.row(i).as_slice().unwrap(), targets.row(i).as_slice().unwrap()))
            .sum::<f64>()
            / n as f64
    }

    pub fn supervised_multi(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let (n, k) = logits.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for c in 0..k {
                acc += bce_elem(logits[[i, c]], targets[[i, c]]);
            }
        }
        acc / (n * k) as f64
    }

    pub fn unsupervised_single(
        logits: &Array2<f64>,
        targets: &Array2<f64>,
        alpha: &Array1<f64>,
    ) -> f64 {
        let n = logits.nrows();
        (0..n)
            .map(|i| {
                alpha[i]
                    * ce_row(
                        logits.row(i).as_slice().unwrap(),
                        targets.row(i).as_slice().unwrap(),
                    )
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn unsupervised_multi(
        logits: &Array2<f64>,
        targets: &Array2<f64>,
        alpha: &Array2<f64>,
    ) -> f64 {
        let (n, k) = logits.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for c in 0..k {
                acc += alpha[[i, c]] * bce_elem(logits[[i, c]], targets[[i, c]]);
            }
        }
        acc / (n * k) as f64
    }

    pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y) * (x - y);
        }
        acc / a.len() as f64
    }

    pub fn mae(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    pub fn one_minus_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = a.nrows();
        let mut acc = 0.0;
        for i in 0..n {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..a.ncols() {
                dot += a[[i, j]] * b[[i, j]];
                na += a[[i, j]] * a[[i, j]];
                nb += b[[i, j]] * b[[i, j]];
            }
            acc += dot / (na.sqrt() * nb.sqrt()).max(1e-12);
        }
        1.0 - acc / n as f64
    }
}
