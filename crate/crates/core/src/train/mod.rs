//! Joint single-stage teacher-student optimization.
//!
//! Both models train simultaneously on the same batches. The teacher's
//! update comes from its own losses alone: the step runs one backward pass
//! per model from that model's total loss, so nothing the student computes
//! can perturb the teacher (unless the stop-gradient ablation deliberately
//! lets distillation gradients flow back).

mod checkpoint;
mod ema;
mod optim;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ema::{ema_update, EmaState};
pub use optim::{adam_step, AdamHyper, AdamState};
pub use schedule::lr_at;

use crate::autodiff::{Graph, NodeId};
use crate::config::ExperimentConfig;
use crate::dataset::{
    load_manifest, split_indices, AugmentationPolicy, Batch, BatchConfig, BatchSample,
    BatchStream, GeoTemporal, Label, LoadedDataset, SplitSpec, StreamState, TaskMode,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pseudo_stats, MetricsReport};
use crate::model::{
    forward, init_params, BackboneConfig, Fusion, MetaMask, ModelOutputs, ParamBinding,
    ParamSnapshot, Variant,
};
use crate::ssl::{
    total_loss, ExtraLossInputs, LossParts, LossWeights, PseudoBatch, SslAlgorithm,
};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Everything resolved from an [`ExperimentConfig`] before training: data,
/// splits, backbone configs, the algorithm, and effective loss weights.
pub struct RunSetup {
    pub experiment: ExperimentConfig,
    pub data: LoadedDataset,
    pub train_labeled: Vec<usize>,
    pub train_unlabeled: Vec<usize>,
    pub test: Vec<usize>,
    pub teacher_config: BackboneConfig,
    pub student_config: Option<BackboneConfig>,
    pub algo: Box<dyn SslAlgorithm>,
    pub weights: LossWeights,
    pub policy: AugmentationPolicy,
    pub mask: MetaMask,
    pub config_hash: String,
}

impl RunSetup {
    pub fn is_pair(&self) -> bool {
        self.student_config.is_some()
    }

    pub fn task(&self) -> TaskMode {
        self.teacher_config.task_mode
    }
}

fn backbone_from(
    experiment: &ExperimentConfig,
    data: &LoadedDataset,
    variant: Variant,
    fusion: Fusion,
) -> BackboneConfig {
    let m = &experiment.model;
    BackboneConfig {
        image_size: data.manifest.image_size,
        patch_size: m.patch_size,
        embed_dim: m.embed_dim,
        depth: m.depth,
        num_heads: m.num_heads,
        mlp_ratio: m.mlp_ratio,
        num_classes: data.manifest.num_classes,
        task_mode: data.manifest.task_mode,
        variant,
        fusion,
        day_fill: m.day_fill,
        cyclic_day: m.cyclic_day,
    }
}

/// Load the dataset, derive splits and backbone configs, and resolve the
/// effective loss weights (λ_U from the algorithm unless pinned; λ_D forced
/// to zero by the no-distill switch and in single-model mode).
pub fn prepare(experiment: &ExperimentConfig) -> Result<RunSetup> {
    experiment.validate()?;
    let manifest = load_manifest(&experiment.dataset.dir.join("manifest.csv"))?;
    let data = LoadedDataset::load(manifest)?;

    let n = data.len();
    let n_train = ((experiment.dataset.train_fraction * n as f64).round() as usize).clamp(1, n);
    let train_portion: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n).collect();
    let split = split_indices(
        &data.manifest,
        &train_portion,
        &SplitSpec {
            strategy: experiment.dataset.split,
            seed: experiment.train.seed,
        },
    )?;

    let ab = &experiment.train.ablation;
    let teacher_fusion = if ab.late_fusion { Fusion::Late } else { Fusion::Early };
    let (teacher_config, student_config) = if ab.single_model {
        let fusion = match ab.single_variant {
            Variant::Teacher => teacher_fusion,
            _ => Fusion::None,
        };
        (backbone_from(experiment, &data, ab.single_variant, fusion), None)
    } else {
        (
            backbone_from(experiment, &data, Variant::Teacher, teacher_fusion),
            Some(backbone_from(experiment, &data, Variant::Student, Fusion::None)),
        )
    };
    teacher_config.validate()?;
    if let Some(s) = &student_config {
        s.validate()?;
    }

    let algo = crate::ssl::algorithm_by_name(&experiment.ssl.algorithm, experiment.ssl.tau)?;
    let lambda_u = experiment.train.lambda_u.unwrap_or_else(|| algo.default_lambda_u());
    let lambda_d = if ab.no_distill || ab.single_model {
        0.0
    } else {
        experiment.train.lambda_d
    };
    let weights = LossWeights { lambda_u, lambda_d };
    weights.validate()?;

    let policy = experiment
        .dataset
        .augmentation
        .clone()
        .unwrap_or_default();
    policy.validate()?;
    let mask = MetaMask {
        use_geo: !ab.no_geo,
        use_time: !ab.no_time,
    };

    Ok(RunSetup {
        config_hash: experiment.hash(),
        experiment: experiment.clone(),
        data,
        train_labeled: split.labeled,
        train_unlabeled: split.unlabeled,
        test,
        teacher_config,
        student_config,
        algo,
        weights,
        policy,
        mask,
    })
}

/// One network with its optimizer and EMA tracking.
pub struct ModelSlot {
    pub config: BackboneConfig,
    pub params: ParamSnapshot,
    pub opt: AdamState,
    pub ema: EmaState,
}

impl ModelSlot {
    fn init(config: &BackboneConfig, seed: u64, ema_decay: f64) -> Result<Self> {
        let params = init_params(config, seed)?;
        let opt = AdamState::new(&params);
        let ema = EmaState::new(&params, ema_decay)?;
        Ok(ModelSlot {
            config: config.clone(),
            params,
            opt,
            ema,
        })
    }
}

/// Serializable training position: both parameter sets with their optimizer
/// and EMA state, the data-stream cursors, and the step counter. All
/// randomness is keyed, so this state plus the config reproduces the
/// remaining run bit for bit.
pub struct TrainState {
    pub step: u64,
    pub teacher: ModelSlot,
    pub student: Option<ModelSlot>,
    pub stream: StreamState,
}

pub fn init_state(setup: &RunSetup) -> Result<TrainState> {
    let decay = setup.experiment.train.ema_decay;
    let seed = setup.experiment.train.seed;
    let teacher = ModelSlot::init(&setup.teacher_config, seed, decay)?;
    let student = match &setup.student_config {
        Some(c) => Some(ModelSlot::init(c, seed, decay)?),
        None => None,
    };
    let stream = make_stream(setup)?;
    let state = stream.state();
    Ok(TrainState {
        step: 0,
        teacher,
        student,
        stream: state,
    })
}

fn make_stream<'a>(setup: &'a RunSetup) -> Result<BatchStream<'a>> {
    BatchStream::new(
        &setup.data,
        &setup.policy,
        setup.train_labeled.clone(),
        setup.train_unlabeled.clone(),
        BatchConfig {
            n_l: setup.experiment.train.n_l,
            n_u: setup.experiment.train.n_u,
            labeled_strong: setup.algo.needs_labeled_strong(),
            replacement: setup.experiment.train.replacement,
        },
        setup.experiment.train.seed,
    )
}

/// Loss components of one model for one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSet {
    pub supervised: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unsupervised: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extras: Vec<(String, f64)>,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub teacher: LossSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<LossSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distillation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_quantity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_quality: Option<f64>,
}

fn pack_images(samples: &[BatchSample], strong: bool) -> Result<ArrayD<f64>> {
    let first = samples.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let (h, w, c) = first.weak.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[samples.len(), h, w, c]));
    for (i, s) in samples.iter().enumerate() {
        let img = if strong {
            s.strong
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("strong view missing".into()))?
        } else {
            &s.weak
        };
        out.index_axis_mut(Axis(0), i).assign(&img.view().into_dyn());
    }
    Ok(out)
}

fn metas_of(samples: &[BatchSample]) -> Vec<GeoTemporal> {
    samples.iter().map(|s| s.meta).collect()
}

fn dense_targets(samples: &[BatchSample], num_classes: usize) -> Result<Array2<f64>> {
    let mut t = Array2::<f64>::zeros((samples.len(), num_classes));
    for (i, s) in samples.iter().enumerate() {
        let label = s.label.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("labeled sample {} has no label", s.id))
        })?;
        for (c, v) in label.to_dense(num_classes).into_iter().enumerate() {
            t[[i, c]] = v;
        }
    }
    Ok(t)
}

fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d logits")
        .to_owned()
}

fn check_finite(step: u64, component: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NumericalAbort {
            step,
            component: component.to_string(),
            value,
        });
    }
    Ok(value)
}

struct ModelStepGraph {
    binding: ParamBinding,
    lab_weak: ModelOutputs,
    lab_strong: Option<ModelOutputs>,
    unl_weak: Option<ModelOutputs>,
    unl_strong: Option<ModelOutputs>,
}

#[allow(clippy::too_many_arguments)]
fn model_forwards(
    g: &mut Graph,
    config: &BackboneConfig,
    params: &ParamSnapshot,
    mask: &MetaMask,
    lab_weak_img: NodeId,
    lab_strong_img: Option<NodeId>,
    unl_weak_img: Option<NodeId>,
    unl_strong_img: Option<NodeId>,
    lab_metas: &[GeoTemporal],
    unl_metas: &[GeoTemporal],
) -> Result<ModelStepGraph> {
    let binding = ParamBinding::bind(g, params, true);
    let lab_weak = forward(g, config, params, &binding, lab_weak_img, Some(lab_metas), mask)?;
    let lab_strong = match lab_strong_img {
        Some(img) => Some(forward(g, config, params, &binding, img, Some(lab_metas), mask)?),
        None => None,
    };
    let unl_weak = match unl_weak_img {
        Some(img) => Some(forward(g, config, params, &binding, img, Some(unl_metas), mask)?),
        None => None,
    };
    let unl_strong = match unl_strong_img {
        Some(img) => Some(forward(g, config, params, &binding, img, Some(unl_metas), mask)?),
        None => None,
    };
    Ok(ModelStepGraph {
        binding,
        lab_weak,
        lab_strong,
        unl_weak,
        unl_strong,
    })
}

fn harvest(
    grads: &crate::autodiff::Gradients,
    binding: &ParamBinding,
    len: usize,
) -> Vec<Option<ArrayD<f64>>> {
    (0..len)
        .map(|i| grads.get(binding.node_by_index(i)).cloned())
        .collect()
}

fn add_into(acc: &mut [Option<ArrayD<f64>>], extra: Vec<Option<ArrayD<f64>>>) {
    for (a, e) in acc.iter_mut().zip(extra) {
        match (a.as_mut(), e) {
            (Some(a), Some(e)) => *a += &e,
            (None, Some(e)) => *a = Some(e),
            _ => {}
        }
    }
}

/// One optimizer step for each model on one batch. Returns the step's loss
/// components and pseudo-label statistics.
pub fn train_step(setup: &RunSetup, state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    let step = state.step;
    let train_cfg = &setup.experiment.train;
    let lr = lr_at(step, train_cfg.total_steps, train_cfg.base_lr);
    let task = setup.task();
    let k = setup.teacher_config.num_classes;
    let ab = &train_cfg.ablation;
    let weights = setup.weights;

    let need_unsup = weights.lambda_u > 0.0;
    let need_distill = weights.lambda_d > 0.0 && setup.is_pair();
    let need_unl_weak = need_unsup || need_distill;
    let need_lab_strong = setup.algo.needs_labeled_strong();

    // Pack batch tensors once; both models consume the same views.
    let lab_weak_img = pack_images(&batch.labeled, false)?;
    let lab_strong_img = if need_lab_strong {
        Some(pack_images(&batch.labeled, true)?)
    } else {
        None
    };
    let unl_weak_img = need_unl_weak.then(|| pack_images(&batch.unlabeled, false)).transpose()?;
    let unl_strong_img = need_unsup.then(|| pack_images(&batch.unlabeled, true)).transpose()?;
    let lab_metas = metas_of(&batch.labeled);
    let unl_metas = metas_of(&batch.unlabeled);
    let lab_targets = dense_targets(&batch.labeled, k)?;

    let mut g = Graph::new();
    let lab_weak_node = g.constant(lab_weak_img);
    let lab_strong_node = lab_strong_img.map(|v| g.constant(v));
    let unl_weak_node = unl_weak_img.map(|v| g.constant(v));
    let unl_strong_node = unl_strong_img.map(|v| g.constant(v));

    // Teacher (or the single model) forwards.
    let teacher = model_forwards(
        &mut g,
        &setup.teacher_config,
        &state.teacher.params,
        &setup.mask,
        lab_weak_node,
        lab_strong_node,
        unl_weak_node,
        unl_strong_node,
        &lab_metas,
        &unl_metas,
    )?;

    // Pseudo labels from the teacher's weak view, detached by construction.
    let pseudo: Option<PseudoBatch> = if need_unsup {
        let weak_logits = to2(g.value(teacher.unl_weak.as_ref().unwrap().logits));
        Some(setup.algo.pseudo_labels(&weak_logits, task))
    } else {
        None
    };

    let teacher_lab_weak_values = to2(g.value(teacher.lab_weak.logits));

    // Teacher objective.
    let t_sup = setup
        .algo
        .supervised_loss(&mut g, teacher.lab_weak.logits, &lab_targets, task)?;
    let t_unsup = match (&pseudo, &teacher.unl_strong) {
        (Some(p), Some(strong)) => Some(setup.algo.unsupervised_loss(&mut g, p, strong.logits, task)?),
        _ => None,
    };
    let t_extras = if need_unsup {
        setup.algo.extra_losses(
            &mut g,
            &ExtraLossInputs {
                labeled_weak_logits: &teacher_lab_weak_values,
                labeled_strong_logits: teacher.lab_strong.as_ref().map(|o| o.logits),
                task,
            },
        )?
    } else {
        Vec::new()
    };
    let t_total = total_loss(
        &mut g,
        &LossParts {
            supervised: t_sup,
            unsupervised: t_unsup,
            distillation: None,
            extras: t_extras.clone(),
        },
        &LossWeights { lambda_u: weights.lambda_u, lambda_d: 0.0 },
    );

    // Student forwards and objective.
    let mut student_graph: Option<ModelStepGraph> = None;
    let mut s_sup = None;
    let mut s_unsup = None;
    let mut s_extras: Vec<(String, NodeId)> = Vec::new();
    let mut distill = None;
    let mut s_total = None;
    if let Some(student_slot) = &state.student {
        let student = model_forwards(
            &mut g,
            setup.student_config.as_ref().unwrap(),
            &student_slot.params,
            &setup.mask,
            lab_weak_node,
            lab_strong_node,
            if need_distill { unl_weak_node } else { None },
            if need_unsup { unl_strong_node } else { None },
            &lab_metas,
            &unl_metas,
        )?;
        let sup = setup
            .algo
            .supervised_loss(&mut g, student.lab_weak.logits, &lab_targets, task)?;
        s_sup = Some(sup);
        if let (Some(p), Some(strong)) = (&pseudo, &student.unl_strong) {
            // Cross pseudo-labeling: teacher targets, student predictions.
            s_unsup = Some(setup.algo.unsupervised_loss(&mut g, p, strong.logits, task)?);
        }
        if need_unsup {
            s_extras = setup.algo.extra_losses(
                &mut g,
                &ExtraLossInputs {
                    labeled_weak_logits: &teacher_lab_weak_values,
                    labeled_strong_logits: student.lab_strong.as_ref().map(|o| o.logits),
                    task,
                },
            )?;
        }
        if need_distill {
            // Weak views of all samples, labeled and unlabeled, feed the
            // distillation pair.
            let t_lab_src = if ab.distill_on_cls_token {
                teacher.lab_weak.cls_embedding
            } else {
                teacher.lab_weak.special_embedding.ok_or_else(|| {
                    Error::InvalidConfig("teacher variant carries no distillation source".into())
                })?
            };
            let t_unl_src = if ab.distill_on_cls_token {
                teacher.unl_weak.as_ref().unwrap().cls_embedding
            } else {
                teacher.unl_weak.as_ref().unwrap().special_embedding.ok_or_else(|| {
                    Error::InvalidConfig("teacher variant carries no distillation source".into())
                })?
            };
            let s_lab_src = student.lab_weak.special_embedding.unwrap();
            let s_unl_src = student.unl_weak.as_ref().unwrap().special_embedding.unwrap();
            let t_emb = g.concat(&[t_lab_src, t_unl_src], 0);
            let t_emb = if ab.no_stop_grad { t_emb } else { g.detach(t_emb) };
            let s_emb = g.concat(&[s_lab_src, s_unl_src], 0);
            distill = Some(crate::ssl::distillation_loss(
                &mut g,
                t_emb,
                s_emb,
                ab.distill_criterion,
            )?);
        }
        s_total = Some(total_loss(
            &mut g,
            &LossParts {
                supervised: sup,
                unsupervised: s_unsup,
                distillation: distill,
                extras: s_extras.clone(),
            },
            &weights,
        ));
        student_graph = Some(student);
    }

    // Abort on non-finite components before touching any parameters.
    let teacher_set = LossSet {
        supervised: check_finite(step, "teacher.supervised", g.scalar(t_sup))?,
        unsupervised: t_unsup
            .map(|n| check_finite(step, "teacher.unsupervised", g.scalar(n)))
            .transpose()?,
        extras: t_extras
            .iter()
            .map(|(name, n)| Ok((name.clone(), check_finite(step, name, g.scalar(*n))?)))
            .collect::<Result<_>>()?,
        total: check_finite(step, "teacher.total", g.scalar(t_total))?,
    };
    let student_set = match (s_sup, s_total) {
        (Some(sup), Some(total)) => Some(LossSet {
            supervised: check_finite(step, "student.supervised", g.scalar(sup))?,
            unsupervised: s_unsup
                .map(|n| check_finite(step, "student.unsupervised", g.scalar(n)))
                .transpose()?,
            extras: s_extras
                .iter()
                .map(|(name, n)| Ok((name.clone(), check_finite(step, name, g.scalar(*n))?)))
                .collect::<Result<_>>()?,
            total: check_finite(step, "student.total", g.scalar(total))?,
        }),
        _ => None,
    };
    let distill_value = distill
        .map(|n| check_finite(step, "distillation", g.scalar(n)))
        .transpose()?;

    // Backward per model; fresh gradient buffers each time.
    let t_grad_set = g.backward(t_total);
    let mut teacher_grads = harvest(&t_grad_set, &teacher.binding, state.teacher.params.len());
    if let (Some(total), Some(student)) = (s_total, &student_graph) {
        let s_grad_set = g.backward(total);
        let student_slot = state.student.as_mut().unwrap();
        let student_grads = harvest(&s_grad_set, &student.binding, student_slot.params.len());
        if ab.no_stop_grad {
            // Distillation gradients flow into the teacher as well.
            let extra = harvest(&s_grad_set, &teacher.binding, state.teacher.params.len());
            add_into(&mut teacher_grads, extra);
        }
        let hyper = AdamHyper::with_weight_decay(train_cfg.weight_decay);
        adam_step(&hyper, &mut student_slot.opt, &mut student_slot.params, &student_grads, lr)?;
        ema_update(&mut student_slot.ema, &student_slot.params)?;
    }
    let hyper = AdamHyper::with_weight_decay(train_cfg.weight_decay);
    adam_step(&hyper, &mut state.teacher.opt, &mut state.teacher.params, &teacher_grads, lr)?;
    ema_update(&mut state.teacher.ema, &state.teacher.params)?;

    // Pseudo-label statistics against ground truth where it is known.
    let (pseudo_quantity, pseudo_quality) = match &pseudo {
        Some(p) => {
            let gt: Vec<Label> = batch
                .unlabeled
                .iter()
                .filter_map(|s| s.label.clone())
                .collect();
            if gt.len() == batch.unlabeled.len() {
                let stats = pseudo_stats(p, &gt)?;
                (Some(stats.quantity), stats.quality)
            } else {
                (Some(p.weights.pass_fraction()), None)
            }
        }
        None => (None, None),
    };

    state.step += 1;
    Ok(StepMetrics {
        step,
        lr,
        teacher: teacher_set,
        student: student_set,
        distillation: distill_value,
        pseudo_quantity,
        pseudo_quality,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Student EMA metrics (the deployed model) — the single model's in
    /// single-model runs.
    pub student: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<MetricsReport>,
}

/// Evaluate the EMA snapshots on the held-out test split.
pub fn eval_snapshot(setup: &RunSetup, state: &TrainState) -> Result<EvalRecord> {
    let teacher_report = evaluate(
        &setup.teacher_config,
        &state.teacher.ema.shadow,
        &setup.data,
        &setup.test,
        &setup.mask,
        None,
    )?;
    let record = match &state.student {
        Some(slot) => EvalRecord {
            step: state.step,
            student: evaluate(
                setup.student_config.as_ref().unwrap(),
                &slot.ema.shadow,
                &setup.data,
                &setup.test,
                &setup.mask,
                None,
            )?,
            teacher: Some(teacher_report),
        },
        None => EvalRecord {
            step: state.step,
            student: teacher_report,
            teacher: None,
        },
    };
    Ok(record)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LogRecord<'a> {
    Header { config_hash: &'a str, step: u64 },
    Step(&'a StepMetrics),
    Eval(&'a EvalRecord),
}

pub struct RunOutput {
    pub state: TrainState,
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

fn fitness(report: &MetricsReport) -> f64 {
    report.accuracy.unwrap_or(report.map)
}

/// Execute the full loop: batches, steps, EMA, periodic evaluation, metrics
/// log, and final/best checkpoints. `out_dir = None` keeps everything in
/// memory (used by tests). `resume_from` restores a checkpoint and continues
/// to `total_steps`.
pub fn run_training(
    setup: &RunSetup,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<RunOutput> {
    let mut state = match resume_from {
        Some(path) => {
            let (state, stored_hash) = load_checkpoint(path, Some(setup))?;
            if stored_hash != setup.config_hash {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint was produced by config {stored_hash}, this run is {}",
                    setup.config_hash
                )));
            }
            state
        }
        None => init_state(setup)?,
    };
    let mut stream = make_stream(setup)?;
    stream.restore(state.stream);

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, file))
        }
        None => None,
    };
    let write_record = |record: &LogRecord, file: &mut Option<(PathBuf, std::fs::File)>| -> Result<()> {
        if let Some((path, f)) = file {
            let line = serde_json::to_string(record).map_err(|e| Error::Other(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    };
    write_record(
        &LogRecord::Header { config_hash: &setup.config_hash, step: state.step },
        &mut metrics_file,
    )?;

    let total = setup.experiment.train.total_steps;
    let log_interval = setup.experiment.train.log_interval.max(1);
    let eval_interval = setup.experiment.train.eval_interval;
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(f64, TrainStateSnapshot)> = None;

    while state.step < total {
        let batch = stream.next_batch(state.step);
        let metrics = train_step(setup, &mut state, &batch)?;
        state.stream = stream.state();
        // One record per completed interval: total_steps / log_interval rows.
        let is_log_step = (metrics.step + 1) % log_interval == 0 || metrics.step + 1 == total;
        if is_log_step {
            write_record(&LogRecord::Step(&metrics), &mut metrics_file)?;
            steps.push(metrics);
        }
        let do_eval = !setup.test.is_empty()
            && ((eval_interval > 0 && state.step % eval_interval == 0) || state.step == total);
        if do_eval {
            let record = eval_snapshot(setup, &state)?;
            write_record(&LogRecord::Eval(&record), &mut metrics_file)?;
            let score = fitness(&record.student);
            if best.as_ref().map(|(b, _)| score > *b).unwrap_or(true) {
                best = Some((score, snapshot_of(&state)));
            }
            evals.push(record);
        }
    }

    let (final_checkpoint, best_checkpoint, metrics_path) = match out_dir {
        Some(dir) => {
            let final_path = dir.join("checkpoint_final.stck");
            save_checkpoint(&state, setup, &final_path)?;
            let best_path = match best {
                Some((_, snap)) => {
                    let path = dir.join("checkpoint_best.stck");
                    let best_state = snap.into_state(&state);
                    save_checkpoint(&best_state, setup, &path)?;
                    Some(path)
                }
                None => None,
            };
            export_curves(dir, &steps)?;
            (Some(final_path), best_path, metrics_file.map(|(p, _)| p))
        }
        None => (None, None, None),
    };

    Ok(RunOutput {
        state,
        steps,
        evals,
        final_checkpoint,
        best_checkpoint,
        metrics_path,
    })
}

/// Copy of the mutable training position for best-checkpoint tracking.
struct TrainStateSnapshot {
    step: u64,
    teacher_params: ParamSnapshot,
    teacher_opt: AdamState,
    teacher_ema: EmaState,
    student: Option<(ParamSnapshot, AdamState, EmaState)>,
    stream: StreamState,
}

fn snapshot_of(state: &TrainState) -> TrainStateSnapshot {
    TrainStateSnapshot {
        step: state.step,
        teacher_params: state.teacher.params.clone(),
        teacher_opt: state.teacher.opt.clone(),
        teacher_ema: state.teacher.ema.clone(),
        student: state
            .student
            .as_ref()
            .map(|s| (s.params.clone(), s.opt.clone(), s.ema.clone())),
        stream: state.stream,
    }
}

impl TrainStateSnapshot {
    fn into_state(self, like: &TrainState) -> TrainState {
        TrainState {
            step: self.step,
            teacher: ModelSlot {
                config: like.teacher.config.clone(),
                params: self.teacher_params,
                opt: self.teacher_opt,
                ema: self.teacher_ema,
            },
            student: match (self.student, &like.student) {
                (Some((params, opt, ema)), Some(slot)) => Some(ModelSlot {
                    config: slot.config.clone(),
                    params,
                    opt,
                    ema,
                }),
                _ => None,
            },
            stream: self.stream,
        }
    }
}

/// Step/quality/quantity curves as CSV for the plot command.
fn export_curves(dir: &Path, steps: &[StepMetrics]) -> Result<()> {
    let path = dir.join("curves.csv");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(
        f,
        "step,lr,teacher_supervised,teacher_unsupervised,student_supervised,student_unsupervised,distillation,pseudo_quality,pseudo_quantity"
    )
    .map_err(|e| Error::io(&path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in steps {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            m.step,
            m.lr,
            m.teacher.supervised,
            opt(m.teacher.unsupervised),
            opt(m.student.as_ref().map(|s| s.supervised)),
            opt(m.student.as_ref().and_then(|s| s.unsupervised)),
            opt(m.distillation),
            opt(m.pseudo_quality),
            opt(m.pseudo_quantity),
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
