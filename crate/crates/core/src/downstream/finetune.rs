use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::labels::{Label, LabelSet};
use super::metrics::{aggregate, auprc, auroc, Aggregate, ClassScores};
use super::{Task, TaskKind, SOFA_CLASSES};
use crate::embedding::{AblationFlags, Corruption};
use crate::error::{Error, Result};
use crate::event_data::EncodedStay;
use crate::model::PulseModel;
use crate::numerics::{
    cosine_lr, sigmoid, AdamWConfig, GradBuffer, Graph, OptimizerState, ParamGroup, Var,
};
use crate::seeding::{derive_rng, derive_seed};

/// An encoded (already windowed) stay with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStay {
    pub stay: EncodedStay,
    pub labels: LabelSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Floor of the cosine schedule as a fraction of each base rate.
    pub min_lr_fraction: f64,
    pub head_dropout: f64,
    /// Share of the training stays whose labels are used.
    pub label_fraction: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_backbone: 5e-5,
            lr_heads: 2e-4,
            min_lr_fraction: 0.0,
            head_dropout: 0.1,
            label_fraction: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Per-element loss weights of each task for one batch: `1/N` for binary
/// and multi-class tasks, `1/(N·C)` for the multi-label task, where `N`
/// counts stays with an available label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskWeights(pub BTreeMap<Task, f64>);

pub fn task_weights<'a>(
    labels: impl IntoIterator<Item = &'a LabelSet>,
    tasks: &[Task],
) -> TaskWeights {
    let mut counts: BTreeMap<Task, usize> = BTreeMap::new();
    for l in labels {
        for &t in tasks {
            if l.is_available(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    TaskWeights(
        counts
            .into_iter()
            .map(|(t, n)| {
                let c = if t.kind() == TaskKind::Multilabel {
                    t.n_outputs()
                } else {
                    1
                };
                (t, 1.0 / (n * c) as f64)
            })
            .collect(),
    )
}

/// Weighted loss of one stay over its available labels, `None` if it has
/// none. Summing over a batch gives the multi-task loss of that batch.
pub fn sample_task_loss(
    g: &mut Graph,
    model: &PulseModel,
    sample: &LabeledStay,
    tasks: &[Task],
    weights: &TaskWeights,
    flags: AblationFlags,
) -> Result<Option<Var>> {
    let heads = model
        .task_heads
        .as_ref()
        .ok_or_else(|| Error::Config("model has no task heads".into()))?;
    if !tasks.iter().any(|&t| sample.labels.is_available(t)) {
        return Ok(None);
    }
    let f = model.forward_with(g, &sample.stay, &Corruption::none(), flags)?;
    let mut terms = Vec::new();
    for &t in tasks {
        let (Some(label), Some(&w)) = (sample.labels.get(t), weights.0.get(&t)) else {
            continue;
        };
        let z = heads.logits(g, &model.store, f.pooled, t)?;
        let term = match label {
            Label::Binary(y) => g.bce_with_logits_weighted(z, &[f64::from(u8::from(*y))], &[w])?,
            Label::Class(c) => g.cross_entropy_weighted(z, &[*c], &[w])?,
            Label::Multi(bits) => {
                let y: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
                g.bce_with_logits_weighted(z, &y, &vec![w; y.len()])?
            }
        };
        terms.push(term);
    }
    Ok(Some(g.add_all(&terms)?))
}

/// Multi-task loss from raw logits, term by term.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskLoss {
    pub total: f64,
    pub per_task: BTreeMap<Task, f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn bce_logit(z: f64, y: bool) -> f64 {
    if y {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// `Σ mean BCE (binary) + Σ mean CE (multi-class) + mean over N·C BCE
/// (multi-label)`, skipping unavailable labels. `logits[n][task]` holds the
/// raw head outputs of stay `n`.
pub fn multitask_loss(
    logits: &[BTreeMap<Task, Vec<f64>>],
    labels: &[LabelSet],
    tasks: &[Task],
) -> Result<MultitaskLoss> {
    let mut per_task = BTreeMap::new();
    for &t in tasks {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (z, l) in logits.iter().zip(labels) {
            let (Some(label), Some(z)) = (l.get(t), z.get(&t)) else {
                continue;
            };
            n += 1;
            sum += match label {
                Label::Binary(y) => bce_logit(z[0], *y),
                Label::Class(c) => {
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    lse - z[*c]
                }
                Label::Multi(bits) => {
                    bits.iter()
                        .zip(z)
                        .map(|(&b, &zi)| bce_logit(zi, b))
                        .sum::<f64>()
                        / bits.len() as f64
                }
            };
        }
        if n > 0 {
            per_task.insert(t, sum / n as f64);
        }
    }
    if per_task.is_empty() {
        return Err(Error::NoLabels);
    }
    Ok(MultitaskLoss {
        total: per_task.values().sum(),
        per_task,
    })
}

/// Indices of the stays kept at label fraction `rho`.
pub fn subsample(n: usize, rho: f64, seed: u64) -> Vec<usize> {
    let k = ((rho.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_rng(seed, "label_fraction", &[]));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Head outputs of every stay, as probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub tasks: Vec<Task>,
    /// `probs[n][task]`: one value (binary), 4 (multi-class) or 25
    /// (multi-label).
    pub probs: Vec<BTreeMap<Task, Vec<f64>>>,
    pub logits: Vec<BTreeMap<Task, Vec<f64>>>,
}

/// Evaluation-mode predictions.
pub fn predict(
    model: &PulseModel,
    stays: &[&EncodedStay],
    tasks: &[Task],
    flags: AblationFlags,
) -> Result<Predictions> {
    let heads = model
        .task_heads
        .as_ref()
        .ok_or_else(|| Error::Config("model has no task heads".into()))?;
    let mut probs = Vec::with_capacity(stays.len());
    let mut logits = Vec::with_capacity(stays.len());
    for stay in stays {
        let mut g = Graph::new();
        let f = model.forward_with(&mut g, stay, &Corruption::none(), flags)?;
        let mut p = BTreeMap::new();
        let mut l = BTreeMap::new();
        for &t in tasks {
            let z = heads.logits(&mut g, &model.store, f.pooled, t)?;
            let z = g.value(z).data().to_vec();
            let pr = match t.kind() {
                TaskKind::Multiclass => {
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                }
                _ => z.iter().map(|&v| sigmoid(v)).collect(),
            };
            p.insert(t, pr);
            l.insert(t, z);
        }
        probs.push(p);
        logits.push(l);
    }
    Ok(Predictions {
        tasks: tasks.to_vec(),
        probs,
        logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    pub kind: TaskKind,
    /// Stays with an available label.
    pub n: usize,
    /// Binary AUROC, or macro-AUROC for multi-class and multi-label tasks.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub micro_auroc: Option<f64>,
    pub micro_auprc: Option<f64>,
}

fn task_metrics(task: Task, preds: &Predictions, labels: &[&LabelSet]) -> TaskMetrics {
    let mut classes: Vec<ClassScores> = vec![ClassScores::default(); task.n_outputs()];
    let mut n = 0;
    for (p, l) in preds.probs.iter().zip(labels) {
        let Some(label) = l.get(task) else { continue };
        let p = &p[&task];
        n += 1;
        match label {
            Label::Binary(y) => {
                classes[0].scores.push(p[0]);
                classes[0].labels.push(*y);
            }
            Label::Class(c) => {
                for (k, cls) in classes.iter_mut().enumerate().take(SOFA_CLASSES) {
                    cls.scores.push(p[k]);
                    cls.labels.push(k == *c);
                }
            }
            Label::Multi(bits) => {
                for (k, cls) in classes.iter_mut().enumerate() {
                    cls.scores.push(p[k]);
                    cls.labels.push(bits[k]);
                }
            }
        }
    }
    let mut m = TaskMetrics {
        task,
        kind: task.kind(),
        n,
        auroc: None,
        auprc: None,
        macro_auroc: None,
        macro_auprc: None,
        micro_auroc: None,
        micro_auprc: None,
    };
    if task.kind() == TaskKind::Binary {
        m.auroc = auroc(&classes[0].scores, &classes[0].labels);
        m.auprc = auprc(&classes[0].scores, &classes[0].labels);
    } else {
        m.macro_auroc = aggregate(&classes, Aggregate::Macro, auroc);
        m.macro_auprc = aggregate(&classes, Aggregate::Macro, auprc);
        m.micro_auroc = aggregate(&classes, Aggregate::Micro, auroc);
        m.micro_auprc = aggregate(&classes, Aggregate::Micro, auprc);
        m.auroc = m.macro_auroc;
        m.auprc = m.macro_auprc;
    }
    m
}

pub fn evaluate(
    model: &PulseModel,
    data: &[LabeledStay],
    tasks: &[Task],
    flags: AblationFlags,
) -> Result<Vec<TaskMetrics>> {
    let stays: Vec<&EncodedStay> = data.iter().map(|d| &d.stay).collect();
    let labels: Vec<&LabelSet> = data.iter().map(|d| &d.labels).collect();
    let preds = predict(model, &stays, tasks, flags)?;
    Ok(tasks
        .iter()
        .map(|&t| task_metrics(t, &preds, &labels))
        .collect())
}

/// Mean AUROC over tasks where it is defined.
pub fn mean_auroc(metrics: &[TaskMetrics]) -> Option<f64> {
    let v: Vec<f64> = metrics.iter().filter_map(|m| m.auroc).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_auroc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: Option<usize>,
    pub n_labeled: usize,
    pub val_metrics: Vec<TaskMetrics>,
}

/// Multi-task fine-tuning with separate backbone and head learning rates.
/// The parameters with the best mean validation AUROC are kept. With no
/// labeled stays (label fraction 0) nothing is trained and the outcome holds
/// the validation metrics of the model as given.
pub fn finetune(
    model: &mut PulseModel,
    train: &[LabeledStay],
    val: &[LabeledStay],
    tasks: &[Task],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to fine-tune".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let have_heads = model
        .task_heads
        .as_ref()
        .is_some_and(|h| tasks.iter().all(|&t| h.contains(t)));
    if !have_heads {
        model.add_task_heads(tasks, config.head_dropout, config.seed)?;
    }
    let flags = model.config.embedding.ablation;
    let labeled: Vec<&LabeledStay> = subsample(train.len(), config.label_fraction, config.seed)
        .into_iter()
        .map(|i| &train[i])
        .filter(|s| tasks.iter().any(|&t| s.labels.is_available(t)))
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::numerics::ParamStore, Vec<TaskMetrics>)> = None;
    if !labeled.is_empty() && config.epochs > 0 {
        let steps_per_epoch = labeled.len().div_ceil(config.batch_size);
        let total = steps_per_epoch * config.epochs;
        let mut opt = OptimizerState::new(&model.store, config.optimizer);
        let mut step = 0usize;
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..labeled.len()).collect();
            order.shuffle(&mut derive_rng(
                config.seed,
                "finetune_shuffle",
                &[epoch as u64],
            ));
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                let weights = task_weights(batch.iter().map(|&i| &labeled[i].labels), tasks);
                let mut grads = GradBuffer::zeros_like(&model.store);
                let mut batch_loss = 0.0;
                for (k, &i) in batch.iter().enumerate() {
                    let mut g = Graph::training(derive_seed(
                        config.seed,
                        "finetune_dropout",
                        &[step as u64, k as u64],
                    ));
                    let Some(loss) =
                        sample_task_loss(&mut g, model, labeled[i], tasks, &weights, flags)?
                    else {
                        continue;
                    };
                    let v = g.value(loss).data()[0];
                    if !v.is_finite() {
                        return Err(Error::Diverged { step });
                    }
                    batch_loss += v;
                    for (id, gr) in g.backward(loss)?.params() {
                        grads.add(id, gr);
                    }
                }
                let lr = |base: f64| cosine_lr(step, total, base, base * config.min_lr_fraction);
                let lrs = BTreeMap::from([
                    (ParamGroup::Backbone, lr(config.lr_backbone)?),
                    (ParamGroup::Head, lr(config.lr_heads)?),
                ]);
                opt.step(&mut model.store, &grads, &lrs)?;
                epoch_loss += batch_loss;
                step += 1;
            }
            let train_loss = epoch_loss / steps_per_epoch as f64;
            let (val_auroc, val_metrics) = if val.is_empty() {
                (None, Vec::new())
            } else {
                let m = evaluate(model, val, tasks, flags)?;
                (mean_auroc(&m), m)
            };
            log::info!("finetune epoch {epoch}: loss {train_loss:.4} val mean AUROC {val_auroc:?}");
            history.push(FinetuneEpoch {
                epoch,
                train_loss,
                val_mean_auroc: val_auroc,
            });
            // Without a validation split the latest epoch wins.
            let score = val_auroc.unwrap_or(f64::NEG_INFINITY);
            if val.is_empty() || best.as_ref().is_none_or(|(b, ..)| score > *b) {
                best = Some((score, epoch, model.store.clone(), val_metrics));
            }
        }
    }
    let (best_epoch, val_metrics) = match best {
        Some((_, epoch, store, metrics)) => {
            model.store = store;
            (Some(epoch), metrics)
        }
        None if val.is_empty() => (None, Vec::new()),
        None => (None, evaluate(model, val, tasks, flags)?),
    };
    Ok(FinetuneOutcome {
        history,
        best_epoch,
        n_labeled: labeled.len(),
        val_metrics,
    })
}

#[derive(Clone, Debug)]
pub struct ZeroShotReport {
    pub metrics: Vec<TaskMetrics>,
    /// Mean share of categorical fields that fell back to `[UNK]`.
    pub unknown_rate: f64,
}

/// Evaluates a trained model on a cohort without any training. Warns when
/// the cohort's vocabulary overlap is poor.
pub fn zero_shot_eval(
    model: &PulseModel,
    cohort: &[LabeledStay],
    tasks: &[Task],
    flags: AblationFlags,
    unknown_warn: f64,
) -> Result<ZeroShotReport> {
    let unknown_rate = if cohort.is_empty() {
        0.0
    } else {
        cohort.iter().map(|s| s.stay.unknown_rate()).sum::<f64>() / cohort.len() as f64
    };
    if unknown_rate > unknown_warn {
        log::warn!(
            "{:.1}% of categorical tokens are outside the model vocabulary",
            100.0 * unknown_rate
        );
    }
    Ok(ZeroShotReport {
        metrics: evaluate(model, cohort, tasks, flags)?,
        unknown_rate,
    })
}

pub const METRICS_CSV_HEADER: &str =
    "task,kind,auroc,auprc,macro_auroc,macro_auprc,micro_auroc,micro_auprc,n,rho,seed";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(
    metrics: &[TaskMetrics],
    rho: f64,
    seed: u64,
    mut out: impl Write,
) -> Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.task,
            m.kind.as_str(),
            cell(m.auroc),
            cell(m.auprc),
            cell(m.macro_auroc),
            cell(m.macro_auprc),
            cell(m.micro_auroc),
            cell(m.micro_auprc),
            m.n,
            rho,
            seed
        )?;
    }
    Ok(())
}
