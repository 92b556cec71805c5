use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{sample_loss, BatchTotals, MaskPlan, MaskPlanner, PrecisionCounts};
use crate::error::{Error, Result};
use crate::event_data::{EncodedStay, SourceType};
use crate::model::PulseModel;
use crate::numerics::{
    cosine_lr, AdamWConfig, GradBuffer, Graph, NumericsError, OptimizerState, ParamGroup,
};
use crate::seeding::{derive_rng, derive_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Weight of the value-prediction loss.
    pub vp_weight: f64,
    /// Share of the training stays held out for checkpoint selection.
    pub validation_fraction: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop once the epoch's overall training precision exceeds this.
    pub target_precision: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            min_lr: 0.0,
            vp_weight: 0.001,
            validation_fraction: 0.1,
            optimizer: AdamWConfig::default(),
            seed: 0,
            target_precision: None,
        }
    }
}

/// Loss terms and precision over one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitMetrics {
    pub mep_sum: f64,
    pub n_mep: usize,
    pub vp_sum: f64,
    pub n_vp: usize,
    pub precision: PrecisionCounts,
}

impl SplitMetrics {
    pub fn mep(&self) -> f64 {
        if self.n_mep == 0 {
            0.0
        } else {
            self.mep_sum / self.n_mep as f64
        }
    }

    pub fn vp(&self) -> f64 {
        if self.n_vp == 0 {
            0.0
        } else {
            self.vp_sum / self.n_vp as f64
        }
    }

    pub fn total(&self, lambda: f64) -> f64 {
        super::total_loss(self.mep(), self.vp(), lambda)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub steps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub vp_weight: f64,
}

impl PretrainOutcome {
    pub fn last(&self) -> &EpochMetrics {
        self.history.last().expect("at least one epoch")
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerics(
            NumericsError::NonFinite { .. } | NumericsError::NonFiniteGradient { .. },
        ) => Error::Diverged { step },
        Error::Embedding(crate::embedding::EmbeddingError::Numerics(
            NumericsError::NonFinite { .. },
        )) => Error::Diverged { step },
        Error::Encoder(crate::encoder::EncoderError::Numerics(NumericsError::NonFinite {
            ..
        })) => Error::Diverged { step },
        other => other,
    }
}

/// Trains the backbone and pretraining heads; the best parameters by
/// validation loss (training loss without a validation split) are left in
/// `model` at the end.
pub fn pretrain(
    model: &mut PulseModel,
    stays: &[EncodedStay],
    planner: &MaskPlanner,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if stays.is_empty() {
        return Err(Error::EmptyData("no pretraining stays".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config(
            "epochs and batch_size must be positive".into(),
        ));
    }
    let heads = model.add_pretrain_heads();
    let lambda = config.vp_weight;

    let mut order: Vec<usize> = (0..stays.len()).collect();
    order.shuffle(&mut derive_rng(config.seed, "pretrain_holdout", &[]));
    let n_val = if stays.len() > 1 {
        ((config.validation_fraction * stays.len() as f64).round() as usize).min(stays.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&EncodedStay> = train_idx.iter().map(|&i| &stays[i]).collect();
    let val: Vec<&EncodedStay> = val_idx.iter().map(|&i| &stays[i]).collect();
    let val_plans: Vec<MaskPlan> = val.iter().map(|s| planner.plan_for(s, u64::MAX)).collect();

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt = OptimizerState::new(&model.store, config.optimizer);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::numerics::ParamStore)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut batch_order: Vec<usize> = (0..train.len()).collect();
        batch_order.shuffle(&mut derive_rng(
            config.seed,
            "pretrain_shuffle",
            &[epoch as u64],
        ));
        let mut metrics = SplitMetrics::default();
        let mut lr = config.lr;
        for batch in batch_order.chunks(config.batch_size) {
            let plans: Vec<MaskPlan> = batch
                .iter()
                .map(|&i| planner.plan_for(train[i], epoch as u64))
                .collect();
            let totals = BatchTotals {
                mep: plans.iter().map(MaskPlan::n_masked).sum(),
                vp: plans.iter().map(MaskPlan::n_vp).sum(),
            };
            lr = cosine_lr(step, total_steps, config.lr, config.min_lr)?;
            if totals.mep == 0 && totals.vp == 0 {
                step += 1;
                continue;
            }
            let mut grads = GradBuffer::zeros_like(&model.store);
            for (k, (&i, plan)) in batch.iter().zip(&plans).enumerate() {
                if plan.n_masked() + plan.n_vp() == 0 {
                    continue;
                }
                let mut g = Graph::training(derive_seed(
                    config.seed,
                    "pretrain_dropout",
                    &[step as u64, k as u64],
                ));
                let s = sample_loss(&mut g, model, &heads, train[i], plan, totals, lambda)
                    .map_err(diverged(step))?;
                let loss = g.value(s.loss).data()[0];
                if !loss.is_finite() {
                    return Err(Error::Diverged { step });
                }
                let grad = g.backward(s.loss).map_err(|e| diverged(step)(e.into()))?;
                for (id, gr) in grad.params() {
                    grads.add(id, gr);
                }
                metrics.mep_sum += s.mep_sum;
                metrics.n_mep += plan.n_masked();
                metrics.vp_sum += s.vp_sum;
                metrics.n_vp += plan.n_vp();
                metrics.precision.merge(&s.precision);
            }
            let lrs = BTreeMap::from([(ParamGroup::Backbone, lr), (ParamGroup::Head, lr)]);
            opt.step(&mut model.store, &grads, &lrs)
                .map_err(|e| diverged(step)(e.into()))?;
            step += 1;
        }

        let val_metrics = if val.is_empty() {
            None
        } else {
            Some(evaluate_masked(model, &val, &val_plans, lambda)?)
        };
        let score = val_metrics.as_ref().unwrap_or(&metrics).total(lambda);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.store.clone()));
        }
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} mep {:.4} vp {:.4} precision {:?}",
            metrics.total(lambda),
            metrics.mep(),
            metrics.vp(),
            metrics.precision.overall()
        );
        history.push(EpochMetrics {
            epoch,
            lr,
            train: metrics,
            val: val_metrics,
        });
        if let (Some(target), Some(p)) = (config.target_precision, metrics.precision.overall()) {
            if p > target {
                break;
            }
        }
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch ran");
    model.store = best_store;
    Ok(PretrainOutcome {
        history,
        best_epoch,
        steps: step,
        n_train: train.len(),
        n_val: val.len(),
        vp_weight: lambda,
    })
}

/// Losses and precision in evaluation mode for fixed plans.
pub fn evaluate_masked(
    model: &PulseModel,
    stays: &[&EncodedStay],
    plans: &[MaskPlan],
    lambda: f64,
) -> Result<SplitMetrics> {
    let heads = model
        .pretrain_heads
        .ok_or_else(|| Error::Config("model has no pretraining heads".into()))?;
    let totals = BatchTotals {
        mep: plans.iter().map(MaskPlan::n_masked).sum::<usize>().max(1),
        vp: plans.iter().map(MaskPlan::n_vp).sum::<usize>().max(1),
    };
    let mut m = SplitMetrics::default();
    for (stay, plan) in stays.iter().zip(plans) {
        let mut g = Graph::new();
        let s = sample_loss(&mut g, model, &heads, stay, plan, totals, lambda)?;
        m.mep_sum += s.mep_sum;
        m.n_mep += plan.n_masked();
        m.vp_sum += s.vp_sum;
        m.n_vp += plan.n_vp();
        m.precision.merge(&s.precision);
    }
    Ok(m)
}

pub const PRETRAIN_CSV_HEADER: &str = "epoch,lr,train_loss,train_mep,train_vp,train_precision,train_precision_medication,\
train_precision_chart,train_precision_procedure,val_loss,val_mep,val_vp,val_precision,val_precision_medication,\
val_precision_chart,val_precision_procedure";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn split_cells(m: Option<&SplitMetrics>, lambda: f64) -> String {
    match m {
        None => ",,,,,,".into(),
        Some(m) => {
            let mep = (m.n_mep > 0).then(|| m.mep());
            let vp = (m.n_vp > 0).then(|| m.vp());
            format!(
                "{},{},{},{},{},{},{}",
                m.total(lambda),
                opt(mep),
                opt(vp),
                opt(m.precision.overall()),
                opt(m.precision.per_type(SourceType::Input)),
                opt(m.precision.per_type(SourceType::Chart)),
                opt(m.precision.per_type(SourceType::Procedure)),
            )
        }
    }
}

/// One row per epoch; empty cells mark terms with nothing to score.
pub fn write_pretrain_csv(outcome: &PretrainOutcome, mut out: impl Write) -> Result<()> {
    writeln!(out, "{PRETRAIN_CSV_HEADER}")?;
    for e in &outcome.history {
        writeln!(
            out,
            "{},{},{},{}",
            e.epoch,
            e.lr,
            split_cells(Some(&e.train), outcome.vp_weight),
            split_cells(e.val.as_ref(), outcome.vp_weight)
        )?;
    }
    Ok(())
}
