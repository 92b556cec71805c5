//! Masked event prediction (MEP) and value prediction (VP).
//!
//! MEP hides whole events (every component except position) and asks the
//! model for the event identity. VP hides only the value of selected
//! measurements and regresses it.

mod train;

#[cfg(test)]
mod tests;

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Corruption;
use crate::error::{Error, Result};
use crate::event_data::{EncodedEvent, EncodedStay, SourceType, Vocabulary, UNK};
use crate::numerics::{Graph, Init, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::seeding::{derive_rng, string_key};
use crate::sequence::SPECIAL_TOKENS;

pub use train::{
    evaluate_masked, pretrain, write_pretrain_csv, EpochMetrics, PretrainConfig, PretrainOutcome,
    SplitMetrics, PRETRAIN_CSV_HEADER,
};

pub const DEFAULT_VP_VARIABLES: [&str; 11] = [
    "HR",
    "RR",
    "SaO2",
    "ABPs",
    "ABPd",
    "Temperature",
    "WBC",
    "Sodium",
    "Potassium",
    "HCO3",
    "Hemoglobin",
];

/// Masking configurations compared in the masking sweep, as M/C/P/V labels.
pub const SWEEP_LABELS: [&str; 6] = [
    "30/30/30/00",
    "30/30/30/05",
    "30/30/30/10",
    "30/30/30/15",
    "30/15/30/05",
    "20/15/20/15",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub ratio_medication: f64,
    pub ratio_chart: f64,
    pub ratio_procedure: f64,
    pub vp_ratio: f64,
    pub vp_variables: Vec<String>,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            ratio_medication: 0.3,
            ratio_chart: 0.3,
            ratio_procedure: 0.3,
            vp_ratio: 0.05,
            vp_variables: DEFAULT_VP_VARIABLES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl MaskingConfig {
    /// Parses an `M/C/P/V` label of percentages such as `30/30/30/05`.
    pub fn from_label(label: &str) -> Result<Self> {
        let parts: Vec<&str> = label.split('/').collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "masking label `{label}` must have four parts"
            )));
        }
        let mut r = [0.0; 4];
        for (slot, p) in r.iter_mut().zip(&parts) {
            let pct: u32 = p.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "masking label `{label}`: `{p}` is not a percentage"
                ))
            })?;
            *slot = f64::from(pct) / 100.0;
        }
        let cfg = Self {
            ratio_medication: r[0],
            ratio_chart: r[1],
            ratio_procedure: r[2],
            vp_ratio: r[3],
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        let pct = |r: f64| (r * 100.0).round() as u32;
        format!(
            "{:02}/{:02}/{:02}/{:02}",
            pct(self.ratio_medication),
            pct(self.ratio_chart),
            pct(self.ratio_procedure),
            pct(self.vp_ratio)
        )
    }

    pub fn ratio(&self, st: SourceType) -> f64 {
        match st {
            SourceType::Input => self.ratio_medication,
            SourceType::Chart => self.ratio_chart,
            SourceType::Procedure => self.ratio_procedure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("ratio_medication", self.ratio_medication),
            ("ratio_chart", self.ratio_chart),
            ("ratio_procedure", self.ratio_procedure),
            ("vp_ratio", self.vp_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.vp_ratio > 0.0 && self.vp_variables.is_empty() {
            return Err(Error::Config(
                "vp_ratio > 0 needs at least one vp variable".into(),
            ));
        }
        Ok(())
    }

    pub fn mep_disabled(&self) -> bool {
        self.ratio_medication == 0.0 && self.ratio_chart == 0.0 && self.ratio_procedure == 0.0
    }
}

/// `round(ratio · n)` with halves rounded up.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

/// Per-event MEP and VP flags for one sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub mep: Vec<bool>,
    pub vp: Vec<bool>,
}

impl MaskPlan {
    pub fn empty(n: usize) -> Self {
        Self {
            mep: vec![false; n],
            vp: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mep.is_empty()
    }

    pub fn mep_indices(&self) -> Vec<usize> {
        flags_to_indices(&self.mep)
    }

    pub fn vp_indices(&self) -> Vec<usize> {
        flags_to_indices(&self.vp)
    }

    pub fn n_masked(&self) -> usize {
        self.mep.iter().filter(|&&m| m).count()
    }

    pub fn n_vp(&self) -> usize {
        self.vp.iter().filter(|&&m| m).count()
    }

    /// Masked event counts indexed by [`SourceType::index`].
    pub fn counts_by_type(&self, events: &[EncodedEvent]) -> [usize; 3] {
        let mut c = [0; 3];
        for (e, &m) in events.iter().zip(&self.mep) {
            if m {
                c[e.source_type.index()] += 1;
            }
        }
        c
    }

    pub fn corruption(&self) -> Corruption {
        Corruption {
            mep: self.mep.clone(),
            vp: self.vp.clone(),
        }
    }
}

fn flags_to_indices(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i)
        .collect()
}

/// Draws mask plans; holds the event ids eligible for value prediction.
#[derive(Clone, Debug)]
pub struct MaskPlanner {
    pub config: MaskingConfig,
    vp_ids: BTreeSet<usize>,
}

impl MaskPlanner {
    pub fn new(config: MaskingConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        let vp_ids = config
            .vp_variables
            .iter()
            .map(|n| vocab.event.encode(n))
            .filter(|&id| id != UNK)
            .collect();
        Ok(Self { config, vp_ids })
    }

    pub fn from_ids(
        config: MaskingConfig,
        vp_ids: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            vp_ids: vp_ids.into_iter().collect(),
        })
    }

    pub fn is_vp_variable(&self, event_id: usize) -> bool {
        self.vp_ids.contains(&event_id)
    }

    /// Per source type, exactly `round(ratio · n)` events are picked for MEP
    /// uniformly at random; every remaining valued VP variable is picked for
    /// VP with probability `vp_ratio`.
    pub fn select_masks(&self, events: &[EncodedEvent], rng: &mut impl Rng) -> MaskPlan {
        let mut plan = MaskPlan::empty(events.len());
        for st in SourceType::ALL {
            let idx: Vec<usize> = (0..events.len())
                .filter(|&i| events[i].source_type == st)
                .collect();
            let k = mask_count(self.config.ratio(st), idx.len());
            if k == 0 {
                continue;
            }
            for j in sample(rng, idx.len(), k) {
                plan.mep[idx[j]] = true;
            }
        }
        if self.config.vp_ratio > 0.0 {
            for (i, e) in events.iter().enumerate() {
                if !plan.mep[i] && e.value.is_some() && self.vp_ids.contains(&e.event) {
                    plan.vp[i] = rng.random::<f64>() < self.config.vp_ratio;
                }
            }
        }
        plan
    }

    /// Plan for one stay in one epoch, from a generator seeded by
    /// `(seed, stay_id, epoch)`.
    pub fn plan_for(&self, stay: &EncodedStay, epoch: u64) -> MaskPlan {
        let mut rng = derive_rng(
            self.config.seed,
            "mask",
            &[string_key(&stay.stay_id), epoch],
        );
        self.select_masks(&stay.events, &mut rng)
    }
}

/// Targets of a masked sequence, addressed by token row (specials first).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTargets {
    pub mep_rows: Vec<usize>,
    pub mep_targets: Vec<usize>,
    pub mep_types: Vec<SourceType>,
    pub vp_rows: Vec<usize>,
    pub vp_targets: Vec<f64>,
}

impl MaskedTargets {
    pub fn new(stay: &EncodedStay, plan: &MaskPlan) -> Result<Self> {
        let n = stay.events.len();
        if plan.mep.len() != n || plan.vp.len() != n {
            return Err(crate::embedding::EmbeddingError::PlanLength {
                plan: plan.mep.len().max(plan.vp.len()),
                events: n,
            }
            .into());
        }
        let mut t = Self {
            mep_rows: Vec::new(),
            mep_targets: Vec::new(),
            mep_types: Vec::new(),
            vp_rows: Vec::new(),
            vp_targets: Vec::new(),
        };
        for (i, e) in stay.events.iter().enumerate() {
            if plan.mep[i] && plan.vp[i] {
                return Err(Error::Config(format!("event {i} is in both mask sets")));
            }
            if plan.mep[i] {
                t.mep_rows.push(SPECIAL_TOKENS + i);
                t.mep_targets.push(e.event);
                t.mep_types.push(e.source_type);
            }
            if plan.vp[i] {
                let Some(v) = e.value else {
                    return Err(Error::Config(format!(
                        "event {i} is VP-masked but has no value"
                    )));
                };
                t.vp_rows.push(SPECIAL_TOKENS + i);
                t.vp_targets.push(v);
            }
        }
        Ok(t)
    }
}

/// Linear MEP (d → event vocabulary) and VP (d → 1) heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PretrainHeads {
    pub mep_w: ParamId,
    pub mep_b: ParamId,
    pub vp_w: ParamId,
    pub vp_b: ParamId,
}

impl PretrainHeads {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        n_events: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let tn = Init::TruncatedNormal(init_std);
        let h = ParamGroup::Head;
        Self {
            mep_w: store.add("pretrain.mep.w", &[d_model, n_events], tn, h, rng),
            mep_b: store.add("pretrain.mep.b", &[1, n_events], Init::Zeros, h, rng),
            vp_w: store.add("pretrain.vp.w", &[d_model, 1], tn, h, rng),
            vp_b: store.add("pretrain.vp.b", &[1, 1], Init::Zeros, h, rng),
        }
    }

    pub fn mep_width(&self, store: &ParamStore) -> usize {
        store.get(self.mep_w).shape()[1]
    }

    /// `[K × V]` logits at the given token rows.
    pub fn mep_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var> {
        linear_rows(g, store, hidden, rows, self.mep_w, self.mep_b)
    }

    /// `[K_v × 1]` value predictions at the given token rows.
    pub fn vp_preds(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var> {
        linear_rows(g, store, hidden, rows, self.vp_w, self.vp_b)
    }
}

fn linear_rows(
    g: &mut Graph,
    store: &ParamStore,
    hidden: Var,
    rows: &[usize],
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let h = g.select_rows(hidden, rows)?;
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(h, w)?;
    Ok(g.add_bias(y, b)?)
}

/// A loss value; `empty` marks a batch with nothing to score, where the
/// value is defined as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

/// `−(1/K) Σ log softmax(logits_k)[target_k]`.
pub fn mep_loss(logits: &Tensor, targets: &[usize]) -> LossValue {
    if targets.is_empty() {
        return LossValue {
            value: 0.0,
            empty: true,
        };
    }
    let v = logits.shape()[1];
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let row = &logits.data()[k * v..(k + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    LossValue {
        value: total / targets.len() as f64,
        empty: false,
    }
}

/// `(1/K_v) Σ (pred − target)²`, 0 when there are no targets.
pub fn vp_loss(preds: &[f64], targets: &[f64]) -> LossValue {
    if targets.is_empty() {
        return LossValue {
            value: 0.0,
            empty: true,
        };
    }
    let s: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    LossValue {
        value: s / targets.len() as f64,
        empty: false,
    }
}

pub fn total_loss(mep: f64, vp: f64, lambda: f64) -> f64 {
    mep + lambda * vp
}

/// Correct/total counts of masked-event predictions per source type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrecisionCounts {
    pub correct: [usize; 3],
    pub total: [usize; 3],
}

impl PrecisionCounts {
    pub fn merge(&mut self, other: &Self) {
        for i in 0..3 {
            self.correct[i] += other.correct[i];
            self.total[i] += other.total[i];
        }
    }

    pub fn per_type(&self, st: SourceType) -> Option<f64> {
        let i = st.index();
        (self.total[i] > 0).then(|| self.correct[i] as f64 / self.total[i] as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let t: usize = self.total.iter().sum();
        (t > 0).then(|| self.correct.iter().sum::<usize>() as f64 / t as f64)
    }
}

/// Counts positions where `argmax(logits) == target`, grouped by type.
/// Ties resolve to the lowest index.
pub fn masked_precision(
    logits: &Tensor,
    targets: &[usize],
    types: &[SourceType],
) -> PrecisionCounts {
    let mut c = PrecisionCounts::default();
    if targets.is_empty() {
        return c;
    }
    let v = logits.shape()[1];
    for (k, (&t, &st)) in targets.iter().zip(types).enumerate() {
        let row = &logits.data()[k * v..(k + 1) * v];
        let best = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (j, &x)| if x > acc.1 { (j, x) } else { acc },
            )
            .0;
        c.total[st.index()] += 1;
        c.correct[st.index()] += usize::from(best == t);
    }
    c
}

/// Graph loss of one masked sequence, already weighted by batch totals so
/// that summing over the batch gives `L_MEP + λ·L_VP`.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub loss: Var,
    /// `Σ −log p(target)` over this sample's MEP positions.
    pub mep_sum: f64,
    /// `Σ (pred − target)²` over this sample's VP positions.
    pub vp_sum: f64,
    pub logits: Option<Tensor>,
    pub preds: Option<Tensor>,
    pub precision: PrecisionCounts,
}

/// Batch-level normalizers: total MEP and VP positions in the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchTotals {
    pub mep: usize,
    pub vp: usize,
}

pub fn sample_loss(
    g: &mut Graph,
    model: &crate::model::PulseModel,
    heads: &PretrainHeads,
    stay: &EncodedStay,
    plan: &MaskPlan,
    totals: BatchTotals,
    lambda: f64,
) -> Result<SampleLoss> {
    let targets = MaskedTargets::new(stay, plan)?;
    let f = model.forward(g, stay, &plan.corruption())?;
    let store = &model.store;
    let mut terms = Vec::new();
    let mut out = SampleLoss {
        loss: g.constant(Tensor::scalar(0.0)),
        mep_sum: 0.0,
        vp_sum: 0.0,
        logits: None,
        preds: None,
        precision: PrecisionCounts::default(),
    };
    if !targets.mep_rows.is_empty() {
        let logits = heads.mep_logits(g, store, f.hidden, &targets.mep_rows)?;
        let w = vec![1.0 / totals.mep as f64; targets.mep_rows.len()];
        terms.push(g.cross_entropy_weighted(logits, &targets.mep_targets, &w)?);
        let lt = g.value(logits).clone();
        out.mep_sum = mep_loss(&lt, &targets.mep_targets).value * targets.mep_rows.len() as f64;
        out.precision = masked_precision(&lt, &targets.mep_targets, &targets.mep_types);
        out.logits = Some(lt);
    }
    if !targets.vp_rows.is_empty() {
        let preds = heads.vp_preds(g, store, f.hidden, &targets.vp_rows)?;
        let target = g.constant(Tensor::new(
            vec![targets.vp_rows.len(), 1],
            targets.vp_targets.clone(),
        )?);
        let diff = g.sub(preds, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        terms.push(g.scale(s, lambda / totals.vp as f64)?);
        let pt = g.value(preds).clone();
        out.vp_sum = vp_loss(pt.data(), &targets.vp_targets).value * targets.vp_rows.len() as f64;
        out.preds = Some(pt);
    }
    if !terms.is_empty() {
        out.loss = g.add_all(&terms)?;
    }
    Ok(out)
}
