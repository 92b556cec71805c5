//! From parsed stays to labeled, windowed, encoded model inputs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::config::RunConfig;
use crate::downstream::{derive_labels, LabelConfig, LabeledStay, SofaRules};
use crate::error::{Error, Result};
use crate::event_data::{encode_stay, EncodedStay, StayRecord, VariableBounds, Vocabulary};
use crate::seeding::derive_rng;
use crate::sequence::{
    clean_events, limit_variables, truncate_stay, window_events, VariableFilter, WindowSpec,
};

/// Stay-level split into train, validation and test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_stays(n: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derive_rng(seed, "cohort_split", &[]));
    let n_test = ((test_fraction * n as f64).round() as usize).min(n);
    let n_val = ((val_fraction * n as f64).round() as usize).min(n - n_test);
    let mut test = idx[..n_test].to_vec();
    let mut val = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Split { train, val, test }
}

/// Shared settings for turning one stay into a model input.
#[derive(Clone, Debug)]
pub struct Preparer {
    pub bounds: BTreeMap<String, VariableBounds>,
    pub window: WindowSpec,
    pub filter: VariableFilter,
    pub min_events: usize,
    pub labels: LabelConfig,
    pub rules: SofaRules,
}

impl Preparer {
    pub fn from_config(cfg: &RunConfig, bounds: BTreeMap<String, VariableBounds>) -> Result<Self> {
        let filter = match (&cfg.data.variables_file, cfg.data.core_variables) {
            (Some(path), _) => VariableFilter::from_file(path)?,
            (None, true) => VariableFilter::core(),
            (None, false) => VariableFilter::pass_all(),
        };
        let rules = match &cfg.data.sofa_rules {
            Some(path) => SofaRules::from_toml(&std::fs::read_to_string(path)?)?,
            None => SofaRules::default(),
        };
        Ok(Self {
            bounds,
            window: cfg.window,
            filter,
            min_events: cfg.data.min_events,
            labels: cfg.labels.clone(),
            rules,
        })
    }

    /// Clean, window, filter and truncate; labels come from the full stay.
    /// `None` when the stay drops out of the cohort.
    pub fn prepare(&self, stay: &StayRecord, vocab: &Vocabulary) -> Option<LabeledStay> {
        let cleaned = clean_events(stay, &self.bounds);
        let mut windowed = window_events(&cleaned, &self.window);
        if self.filter.is_active() {
            windowed = limit_variables(&windowed, &self.filter, self.min_events).ok()?;
        }
        let truncated = truncate_stay(&windowed, &self.window)?;
        if truncated.events.is_empty() {
            return None;
        }
        Some(LabeledStay {
            stay: encode_stay(&truncated, vocab),
            labels: derive_labels(stay, &self.window, &self.labels, &self.rules),
        })
    }
}

/// Model-ready cohort. Stays that drop out are counted, not kept.
#[derive(Clone, Debug)]
pub struct PreparedCohort {
    pub vocab: Vocabulary,
    pub train: Vec<LabeledStay>,
    pub val: Vec<LabeledStay>,
    pub test: Vec<LabeledStay>,
    pub excluded: usize,
}

impl PreparedCohort {
    /// Prepares `stays` split by the config seed. `vocab` encodes the
    /// stays; pass a model's own vocabulary to evaluate it on a new cohort.
    pub fn build(
        stays: &[StayRecord],
        vocab: &Vocabulary,
        bounds: BTreeMap<String, VariableBounds>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        if stays.is_empty() {
            return Err(Error::EmptyData("cohort has no stays".into()));
        }
        let prep = Preparer::from_config(cfg, bounds)?;
        let split = split_stays(
            stays.len(),
            cfg.data.test_fraction,
            cfg.data.val_fraction,
            cfg.seed,
        );
        let mut excluded = 0;
        let mut take = |idx: &[usize]| -> Vec<LabeledStay> {
            idx.iter()
                .filter_map(|&i| {
                    let s = prep.prepare(&stays[i], vocab);
                    excluded += usize::from(s.is_none());
                    s
                })
                .collect()
        };
        let train = take(&split.train);
        let val = take(&split.val);
        let test = take(&split.test);
        if train.is_empty() {
            return Err(Error::EmptyData(
                "no training stays left after preparation".into(),
            ));
        }
        Ok(Self {
            vocab: vocab.clone(),
            train,
            val,
            test,
            excluded,
        })
    }

    pub fn train_stays(&self) -> Vec<EncodedStay> {
        self.train.iter().map(|s| s.stay.clone()).collect()
    }

    /// Every prepared stay, ordered by stay id.
    pub fn all(&self) -> Vec<&LabeledStay> {
        let mut all: Vec<&LabeledStay> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .collect();
        all.sort_by(|a, b| a.stay.stay_id.cmp(&b.stay.stay_id));
        all
    }
}
