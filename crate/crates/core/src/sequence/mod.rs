//! Turns parsed stays into model-ready event sequences: cleaning, windowing,
//! truncation, segmentation, variable restriction and the pretraining split.

mod clean;
mod split;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::event_data::{ClinicalEvent, StayRecord};

pub use clean::{clean_events, compute_bounds, percentile};
pub use split::{split_pretrain, PretrainSplit};

/// Number of special tokens prepended to every sequence.
pub const SPECIAL_TOKENS: usize = 3;

pub const CORE_VARIABLES: &str = include_str!("../../assets/core_variables.txt");

#[derive(Debug, thiserror::Error)]
pub enum SequenceError {
    #[error("events not sorted by offset at index {index}")]
    Unsorted { index: usize },
    #[error("stay `{stay_id}` has {n} events after filtering (minimum {min})")]
    BelowMinEvents {
        stay_id: String,
        n: usize,
        min: usize,
    },
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),
    #[error("variable filter is empty")]
    EmptyFilter,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    First,
    #[default]
    Last,
    WholeOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub observation_hours: f64,
    pub gap_hours: f64,
    pub truncation_mode: TruncationMode,
    /// Full sequence budget, special tokens included.
    pub max_tokens: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            observation_hours: 24.0,
            gap_hours: 12.0,
            truncation_mode: TruncationMode::Last,
            max_tokens: 4093,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), SequenceError> {
        if !(self.observation_hours > 0.0 && self.observation_hours.is_finite()) {
            return Err(SequenceError::InvalidSpec(
                "observation_hours must be positive".into(),
            ));
        }
        if !(self.gap_hours >= 0.0 && self.gap_hours.is_finite()) {
            return Err(SequenceError::InvalidSpec(
                "gap_hours must be non-negative".into(),
            ));
        }
        if self.max_tokens < SPECIAL_TOKENS + 1 {
            return Err(SequenceError::InvalidSpec(format!(
                "max_tokens must be at least {}",
                SPECIAL_TOKENS + 1
            )));
        }
        Ok(())
    }

    /// Events that fit next to the special tokens.
    pub fn event_budget(&self) -> usize {
        self.max_tokens.saturating_sub(SPECIAL_TOKENS)
    }

    /// Hour at which supervision windows may start.
    pub fn prediction_start_hours(&self) -> f64 {
        self.observation_hours + self.gap_hours
    }
}

/// Allowed event names, or pass-all.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VariableFilter {
    allowed: Option<BTreeSet<String>>,
}

impl VariableFilter {
    pub fn pass_all() -> Self {
        Self { allowed: None }
    }

    pub fn only<I, S>(names: I) -> Result<Self, SequenceError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let allowed: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        if allowed.is_empty() {
            return Err(SequenceError::EmptyFilter);
        }
        Ok(Self {
            allowed: Some(allowed),
        })
    }

    /// One name per line; blank lines and `#` comments are skipped.
    pub fn parse_list(text: &str) -> Result<Self, SequenceError> {
        Self::only(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self, SequenceError> {
        Self::parse_list(&std::fs::read_to_string(path)?)
    }

    /// The shipped 72-name core list.
    pub fn core() -> Self {
        Self::parse_list(CORE_VARIABLES).expect("core list is non-empty")
    }

    pub fn is_active(&self) -> bool {
        self.allowed.is_some()
    }

    pub fn allows(&self, name: &str) -> bool {
        self.allowed.as_ref().is_none_or(|a| a.contains(name))
    }

    pub fn len(&self) -> Option<usize> {
        self.allowed.as_ref().map(BTreeSet::len)
    }
}

/// Positions start at 0 and increase by 1 exactly when the offset strictly
/// increases.
pub fn assign_positions(events: &mut [ClinicalEvent]) -> Result<(), SequenceError> {
    for i in 1..events.len() {
        if events[i].offset_days < events[i - 1].offset_days {
            return Err(SequenceError::Unsorted { index: i });
        }
    }
    let mut pos = 0;
    for i in 0..events.len() {
        if i > 0 && events[i].offset_days > events[i - 1].offset_days {
            pos += 1;
        }
        events[i].position = pos;
    }
    Ok(())
}

/// Shifts positions so the first event sits at 0. Keeps relative structure.
pub fn rebase_positions(events: &mut [ClinicalEvent]) {
    if let Some(first) = events.first().map(|e| e.position) {
        for e in events.iter_mut() {
            e.position -= first;
        }
    }
}

/// Keeps events with `offset_hours <= observation_hours`.
pub fn window_events(stay: &StayRecord, spec: &WindowSpec) -> StayRecord {
    let mut out = stay.clone();
    out.events
        .retain(|e| e.offset_hours() <= spec.observation_hours);
    out
}

/// Applies `mode` with an event cap. `None` means the sample is excluded
/// (`whole_only` on an over-long sequence).
pub fn truncate(
    events: &[ClinicalEvent],
    mode: TruncationMode,
    cap: usize,
) -> Option<Vec<ClinicalEvent>> {
    if events.len() <= cap {
        return Some(events.to_vec());
    }
    match mode {
        TruncationMode::First => Some(events[..cap].to_vec()),
        TruncationMode::Last => Some(events[events.len() - cap..].to_vec()),
        TruncationMode::WholeOnly => None,
    }
}

/// Truncates a stay to the spec's event budget and rebases positions.
pub fn truncate_stay(stay: &StayRecord, spec: &WindowSpec) -> Option<StayRecord> {
    let mut events = truncate(&stay.events, spec.truncation_mode, spec.event_budget())?;
    rebase_positions(&mut events);
    Some(StayRecord {
        events,
        ..stay.clone()
    })
}

/// Consecutive chunks of at most `cap` events whose concatenation is the input.
pub fn segment_long_stay(events: &[ClinicalEvent], cap: usize) -> Vec<Vec<ClinicalEvent>> {
    assert!(cap > 0, "segment cap must be positive");
    if events.is_empty() {
        return vec![Vec::new()];
    }
    events.chunks(cap).map(<[ClinicalEvent]>::to_vec).collect()
}

/// Splits a stay into segment stays (ids suffixed `#k` when there is more
/// than one), each with rebased positions.
pub fn segment_stay(stay: &StayRecord, cap: usize) -> Vec<StayRecord> {
    let segments = segment_long_stay(&stay.events, cap);
    let many = segments.len() > 1;
    segments
        .into_iter()
        .enumerate()
        .map(|(k, mut events)| {
            rebase_positions(&mut events);
            StayRecord {
                stay_id: if many {
                    format!("{}#{k}", stay.stay_id)
                } else {
                    stay.stay_id.clone()
                },
                events,
                ..stay.clone()
            }
        })
        .collect()
}

/// Drops events outside the filter, reassigns positions, and rejects stays
/// left with fewer than `min_events`.
pub fn limit_variables(
    stay: &StayRecord,
    filter: &VariableFilter,
    min_events: usize,
) -> Result<StayRecord, SequenceError> {
    let mut out = stay.clone();
    out.events.retain(|e| filter.allows(&e.event_name));
    assign_positions(&mut out.events)?;
    if out.events.len() < min_events {
        return Err(SequenceError::BelowMinEvents {
            stay_id: stay.stay_id.clone(),
            n: out.events.len(),
            min: min_events,
        });
    }
    Ok(out)
}

/// Cohort rule: a stay needs at least this many events.
pub const MIN_EVENTS: usize = 10;
