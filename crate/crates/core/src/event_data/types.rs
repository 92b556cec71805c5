use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Origin table of an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    Chart,
    /// Medication and fluid administration.
    Input,
    Procedure,
}

impl SourceType {
    pub const ALL: [SourceType; 3] = [SourceType::Input, SourceType::Chart, SourceType::Procedure];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceType::Chart => "chart",
            SourceType::Input => "input",
            SourceType::Procedure => "procedure",
        }
    }

    pub fn index(self) -> usize {
        match self {
            SourceType::Input => 0,
            SourceType::Chart => 1,
            SourceType::Procedure => 2,
        }
    }
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chart" => Ok(SourceType::Chart),
            "input" => Ok(SourceType::Input),
            "procedure" => Ok(SourceType::Procedure),
            other => Err(other.to_string()),
        }
    }
}

/// One timestamped ICU event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub event_name: String,
    pub value: Option<f64>,
    pub unit: Option<String>,
    /// Days since ICU admission.
    pub offset_days: f64,
    /// Sequence index; events with equal offsets share a position.
    pub position: usize,
    pub order_name: Option<String>,
    pub order_desc: Option<String>,
    pub source_type: SourceType,
}

impl ClinicalEvent {
    pub fn new(event_name: impl Into<String>, offset_days: f64, source_type: SourceType) -> Self {
        Self {
            event_name: event_name.into(),
            value: None,
            unit: None,
            offset_days,
            position: 0,
            order_name: None,
            order_desc: None,
            source_type,
        }
    }

    pub fn with_value(mut self, value: f64, unit: impl Into<String>) -> Self {
        self.value = Some(value);
        self.unit = Some(unit.into());
        self
    }

    pub fn with_order(mut self, name: impl Into<String>, desc: impl Into<String>) -> Self {
        self.order_name = Some(name.into());
        self.order_desc = Some(desc.into());
        self
    }

    pub fn offset_hours(&self) -> f64 {
        self.offset_days * 24.0
    }
}

/// One ICU stay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayRecord {
    pub stay_id: String,
    pub age_years: Option<f64>,
    pub age_bucket: String,
    pub gender: String,
    /// Sorted by `(offset_days, position)`.
    pub events: Vec<ClinicalEvent>,
    /// Stay metadata used by label derivation (`icu_los_days`, `death_days`,
    /// `phenotype`, ...). Values are kept as text.
    pub raw_labels: BTreeMap<String, String>,
}

impl StayRecord {
    pub fn label_f64(&self, key: &str) -> Option<f64> {
        self.raw_labels.get(key).and_then(|v| v.parse().ok())
    }

    /// Length in tokens once the three special tokens are prepended.
    pub fn token_len(&self) -> usize {
        self.events.len() + 3
    }
}

pub const UNKNOWN_AGE_BUCKET: &str = "age_unknown";

/// Categorical age token for a `width`-year bin, e.g. `"65-69"`.
pub fn age_bucket(years: Option<f64>, width: u32) -> String {
    match years {
        Some(y) if y.is_finite() && y >= 0.0 => {
            let w = width.max(1);
            let lo = (y as u32 / w) * w;
            format!("{}-{}", lo, lo + w - 1)
        }
        _ => UNKNOWN_AGE_BUCKET.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_buckets_are_five_years_by_default() {
        assert_eq!(age_bucket(Some(67.9), 5), "65-69");
        assert_eq!(age_bucket(Some(18.0), 5), "15-19");
        assert_eq!(age_bucket(None, 5), UNKNOWN_AGE_BUCKET);
        assert_eq!(age_bucket(Some(42.0), 10), "40-49");
    }

    #[test]
    fn source_type_round_trip() {
        for s in SourceType::ALL {
            assert_eq!(s.as_str().parse::<SourceType>().unwrap(), s);
        }
        assert!("lab".parse::<SourceType>().is_err());
    }
}
