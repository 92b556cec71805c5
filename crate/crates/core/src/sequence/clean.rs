use std::collections::{BTreeMap, HashSet};

use crate::event_data::{ClinicalEvent, SourceType, StayRecord, VariableBounds};

/// Linear-interpolation percentile of sorted data, `p` in `[0, 1]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// 1st/99th percentile bounds per valued variable.
pub fn compute_bounds<'a>(
    stays: impl IntoIterator<Item = &'a StayRecord>,
) -> BTreeMap<String, VariableBounds> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for stay in stays {
        for e in &stay.events {
            if let Some(v) = e.value {
                values.entry(e.event_name.as_str()).or_default().push(v);
            }
        }
    }
    values
        .into_iter()
        .map(|(name, mut v)| {
            v.sort_by(f64::total_cmp);
            let b = VariableBounds {
                lower: percentile(&v, 0.01),
                upper: percentile(&v, 0.99),
            };
            (name.to_string(), b)
        })
        .collect()
}

fn keep(
    e: &ClinicalEvent,
    bounds: &BTreeMap<String, VariableBounds>,
    los_days: Option<f64>,
) -> bool {
    if e.offset_days < 0.0 || los_days.is_some_and(|los| e.offset_days > los) {
        return false;
    }
    let (Some(v), Some(b)) = (e.value, bounds.get(&e.event_name)) else {
        return true;
    };
    match e.source_type {
        SourceType::Input => v <= b.upper,
        SourceType::Chart | SourceType::Procedure => b.lower <= v && v <= b.upper,
    }
}

/// Removes implausible values and events outside `[0, icu_los_days]`.
/// Valued variables without bounds pass through with a warning. Positions
/// are left as they are, so cleaning is idempotent and commutes with
/// windowing.
pub fn clean_events(stay: &StayRecord, bounds: &BTreeMap<String, VariableBounds>) -> StayRecord {
    let los = stay.label_f64("icu_los_days");
    let mut warned = HashSet::new();
    for e in &stay.events {
        if e.value.is_some()
            && !bounds.contains_key(&e.event_name)
            && warned.insert(e.event_name.as_str())
        {
            log::warn!(
                "stay {}: no cleaning bounds for `{}`",
                stay.stay_id,
                e.event_name
            );
        }
    }
    let mut out = stay.clone();
    out.events.retain(|e| keep(e, bounds, los));
    out
}
