//! Reader and writer for the stay file format.
//!
//! ```text
//! STAY<TAB>stay_id<TAB>age_years<TAB>gender<TAB>key=value;key=value
//! event_name<TAB>value<TAB>unit<TAB>offset_days<TAB>order_name<TAB>order_desc<TAB>source_type
//! ...
//! ```
//!
//! UTF-8, one event per line. An empty field means the attribute is absent.
//! Events may appear in any order; they are stably sorted by offset on read
//! and positions are assigned from the sorted offsets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::types::{age_bucket, ClinicalEvent, SourceType, StayRecord};
use super::EventDataError;
use crate::sequence::assign_positions;

pub const HEADER_TAG: &str = "STAY";
const EVENT_FIELDS: usize = 7;

#[derive(Clone, Copy, Debug)]
pub struct ParseOptions {
    pub age_bin_years: u32,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { age_bin_years: 5 }
    }
}

pub fn parse_stay_file(bytes: &[u8]) -> Result<StayRecord, EventDataError> {
    parse_stay_file_with(bytes, ParseOptions::default())
}

pub fn parse_stay_file_with(
    bytes: &[u8],
    opts: ParseOptions,
) -> Result<StayRecord, EventDataError> {
    let text = std::str::from_utf8(bytes).map_err(|e| EventDataError::Malformed {
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(EventDataError::Malformed {
        line: 1,
        msg: "missing header line".into(),
    })?;
    let (stay_id, age_years, gender, raw_labels) = parse_header(header)?;

    let mut events = Vec::new();
    for (idx, line) in lines {
        events.push(parse_event_line(line, idx + 1)?);
    }
    // Stable: equal offsets keep file order.
    events.sort_by(|a, b| a.offset_days.total_cmp(&b.offset_days));
    assign_positions(&mut events).expect("sorted events");

    Ok(StayRecord {
        stay_id,
        age_years,
        age_bucket: age_bucket(age_years, opts.age_bin_years),
        gender,
        events,
        raw_labels,
    })
}

type Header = (String, Option<f64>, String, BTreeMap<String, String>);

fn parse_header(line: &str) -> Result<Header, EventDataError> {
    let malformed = |msg: String| EventDataError::Malformed { line: 1, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 || fields[0] != HEADER_TAG {
        return Err(malformed(format!(
            "header must be `{HEADER_TAG}<TAB>stay_id<TAB>age<TAB>gender<TAB>labels`, got {} fields",
            fields.len()
        )));
    }
    let stay_id = fields[1].to_string();
    if stay_id.is_empty() {
        return Err(malformed("empty stay_id".into()));
    }
    let age_years = match fields[2] {
        "" => None,
        s => Some(
            s.parse::<f64>()
                .ok()
                .filter(|a| a.is_finite() && *a >= 0.0)
                .ok_or_else(|| malformed(format!("invalid age `{s}`")))?,
        ),
    };
    let gender = fields[3].to_string();
    let mut labels = BTreeMap::new();
    for pair in fields[4].split(';').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| malformed(format!("label entry `{pair}` is not key=value")))?;
        if labels.insert(k.to_string(), v.to_string()).is_some() {
            return Err(malformed(format!("duplicate label key `{k}`")));
        }
    }
    Ok((stay_id, age_years, gender, labels))
}

fn parse_event_line(line: &str, line_no: usize) -> Result<ClinicalEvent, EventDataError> {
    let malformed = |msg: String| EventDataError::Malformed { line: line_no, msg };
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != EVENT_FIELDS {
        return Err(malformed(format!(
            "expected {EVENT_FIELDS} tab-separated fields, got {}",
            f.len()
        )));
    }
    if f[0].is_empty() {
        return Err(malformed("empty event name".into()));
    }
    let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
    let value = match f[1] {
        "" => None,
        s => Some(
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("invalid value `{s}`")))?,
        ),
    };
    let offset_days: f64 = f[3]
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite())
        .ok_or_else(|| malformed(format!("invalid offset `{}`", f[3])))?;
    if offset_days < 0.0 {
        return Err(EventDataError::NegativeOffset {
            line: line_no,
            offset: offset_days,
        });
    }
    let source_type =
        f[6].parse::<SourceType>()
            .map_err(|value| EventDataError::UnknownSourceType {
                line: line_no,
                value,
            })?;
    Ok(ClinicalEvent {
        event_name: f[0].to_string(),
        value,
        unit: opt(f[2]),
        offset_days,
        position: 0,
        order_name: opt(f[4]),
        order_desc: opt(f[5]),
        source_type,
    })
}

/// Canonical serialization; `parse(serialize(s)) == s` for any parsed `s`.
pub fn serialize_stay(stay: &StayRecord) -> String {
    let mut out = String::new();
    let age = stay.age_years.map(|a| a.to_string()).unwrap_or_default();
    let labels: Vec<String> = stay
        .raw_labels
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    let _ = writeln!(
        out,
        "{HEADER_TAG}\t{}\t{age}\t{}\t{}",
        stay.stay_id,
        stay.gender,
        labels.join(";")
    );
    for e in &stay.events {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.event_name,
            e.value.map(|v| v.to_string()).unwrap_or_default(),
            e.unit.as_deref().unwrap_or(""),
            e.offset_days,
            e.order_name.as_deref().unwrap_or(""),
            e.order_desc.as_deref().unwrap_or(""),
            e.source_type
        );
    }
    out
}
