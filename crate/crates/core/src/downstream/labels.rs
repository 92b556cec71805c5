use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Task, PHENOTYPE_LABELS};
use crate::error::{Error, Result};
use crate::event_data::StayRecord;
use crate::sequence::WindowSpec;

pub const DEFAULT_SOFA_RULES: &str = include_str!("../../assets/sofa_rules.toml");

/// Realized label of one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Binary(bool),
    Class(usize),
    Multi(Vec<bool>),
}

/// Labels of one stay; a missing task means "not available".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    pub labels: BTreeMap<Task, Label>,
}

impl LabelSet {
    pub fn get(&self, task: Task) -> Option<&Label> {
        self.labels.get(&task)
    }

    pub fn is_available(&self, task: Task) -> bool {
        self.labels.contains_key(&task)
    }

    pub fn set(&mut self, task: Task, label: Option<Label>) {
        match label {
            Some(l) => {
                self.labels.insert(task, l);
            }
            None => {
                self.labels.remove(&task);
            }
        }
    }

    pub fn remove(&mut self, task: Task) {
        self.labels.remove(&task);
    }

    /// Label as flat numbers: one cell for binary and multi-class tasks, 25
    /// for the phenotype.
    pub fn cells(&self, task: Task) -> Vec<Option<f64>> {
        match self.labels.get(&task) {
            None => vec![
                None;
                if task == Task::Phenotype {
                    PHENOTYPE_LABELS
                } else {
                    1
                }
            ],
            Some(Label::Binary(b)) => vec![Some(f64::from(u8::from(*b)))],
            Some(Label::Class(c)) => vec![Some(*c as f64)],
            Some(Label::Multi(bits)) => {
                bits.iter().map(|&b| Some(f64::from(u8::from(b)))).collect()
            }
        }
    }
}

/// Event names and thresholds used by the label rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub shock_hours: f64,
    pub intervention_hours: f64,
    pub short_mortality_hours: f64,
    pub sofa_hours: f64,
    pub mortality_days: f64,
    pub readmission_days: f64,
    pub los_short_days: f64,
    pub los_long_days: f64,
    /// Lactate and MAP criteria must hold in the same bucket of this width.
    pub shock_bucket_hours: f64,
    pub lactate_threshold: f64,
    pub map_threshold: f64,
    pub lactate: Vec<String>,
    pub map: Vec<String>,
    pub vasopressors: Vec<String>,
    pub transfusions: Vec<String>,
    pub ventilation: Vec<String>,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            shock_hours: 8.0,
            intervention_hours: 12.0,
            short_mortality_hours: 48.0,
            sofa_hours: 24.0,
            mortality_days: 30.0,
            readmission_days: 30.0,
            los_short_days: 3.0,
            los_long_days: 7.0,
            shock_bucket_hours: 1.0,
            lactate_threshold: 2.0,
            map_threshold: 65.0,
            lactate: names(&["Lactate"]),
            map: names(&["MAP"]),
            vasopressors: names(&[
                "Norepinephrine",
                "Epinephrine",
                "Dopamine",
                "Vasopressin",
                "Phenylephrine",
            ]),
            transfusions: names(&[
                "Packed Red Blood Cells",
                "Fresh Frozen Plasma",
                "Platelet Transfusion",
            ]),
            ventilation: names(&["Invasive Ventilation"]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SofaSystem {
    Cns,
    Cardiovascular,
    Respiratory,
    Coagulation,
    Liver,
    Renal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Larger values are worse.
    Higher,
    /// Smaller values are worse.
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SofaRule {
    pub system: SofaSystem,
    pub variables: Vec<String>,
    pub direction: Direction,
    /// At most three thresholds, ordered from mild to severe.
    pub thresholds: Vec<f64>,
}

impl SofaRule {
    pub fn classify(&self, v: f64) -> usize {
        match self.direction {
            Direction::Higher => self.thresholds.iter().filter(|&&t| v >= t).count(),
            Direction::Lower => self.thresholds.iter().filter(|&&t| v < t).count(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.variables.is_empty() || self.thresholds.is_empty() || self.thresholds.len() > 3 {
            return Err(Error::Config(format!(
                "SOFA rule {:?} needs variables and 1-3 thresholds",
                self.system
            )));
        }
        let ordered = self.thresholds.windows(2).all(|w| match self.direction {
            Direction::Higher => w[0] < w[1],
            Direction::Lower => w[0] > w[1],
        });
        if !ordered || self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config(format!(
                "SOFA rule {:?}: thresholds must be finite and strictly ordered from mild to severe",
                self.system
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SofaRules {
    pub systems: Vec<SofaRule>,
}

impl Default for SofaRules {
    fn default() -> Self {
        Self::from_toml(DEFAULT_SOFA_RULES).expect("bundled SOFA rules are valid")
    }
}

impl SofaRules {
    pub fn from_toml(text: &str) -> Result<Self> {
        let rules: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("SOFA rules: {e}")))?;
        for (i, r) in rules.systems.iter().enumerate() {
            r.validate()?;
            if rules.systems[..i].iter().any(|o| o.system == r.system) {
                return Err(Error::Config(format!(
                    "SOFA rule {:?} defined twice",
                    r.system
                )));
            }
        }
        Ok(rules)
    }

    pub fn rule(&self, system: SofaSystem) -> Option<&SofaRule> {
        self.systems.iter().find(|r| r.system == system)
    }
}

fn in_window(t: f64, start: f64, len: f64) -> bool {
    t >= start && t < start + len
}

fn matches(name: &str, list: &[String]) -> bool {
    list.iter().any(|n| n == name)
}

/// Worst class of `system` over valued measurements with offset in
/// `[start_h, start_h + len_h)`; `None` when the rule or its variable is
/// missing there.
pub fn derive_sofa_label(
    stay: &StayRecord,
    system: SofaSystem,
    rules: &SofaRules,
    start_h: f64,
    len_h: f64,
) -> Option<usize> {
    let rule = rules.rule(system)?;
    stay.events
        .iter()
        .filter(|e| {
            in_window(e.offset_hours(), start_h, len_h) && matches(&e.event_name, &rule.variables)
        })
        .filter_map(|e| e.value)
        .map(|v| rule.classify(v))
        .max()
}

/// Shock within `[start_h, start_h + horizon_h)`: any vasopressor event, or
/// lactate and MAP criteria met in the same time bucket. `None` when the
/// stay has no lactate, MAP or vasopressor record at all.
pub fn derive_shock_label(
    stay: &StayRecord,
    start_h: f64,
    horizon_h: f64,
    cfg: &LabelConfig,
) -> Option<bool> {
    let any_stream = stay.events.iter().any(|e| {
        matches(&e.event_name, &cfg.lactate)
            || matches(&e.event_name, &cfg.map)
            || matches(&e.event_name, &cfg.vasopressors)
    });
    if !any_stream {
        return None;
    }
    let mut lactate_buckets = Vec::new();
    let mut map_buckets = Vec::new();
    for e in &stay.events {
        let t = e.offset_hours();
        if !in_window(t, start_h, horizon_h) {
            continue;
        }
        if matches(&e.event_name, &cfg.vasopressors) {
            return Some(true);
        }
        let bucket = (t / cfg.shock_bucket_hours).floor() as i64;
        match e.value {
            Some(v) if matches(&e.event_name, &cfg.lactate) && v >= cfg.lactate_threshold => {
                lactate_buckets.push(bucket)
            }
            Some(v) if matches(&e.event_name, &cfg.map) && v <= cfg.map_threshold => {
                map_buckets.push(bucket)
            }
            _ => {}
        }
    }
    Some(lactate_buckets.iter().any(|b| map_buckets.contains(b)))
}

/// `"none"` → `Some(None)`, a number → `Some(Some(x))`, absent or
/// unparsable → `None`.
fn optional_time(stay: &StayRecord, key: &str) -> Option<Option<f64>> {
    match stay.raw_labels.get(key).map(String::as_str) {
        None => None,
        Some("none") => Some(None),
        Some(s) => s.parse::<f64>().ok().filter(|x| x.is_finite()).map(Some),
    }
}

/// The eleven binary labels. Prediction windows start after the
/// observation window and the gap.
pub fn derive_window_labels(stay: &StayRecord, window: &WindowSpec, cfg: &LabelConfig) -> LabelSet {
    let mut out = LabelSet::default();
    let p = window.prediction_start_hours();
    let los = stay.label_f64("icu_los_days");
    let reaches_p = los.filter(|&l| l * 24.0 >= p);
    let hosp_admit = stay.label_f64("hosp_admit_days").unwrap_or(0.0);

    if let Some(death) = optional_time(stay, "death_days") {
        let usable = death.is_none_or(|d| d * 24.0 >= p);
        if usable {
            out.set(
                Task::Mortality30d,
                Some(Label::Binary(
                    death.is_some_and(|d| d - hosp_admit <= cfg.mortality_days),
                )),
            );
            let hosp = stay.label_f64("hosp_discharge_days");
            out.set(
                Task::MortalityHospital,
                hosp.map(|h| Label::Binary(death.is_some_and(|d| d <= h))),
            );
            out.set(
                Task::MortalityIcu,
                los.map(|l| Label::Binary(death.is_some_and(|d| d <= l))),
            );
            out.set(
                Task::Mortality48h,
                Some(Label::Binary(death.is_some_and(|d| {
                    in_window(d * 24.0, p, cfg.short_mortality_hours)
                }))),
            );
        }
    }

    if let Some(l) = reaches_p {
        out.set(Task::Los3d, Some(Label::Binary(l > cfg.los_short_days)));
        out.set(Task::Los7d, Some(Label::Binary(l > cfg.los_long_days)));
        if let Some(next) = optional_time(stay, "next_icu_admit_days") {
            out.set(
                Task::Readmission30d,
                Some(Label::Binary(
                    next.is_some_and(|n| n - l <= cfg.readmission_days),
                )),
            );
        }
        let any_in = |list: &[String], h: f64| {
            stay.events
                .iter()
                .any(|e| matches(&e.event_name, list) && in_window(e.offset_hours(), p, h))
        };
        out.set(
            Task::Transfusion12h,
            Some(Label::Binary(any_in(
                &cfg.transfusions,
                cfg.intervention_hours,
            ))),
        );
        out.set(
            Task::Vasopressor12h,
            Some(Label::Binary(any_in(
                &cfg.vasopressors,
                cfg.intervention_hours,
            ))),
        );
        out.set(
            Task::Ventilation12h,
            Some(Label::Binary(any_in(
                &cfg.ventilation,
                cfg.intervention_hours,
            ))),
        );
        out.set(
            Task::Shock8h,
            derive_shock_label(stay, p, cfg.shock_hours, cfg).map(Label::Binary),
        );
    }
    out
}

/// All eighteen labels.
pub fn derive_labels(
    stay: &StayRecord,
    window: &WindowSpec,
    cfg: &LabelConfig,
    rules: &SofaRules,
) -> LabelSet {
    let mut out = derive_window_labels(stay, window, cfg);
    let p = window.prediction_start_hours();
    let reaches_p = stay
        .label_f64("icu_los_days")
        .is_some_and(|l| l * 24.0 >= p);
    for task in Task::ALL {
        if let Some(system) = task.sofa_system() {
            let label = reaches_p
                .then(|| derive_sofa_label(stay, system, rules, p, cfg.sofa_hours))
                .flatten();
            out.set(task, label.map(Label::Class));
        }
    }
    if let Some(bits) = stay.raw_labels.get("phenotype") {
        if bits.len() == PHENOTYPE_LABELS && bits.bytes().all(|b| b == b'0' || b == b'1') {
            out.set(
                Task::Phenotype,
                Some(Label::Multi(bits.bytes().map(|b| b == b'1').collect())),
            );
        }
    }
    out
}
