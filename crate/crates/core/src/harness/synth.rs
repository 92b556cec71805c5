//! Synthetic ICU cohorts with planted, learnable label structure.
//!
//! Events follow a fixed slot schedule: every round of `round_len` slots
//! holds the configured share of chart, input and procedure events, spread
//! evenly, and each slot type cycles through its catalog names. Per-stay
//! latent states then decide a few names and values:
//!
//! * shock: input slots carry the vasopressor marker instead of the
//!   baseline fluid, a marker dose is given right after the gap, and MAP
//!   runs low. Without shock MAP stays above the shock threshold.
//! * severity: lactate values sit in a high or a low range, and severe
//!   stays die at ICU discharge.
//! * renal band: every creatinine value lies inside one of four bands.
//!
//! Phenotype bits 0-2 copy the three latents; the rest are noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::downstream::PHENOTYPE_LABELS;
use crate::error::{Error, Result};
use crate::event_data::{
    age_bucket, build_vocabulary, write_dataset, ClinicalEvent, DatasetManifest, SourceType,
    StayRecord, VariableBounds, Vocabulary,
};
use crate::seeding::derive_rng;
use crate::sequence::{assign_positions, compute_bounds};

/// Value law of a catalog variable. Draws are clamped to `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueDist {
    Normal {
        mean: f64,
        sd: f64,
        min: f64,
        max: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
        min: f64,
        max: f64,
    },
    /// `center + scale · t(df)`.
    HeavyTail {
        center: f64,
        scale: f64,
        df: f64,
        min: f64,
        max: f64,
    },
}

impl ValueDist {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            ValueDist::Normal { min, max, .. }
            | ValueDist::LogNormal { min, max, .. }
            | ValueDist::HeavyTail { min, max, .. } => (min, max),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            ValueDist::Normal { sd, .. } => sd > 0.0,
            ValueDist::LogNormal { sigma, .. } => sigma > 0.0,
            ValueDist::HeavyTail { scale, df, .. } => scale > 0.0 && df > 0.0,
        };
        let (lo, hi) = self.bounds();
        if !ok || !(lo < hi) {
            return Err(Error::Config(format!(
                "invalid value distribution for `{name}`"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let v = match *self {
            ValueDist::Normal { mean, sd, .. } => {
                Normal::new(mean, sd).expect("validated").sample(rng)
            }
            ValueDist::LogNormal { mu, sigma, .. } => {
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
            ValueDist::HeavyTail {
                center, scale, df, ..
            } => center + scale * StudentT::new(df).expect("validated").sample(rng),
        };
        let (lo, hi) = self.bounds();
        v.clamp(lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub name: String,
    pub source_type: SourceType,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub value: Option<ValueDist>,
    #[serde(default)]
    pub order_name: Option<String>,
    #[serde(default)]
    pub order_desc: Option<String>,
}

impl CatalogEntry {
    fn chart(name: &str, unit: &str, value: ValueDist) -> Self {
        Self {
            name: name.into(),
            source_type: SourceType::Chart,
            unit: Some(unit.into()),
            value: Some(value),
            order_name: None,
            order_desc: None,
        }
    }

    fn input(name: &str, unit: &str, value: ValueDist, desc: &str) -> Self {
        Self {
            name: name.into(),
            source_type: SourceType::Input,
            unit: Some(unit.into()),
            value: Some(value),
            order_name: Some("Continuous Infusion".into()),
            order_desc: Some(desc.into()),
        }
    }

    fn procedure(name: &str) -> Self {
        Self {
            name: name.into(),
            source_type: SourceType::Procedure,
            unit: None,
            value: None,
            order_name: None,
            order_desc: None,
        }
    }
}

/// Label-bearing rules; every name must exist in the catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedRules {
    pub shock_rate: f64,
    /// Given to shock stays in input slots and right after the gap.
    pub vasopressor: String,
    /// Given in input slots of stays without shock.
    pub baseline_fluid: String,
    pub map: String,
    pub map_shock: [f64; 2],
    pub map_stable: [f64; 2],
    pub severity_rate: f64,
    pub lactate: String,
    pub lactate_high: [f64; 2],
    pub lactate_low: [f64; 2],
    /// Severe stays walk the chart cycle in reverse order.
    pub severity_reverses_charts: bool,
    pub band_variable: String,
    /// Value ranges of the four classes, mild to severe.
    pub bands: [[f64; 2]; 4],
    /// Hours after admission at which the vasopressor dose for shock stays
    /// is placed, as `[from, to)`.
    pub vasopressor_window: [f64; 2],
    pub transfusion: String,
    pub transfusion_rate: f64,
    pub ventilation: String,
    pub ventilation_rate: f64,
    /// Hours after admission in which transfusion and ventilation events
    /// may be placed.
    pub intervention_window: [f64; 2],
    pub phenotype_noise_rate: f64,
}

impl Default for PlantedRules {
    fn default() -> Self {
        Self {
            shock_rate: 0.4,
            vasopressor: "Norepinephrine".into(),
            baseline_fluid: "NaCl 0.9%".into(),
            map: "MAP".into(),
            map_shock: [50.0, 64.0],
            map_stable: [70.0, 95.0],
            severity_rate: 0.35,
            lactate: "Lactate".into(),
            lactate_high: [2.5, 6.0],
            lactate_low: [0.6, 1.8],
            severity_reverses_charts: true,
            band_variable: "Creatinine".into(),
            bands: [[0.5, 1.1], [1.3, 1.9], [2.1, 3.3], [3.7, 6.0]],
            vasopressor_window: [36.5, 43.5],
            transfusion: "Packed Red Blood Cells".into(),
            transfusion_rate: 0.25,
            ventilation: "Invasive Ventilation".into(),
            ventilation_rate: 0.3,
            intervention_window: [36.5, 47.5],
            phenotype_noise_rate: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_stays: usize,
    pub catalog: Vec<CatalogEntry>,
    /// Share of input, chart and procedure slots.
    pub mix_input: f64,
    pub mix_chart: f64,
    pub mix_procedure: f64,
    /// Slots per schedule round.
    pub round_len: usize,
    pub slot_hours: f64,
    /// Uniform offset noise as a fraction of `slot_hours`, below 0.5.
    pub jitter: f64,
    pub los_days: [f64; 2],
    /// When set, every stay has exactly this many scheduled events and its
    /// length of stay follows from it.
    pub events_per_stay: Option<usize>,
    pub age_years: [f64; 2],
    pub rules: PlantedRules,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        use ValueDist::*;
        let n = |mean, sd, min, max| Normal { mean, sd, min, max };
        let catalog = vec![
            CatalogEntry::chart("HR", "bpm", n(86.0, 12.0, 30.0, 200.0)),
            CatalogEntry::chart("MAP", "mmHg", n(80.0, 8.0, 30.0, 150.0)),
            CatalogEntry::chart(
                "Creatinine",
                "mg/dL",
                LogNormal {
                    mu: 0.0,
                    sigma: 0.4,
                    min: 0.2,
                    max: 15.0,
                },
            ),
            CatalogEntry::chart("RR", "insp/min", n(18.0, 4.0, 4.0, 50.0)),
            CatalogEntry::chart("SaO2", "%", n(96.0, 2.0, 70.0, 100.0)),
            CatalogEntry::chart(
                "Lactate",
                "mmol/L",
                LogNormal {
                    mu: 0.2,
                    sigma: 0.4,
                    min: 0.3,
                    max: 20.0,
                },
            ),
            CatalogEntry::chart("Temperature", "C", n(37.0, 0.6, 33.0, 42.0)),
            CatalogEntry::chart("Sodium", "mEq/L", n(139.0, 4.0, 110.0, 170.0)),
            CatalogEntry::chart(
                "Platelets",
                "K/uL",
                HeavyTail {
                    center: 210.0,
                    scale: 45.0,
                    df: 4.0,
                    min: 5.0,
                    max: 900.0,
                },
            ),
            CatalogEntry::chart("GCS Total", "points", n(13.5, 1.5, 3.0, 15.0)),
            CatalogEntry::input(
                "NaCl 0.9%",
                "mL",
                LogNormal {
                    mu: 4.6,
                    sigma: 0.3,
                    min: 10.0,
                    max: 1000.0,
                },
                "Fluids",
            ),
            CatalogEntry::input(
                "Norepinephrine",
                "mcg/kg/min",
                LogNormal {
                    mu: -2.3,
                    sigma: 0.4,
                    min: 0.01,
                    max: 2.0,
                },
                "Vasoactive",
            ),
            CatalogEntry::input(
                "Packed Red Blood Cells",
                "mL",
                n(300.0, 30.0, 100.0, 600.0),
                "Blood Products",
            ),
            CatalogEntry::procedure("Chest X-Ray"),
            CatalogEntry::procedure("Arterial Line"),
            CatalogEntry::procedure("Invasive Ventilation"),
        ];
        Self {
            n_stays: 256,
            catalog,
            mix_input: 0.07,
            mix_chart: 0.92,
            mix_procedure: 0.01,
            round_len: 100,
            slot_hours: 0.5,
            jitter: 0.2,
            los_days: [2.5, 4.5],
            events_per_stay: None,
            age_years: [18.0, 90.0],
            rules: PlantedRules::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn mix(&self) -> [f64; 3] {
        [self.mix_input, self.mix_chart, self.mix_procedure]
    }

    fn entry(&self, name: &str) -> Option<&CatalogEntry> {
        self.catalog.iter().find(|e| e.name == name)
    }

    /// Names cycled through by scheduled slots of one type. Rule-only
    /// names (vasopressor, transfusion, ventilation) are left out.
    fn cycle(&self, st: SourceType) -> Vec<&CatalogEntry> {
        let r = &self.rules;
        let reserved = [&r.vasopressor, &r.transfusion, &r.ventilation];
        self.catalog
            .iter()
            .filter(|e| e.source_type == st && !reserved.contains(&&e.name))
            .filter(|e| st != SourceType::Input || e.name == r.baseline_fluid)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let mix = self.mix();
        if mix.iter().any(|&m| !(0.0..=1.0).contains(&m))
            || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "frequency mix {mix:?} must be non-negative and sum to 1"
            ));
        }
        if self.round_len == 0 || !(self.slot_hours > 0.0) || !(0.0..0.5).contains(&self.jitter) {
            return bad(
                "round_len, slot_hours and jitter must be positive, jitter below 0.5".into(),
            );
        }
        if !(0.0 < self.los_days[0] && self.los_days[0] <= self.los_days[1]) {
            return bad(format!(
                "los_days {:?} must be an increasing positive range",
                self.los_days
            ));
        }
        for (i, e) in self.catalog.iter().enumerate() {
            if self.catalog[..i].iter().any(|o| o.name == e.name) {
                return bad(format!("catalog lists `{}` twice", e.name));
            }
            if let Some(v) = &e.value {
                v.validate(&e.name)?;
            }
        }
        let r = &self.rules;
        let needs = [
            (&r.vasopressor, SourceType::Input),
            (&r.baseline_fluid, SourceType::Input),
            (&r.transfusion, SourceType::Input),
            (&r.map, SourceType::Chart),
            (&r.lactate, SourceType::Chart),
            (&r.band_variable, SourceType::Chart),
            (&r.ventilation, SourceType::Procedure),
        ];
        for (name, st) in needs {
            match self.entry(name) {
                Some(e) if e.source_type == st => {}
                Some(_) => {
                    return bad(format!(
                        "planted rule variable `{name}` must be a {st} event"
                    ))
                }
                None => {
                    return bad(format!(
                        "planted rule references `{name}`, which is not in the catalog"
                    ))
                }
            }
        }
        for st in SourceType::ALL {
            if mix[st.index()] > 0.0 && self.cycle(st).is_empty() {
                return bad(format!("no catalog names to schedule {st} slots"));
            }
        }
        for p in [
            r.shock_rate,
            r.severity_rate,
            r.transfusion_rate,
            r.ventilation_rate,
            r.phenotype_noise_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("rate {p} outside [0, 1]"));
            }
        }
        let ranges = [
            r.map_shock,
            r.map_stable,
            r.lactate_high,
            r.lactate_low,
            r.vasopressor_window,
            r.intervention_window,
        ];
        if ranges.iter().any(|x| !(x[0] <= x[1])) || !spec_range_ok(self.age_years) {
            return bad("ranges must be ordered as [low, high]".into());
        }
        if r.bands.windows(2).any(|w| w[0][1] >= w[1][0]) || r.bands.iter().any(|b| b[0] >= b[1]) {
            return bad("value bands must be increasing and disjoint".into());
        }
        Ok(())
    }
}

fn spec_range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

/// Slot types of one round, spread so that every prefix stays close to the
/// target mix.
pub fn slot_schedule(mix: [f64; 3], round_len: usize) -> Vec<SourceType> {
    let mut credit = [0.0f64; 3];
    (0..round_len)
        .map(|_| {
            for (c, m) in credit.iter_mut().zip(mix) {
                *c += m;
            }
            // Chart first on ties, then input, then procedure.
            let order = [SourceType::Chart, SourceType::Input, SourceType::Procedure];
            let st = order
                .into_iter()
                .fold(None::<SourceType>, |best, st| match best {
                    Some(b) if credit[b.index()] >= credit[st.index()] => Some(b),
                    _ => Some(st),
                })
                .expect("three types");
            credit[st.index()] -= 1.0;
            st
        })
        .collect()
}

/// Hidden per-stay state behind the planted labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latent {
    pub shock: bool,
    pub severe: bool,
    pub renal_class: usize,
    pub transfusion: bool,
    pub ventilation: bool,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub stays: Vec<StayRecord>,
    pub latents: Vec<Latent>,
    pub vocab: Vocabulary,
    pub bounds: BTreeMap<String, VariableBounds>,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

fn make_event(entry: &CatalogEntry, hours: f64, value: Option<f64>) -> ClinicalEvent {
    ClinicalEvent {
        event_name: entry.name.clone(),
        value: value.map(|v| round_to(v, 0.01)),
        unit: value.and(entry.unit.clone()),
        offset_days: round_to(hours / 24.0, 1e-6),
        position: 0,
        order_name: entry.order_name.clone(),
        order_desc: entry.order_desc.clone(),
        source_type: entry.source_type,
    }
}

fn generate_stay(spec: &SynthSpec, index: usize, schedule: &[SourceType]) -> (StayRecord, Latent) {
    let r = &spec.rules;
    let mut rng = derive_rng(spec.seed, "synth_stay", &[index as u64]);
    let latent = Latent {
        shock: rng.random_bool(r.shock_rate),
        severe: rng.random_bool(r.severity_rate),
        renal_class: rng.random_range(0..4),
        transfusion: rng.random_bool(r.transfusion_rate),
        ventilation: rng.random_bool(r.ventilation_rate),
    };
    let n_slots = match spec.events_per_stay {
        Some(n) => n,
        None => {
            let los_h = uniform(&mut rng, spec.los_days) * 24.0;
            ((los_h / spec.slot_hours).floor() as usize).max(1)
        }
    };
    // The stay ends half a slot after its last scheduled event.
    let los_days = round_to((n_slots as f64 - 0.5) * spec.slot_hours / 24.0 + 1e-6, 1e-6);

    let cycles: Vec<Vec<&CatalogEntry>> =
        SourceType::ALL.iter().map(|&st| spec.cycle(st)).collect();
    let mut seen = [0usize; 3];
    let mut events = Vec::with_capacity(n_slots + 3);
    for k in 0..n_slots {
        let st = schedule[k % schedule.len()];
        let cycle = &cycles[st.index()];
        let mut step = seen[st.index()] % cycle.len();
        if st == SourceType::Chart && latent.severe && r.severity_reverses_charts {
            step = cycle.len() - 1 - step;
        }
        let mut entry = cycle[step];
        seen[st.index()] += 1;
        if st == SourceType::Input && latent.shock {
            entry = spec.entry(&r.vasopressor).expect("validated");
        }
        let jitter = rng.random_range(-spec.jitter..spec.jitter) * spec.slot_hours;
        let hours = (k as f64 * spec.slot_hours + jitter).max(0.0);
        let value = entry.value.as_ref().map(|dist| {
            if entry.name == r.map {
                uniform(
                    &mut rng,
                    if latent.shock {
                        r.map_shock
                    } else {
                        r.map_stable
                    },
                )
            } else if entry.name == r.lactate {
                uniform(
                    &mut rng,
                    if latent.severe {
                        r.lactate_high
                    } else {
                        r.lactate_low
                    },
                )
            } else if entry.name == r.band_variable {
                uniform(&mut rng, r.bands[latent.renal_class])
            } else {
                dist.sample(&mut rng)
            }
        });
        events.push(make_event(entry, hours, value));
    }
    let los_h = los_days * 24.0;
    let mut place = |rng: &mut _, name: &str, window: [f64; 2]| {
        let hi = window[1].min(los_h);
        if window[0] < hi {
            let entry = spec.entry(name).expect("validated");
            let value = entry.value.as_ref().map(|d| d.sample(rng));
            events.push(make_event(entry, uniform(rng, [window[0], hi]), value));
        }
    };
    if latent.shock {
        place(&mut rng, &r.vasopressor, r.vasopressor_window);
    }
    if latent.transfusion {
        place(&mut rng, &r.transfusion, r.intervention_window);
    }
    if latent.ventilation {
        place(&mut rng, &r.ventilation, r.intervention_window);
    }
    events.sort_by(|a, b| a.offset_days.total_cmp(&b.offset_days));
    assign_positions(&mut events).expect("sorted");

    let mut labels = BTreeMap::new();
    let hosp = los_days + uniform(&mut rng, [0.5, 6.0]);
    labels.insert("icu_los_days".into(), los_days.to_string());
    labels.insert(
        "hosp_discharge_days".into(),
        round_to(hosp, 1e-3).to_string(),
    );
    labels.insert(
        "death_days".into(),
        if latent.severe {
            los_days.to_string()
        } else {
            "none".into()
        },
    );
    let next = if !latent.severe && rng.random_bool(0.2) {
        round_to(los_days + uniform(&mut rng, [3.0, 60.0]), 1e-3).to_string()
    } else {
        "none".into()
    };
    labels.insert("next_icu_admit_days".into(), next);
    let bits: String = (0..PHENOTYPE_LABELS)
        .map(|b| {
            let on = match b {
                0 => latent.shock,
                1 => latent.renal_class >= 2,
                2 => latent.severe,
                _ => rng.random_bool(r.phenotype_noise_rate),
            };
            if on {
                '1'
            } else {
                '0'
            }
        })
        .collect();
    labels.insert("phenotype".into(), bits);

    let age = round_to(uniform(&mut rng, spec.age_years), 1.0);
    let stay = StayRecord {
        stay_id: format!("s{index:05}"),
        age_years: Some(age),
        age_bucket: age_bucket(Some(age), 5),
        gender: if rng.random_bool(0.5) {
            "F".into()
        } else {
            "M".into()
        },
        events,
        raw_labels: labels,
    };
    (stay, latent)
}

/// Generates the cohort described by `spec`, its vocabulary and 1st/99th
/// percentile cleaning bounds.
pub fn generate_cohort(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let schedule = slot_schedule(spec.mix(), spec.round_len);
    let (stays, latents): (Vec<_>, Vec<_>) = (0..spec.n_stays)
        .map(|i| generate_stay(spec, i, &schedule))
        .unzip();
    let vocab = build_vocabulary(&stays);
    let mut bounds = compute_bounds(&stays);
    // Planted extremes must survive cleaning.
    for e in &spec.catalog {
        if let (Some(b), Some(v)) = (bounds.get_mut(&e.name), &e.value) {
            let (lo, hi) = v.bounds();
            b.lower = b.lower.min(lo);
            b.upper = b.upper.max(hi);
        }
    }
    Ok(Cohort {
        stays,
        latents,
        vocab,
        bounds,
    })
}

/// Writes the cohort as a dataset directory plus `spec.toml`.
pub fn write_cohort(dir: &Path, spec: &SynthSpec, cohort: &Cohort) -> Result<DatasetManifest> {
    let m = write_dataset(dir, &cohort.stays, &cohort.vocab, cohort.bounds.clone())?;
    std::fs::write(dir.join("spec.toml"), spec.to_toml())?;
    Ok(m)
}
