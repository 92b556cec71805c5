//! Attribute-specific multi-embedding.
//!
//! Every event is the element-wise sum of seven component embeddings: event
//! identity, value, unit, time, position, order name and order description.
//! The sequence fed to the encoder is `[CLS], [AGE], [GENDER]` followed by
//! the events.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::event_data::{EncodedEvent, EncodedStay, Vocabulary, CLS, MASK, PAD};
use crate::numerics::{Graph, Init, NumericsError, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::sequence::SPECIAL_TOKENS;

type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite value {value} for event `{event}`")]
    NonFiniteValue { event: String, value: f64 },
    #[error("sequence of {len} tokens exceeds max_tokens {max}")]
    TooLong { len: usize, max: usize },
    #[error("position {position} outside the position table ({max} rows)")]
    Position { position: usize, max: usize },
    #[error("mask plan covers {plan} events, sequence has {events}")]
    PlanLength { plan: usize, events: usize },
}

/// Components that can be zeroed out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub event: bool,
    pub value: bool,
    pub unit: bool,
    pub time: bool,
    pub position: bool,
    pub order_name: bool,
    pub order_desc: bool,
}

/// The seven summed components, in summation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Event,
    Value,
    Unit,
    Time,
    Position,
    OrderName,
    OrderDesc,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Event,
        Component::Value,
        Component::Unit,
        Component::Time,
        Component::Position,
        Component::OrderName,
        Component::OrderDesc,
    ];

    /// The six components that appear in the ablation table.
    pub const ABLATABLE: [Component; 6] = [
        Component::Value,
        Component::Unit,
        Component::Time,
        Component::Position,
        Component::OrderName,
        Component::OrderDesc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Event => "Event",
            Component::Value => "Value",
            Component::Unit => "Unit",
            Component::Time => "Time",
            Component::Position => "Position",
            Component::OrderName => "Ordername",
            Component::OrderDesc => "Orderdesc",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.replace('_', "").to_ascii_lowercase();
        Component::ALL
            .into_iter()
            .find(|c| c.label().to_ascii_lowercase() == key)
            .ok_or_else(|| format!("unknown embedding component `{s}`"))
    }
}

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn only(c: Component) -> Self {
        let mut f = Self::default();
        f.set(c, true);
        f
    }

    pub fn all() -> Self {
        let mut f = Self::default();
        for c in Component::ALL {
            f.set(c, true);
        }
        f
    }

    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::Event => self.event,
            Component::Value => self.value,
            Component::Unit => self.unit,
            Component::Time => self.time,
            Component::Position => self.position,
            Component::OrderName => self.order_name,
            Component::OrderDesc => self.order_desc,
        }
    }

    pub fn set(&mut self, c: Component, on: bool) {
        match c {
            Component::Event => self.event = on,
            Component::Value => self.value = on,
            Component::Unit => self.unit = on,
            Component::Time => self.time = on,
            Component::Position => self.position = on,
            Component::OrderName => self.order_name = on,
            Component::OrderDesc => self.order_desc = on,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Time2Vec frequency count.
    pub time_freqs: usize,
    pub log_eps: f64,
    pub init_std: f64,
    /// Std of the Time2Vec linear and frequency weights.
    pub time_init_std: f64,
    pub age_bin_years: u32,
    pub ablation: AblationFlags,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            time_freqs: 16,
            log_eps: 1e-6,
            init_std: 0.02,
            time_init_std: 1.0,
            age_bin_years: 5,
            ablation: AblationFlags::default(),
        }
    }
}

/// Vocabulary sizes of the categorical tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub event: usize,
    pub unit: usize,
    pub order_name: usize,
    pub order_desc: usize,
    pub age: usize,
    pub gender: usize,
}

impl VocabSizes {
    pub fn of(v: &Vocabulary) -> Self {
        Self {
            event: v.event.len(),
            unit: v.unit.len(),
            order_name: v.order_name.len(),
            order_desc: v.order_desc.len(),
            age: v.age.len(),
            gender: v.gender.len(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Time2VecParams {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub proj: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ValueParams {
    pub raw_w: ParamId,
    pub raw_b: ParamId,
    pub nl_w1: ParamId,
    pub nl_b1: ParamId,
    pub nl_w2: ParamId,
    pub nl_b2: ParamId,
    pub log_scale: ParamId,
    pub log_w: ParamId,
    pub log_b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// Parameter handles of the embedding layer.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub config: EmbeddingConfig,
    pub d_model: usize,
    pub max_tokens: usize,
    pub event: ParamId,
    pub unit: ParamId,
    pub order_name: ParamId,
    pub order_desc: ParamId,
    pub age: ParamId,
    pub gender: ParamId,
    pub position: ParamId,
    pub time: Time2VecParams,
    pub value: ValueParams,
    /// Learned substitutes for masked value and time components.
    pub mask_value: ParamId,
    pub mask_time: ParamId,
}

/// Per-event corruption flags for pretraining. Empty vectors mean "none".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corruption {
    /// All six non-position components replaced by mask embeddings.
    pub mep: Vec<bool>,
    /// Only the value component replaced.
    pub vp: Vec<bool>,
}

impl Corruption {
    pub fn none() -> Self {
        Self::default()
    }

    fn mep_at(&self, i: usize) -> bool {
        self.mep.get(i).copied().unwrap_or(false)
    }

    fn vp_at(&self, i: usize) -> bool {
        self.vp.get(i).copied().unwrap_or(false)
    }
}

/// Per-component `[L × d]` embeddings of the events and their sum.
#[derive(Clone, Debug)]
pub struct ComposedEvents {
    pub components: [Var; 7],
    pub sum: Var,
}

impl ComposedEvents {
    pub fn component(&self, c: Component) -> Var {
        self.components[Component::ALL.iter().position(|&x| x == c).unwrap()]
    }
}

/// Full encoder input.
#[derive(Clone, Debug)]
pub struct ComposedSequence {
    /// `[T × d]`, `T = 3 + L + padding`.
    pub x: Var,
    pub n_events: usize,
    /// `true` for real tokens, `false` for padding.
    pub valid: Vec<bool>,
    /// `true` on the three special rows.
    pub global: Vec<bool>,
    /// Which components are non-zero for each token row.
    pub presence: Vec<[bool; 7]>,
    pub events: Option<ComposedEvents>,
}

impl ComposedSequence {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        vocab: VocabSizes,
        d_model: usize,
        max_tokens: usize,
        config: EmbeddingConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = d_model;
        let f = config.time_freqs.max(1);
        let tn = Init::TruncatedNormal(config.init_std);
        let tt = Init::TruncatedNormal(config.time_init_std);
        let bb = ParamGroup::Backbone;
        let mut add = |name: &str, shape: &[usize], init: Init| {
            store.add(format!("embed.{name}"), shape, init, bb, rng)
        };
        let event = add("event", &[vocab.event, d], tn);
        let unit = add("unit", &[vocab.unit, d], tn);
        let order_name = add("order_name", &[vocab.order_name, d], tn);
        let order_desc = add("order_desc", &[vocab.order_desc, d], tn);
        let age = add("age", &[vocab.age, d], tn);
        let gender = add("gender", &[vocab.gender, d], tn);
        let position = add("position", &[max_tokens, d], tn);
        let time = Time2VecParams {
            w0: add("time.w0", &[1, 1], tt),
            b0: add("time.b0", &[1, 1], Init::Zeros),
            w: add("time.w", &[1, f], tt),
            b: add("time.b", &[1, f], Init::Zeros),
            proj: add("time.proj", &[f + 1, d], tn),
            proj_b: add("time.proj_b", &[1, d], Init::Zeros),
        };
        let value = ValueParams {
            raw_w: add("value.raw_w", &[1, d], tn),
            raw_b: add("value.raw_b", &[1, d], Init::Zeros),
            nl_w1: add("value.nl_w1", &[1, d], tn),
            nl_b1: add("value.nl_b1", &[1, d], Init::Zeros),
            nl_w2: add("value.nl_w2", &[d, d], tn),
            nl_b2: add("value.nl_b2", &[1, d], Init::Zeros),
            log_scale: add("value.log_scale", &[1, 1], Init::Ones),
            log_w: add("value.log_w", &[1, d], tn),
            log_b: add("value.log_b", &[1, d], Init::Zeros),
            gate_w: add("value.gate_w", &[3 * d, 3], tn),
            gate_b: add("value.gate_b", &[1, 3], Init::Zeros),
            out_w: add("value.out_w", &[d, d], tn),
            out_b: add("value.out_b", &[1, d], Init::Zeros),
            ln_gain: add("value.ln_gain", &[1, d], Init::Ones),
            ln_bias: add("value.ln_bias", &[1, d], Init::Zeros),
        };
        let mask_value = add("mask.value", &[1, d], tn);
        let mask_time = add("mask.time", &[1, d], tn);
        Self {
            config,
            d_model,
            max_tokens,
            event,
            unit,
            order_name,
            order_desc,
            age,
            gender,
            position,
            time,
            value,
            mask_value,
            mask_time,
        }
    }

    /// Time2Vec: `proj · [w0·t + b0, sin(W·t + b)] + proj_b` for a column of
    /// offsets in days.
    pub fn embed_time(&self, g: &mut Graph, store: &ParamStore, t_days: &[f64]) -> Result<Var> {
        let p = &self.time;
        let t = g.constant(Tensor::column(t_days));
        let w0 = g.param(store, p.w0);
        let b0 = g.param(store, p.b0);
        let w = g.param(store, p.w);
        let b = g.param(store, p.b);
        let proj = g.param(store, p.proj);
        let proj_b = g.param(store, p.proj_b);
        let lin = g.matmul(t, w0)?;
        let lin = g.add_bias(lin, b0)?;
        let per = g.matmul(t, w)?;
        let per = g.add_bias(per, b)?;
        let per = g.sin(per)?;
        let feats = g.concat_cols(&[lin, per])?;
        let out = g.matmul(feats, proj)?;
        Ok(g.add_bias(out, proj_b)?)
    }

    /// Three-view gated value embedding for a column of raw values.
    pub fn embed_value(&self, g: &mut Graph, store: &ParamStore, values: &[f64]) -> Result<Var> {
        Ok(self.value_views(g, store, values)?.output)
    }

    /// Same as [`Embedding::embed_value`] but exposes the intermediate views.
    pub fn value_views(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        values: &[f64],
    ) -> Result<ValueViews> {
        let p = &self.value;
        let d = self.d_model;
        let v = g.constant(Tensor::column(values));
        let param = |g: &mut Graph, id| g.param(store, id);

        let raw_w = param(g, p.raw_w);
        let raw_b = param(g, p.raw_b);
        let raw = g.matmul(v, raw_w)?;
        let raw = g.add_bias(raw, raw_b)?;

        let w1 = param(g, p.nl_w1);
        let b1 = param(g, p.nl_b1);
        let w2 = param(g, p.nl_w2);
        let b2 = param(g, p.nl_b2);
        let h = g.matmul(v, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h)?;
        let nl = g.matmul(h, w2)?;
        let nl = g.add_bias(nl, b2)?;

        let s = param(g, p.log_scale);
        let lw = param(g, p.log_w);
        let lb = param(g, p.log_b);
        let vl = g.signed_log(v, self.config.log_eps)?;
        let vl = g.mul_scalar(vl, s)?;
        let log = g.matmul(vl, lw)?;
        let log = g.add_bias(log, lb)?;

        let gw = param(g, p.gate_w);
        let gb = param(g, p.gate_b);
        let cat = g.concat_cols(&[nl, raw, log])?;
        let gates = g.matmul(cat, gw)?;
        let gates = g.add_bias(gates, gb)?;
        let gates = g.sigmoid(gates)?;
        let g1 = g.slice_cols(gates, 0, 1)?;
        let g2 = g.slice_cols(gates, 1, 2)?;
        let g3 = g.slice_cols(gates, 2, 3)?;
        let a = g.mul_col(nl, g1)?;
        let b = g.mul_col(raw, g2)?;
        let c = g.mul_col(log, g3)?;
        let mixed = g.add_all(&[a, b, c])?;

        let ow = param(g, p.out_w);
        let ob = param(g, p.out_b);
        let out = g.matmul(mixed, ow)?;
        let out = g.add_bias(out, ob)?;
        let gain = param(g, p.ln_gain);
        let bias = param(g, p.ln_bias);
        let output = g.layer_norm(out, gain, bias, 1e-5)?;
        debug_assert_eq!(g.shape(output), [values.len(), d]);
        Ok(ValueViews {
            raw,
            nonlinear: nl,
            log_input: vl,
            log,
            gates,
            mixed,
            output,
        })
    }

    /// Embeds `events` into seven `[L × d]` components and their sum.
    /// `L` must be at least 1.
    pub fn compose_events(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        events: &[EncodedEvent],
        corruption: &Corruption,
        flags: AblationFlags,
    ) -> Result<ComposedEvents> {
        let n = events.len();
        for plan in [&corruption.mep, &corruption.vp] {
            if !plan.is_empty() && plan.len() != n {
                return Err(EmbeddingError::PlanLength {
                    plan: plan.len(),
                    events: n,
                });
            }
        }
        if let Some(e) = events.iter().find(|e| e.position >= self.max_tokens) {
            return Err(EmbeddingError::Position {
                position: e.position,
                max: self.max_tokens,
            });
        }
        if let Some(e) = events
            .iter()
            .find(|e| e.value.is_some_and(|v| !v.is_finite()))
        {
            return Err(EmbeddingError::NonFiniteValue {
                event: format!("id {}", e.event),
                value: e.value.unwrap_or(f64::NAN),
            });
        }
        let mep: Vec<bool> = (0..n).map(|i| corruption.mep_at(i)).collect();
        let d = self.d_model;

        // Categorical: masked events use the [MASK] row, absent attributes a zero row.
        let categorical = |g: &mut Graph,
                           table: ParamId,
                           pick: fn(&EncodedEvent) -> usize,
                           off: bool|
         -> Result<Var> {
            if off {
                return Ok(g.constant(Tensor::zeros(&[n, d])));
            }
            let ids: Vec<usize> = events
                .iter()
                .zip(&mep)
                .map(|(e, &m)| if m { MASK } else { pick(e) })
                .collect();
            let t = g.param(store, table);
            let rows = g.embedding(t, &ids)?;
            if ids.contains(&PAD) {
                let keep: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
                Ok(g.mask_rows(rows, &keep)?)
            } else {
                Ok(rows)
            }
        };
        let f = flags;
        let event = categorical(g, self.event, |e| e.event, f.event)?;
        let unit = categorical(g, self.unit, |e| e.unit, f.unit)?;
        let order_name = categorical(g, self.order_name, |e| e.order_name, f.order_name)?;
        let order_desc = categorical(g, self.order_desc, |e| e.order_desc, f.order_desc)?;

        let value = if f.value {
            g.constant(Tensor::zeros(&[n, d]))
        } else {
            let raw: Vec<f64> = events.iter().map(|e| e.value.unwrap_or(0.0)).collect();
            let emb = self.embed_value(g, store, &raw)?;
            let replace: Vec<bool> = (0..n).map(|i| mep[i] || corruption.vp_at(i)).collect();
            let keep: Vec<bool> = events
                .iter()
                .zip(&replace)
                .map(|(e, &r)| r || e.value.is_some())
                .collect();
            let emb = if keep.iter().all(|&k| k) {
                emb
            } else {
                g.mask_rows(emb, &keep)?
            };
            if replace.iter().any(|&r| r) {
                let mv = g.param(store, self.mask_value);
                g.replace_rows(emb, mv, &replace)?
            } else {
                emb
            }
        };

        let time = if f.time {
            g.constant(Tensor::zeros(&[n, d]))
        } else {
            let t: Vec<f64> = events.iter().map(|e| e.offset_days).collect();
            let emb = self.embed_time(g, store, &t)?;
            if mep.iter().any(|&m| m) {
                let mt = g.param(store, self.mask_time);
                g.replace_rows(emb, mt, &mep)?
            } else {
                emb
            }
        };

        let position = if f.position {
            g.constant(Tensor::zeros(&[n, d]))
        } else {
            let ids: Vec<usize> = events.iter().map(|e| e.position).collect();
            let t = g.param(store, self.position);
            g.embedding(t, &ids)?
        };

        let components = [event, value, unit, time, position, order_name, order_desc];
        let sum = g.add_all(&components)?;
        Ok(ComposedEvents { components, sum })
    }

    /// `[CLS], [AGE], [GENDER], e_1..e_L`, optionally padded with zero rows
    /// up to `pad_to` tokens.
    pub fn assemble_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stay: &EncodedStay,
        corruption: &Corruption,
        flags: AblationFlags,
        pad_to: Option<usize>,
    ) -> Result<ComposedSequence> {
        let n = stay.events.len();
        let len = n + SPECIAL_TOKENS;
        if len > self.max_tokens {
            return Err(EmbeddingError::TooLong {
                len,
                max: self.max_tokens,
            });
        }
        let total = pad_to.unwrap_or(len).max(len);
        let ev = g.param(store, self.event);
        let cls = g.embedding(ev, &[CLS])?;
        let age_t = g.param(store, self.age);
        let age = g.embedding(age_t, &[stay.age])?;
        let gender_t = g.param(store, self.gender);
        let gender = g.embedding(gender_t, &[stay.gender])?;
        let mut parts = vec![cls, age, gender];
        let mut presence = vec![[true, false, false, false, false, false, false]; SPECIAL_TOKENS];
        let events = if n > 0 {
            let composed = self.compose_events(g, store, &stay.events, corruption, flags)?;
            parts.push(composed.sum);
            for (i, e) in stay.events.iter().enumerate() {
                let m = corruption.mep_at(i);
                let vp = corruption.vp_at(i);
                presence.push([
                    !flags.event,
                    !flags.value && (e.value.is_some() || m || vp),
                    !flags.unit && (m || e.unit != PAD),
                    !flags.time,
                    !flags.position,
                    !flags.order_name && (m || e.order_name != PAD),
                    !flags.order_desc && (m || e.order_desc != PAD),
                ]);
            }
            Some(composed)
        } else {
            None
        };
        if total > len {
            parts.push(g.constant(Tensor::zeros(&[total - len, self.d_model])));
            presence.extend(std::iter::repeat_n([false; 7], total - len));
        }
        let x = g.concat_rows(&parts)?;
        let valid = (0..total).map(|i| i < len).collect();
        let global = (0..total).map(|i| i < SPECIAL_TOKENS).collect();
        Ok(ComposedSequence {
            x,
            n_events: n,
            valid,
            global,
            presence,
            events,
        })
    }
}

/// Intermediate tensors of the value embedding.
#[derive(Clone, Copy, Debug)]
pub struct ValueViews {
    pub raw: Var,
    pub nonlinear: Var,
    /// `s · sign(v) · log(1 + |v| + ε)`.
    pub log_input: Var,
    pub log: Var,
    /// `[n × 3]` gate coefficients for (nonlinear, raw, log).
    pub gates: Var,
    pub mixed: Var,
    pub output: Var,
}

#[cfg(test)]
mod tests;
