use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{ClinicalEvent, SourceType, StayRecord};
use super::EventDataError;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Event,
    Unit,
    OrderName,
    OrderDesc,
    Age,
    Gender,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Event,
        Attribute::Unit,
        Attribute::OrderName,
        Attribute::OrderDesc,
        Attribute::Age,
        Attribute::Gender,
    ];
}

/// Token table for one attribute. Ids `0..4` are the reserved tokens;
/// learned tokens follow in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenTable {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TokenTable {
    fn from_learned(learned: BTreeSet<String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                learned
                    .into_iter()
                    .filter(|t| !RESERVED.contains(&t.as_str())),
            )
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-reserved tokens.
    pub fn learned_len(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for TokenTable {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("token table must start with [PAD], [MASK], [CLS], [UNK]".into());
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<TokenTable> for Vec<String> {
    fn from(t: TokenTable) -> Self {
        t.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub event: TokenTable,
    pub unit: TokenTable,
    pub order_name: TokenTable,
    pub order_desc: TokenTable,
    pub age: TokenTable,
    pub gender: TokenTable,
}

impl Vocabulary {
    pub fn table(&self, attr: Attribute) -> &TokenTable {
        match attr {
            Attribute::Event => &self.event,
            Attribute::Unit => &self.unit,
            Attribute::OrderName => &self.order_name,
            Attribute::OrderDesc => &self.order_desc,
            Attribute::Age => &self.age,
            Attribute::Gender => &self.gender,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EventDataError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| EventDataError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EventDataError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| EventDataError::Format(format!("{}: {e}", path.display())))
    }
}

/// Collects every observed string per attribute. The result does not depend
/// on the order of `stays`.
pub fn build_vocabulary<'a>(stays: impl IntoIterator<Item = &'a StayRecord>) -> Vocabulary {
    let mut sets: [BTreeSet<String>; 6] = Default::default();
    for stay in stays {
        sets[4].insert(stay.age_bucket.clone());
        sets[5].insert(stay.gender.clone());
        for e in &stay.events {
            sets[0].insert(e.event_name.clone());
            if let Some(u) = &e.unit {
                sets[1].insert(u.clone());
            }
            if let Some(n) = &e.order_name {
                sets[2].insert(n.clone());
            }
            if let Some(d) = &e.order_desc {
                sets[3].insert(d.clone());
            }
        }
    }
    let [event, unit, order_name, order_desc, age, gender] = sets.map(TokenTable::from_learned);
    Vocabulary {
        event,
        unit,
        order_name,
        order_desc,
        age,
        gender,
    }
}

/// Id-encoded event. Absent optional attributes are [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedEvent {
    pub event: usize,
    pub unit: usize,
    pub order_name: usize,
    pub order_desc: usize,
    pub value: Option<f64>,
    pub offset_days: f64,
    pub position: usize,
    pub source_type: SourceType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStay {
    pub stay_id: String,
    pub age: usize,
    pub gender: usize,
    pub events: Vec<EncodedEvent>,
}

impl EncodedStay {
    /// Fraction of categorical event fields that fell back to [`UNK`].
    pub fn unknown_rate(&self) -> f64 {
        let mut total = 2usize;
        let mut unk = usize::from(self.age == UNK) + usize::from(self.gender == UNK);
        for e in &self.events {
            for id in [e.event, e.unit, e.order_name, e.order_desc] {
                if id != PAD {
                    total += 1;
                    unk += usize::from(id == UNK);
                }
            }
        }
        unk as f64 / total as f64
    }
}

pub fn encode_stay(stay: &StayRecord, vocab: &Vocabulary) -> EncodedStay {
    let opt =
        |table: &TokenTable, s: &Option<String>| s.as_deref().map_or(PAD, |s| table.encode(s));
    EncodedStay {
        stay_id: stay.stay_id.clone(),
        age: vocab.age.encode(&stay.age_bucket),
        gender: vocab.gender.encode(&stay.gender),
        events: stay
            .events
            .iter()
            .map(|e| EncodedEvent {
                event: vocab.event.encode(&e.event_name),
                unit: opt(&vocab.unit, &e.unit),
                order_name: opt(&vocab.order_name, &e.order_name),
                order_desc: opt(&vocab.order_desc, &e.order_desc),
                value: e.value,
                offset_days: e.offset_days,
                position: e.position,
                source_type: e.source_type,
            })
            .collect(),
    }
}

/// Inverse of [`encode_stay`] for in-vocabulary tokens. Out-of-vocabulary
/// strings come back as `"[UNK]"`.
pub fn decode_event(e: &EncodedEvent, vocab: &Vocabulary) -> ClinicalEvent {
    let opt = |table: &TokenTable, id: usize| {
        (id != PAD).then(|| table.decode(id).unwrap_or("[UNK]").to_string())
    };
    ClinicalEvent {
        event_name: vocab.event.decode(e.event).unwrap_or("[UNK]").to_string(),
        value: e.value,
        unit: opt(&vocab.unit, e.unit),
        offset_days: e.offset_days,
        position: e.position,
        order_name: opt(&vocab.order_name, e.order_name),
        order_desc: opt(&vocab.order_desc, e.order_desc),
        source_type: e.source_type,
    }
}
