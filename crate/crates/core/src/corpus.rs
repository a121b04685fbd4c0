//! Annotated recommendation dialogues and what is extracted from them:
//! conversation flows, flow schemas, delexicalized templates and per-user
//! interaction lists.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{EntityId, TypeId, UserId};
use crate::kg::KnowledgeGraph;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("dialogue `{dialogue}` turn {turn}: mention span out of bounds")]
    SpanOutOfBounds { dialogue: String, turn: usize },
    #[error("dialogue `{dialogue}` turn {turn}: mention spans overlap or are out of order")]
    MisorderedSpans { dialogue: String, turn: usize },
    #[error("dialogue `{dialogue}` mentions unknown entity `{entity}`")]
    UnknownEntity { dialogue: String, entity: String },
    #[error("dialogue `{0}` has no turns")]
    EmptyDialogue(String),
    #[error("template has {expected} slots but {found} fillers were given")]
    FillerCount { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Seeker => "seeker",
            Speaker::Recommender => "recommender",
        }
    }
}

/// Wire form of a mention: entity name plus a `[start, end)` span counted in
/// Unicode scalar values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MentionRecord {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<MentionRecord>,
}

/// One line of the dialogue JSON Lines format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeker_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommender_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub mentions: Vec<Mention>,
}

impl Turn {
    /// Surface string of mention `k`.
    pub fn surface(&self, k: usize) -> &str {
        let m = self.mentions[k];
        char_slice(&self.text, m.start, m.end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub seeker: UserId,
    pub recommender: UserId,
}

impl Dialogue {
    pub fn user(&self, speaker: Speaker) -> &UserId {
        match speaker {
            Speaker::Seeker => &self.seeker,
            Speaker::Recommender => &self.recommender,
        }
    }

    pub fn mention_count(&self) -> usize {
        self.turns.iter().map(|t| t.mentions.len()).sum()
    }

    /// Resolves entity names against `kg` and validates spans.
    pub fn from_record(rec: &DialogueRecord, kg: &KnowledgeGraph) -> Result<Self, CorpusError> {
        if rec.turns.is_empty() {
            return Err(CorpusError::EmptyDialogue(rec.dialogue_id.clone()));
        }
        let mut turns = Vec::with_capacity(rec.turns.len());
        for (ti, t) in rec.turns.iter().enumerate() {
            let len = t.text.chars().count();
            let mut mentions = Vec::with_capacity(t.mentions.len());
            let mut prev_end = 0;
            for m in &t.mentions {
                if m.start > m.end || m.end > len {
                    return Err(CorpusError::SpanOutOfBounds { dialogue: rec.dialogue_id.clone(), turn: ti });
                }
                if m.start < prev_end {
                    return Err(CorpusError::MisorderedSpans { dialogue: rec.dialogue_id.clone(), turn: ti });
                }
                prev_end = m.end;
                let entity = kg.entity_id(&m.entity).ok_or_else(|| CorpusError::UnknownEntity {
                    dialogue: rec.dialogue_id.clone(),
                    entity: m.entity.clone(),
                })?;
                mentions.push(Mention { entity, start: m.start, end: m.end });
            }
            turns.push(Turn { speaker: t.speaker, text: t.text.clone(), mentions });
        }
        let seeker = rec
            .seeker_id
            .clone()
            .unwrap_or_else(|| format!("{}:{}", rec.dialogue_id, Speaker::Seeker.as_str()));
        let recommender = rec
            .recommender_id
            .clone()
            .unwrap_or_else(|| format!("{}:{}", rec.dialogue_id, Speaker::Recommender.as_str()));
        Ok(Dialogue { id: rec.dialogue_id.clone(), turns, seeker: UserId(seeker), recommender: UserId(recommender) })
    }

    /// Inverse of [`Dialogue::from_record`]. Participant ids are written only
    /// when they differ from the per-role default.
    pub fn to_record(&self, kg: &KnowledgeGraph) -> DialogueRecord {
        let default_of = |s: Speaker| format!("{}:{}", self.id, s.as_str());
        let explicit = |u: &UserId, s: Speaker| (u.0 != default_of(s)).then(|| u.0.clone());
        DialogueRecord {
            dialogue_id: self.id.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| TurnRecord {
                    speaker: t.speaker,
                    text: t.text.clone(),
                    mentions: t
                        .mentions
                        .iter()
                        .map(|m| MentionRecord {
                            entity: kg.entity(m.entity).name.clone(),
                            start: m.start,
                            end: m.end,
                        })
                        .collect(),
                })
                .collect(),
            seeker_id: explicit(&self.seeker, Speaker::Seeker),
            recommender_id: explicit(&self.recommender, Speaker::Recommender),
        }
    }
}

/// Resolves every record; preserves input order.
pub fn load_dialogues(records: &[DialogueRecord], kg: &KnowledgeGraph) -> Result<Vec<Dialogue>, CorpusError> {
    records.iter().map(|r| Dialogue::from_record(r, kg)).collect()
}

/// Entities of a dialogue in mention order. `turn_index` and `speakers` are
/// parallel to `entities` for flows read off a dialogue and empty for flows
/// that were sampled or generated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationFlow {
    pub entities: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turn_index: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub speakers: Vec<Speaker>,
}

impl ConversationFlow {
    pub fn from_entities(entities: Vec<EntityId>) -> Self {
        Self { entities, turn_index: Vec::new(), speakers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Type sequence parallel to a flow.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowSchema {
    pub types: Vec<TypeId>,
}

impl FlowSchema {
    pub fn new(types: Vec<TypeId>) -> Self {
        Self { types }
    }

    pub fn of_entities(entities: &[EntityId], kg: &KnowledgeGraph) -> Self {
        Self { types: entities.iter().map(|&e| kg.type_of(e)).collect() }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

pub fn extract_flow(d: &Dialogue, kg: &KnowledgeGraph) -> (ConversationFlow, FlowSchema) {
    let mut flow = ConversationFlow::default();
    for (ti, t) in d.turns.iter().enumerate() {
        for m in &t.mentions {
            flow.entities.push(m.entity);
            flow.turn_index.push(ti);
            flow.speakers.push(t.speaker);
        }
    }
    let schema = FlowSchema::of_entities(&flow.entities, kg);
    (flow, schema)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Slot(TypeId),
}

/// A delexicalized utterance: literal text interleaved with typed slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub speaker: Speaker,
    pub segments: Vec<Segment>,
    pub slot_signature: Vec<TypeId>,
    pub source: String,
}

impl Template {
    /// The template with `<type-name>` placeholders.
    pub fn text_with_placeholders(&self, kg: &KnowledgeGraph) -> String {
        let mut s = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => s.push_str(t),
                Segment::Slot(ty) => {
                    s.push('<');
                    s.push_str(kg.type_name(*ty));
                    s.push('>');
                }
            }
        }
        s
    }

    /// Substitutes fillers left to right. Returns the text and the char span
    /// of every filled slot.
    pub fn fill(&self, fillers: &[&str]) -> Result<(String, Vec<(usize, usize)>), CorpusError> {
        if fillers.len() != self.slot_signature.len() {
            return Err(CorpusError::FillerCount { expected: self.slot_signature.len(), found: fillers.len() });
        }
        let mut text = String::new();
        let mut chars = 0;
        let mut spans = Vec::with_capacity(fillers.len());
        let mut next = fillers.iter();
        for seg in &self.segments {
            let piece: &str = match seg {
                Segment::Text(t) => t,
                Segment::Slot(_) => next.next().copied().unwrap_or_default(),
            };
            let n = piece.chars().count();
            if matches!(seg, Segment::Slot(_)) {
                spans.push((chars, chars + n));
            }
            text.push_str(piece);
            chars += n;
        }
        Ok((text, spans))
    }
}

/// One template per turn; mention-free turns give an empty signature.
pub fn extract_templates(d: &Dialogue, kg: &KnowledgeGraph) -> Vec<Template> {
    d.turns
        .iter()
        .map(|t| {
            let mut segments = Vec::new();
            let mut cursor = 0;
            for m in &t.mentions {
                if m.start > cursor {
                    segments.push(Segment::Text(char_slice(&t.text, cursor, m.start).into()));
                }
                segments.push(Segment::Slot(kg.type_of(m.entity)));
                cursor = m.end;
            }
            let len = t.text.chars().count();
            if cursor < len {
                segments.push(Segment::Text(char_slice(&t.text, cursor, len).into()));
            }
            Template {
                speaker: t.speaker,
                segments,
                slot_signature: t.mentions.iter().map(|m| kg.type_of(m.entity)).collect(),
                source: d.id.clone(),
            }
        })
        .collect()
}

/// Entities each user mentioned, deduplicated in first-occurrence order.
/// Users without mentions are left out.
pub fn derive_interactions(dialogues: &[Dialogue]) -> BTreeMap<UserId, Vec<EntityId>> {
    let mut out: BTreeMap<UserId, Vec<EntityId>> = BTreeMap::new();
    let mut seen: BTreeMap<UserId, BTreeSet<EntityId>> = BTreeMap::new();
    for d in dialogues {
        for t in &d.turns {
            let user = d.user(t.speaker);
            for m in &t.mentions {
                if seen.entry(user.clone()).or_default().insert(m.entity) {
                    out.entry(user.clone()).or_default().push(m.entity);
                }
            }
        }
    }
    out
}

/// Entities mentioned by one role within a single dialogue, first occurrence.
pub fn role_entities(d: &Dialogue, speaker: Speaker) -> Vec<EntityId> {
    let mut seen = BTreeSet::new();
    d.turns
        .iter()
        .filter(|t| t.speaker == speaker)
        .flat_map(|t| t.mentions.iter().map(|m| m.entity))
        .filter(|e| seen.insert(*e))
        .collect()
}

pub(crate) fn char_slice(s: &str, start: usize, end: usize) -> &str {
    let byte = |c: usize| s.char_indices().nth(c).map_or(s.len(), |(b, _)| b);
    &s[byte(start)..byte(end)]
}
