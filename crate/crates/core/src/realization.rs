//! Template realization of generated flows and conversion of dialogues into
//! recommender training samples.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_templates, ConversationFlow, Dialogue, FlowSchema, Mention, Segment, Speaker, Template, Turn};
use crate::kg::KnowledgeGraph;
use crate::{EntityId, TypeId, UserId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RealizationError {
    #[error("flow has {flow} entities but schema has {schema} types")]
    Misaligned { flow: usize, schema: usize },
    #[error("entity at position {0} does not match its schema type")]
    TypeMismatch(usize),
}

/// Which template a realized turn came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRef {
    Bank(usize),
    Fallback(TypeId),
}

/// Corpus templates indexed by slot signature, plus a per-type fallback
/// question used only where no corpus template covers a position.
#[derive(Clone, Debug)]
pub struct TemplateBank {
    templates: Vec<Template>,
    by_signature: BTreeMap<Vec<TypeId>, Vec<usize>>,
    chit_chat: Vec<usize>,
    fallbacks: Vec<Template>,
    longest: usize,
}

impl TemplateBank {
    pub fn new(templates: Vec<Template>, kg: &KnowledgeGraph) -> Self {
        let mut by_signature: BTreeMap<Vec<TypeId>, Vec<usize>> = BTreeMap::new();
        let mut chit_chat = Vec::new();
        for (i, t) in templates.iter().enumerate() {
            if t.slot_signature.is_empty() {
                chit_chat.push(i);
            } else {
                by_signature.entry(t.slot_signature.clone()).or_default().push(i);
            }
        }
        let longest = by_signature.keys().map(Vec::len).max().unwrap_or(0);
        let item = kg.item_type();
        let fallbacks = (0..kg.num_types())
            .map(|t| {
                let ty = TypeId::from_index(t);
                Template {
                    speaker: if Some(ty) == item { Speaker::Recommender } else { Speaker::Seeker },
                    segments: alloc::vec![Segment::Text("What about ".into()), Segment::Slot(ty), Segment::Text("?".into())],
                    slot_signature: alloc::vec![ty],
                    source: String::from("fallback"),
                }
            })
            .collect();
        Self { templates, by_signature, chit_chat, fallbacks, longest }
    }

    /// Templates of every turn of every dialogue.
    pub fn from_dialogues(dialogues: &[Dialogue], kg: &KnowledgeGraph) -> Self {
        let all = dialogues.iter().flat_map(|d| extract_templates(d, kg)).collect();
        Self::new(all, kg)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn get(&self, r: TemplateRef) -> &Template {
        match r {
            TemplateRef::Bank(i) => &self.templates[i],
            TemplateRef::Fallback(t) => &self.fallbacks[t.index()],
        }
    }

    fn choose<R: Rng + ?Sized>(&self, sig: &[TypeId], item: Option<TypeId>, rng: &mut R) -> Option<usize> {
        let cands = self.by_signature.get(sig)?;
        let want = if item.is_some_and(|it| sig.contains(&it)) { Speaker::Recommender } else { Speaker::Seeker };
        let preferred: Vec<usize> = cands.iter().copied().filter(|&i| self.templates[i].speaker == want).collect();
        let pool = if preferred.is_empty() { cands } else { &preferred };
        Some(pool[rng.gen_range(0..pool.len())])
    }

    /// Greedy longest-signature-first tiling of `schema`.
    pub fn segment<R: Rng + ?Sized>(&self, schema: &FlowSchema, item: Option<TypeId>, rng: &mut R) -> Vec<TemplateRef> {
        let types = &schema.types;
        let mut out = Vec::new();
        let mut i = 0;
        while i < types.len() {
            let max = self.longest.min(types.len() - i);
            let hit = (1..=max).rev().find_map(|l| self.choose(&types[i..i + l], item, rng).map(|t| (t, l)));
            match hit {
                Some((t, l)) => {
                    out.push(TemplateRef::Bank(t));
                    i += l;
                }
                None => {
                    log::debug!("fallback template for type {}", types[i]);
                    out.push(TemplateRef::Fallback(types[i]));
                    i += 1;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealizeConfig {
    /// Open with a random mention-free corpus turn when one exists.
    pub chit_chat: bool,
}

/// A simulated dialogue with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedDialogue {
    pub dialogue: Dialogue,
    pub flow: ConversationFlow,
    pub schema: FlowSchema,
    pub templates: Vec<TemplateRef>,
    pub fallbacks: usize,
}

/// Fills the flow's entities, left to right, into a tiling of its schema.
pub fn realize<R: Rng + ?Sized>(
    id: &str,
    users: (&UserId, &UserId),
    flow: &[EntityId],
    schema: &FlowSchema,
    bank: &TemplateBank,
    kg: &KnowledgeGraph,
    config: RealizeConfig,
    rng: &mut R,
) -> Result<RealizedDialogue, RealizationError> {
    if flow.len() != schema.len() {
        return Err(RealizationError::Misaligned { flow: flow.len(), schema: schema.len() });
    }
    if let Some(p) = flow.iter().zip(&schema.types).position(|(e, t)| kg.type_of(*e) != *t) {
        return Err(RealizationError::TypeMismatch(p));
    }
    let mut templates = Vec::new();
    if config.chit_chat && !bank.chit_chat.is_empty() {
        templates.push(TemplateRef::Bank(bank.chit_chat[rng.gen_range(0..bank.chit_chat.len())]));
    }
    templates.extend(bank.segment(schema, kg.item_type(), rng));
    let fallbacks = templates.iter().filter(|t| matches!(t, TemplateRef::Fallback(_))).count();
    if fallbacks > 0 {
        log::info!("dialogue {id}: {fallbacks} fallback template(s)");
    }
    let mut turns = Vec::with_capacity(templates.len());
    let mut next = 0;
    for &r in &templates {
        let t = bank.get(r);
        let ents = &flow[next..next + t.slot_signature.len()];
        next += ents.len();
        let names: Vec<&str> = ents.iter().map(|&e| kg.entity(e).name.as_str()).collect();
        let (text, spans) = t.fill(&names).expect("signature length matches filler count");
        let mentions = ents
            .iter()
            .zip(spans)
            .map(|(&entity, (start, end))| Mention { entity, start, end })
            .collect();
        turns.push(Turn { speaker: t.speaker, text, mentions });
    }
    let mut flow_out = ConversationFlow::from_entities(flow.to_vec());
    for (ti, t) in turns.iter().enumerate() {
        for _ in &t.mentions {
            flow_out.turn_index.push(ti);
            flow_out.speakers.push(t.speaker);
        }
    }
    let dialogue = Dialogue { id: id.into(), turns, seeker: users.0.clone(), recommender: users.1.clone() };
    Ok(RealizedDialogue { dialogue, flow: flow_out, schema: schema.clone(), templates, fallbacks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Real,
    Simulated,
}

/// Context entities followed by the item the recommender mentioned next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecSample {
    pub context: Vec<EntityId>,
    pub label: EntityId,
    pub source: SampleSource,
}

/// One sample per item mention in a recommender turn; the context holds every
/// mention from earlier turns. Items already in the context are skipped.
pub fn to_rec_samples(d: &Dialogue, kg: &KnowledgeGraph, source: SampleSource) -> Vec<RecSample> {
    let mut context: Vec<EntityId> = Vec::new();
    let mut out = Vec::new();
    for t in &d.turns {
        if t.speaker == Speaker::Recommender {
            for m in &t.mentions {
                if kg.is_item(m.entity) && !context.contains(&m.entity) {
                    out.push(RecSample { context: context.clone(), label: m.entity, source });
                }
            }
        }
        context.extend(t.mentions.iter().map(|m| m.entity));
    }
    out
}

/// Every realized turn's text equals its template filled with the turn's own
/// mention surfaces.
pub fn provenance_holds(r: &RealizedDialogue, bank: &TemplateBank) -> bool {
    r.templates.len() == r.dialogue.turns.len()
        && r.templates.iter().zip(&r.dialogue.turns).all(|(&tr, turn)| {
            let t = bank.get(tr);
            let names: Vec<&str> = (0..turn.mentions.len()).map(|k| turn.surface(k)).collect();
            t.speaker == turn.speaker && t.fill(&names).map(|(s, _)| s == turn.text).unwrap_or(false)
        })
}

/// Identifier for the `k`-th simulated dialogue of a course.
pub fn simulated_id(course: usize, k: usize) -> String {
    format!("sim-{course}-{k}")
}
