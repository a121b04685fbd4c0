//! Seeded synthetic recommendation world: a typed movie-like knowledge graph
//! and scripted dialogues whose recommended items share the attributes the
//! seeker asked for.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueRecord, MentionRecord, Speaker, TurnRecord};
use crate::kg::{TripleRecord, TypeRecord, ITEM_TYPE};

const ATTRIBUTE_TYPES: [&str; 19] = [
    "genre", "actor", "director", "writer", "studio", "country", "language", "decade", "mood", "theme", "setting",
    "award", "composer", "producer", "franchise", "rating", "format", "audience", "tone",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub items: usize,
    /// Attribute entities spread as evenly as possible over the 19 attribute
    /// types.
    pub attributes: usize,
    pub dialogues: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { items: 100, attributes: 100, dialogues: 500, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub triples: Vec<TripleRecord>,
    pub types: Vec<TypeRecord>,
    pub dialogues: Vec<DialogueRecord>,
}

/// One scripted turn: speaker plus what each slot refers to.
#[derive(Clone, Copy)]
enum Slot {
    /// Attribute of the seeker's target item.
    Attr(usize),
    /// An item the seeker already likes (shares the genre of the target).
    Liked,
    /// An item matching every attribute mentioned so far, best match first.
    Rec,
}

struct Script {
    turns: &'static [(Speaker, &'static [Slot])],
}

use Slot::{Attr, Liked, Rec};
use Speaker::{Recommender as R, Seeker as S};

// genre = 0, actor = 1, director = 2, mood = 8
const SCRIPTS: [Script; 8] = [
    Script { turns: &[(S, &[Attr(0)]), (R, &[Rec])] },
    Script { turns: &[(S, &[Attr(0)]), (R, &[Rec]), (S, &[Attr(1)]), (R, &[Rec])] },
    Script { turns: &[(S, &[Attr(1)]), (R, &[Rec])] },
    Script { turns: &[(S, &[Liked]), (R, &[Rec])] },
    Script { turns: &[(S, &[Attr(0), Attr(1)]), (R, &[Rec])] },
    Script { turns: &[(S, &[Attr(2)]), (R, &[Rec]), (S, &[]), (R, &[Rec])] },
    Script { turns: &[(S, &[Attr(0)]), (R, &[Rec]), (S, &[Attr(1), Attr(0)]), (R, &[Rec])] },
    Script { turns: &[(S, &[]), (S, &[Attr(8), Attr(0)]), (R, &[Rec, Attr(1)])] },
];

/// Phrasings per (speaker, slot kinds). `{}` marks a slot.
fn phrasings(speaker: Speaker, slots: &[Slot]) -> &'static [&'static str] {
    match (speaker, slots) {
        (S, []) => &["Hi there!", "Hello, I need a suggestion.", "Thanks, anything else?", "Hmm, not sure about that one."],
        (S, [Attr(_)]) => &[
            "I am in the mood for something {}.",
            "I really enjoy {} stuff.",
            "Anything with {} would be great.",
            "I love all kinds of {} movies.",
        ],
        (S, [Liked]) => &["I recently watched {} and loved it.", "My favorite is {}.", "Something like {} please."],
        (S, [Attr(_), Attr(_)]) => &[
            "I like {} movies, especially with {}.",
            "Something {} with {} maybe?",
            "I want {} and {} if possible.",
        ],
        (R, [Rec]) => &["Have you seen {}?", "You might like {}.", "How about {}?", "I would recommend {}."],
        (R, [Rec, Attr(_)]) => &["Try {}, it has {} in it.", "{} is great, and {} is fantastic there."],
        _ => &["{}"],
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic split of a dialogue id into train / validation / test by
/// hash: `test_pct` percent test, `val_pct` percent validation.
pub fn split_of(id: &str, val_pct: u64, test_pct: u64) -> Split {
    let b = fnv(id) % 100;
    if b < test_pct {
        Split::Test
    } else if b < test_pct + val_pct {
        Split::Validation
    } else {
        Split::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub fn generate_world(config: &WorldConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let nt = ATTRIBUTE_TYPES.len();
    let mut attr_names: Vec<Vec<String>> = vec![Vec::new(); nt];
    for k in 0..config.attributes {
        let t = k % nt;
        let name = format!("{}_{}", ATTRIBUTE_TYPES[t], attr_names[t].len());
        attr_names[t].push(name);
    }
    let items: Vec<String> = (0..config.items).map(|i| format!("movie_{i}")).collect();
    let mut types = Vec::new();
    for it in &items {
        types.push(TypeRecord { entity: it.clone(), entity_type: ITEM_TYPE.to_string() });
    }
    for (t, names) in attr_names.iter().enumerate() {
        for n in names {
            types.push(TypeRecord { entity: n.clone(), entity_type: ATTRIBUTE_TYPES[t].to_string() });
        }
    }
    // item -> chosen attribute index per type
    let mut attrs: Vec<Vec<usize>> = Vec::with_capacity(items.len());
    let mut triples = Vec::new();
    for it in &items {
        let mut row = Vec::with_capacity(nt);
        for t in 0..nt {
            if attr_names[t].is_empty() {
                row.push(usize::MAX);
                continue;
            }
            let a = rng.gen_range(0..attr_names[t].len());
            triples.push(TripleRecord {
                head: it.clone(),
                relation: format!("has_{}", ATTRIBUTE_TYPES[t]),
                tail: attr_names[t][a].clone(),
            });
            row.push(a);
        }
        attrs.push(row);
    }

    let mut dialogues = Vec::with_capacity(config.dialogues);
    for d in 0..config.dialogues {
        let script = &SCRIPTS[rng.gen_range(0..SCRIPTS.len())];
        let target = rng.gen_range(0..items.len());
        let mut asked: Vec<(usize, usize)> = Vec::new();
        let mut used: Vec<usize> = Vec::new();
        let mut turns = Vec::new();
        for &(speaker, slots) in script.turns {
            let mut names: Vec<String> = Vec::new();
            for slot in slots {
                match *slot {
                    Attr(t) => {
                        let a = attrs[target][t];
                        asked.push((t, a));
                        names.push(attr_names[t][a].clone());
                    }
                    Liked => {
                        let g = attrs[target][0];
                        let pool: Vec<usize> =
                            (0..items.len()).filter(|&i| i != target && attrs[i][0] == g).collect();
                        let pick = pool.choose(&mut rng).copied().unwrap_or(target);
                        asked.push((0, g));
                        used.push(pick);
                        names.push(items[pick].clone());
                    }
                    Rec => {
                        let score = |i: usize| asked.iter().filter(|&&(t, a)| attrs[i][t] == a).count();
                        let best = (0..items.len())
                            .filter(|i| !used.contains(i))
                            .map(score)
                            .max()
                            .unwrap_or(0);
                        let pool: Vec<usize> =
                            (0..items.len()).filter(|&i| !used.contains(&i) && score(i) == best).collect();
                        let pick = if pool.contains(&target) && rng.gen_bool(0.5) {
                            target
                        } else {
                            *pool.choose(&mut rng).expect("items remain")
                        };
                        used.push(pick);
                        names.push(items[pick].clone());
                    }
                }
            }
            let forms = phrasings(speaker, slots);
            let form = forms[rng.gen_range(0..forms.len())];
            turns.push(fill(speaker, form, &names));
        }
        dialogues.push(DialogueRecord { dialogue_id: format!("d{d:04}"), turns, seeker_id: None, recommender_id: None });
    }
    World { triples, types, dialogues }
}

fn fill(speaker: Speaker, form: &str, names: &[String]) -> TurnRecord {
    let mut text = String::new();
    let mut mentions = Vec::new();
    let mut chars = 0;
    let mut parts = form.split("{}");
    let first = parts.next().unwrap_or_default();
    text.push_str(first);
    chars += first.chars().count();
    for (name, rest) in names.iter().zip(parts) {
        let start = chars;
        text.push_str(name);
        chars += name.chars().count();
        mentions.push(MentionRecord { entity: name.clone(), start, end: chars });
        text.push_str(rest);
        chars += rest.chars().count();
    }
    TurnRecord { speaker, text, mentions }
}
