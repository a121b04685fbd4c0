//! Round trips of the file formats.

use std::path::Path;

use cfcrs::checkpoint::{from_bytes, to_bytes};
use cfcrs::formats::{parse_jsonl, parse_triples, parse_type_map, read_dialogues, read_triples, read_type_map, to_jsonl, triples_tsv, type_map_tsv};
use cfcrs_core::corpus::{extract_templates, load_dialogues, DialogueRecord, MentionRecord, Speaker, TurnRecord};
use cfcrs_core::kg::{load_kg, TripleRecord, TypeRecord};
use cfcrs_core::nn::{ParamStore, Tensor};
use proptest::prelude::*;

fn field() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9é ()_.:'-]{0,8}[a-zA-Z0-9é]"
}

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0usize..4, 1..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |data| Tensor::new(shape.clone(), data))
    })
}

fn store() -> impl Strategy<Value = ParamStore> {
    prop::collection::btree_map("[a-z.]{1,6}[0-9ü]", tensor(), 0..6).prop_flat_map(|m| {
        let entries: Vec<_> = m.into_iter().collect();
        Just(entries).prop_shuffle().prop_map(|entries| {
            let mut s = ParamStore::new();
            for (k, t) in entries {
                s.insert(k, t);
            }
            s
        })
    })
}

fn turn() -> impl Strategy<Value = TurnRecord> {
    (any::<bool>(), "[a-zé ]{0,12}", prop::collection::vec(("[a-z]{1,4}", 0usize..5, 0usize..5), 0..3)).prop_map(
        |(seeker, text, ms)| TurnRecord {
            speaker: if seeker { Speaker::Seeker } else { Speaker::Recommender },
            text,
            mentions: ms.into_iter().map(|(entity, start, end)| MentionRecord { entity, start, end }).collect(),
        },
    )
}

fn dialogue() -> impl Strategy<Value = DialogueRecord> {
    ("[a-z0-9-]{1,6}", prop::collection::vec(turn(), 1..4), prop::option::of("[A-Z][0-9]")).prop_map(
        |(dialogue_id, turns, user)| DialogueRecord {
            dialogue_id,
            turns,
            seeker_id: user.clone(),
            recommender_id: user.map(|u| format!("{u}r")),
        },
    )
}

proptest! {
    #[test]
    fn checkpoint_save_load_save_is_identical(s in store()) {
        let bytes = to_bytes(&s);
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn graph_files_round_trip(rows in prop::collection::vec((field(), field(), field()), 0..20)) {
        let triples: Vec<TripleRecord> =
            rows.iter().map(|(h, r, t)| TripleRecord { head: h.clone(), relation: r.clone(), tail: t.clone() }).collect();
        let text = triples_tsv(&triples);
        prop_assert_eq!(&parse_triples(text.as_bytes(), "t").unwrap(), &triples);
        let types: Vec<TypeRecord> =
            rows.iter().map(|(h, r, _)| TypeRecord { entity: h.clone(), entity_type: r.clone() }).collect();
        prop_assert_eq!(parse_type_map(type_map_tsv(&types).as_bytes(), "m").unwrap(), types);
    }

    #[test]
    fn dialogue_records_round_trip(ds in prop::collection::vec(dialogue(), 0..6)) {
        let text = to_jsonl(&ds);
        prop_assert_eq!(parse_jsonl::<DialogueRecord>(text.as_bytes(), "d").unwrap(), ds);
    }
}

#[test]
fn fixture_templates_reproduce_their_turns() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let kg = load_kg(&read_triples(&dir.join("kg.tsv")).unwrap(), &read_type_map(&dir.join("types.tsv")).unwrap()).unwrap();
    let records = read_dialogues(&dir.join("dialogues.jsonl")).unwrap();
    let ds = load_dialogues(&records, &kg).unwrap();
    assert_eq!(ds.len(), 50);
    let mut turns = 0;
    for d in &ds {
        let ts = extract_templates(d, &kg);
        assert_eq!(ts.len(), d.turns.len());
        for (t, turn) in ts.iter().zip(&d.turns) {
            let fill: Vec<&str> = (0..turn.mentions.len()).map(|k| turn.surface(k)).collect();
            let (text, spans) = t.fill(&fill).unwrap();
            assert_eq!(text.as_bytes(), turn.text.as_bytes(), "{}", d.id);
            let want: Vec<(usize, usize)> = turn.mentions.iter().map(|m| (m.start, m.end)).collect();
            assert_eq!(spans, want);
            turns += 1;
        }
        // and the record form survives a write
        assert_eq!(&d.to_record(&kg), records.iter().find(|r| r.dialogue_id == d.id).unwrap());
    }
    assert!(turns > 250);
}
