//! Independent reference computations for the numeric pieces of the core.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use cfcrs_core::corpus::FlowSchema;
use cfcrs_core::counterfactual::{apply_edit, edited_preference, select_edit_targets};
use cfcrs_core::embeddings::{Activation, RelationalGraph, Rgcn, RgcnConfig, UserEncoder};
use cfcrs_core::flm::{sample_pseudo_flow, Decoding, FlmConfig, FlowLm};
use cfcrs_core::kg::{load_kg, validate_path, KnowledgeGraph, PathSampler, SamplingStrategy, TripleRecord, TypeRecord};
use cfcrs_core::metrics::distinct_n;
use cfcrs_core::nn::{grad_check, grad_check_against, uniform, ParamStore, Tensor};
use cfcrs_core::schema::{
    predict_schema, train_schema_classifier, ClassifierTrainConfig, SchemaCatalog, SchemaClassifier, SchemaExample,
};
use cfcrs_core::EntityId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tr(h: &str, r: &str, t: &str) -> TripleRecord {
    TripleRecord { head: h.into(), relation: r.into(), tail: t.into() }
}

fn ty(e: &str, t: &str) -> TypeRecord {
    TypeRecord { entity: e.into(), entity_type: t.into() }
}

fn id(kg: &KnowledgeGraph, n: &str) -> EntityId {
    kg.entity_id(n).unwrap()
}

// ---------------------------------------------------------------- R-GCN

fn dense_rgcn_layer(
    h: &[Vec<f64>],
    edges: &[Vec<(usize, usize)>],
    w_rel: &[Vec<Vec<f64>>],
    w_self: &[Vec<f64>],
    act: fn(f64) -> f64,
) -> Vec<Vec<f64>> {
    let n = h.len();
    let d = h[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for (r, list) in edges.iter().enumerate() {
        let mut a = vec![vec![0.0; n]; n];
        let mut deg = vec![0usize; n];
        for &(dst, _) in list {
            deg[dst] += 1;
        }
        for &(dst, src) in list {
            a[dst][src] += 1.0 / deg[dst] as f64;
        }
        for v in 0..n {
            for u in 0..n {
                if a[v][u] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let mut m = 0.0;
                    for i in 0..d {
                        m += h[u][i] * w_rel[r][i][j];
                    }
                    out[v][j] += a[v][u] * m;
                }
            }
        }
    }
    for v in 0..n {
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += h[v][i] * w_self[i][j];
            }
            out[v][j] = act(out[v][j] + s);
        }
    }
    out
}

#[test]
fn rgcn_matches_dense_reference_on_five_nodes() {
    let edges = vec![vec![(1, 0), (2, 0), (2, 3)], vec![(0, 1), (0, 2), (3, 2)], vec![(4, 1)], vec![]];
    let graph = RelationalGraph::from_edges(5, &edges);
    let d = 3;
    let cfg = RgcnConfig {
        dim: d,
        num_layers: 2,
        num_bases: 2,
        hidden_activation: Activation::Tanh,
        output_activation: Activation::Identity,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Rgcn::init("g", cfg, 5, edges.len(), &mut store, &mut rng).unwrap();
    let got = g.embed(&store, &graph).table;

    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect::<Vec<_>>();
    let mut h = rows(store.expect("g.nodes"));
    for l in 0..2 {
        let bases = store.expect(&format!("g.l{l}.bases"));
        let coef = store.expect(&format!("g.l{l}.coef"));
        let w_rel: Vec<Vec<Vec<f64>>> = (0..edges.len())
            .map(|r| {
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| (0..2).map(|b| coef.get(r, b) * bases.get(b, i * d + j)).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let w_self = rows(store.expect(&format!("g.l{l}.self")));
        let act: fn(f64) -> f64 = if l == 0 { f64::tanh } else { |x| x };
        h = dense_rgcn_layer(&h, &edges, &w_rel, &w_self, act);
    }
    for v in 0..5 {
        for j in 0..d {
            assert!((got.get(v, j) - h[v][j]).abs() < 1e-10, "node {v} dim {j}");
        }
    }
}

#[test]
fn rgcn_zero_relation_weights_leave_self_path() {
    let graph = RelationalGraph::from_edges(2, &[vec![(0, 1), (1, 0)]]);
    let cfg = RgcnConfig { dim: 2, num_layers: 1, num_bases: 1, ..Default::default() };
    let mut store = ParamStore::new();
    let g = Rgcn::init("g", cfg, 2, 1, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let with_edges = g.embed(&store, &graph).table;
    store.set("g.l0.coef", Tensor::zeros(1, 1)).unwrap();
    let zeroed = g.embed(&store, &graph).table;
    let isolated = g.embed(&store, &RelationalGraph::from_edges(2, &[vec![]])).table;
    assert_eq!(zeroed, isolated);
    assert_ne!(with_edges, zeroed);
}

// ---------------------------------------------------------------- attention

#[test]
fn attention_matches_hand_arithmetic() {
    let mut store = ParamStore::new();
    store.insert("u.w", Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]));
    store.insert("u.b", Tensor::from_rows(&[vec![1.5], vec![-0.5]]));
    let enc = UserEncoder::bind_existing("u");
    let e1 = [1.0, 2.0];
    let e2 = [-0.5, 0.3];
    // s_n = b1·tanh(e·W[:,0]) + b2·tanh(e·W[:,1])
    let s1 = 1.5 * (1.0 * 0.5 + 2.0 * 2.0f64).tanh() - 0.5 * (1.0 * -1.0 + 2.0 * 0.25f64).tanh();
    let s2 = 1.5 * (-0.5 * 0.5 + 0.3 * 2.0f64).tanh() - 0.5 * (-0.5 * -1.0 + 0.3 * 0.25f64).tanh();
    let a1 = s1.exp() / (s1.exp() + s2.exp());
    let a2 = 1.0 - a1;
    let pref = enc.encode_user(&store, &Tensor::from_rows(&[e1.to_vec(), e2.to_vec()])).unwrap();
    assert!((pref.alpha[0] - a1).abs() < 1e-12);
    assert!((pref.alpha[1] - a2).abs() < 1e-12);
    assert!((pref.e_u[0] - (a1 * e1[0] + a2 * e2[0])).abs() < 1e-12);
    assert!((pref.e_u[1] - (a1 * e1[1] + a2 * e2[1])).abs() < 1e-12);
}

fn reference_pool(w: &Tensor, b: &Tensor, rows: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = rows
        .iter()
        .map(|e| {
            (0..w.cols())
                .map(|k| b.get(k, 0) * (0..e.len()).map(|i| e[i] * w.get(i, k)).sum::<f64>().tanh())
                .sum()
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().zip(&scores).map(|(e, s)| (s - m).exp() / z * e[j]).sum()).collect()
}

#[test]
fn edited_row_matches_independent_reevaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let enc = UserEncoder::init("u", 4, 3, &mut store, &mut rng);
    let m = uniform(&mut rng, 3, 4, 1.0);
    let delta = [0.3, -0.2, 0.05, 0.4];
    let edited = apply_edit(&m, 1, &delta).unwrap();
    for r in [0, 2] {
        assert_eq!(edited.row_slice(r), m.row_slice(r));
    }
    let mut rows: Vec<Vec<f64>> = (0..3).map(|r| m.row_slice(r).to_vec()).collect();
    for (v, d) in rows[1].iter_mut().zip(delta) {
        *v += d;
    }
    let want = reference_pool(store.expect("u.w"), store.expect("u.b"), &rows);
    let got = edited_preference(&enc, &store, &m, 1, &delta).unwrap().e_u;
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn zero_edit_is_identity_and_single_entity_edit_adds() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let enc = UserEncoder::init("u", 3, 3, &mut store, &mut rng);
    let m = uniform(&mut rng, 4, 3, 1.0);
    assert_eq!(apply_edit(&m, 2, &[0.0; 3]).unwrap(), m);
    let plain = enc.encode_user(&store, &m).unwrap().e_u;
    assert_eq!(edited_preference(&enc, &store, &m, 2, &[0.0; 3]).unwrap().e_u, plain);

    let one = Tensor::row(&[0.1, 0.2, 0.3]);
    let d = [1.0, -2.0, 0.5];
    let got = edited_preference(&enc, &store, &one, 0, &d).unwrap().e_u;
    assert_eq!(got, vec![0.1 + 1.0, 0.2 - 2.0, 0.3 + 0.5]);
}

#[test]
fn edit_targets_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut hits = [0usize; 4];
    for _ in 0..n {
        let t = select_edit_targets(4, 2, &mut rng);
        assert_eq!(t.len(), 2);
        assert_ne!(t[0], t[1]);
        for p in t {
            hits[p] += 1;
        }
    }
    let sigma = (n as f64 * 0.5 * 0.5).sqrt();
    for h in hits {
        assert!((h as f64 - n as f64 * 0.5).abs() <= 3.0 * sigma, "{hits:?}");
    }
}

// ---------------------------------------------------------------- schema

#[test]
fn two_schema_prediction_matches_hand_softmax() {
    let mut store = ParamStore::new();
    // identity hidden layer on [e_u, e_v] (width 2)
    store.insert("c.w1", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    store.insert("c.b1", Tensor::zeros(1, 2));
    store.insert("c.w2", Tensor::from_rows(&[vec![2.0, -1.0], vec![0.5, 3.0]]));
    store.insert("c.b2", Tensor::row(&[0.1, -0.3]));
    let clf = SchemaClassifier::bind_existing("c", &store);
    let cat = SchemaCatalog::from_entries(
        vec![(FlowSchema::new(vec![cfcrs_core::TypeId(0)]), 9), (FlowSchema::new(vec![cfcrs_core::TypeId(1)]), 5)],
        1,
        16,
    );
    let (u, v) = (0.4f64, -0.7f64);
    let (h1, h2) = (u.tanh(), v.tanh());
    let l1 = 2.0 * h1 + 0.5 * h2 + 0.1;
    let l2 = -1.0 * h1 + 3.0 * h2 - 0.3;
    let p1 = l1.exp() / (l1.exp() + l2.exp());
    let pred = predict_schema(&clf, &store, &cat, &[u], &[v]).unwrap();
    assert!((pred.probs[0] - p1).abs() < 1e-12);
    assert!((pred.probs[1] - (1.0 - p1)).abs() < 1e-12);
    assert_eq!(pred.index, if p1 >= 0.5 { 0 } else { 1 });
}

#[test]
fn single_schema_catalog_is_certain() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clf = SchemaClassifier::init("c", 2, 1, &mut store, &mut rng);
    store.set("c.w2", uniform(&mut rng, 4, 1, 3.0)).unwrap();
    let cat = SchemaCatalog::from_entries(vec![(FlowSchema::new(vec![cfcrs_core::TypeId(0)]), 3)], 1, 16);
    let pred = predict_schema(&clf, &store, &cat, &[0.3, 9.0], &[-4.0, 1.0]).unwrap();
    assert_eq!(pred.probs, [1.0]);
}

#[test]
fn separable_pairs_are_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let clf = SchemaClassifier::init("c", 2, 2, &mut store, &mut rng);
    let ex: Vec<SchemaExample> = (0..40)
        .map(|i| {
            let gold = i % 2;
            let side = if gold == 0 { 1.0 } else { -1.0 };
            let e_u = vec![side * rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0)];
            let e_v = vec![rng.gen_range(-1.0..1.0), side * rng.gen_range(0.2..1.0)];
            SchemaExample { e_u, e_v, gold }
        })
        .collect();
    let cfg = ClassifierTrainConfig { epochs: 200, ..Default::default() };
    train_schema_classifier(&clf, &mut store, &ex, &[], &cfg, &mut rng).unwrap();
    let cat = SchemaCatalog::from_entries(
        vec![(FlowSchema::new(vec![cfcrs_core::TypeId(0)]), 2), (FlowSchema::new(vec![cfcrs_core::TypeId(1)]), 1)],
        1,
        16,
    );
    for e in &ex {
        assert_eq!(predict_schema(&clf, &store, &cat, &e.e_u, &e.e_v).unwrap().index, e.gold);
    }
}

// ---------------------------------------------------------------- paths

fn six_entity_world() -> KnowledgeGraph {
    load_kg(
        &[tr("m1", "genre", "g1"), tr("m2", "genre", "g1"), tr("m3", "genre", "g2"), tr("m4", "star", "a1")],
        &[
            ty("m1", "item"),
            ty("m2", "item"),
            ty("m3", "item"),
            ty("m4", "item"),
            ty("g1", "genre"),
            ty("g2", "genre"),
            ty("a1", "actor"),
        ],
    )
    .unwrap()
}

/// Distinct entities joined by at most `hops` undirected edges.
fn bfs_connected(kg: &KnowledgeGraph, a: EntityId, b: EntityId, hops: usize) -> bool {
    if a == b {
        return false;
    }
    let mut adj: HashMap<EntityId, Vec<EntityId>> = HashMap::new();
    for t in kg.triples() {
        adj.entry(t.head).or_default().push(t.tail);
        adj.entry(t.tail).or_default().push(t.head);
    }
    let mut frontier = vec![a];
    let mut seen = BTreeSet::from([a]);
    for _ in 0..hops {
        let mut next = Vec::new();
        for x in frontier {
            for &y in adj.get(&x).map(Vec::as_slice).unwrap_or(&[]) {
                if y == b {
                    return true;
                }
                if seen.insert(y) {
                    next.push(y);
                }
            }
        }
        frontier = next;
    }
    false
}

fn enumerate_paths(kg: &KnowledgeGraph, schema: &FlowSchema, hops: usize) -> Vec<Vec<EntityId>> {
    let mut out: Vec<Vec<EntityId>> = vec![vec![]];
    for (i, &t) in schema.types.iter().enumerate() {
        let mut next = Vec::new();
        for p in &out {
            for e in (0..kg.num_entities()).map(EntityId::from_index) {
                if kg.type_of(e) != t {
                    continue;
                }
                if i > 0 && !bfs_connected(kg, p[i - 1], e, hops) {
                    continue;
                }
                let mut q = p.clone();
                q.push(e);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

#[test]
fn path_sampler_is_uniform_over_valid_paths() {
    let kg = six_entity_world();
    let schema = FlowSchema::new(vec![kg.type_id("genre").unwrap(), kg.type_id("item").unwrap()]);
    let valid = enumerate_paths(&kg, &schema, 2);
    // g1 reaches m1, m2 directly; g2 reaches m3; m4 hangs off the actor only
    assert_eq!(valid.len(), 3 + 0 + 0 + 0);
    let sampler = PathSampler::new(&kg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let mut counts: BTreeMap<Vec<EntityId>, usize> = BTreeMap::new();
    for _ in 0..n {
        let f = sampler.sample(&schema, SamplingStrategy::Exact, &mut rng).unwrap().unwrap();
        assert!(valid.contains(&f.entities));
        *counts.entry(f.entities).or_default() += 1;
    }
    let p = 1.0 / valid.len() as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for v in &valid {
        let c = counts.get(v).copied().unwrap_or(0) as f64;
        assert!((c - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn item_item_paths_cover_two_hop_neighbours() {
    let kg = six_entity_world();
    let item = kg.type_id("item").unwrap();
    let schema = FlowSchema::new(vec![item, item]);
    let valid = enumerate_paths(&kg, &schema, 2);
    let sampler = PathSampler::new(&kg, 2).unwrap();
    assert_eq!(sampler.plan(&schema).unwrap().path_count(), valid.len() as f64);
    assert_eq!(valid.len(), 2);
    assert!(valid.contains(&vec![id(&kg, "m1"), id(&kg, "m2")]));
}

#[test]
fn pseudo_flows_skip_unreachable_schema() {
    let kg = six_entity_world();
    let (genre, actor) = (kg.type_id("genre").unwrap(), kg.type_id("actor").unwrap());
    let reachable = FlowSchema::new(vec![genre, kg.type_id("item").unwrap()]);
    let dead = FlowSchema::new(vec![genre, actor]);
    assert!(enumerate_paths(&kg, &dead, 2).is_empty());
    let cat = SchemaCatalog::from_entries(vec![(reachable.clone(), 5), (dead.clone(), 5)], 1, 16);
    let sampler = PathSampler::new(&kg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let pf = sample_pseudo_flow(&sampler, &cat, None, SamplingStrategy::Exact, 1000, &mut rng).unwrap();
        assert_eq!(pf.schema, reachable);
        assert!(validate_path(&kg, &pf.flow.entities, &pf.schema, 2));
        assert_eq!(pf.seeker.len() + pf.recommender.len(), 2);
        assert!(!pf.seeker.is_empty() && !pf.recommender.is_empty());
    }
}

// ---------------------------------------------------------------- flow model

fn three_entity_world() -> KnowledgeGraph {
    load_kg(
        &[tr("m1", "genre", "g1"), tr("m2", "genre", "g1")],
        &[ty("m1", "item"), ty("m2", "item"), ty("g1", "genre")],
    )
    .unwrap()
}

fn tiny_flm(kg: &KnowledgeGraph, seed: u64, store: &mut ParamStore) -> FlowLm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlmConfig { layers: 1, width: 8, heads: 2, ffn_width: 16, max_len: 4 };
    let flm = FlowLm::init("flm", cfg, kg, 2, store, &mut rng);
    // a non-zero head so the distribution is not uniform
    store.set("flm.head.w", uniform(&mut rng, 8, flm.vocab_size(), 2.0)).unwrap();
    flm
}

fn all_flows(kg: &KnowledgeGraph, schema: &FlowSchema) -> Vec<Vec<EntityId>> {
    let mut out: Vec<Vec<EntityId>> = vec![vec![]];
    for &t in &schema.types {
        out = out
            .iter()
            .flat_map(|p| {
                kg.entities_of_type(t).iter().map(move |&e| {
                    let mut q = p.clone();
                    q.push(e);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn flow_probabilities_sum_to_one() {
    let kg = three_entity_world();
    let mut store = ParamStore::new();
    let flm = tiny_flm(&kg, 4, &mut store);
    let (item, genre) = (kg.type_id("item").unwrap(), kg.type_id("genre").unwrap());
    for schema in [FlowSchema::new(vec![item, item]), FlowSchema::new(vec![genre, item]), FlowSchema::new(vec![item, genre])] {
        let total: f64 = all_flows(&kg, &schema)
            .iter()
            .map(|f| flm.flow_log_prob(&store, &[0.3, -0.1], &[0.8, 0.2], &schema, f).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }
}

#[test]
fn singleton_type_step_is_free() {
    let kg = three_entity_world();
    let mut store = ParamStore::new();
    let flm = tiny_flm(&kg, 5, &mut store);
    let schema = FlowSchema::new(vec![kg.type_id("item").unwrap(), kg.type_id("genre").unwrap()]);
    let steps = flm.step_values(&store, &[0.1, 0.2], &[0.3, 0.4], &schema, &[id(&kg, "m2"), id(&kg, "g1")]).unwrap();
    assert_eq!(steps[1], 0.0);
    let total = flm.flow_log_prob(&store, &[0.1, 0.2], &[0.3, 0.4], &schema, &[id(&kg, "m2"), id(&kg, "g1")]).unwrap();
    assert_eq!(total, steps.iter().sum::<f64>());
}

#[test]
fn sampled_flow_frequencies_match_exact_probabilities() {
    let kg = three_entity_world();
    let mut store = ParamStore::new();
    let flm = tiny_flm(&kg, 6, &mut store);
    let item = kg.type_id("item").unwrap();
    let schema = FlowSchema::new(vec![item, item, item]);
    let (eu, ev) = ([0.5, -0.4], [-0.2, 0.9]);
    let flows = all_flows(&kg, &schema);
    let probs: Vec<f64> = flows.iter().map(|f| flm.flow_log_prob(&store, &eu, &ev, &schema, f).unwrap().exp()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 50_000;
    let mut counts = vec![0usize; flows.len()];
    for _ in 0..n {
        let f = flm.generate(&store, &eu, &ev, &schema, Decoding::Temperature(1.0), &mut rng).unwrap();
        counts[flows.iter().position(|x| *x == f.entities).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?} vs {probs:?}");
    }
}

#[test]
fn low_temperature_approaches_greedy() {
    let kg = three_entity_world();
    let mut store = ParamStore::new();
    let flm = tiny_flm(&kg, 7, &mut store);
    let item = kg.type_id("item").unwrap();
    let schema = FlowSchema::new(vec![item, item, item]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let greedy = flm.generate(&store, &[0.1, 0.1], &[0.2, -0.3], &schema, Decoding::Greedy, &mut rng).unwrap();
    for _ in 0..20 {
        let cold = flm.generate(&store, &[0.1, 0.1], &[0.2, -0.3], &schema, Decoding::Temperature(1e-6), &mut rng).unwrap();
        assert_eq!(cold, greedy);
    }
}

#[test]
fn swapped_user_prompts_are_distinguished() {
    let kg = three_entity_world();
    let mut store = ParamStore::new();
    let flm = tiny_flm(&kg, 8, &mut store);
    let item = kg.type_id("item").unwrap();
    let schema = FlowSchema::new(vec![item, item]);
    let f = [id(&kg, "m1"), id(&kg, "m2")];
    let a = flm.flow_log_prob(&store, &[0.9, -0.3], &[-0.5, 0.4], &schema, &f).unwrap();
    let b = flm.flow_log_prob(&store, &[-0.5, 0.4], &[0.9, -0.3], &schema, &f).unwrap();
    assert_ne!(a, b);
}

// ---------------------------------------------------------------- gradients

#[test]
fn three_layer_composition_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    store.insert("x", uniform(&mut rng, 2, 3, 1.0));
    store.insert("w1", uniform(&mut rng, 3, 4, 1.0));
    store.insert("w2", uniform(&mut rng, 4, 4, 1.0));
    store.insert("w3", uniform(&mut rng, 4, 2, 1.0));
    let err = grad_check(
        |tape, bind| {
            let x = bind.get(tape, "x");
            let mut h = x;
            for (w, squash) in [("w1", true), ("w2", true), ("w3", false)] {
                let wv = bind.get(tape, w);
                h = tape.matmul(h, wv);
                if squash {
                    h = tape.tanh(h);
                }
            }
            tape.sum_squares(h)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn quadratic_form_gradient_is_nearly_exact() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::row(&[0.3, -1.2, 2.0]));
    let err = grad_check(|tape, bind| { let p = bind.get(tape, "p"); tape.sum_squares(p) }, &store, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut store = ParamStore::new();
    store.insert("z", uniform(&mut rng, 3, 5, 2.0));
    let err = grad_check(
        |tape, bind| {
            let z = bind.get(tape, "z");
            let lp = tape.log_softmax_rows(z, None);
            let p = tape.pick(lp, &[(0, 1), (1, 4), (2, 0)]);
            let m = tape.mean(p);
            tape.scale(m, -1.0)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::row(&[0.5, 1.5]));
    let f = |tape: &mut cfcrs_core::nn::Tape, bind: cfcrs_core::nn::Binding<'_>| {
        let p = bind.get(tape, "p");
        tape.sum_squares(p)
    };
    let mut wrong = BTreeMap::new();
    wrong.insert("p".to_string(), Tensor::row(&[1.0 + 0.1, 3.0]));
    let err = grad_check_against(f, &store, 1e-5, &wrong).unwrap();
    assert!(err > 1e-2, "{err}");
}

// ---------------------------------------------------------------- metrics

#[test]
fn distinct_n_examples() {
    let same = vec!["a b c d e f"; 10];
    assert_eq!(distinct_n(&same, 2), 0.5);
    let disjoint = ["a b c", "d e f g", "h i"];
    // bigram counts 2, 3, 1
    assert_eq!(distinct_n(&disjoint, 2), 2.0);
    assert_eq!(distinct_n::<&str>(&[], 3), 0.0);
}
