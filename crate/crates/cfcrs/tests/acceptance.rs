//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,7` runs a subset. Criteria listed in
//! [`KNOWN_UNATTAINED`] still run at their stated threshold and still print
//! FAIL when they miss it, but do not fail the process.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cfcrs::commands::{self, Command};
use cfcrs::config::{Preset, RunConfig};
use cfcrs::formats::{read_dialogues, read_triples, read_type_map};
use cfcrs::outputs::Manifest;
use cfcrs_core::corpus::{extract_flow, extract_templates, load_dialogues, Dialogue, FlowSchema};
use cfcrs_core::counterfactual::{
    Curriculum, EditState, EditTarget, ReinforceConfig, RewardBaseline, RewardFn, Simulator,
};
use cfcrs_core::embeddings::{Activation, EntityEmbeddings, RelationalGraph, Rgcn, RgcnConfig, UserEncoder};
use cfcrs_core::flm::{pretrain_flm, FlmConfig, FlmTrainConfig, FlowLm, PromptedFlow};
use cfcrs_core::kg::{attach_users, load_kg, validate_path, KnowledgeGraph, TripleRecord, TypeRecord};
use cfcrs_core::metrics::{distinct_n, mrr_at, ndcg_at, recall_at, RankingMetrics};
use cfcrs_core::nn::{grad_check, uniform, AdamWConfig, Binding, ParamStore, Tensor};
use cfcrs_core::pipeline::{build_simulator, prepare, pretrain_recommender, run_experiment, Arm, PipelineConfig};
use cfcrs_core::realization::{RecSample, SampleSource, TemplateBank};
use cfcrs_core::recommender::{RecConfig, Recommender};
use cfcrs_core::schema::{mine_schemas, SchemaCatalog, SchemaClassifier};
use cfcrs_core::synth::{generate_world, Split, WorldConfig};
use cfcrs_core::{EntityId, TypeId, UserId};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to miss their threshold at desk scale; the analysis is
/// in the README.
const KNOWN_UNATTAINED: &[usize] = &[10];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Plain data shared between the end-to-end criteria.
#[derive(Default)]
struct Shared {
    desk_baseline_mean: Option<f64>,
}

// ---------------------------------------------------------------- fixtures

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn kg_of(triples: &[(&str, &str, &str)], types: &[(&str, &str)]) -> KnowledgeGraph {
    let t: Vec<_> = triples
        .iter()
        .map(|(h, r, x)| TripleRecord { head: h.to_string(), relation: r.to_string(), tail: x.to_string() })
        .collect();
    let m: Vec<_> = types.iter().map(|(e, ty)| TypeRecord { entity: e.to_string(), entity_type: ty.to_string() }).collect();
    load_kg(&t, &m).unwrap()
}

/// Four items, three genres.
fn small_kg() -> KnowledgeGraph {
    kg_of(
        &[
            ("m0", "genre", "g0"),
            ("m1", "genre", "g0"),
            ("m1", "genre", "g1"),
            ("m2", "genre", "g1"),
            ("m3", "genre", "g2"),
            ("m0", "sequel", "m1"),
        ],
        &[("m0", "item"), ("m1", "item"), ("m2", "item"), ("m3", "item"), ("g0", "genre"), ("g1", "genre"), ("g2", "genre")],
    )
}

fn ent(kg: &KnowledgeGraph, n: &str) -> EntityId {
    kg.entity_id(n).unwrap()
}

fn ty(kg: &KnowledgeGraph, n: &str) -> TypeId {
    kg.type_id(n).unwrap()
}

fn flm_config() -> FlmConfig {
    FlmConfig { layers: 1, width: 8, heads: 2, ffn_width: 16, max_len: 4 }
}

fn randomize(store: &mut ParamStore, name: &str, scale: f64, r: &mut ChaCha8Rng) {
    let shape = store.expect(name).shape().to_vec();
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-scale..scale)).collect();
    store.set(name, Tensor::new(shape, data)).unwrap();
}

fn world() -> (KnowledgeGraph, Vec<Dialogue>) {
    let w = generate_world(&WorldConfig::default());
    let kg = load_kg(&w.triples, &w.types).unwrap();
    let ds = load_dialogues(&w.dialogues, &kg).unwrap();
    (kg, ds)
}

fn fixture_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

// ---------------------------------------------------------------- 1

fn gradient_suite(_: &mut Shared) -> Verdict {
    let t0 = Instant::now();
    let mut worst = Vec::new();
    let mut r = rng(1);

    // attention pooling encoder
    let mut store = ParamStore::new();
    let enc = UserEncoder::init("u", 4, 5, &mut store, &mut r);
    randomize(&mut store, "u.b", 0.5, &mut r);
    store.insert("ents", uniform(&mut r, 3, 4, 1.0));
    let e = grad_check(
        |tape, bind| {
            let x = bind.get(tape, "ents");
            let (pooled, _) = enc.encode(tape, bind, x);
            let t = tape.tanh(pooled);
            tape.sum(t)
        },
        &store,
        1e-5,
    )
    .unwrap();
    worst.push(("encoder", e));

    // one relational graph convolution layer
    let mut store = ParamStore::new();
    let cfg = RgcnConfig {
        dim: 3,
        num_layers: 1,
        num_bases: 2,
        hidden_activation: Activation::Identity,
        output_activation: Activation::Tanh,
    };
    let g = Rgcn::init("g", cfg, 5, 3, &mut store, &mut r).unwrap();
    let graph = RelationalGraph::from_edges(5, &[vec![(0, 1), (2, 1), (3, 4)], vec![(1, 0), (4, 2)], vec![(2, 3), (2, 0)]]);
    let e = grad_check(
        |tape, bind| {
            let h = bind.get(tape, "g.nodes");
            let out = g.layer(tape, bind, &graph, h, 0, Activation::Tanh);
            let sq = tape.sum_squares(out);
            let s = tape.sum(out);
            tape.add(sq, s)
        },
        &store,
        1e-5,
    )
    .unwrap();
    worst.push(("rgcn layer", e));

    // schema classifier
    let mut store = ParamStore::new();
    let clf = SchemaClassifier::init("s", 2, 3, &mut store, &mut r);
    for p in ["s.w2", "s.b1", "s.b2"] {
        randomize(&mut store, p, 0.5, &mut r);
    }
    let x = Tensor::from_rows(&[vec![0.1, 0.2, -0.3, 0.4], vec![-0.5, 0.1, 0.0, 0.3], vec![0.7, -0.2, 0.2, 0.1]]);
    let e = grad_check(
        |tape, bind| {
            let x = tape.constant(x.clone());
            clf.loss(tape, bind, x, &[1, 2, 0])
        },
        &store,
        1e-5,
    )
    .unwrap();
    worst.push(("classifier", e));

    // one encoder + decoder block of the flow model, and its prompts
    let kg = small_kg();
    let mut store = ParamStore::new();
    let mut fr = rng(11);
    let flm = FlowLm::init("flm", flm_config(), &kg, 3, &mut store, &mut fr);
    // the head starts at zero, which would leave everything below it without gradient
    randomize(&mut store, "flm.head.w", 1.0, &mut fr);
    let schema = FlowSchema::new(vec![ty(&kg, "genre"), ty(&kg, "item"), ty(&kg, "genre")]);
    let flow = [ent(&kg, "g1"), ent(&kg, "m2"), ent(&kg, "g0")];
    let (pu, pv) = (Tensor::row(&[0.3, -0.2, 0.5]), Tensor::row(&[-0.1, 0.4, 0.2]));
    let e = grad_check(
        |tape, bind| {
            let u = tape.constant(pu.clone());
            let v = tape.constant(pv.clone());
            flm.flow_log_prob_var(tape, bind, u, v, &schema, &flow).unwrap()
        },
        &store,
        1e-5,
    )
    .unwrap();
    worst.push(("flow model block", e));
    let mut prompts = ParamStore::new();
    prompts.insert("eu", pu.clone());
    prompts.insert("ev", pv.clone());
    let e = grad_check(
        |tape, bind| {
            let u = bind.get(tape, "eu");
            let v = bind.get(tape, "ev");
            flm.flow_log_prob_var(tape, Binding::frozen(&store), u, v, &schema, &flow).unwrap()
        },
        &prompts,
        1e-5,
    )
    .unwrap();
    worst.push(("flow log-prob wrt prompts", e));

    // recommender loss
    let mut inter = BTreeMap::new();
    inter.insert(UserId("a".into()), vec![ent(&kg, "m0"), ent(&kg, "g1")]);
    inter.insert(UserId("b".into()), vec![ent(&kg, "m3")]);
    let graph = RelationalGraph::from_hkg(&attach_users(kg.clone(), &inter).unwrap());
    let mut store = ParamStore::new();
    let rc = RecConfig {
        rgcn: RgcnConfig { dim: 3, num_layers: 1, num_bases: 2, ..RgcnConfig::default() },
        attention_hidden: 4,
    };
    let rec = Recommender::init("rec", rc, &kg, graph, &mut store, &mut r).unwrap();
    randomize(&mut store, "rec.item_bias", 0.3, &mut r);
    let sample = |ctx: &[&str], label: &str| RecSample {
        context: ctx.iter().map(|n| ent(&kg, n)).collect(),
        label: ent(&kg, label),
        source: SampleSource::Real,
    };
    let samples = [sample(&["g0"], "m1"), sample(&["m0", "g1"], "m2"), sample(&[], "m3")];
    let refs: Vec<&RecSample> = samples.iter().collect();
    let e = grad_check(|tape, bind| rec.loss_var(tape, bind, &refs), &store, 1e-5).unwrap();
    worst.push(("recommender loss", e));

    let elapsed = t0.elapsed();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(max < 1e-4 && elapsed < Duration::from_secs(120), format!("max rel err {max:.2e} in {elapsed:.1?}; {detail}"))
}

// ---------------------------------------------------------------- 2

fn mining_oracle(_: &mut Shared) -> Verdict {
    let mut r = rng(2);
    for case in 0..50 {
        let n_types = r.gen_range(1..=4u32);
        let n = r.gen_range(0..=100);
        let flows: Vec<FlowSchema> = (0..n)
            .map(|_| {
                let len = r.gen_range(0..=5);
                FlowSchema::new((0..len).map(|_| TypeId(r.gen_range(0..n_types))).collect())
            })
            .collect();
        let min_support = r.gen_range(1..=6);
        let max_len = r.gen_range(1..=6);
        // brute force: count each truncated, non-empty sequence, then filter
        let mut counts: HashMap<Vec<TypeId>, usize> = HashMap::new();
        for f in &flows {
            let t: Vec<TypeId> = f.types.iter().take(max_len).copied().collect();
            if !t.is_empty() {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let want: BTreeMap<Vec<TypeId>, usize> = counts.into_iter().filter(|(_, c)| *c >= min_support).collect();
        let cat = mine_schemas(&flows, min_support, max_len).unwrap();
        let got: BTreeMap<Vec<TypeId>, usize> =
            cat.schemas.iter().map(|s| s.types.clone()).zip(cat.support.iter().copied()).collect();
        if got != want || got.len() != cat.len() {
            return verdict(false, format!("corpus {case}: {} mined vs {} expected", got.len(), want.len()));
        }
        if cat.support.windows(2).any(|w| w[0] < w[1]) {
            return verdict(false, format!("corpus {case}: catalog not sorted by support"));
        }
    }
    verdict(true, "50 corpora identical to the count-filter oracle")
}

// ---------------------------------------------------------------- 3

fn metric_oracle(_: &mut Shared) -> Verdict {
    // (recall, mrr, ndcg) of single ranks, values derived by hand
    let single: [(usize, usize, [f64; 3]); 12] = [
        (3, 10, [1.0, 1.0 / 3.0, 0.5]),
        (1, 10, [1.0, 1.0, 1.0]),
        (7, 10, [1.0, 1.0 / 7.0, 1.0 / 3.0]),
        (10, 10, [1.0, 0.1, 1.0 / 11f64.log2()]),
        (11, 10, [0.0, 0.0, 0.0]),
        (15, 50, [1.0, 1.0 / 15.0, 0.25]),
        (31, 50, [1.0, 1.0 / 31.0, 0.2]),
        (50, 50, [1.0, 0.02, 1.0 / 51f64.log2()]),
        (51, 50, [0.0, 0.0, 0.0]),
        (2, 1, [0.0, 0.0, 0.0]),
        (1, 1, [1.0, 1.0, 1.0]),
        (3, 3, [1.0, 1.0 / 3.0, 0.5]),
    ];
    let mut cases = 0;
    let mut bad = Vec::new();
    for (rank, k, [rc, mr, nd]) in single {
        cases += 1;
        let got = [recall_at(rank, k), mrr_at(rank, k), ndcg_at(rank, k)];
        if got != [rc, mr, nd] {
            bad.push(format!("rank {rank}@{k}: {got:?}"));
        }
    }
    // aggregates over several samples
    let agg: [(&[usize], RankingMetrics); 4] = [
        (&[1, 3], RankingMetrics {
            recall_10: 1.0, recall_50: 1.0, mrr_10: 2.0 / 3.0, mrr_50: 2.0 / 3.0, ndcg_10: 0.75, ndcg_50: 0.75, samples: 2,
        }),
        (&[1, 60], RankingMetrics {
            recall_10: 0.5, recall_50: 0.5, mrr_10: 0.5, mrr_50: 0.5, ndcg_10: 0.5, ndcg_50: 0.5, samples: 2,
        }),
        (&[15, 7, 3, 1], RankingMetrics {
            recall_10: 0.75,
            recall_50: 1.0,
            mrr_10: (1.0 / 7.0 + 1.0 / 3.0 + 1.0) / 4.0,
            mrr_50: (1.0 / 15.0 + 1.0 / 7.0 + 1.0 / 3.0 + 1.0) / 4.0,
            ndcg_10: (1.0 / 3.0 + 0.5 + 1.0) / 4.0,
            ndcg_50: (0.25 + 1.0 / 3.0 + 0.5 + 1.0) / 4.0,
            samples: 4,
        }),
        (&[], RankingMetrics::default()),
    ];
    for (ranks, want) in agg {
        cases += 1;
        let got = RankingMetrics::from_ranks(ranks);
        if got != want {
            bad.push(format!("ranks {ranks:?}: {got:?}"));
        }
    }
    // distinct-n: unique n-grams over the corpus divided by response count
    let text: [(&[&str], usize, f64); 4] = [
        (&["a b c", "a b d"], 2, 1.5),
        (&["a b c", "a b d"], 3, 1.0),
        (&["a a a a"], 2, 1.0),
        (&["hi", "hi there"], 2, 0.5),
    ];
    for (resp, n, want) in text {
        cases += 1;
        let got = distinct_n(resp, n);
        if got != want {
            bad.push(format!("distinct-{n} {resp:?}: {got}"));
        }
    }
    verdict(bad.is_empty() && cases == 20, format!("{cases} cases, {} mismatches {}", bad.len(), bad.join("; ")))
}

// ---------------------------------------------------------------- 4

fn simulator_validity(_: &mut Shared) -> Verdict {
    let (kg, ds) = world();
    let mut cfg = PipelineConfig::desk_experiment(4);
    cfg.rec_pretrain.epochs = 5;
    cfg.flm_train.epochs = 2;
    cfg.pseudo_flows = 200;
    let p = prepare(kg, ds, &cfg).unwrap();
    let (rec, store, _) = pretrain_recommender(&p, &cfg).unwrap();
    let (sim, _) = build_simulator(&p, &rec, &store, &cfg).unwrap();
    let pairs: Vec<(UserId, UserId)> =
        p.split(Split::Train).iter().map(|d| (d.seeker.clone(), d.recommender.clone())).collect();
    let mut r = rng(4);
    let (mut flows_ok, mut faithful) = (0, 0);
    let dim = sim.dim();
    for k in 0..1000 {
        let (u, v) = &pairs[r.gen_range(0..pairs.len())];
        // perturb the preferences so the schema choice and the flows vary
        let noise = |r: &mut ChaCha8Rng, e: Vec<f64>| -> Vec<f64> { e.iter().map(|x| x + r.gen_range(-0.5..0.5)).collect() };
        let e_u = noise(&mut r, sim.preference(u, None).unwrap());
        let e_v = noise(&mut r, sim.preference(v, None).unwrap());
        assert_eq!(e_u.len(), dim);
        let s = sim.choose_schema(&e_u, &e_v).unwrap();
        let schema = sim.catalog.schemas[s].clone();
        let flow = sim.sample_flow(&e_u, &e_v, &schema, 1.0, &mut r).unwrap();
        if FlowSchema::of_entities(&flow, &p.kg) == schema && validate_path(&p.kg, &flow, &schema, cfg.hop_limit) {
            flows_ok += 1;
        }
        let d = sim.realize_flow(&format!("v{k}"), (u, v), &flow, &schema, &mut r).unwrap();
        let (f, s2) = extract_flow(&d.dialogue, &p.kg);
        let back = Dialogue::from_record(&d.dialogue.to_record(&p.kg), &p.kg).unwrap();
        if f.entities == flow && s2 == schema && back == d.dialogue {
            faithful += 1;
        }
    }
    verdict(flows_ok == 1000 && faithful == 1000, format!("{flows_ok}/1000 valid flows, {faithful}/1000 faithful dialogues"))
}

// ---------------------------------------------------------------- 5

fn template_round_trip(_: &mut Shared) -> Verdict {
    let dir = fixture_dir();
    let kg = load_kg(&read_triples(&dir.join("kg.tsv")).unwrap(), &read_type_map(&dir.join("types.tsv")).unwrap()).unwrap();
    let ds = load_dialogues(&read_dialogues(&dir.join("dialogues.jsonl")).unwrap(), &kg).unwrap();
    let (mut total, mut same) = (0, 0);
    for d in &ds {
        for (t, turn) in extract_templates(d, &kg).iter().zip(&d.turns) {
            total += 1;
            let fill: Vec<&str> = (0..turn.mentions.len()).map(|k| turn.surface(k)).collect();
            if t.fill(&fill).map(|(s, _)| s.into_bytes() == turn.text.as_bytes()).unwrap_or(false) {
                same += 1;
            }
        }
    }
    verdict(ds.len() == 50 && same == total, format!("{} dialogues, {same}/{total} turns byte-identical", ds.len()))
}

// ---------------------------------------------------------------- 6

/// A simulator over the four-item world whose single schema has 36 flows.
fn enumerable_simulator(kg: &KnowledgeGraph) -> (Simulator<'_>, FlowSchema, EditTarget) {
    let mut r = rng(6);
    let d = 4;
    let mut store = ParamStore::new();
    let table = uniform(&mut r, kg.num_entities(), d, 1.0);
    let encoder = UserEncoder::init("sim.user", d, 5, &mut store, &mut r);
    randomize(&mut store, "sim.user.b", 0.5, &mut r);
    let schema = FlowSchema::new(vec![ty(kg, "genre"), ty(kg, "item"), ty(kg, "genre")]);
    let catalog = SchemaCatalog::from_entries(vec![(schema.clone(), 1)], 1, 4);
    let classifier = SchemaClassifier::init("sim.schema", d, 1, &mut store, &mut r);
    let flm = FlowLm::init("flm", flm_config(), kg, d, &mut store, &mut r);
    let names: Vec<String> = store.iter().filter(|(n, _)| n.starts_with("flm.")).map(|(n, _)| n.to_string()).collect();
    for n in &names {
        randomize(&mut store, n, 0.6, &mut r);
    }
    let (u, v) = (UserId("u".into()), UserId("v".into()));
    let mut users = BTreeMap::new();
    users.insert(u.clone(), vec![ent(kg, "m0"), ent(kg, "g1"), ent(kg, "m2")]);
    users.insert(v.clone(), vec![ent(kg, "g2"), ent(kg, "m3")]);
    let bank = TemplateBank::from_dialogues(&[], kg);
    let sim = Simulator::new(kg, store, EntityEmbeddings { table }, encoder, classifier, catalog, flm, bank, users, None);
    let target = EditTarget { seeker: u, seeker_pos: 1, recommender: v, recommender_pos: 0 };
    (sim, schema, target)
}

fn reward_of(kg: &KnowledgeGraph) -> impl Fn(&[EntityId]) -> f64 + '_ {
    move |f: &[EntityId]| {
        let item = if f[1] == ent(kg, "m1") || f[1] == ent(kg, "m3") { 1.0 } else { -1.0 };
        let genre = if f[0] == ent(kg, "g1") { 0.5 } else { -0.25 };
        item + genre
    }
}

fn reinforce_oracle(_: &mut Shared) -> Verdict {
    let kg = small_kg();
    let (sim, schema, target) = enumerable_simulator(&kg);
    let reward = reward_of(&kg);
    let d = sim.dim();
    let genres = kg.entities_of_type(ty(&kg, "genre")).to_vec();
    let items = kg.entities_of_type(ty(&kg, "item")).to_vec();
    let mut space: Vec<Vec<EntityId>> = Vec::new();
    for &a in &genres {
        for &b in &items {
            for &c in &genres {
                space.push(vec![a, b, c]);
            }
        }
    }
    let mut r = rng(60);
    let du0: Vec<f64> = (0..d).map(|_| r.gen_range(-0.3..0.3)).collect();
    let dv0: Vec<f64> = (0..d).map(|_| r.gen_range(-0.3..0.3)).collect();

    // exact: central differences of the enumerated expected reward
    let expected = |du: &[f64], dv: &[f64]| -> (f64, f64) {
        let eu = sim.preference(&target.seeker, Some((target.seeker_pos, du))).unwrap();
        let ev = sim.preference(&target.recommender, Some((target.recommender_pos, dv))).unwrap();
        let mut j = 0.0;
        let mut mass = 0.0;
        for f in &space {
            let p = sim.flm.flow_log_prob(&sim.store, &eu, &ev, &schema, f).unwrap().exp();
            mass += p;
            j += p * reward(f);
        }
        (j, mass)
    };
    let (_, mass) = expected(&du0, &dv0);
    let eps = 1e-5;
    let mut exact = Vec::with_capacity(2 * d);
    for side in 0..2 {
        for i in 0..d {
            let (mut up_u, mut up_v, mut dn_u, mut dn_v) = (du0.clone(), dv0.clone(), du0.clone(), dv0.clone());
            if side == 0 {
                up_u[i] += eps;
                dn_u[i] -= eps;
            } else {
                up_v[i] += eps;
                dn_v[i] -= eps;
            }
            exact.push((expected(&up_u, &up_v).0 - expected(&dn_u, &dn_v).0) / (2.0 * eps));
        }
    }

    // sampled: one update with α = 1, λ = 0 over T rollouts, divided by T
    let start = |edits: &mut EditState| {
        edits.set(&target.seeker, target.seeker_pos, du0.clone()).unwrap();
        edits.set(&target.recommender, target.recommender_pos, dv0.clone()).unwrap();
    };
    let t = 10_000;
    let cfg = ReinforceConfig { alpha: 1.0, rollouts: t, temperature: 1.0, reward_baseline: false, baseline_decay: 0.9 };
    let mut rf = |_: &FlowSchema, f: &[EntityId], _: &mut dyn RngCore| reward(f);
    let run = |rf: &mut dyn RewardFn, cfg: &ReinforceConfig, lambda: f64, seed: u64| {
        let mut edits = EditState::new(d);
        start(&mut edits);
        let batch = sim
            .reinforce_with_schema(&mut edits, &target, &schema, rf, lambda, cfg, &mut RewardBaseline::default(), &mut rng(seed))
            .unwrap();
        (edits, batch)
    };
    let (edits, batch) = run(&mut rf, &cfg, 0.0, 61);
    let sampled: Vec<f64> = edits
        .get(&target.seeker, target.seeker_pos)
        .iter()
        .zip(&du0)
        .chain(edits.get(&target.recommender, target.recommender_pos).iter().zip(&dv0))
        .map(|(new, old)| (new - old) / t as f64)
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = sampled.iter().zip(&exact).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&exact);

    // zero reward: pure (1 − 2αλ) decay, exactly
    let (alpha, lambda) = (0.1, 0.3);
    let zcfg = ReinforceConfig { alpha, rollouts: 16, ..cfg };
    let mut zero = |_: &FlowSchema, _: &[EntityId], _: &mut dyn RngCore| 0.0;
    let (zedits, _) = run(&mut zero, &zcfg, lambda, 62);
    let keep = 1.0 - 2.0 * alpha * lambda;
    let decay_exact = zedits.get(&target.seeker, target.seeker_pos) == du0.iter().map(|x| x * keep).collect::<Vec<_>>()
        && zedits.get(&target.recommender, target.recommender_pos) == dv0.iter().map(|x| x * keep).collect::<Vec<_>>();

    // same seed, same update; a heavy penalty shrinks the edits
    let (again, batch2) = run(&mut rf, &cfg, 0.0, 61);
    let reproducible = again.checksum() == edits.checksum() && batch2 == batch;
    let scfg = ReinforceConfig { alpha: 0.01, rollouts: 64, ..cfg };
    let mut start_state = EditState::new(d);
    start(&mut start_state);
    let (shrunk, _) = run(&mut rf, &scfg, 40.0, 63);
    let shrinks = shrunk.norm() < start_state.norm();

    let pass = rel < 0.05 && decay_exact && reproducible && shrinks && (mass - 1.0).abs() < 1e-9 && space.len() <= 50;
    verdict(
        pass,
        format!(
            "{} outcomes (mass {mass:.12}), rel err {:.2}% over {t} rollouts; zero-reward decay exact: {decay_exact}; \
             reproducible: {reproducible}; heavy penalty shrinks: {shrinks}",
            space.len(),
            100.0 * rel
        ),
    )
}

// ---------------------------------------------------------------- 7

/// `x * y` as an unevaluated sum `hi + lo`, exact.
fn two_prod(x: f64, y: f64) -> (f64, f64) {
    let hi = x * y;
    (hi, x.mul_add(y, -hi))
}

/// ρ·δ^k in double-double arithmetic, rounded once at the end.
fn reference_lambda(rho: f64, delta: f64, k: usize) -> f64 {
    let (mut hi, mut lo) = (rho, 0.0_f64);
    for _ in 0..k {
        let (p, e) = two_prod(hi, delta);
        let lo2 = lo.mul_add(delta, e);
        hi = p + lo2;
        lo = lo2 - (hi - p);
    }
    hi + lo
}

fn curriculum_exactness(_: &mut Shared) -> Verdict {
    let (rhos, deltas) = ([1e-1, 1e-2, 1e-3], [0.9, 0.8, 0.7]);
    let mut pairs = Vec::new();
    for rho in rhos {
        for delta in deltas {
            pairs.push((rho, delta));
        }
    }
    let mut r = rng(7);
    while pairs.len() < 20 {
        pairs.push((rhos[r.gen_range(0..3)], deltas[r.gen_range(0..3)]));
    }
    let courses = 30;
    let mut worst: f64 = 0.0;
    for &(rho, delta) in &pairs {
        let traj = Curriculum { rho, delta, courses }.trajectory();
        for (k, &l) in traj.iter().enumerate() {
            let want = reference_lambda(rho, delta, k + 1);
            let rel = (l - want).abs() / want;
            worst = worst.max(rel);
            if rel > 4.0 * f64::EPSILON {
                return verdict(false, format!("rho {rho} delta {delta} course {}: {l} vs {want}", k + 1));
            }
        }
        if traj.windows(2).any(|w| w[1] >= w[0]) || traj.len() != courses {
            return verdict(false, format!("rho {rho} delta {delta}: not strictly decreasing"));
        }
    }
    verdict(true, format!("20 grid pairs x {courses} courses, max rel deviation {:.2} eps", worst / f64::EPSILON))
}

// ---------------------------------------------------------------- 8

fn flm_memorization(_: &mut Shared) -> Verdict {
    let kg = small_kg();
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let flm = FlowLm::init("flm", flm_config(), &kg, 3, &mut store, &mut r);
    let (genre, item) = (ty(&kg, "genre"), ty(&kg, "item"));
    let schema = FlowSchema::new(vec![genre, item, genre, item]);

    // untrained: every step is uniform over its type class
    let mut ppl_ok = true;
    let mut seen = Vec::new();
    for _ in 0..20 {
        let eu: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ev: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let flow = sim_flow(&kg, &schema, &mut r);
        let steps = flm.step_values(&store, &eu, &ev, &schema, &flow).unwrap();
        for (s, t) in steps.iter().zip(&schema.types) {
            let ppl = (-s).exp();
            let size = flm.class_size(*t) as f64;
            seen.push((size, ppl));
            ppl_ok &= (ppl - size).abs() < 1e-9 * size;
        }
    }

    let ex = PromptedFlow {
        e_u: vec![0.1, 0.2, 0.3],
        e_v: vec![-0.3, 0.0, 0.2],
        schema: schema.clone(),
        flow: vec![ent(&kg, "g2"), ent(&kg, "m1"), ent(&kg, "g0"), ent(&kg, "m3")],
    };
    let cfg = FlmTrainConfig {
        epochs: 500,
        batch_size: 1,
        max_steps: Some(500),
        optimizer: AdamWConfig { lr: 1e-2, ..Default::default() },
        ..Default::default()
    };
    let rep = pretrain_flm(&flm, &mut store, &[ex.clone()], &[], &cfg, &mut r).unwrap();
    let nll = -flm.flow_log_prob(&store, &ex.e_u, &ex.e_v, &ex.schema, &ex.flow).unwrap();
    let sizes: Vec<f64> = {
        let mut s: Vec<f64> = seen.iter().map(|x| x.0).collect();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    };
    verdict(
        ppl_ok && nll < 0.01 && rep.steps <= 500,
        format!("untrained perplexity = class size ({sizes:?}): {ppl_ok}; NLL {nll:.2e} after {} steps", rep.steps),
    )
}

fn sim_flow(kg: &KnowledgeGraph, schema: &FlowSchema, r: &mut ChaCha8Rng) -> Vec<EntityId> {
    schema
        .types
        .iter()
        .map(|&t| {
            let c = kg.entities_of_type(t);
            c[r.gen_range(0..c.len())]
        })
        .collect()
}

// ---------------------------------------------------------------- 9, 10

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_baseline(shared: &mut Shared) -> f64 {
    if let Some(b) = shared.desk_baseline_mean {
        return b;
    }
    let (kg, ds) = world();
    let b: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let rep = run_experiment(kg.clone(), ds.clone(), &[Arm::Baseline], &PipelineConfig::desk_experiment(s)).unwrap();
            rep.arm(Arm::Baseline).unwrap().recall_10
        })
        .collect();
    shared.desk_baseline_mean = Some(mean(&b));
    mean(&b)
}

fn directional(shared: &mut Shared) -> Verdict {
    let (kg, ds) = world();
    let t0 = Instant::now();
    let (mut base, mut eda, mut cf) = (Vec::new(), Vec::new(), Vec::new());
    for &s in &SEEDS {
        let rep =
            run_experiment(kg.clone(), ds.clone(), &[Arm::Baseline, Arm::Eda, Arm::Cfcrs], &PipelineConfig::desk_experiment(s))
                .unwrap();
        base.push(rep.arm(Arm::Baseline).unwrap().recall_10);
        eda.push(rep.arm(Arm::Eda).unwrap().recall_10);
        cf.push(rep.arm(Arm::Cfcrs).unwrap().recall_10);
        println!(
            "    seed {s}: pretrained {:.4} baseline {:.4} eda {:.4} cfcrs {:.4}",
            rep.pretrained.recall_10,
            base.last().unwrap(),
            eda.last().unwrap(),
            cf.last().unwrap()
        );
    }
    let elapsed = t0.elapsed();
    shared.desk_baseline_mean = Some(mean(&base));
    let wins = cf.iter().zip(&eda).filter(|(c, e)| c > e).count();
    verdict(
        mean(&cf) > mean(&base) && wins >= 3 && elapsed < Duration::from_secs(600),
        format!(
            "R@10 mean cfcrs {:.4} vs baseline {:.4}; beats eda in {wins}/5 seeds; {elapsed:.1?}",
            mean(&cf),
            mean(&base)
        ),
    )
}

fn scarcity(shared: &mut Shared) -> Verdict {
    let full = desk_baseline(shared);
    let (kg, ds) = world();
    let (mut base, mut cf) = (Vec::new(), Vec::new());
    for &s in &SEEDS {
        let rep =
            run_experiment(kg.clone(), ds.clone(), &[Arm::Baseline, Arm::Cfcrs], &PipelineConfig::scarce_experiment(s)).unwrap();
        base.push(rep.arm(Arm::Baseline).unwrap().recall_10);
        cf.push(rep.arm(Arm::Cfcrs).unwrap().recall_10);
        println!("    seed {s}: 20% baseline {:.4} 20% cfcrs {:.4}", base.last().unwrap(), cf.last().unwrap());
    }
    let ratio = mean(&cf) / full;
    verdict(
        ratio >= 0.8,
        format!(
            "20% data: cfcrs {:.4}, baseline {:.4}; full-data baseline {full:.4}; ratio {ratio:.3} (need 0.8)",
            mean(&cf),
            mean(&base)
        ),
    )
}

// ---------------------------------------------------------------- 11

fn determinism(_: &mut Shared) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let world_dir = tmp.path().join("world");
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.paths.output = world_dir.clone();
    commands::run(Command::SynthWorld, &cfg).unwrap();
    cfg.paths.kg = Some(world_dir.join("kg.tsv"));
    cfg.paths.types = Some(world_dir.join("types.tsv"));
    cfg.paths.dialogues = Some(world_dir.join("dialogues.jsonl"));
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let mut c = cfg.clone();
        c.paths.output = tmp.path().join(run);
        commands::run(Command::Train, &c).unwrap();
        dirs.push(c.paths.output);
    }
    let manifest = Manifest::read(&dirs[0]).unwrap();
    let mut compared = Vec::new();
    for f in &manifest.files {
        if f.path == "config.resolved.json" || f.path == "manifest.json" {
            continue; // these name their own output directory
        }
        let a = std::fs::read(dirs[0].join(&f.path)).unwrap();
        let b = std::fs::read(dirs[1].join(&f.path)).unwrap();
        if a != b {
            return verdict(false, format!("{} differs between runs", f.path));
        }
        compared.push(f.path.as_str());
    }
    let has = |n: &str| compared.contains(&n);
    verdict(
        has("metrics.json") && has("rec.cfcrs.ckpt") && has("rec.baseline.ckpt") && has("sim.ckpt"),
        format!("identical across two runs: {}", compared.join(", ")),
    )
}

// ---------------------------------------------------------------- driver

type Criterion = (usize, &'static str, fn(&mut Shared) -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "gradient suite", gradient_suite),
        (2, "schema mining oracle", mining_oracle),
        (3, "metric oracle", metric_oracle),
        (4, "simulator validity", simulator_validity),
        (5, "template round trip", template_round_trip),
        (6, "policy-gradient estimator", reinforce_oracle),
        (7, "curriculum exactness", curriculum_exactness),
        (8, "flow model memorization", flm_memorization),
        (9, "directional end to end", directional),
        (10, "data scarcity", scarcity),
        (11, "determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| f(&mut shared)))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        let known = KNOWN_UNATTAINED.contains(&id);
        let tag = match (v.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        if !v.pass && !known {
            unexpected += 1;
        }
        println!("criterion {id:>2} {tag:<12} {name}: {} [{:.1?}]", v.detail, t.elapsed());
    }
    if unexpected > 0 {
        println!("{unexpected} criterion(s) failed");
        std::process::exit(1);
    }
}
