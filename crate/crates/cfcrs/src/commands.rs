//! The subcommands. Each reads what it needs from the config, writes its
//! artifacts through [`Outputs`] and returns the manifest plus any text meant
//! for the terminal.

use std::collections::BTreeMap;
use std::time::Instant;

use cfcrs_core::corpus::{derive_interactions, extract_flow, extract_templates, load_dialogues, Dialogue};
use cfcrs_core::kg::{load_kg, KnowledgeGraph};
use cfcrs_core::metrics::{MetricReport, RankingMetrics};
use cfcrs_core::nn::ParamStore;
use cfcrs_core::pipeline::{
    build_simulator, init_recommender, prepare, pretrain_recommender, run_arm, stage_rng, Arm, PipelineConfig,
    Prepared, SimulatorReport,
};
use cfcrs_core::realization::simulated_id;
use cfcrs_core::recommender::{RecTrainReport, Recommender};
use cfcrs_core::schema::mine_schemas;
use cfcrs_core::synth::{generate_world, split_of, Split};
use log::info;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{read_dialogues, read_triples, read_type_map, to_jsonl, triples_tsv, type_map_tsv};
use crate::outputs::{Manifest, Outputs};
use crate::reports::{catalog_entries, mean_metrics, metric_report, metric_table};

/// Random stream used by `simulate`, apart from the pipeline's stages.
const SIMULATE_STREAM: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Load and validate the graph and corpus; export flows and templates.
    Ingest,
    /// Mine frequent flow schemas from every dialogue of the corpus.
    MineSchemas,
    /// Pre-train the schema classifier and the flow language model.
    PretrainFlm,
    /// Pre-train the recommender.
    PretrainRec,
    /// Counterfactual training of the recommender over the curriculum.
    Train,
    /// Generate dialogues from the pre-trained simulator.
    Simulate,
    /// Compare the pre-trained, baseline, EDA and counterfactual recommenders.
    Evaluate,
    /// Course loop with EDA-style augmentation.
    EdaBaseline,
    /// Counterfactual training over the ρ × δ × mix-ratio grid.
    Sweep,
    /// Write the synthetic graph and corpus.
    SynthWorld,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::MineSchemas => "mine-schemas",
            Command::PretrainFlm => "pretrain-flm",
            Command::PretrainRec => "pretrain-rec",
            Command::Train => "train",
            Command::Simulate => "simulate",
            Command::Evaluate => "evaluate",
            Command::EdaBaseline => "eda-baseline",
            Command::Sweep => "sweep",
            Command::SynthWorld => "synth-world",
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub manifest: Manifest,
    pub text: String,
}

pub fn run(command: Command, config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    info!("{} (workers: {})", command.name(), config.workers);
    let mut out = Outputs::create(&config.paths.output)?;
    let text = match command {
        Command::Ingest => ingest(config, &mut out)?,
        Command::MineSchemas => mine(config, &mut out)?,
        Command::PretrainFlm => pretrain_flm(config, &mut out)?,
        Command::PretrainRec => pretrain_rec(config, &mut out)?,
        Command::Train => train(config, &mut out)?,
        Command::Simulate => simulate(config, &mut out)?,
        Command::Evaluate => evaluate(config, &mut out)?,
        Command::EdaBaseline => eda_baseline(config, &mut out)?,
        Command::Sweep => sweep(config, &mut out)?,
        Command::SynthWorld => synth_world(config, &mut out)?,
    };
    let manifest = out.finish(command.name(), config)?;
    Ok(RunOutput { manifest, text })
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, field: &str) -> Result<&'a std::path::Path> {
    p.as_deref().ok_or_else(|| Error::config(field, "required by this command"))
}

/// Graph and validated dialogues named in `paths`.
pub fn load_inputs(config: &RunConfig) -> Result<(KnowledgeGraph, Vec<Dialogue>)> {
    let triples = read_triples(required(&config.paths.kg, "paths.kg")?)?;
    let types = read_type_map(required(&config.paths.types, "paths.types")?)?;
    let records = read_dialogues(required(&config.paths.dialogues, "paths.dialogues")?)?;
    let kg = load_kg(&triples, &types).map_err(|e| Error::Pipeline(e.into()))?;
    let dialogues = load_dialogues(&records, &kg).map_err(|e| Error::Pipeline(e.into()))?;
    info!("{} entities, {} triples, {} dialogues", kg.num_entities(), kg.triples().len(), dialogues.len());
    Ok((kg, dialogues))
}

fn prepared(config: &RunConfig) -> Result<Prepared> {
    let (kg, ds) = load_inputs(config)?;
    Ok(prepare(kg, ds, &config.pipeline)?)
}

fn rec_report_json(r: &RecTrainReport) -> Value {
    json!({ "train_loss": r.train_loss, "val": r.val, "best_epoch": r.best_epoch, "steps": r.steps })
}

/// The pre-trained recommender: loaded from `paths.rec_checkpoint`, or
/// trained now (its checkpoint and report then go to `sink`, if given).
fn pretrained(p: &Prepared, config: &RunConfig, sink: Option<(&mut Outputs, &str)>) -> Result<(Recommender, ParamStore)> {
    if let Some(path) = &config.paths.rec_checkpoint {
        let mut store = ParamStore::new();
        let rec = init_recommender(p, &config.pipeline, &mut store)?;
        checkpoint::restore_into(&mut store, &checkpoint::load(path)?)?;
        info!("recommender loaded from {}", path.display());
        return Ok((rec, store));
    }
    let t = Instant::now();
    let (rec, store, report) = pretrain_recommender(p, &config.pipeline)?;
    info!("recommender pre-trained in {:.1?} (best epoch {:?})", t.elapsed(), report.best_epoch);
    if let Some((out, name)) = sink {
        out.write_checkpoint(name, &store)?;
        out.write_json("rec_train.json", "report", &rec_report_json(&report))?;
    }
    Ok((rec, store))
}

fn simulator_report_json(r: &SimulatorReport) -> Value {
    json!({
        "classifier": {
            "train_loss": r.classifier.train_loss,
            "val_loss": r.classifier.val_loss,
            "best_epoch": r.classifier.best_epoch,
        },
        "flm": { "epoch_nll": r.flm.epoch_nll, "steps": r.flm.steps },
        "real_flows": r.real_flows,
        "pseudo_flows": r.pseudo_flows,
    })
}

fn ingest(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let (kg, ds) = load_inputs(config)?;
    let mut flows = Vec::with_capacity(ds.len());
    let mut templates = Vec::new();
    for d in &ds {
        let (f, s) = extract_flow(d, &kg);
        flows.push(json!({
            "dialogue_id": d.id,
            "entities": f.entities.iter().map(|&e| kg.entity(e).name.as_str()).collect::<Vec<_>>(),
            "types": s.types.iter().map(|&t| kg.type_name(t)).collect::<Vec<_>>(),
        }));
        for t in extract_templates(d, &kg) {
            templates.push(json!({
                "dialogue_id": t.source,
                "speaker": t.speaker,
                "text": t.text_with_placeholders(&kg),
                "slots": t.slot_signature.iter().map(|&ty| kg.type_name(ty)).collect::<Vec<_>>(),
            }));
        }
    }
    let mut splits = BTreeMap::new();
    for d in &ds {
        let s = match split_of(&d.id, config.pipeline.val_pct, config.pipeline.test_pct) {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        *splits.entry(s).or_insert(0usize) += 1;
    }
    let summary = json!({
        "entities": kg.num_entities(),
        "types": kg.num_types(),
        "relations": kg.num_relations(),
        "triples": kg.triples().len(),
        "items": kg.items().len(),
        "dialogues": ds.len(),
        "turns": ds.iter().map(|d| d.turns.len()).sum::<usize>(),
        "mentions": ds.iter().map(Dialogue::mention_count).sum::<usize>(),
        "users": derive_interactions(&ds).len(),
        "templates": templates.len(),
        "splits": splits,
    });
    out.write_json("ingest.json", "report", &summary)?;
    out.write("flows.jsonl", "corpus", to_jsonl(&flows).as_bytes())?;
    out.write("templates.jsonl", "corpus", to_jsonl(&templates).as_bytes())?;
    Ok(format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))
}

fn mine(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let (kg, ds) = load_inputs(config)?;
    let schemas: Vec<_> = ds.iter().map(|d| extract_flow(d, &kg).1).collect();
    let cat = mine_schemas(&schemas, config.pipeline.min_support, config.pipeline.max_len)
        .map_err(|e| Error::Pipeline(e.into()))?;
    let entries = catalog_entries(&cat, &kg);
    out.write_json("catalog.json", "catalog", &entries)?;
    Ok(format!("{} schemas from {} flows\n", entries.len(), schemas.len()))
}

fn pretrain_rec(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let p = prepared(config)?;
    let (rec, store) = pretrained(&p, config, Some((out, "rec.ckpt")))?;
    let test = rec.snapshot(&store).evaluate(&p.test_samples)?;
    out.write_json("metrics.json", "metrics", &json!({ "seed": config.pipeline.seed, "pretrained": test }))?;
    Ok(metric_table(&[("Pretrained", test)]))
}

fn pretrain_flm(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let p = prepared(config)?;
    let (rec, store) = pretrained(&p, config, Some((out, "rec.ckpt")))?;
    let t = Instant::now();
    let (sim, report) = build_simulator(&p, &rec, &store, &config.pipeline)?;
    info!("simulator pre-trained in {:.1?}", t.elapsed());
    out.write_checkpoint("sim.ckpt", &sim.store)?;
    out.write_json("catalog.json", "catalog", &catalog_entries(&sim.catalog, &p.kg))?;
    out.write_json("flm_train.json", "report", &simulator_report_json(&report))?;
    let last = report.flm.epoch_nll.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "{} schemas, {} real + {} pseudo flows, final flow NLL {last:.4}\n",
        sim.catalog.len(),
        report.real_flows,
        report.pseudo_flows
    ))
}

fn course_log(outcome: &cfcrs_core::counterfactual::TrainOutcome) -> String {
    to_jsonl(&outcome.log)
}

fn train(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let p = prepared(config)?;
    let (rec, store) = pretrained(&p, config, Some((out, "rec.baseline.ckpt")))?;
    if config.paths.rec_checkpoint.is_some() {
        out.write_checkpoint("rec.baseline.ckpt", &store)?;
    }
    let pre = rec.snapshot(&store).evaluate(&p.test_samples)?;
    if config.pipeline.courses.curriculum.courses == 0 {
        out.write_json("metrics.json", "metrics", &json!({ "seed": config.pipeline.seed, "pretrained": pre }))?;
        return Ok(metric_table(&[("Pretrained", pre)]));
    }
    let t = Instant::now();
    let (sim, report) = build_simulator(&p, &rec, &store, &config.pipeline)?;
    out.write_checkpoint("sim.ckpt", &sim.store)?;
    out.write_json("flm_train.json", "report", &simulator_report_json(&report))?;
    info!("simulator ready in {:.1?}", t.elapsed());
    let t = Instant::now();
    let r = run_arm(Arm::Cfcrs, &p, &rec, &store, Some(&sim), &config.pipeline)?;
    info!("{} courses in {:.1?}", r.outcome.log.len(), t.elapsed());
    out.write_checkpoint("rec.cfcrs.ckpt", &r.store)?;
    out.write("train_log.jsonl", "log", course_log(&r.outcome).as_bytes())?;
    let records: Vec<_> = r.outcome.simulated.iter().map(|d| d.dialogue.to_record(&p.kg)).collect();
    out.write("simulated.jsonl", "corpus", to_jsonl(&records).as_bytes())?;
    let sim_ds: Vec<&Dialogue> = r.outcome.simulated.iter().map(|d| &d.dialogue).collect();
    let metrics = json!({
        "seed": config.pipeline.seed,
        "pretrained": MetricReport { ranking: pre, ..Default::default() },
        "cfcrs": metric_report(r.test, &sim_ds),
        "best_course": r.outcome.best_course,
    });
    out.write_json("metrics.json", "metrics", &metrics)?;
    Ok(metric_table(&[("Pretrained", pre), ("CFCRS", r.test)]))
}

fn simulate(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let p = prepared(config)?;
    let (rec, store) = pretrained(&p, config, Some((out, "rec.ckpt")))?;
    let (sim, report) = build_simulator(&p, &rec, &store, &config.pipeline)?;
    out.write_checkpoint("sim.ckpt", &sim.store)?;
    out.write_json("flm_train.json", "report", &simulator_report_json(&report))?;
    let pairs: Vec<_> = p.split(Split::Train).iter().map(|d| (d.seeker.clone(), d.recommender.clone())).collect();
    let mut rng = stage_rng(config.pipeline.seed, SIMULATE_STREAM);
    let (mut dialogues, mut requests, mut fallbacks) = (Vec::new(), Vec::new(), 0);
    for k in 0..config.simulate.count {
        let (u, v) = &pairs[k % pairs.len()];
        let e_u = sim.preference(u, None).map_err(|e| Error::Pipeline(e.into()))?;
        let e_v = sim.preference(v, None).map_err(|e| Error::Pipeline(e.into()))?;
        let d = sim
            .simulate(&simulated_id(0, k), (u, v), &e_u, &e_v, config.simulate.temperature, &mut rng)
            .map_err(|e| Error::Pipeline(e.into()))?;
        fallbacks += d.fallbacks;
        requests.push(json!({
            "id": d.dialogue.id,
            "seeker": u.0,
            "recommender": v.0,
            "temperature": config.simulate.temperature,
            "schema": d.schema.types.iter().map(|&t| p.kg.type_name(t)).collect::<Vec<_>>(),
            "flow": d.flow.entities.iter().map(|&e| p.kg.entity(e).name.as_str()).collect::<Vec<_>>(),
        }));
        dialogues.push(d.dialogue);
    }
    let records: Vec<_> = dialogues.iter().map(|d| d.to_record(&p.kg)).collect();
    out.write("simulated.jsonl", "corpus", to_jsonl(&records).as_bytes())?;
    out.write("generations.jsonl", "corpus", to_jsonl(&requests).as_bytes())?;
    let refs: Vec<&Dialogue> = dialogues.iter().collect();
    let diversity = metric_report(RankingMetrics::default(), &refs);
    let summary = json!({
        "dialogues": dialogues.len(),
        "template_fallbacks": fallbacks,
        "distinct-2": diversity.distinct_2,
        "distinct-3": diversity.distinct_3,
        "distinct-4": diversity.distinct_4,
    });
    out.write_json("simulate.json", "report", &summary)?;
    Ok(format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()))
}

fn seeded(config: &RunConfig, seed: u64) -> PipelineConfig {
    PipelineConfig { seed, ..config.pipeline }
}

fn evaluate(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let (kg, ds) = load_inputs(config)?;
    let arms = [Arm::Baseline, Arm::Eda, Arm::Cfcrs];
    let mut runs = Vec::new();
    let mut per_model: BTreeMap<&str, Vec<RankingMetrics>> = BTreeMap::new();
    for seed in config.seeds() {
        let t = Instant::now();
        let pc = seeded(config, seed);
        let p = prepare(kg.clone(), ds.clone(), &pc)?;
        let seed_cfg = RunConfig { pipeline: pc, ..config.clone() };
        let (rec, store) = pretrained(&p, &seed_cfg, None)?;
        let pre = rec.snapshot(&store).evaluate(&p.test_samples)?;
        let (sim, _) = build_simulator(&p, &rec, &store, &pc)?;
        let mut run = serde_json::Map::new();
        run.insert("seed".into(), json!(seed));
        run.insert("pretrained".into(), json!(MetricReport { ranking: pre, ..Default::default() }));
        per_model.entry("pretrained").or_default().push(pre);
        for arm in arms {
            let r = run_arm(arm, &p, &rec, &store, Some(&sim), &pc)?;
            let sim_ds: Vec<&Dialogue> = r.outcome.simulated.iter().map(|d| &d.dialogue).collect();
            run.insert(arm.name().into(), json!(metric_report(r.test, &sim_ds)));
            per_model.entry(arm.name()).or_default().push(r.test);
        }
        info!("seed {seed} evaluated in {:.1?}", t.elapsed());
        runs.push(Value::Object(run));
    }
    let mean: BTreeMap<&str, RankingMetrics> = per_model.iter().map(|(k, v)| (*k, mean_metrics(v))).collect();
    out.write_json("metrics.json", "metrics", &json!({ "runs": runs, "mean": mean }))?;
    let rows = [("Pretrained", "pretrained"), ("Baseline", "baseline"), ("EDA", "eda"), ("CFCRS", "cfcrs")]
        .map(|(label, key)| (label, mean[key]));
    let table = format!("mean over {} seed(s)\n{}", runs.len(), metric_table(&rows));
    out.write("table.txt", "report", table.as_bytes())?;
    Ok(table)
}

fn eda_baseline(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let p = prepared(config)?;
    let (rec, store) = pretrained(&p, config, Some((out, "rec.baseline.ckpt")))?;
    let pre = rec.snapshot(&store).evaluate(&p.test_samples)?;
    let r = run_arm(Arm::Eda, &p, &rec, &store, None, &config.pipeline)?;
    out.write_checkpoint("rec.eda.ckpt", &r.store)?;
    out.write("train_log.jsonl", "log", course_log(&r.outcome).as_bytes())?;
    let records: Vec<_> = r.outcome.simulated.iter().map(|d| d.dialogue.to_record(&p.kg)).collect();
    out.write("augmented.jsonl", "corpus", to_jsonl(&records).as_bytes())?;
    let aug: Vec<&Dialogue> = r.outcome.simulated.iter().map(|d| &d.dialogue).collect();
    let metrics = json!({
        "seed": config.pipeline.seed,
        "pretrained": MetricReport { ranking: pre, ..Default::default() },
        "eda": metric_report(r.test, &aug),
    });
    out.write_json("metrics.json", "metrics", &metrics)?;
    Ok(metric_table(&[("Pretrained", pre), ("EDA", r.test)]))
}

fn sweep(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let (kg, ds) = load_inputs(config)?;
    let g = &config.sweep;
    let mut rows = Vec::new();
    let mut text = format!("{:>8} {:>6} {:>6} {:>8} {:>8}\n", "rho", "delta", "mix", "R@10", "R@50");
    for seed in config.seeds() {
        let pc = seeded(config, seed);
        let p = prepare(kg.clone(), ds.clone(), &pc)?;
        let seed_cfg = RunConfig { pipeline: pc, ..config.clone() };
        let (rec, store) = pretrained(&p, &seed_cfg, None)?;
        let (sim, _) = build_simulator(&p, &rec, &store, &pc)?;
        for &rho in &g.rho {
            for &delta in &g.delta {
                for &mix in &g.mix_ratio {
                    let mut c = pc;
                    c.courses.curriculum.rho = rho;
                    c.courses.curriculum.delta = delta;
                    c.courses.mix_ratio = mix;
                    let r = run_arm(Arm::Cfcrs, &p, &rec, &store, Some(&sim), &c)?;
                    info!("seed {seed} rho {rho} delta {delta} mix {mix}: R@10 {:.4}", r.test.recall_10);
                    text.push_str(&format!(
                        "{rho:>8} {delta:>6} {mix:>6} {:>8.4} {:>8.4}\n",
                        r.test.recall_10, r.test.recall_50
                    ));
                    rows.push(json!({ "seed": seed, "rho": rho, "delta": delta, "mix_ratio": mix, "test": r.test }));
                }
            }
        }
    }
    out.write("sweep.jsonl", "metrics", to_jsonl(&rows).as_bytes())?;
    Ok(text)
}

fn synth_world(config: &RunConfig, out: &mut Outputs) -> Result<String> {
    let w = generate_world(&config.world);
    out.write("kg.tsv", "graph", triples_tsv(&w.triples).as_bytes())?;
    out.write("types.tsv", "graph", type_map_tsv(&w.types).as_bytes())?;
    out.write("dialogues.jsonl", "corpus", to_jsonl(&w.dialogues).as_bytes())?;
    Ok(format!("{} triples, {} typed entities, {} dialogues\n", w.triples.len(), w.types.len(), w.dialogues.len()))
}
