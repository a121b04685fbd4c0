//! End-to-end orchestration: splits, recommender pre-training, simulator
//! assembly and the augmentation arms.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_interactions, extract_flow, role_entities, CorpusError, Dialogue, Speaker};
use crate::counterfactual::{
    run_courses, Augmenter, CfError, CfcrsAugmenter, CfcrsConfig, CourseConfig, EdaAugmenter, EdaMix, NoAugmenter,
    Simulator, TrainOutcome,
};
use crate::embeddings::{EntityEmbeddings, RelationalGraph, UserEncoder};
use crate::flm::{pretrain_flm, sample_pseudo_flow, FlmConfig, FlmError, FlmTrainConfig, FlmTrainReport, FlowLm,
    PathConstraint, PromptedFlow};
use crate::kg::{attach_users, KgError, KnowledgeGraph, PathSampler, SamplingStrategy};
use crate::metrics::RankingMetrics;
use crate::nn::{ParamStore, Tensor};
use crate::realization::{to_rec_samples, RealizeConfig, RecSample, SampleSource, TemplateBank};
use crate::recommender::{train_recommender, RecConfig, RecError, RecTrainConfig, RecTrainReport, Recommender};
use crate::schema::{
    mine_schemas, train_schema_classifier, truncate_schema, ClassifierReport, ClassifierTrainConfig, SchemaCatalog,
    SchemaClassifier, SchemaError, SchemaExample, DEFAULT_MAX_LEN, DEFAULT_MIN_SUPPORT,
};
use crate::synth::{split_of, Split};
use crate::{EntityId, UserId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid setting {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Rec(#[from] RecError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Flm(#[from] FlmError),
    #[error(transparent)]
    Cf(#[from] CfError),
}

/// Every knob of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub hop_limit: usize,
    pub val_pct: u64,
    pub test_pct: u64,
    /// Share of the training dialogues kept (the rest are dropped).
    pub train_fraction: f64,
    pub min_support: usize,
    pub max_len: usize,
    pub rec: RecConfig,
    pub rec_pretrain: RecTrainConfig,
    pub flm: FlmConfig,
    pub flm_train: FlmTrainConfig,
    /// Size of the pseudo-flow pool sampled from the graph.
    pub pseudo_flows: usize,
    /// Restrict simulated flows to hop-connected paths.
    pub path_constraint: bool,
    pub classifier: ClassifierTrainConfig,
    pub realize: RealizeConfig,
    pub cfcrs: CfcrsConfig,
    pub eda: EdaMix,
    pub courses: CourseConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hop_limit: 2,
            val_pct: 10,
            test_pct: 20,
            train_fraction: 1.0,
            min_support: DEFAULT_MIN_SUPPORT,
            max_len: DEFAULT_MAX_LEN,
            rec: RecConfig::default(),
            rec_pretrain: RecTrainConfig::default(),
            flm: FlmConfig::desk(),
            flm_train: FlmTrainConfig::default(),
            pseudo_flows: 2000,
            path_constraint: true,
            classifier: ClassifierTrainConfig::default(),
            realize: RealizeConfig::default(),
            cfcrs: CfcrsConfig::default(),
            eda: EdaMix::default(),
            courses: CourseConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small, fast settings for the synthetic world: narrow embeddings and
    /// flow model, a recommender pre-trained to convergence, full curriculum.
    pub fn desk_experiment(seed: u64) -> Self {
        let mut c = Self { seed, pseudo_flows: 500, ..Self::default() };
        c.rec.rgcn.dim = 32;
        c.rec.attention_hidden = 32;
        c.rec_pretrain.epochs = 100;
        c.rec_pretrain.patience = 10;
        c.rec_pretrain.optimizer.lr = 5e-3;
        c.flm.width = 32;
        c.flm.ffn_width = 128;
        c.flm_train.epochs = 8;
        c.cfcrs.pairs_per_course = 96;
        c
    }

    /// Desk settings on a fifth of the training dialogues, with more
    /// simulated data admitted per course.
    pub fn scarce_experiment(seed: u64) -> Self {
        let mut c = Self::desk_experiment(seed);
        c.train_fraction = 0.2;
        c.courses.mix_ratio = 4.0;
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field, reason: &str| Err(PipelineError::Config { field, reason: reason.into() });
        if self.hop_limit == 0 {
            return bad("hop_limit", "must be at least 1");
        }
        if self.val_pct + self.test_pct >= 100 {
            return bad("test_pct", "validation plus test must leave training data");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction", "must lie in (0, 1]");
        }
        if self.min_support == 0 {
            return bad("min_support", "must be at least 1");
        }
        if self.max_len == 0 || self.max_len > self.flm.max_len {
            return bad("max_len", "must be in 1..=flm.max_len");
        }
        if self.rec.rgcn.dim == 0 || self.rec.rgcn.num_layers == 0 {
            return bad("rec.rgcn", "dimension and depth must be positive");
        }
        if self.flm.width == 0 || self.flm.heads == 0 || self.flm.width % self.flm.heads != 0 {
            return bad("flm.heads", "width must be a positive multiple of heads");
        }
        let c = &self.courses.curriculum;
        if !(c.delta > 0.0 && c.delta <= 1.0) {
            return bad("courses.curriculum.delta", "must lie in (0, 1]");
        }
        if !(c.rho >= 0.0 && c.rho.is_finite()) {
            return bad("courses.curriculum.rho", "must be finite and non-negative");
        }
        if !(self.courses.mix_ratio >= 0.0 && self.courses.mix_ratio.is_finite()) {
            return bad("courses.mix_ratio", "must be finite and non-negative");
        }
        let r = &self.cfcrs.reinforce;
        if r.rollouts == 0 {
            return bad("cfcrs.reinforce.rollouts", "must be at least 1");
        }
        if !(r.temperature > 0.0 && r.temperature.is_finite()) {
            return bad("cfcrs.reinforce.temperature", "must be positive");
        }
        if !(r.alpha >= 0.0 && r.alpha.is_finite()) {
            return bad("cfcrs.reinforce.alpha", "must be finite and non-negative");
        }
        if self.cfcrs.edits_per_user == 0 {
            return bad("cfcrs.edits_per_user", "must be at least 1");
        }
        Ok(())
    }
}

/// Independent random stream per stage, so stages stay reproducible when
/// others change.
pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage);
    r
}

pub mod stage {
    pub const SPLIT: u64 = 1;
    pub const REC_INIT: u64 = 2;
    pub const REC_TRAIN: u64 = 3;
    pub const CLASSIFIER: u64 = 4;
    pub const FLM: u64 = 5;
    pub const PSEUDO: u64 = 6;
    pub const ARM: u64 = 16;
}

/// Dialogues split three ways plus everything derived from the training part.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub kg: KnowledgeGraph,
    pub dialogues: Vec<Dialogue>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Training-split interaction lists.
    pub interactions: BTreeMap<UserId, Vec<EntityId>>,
    pub graph: RelationalGraph,
    pub train_samples: Vec<RecSample>,
    pub val_samples: Vec<RecSample>,
    pub test_samples: Vec<RecSample>,
}

impl Prepared {
    pub fn split(&self, which: Split) -> Vec<&Dialogue> {
        let idx = match which {
            Split::Train => &self.train,
            Split::Validation => &self.val,
            Split::Test => &self.test,
        };
        idx.iter().map(|&i| &self.dialogues[i]).collect()
    }

    pub fn train_dialogues(&self) -> Vec<Dialogue> {
        self.train.iter().map(|&i| self.dialogues[i].clone()).collect()
    }
}

fn samples(kg: &KnowledgeGraph, ds: &[Dialogue], idx: &[usize]) -> Vec<RecSample> {
    idx.iter().flat_map(|&i| to_rec_samples(&ds[i], kg, SampleSource::Real)).collect()
}

/// Hash split by dialogue id; the graph and the user lists see training
/// dialogues only.
pub fn prepare(kg: KnowledgeGraph, dialogues: Vec<Dialogue>, config: &PipelineConfig) -> Result<Prepared, PipelineError> {
    config.validate()?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, d) in dialogues.iter().enumerate() {
        match split_of(&d.id, config.val_pct, config.test_pct) {
            Split::Train => train.push(i),
            Split::Validation => val.push(i),
            Split::Test => test.push(i),
        }
    }
    if config.train_fraction < 1.0 {
        let keep = ((train.len() as f64 * config.train_fraction).ceil() as usize).max(1);
        train.shuffle(&mut stage_rng(config.seed, stage::SPLIT));
        train.truncate(keep);
        train.sort_unstable();
    }
    let train_ds: Vec<Dialogue> = train.iter().map(|&i| dialogues[i].clone()).collect();
    let interactions = derive_interactions(&train_ds);
    let hkg = attach_users(kg.clone(), &interactions)?;
    let graph = RelationalGraph::from_hkg(&hkg);
    let train_samples = samples(&kg, &dialogues, &train);
    let val_samples = samples(&kg, &dialogues, &val);
    let test_samples = samples(&kg, &dialogues, &test);
    if train_samples.is_empty() {
        return Err(PipelineError::EmptySplit("training"));
    }
    if test_samples.is_empty() {
        return Err(PipelineError::EmptySplit("test"));
    }
    Ok(Prepared { kg, dialogues, train, val, test, interactions, graph, train_samples, val_samples, test_samples })
}

/// Parameter prefix of the recommender.
pub const REC_PREFIX: &str = "rec";
/// Parameter prefixes of the simulator.
pub const SIM_USER_PREFIX: &str = "sim.user";
pub const SIM_SCHEMA_PREFIX: &str = "sim.schema";
pub const FLM_PREFIX: &str = "flm";

/// Fresh recommender with seeded initialization.
pub fn init_recommender(p: &Prepared, config: &PipelineConfig, store: &mut ParamStore) -> Result<Recommender, PipelineError> {
    let mut rng = stage_rng(config.seed, stage::REC_INIT);
    Ok(Recommender::init(REC_PREFIX, config.rec, &p.kg, p.graph.clone(), store, &mut rng)?)
}

pub fn pretrain_recommender(
    p: &Prepared,
    config: &PipelineConfig,
) -> Result<(Recommender, ParamStore, RecTrainReport), PipelineError> {
    let mut store = ParamStore::new();
    let rec = init_recommender(p, config, &mut store)?;
    let mut rng = stage_rng(config.seed, stage::REC_TRAIN);
    let report = train_recommender(&rec, &mut store, &p.train_samples, &p.val_samples, &config.rec_pretrain, &mut rng)?;
    Ok((rec, store, report))
}

#[derive(Clone, Debug, Default)]
pub struct SimulatorReport {
    pub classifier: ClassifierReport,
    pub flm: FlmTrainReport,
    pub real_flows: usize,
    pub pseudo_flows: usize,
}

fn pool(encoder: &UserEncoder, store: &ParamStore, table: &EntityEmbeddings, ents: &[EntityId]) -> Vec<f64> {
    if ents.is_empty() {
        return vec![0.0; table.dim()];
    }
    let rows = table.rows(ents.iter().map(|e| e.index()));
    encoder.encode_user(store, &rows).expect("non-empty, matching width").e_u
}

/// Mines schemas from the training flows.
pub fn mine_catalog(p: &Prepared, config: &PipelineConfig) -> Result<SchemaCatalog, PipelineError> {
    let schemas: Vec<_> = p.split(Split::Train).iter().map(|d| extract_flow(d, &p.kg).1).collect();
    Ok(mine_schemas(&schemas, config.min_support, config.max_len)?)
}

/// Assembles and pre-trains the simulator on top of a pre-trained
/// recommender: its entity table is frozen, its context encoder is copied as
/// the user encoder, then the schema classifier and the flow model are
/// trained.
pub fn build_simulator<'a>(
    p: &'a Prepared,
    rec: &Recommender,
    rec_store: &ParamStore,
    config: &PipelineConfig,
) -> Result<(Simulator<'a>, SimulatorReport), PipelineError> {
    let kg = &p.kg;
    let table = rec.snapshot(rec_store).table;
    let dim = table.dim();
    let mut store = ParamStore::new();
    for part in ["w", "b"] {
        let src = format!("{}.{part}", rec.encoder.prefix());
        store.insert(format!("{SIM_USER_PREFIX}.{part}"), rec_store.expect(&src).clone());
    }
    let encoder = UserEncoder::bind_existing(SIM_USER_PREFIX);
    let catalog = mine_catalog(p, config)?;
    if catalog.is_empty() {
        return Err(SchemaError::EmptyCatalog.into());
    }
    let mut report = SimulatorReport::default();

    let mut rng = stage_rng(config.seed, stage::CLASSIFIER);
    let classifier = SchemaClassifier::init(SIM_SCHEMA_PREFIX, dim, catalog.len(), &mut store, &mut rng);
    let examples = |split: Split, store: &ParamStore| -> Vec<SchemaExample> {
        p.split(split)
            .into_iter()
            .filter_map(|d| {
                let (_, s) = extract_flow(d, kg);
                let gold = catalog.index_of(&truncate_schema(&s, config.max_len))?;
                let u = role_entities(d, Speaker::Seeker);
                let v = role_entities(d, Speaker::Recommender);
                Some(SchemaExample {
                    e_u: pool(&encoder, store, &table, &u),
                    e_v: pool(&encoder, store, &table, &v),
                    gold,
                })
            })
            .collect()
    };
    let train_ex = examples(Split::Train, &store);
    let val_ex = examples(Split::Validation, &store);
    report.classifier =
        train_schema_classifier(&classifier, &mut store, &train_ex, &val_ex, &config.classifier, &mut rng)?;

    let mut rng = stage_rng(config.seed, stage::FLM);
    let flm = FlowLm::init(FLM_PREFIX, config.flm, kg, dim, &mut store, &mut rng);
    let mut real = Vec::new();
    for d in p.split(Split::Train) {
        let (f, s) = extract_flow(d, kg);
        if f.is_empty() {
            continue;
        }
        let n = f.len().min(config.max_len);
        real.push(PromptedFlow {
            e_u: pool(&encoder, &store, &table, &role_entities(d, Speaker::Seeker)),
            e_v: pool(&encoder, &store, &table, &role_entities(d, Speaker::Recommender)),
            schema: truncate_schema(&s, config.max_len),
            flow: f.entities[..n].to_vec(),
        });
    }
    let sampler = PathSampler::new(kg, config.hop_limit)?;
    let plans = catalog.schemas.iter().map(|s| sampler.plan(s)).collect::<Result<Vec<_>, _>>()?;
    let mut prng = stage_rng(config.seed, stage::PSEUDO);
    let mut pseudo = Vec::with_capacity(config.pseudo_flows);
    if plans.iter().any(|pl| pl.is_reachable()) {
        for _ in 0..config.pseudo_flows {
            let pf = sample_pseudo_flow(&sampler, &catalog, Some(&plans), SamplingStrategy::Exact, 1000, &mut prng)?;
            pseudo.push(PromptedFlow {
                e_u: pool(&encoder, &store, &table, &pf.seeker),
                e_v: pool(&encoder, &store, &table, &pf.recommender),
                schema: pf.schema,
                flow: pf.flow.entities,
            });
        }
    }
    report.real_flows = real.len();
    report.pseudo_flows = pseudo.len();
    report.flm = pretrain_flm(&flm, &mut store, &real, &pseudo, &config.flm_train, &mut rng)?;
    let flm = if config.path_constraint {
        flm.with_constraint(Some(Rc::new(PathConstraint::from_sampler(&sampler))))
    } else {
        flm
    };
    let bank = TemplateBank::from_dialogues(&p.train_dialogues(), kg);
    let mut sim = Simulator::new(
        kg,
        store,
        table,
        encoder,
        classifier,
        catalog,
        flm,
        bank,
        p.interactions.clone(),
        config.path_constraint.then_some(&sampler),
    );
    sim.realize = config.realize;
    Ok((sim, report))
}

/// Which augmentation a run of the course loop uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Eda,
    Cfcrs,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Eda => "eda",
            Arm::Cfcrs => "cfcrs",
        }
    }

    fn stream(self) -> u64 {
        stage::ARM + self as u64
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub outcome: TrainOutcome,
    pub store: ParamStore,
    pub test: RankingMetrics,
}

/// Course loop starting from a copy of the pre-trained recommender. `sim` is
/// required for [`Arm::Cfcrs`].
pub fn run_arm(
    arm: Arm,
    p: &Prepared,
    rec: &Recommender,
    pretrained: &ParamStore,
    sim: Option<&Simulator<'_>>,
    config: &PipelineConfig,
) -> Result<ArmResult, PipelineError> {
    let mut store = pretrained.clone();
    let mut rng = stage_rng(config.seed, arm.stream());
    let train_ds = p.train_dialogues();
    let bank;
    let mut aug: alloc::boxed::Box<dyn Augmenter + '_> = match arm {
        Arm::Baseline => alloc::boxed::Box::new(NoAugmenter),
        Arm::Eda => {
            bank = TemplateBank::from_dialogues(&train_ds, &p.kg);
            let per_course = config.cfcrs.pairs_per_course * config.cfcrs.edits_per_user * config.cfcrs.dialogues_per_edit;
            let mut e = EdaAugmenter::new(&p.kg, &bank, &train_ds, per_course);
            e.mix = config.eda;
            e.realize = config.realize;
            alloc::boxed::Box::new(e)
        }
        Arm::Cfcrs => {
            let sim = sim.ok_or(PipelineError::Config { field: "arm", reason: "cfcrs needs a simulator".into() })?;
            alloc::boxed::Box::new(CfcrsAugmenter::new(sim, &train_ds, config.cfcrs)?)
        }
    };
    let outcome =
        run_courses(rec, &mut store, aug.as_mut(), &p.kg, &p.train_samples, &p.val_samples, &config.courses, &mut rng)?;
    drop(aug);
    let test = rec.snapshot(&store).evaluate(&p.test_samples)?;
    Ok(ArmResult { arm, outcome, store, test })
}

/// Test metrics of each arm plus the pre-trained recommender.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub pretrained: RankingMetrics,
    pub arms: Vec<(Arm, RankingMetrics)>,
}

impl ExperimentReport {
    pub fn arm(&self, arm: Arm) -> Option<&RankingMetrics> {
        self.arms.iter().find(|(a, _)| *a == arm).map(|(_, m)| m)
    }
}

/// Runs the given arms from one shared pre-trained recommender (and one
/// simulator when CFCRS is among them).
pub fn run_experiment(
    kg: KnowledgeGraph,
    dialogues: Vec<Dialogue>,
    arms: &[Arm],
    config: &PipelineConfig,
) -> Result<ExperimentReport, PipelineError> {
    let p = prepare(kg, dialogues, config)?;
    let (rec, store, _) = pretrain_recommender(&p, config)?;
    let pretrained = rec.snapshot(&store).evaluate(&p.test_samples)?;
    let sim = if arms.contains(&Arm::Cfcrs) { Some(build_simulator(&p, &rec, &store, config)?.0) } else { None };
    let mut out = Vec::with_capacity(arms.len());
    for &arm in arms {
        let r = run_arm(arm, &p, &rec, &store, sim.as_ref(), config)?;
        out.push((arm, r.test));
    }
    Ok(ExperimentReport { seed: config.seed, pretrained, arms: out })
}

/// Pooled vector of an arbitrary entity list under `encoder`.
pub fn pooled_preference(
    encoder: &UserEncoder,
    store: &ParamStore,
    table: &EntityEmbeddings,
    entities: &[EntityId],
) -> Vec<f64> {
    pool(encoder, store, table, entities)
}

/// Stacked rows, for callers building prompts by hand.
pub fn entity_rows(table: &EntityEmbeddings, entities: &[EntityId]) -> Tensor {
    table.rows(entities.iter().map(|e| e.index()))
}
