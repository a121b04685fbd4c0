//! The course loop: edit step, simulation, recommender step, under the
//! annealed regularization weight.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::eda::{eda_augment, EdaMix};
use super::simulator::{RecLossReward, Simulator};
use super::{
    prefix_checksum, select_edit_targets, CfError, Curriculum, EditState, EditTarget, ReinforceConfig,
    RewardBaseline,
};
use crate::corpus::{extract_flow, Dialogue, FlowSchema};
use crate::kg::KnowledgeGraph;
use crate::metrics::RankingMetrics;
use crate::nn::ParamStore;
use crate::realization::{
    realize, simulated_id, to_rec_samples, RealizeConfig, RealizedDialogue, RecSample, SampleSource, TemplateBank,
};
use crate::recommender::{train_recommender, RecSnapshot, RecTrainConfig, Recommender};
use crate::{EntityId, UserId};

/// What one course of an augmenter produced.
#[derive(Clone, Debug, Default)]
pub struct CourseOutput {
    pub dialogues: Vec<RealizedDialogue>,
    pub mean_reward: f64,
    pub edit_norm: f64,
    /// Rollouts rewarded 0 because they recommended nothing.
    pub empty_rewards: usize,
}

/// Source of simulated dialogues for one course. Sees the recommender only
/// through a frozen snapshot.
pub trait Augmenter {
    fn name(&self) -> &'static str;

    fn augment(
        &mut self,
        course: usize,
        lambda: f64,
        rec: &RecSnapshot,
        rng: &mut dyn RngCore,
    ) -> Result<CourseOutput, CfError>;

    /// Checksum of the augmenter's trainable state.
    fn edit_checksum(&self) -> u64 {
        0
    }
}

/// Plain fine-tuning on real data.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoAugmenter;

impl Augmenter for NoAugmenter {
    fn name(&self) -> &'static str {
        "none"
    }

    fn augment(&mut self, _: usize, _: f64, _: &RecSnapshot, _: &mut dyn RngCore) -> Result<CourseOutput, CfError> {
        Ok(CourseOutput::default())
    }
}

/// Random edits of real flows, realized with the same template bank.
pub struct EdaAugmenter<'a> {
    pub kg: &'a KnowledgeGraph,
    pub bank: &'a TemplateBank,
    pub realize: RealizeConfig,
    pub mix: EdaMix,
    /// `(users, flow, schema)` of every real training dialogue with a flow.
    pub flows: Vec<((UserId, UserId), Vec<EntityId>, FlowSchema)>,
    pub per_course: usize,
}

impl<'a> EdaAugmenter<'a> {
    pub fn new(kg: &'a KnowledgeGraph, bank: &'a TemplateBank, dialogues: &[Dialogue], per_course: usize) -> Self {
        let flows = dialogues
            .iter()
            .filter_map(|d| {
                let (f, s) = extract_flow(d, kg);
                (!f.is_empty()).then(|| ((d.seeker.clone(), d.recommender.clone()), f.entities, s))
            })
            .collect();
        Self { kg, bank, realize: RealizeConfig::default(), mix: EdaMix::default(), flows, per_course }
    }
}

impl Augmenter for EdaAugmenter<'_> {
    fn name(&self) -> &'static str {
        "eda"
    }

    fn augment(
        &mut self,
        course: usize,
        _: f64,
        _: &RecSnapshot,
        mut rng: &mut dyn RngCore,
    ) -> Result<CourseOutput, CfError> {
        let mut out = CourseOutput::default();
        if self.flows.is_empty() {
            return Ok(out);
        }
        for k in 0..self.per_course {
            let ((u, v), flow, schema) = &self.flows[rng.gen_range(0..self.flows.len())];
            let (f, s) = eda_augment(flow, schema, self.kg, &self.mix, &mut rng);
            if f.is_empty() {
                continue;
            }
            let d = realize(&simulated_id(course, k), (u, v), &f, &s, self.bank, self.kg, self.realize, &mut rng)
                .map_err(|_| CfError::PhaseViolation("edited flow does not fit its schema"))?;
            out.dialogues.push(d);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfcrsConfig {
    pub reinforce: ReinforceConfig,
    /// Augmentations per user pair, each editing one entity of each user.
    pub edits_per_user: usize,
    /// User pairs drawn per course.
    pub pairs_per_course: usize,
    /// REINFORCE updates per augmentation before simulating.
    pub edit_steps: usize,
    pub dialogues_per_edit: usize,
}

impl Default for CfcrsConfig {
    fn default() -> Self {
        Self {
            reinforce: ReinforceConfig::default(),
            edits_per_user: 2,
            pairs_per_course: 64,
            edit_steps: 1,
            dialogues_per_edit: 2,
        }
    }
}

/// Learned counterfactual edits against the current recommender.
pub struct CfcrsAugmenter<'s, 'a> {
    pub sim: &'s Simulator<'a>,
    pub pairs: Vec<(UserId, UserId)>,
    pub config: CfcrsConfig,
    pub edits: EditState,
    pub baseline: RewardBaseline,
}

impl<'s, 'a> CfcrsAugmenter<'s, 'a> {
    /// User pairs come from the dialogues; pairs where either side has no
    /// entities are dropped.
    pub fn new(sim: &'s Simulator<'a>, dialogues: &[Dialogue], config: CfcrsConfig) -> Result<Self, CfError> {
        let pairs: Vec<(UserId, UserId)> = dialogues
            .iter()
            .filter(|d| sim.user_len(&d.seeker) > 0 && sim.user_len(&d.recommender) > 0)
            .map(|d| (d.seeker.clone(), d.recommender.clone()))
            .collect();
        if pairs.is_empty() {
            return Err(CfError::NoUserPairs);
        }
        Ok(Self { sim, pairs, config, edits: EditState::new(sim.dim()), baseline: RewardBaseline::default() })
    }
}

impl Augmenter for CfcrsAugmenter<'_, '_> {
    fn name(&self) -> &'static str {
        "cfcrs"
    }

    fn augment(
        &mut self,
        course: usize,
        lambda: f64,
        rec: &RecSnapshot,
        mut rng: &mut dyn RngCore,
    ) -> Result<CourseOutput, CfError> {
        let sim = self.sim;
        let cfg = self.config;
        self.edits.clear();
        let mut out = CourseOutput::default();
        let (mut reward_sum, mut reward_n) = (0.0, 0usize);
        let mut next_id = 0;
        for _ in 0..cfg.pairs_per_course {
            let (u, v) = self.pairs[rng.gen_range(0..self.pairs.len())].clone();
            let tu = select_edit_targets(sim.user_len(&u), cfg.edits_per_user.max(1), &mut rng);
            let tv = select_edit_targets(sim.user_len(&v), cfg.edits_per_user.max(1), &mut rng);
            for j in 0..tu.len().max(tv.len()) {
                let target = EditTarget {
                    seeker: u.clone(),
                    seeker_pos: tu[j % tu.len()],
                    recommender: v.clone(),
                    recommender_pos: tv[j % tv.len()],
                };
                let mut reward = RecLossReward::new(sim, rec, (u.clone(), v.clone()));
                for _ in 0..cfg.edit_steps {
                    let batch = sim.reinforce_step(
                        &mut self.edits,
                        &target,
                        &mut reward,
                        lambda,
                        &cfg.reinforce,
                        &mut self.baseline,
                        &mut rng,
                    )?;
                    reward_sum += batch.rewards.iter().sum::<f64>();
                    reward_n += batch.rewards.len();
                }
                out.empty_rewards += reward.empty;
                let (eu, ev) = sim.target_preferences(&self.edits, &target)?;
                for _ in 0..cfg.dialogues_per_edit {
                    let id = simulated_id(course, next_id);
                    next_id += 1;
                    out.dialogues.push(sim.simulate(&id, (&u, &v), &eu, &ev, cfg.reinforce.temperature, &mut rng)?);
                }
            }
        }
        if out.empty_rewards > 0 {
            log::info!("course {course}: {} rollouts without recommendations", out.empty_rewards);
        }
        out.mean_reward = if reward_n == 0 { 0.0 } else { reward_sum / reward_n as f64 };
        out.edit_norm = self.edits.norm();
        Ok(out)
    }

    fn edit_checksum(&self) -> u64 {
        self.edits.checksum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CourseConfig {
    pub curriculum: Curriculum,
    /// Simulated samples allowed per real sample in each course.
    pub mix_ratio: f64,
    /// Recommender step of each course.
    pub rec_train: RecTrainConfig,
    /// Courses without validation Recall@50 improvement before stopping.
    pub patience: usize,
}

impl Default for CourseConfig {
    fn default() -> Self {
        Self {
            curriculum: Curriculum::default(),
            mix_ratio: 1.0,
            rec_train: RecTrainConfig { epochs: 1, ..RecTrainConfig::default() },
            patience: 3,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CourseLog {
    pub course: usize,
    pub lambda: f64,
    pub mean_reward: f64,
    pub edit_norm: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall_10: f64,
    #[serde(rename = "val_recall@50")]
    pub val_recall_50: f64,
    pub simulated_samples: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<CourseLog>,
    pub simulated: Vec<RealizedDialogue>,
    /// Course whose recommender was kept; `None` keeps the starting one.
    pub best_course: Option<usize>,
    pub best_val: Option<RankingMetrics>,
}

/// Alternates the augmenter and the recommender for up to `N` courses. The
/// recommender kept is the course with the best validation Recall@50; with
/// `N = 0` (or no validation samples) the parameters are left as trained.
#[allow(clippy::too_many_arguments)]
pub fn run_courses<R: Rng>(
    rec: &Recommender,
    store: &mut ParamStore,
    augmenter: &mut dyn Augmenter,
    kg: &KnowledgeGraph,
    real: &[RecSample],
    val: &[RecSample],
    config: &CourseConfig,
    rng: &mut R,
) -> Result<TrainOutcome, CfError> {
    let mut outcome = TrainOutcome::default();
    let mut best: Option<(RankingMetrics, ParamStore)> = None;
    let mut stale = 0;
    for k in 1..=config.curriculum.courses {
        let lambda = config.curriculum.lambda(k);
        let snapshot = rec.snapshot(store);
        let rec_before = prefix_checksum(store, rec.prefix());
        let produced = augmenter.augment(k, lambda, &snapshot, rng)?;
        if prefix_checksum(store, rec.prefix()) != rec_before {
            return Err(CfError::PhaseViolation("edit step wrote recommender parameters"));
        }
        let mut simulated: Vec<RecSample> = produced
            .dialogues
            .iter()
            .flat_map(|d| to_rec_samples(&d.dialogue, kg, SampleSource::Simulated))
            .collect();
        let cap = (config.mix_ratio.max(0.0) * real.len() as f64).round() as usize;
        if simulated.len() > cap {
            simulated.shuffle(rng);
            simulated.truncate(cap);
        }
        let n_sim = simulated.len();
        let mut mixed = real.to_vec();
        mixed.extend(simulated);
        let edits_before = augmenter.edit_checksum();
        // plain minimization here; model selection happens across courses
        train_recommender(rec, store, &mixed, &[], &config.rec_train, rng)?;
        if augmenter.edit_checksum() != edits_before {
            return Err(CfError::PhaseViolation("recommender step wrote edit vectors"));
        }
        let m = if val.is_empty() { RankingMetrics::default() } else { rec.snapshot(store).evaluate(val)? };
        outcome.log.push(CourseLog {
            course: k,
            lambda,
            mean_reward: produced.mean_reward,
            edit_norm: produced.edit_norm,
            val_recall_10: m.recall_10,
            val_recall_50: m.recall_50,
            simulated_samples: n_sim,
        });
        log::info!(
            "{} course {k}: lambda {lambda:.3e}, reward {:.4}, edit norm {:.3e}, val R@50 {:.4}",
            augmenter.name(),
            produced.mean_reward,
            produced.edit_norm,
            m.recall_50
        );
        outcome.simulated.extend(produced.dialogues);
        if val.is_empty() {
            continue;
        }
        match &best {
            Some((b, _)) if !m.improves_on(b) => {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some((m, store.clone()));
                outcome.best_course = Some(k);
                outcome.best_val = Some(m);
                stale = 0;
            }
        }
    }
    if let Some((_, s)) = best {
        *store = s;
    }
    Ok(outcome)
}
