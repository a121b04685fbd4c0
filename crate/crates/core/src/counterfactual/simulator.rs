//! Frozen dialogue simulator: user encoder, schema classifier, flow model and
//! template realization, plus the score-function gradient of edit vectors.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::{CfError, EditState, EditTarget, ReinforceConfig, RewardBaseline, RewardFn, RolloutBatch};
use crate::corpus::FlowSchema;
use crate::embeddings::{EntityEmbeddings, UserEncoder};
use crate::flm::{Decoding, FlowLm};
use crate::kg::{KnowledgeGraph, PathSampler};
use crate::nn::{Binding, ParamStore, Tape, Tensor, Var};
use crate::realization::{realize, to_rec_samples, RealizeConfig, RealizedDialogue, SampleSource, TemplateBank};
use crate::recommender::RecSnapshot;
use crate::schema::{predict_schema, SchemaCatalog, SchemaClassifier};
use crate::{EntityId, UserId};

/// Everything needed to turn two (possibly edited) users into a dialogue.
/// Nothing here is trained during the adversarial loop.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    pub kg: &'a KnowledgeGraph,
    /// Parameters of `encoder`, `classifier` and `flm`.
    pub store: ParamStore,
    pub entities: EntityEmbeddings,
    pub encoder: UserEncoder,
    pub classifier: SchemaClassifier,
    pub catalog: SchemaCatalog,
    /// Catalog entries the constrained flow model can complete.
    pub reachable: Vec<bool>,
    pub flm: FlowLm,
    pub bank: TemplateBank,
    pub realize: RealizeConfig,
    /// Interaction list of every known user.
    pub users: BTreeMap<UserId, Vec<EntityId>>,
}

impl<'a> Simulator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kg: &'a KnowledgeGraph,
        store: ParamStore,
        entities: EntityEmbeddings,
        encoder: UserEncoder,
        classifier: SchemaClassifier,
        catalog: SchemaCatalog,
        flm: FlowLm,
        bank: TemplateBank,
        users: BTreeMap<UserId, Vec<EntityId>>,
        sampler: Option<&PathSampler<'_>>,
    ) -> Self {
        let reachable = catalog
            .schemas
            .iter()
            .map(|s| sampler.map_or(true, |p| p.plan(s).map(|pl| pl.is_reachable()).unwrap_or(false)))
            .collect();
        Self {
            kg,
            store,
            entities,
            encoder,
            classifier,
            catalog,
            reachable,
            flm,
            bank,
            realize: RealizeConfig::default(),
            users,
        }
    }

    pub fn dim(&self) -> usize {
        self.entities.dim()
    }

    /// `[|E_u|, d]`, or `None` for users without entities.
    pub fn user_matrix(&self, user: &UserId) -> Option<Tensor> {
        let list = self.users.get(user).filter(|l| !l.is_empty())?;
        Some(self.entities.rows(list.iter().map(|e| e.index())))
    }

    pub fn user_len(&self, user: &UserId) -> usize {
        self.users.get(user).map_or(0, Vec::len)
    }

    /// Pooled preference with `delta` added to row `position` (none when
    /// `edit` is `None`); zero for users without entities.
    pub fn preference(&self, user: &UserId, edit: Option<(usize, &[f64])>) -> Result<Vec<f64>, CfError> {
        let Some(mut m) = self.user_matrix(user) else {
            return Ok(vec![0.0; self.dim()]);
        };
        if let Some((p, d)) = edit {
            m = super::apply_edit(&m, p, d)?;
        }
        Ok(self.encoder.encode_user(&self.store, &m)?.e_u)
    }

    /// Most probable catalog entry among those the flow model can complete.
    pub fn choose_schema(&self, e_u: &[f64], e_v: &[f64]) -> Result<usize, CfError> {
        let pred = predict_schema(&self.classifier, &self.store, &self.catalog, e_u, e_v)?;
        if self.reachable[pred.index] {
            return Ok(pred.index);
        }
        let mut best: Option<usize> = None;
        for (i, &p) in pred.probs.iter().enumerate() {
            if self.reachable[i] && best.map_or(true, |b| p > pred.probs[b]) {
                best = Some(i);
            }
        }
        best.ok_or(CfError::Flm(crate::flm::FlmError::AllSchemasUnreachable(self.catalog.len())))
    }

    pub fn sample_flow<R: Rng + ?Sized>(
        &self,
        e_u: &[f64],
        e_v: &[f64],
        schema: &FlowSchema,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<EntityId>, CfError> {
        Ok(self.flm.generate(&self.store, e_u, e_v, schema, Decoding::Temperature(temperature), rng)?.entities)
    }

    /// Schema choice, one sampled flow and its realization.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        id: &str,
        users: (&UserId, &UserId),
        e_u: &[f64],
        e_v: &[f64],
        temperature: f64,
        rng: &mut R,
    ) -> Result<RealizedDialogue, CfError> {
        let s = self.choose_schema(e_u, e_v)?;
        let schema = self.catalog.schemas[s].clone();
        let flow = self.sample_flow(e_u, e_v, &schema, temperature, rng)?;
        self.realize_flow(id, users, &flow, &schema, rng)
    }

    pub fn realize_flow<R: Rng + ?Sized>(
        &self,
        id: &str,
        users: (&UserId, &UserId),
        flow: &[EntityId],
        schema: &FlowSchema,
        rng: &mut R,
    ) -> Result<RealizedDialogue, CfError> {
        realize(id, users, flow, schema, &self.bank, self.kg, self.realize, rng)
            .map_err(|_| CfError::PhaseViolation("generated flow does not fit its schema"))
    }

    /// Pooled edited preference on a tape: `encode(E + onehot(pos)·Δ)`.
    fn edited_var(&self, tape: &mut Tape, matrix: &Tensor, position: usize, delta: Var) -> Var {
        let bind = Binding::frozen(&self.store);
        let e = tape.constant(matrix.clone());
        let mut hot = Tensor::zeros(matrix.rows(), 1);
        hot.set(position, 0, 1.0);
        let hot = tape.constant(hot);
        let spread = tape.matmul(hot, delta);
        let edited = tape.add(e, spread);
        self.encoder.encode(tape, bind, edited).0
    }

    /// `Σ_t w_t ∇ log π(flow_t | ẽ_u, ẽ_v)` with respect to the two edit
    /// vectors of `target`, and the per-flow log-probabilities.
    pub fn score_gradient(
        &self,
        edits: &EditState,
        target: &EditTarget,
        schema: &FlowSchema,
        flows: &[Vec<EntityId>],
        weights: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), CfError> {
        let (mu, mv) = self.target_matrices(target)?;
        let mut tape = Tape::new();
        let du = tape.leaf(Tensor::row(&edits.get(&target.seeker, target.seeker_pos)));
        let dv = tape.leaf(Tensor::row(&edits.get(&target.recommender, target.recommender_pos)));
        let eu = self.edited_var(&mut tape, &mu, target.seeker_pos, du);
        let ev = self.edited_var(&mut tape, &mv, target.recommender_pos, dv);
        let bind = Binding::frozen(&self.store);
        let mut log_probs = Vec::with_capacity(flows.len());
        let mut terms = Vec::with_capacity(flows.len());
        for (flow, &w) in flows.iter().zip(weights) {
            let lp = self.flm.flow_log_prob_var(&mut tape, bind, eu, ev, schema, flow)?;
            log_probs.push(tape.value(lp).item());
            terms.push(tape.scale(lp, w));
        }
        let d = self.dim();
        if terms.is_empty() {
            return Ok((vec![0.0; d], vec![0.0; d], log_probs));
        }
        let stacked = tape.concat_cols(&terms);
        let objective = tape.sum(stacked);
        let grads = tape.backward(objective).map_err(|_| CfError::NonFiniteUpdate)?;
        let pick = |v: Var| grads.wrt(v).map_or_else(|| vec![0.0; d], |t| t.data().to_vec());
        Ok((pick(du), pick(dv), log_probs))
    }

    fn target_matrices(&self, target: &EditTarget) -> Result<(Tensor, Tensor), CfError> {
        let get = |u: &UserId, p: usize| {
            let m = self.user_matrix(u).ok_or(CfError::PositionOutOfRange { position: p, len: 0 })?;
            if p >= m.rows() {
                return Err(CfError::PositionOutOfRange { position: p, len: m.rows() });
            }
            Ok(m)
        };
        Ok((get(&target.seeker, target.seeker_pos)?, get(&target.recommender, target.recommender_pos)?))
    }

    /// Preferences of both users of `target`, each with its one edit.
    pub fn target_preferences(&self, edits: &EditState, target: &EditTarget) -> Result<(Vec<f64>, Vec<f64>), CfError> {
        let du = edits.get(&target.seeker, target.seeker_pos);
        let dv = edits.get(&target.recommender, target.recommender_pos);
        Ok((
            self.preference(&target.seeker, Some((target.seeker_pos, &du)))?,
            self.preference(&target.recommender, Some((target.recommender_pos, &dv)))?,
        ))
    }

    /// One REINFORCE ascent step on the edit vectors of `target`:
    /// `Δ ← Δ + α(Σ_t L(C_t)·∇ log π(C_t) − 2λΔ)`. The schema is the
    /// classifier's choice for the current edited pair and is held fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn reinforce_step<R: Rng>(
        &self,
        edits: &mut EditState,
        target: &EditTarget,
        reward: &mut dyn RewardFn,
        lambda: f64,
        config: &ReinforceConfig,
        baseline: &mut RewardBaseline,
        rng: &mut R,
    ) -> Result<RolloutBatch, CfError> {
        if config.rollouts == 0 {
            return Err(CfError::NoRollouts);
        }
        let (eu, ev) = self.target_preferences(edits, target)?;
        let s = self.choose_schema(&eu, &ev)?;
        let schema = self.catalog.schemas[s].clone();
        self.reinforce_with_schema(edits, target, &schema, reward, lambda, config, baseline, rng)
    }

    /// [`Self::reinforce_step`] with a caller-chosen schema.
    #[allow(clippy::too_many_arguments)]
    pub fn reinforce_with_schema<R: Rng>(
        &self,
        edits: &mut EditState,
        target: &EditTarget,
        schema: &FlowSchema,
        reward: &mut dyn RewardFn,
        lambda: f64,
        config: &ReinforceConfig,
        baseline: &mut RewardBaseline,
        rng: &mut R,
    ) -> Result<RolloutBatch, CfError> {
        if config.rollouts == 0 {
            return Err(CfError::NoRollouts);
        }
        let (eu, ev) = self.target_preferences(edits, target)?;
        let mut flows = Vec::with_capacity(config.rollouts);
        let mut rewards = Vec::with_capacity(config.rollouts);
        for _ in 0..config.rollouts {
            let f = self.sample_flow(&eu, &ev, schema, config.temperature, rng)?;
            let r = reward.reward(schema, &f, rng as &mut dyn RngCore);
            flows.push(f);
            rewards.push(r);
        }
        let b = if config.reward_baseline { baseline.value() } else { 0.0 };
        let weights: Vec<f64> = rewards.iter().map(|r| r - b).collect();
        let (gu, gv, log_probs) = if weights.iter().all(|w| *w == 0.0) {
            let d = self.dim();
            let lps = flows
                .iter()
                .map(|f| self.flm.flow_log_prob(&self.store, &eu, &ev, schema, f))
                .collect::<Result<Vec<_>, _>>()?;
            (vec![0.0; d], vec![0.0; d], lps)
        } else {
            self.score_gradient(edits, target, schema, &flows, &weights)?
        };
        if log_probs.iter().any(|l| !l.is_finite()) {
            return Err(CfError::NonFiniteUpdate);
        }
        let batch = RolloutBatch { schema: schema.clone(), flows, log_probs, rewards };
        if config.reward_baseline {
            baseline.update(batch.mean_reward(), config.baseline_decay);
        }
        let du = edits.get(&target.seeker, target.seeker_pos);
        let dv = edits.get(&target.recommender, target.recommender_pos);
        edits.set(&target.seeker, target.seeker_pos, super::edit_update(&du, &gu, config.alpha, lambda))?;
        edits.set(&target.recommender, target.recommender_pos, super::edit_update(&dv, &gv, config.alpha, lambda))?;
        Ok(batch)
    }
}

/// Reward of a flow: the frozen recommender's mean loss on the samples of the
/// realized dialogue, 0 when it recommends nothing.
pub struct RecLossReward<'s, 'a> {
    pub sim: &'s Simulator<'a>,
    pub rec: &'s RecSnapshot,
    pub users: (UserId, UserId),
    /// Rollouts that produced no recommendation.
    pub empty: usize,
}

impl<'s, 'a> RecLossReward<'s, 'a> {
    pub fn new(sim: &'s Simulator<'a>, rec: &'s RecSnapshot, users: (UserId, UserId)) -> Self {
        Self { sim, rec, users, empty: 0 }
    }
}

impl RewardFn for RecLossReward<'_, '_> {
    fn reward(&mut self, schema: &FlowSchema, flow: &[EntityId], rng: &mut dyn RngCore) -> f64 {
        let Ok(d) = self.sim.realize_flow("rollout", (&self.users.0, &self.users.1), flow, schema, rng) else {
            return 0.0;
        };
        let samples = to_rec_samples(&d.dialogue, self.sim.kg, SampleSource::Simulated);
        if samples.is_empty() {
            self.empty += 1;
            log::debug!("rollout without recommendations, reward 0");
            return 0.0;
        }
        self.rec.mean_nll(&samples)
    }
}
