//! Pseudo-flow sampling and teacher-forced pre-training.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FlmError, FlowLm};
use crate::corpus::{ConversationFlow, FlowSchema};
use crate::kg::{PathPlan, PathSampler, SamplingStrategy};
use crate::nn::{AdamW, AdamWConfig, Binding, ParamStore, Tape, Tensor};
use crate::schema::SchemaCatalog;
use crate::EntityId;

/// Pseudo flows drawn per real flow in each pre-training epoch.
pub const DEFAULT_PSEUDO_RATIO: f64 = 4.0;

/// A flow sampled from the graph with a random split of its entities between
/// two simulated users.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoFlow {
    pub schema_index: usize,
    pub schema: FlowSchema,
    pub flow: ConversationFlow,
    pub seeker: Vec<EntityId>,
    pub recommender: Vec<EntityId>,
}

/// Uniform split of `len` positions into two groups, both non-empty when
/// `len ≥ 2`. `true` marks the seeker side. A single position goes to a
/// random side.
pub fn bipartition<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<bool> {
    loop {
        let sides: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        if len < 2 || (sides.iter().any(|&s| s) && sides.iter().any(|&s| !s)) {
            return sides;
        }
    }
}

/// Draws a schema uniformly from the catalog and a path for it, drawing a new
/// schema whenever the current one is unreachable. `plans` may hold a cached
/// plan per catalog entry (exact strategy only).
pub fn sample_pseudo_flow<R: Rng + ?Sized>(
    sampler: &PathSampler<'_>,
    catalog: &SchemaCatalog,
    plans: Option<&[PathPlan]>,
    strategy: SamplingStrategy,
    max_attempts: usize,
    rng: &mut R,
) -> Result<PseudoFlow, FlmError> {
    if catalog.is_empty() {
        return Err(FlmError::AllSchemasUnreachable(0));
    }
    for _ in 0..max_attempts {
        let idx = rng.gen_range(0..catalog.len());
        let schema = &catalog.schemas[idx];
        let drawn = match (plans, strategy) {
            (Some(p), SamplingStrategy::Exact) => sampler.sample_planned(&p[idx], rng),
            _ => sampler.sample(schema, strategy, rng)?,
        };
        let Some(flow) = drawn else { continue };
        let sides = bipartition(flow.len(), rng);
        let mut seeker = Vec::new();
        let mut recommender = Vec::new();
        for (&e, &s) in flow.entities.iter().zip(&sides) {
            if s {
                seeker.push(e);
            } else {
                recommender.push(e);
            }
        }
        return Ok(PseudoFlow { schema_index: idx, schema: schema.clone(), flow, seeker, recommender });
    }
    Err(FlmError::AllSchemasUnreachable(max_attempts))
}

/// A training flow with its precomputed user prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptedFlow {
    pub e_u: Vec<f64>,
    pub e_v: Vec<f64>,
    pub schema: FlowSchema,
    pub flow: Vec<EntityId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pseudo_ratio: f64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for FlmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            pseudo_ratio: DEFAULT_PSEUDO_RATIO,
            max_steps: None,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlmTrainReport {
    /// Mean per-flow negative log-likelihood, one value per epoch.
    pub epoch_nll: Vec<f64>,
    pub steps: usize,
}

/// Teacher-forced maximum likelihood over the real flows plus
/// `pseudo_ratio × |real|` pseudo flows per epoch. Only the FLM's own
/// parameters receive updates.
pub fn pretrain_flm<R: Rng + ?Sized>(
    flm: &FlowLm,
    store: &mut ParamStore,
    real: &[PromptedFlow],
    pseudo: &[PromptedFlow],
    config: &FlmTrainConfig,
    rng: &mut R,
) -> Result<FlmTrainReport, FlmError> {
    for f in real.iter().chain(pseudo) {
        flm.check_flow(&f.schema, &f.flow)?;
    }
    let mut report = FlmTrainReport::default();
    let mut opt = AdamW::new(config.optimizer);
    let n_pseudo = if real.is_empty() {
        pseudo.len()
    } else {
        ((real.len() as f64) * config.pseudo_ratio).round() as usize
    };
    let mut pool: Vec<usize> = (0..pseudo.len()).collect();
    let mut cursor = pool.len();
    for _ in 0..config.epochs {
        let mut epoch: Vec<&PromptedFlow> = real.iter().collect();
        if !pool.is_empty() {
            for _ in 0..n_pseudo {
                if cursor == pool.len() {
                    pool.shuffle(rng);
                    cursor = 0;
                }
                epoch.push(&pseudo[pool[cursor]]);
                cursor += 1;
            }
        }
        if epoch.is_empty() {
            break;
        }
        epoch.shuffle(rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in epoch.chunks(config.batch_size.max(1)) {
            if config.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let mut tape = Tape::new();
            let bind = Binding::trainable(store);
            let mut terms = Vec::with_capacity(batch.len());
            for f in batch {
                let u = tape.constant(Tensor::row(&f.e_u));
                let v = tape.constant(Tensor::row(&f.e_v));
                terms.push(flm.flow_log_prob_var(&mut tape, bind, u, v, &f.schema, &f.flow)?);
            }
            let stacked = tape.concat_cols(&terms);
            let mean = tape.mean(stacked);
            let loss = tape.scale(mean, -1.0);
            total += tape.value(loss).item() * batch.len() as f64;
            seen += batch.len();
            let grads = tape.backward(loss)?.params();
            opt.step(store, &grads)?;
            report.steps += 1;
        }
        if seen > 0 {
            report.epoch_nll.push(total / seen as f64);
        }
        if config.max_steps.is_some_and(|m| report.steps >= m) {
            break;
        }
    }
    Ok(report)
}
