//! Prompt-conditioned flow language model: an encoder–decoder that reads
//! `[user, user, type_1 .. type_n]` and emits one entity per schema position,
//! with the output restricted to entities of that position's type.

mod pretrain;
mod transformer;

pub use pretrain::{
    bipartition, pretrain_flm, sample_pseudo_flow, FlmTrainConfig, FlmTrainReport, PromptedFlow, PseudoFlow,
    DEFAULT_PSEUDO_RATIO,
};

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationFlow, FlowSchema};
use crate::kg::{KgError, KnowledgeGraph, PathSampler};
use crate::nn::{uniform, Binding, NeuralError, ParamStore, Tape, Tensor, Var};
use crate::{EntityId, TypeId};

use transformer::{causal_mask, decoder_layer, encoder_layer, init_decoder_layer, init_encoder_layer, init_linear, linear};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlmError {
    #[error("flow entity at position {position} does not have the schema type")]
    TypeMismatch { position: usize },
    #[error("flow has {flow} entities but schema has {schema} types")]
    LengthMismatch { flow: usize, schema: usize },
    #[error("no entity has type {0}")]
    EmptyTypeClass(TypeId),
    #[error("entity {0} outside the model vocabulary")]
    VocabMiss(EntityId),
    #[error("type {0} outside the model type table")]
    UnknownType(TypeId),
    #[error("schema of length {len} exceeds the positional table ({max})")]
    SchemaTooLong { len: usize, max: usize },
    #[error("no catalog schema admits a path after {0} attempts")]
    AllSchemasUnreachable(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("flow entity at position {position} breaks the path constraint")]
    ConstraintViolation { position: usize },
    #[error("schema admits no path under the path constraint")]
    Unreachable,
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Longest schema the positional tables cover.
    pub max_len: usize,
}

impl FlmConfig {
    /// Small configuration used for desk-scale runs.
    pub fn desk() -> Self {
        Self { layers: 2, width: 64, heads: 4, ffn_width: 256, max_len: 16 }
    }

    pub fn full() -> Self {
        Self { layers: 12, width: 768, heads: 12, ffn_width: 3072, max_len: 16 }
    }
}

impl Default for FlmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

/// Restricts decoding to hop-connected paths that can still be completed.
#[derive(Clone, Debug)]
pub struct PathConstraint {
    reach: Vec<Vec<EntityId>>,
}

impl PathConstraint {
    pub fn from_sampler(sampler: &PathSampler<'_>) -> Self {
        let n = sampler.graph().num_entities();
        let reach = (0..n)
            .map(|i| sampler.reach(EntityId::from_index(i)).iter().copied().collect())
            .collect();
        Self { reach }
    }

    fn connected(&self, a: EntityId, b: EntityId) -> bool {
        self.reach[a.index()].binary_search(&b).is_ok()
    }
}

/// Model handle: parameter names plus the type layout of the vocabulary.
#[derive(Clone, Debug)]
pub struct FlowLm {
    prefix: String,
    pub config: FlmConfig,
    pub prompt_dim: usize,
    type_of: Vec<TypeId>,
    type_masks: Vec<Rc<[bool]>>,
    class_sizes: Vec<usize>,
    constraint: Option<Rc<PathConstraint>>,
}

impl FlowLm {
    fn layout(prefix: &str, config: FlmConfig, kg: &KnowledgeGraph, prompt_dim: usize) -> Self {
        let n = kg.num_entities();
        let type_of: Vec<TypeId> = (0..n).map(|i| kg.type_of(EntityId::from_index(i))).collect();
        let mut type_masks = Vec::with_capacity(kg.num_types());
        let mut class_sizes = Vec::with_capacity(kg.num_types());
        for t in 0..kg.num_types() {
            let m: Vec<bool> = type_of.iter().map(|ty| ty.index() == t).collect();
            class_sizes.push(m.iter().filter(|&&b| b).count());
            type_masks.push(m.into());
        }
        Self { prefix: prefix.into(), config, prompt_dim, type_of, type_masks, class_sizes, constraint: None }
    }

    /// Same parameters, decoding restricted to valid paths. Both generation
    /// and log-probabilities use the restricted support.
    pub fn with_constraint(mut self, constraint: Option<Rc<PathConstraint>>) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn constraint(&self) -> Option<&Rc<PathConstraint>> {
        self.constraint.as_ref()
    }

    /// `out[j][e]`: entity `e` at position `j` can start a valid completion.
    fn completable(&self, c: &PathConstraint, schema: &FlowSchema) -> Vec<Vec<bool>> {
        let n = schema.len();
        let v = self.vocab_size();
        let mut out = alloc::vec![alloc::vec![false; v]; n];
        for j in (0..n).rev() {
            for e in 0..v {
                if self.type_of[e] != schema.types[j] {
                    continue;
                }
                out[j][e] = j + 1 == n || c.reach[e].iter().any(|m| out[j + 1][m.index()]);
            }
        }
        out
    }

    /// Row-major `[m, V]` support mask for steps `0..m`; `known` holds at
    /// least the first `m - 1` entities.
    fn support(&self, schema: &FlowSchema, known: &[EntityId], m: usize, completable: Option<&[Vec<bool>]>) -> Vec<bool> {
        let v = self.vocab_size();
        let mut mask = Vec::with_capacity(m * v);
        for j in 0..m {
            let base = &self.type_masks[schema.types[j].index()];
            match (self.constraint.as_deref(), completable) {
                (Some(c), Some(comp)) => {
                    for e in 0..v {
                        let ok = base[e]
                            && comp[j][e]
                            && (j == 0 || c.connected(known[j - 1], EntityId::from_index(e)));
                        mask.push(ok);
                    }
                }
                _ => mask.extend_from_slice(base),
            }
        }
        mask
    }

    /// Refers to parameters already present in a store.
    pub fn new(prefix: &str, config: FlmConfig, kg: &KnowledgeGraph, prompt_dim: usize) -> Self {
        Self::layout(prefix, config, kg, prompt_dim)
    }

    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        config: FlmConfig,
        kg: &KnowledgeGraph,
        prompt_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let m = Self::layout(prefix, config, kg, prompt_dim);
        let d = config.width;
        let s = 0.1;
        init_linear(store, &format!("{prefix}.prompt"), prompt_dim, d, rng);
        store.insert(format!("{prefix}.type_emb"), uniform(rng, kg.num_types(), d, s));
        store.insert(format!("{prefix}.tok_emb"), uniform(rng, m.vocab_size() + 3, d, s));
        store.insert(format!("{prefix}.enc_pos"), uniform(rng, config.max_len + 2, d, s));
        store.insert(format!("{prefix}.dec_pos"), uniform(rng, config.max_len, d, s));
        for l in 0..config.layers {
            init_encoder_layer(store, &format!("{prefix}.enc{l}"), d, config.ffn_width, rng);
        }
        for l in 0..config.layers {
            init_decoder_layer(store, &format!("{prefix}.dec{l}"), d, config.ffn_width, rng);
        }
        store.insert(format!("{prefix}.head.w"), Tensor::zeros(d, m.vocab_size()));
        store.insert(format!("{prefix}.head.b"), Tensor::zeros(1, m.vocab_size()));
        m
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Number of entity tokens (BOS/EOS/PAD excluded).
    pub fn vocab_size(&self) -> usize {
        self.type_of.len()
    }

    pub fn bos(&self) -> usize {
        self.vocab_size()
    }

    pub fn eos(&self) -> usize {
        self.vocab_size() + 1
    }

    pub fn pad(&self) -> usize {
        self.vocab_size() + 2
    }

    /// Entities sharing type `t`.
    pub fn class_size(&self, t: TypeId) -> usize {
        self.class_sizes.get(t.index()).copied().unwrap_or(0)
    }

    pub fn check_schema(&self, schema: &FlowSchema) -> Result<(), FlmError> {
        if schema.len() > self.config.max_len {
            return Err(FlmError::SchemaTooLong { len: schema.len(), max: self.config.max_len });
        }
        for &t in &schema.types {
            if t.index() >= self.type_masks.len() {
                return Err(FlmError::UnknownType(t));
            }
            if self.class_sizes[t.index()] == 0 {
                return Err(FlmError::EmptyTypeClass(t));
            }
        }
        Ok(())
    }

    pub fn check_flow(&self, schema: &FlowSchema, flow: &[EntityId]) -> Result<(), FlmError> {
        self.check_schema(schema)?;
        if flow.len() != schema.len() {
            return Err(FlmError::LengthMismatch { flow: flow.len(), schema: schema.len() });
        }
        for (j, (e, t)) in flow.iter().zip(&schema.types).enumerate() {
            let ty = self.type_of.get(e.index()).ok_or(FlmError::VocabMiss(*e))?;
            if ty != t {
                return Err(FlmError::TypeMismatch { position: j });
            }
        }
        if let Some(c) = self.constraint.as_deref() {
            let comp = self.completable(c, schema);
            for (j, e) in flow.iter().enumerate() {
                if !comp[j][e.index()] || (j > 0 && !c.connected(flow[j - 1], *e)) {
                    return Err(FlmError::ConstraintViolation { position: j });
                }
            }
        }
        Ok(())
    }

    /// Encoder output `z` for the prompt, `[n + 2, width]`.
    /// `e_u` / `e_v` are `[1, prompt_dim]`.
    pub fn encode(&self, tape: &mut Tape, bind: Binding<'_>, e_u: Var, e_v: Var, schema: &FlowSchema) -> Var {
        let p = &self.prefix;
        let users = tape.concat_rows(&[e_u, e_v]);
        let users = linear(tape, bind, &format!("{p}.prompt"), users);
        let mut x = if schema.is_empty() {
            users
        } else {
            let table = bind.get(tape, &format!("{p}.type_emb"));
            let idx: Vec<usize> = schema.types.iter().map(|t| t.index()).collect();
            let types = tape.gather_rows(table, &idx);
            tape.concat_rows(&[users, types])
        };
        let pos = bind.get(tape, &format!("{p}.enc_pos"));
        let pos = tape.slice_rows(pos, 0, schema.len() + 2);
        x = tape.add(x, pos);
        for l in 0..self.config.layers {
            x = encoder_layer(tape, bind, &format!("{p}.enc{l}"), x, self.config.heads);
        }
        x
    }

    /// Masked log-probabilities `[m, V]` for steps `0..m`, where
    /// `m = prefix.len() + 1 ≤ |schema|`. Row `j` is normalized over the
    /// entities of type `schema[j]`; other entries are 0 and carry no mass.
    pub fn step_log_probs(
        &self,
        tape: &mut Tape,
        bind: Binding<'_>,
        memory: Var,
        schema: &FlowSchema,
        prefix: &[EntityId],
    ) -> Var {
        let comp = self.constraint.as_deref().map(|c| self.completable(c, schema));
        self.step_log_probs_with(tape, bind, memory, schema, prefix, comp.as_deref())
    }

    fn step_log_probs_with(
        &self,
        tape: &mut Tape,
        bind: Binding<'_>,
        memory: Var,
        schema: &FlowSchema,
        prefix: &[EntityId],
        completable: Option<&[Vec<bool>]>,
    ) -> Var {
        let p = &self.prefix;
        let m = prefix.len() + 1;
        debug_assert!(m <= schema.len());
        let mut tokens = Vec::with_capacity(m);
        tokens.push(self.bos());
        tokens.extend(prefix.iter().map(|e| e.index()));
        let tok = bind.get(tape, &format!("{p}.tok_emb"));
        let x = tape.gather_rows(tok, &tokens);
        let types = bind.get(tape, &format!("{p}.type_emb"));
        let tidx: Vec<usize> = schema.types[..m].iter().map(|t| t.index()).collect();
        let ty = tape.gather_rows(types, &tidx);
        let pos = bind.get(tape, &format!("{p}.dec_pos"));
        let pos = tape.slice_rows(pos, 0, m);
        let x = tape.add(x, ty);
        let mut x = tape.add(x, pos);
        let causal = causal_mask(m);
        for l in 0..self.config.layers {
            x = decoder_layer(tape, bind, &format!("{p}.dec{l}"), x, memory, self.config.heads, causal.clone());
        }
        let logits = linear(tape, bind, &format!("{p}.head"), x);
        let mask = self.support(schema, prefix, m, completable);
        tape.log_softmax_rows(logits, Some(mask.into()))
    }

    /// `Σ_j log Pr(e_j | e_<j, prompt)` on the tape, differentiable in the
    /// model parameters and in `e_u`, `e_v`.
    pub fn flow_log_prob_var(
        &self,
        tape: &mut Tape,
        bind: Binding<'_>,
        e_u: Var,
        e_v: Var,
        schema: &FlowSchema,
        flow: &[EntityId],
    ) -> Result<Var, FlmError> {
        self.check_flow(schema, flow)?;
        if flow.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let memory = self.encode(tape, bind, e_u, e_v, schema);
        let lp = self.step_log_probs(tape, bind, memory, schema, &flow[..flow.len() - 1]);
        let at: Vec<(usize, usize)> = flow.iter().enumerate().map(|(j, e)| (j, e.index())).collect();
        let picked = tape.pick(lp, &at);
        Ok(tape.sum(picked))
    }

    /// Per-position log-probabilities of `flow` under a frozen store.
    pub fn step_values(
        &self,
        store: &ParamStore,
        e_u: &[f64],
        e_v: &[f64],
        schema: &FlowSchema,
        flow: &[EntityId],
    ) -> Result<Vec<f64>, FlmError> {
        self.check_flow(schema, flow)?;
        if flow.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bind = Binding::frozen(store);
        let (u, v) = (tape.constant(Tensor::row(e_u)), tape.constant(Tensor::row(e_v)));
        let memory = self.encode(&mut tape, bind, u, v, schema);
        let lp = self.step_log_probs(&mut tape, bind, memory, schema, &flow[..flow.len() - 1]);
        let t = tape.value(lp);
        Ok(flow.iter().enumerate().map(|(j, e)| t.get(j, e.index())).collect())
    }

    pub fn flow_log_prob(
        &self,
        store: &ParamStore,
        e_u: &[f64],
        e_v: &[f64],
        schema: &FlowSchema,
        flow: &[EntityId],
    ) -> Result<f64, FlmError> {
        Ok(self.step_values(store, e_u, e_v, schema, flow)?.iter().sum())
    }

    /// Autoregressive decoding with hard type masking.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        e_u: &[f64],
        e_v: &[f64],
        schema: &FlowSchema,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<ConversationFlow, FlmError> {
        self.check_schema(schema)?;
        if let Decoding::Temperature(t) = decoding {
            if !(t > 0.0 && t.is_finite()) {
                return Err(FlmError::BadTemperature(t));
            }
        }
        let bind = Binding::frozen(store);
        let mut base = Tape::new();
        let (u, v) = (base.constant(Tensor::row(e_u)), base.constant(Tensor::row(e_v)));
        let memory = self.encode(&mut base, bind, u, v, schema);
        let memory_value = base.value(memory).clone();
        let comp = self.constraint.as_deref().map(|c| self.completable(c, schema));
        if let Some(comp) = &comp {
            if !schema.is_empty() && !comp[0].iter().any(|&b| b) {
                return Err(FlmError::Unreachable);
            }
        }
        let v = self.vocab_size();
        let mut out: Vec<EntityId> = Vec::with_capacity(schema.len());
        for j in 0..schema.len() {
            let mut tape = Tape::new();
            let mem = tape.constant(memory_value.clone());
            let lp = self.step_log_probs_with(&mut tape, bind, mem, schema, &out, comp.as_deref());
            let row = tape.value(lp).row_slice(j);
            let full = self.support(schema, &out, j + 1, comp.as_deref());
            let mask = &full[j * v..];
            let pick = match decoding {
                Decoding::Greedy => argmax_masked(row, mask),
                Decoding::Temperature(t) => sample_masked(row, mask, t, rng),
            };
            out.push(EntityId::from_index(pick));
        }
        Ok(ConversationFlow::from_entities(out))
    }
}

fn argmax_masked(row: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in row.iter().zip(mask).enumerate() {
        if ok && best.map_or(true, |b| v > row[b]) {
            best = Some(i);
        }
    }
    best.expect("type class checked non-empty")
}

fn sample_masked<R: Rng + ?Sized>(row: &[f64], mask: &[bool], temperature: f64, rng: &mut R) -> usize {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(&v, &ok)| if ok { ((v - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if x < w {
            return i;
        }
        x -= w;
    }
    last
}
