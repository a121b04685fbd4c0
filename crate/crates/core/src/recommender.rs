//! Entity-only recommender: R-GCN entity embeddings, attention pooling of the
//! mentioned entities, inner product against every item plus an item bias.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingError, EntityEmbeddings, RelationalGraph, Rgcn, RgcnConfig, UserEncoder};
use crate::kg::KnowledgeGraph;
use crate::metrics::RankingMetrics;
use crate::nn::{AdamW, AdamWConfig, Binding, NeuralError, ParamStore, Tape, Tensor, Var};
use crate::realization::RecSample;
use crate::EntityId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecError {
    #[error("label {0} is not an item")]
    LabelNotItem(EntityId),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no training samples")]
    EmptyTrainSet,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecConfig {
    pub rgcn: RgcnConfig,
    pub attention_hidden: usize,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self { rgcn: RgcnConfig::default(), attention_hidden: 128 }
    }
}

/// Parameter layout of the recommender inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Recommender {
    prefix: String,
    pub rgcn: Rgcn,
    pub encoder: UserEncoder,
    pub graph: RelationalGraph,
    items: Vec<EntityId>,
    slot_of: Vec<Option<usize>>,
}

impl Recommender {
    /// `graph` must list the KG entities first (node `i` is entity `i`).
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        config: RecConfig,
        kg: &KnowledgeGraph,
        graph: RelationalGraph,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, RecError> {
        let rgcn = Rgcn::init(&format!("{prefix}.rgcn"), config.rgcn, graph.num_nodes, graph.num_relations(), store, rng)?;
        let encoder = UserEncoder::init(&format!("{prefix}.ctx"), config.rgcn.dim, config.attention_hidden, store, rng);
        let items = kg.items().to_vec();
        store.insert(format!("{prefix}.item_bias"), Tensor::zeros(1, items.len()));
        let mut slot_of = vec![None; kg.num_entities()];
        for (i, e) in items.iter().enumerate() {
            slot_of[e.index()] = Some(i);
        }
        Ok(Self { prefix: prefix.into(), rgcn, encoder, graph, items, slot_of })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn items(&self) -> &[EntityId] {
        &self.items
    }

    pub fn item_slot(&self, e: EntityId) -> Option<usize> {
        self.slot_of.get(e.index()).copied().flatten()
    }

    fn check_labels(&self, samples: &[RecSample]) -> Result<(), RecError> {
        match samples.iter().find(|s| self.item_slot(s.label).is_none()) {
            Some(s) => Err(RecError::LabelNotItem(s.label)),
            None => Ok(()),
        }
    }

    /// Item logits `[B, |I|]` for the given contexts on a tape.
    pub fn logits(&self, tape: &mut Tape, bind: Binding<'_>, contexts: &[&[EntityId]]) -> Var {
        let h = self.rgcn.forward(tape, bind, &self.graph);
        let d = self.rgcn.config().dim;
        let item_idx: Vec<usize> = self.items.iter().map(|e| e.index()).collect();
        let item_emb = tape.gather_rows(h, &item_idx);
        let mut users = Vec::with_capacity(contexts.len());
        for ctx in contexts {
            if ctx.is_empty() {
                users.push(tape.constant(Tensor::zeros(1, d)));
            } else {
                let idx: Vec<usize> = ctx.iter().map(|e| e.index()).collect();
                let rows = tape.gather_rows(h, &idx);
                users.push(self.encoder.encode(tape, bind, rows).0);
            }
        }
        let u = tape.concat_rows(&users);
        let it = tape.transpose(item_emb);
        let scores = tape.matmul(u, it);
        let bias = bind.get(tape, &format!("{}.item_bias", self.prefix));
        tape.add_row(scores, bias)
    }

    /// Mean negative log-likelihood of the labels under a softmax over items.
    pub fn loss_var(&self, tape: &mut Tape, bind: Binding<'_>, samples: &[&RecSample]) -> Var {
        let ctx: Vec<&[EntityId]> = samples.iter().map(|s| s.context.as_slice()).collect();
        let logits = self.logits(tape, bind, &ctx);
        let lp = tape.log_softmax_rows(logits, None);
        let at: Vec<(usize, usize)> = samples
            .iter()
            .enumerate()
            .map(|(r, s)| (r, self.item_slot(s.label).expect("labels checked")))
            .collect();
        let picked = tape.pick(lp, &at);
        let m = tape.mean(picked);
        tape.scale(m, -1.0)
    }

    pub fn rec_loss(&self, store: &ParamStore, samples: &[RecSample]) -> Result<f64, RecError> {
        self.check_labels(samples)?;
        Ok(self.snapshot(store).mean_nll(samples))
    }

    /// Frozen scoring tables for fast inference.
    pub fn snapshot(&self, store: &ParamStore) -> RecSnapshot {
        let table = self.rgcn.embed(store, &self.graph);
        let item_emb = table.rows(self.items.iter().map(|e| e.index()));
        RecSnapshot {
            table,
            item_emb,
            bias: store.expect(&format!("{}.item_bias", self.prefix)).data().to_vec(),
            encoder: self.encoder.clone(),
            encoder_store: {
                let mut s = ParamStore::new();
                s.extend_from(store, self.encoder.prefix());
                s
            },
            items: self.items.clone(),
            slot_of: self.slot_of.clone(),
        }
    }
}

/// Frozen recommender: embedding table, item matrix, bias and the context
/// encoder parameters.
#[derive(Clone, Debug)]
pub struct RecSnapshot {
    pub table: EntityEmbeddings,
    pub item_emb: Tensor,
    pub bias: Vec<f64>,
    encoder: UserEncoder,
    encoder_store: ParamStore,
    items: Vec<EntityId>,
    slot_of: Vec<Option<usize>>,
}

impl RecSnapshot {
    pub fn items(&self) -> &[EntityId] {
        &self.items
    }

    /// Pooled context vector; zero for an empty context.
    pub fn context_vector(&self, context: &[EntityId]) -> Vec<f64> {
        if context.is_empty() {
            return vec![0.0; self.table.dim()];
        }
        let rows = self.table.rows(context.iter().map(|e| e.index()));
        self.encoder
            .encode_user(&self.encoder_store, &rows)
            .expect("non-empty context")
            .e_u
    }

    /// Score of every item, in item order.
    pub fn scores(&self, context: &[EntityId]) -> Vec<f64> {
        let u = self.context_vector(context);
        (0..self.items.len())
            .map(|i| {
                let row = self.item_emb.row_slice(i);
                row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + self.bias[i]
            })
            .collect()
    }

    /// Items by descending score, ties by ascending id.
    pub fn rank_items(&self, context: &[EntityId]) -> Vec<(EntityId, f64)> {
        let mut v: Vec<(EntityId, f64)> = self.items.iter().copied().zip(self.scores(context)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// 1-based rank of `label` under the same ordering as [`Self::rank_items`].
    pub fn rank_of(&self, context: &[EntityId], label: EntityId) -> usize {
        let scores = self.scores(context);
        let li = self.slot_of[label.index()].expect("label is an item");
        let ls = scores[li];
        1 + self
            .items
            .iter()
            .zip(&scores)
            .filter(|(e, &s)| s > ls || (s == ls && **e < label))
            .count()
    }

    pub fn nll(&self, sample: &RecSample) -> f64 {
        let scores = self.scores(&sample.context);
        let li = self.slot_of[sample.label.index()].expect("label is an item");
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        lse - scores[li]
    }

    pub fn mean_nll(&self, samples: &[RecSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().map(|s| self.nll(s)).sum::<f64>() / samples.len() as f64
    }

    pub fn evaluate(&self, samples: &[RecSample]) -> Result<RankingMetrics, RecError> {
        if samples.is_empty() {
            return Err(RecError::EmptyTestSet);
        }
        if let Some(s) = samples.iter().find(|s| self.slot_of.get(s.label.index()).copied().flatten().is_none()) {
            return Err(RecError::LabelNotItem(s.label));
        }
        let ranks: Vec<usize> = samples.iter().map(|s| self.rank_of(&s.context, s.label)).collect();
        Ok(RankingMetrics::from_ranks(&ranks))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluations without validation Recall@50 improvement before stopping.
    pub patience: usize,
    pub optimizer: AdamWConfig,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 64, patience: 3, optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() } }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecTrainReport {
    pub train_loss: Vec<f64>,
    pub val: Vec<RankingMetrics>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

impl RecTrainReport {
    pub fn best_val(&self) -> Option<&RankingMetrics> {
        self.best_epoch.map(|e| &self.val[e])
    }
}

/// Minibatch AdamW over all recommender parameters. With validation samples,
/// the epoch with the best Recall@50 (see [`RankingMetrics::selection_key`]) is kept and training stops after
/// `patience` epochs without improvement.
pub fn train_recommender<R: Rng + ?Sized>(
    rec: &Recommender,
    store: &mut ParamStore,
    train: &[RecSample],
    val: &[RecSample],
    config: &RecTrainConfig,
    rng: &mut R,
) -> Result<RecTrainReport, RecError> {
    rec.check_labels(train)?;
    rec.check_labels(val)?;
    let mut report = RecTrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }
    if train.is_empty() {
        return Err(RecError::EmptyTrainSet);
    }
    let mut opt = AdamW::new(config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(RankingMetrics, ParamStore)> = None;
    let mut stale = 0;
    if !val.is_empty() {
        let m = rec.snapshot(store).evaluate(val)?;
        best = Some((m, store.clone()));
    }
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&RecSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let loss = rec.loss_var(&mut tape, Binding::trainable(store), &batch);
            total += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?.params();
            opt.step(store, &grads)?;
            report.steps += 1;
        }
        report.train_loss.push(total / train.len() as f64);
        if val.is_empty() {
            continue;
        }
        let m = rec.snapshot(store).evaluate(val)?;
        report.val.push(m);
        if best.as_ref().map_or(true, |(b, _)| m.improves_on(b)) {
            best = Some((m, store.clone()));
            report.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *store = snapshot;
    }
    Ok(report)
}
