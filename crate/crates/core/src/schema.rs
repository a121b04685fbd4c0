//! Frequent flow-schema mining and the user-pair schema classifier.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FlowSchema;
use crate::nn::{xavier_uniform, AdamW, AdamWConfig, Binding, NeuralError, ParamStore, Tape, Tensor, Var};
use crate::TypeId;

pub const DEFAULT_MIN_SUPPORT: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema catalog is empty")]
    EmptyCatalog,
    #[error("gold index {index} outside catalog of {size}")]
    IndexOutOfCatalog { index: usize, size: usize },
    #[error("min_support must be at least 1")]
    ZeroMinSupport,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Mined schemas with their support, sorted by support (desc), then length
/// (asc), then type ids (lexicographic).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaCatalog {
    pub schemas: Vec<FlowSchema>,
    pub support: Vec<usize>,
    pub min_support: usize,
    pub max_len: usize,
}

impl SchemaCatalog {
    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn index_of(&self, schema: &FlowSchema) -> Option<usize> {
        self.schemas.iter().position(|s| s == schema)
    }

    /// Builds a catalog from explicit entries, re-sorting them.
    pub fn from_entries(mut entries: Vec<(FlowSchema, usize)>, min_support: usize, max_len: usize) -> Self {
        entries.sort_by(|(a, sa), (b, sb)| {
            sb.cmp(sa)
                .then(a.len().cmp(&b.len()))
                .then_with(|| a.types.cmp(&b.types))
        });
        let (schemas, support) = entries.into_iter().unzip();
        Self { schemas, support, min_support, max_len }
    }
}

/// Truncates a schema to the catalog's length limit.
pub fn truncate_schema(schema: &FlowSchema, max_len: usize) -> FlowSchema {
    FlowSchema::new(schema.types.iter().copied().take(max_len).collect())
}

/// Counts whole per-dialogue schemas (truncated to `max_len`) and keeps those
/// seen in at least `min_support` dialogues. Empty schemas are never kept.
pub fn mine_schemas(schemas: &[FlowSchema], min_support: usize, max_len: usize) -> Result<SchemaCatalog, SchemaError> {
    if min_support == 0 {
        return Err(SchemaError::ZeroMinSupport);
    }
    let mut counts: BTreeMap<Vec<TypeId>, usize> = BTreeMap::new();
    for s in schemas {
        let t = truncate_schema(s, max_len);
        if t.is_empty() {
            continue;
        }
        *counts.entry(t.types).or_default() += 1;
    }
    let entries = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_support)
        .map(|(t, c)| (FlowSchema::new(t), c))
        .collect();
    Ok(SchemaCatalog::from_entries(entries, min_support, max_len))
}

/// One-hidden-layer MLP over `[e_u, e_v]` scoring every catalog schema.
#[derive(Clone, Debug)]
pub struct SchemaClassifier {
    prefix: String,
    pub input_dim: usize,
    pub num_schemas: usize,
}

impl SchemaClassifier {
    /// `dim` is the user-embedding width; the hidden layer is `2·dim` wide with
    /// tanh and the output layer starts at zero.
    pub fn init<R: Rng + ?Sized>(prefix: &str, dim: usize, num_schemas: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let input = 2 * dim;
        store.insert(format!("{prefix}.w1"), xavier_uniform(rng, input, input));
        store.insert(format!("{prefix}.b1"), Tensor::zeros(1, input));
        store.insert(format!("{prefix}.w2"), Tensor::zeros(input, num_schemas));
        store.insert(format!("{prefix}.b2"), Tensor::zeros(1, num_schemas));
        Self { prefix: prefix.into(), input_dim: input, num_schemas }
    }

    pub fn bind_existing(prefix: &str, store: &ParamStore) -> Self {
        let w2 = store.expect(&format!("{prefix}.w2"));
        Self { prefix: prefix.into(), input_dim: w2.rows(), num_schemas: w2.cols() }
    }

    /// `pairs`: `[n, 2·dim]` rows of `[e_u, e_v]`. Returns logits `[n, |S|]`.
    pub fn logits(&self, tape: &mut Tape, bind: Binding<'_>, pairs: Var) -> Var {
        let p = &self.prefix;
        let w1 = bind.get(tape, &format!("{p}.w1"));
        let b1 = bind.get(tape, &format!("{p}.b1"));
        let w2 = bind.get(tape, &format!("{p}.w2"));
        let b2 = bind.get(tape, &format!("{p}.b2"));
        let h = tape.matmul(pairs, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    /// Concatenates user vectors into one input row on the tape.
    pub fn pair_input(tape: &mut Tape, e_u: Var, e_v: Var) -> Var {
        tape.concat_cols(&[e_u, e_v])
    }

    /// Mean cross-entropy against gold catalog indices.
    pub fn loss(&self, tape: &mut Tape, bind: Binding<'_>, pairs: Var, gold: &[usize]) -> Var {
        let logits = self.logits(tape, bind, pairs);
        let lp = tape.log_softmax_rows(logits, None);
        let at: Vec<(usize, usize)> = gold.iter().enumerate().map(|(r, &g)| (r, g)).collect();
        let picked = tape.pick(lp, &at);
        let m = tape.mean(picked);
        tape.scale(m, -1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemaPrediction {
    pub probs: Vec<f64>,
    /// Most probable catalog index; ties go to the earlier entry.
    pub index: usize,
}

pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_schema(
    clf: &SchemaClassifier,
    store: &ParamStore,
    catalog: &SchemaCatalog,
    e_u: &[f64],
    e_v: &[f64],
) -> Result<SchemaPrediction, SchemaError> {
    if catalog.is_empty() {
        return Err(SchemaError::EmptyCatalog);
    }
    let mut row = e_u.to_vec();
    row.extend_from_slice(e_v);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::row(&row));
    let logits = clf.logits(&mut tape, Binding::frozen(store), x);
    let probs = tape.softmax_rows(logits, None);
    let probs = tape.value(probs).data().to_vec();
    let index = argmax_first(&probs);
    Ok(SchemaPrediction { probs, index })
}

/// Supervision row: a real dialogue's user pair labeled with its own schema.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaExample {
    pub e_u: Vec<f64>,
    pub e_v: Vec<f64>,
    pub gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, optimizer: AdamWConfig { lr: 1e-2, ..AdamWConfig::default() } }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassifierReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
}

fn stack(examples: &[&SchemaExample]) -> (Tensor, Vec<usize>) {
    let rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| {
            let mut r = e.e_u.clone();
            r.extend_from_slice(&e.e_v);
            r
        })
        .collect();
    (Tensor::from_rows(&rows), examples.iter().map(|e| e.gold).collect())
}

fn mean_loss(clf: &SchemaClassifier, store: &ParamStore, examples: &[SchemaExample]) -> f64 {
    let refs: Vec<&SchemaExample> = examples.iter().collect();
    let (x, gold) = stack(&refs);
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let l = clf.loss(&mut tape, Binding::frozen(store), x, &gold);
    tape.value(l).item()
}

/// Minibatch AdamW on cross-entropy. When `val` is non-empty the parameters
/// with the lowest validation loss are restored at the end.
pub fn train_schema_classifier<R: Rng + ?Sized>(
    clf: &SchemaClassifier,
    store: &mut ParamStore,
    train: &[SchemaExample],
    val: &[SchemaExample],
    config: &ClassifierTrainConfig,
    rng: &mut R,
) -> Result<ClassifierReport, SchemaError> {
    for e in train.iter().chain(val) {
        if e.gold >= clf.num_schemas {
            return Err(SchemaError::IndexOutOfCatalog { index: e.gold, size: clf.num_schemas });
        }
    }
    let mut report = ClassifierReport::default();
    if train.is_empty() {
        return Ok(report);
    }
    let mut opt = AdamW::new(config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&SchemaExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, gold) = stack(&batch);
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let loss = clf.loss(&mut tape, Binding::trainable(store), x, &gold);
            total += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?.params();
            opt.step(store, &grads)?;
        }
        report.train_loss.push(total / train.len() as f64);
        if !val.is_empty() {
            let v = mean_loss(clf, store, val);
            report.val_loss.push(v);
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, store.clone()));
                report.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *store = snapshot;
    }
    Ok(report)
}

/// Uniform draw of a catalog index.
pub fn sample_schema_index<R: Rng + ?Sized>(catalog: &SchemaCatalog, rng: &mut R) -> Option<usize> {
    if catalog.is_empty() {
        None
    } else {
        Some(rng.gen_range(0..catalog.len()))
    }
}

/// Support-sorted schema list for display (`types` as names).
pub fn describe(catalog: &SchemaCatalog, type_name: impl Fn(TypeId) -> String) -> Vec<(Vec<String>, usize)> {
    catalog
        .schemas
        .iter()
        .zip(&catalog.support)
        .map(|(s, &c)| (s.types.iter().map(|&t| type_name(t)).collect(), c))
        .collect()
}
