//! Entity representations from a relational graph convolution over the
//! user-extended knowledge graph, and the self-attentive user-preference
//! encoder that pools a user's entity embeddings.

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kg::HeterogeneousKG;
use crate::nn::{uniform, xavier_uniform, Binding, ParamStore, SparseMatrix, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot encode a user with no entities")]
    EmptyEntitySet,
    #[error("{bases} bases requested but the graph has only {relations} relations")]
    TooManyBases { bases: usize, relations: usize },
    #[error("embedding width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RgcnConfig {
    pub dim: usize,
    pub num_layers: usize,
    pub num_bases: usize,
    /// Applied after every layer except the last.
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            num_layers: 1,
            num_bases: 8,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }
}

/// Per-relation mean-aggregation operators over the HKG nodes.
///
/// Every base relation `r` contributes two operators (`r` and its inverse) and
/// the user attachment adds `interacted` plus its inverse. Row `n` of the
/// operator for relation `r` averages over the in-neighbors of `n` under `r`;
/// nodes with no such neighbor get an all-zero row.
#[derive(Clone, Debug)]
pub struct RelationalGraph {
    pub num_nodes: usize,
    pub operators: Vec<Rc<SparseMatrix>>,
}

impl RelationalGraph {
    pub fn from_hkg(hkg: &HeterogeneousKG) -> Self {
        let base = hkg.base();
        let nr = base.num_relations();
        let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * nr + 2];
        for t in base.triples() {
            let r = t.relation.index();
            // message flows head -> tail under r, tail -> head under r^-1
            edges[2 * r].push((t.tail.index(), t.head.index()));
            edges[2 * r + 1].push((t.head.index(), t.tail.index()));
        }
        for (user, e) in hkg.user_edges() {
            edges[2 * nr].push((e.index(), user));
            edges[2 * nr + 1].push((user, e.index()));
        }
        Self::from_edges(hkg.num_nodes(), &edges)
    }

    /// `edges[r]` lists `(target, source)` pairs.
    pub fn from_edges(num_nodes: usize, edges: &[Vec<(usize, usize)>]) -> Self {
        let operators = edges
            .iter()
            .map(|list| {
                let mut indeg = vec![0usize; num_nodes];
                for &(dst, _) in list {
                    indeg[dst] += 1;
                }
                let entries = list
                    .iter()
                    .map(|&(dst, src)| (dst, src, 1.0 / indeg[dst] as f64))
                    .collect();
                Rc::new(SparseMatrix { rows: num_nodes, cols: num_nodes, entries })
            })
            .collect();
        Self { num_nodes, operators }
    }

    pub fn num_relations(&self) -> usize {
        self.operators.len()
    }
}

/// Basis-decomposed R-GCN: `W_r = Σ_b a_{r,b} V_b`,
/// `h' = act(Σ_r A_r h W_r + h W_self)`.
#[derive(Clone, Debug)]
pub struct Rgcn {
    prefix: String,
    config: RgcnConfig,
    num_relations: usize,
}

impl Rgcn {
    /// Registers node features and layer weights in `store`.
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        config: RgcnConfig,
        num_nodes: usize,
        num_relations: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, EmbeddingError> {
        if config.num_bases > num_relations {
            return Err(EmbeddingError::TooManyBases { bases: config.num_bases, relations: num_relations });
        }
        let d = config.dim;
        store.insert(format!("{prefix}.nodes"), uniform(rng, num_nodes, d, (3.0 / d as f64).sqrt()));
        for l in 0..config.num_layers {
            let mut bases = Vec::with_capacity(config.num_bases * d * d);
            for _ in 0..config.num_bases {
                bases.extend(xavier_uniform(rng, d, d).into_data());
            }
            store.insert(format!("{prefix}.l{l}.bases"), Tensor::new(vec![config.num_bases, d * d], bases));
            store.insert(
                format!("{prefix}.l{l}.coef"),
                uniform(rng, num_relations, config.num_bases, 1.0 / (config.num_bases as f64)),
            );
            store.insert(format!("{prefix}.l{l}.self"), xavier_uniform(rng, d, d));
        }
        Ok(Self { prefix: prefix.into(), config, num_relations })
    }

    pub fn config(&self) -> &RgcnConfig {
        &self.config
    }

    pub fn layer(
        &self,
        tape: &mut Tape,
        bind: Binding<'_>,
        graph: &RelationalGraph,
        h: Var,
        l: usize,
        act: Activation,
    ) -> Var {
        let p = &self.prefix;
        let d = self.config.dim;
        let r = self.num_relations;
        let msgs: Vec<Var> = graph.operators.iter().map(|a| tape.spmm(a.clone(), h)).collect();
        let stacked = tape.concat_cols(&msgs);
        let coef = bind.get(tape, &format!("{p}.l{l}.coef"));
        let bases = bind.get(tape, &format!("{p}.l{l}.bases"));
        let wflat = tape.matmul(coef, bases);
        let w = tape.reshape(wflat, r * d, d);
        let relational = tape.matmul(stacked, w);
        let w_self = bind.get(tape, &format!("{p}.l{l}.self"));
        let own = tape.matmul(h, w_self);
        let sum = tape.add(relational, own);
        act.apply(tape, sum)
    }

    /// Node embeddings after all layers, `[num_nodes, dim]`.
    pub fn forward(&self, tape: &mut Tape, bind: Binding<'_>, graph: &RelationalGraph) -> Var {
        let mut h = bind.get(tape, &format!("{}.nodes", self.prefix));
        for l in 0..self.config.num_layers {
            let act = if l + 1 == self.config.num_layers {
                self.config.output_activation
            } else {
                self.config.hidden_activation
            };
            h = self.layer(tape, bind, graph, h, l, act);
        }
        h
    }

    /// Frozen embedding table.
    pub fn embed(&self, store: &ParamStore, graph: &RelationalGraph) -> EntityEmbeddings {
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, Binding::frozen(store), graph);
        EntityEmbeddings { table: tape.value(h).clone() }
    }
}

/// `|nodes| × d_E` embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityEmbeddings {
    pub table: Tensor,
}

impl EntityEmbeddings {
    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Rows for `ids`, stacked.
    pub fn rows(&self, ids: impl IntoIterator<Item = usize>) -> Tensor {
        let d = self.dim();
        let mut data = Vec::new();
        let mut n = 0;
        for i in ids {
            data.extend_from_slice(self.table.row_slice(i));
            n += 1;
        }
        Tensor::new(vec![n, d], data)
    }
}

/// Pooled preference of one user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserPreference {
    pub e_u: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `α = softmax(b^T tanh(W_α E_u))`, `e_u = E_u α`.
#[derive(Clone, Debug)]
pub struct UserEncoder {
    prefix: String,
}

impl UserEncoder {
    pub fn init<R: Rng + ?Sized>(prefix: &str, dim: usize, hidden: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        store.insert(format!("{prefix}.w"), xavier_uniform(rng, dim, hidden));
        store.insert(format!("{prefix}.b"), xavier_uniform(rng, hidden, 1));
        Self { prefix: prefix.into() }
    }

    /// Uses existing `{prefix}.w` / `{prefix}.b` parameters.
    pub fn bind_existing(prefix: &str) -> Self {
        Self { prefix: prefix.into() }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `entities`: `[n, d]` with `n ≥ 1`. Returns `(e_u [1, d], α [1, n])`.
    pub fn encode(&self, tape: &mut Tape, bind: Binding<'_>, entities: Var) -> (Var, Var) {
        let w = bind.get(tape, &format!("{}.w", self.prefix));
        let b = bind.get(tape, &format!("{}.b", self.prefix));
        let hidden = tape.matmul(entities, w);
        let act = tape.tanh(hidden);
        let logits = tape.matmul(act, b);
        let logits_row = tape.transpose(logits);
        let alpha = tape.softmax_rows(logits_row, None);
        let pooled = tape.matmul(alpha, entities);
        (pooled, alpha)
    }

    /// Encodes a user from a frozen store.
    pub fn encode_user(&self, store: &ParamStore, entities: &Tensor) -> Result<UserPreference, EmbeddingError> {
        if entities.rows() == 0 || entities.is_empty() {
            return Err(EmbeddingError::EmptyEntitySet);
        }
        let expected = store.expect(&format!("{}.w", self.prefix)).rows();
        if entities.cols() != expected {
            return Err(EmbeddingError::WidthMismatch { expected, found: entities.cols() });
        }
        let mut tape = Tape::new();
        let e = tape.constant(entities.clone());
        let (pooled, alpha) = self.encode(&mut tape, Binding::frozen(store), e);
        Ok(UserPreference { e_u: tape.value(pooled).data().to_vec(), alpha: tape.value(alpha).data().to_vec() })
    }
}
