//! Random edit baseline over flows: replace, insert, swap, delete.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::FlowSchema;
use crate::kg::KnowledgeGraph;
use crate::{EntityId, TypeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdaOp {
    /// Position `i` gets a random entity of the same type.
    Replace(usize),
    /// A random entity (with its type) goes in before position `i`.
    Insert(usize),
    Swap(usize, usize),
    Delete(usize),
}

/// Relative weights of the four operations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdaMix {
    pub replace: f64,
    pub insert: f64,
    pub swap: f64,
    pub delete: f64,
}

impl Default for EdaMix {
    fn default() -> Self {
        Self { replace: 1.0, insert: 1.0, swap: 1.0, delete: 1.0 }
    }
}

impl EdaMix {
    /// Draws an operation applicable to a flow of length `len`.
    pub fn draw<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> EdaOp {
        let w = [self.replace, self.insert, self.swap, self.delete];
        let total: f64 = w.iter().filter(|v| **v > 0.0).sum();
        let mut pick = 1;
        if len > 0 && total > 0.0 {
            let mut x = rng.gen::<f64>() * total;
            for (i, &v) in w.iter().enumerate() {
                if v <= 0.0 {
                    continue;
                }
                pick = i;
                if x < v {
                    break;
                }
                x -= v;
            }
        }
        match pick {
            0 => EdaOp::Replace(rng.gen_range(0..len)),
            1 => EdaOp::Insert(rng.gen_range(0..=len)),
            2 => EdaOp::Swap(rng.gen_range(0..len), rng.gen_range(0..len)),
            _ => EdaOp::Delete(rng.gen_range(0..len)),
        }
    }
}

/// Applies `op`, keeping flow and schema aligned. Out-of-range positions
/// leave both unchanged.
pub fn apply_eda_op<R: Rng + ?Sized>(
    op: EdaOp,
    flow: &[EntityId],
    schema: &FlowSchema,
    kg: &KnowledgeGraph,
    rng: &mut R,
) -> (Vec<EntityId>, FlowSchema) {
    let mut f = flow.to_vec();
    let mut t: Vec<TypeId> = schema.types.clone();
    let n = f.len();
    match op {
        EdaOp::Replace(i) if i < n => {
            let pool = kg.entities_of_type(t[i]);
            f[i] = pool[rng.gen_range(0..pool.len())];
        }
        EdaOp::Insert(i) if i <= n && kg.num_entities() > 0 => {
            let e = EntityId::from_index(rng.gen_range(0..kg.num_entities()));
            f.insert(i, e);
            t.insert(i, kg.type_of(e));
        }
        EdaOp::Swap(i, j) if i < n && j < n => {
            f.swap(i, j);
            t.swap(i, j);
        }
        EdaOp::Delete(i) if i < n => {
            f.remove(i);
            t.remove(i);
        }
        _ => {}
    }
    (f, FlowSchema::new(t))
}

/// One random operation drawn from `mix`.
pub fn eda_augment<R: Rng + ?Sized>(
    flow: &[EntityId],
    schema: &FlowSchema,
    kg: &KnowledgeGraph,
    mix: &EdaMix,
    rng: &mut R,
) -> (Vec<EntityId>, FlowSchema) {
    let op = mix.draw(flow.len(), rng);
    apply_eda_op(op, flow, schema, kg, rng)
}
