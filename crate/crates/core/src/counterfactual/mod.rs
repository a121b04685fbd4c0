//! Counterfactual preference edits learned adversarially against the
//! recommender with REINFORCE, under an annealed regularization weight.

mod eda;
mod simulator;
mod train;

pub use eda::{apply_eda_op, eda_augment, EdaMix, EdaOp};
pub use simulator::{RecLossReward, Simulator};
pub use train::{
    run_courses, Augmenter, CfcrsAugmenter, CfcrsConfig, CourseConfig, CourseLog, CourseOutput, EdaAugmenter, NoAugmenter,
    TrainOutcome,
};

#[allow(unused_imports)]
use crate::math::FloatExt;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::FlowSchema;
use crate::embeddings::{EmbeddingError, UserEncoder};
use crate::flm::FlmError;
use crate::nn::{ParamStore, Tensor};
use crate::{EntityId, UserId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CfError {
    #[error("edit position {position} outside a user list of {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("non-finite edit update")]
    NonFiniteUpdate,
    #[error("no user pair with entities on both sides")]
    NoUserPairs,
    #[error("rollout count must be at least 1")]
    NoRollouts,
    #[error(transparent)]
    Flm(#[from] FlmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Rec(#[from] crate::recommender::RecError),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error("phase contract broken: {0}")]
    PhaseViolation(&'static str),
}

/// `λ(k) = ρ·δ^k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Curriculum {
    pub rho: f64,
    pub delta: f64,
    pub courses: usize,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self { rho: 0.1, delta: 0.9, courses: 20 }
    }
}

impl Curriculum {
    pub fn lambda(&self, k: usize) -> f64 {
        curriculum_lambda(self.rho, self.delta, k)
    }

    /// `λ(1) .. λ(N)`.
    pub fn trajectory(&self) -> Vec<f64> {
        (1..=self.courses).map(|k| self.lambda(k)).collect()
    }
}

pub fn curriculum_lambda(rho: f64, delta: f64, k: usize) -> f64 {
    // δ^k by squaring in double-double, so the result is within an ulp or
    // two of the exact product instead of drifting with k
    let (mut acc, mut base, mut n) = ((1.0, 0.0), (delta, 0.0), k);
    while n > 0 {
        if n & 1 == 1 {
            acc = dd_mul(acc, base);
        }
        base = dd_mul(base, base);
        n >>= 1;
    }
    let (hi, lo) = dd_mul(acc, (rho, 0.0));
    hi + lo
}

/// Splits `a` into two halves whose products are exact.
fn split(a: f64) -> (f64, f64) {
    let c = 134_217_729.0 * a; // 2^27 + 1
    let hi = c - (c - a);
    (hi, a - hi)
}

/// `a * b` as `p + e` exactly.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

fn dd_mul(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let (p, e) = two_prod(x.0, y.0);
    let e = e + (x.0 * y.1 + x.1 * y.0);
    let hi = p + e;
    (hi, e - (hi - p))
}

/// Replaces row `position` of `entities` with `row + delta`.
pub fn apply_edit(entities: &Tensor, position: usize, delta: &[f64]) -> Result<Tensor, CfError> {
    if position >= entities.rows() {
        return Err(CfError::PositionOutOfRange { position, len: entities.rows() });
    }
    let mut out = entities.clone();
    for (v, d) in out.row_slice_mut(position).iter_mut().zip(delta) {
        *v += d;
    }
    Ok(out)
}

/// `min(k, len)` distinct positions drawn uniformly without replacement.
pub fn select_edit_targets<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let m = k.min(len);
    sample(rng, len, m).into_vec()
}

/// Disturbance vectors keyed by `(user, position in the user's list)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditState {
    pub dim: usize,
    deltas: BTreeMap<(UserId, usize), Vec<f64>>,
}

impl EditState {
    pub fn new(dim: usize) -> Self {
        Self { dim, deltas: BTreeMap::new() }
    }

    /// Current vector, zero when never written.
    pub fn get(&self, user: &UserId, position: usize) -> Vec<f64> {
        self.deltas.get(&(user.clone(), position)).cloned().unwrap_or_else(|| vec![0.0; self.dim])
    }

    pub fn set(&mut self, user: &UserId, position: usize, delta: Vec<f64>) -> Result<(), CfError> {
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(CfError::NonFiniteUpdate);
        }
        self.deltas.insert((user.clone(), position), delta);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.deltas.clear();
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Frobenius norm over every stored vector.
    pub fn norm(&self) -> f64 {
        self.deltas.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for ((u, p), d) in &self.deltas {
            u.0.bytes().for_each(&mut eat);
            (*p as u64).to_le_bytes().into_iter().for_each(&mut eat);
            for v in d {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// One augmentation: both users of a pair, one edited entity each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditTarget {
    pub seeker: UserId,
    pub seeker_pos: usize,
    pub recommender: UserId,
    pub recommender_pos: usize,
}

/// Reward of one simulated conversation (the recommender loss to maximize).
pub trait RewardFn {
    fn reward(&mut self, schema: &FlowSchema, flow: &[EntityId], rng: &mut dyn RngCore) -> f64;
}

impl<F> RewardFn for F
where
    F: FnMut(&FlowSchema, &[EntityId], &mut dyn RngCore) -> f64,
{
    fn reward(&mut self, schema: &FlowSchema, flow: &[EntityId], rng: &mut dyn RngCore) -> f64 {
        self(schema, flow, rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinforceConfig {
    /// Step size of the edit update.
    pub alpha: f64,
    /// Conversations sampled per update.
    pub rollouts: usize,
    pub temperature: f64,
    /// Subtract a moving average of past rewards.
    pub reward_baseline: bool,
    pub baseline_decay: f64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self { alpha: 1e-4, rollouts: 8, temperature: 1.0, reward_baseline: false, baseline_decay: 0.9 }
    }
}

/// Statistics of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub schema: FlowSchema,
    pub flows: Vec<Vec<EntityId>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl RolloutBatch {
    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }
}

/// `θ ← θ + α(g − 2λθ)`, written so that `g = 0` is an exact `(1 − 2αλ)`
/// scaling.
pub fn edit_update(theta: &[f64], grad: &[f64], alpha: f64, lambda: f64) -> Vec<f64> {
    let keep = 1.0 - 2.0 * alpha * lambda;
    theta.iter().zip(grad).map(|(t, g)| t * keep + alpha * g).collect()
}

/// Running reward baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardBaseline {
    value: Option<f64>,
}

impl RewardBaseline {
    pub fn value(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, mean: f64, decay: f64) {
        self.value = Some(match self.value {
            None => mean,
            Some(b) => decay * b + (1.0 - decay) * mean,
        });
    }
}

/// Keeps only parameters under `prefix`, for phase checksums.
pub fn prefix_checksum(store: &ParamStore, prefix: &str) -> u64 {
    let mut sub = ParamStore::new();
    sub.extend_from(store, prefix);
    sub.checksum()
}

/// Applies the edit to a user's entity matrix and re-pools it.
pub fn edited_preference(
    encoder: &UserEncoder,
    store: &ParamStore,
    entities: &Tensor,
    position: usize,
    delta: &[f64],
) -> Result<crate::embeddings::UserPreference, CfError> {
    let edited = apply_edit(entities, position, delta)?;
    Ok(encoder.encode_user(store, &edited)?)
}
