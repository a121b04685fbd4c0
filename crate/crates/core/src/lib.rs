//! Counterfactual data simulation for conversational recommender systems.
//!
//! The crate learns entity and user-preference representations over a
//! knowledge graph extended with user nodes, simulates recommendation
//! dialogues with a schema-guided flow language model plus template
//! realization, and learns counterfactual edits of user preferences
//! adversarially against a built-in recommender under a curriculum.
//!
//! Everything here is `no_std` + `alloc`; file formats, IO and the command
//! line live in the companion `cfcrs` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod counterfactual;
pub mod embeddings;
pub mod flm;
pub(crate) mod math;
pub mod ids;
pub mod kg;
pub mod metrics;
pub mod realization;
pub mod recommender;
pub mod schema;
pub mod synth;
pub mod nn;
pub mod pipeline;

pub use ids::{EntityId, RelationId, TypeId, UserId};
