//! Knowledge graph storage, user attachment and schema-constrained path
//! sampling.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationFlow, FlowSchema};
use crate::ids::{EntityId, RelationId, TypeId, UserId};

/// Name of the type whose entities are recommendable items.
pub const ITEM_TYPE: &str = "item";

/// Relation label of the user → entity edges added by [`attach_users`].
pub const INTERACTED: &str = "interacted";

pub const DEFAULT_HOP_LIMIT: usize = 2;
pub const DEFAULT_RETRY_BUDGET: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KgError {
    #[error("entity `{0}` has no type")]
    MissingType(String),
    #[error("entity `{0}` is assigned more than one type")]
    ConflictingType(String),
    #[error("user {user} interacted with unknown entity {entity}")]
    UnknownEntity { user: UserId, entity: EntityId },
    #[error("user {0} has an empty interaction list")]
    EmptyInteractionList(UserId),
    #[error("unknown type id {0}")]
    UnknownType(TypeId),
    #[error("hop limit must be at least 1")]
    ZeroHopLimit,
    #[error("schema is empty")]
    EmptySchema,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeRecord {
    pub entity: String,
    pub entity_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub name: String,
    pub ty: TypeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Typed entity graph with dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    types: Vec<String>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    entity_index: BTreeMap<String, EntityId>,
    type_index: BTreeMap<String, TypeId>,
    by_type: Vec<Vec<EntityId>>,
    /// Undirected, deduplicated, sorted neighbor lists (self-loops dropped).
    neighbors: Vec<Vec<EntityId>>,
}

/// Builds a graph from triple and type records.
///
/// Entity ids follow first appearance in the triples (head before tail), then
/// entities that only occur in the type map, in type-map order. Type and
/// relation ids follow first appearance. Repeated triples are stored once.
pub fn load_kg(triples: &[TripleRecord], type_map: &[TypeRecord]) -> Result<KnowledgeGraph, KgError> {
    let mut type_of: BTreeMap<&str, &str> = BTreeMap::new();
    for rec in type_map {
        match type_of.get(rec.entity.as_str()) {
            Some(&t) if t != rec.entity_type => {
                return Err(KgError::ConflictingType(rec.entity.clone()));
            }
            _ => {
                type_of.insert(&rec.entity, &rec.entity_type);
            }
        }
    }

    let mut kg = KnowledgeGraph {
        entities: Vec::new(),
        types: Vec::new(),
        relations: Vec::new(),
        triples: Vec::new(),
        entity_index: BTreeMap::new(),
        type_index: BTreeMap::new(),
        by_type: Vec::new(),
        neighbors: Vec::new(),
    };
    // Type ids follow the type map so they do not depend on triple order.
    for rec in type_map {
        kg.intern_type(&rec.entity_type);
    }

    let intern_entity = |kg: &mut KnowledgeGraph, name: &str| -> Result<EntityId, KgError> {
        if let Some(&id) = kg.entity_index.get(name) {
            return Ok(id);
        }
        let ty_name = type_of.get(name).ok_or_else(|| KgError::MissingType(name.to_string()))?;
        let ty = kg.intern_type(ty_name);
        let id = EntityId::from_index(kg.entities.len());
        kg.entities.push(Entity { name: name.to_string(), ty });
        kg.entity_index.insert(name.to_string(), id);
        Ok(id)
    };

    let mut seen = BTreeSet::new();
    for rec in triples {
        let head = intern_entity(&mut kg, &rec.head)?;
        let tail = intern_entity(&mut kg, &rec.tail)?;
        let relation = match kg.relations.iter().position(|r| *r == rec.relation) {
            Some(i) => RelationId::from_index(i),
            None => {
                kg.relations.push(rec.relation.clone());
                RelationId::from_index(kg.relations.len() - 1)
            }
        };
        let t = Triple { head, relation, tail };
        if seen.insert(t) {
            kg.triples.push(t);
        }
    }
    for rec in type_map {
        intern_entity(&mut kg, &rec.entity)?;
    }
    kg.index();
    Ok(kg)
}

impl KnowledgeGraph {
    fn intern_type(&mut self, name: &str) -> TypeId {
        if let Some(&t) = self.type_index.get(name) {
            return t;
        }
        let t = TypeId::from_index(self.types.len());
        self.types.push(name.to_string());
        self.type_index.insert(name.to_string(), t);
        t
    }

    fn index(&mut self) {
        self.by_type = vec![Vec::new(); self.types.len()];
        for (i, e) in self.entities.iter().enumerate() {
            self.by_type[e.ty.index()].push(EntityId::from_index(i));
        }
        let mut nb: Vec<BTreeSet<EntityId>> = vec![BTreeSet::new(); self.entities.len()];
        for t in &self.triples {
            if t.head != t.tail {
                nb[t.head.index()].insert(t.tail);
                nb[t.tail.index()].insert(t.head);
            }
        }
        self.neighbors = nb.into_iter().map(|s| s.into_iter().collect()).collect();
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.index()]
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn type_of(&self, id: EntityId) -> TypeId {
        self.entities[id.index()].ty
    }

    pub fn type_name(&self, ty: TypeId) -> &str {
        &self.types[ty.index()]
    }

    pub fn type_id(&self, name: &str) -> Option<TypeId> {
        self.type_index.get(name).copied()
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities_of_type(&self, ty: TypeId) -> &[EntityId] {
        self.by_type.get(ty.index()).map_or(&[], Vec::as_slice)
    }

    pub fn item_type(&self) -> Option<TypeId> {
        self.type_id(ITEM_TYPE)
    }

    pub fn is_item(&self, id: EntityId) -> bool {
        self.item_type() == Some(self.type_of(id))
    }

    /// All item entities in id order.
    pub fn items(&self) -> &[EntityId] {
        match self.item_type() {
            Some(t) => self.entities_of_type(t),
            None => &[],
        }
    }

    pub fn neighbors(&self, id: EntityId) -> &[EntityId] {
        &self.neighbors[id.index()]
    }

    /// Entities reachable from `from` within `1..=hop_limit` undirected edges.
    pub fn within_hops(&self, from: EntityId, hop_limit: usize) -> Vec<EntityId> {
        let mut dist = BTreeMap::new();
        dist.insert(from, 0usize);
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            let d = dist[&n];
            if d == hop_limit {
                continue;
            }
            for &m in self.neighbors(n) {
                if let alloc::collections::btree_map::Entry::Vacant(slot) = dist.entry(m) {
                    slot.insert(d + 1);
                    queue.push_back(m);
                }
            }
        }
        dist.remove(&from);
        dist.into_keys().collect()
    }
}

/// The knowledge graph extended with user nodes. Node ids are entity ids
/// followed by users in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneousKG {
    base: KnowledgeGraph,
    users: Vec<UserId>,
    interactions: Vec<Vec<EntityId>>,
    user_index: BTreeMap<UserId, usize>,
}

/// Attaches one node per user, linked by `interacted` edges to each entity in
/// the user's list.
pub fn attach_users(
    kg: KnowledgeGraph,
    interactions: &BTreeMap<UserId, Vec<EntityId>>,
) -> Result<HeterogeneousKG, KgError> {
    let mut users = Vec::with_capacity(interactions.len());
    let mut lists = Vec::with_capacity(interactions.len());
    let mut user_index = BTreeMap::new();
    for (user, list) in interactions {
        if list.is_empty() {
            return Err(KgError::EmptyInteractionList(user.clone()));
        }
        if let Some(&bad) = list.iter().find(|e| e.index() >= kg.num_entities()) {
            return Err(KgError::UnknownEntity { user: user.clone(), entity: bad });
        }
        user_index.insert(user.clone(), users.len());
        users.push(user.clone());
        lists.push(list.clone());
    }
    Ok(HeterogeneousKG { base: kg, users, interactions: lists, user_index })
}

impl HeterogeneousKG {
    pub fn base(&self) -> &KnowledgeGraph {
        &self.base
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn num_nodes(&self) -> usize {
        self.base.num_entities() + self.users.len()
    }

    pub fn user_node(&self, user: &UserId) -> Option<usize> {
        self.user_index.get(user).map(|&i| self.base.num_entities() + i)
    }

    pub fn interactions(&self, user: &UserId) -> Option<&[EntityId]> {
        self.user_index.get(user).map(|&i| self.interactions[i].as_slice())
    }

    /// `(user node, entity)` pairs, one per interaction.
    pub fn user_edges(&self) -> impl Iterator<Item = (usize, EntityId)> + '_ {
        let offset = self.base.num_entities();
        self.interactions
            .iter()
            .enumerate()
            .flat_map(move |(u, list)| list.iter().map(move |&e| (offset + u, e)))
    }

    pub fn num_user_edges(&self) -> usize {
        self.interactions.iter().map(Vec::len).sum()
    }
}

/// How [`PathSampler`] draws a path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Counts valid completions per position and samples proportionally.
    Exact,
    /// Draws each position uniformly from its whole type class and restarts
    /// when the draw is not connected to the previous entity.
    Rejection { retry_budget: usize },
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::Exact
    }
}

/// Samples entity sequences that follow a schema, with consecutive entities
/// connected within `hop_limit` undirected edges of the base graph. Both
/// strategies are uniform over the set of valid paths.
#[derive(Clone, Debug)]
pub struct PathSampler<'a> {
    kg: &'a KnowledgeGraph,
    hop_limit: usize,
    reach: Vec<BTreeSet<EntityId>>,
}

/// Completion counts for one schema, reusable across draws.
#[derive(Clone, Debug)]
pub struct PathPlan {
    types: Vec<TypeId>,
    /// `counts[i][e]`: number of valid completions starting with entity `e`
    /// at position `i`.
    counts: Vec<Vec<f64>>,
    total: f64,
}

impl PathPlan {
    pub fn is_reachable(&self) -> bool {
        self.total > 0.0
    }

    /// Number of valid paths (as `f64`; exact below 2^53).
    pub fn path_count(&self) -> f64 {
        self.total
    }
}

impl<'a> PathSampler<'a> {
    pub fn new(kg: &'a KnowledgeGraph, hop_limit: usize) -> Result<Self, KgError> {
        if hop_limit == 0 {
            return Err(KgError::ZeroHopLimit);
        }
        let reach = (0..kg.num_entities())
            .map(|i| kg.within_hops(EntityId::from_index(i), hop_limit).into_iter().collect())
            .collect();
        Ok(Self { kg, hop_limit, reach })
    }

    pub fn hop_limit(&self) -> usize {
        self.hop_limit
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        self.kg
    }

    /// Entities within the hop limit of `e` (excluding `e`).
    pub fn reach(&self, e: EntityId) -> &BTreeSet<EntityId> {
        &self.reach[e.index()]
    }

    pub fn connected(&self, a: EntityId, b: EntityId) -> bool {
        self.reach[a.index()].contains(&b)
    }

    fn check_schema(&self, schema: &FlowSchema) -> Result<(), KgError> {
        if schema.is_empty() {
            return Err(KgError::EmptySchema);
        }
        if let Some(&bad) = schema.types.iter().find(|t| t.index() >= self.kg.num_types()) {
            return Err(KgError::UnknownType(bad));
        }
        Ok(())
    }

    pub fn plan(&self, schema: &FlowSchema) -> Result<PathPlan, KgError> {
        self.check_schema(schema)?;
        let n = schema.len();
        let ne = self.kg.num_entities();
        let mut counts = vec![vec![0.0; ne]; n];
        for &e in self.kg.entities_of_type(schema.types[n - 1]) {
            counts[n - 1][e.index()] = 1.0;
        }
        for i in (0..n - 1).rev() {
            let next_ty = schema.types[i + 1];
            for &e in self.kg.entities_of_type(schema.types[i]) {
                let c: f64 = self.reach[e.index()]
                    .iter()
                    .filter(|m| self.kg.type_of(**m) == next_ty)
                    .map(|m| counts[i + 1][m.index()])
                    .sum();
                counts[i][e.index()] = c;
            }
        }
        let total = counts[0].iter().sum();
        Ok(PathPlan { types: schema.types.clone(), counts, total })
    }

    /// Draws one path from a precomputed plan; `None` when no valid path exists.
    pub fn sample_planned<R: Rng + ?Sized>(&self, plan: &PathPlan, rng: &mut R) -> Option<ConversationFlow> {
        if !plan.is_reachable() {
            return None;
        }
        let first = self.kg.entities_of_type(plan.types[0]);
        let mut cur = pick_weighted(first.iter().copied(), |e| plan.counts[0][e.index()], rng)?;
        let mut out = vec![cur];
        for i in 1..plan.types.len() {
            let ty = plan.types[i];
            let cands = self.reach[cur.index()].iter().copied().filter(|m| self.kg.type_of(*m) == ty);
            cur = pick_weighted(cands, |e| plan.counts[i][e.index()], rng)?;
            out.push(cur);
        }
        Some(ConversationFlow::from_entities(out))
    }

    /// Samples a path for `schema`; `Ok(None)` means the schema is unreachable
    /// (or, for the rejection strategy, the retry budget ran out).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        schema: &FlowSchema,
        strategy: SamplingStrategy,
        rng: &mut R,
    ) -> Result<Option<ConversationFlow>, KgError> {
        match strategy {
            SamplingStrategy::Exact => {
                let plan = self.plan(schema)?;
                Ok(self.sample_planned(&plan, rng))
            }
            SamplingStrategy::Rejection { retry_budget } => {
                self.check_schema(schema)?;
                'attempt: for _ in 0..retry_budget {
                    let mut out = Vec::with_capacity(schema.len());
                    for (i, &ty) in schema.types.iter().enumerate() {
                        let class = self.kg.entities_of_type(ty);
                        if class.is_empty() {
                            return Ok(None);
                        }
                        let e = class[rng.gen_range(0..class.len())];
                        if i > 0 && !self.connected(out[i - 1], e) {
                            continue 'attempt;
                        }
                        out.push(e);
                    }
                    return Ok(Some(ConversationFlow::from_entities(out)));
                }
                Ok(None)
            }
        }
    }
}

fn pick_weighted<R: Rng + ?Sized>(
    cands: impl Iterator<Item = EntityId> + Clone,
    weight: impl Fn(EntityId) -> f64,
    rng: &mut R,
) -> Option<EntityId> {
    let total: f64 = cands.clone().map(&weight).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.gen_range(0.0..total);
    let mut last = None;
    for c in cands {
        let w = weight(c);
        if w <= 0.0 {
            continue;
        }
        last = Some(c);
        if x < w {
            return Some(c);
        }
        x -= w;
    }
    last
}

/// Checks position-wise type agreement and hop-limited connectivity with a
/// fresh breadth-first search per consecutive pair.
pub fn validate_path(kg: &KnowledgeGraph, flow: &[EntityId], schema: &FlowSchema, hop_limit: usize) -> bool {
    if flow.len() != schema.len() {
        return false;
    }
    if flow.iter().any(|e| e.index() >= kg.num_entities()) {
        return false;
    }
    if flow.iter().zip(&schema.types).any(|(e, t)| kg.type_of(*e) != *t) {
        return false;
    }
    flow.windows(2).all(|w| w[0] != w[1] && kg.within_hops(w[0], hop_limit).contains(&w[1]))
}
