//! The multi-view graph representation model.
//!
//! A client method `u` and a candidate API `i` are each represented by the
//! concatenation of three views:
//!
//! * local: for a method, the mean embedding of the APIs it calls; for an
//!   API, its own embedding;
//! * co-occurrence: `L + 1` hop vectors from the frequency-aware attentive
//!   network over sampled `(i, bucket, j)` triples of the co-occurrence graph;
//! * hierarchy: `L + 1` hop vectors from the structure-aware attentive
//!   network over sampled `(h, relation, t)` belong-to triples.
//!
//! The predicted call affinity is the inner product of the two fused
//! vectors. Views can be dropped through [`Ablation`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EntityId, EntityKind};
use crate::graphs::{GraphBundle, Relation};
use crate::numerics::{Gradients, NumericsError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("entity {0} is not part of the model universe")]
    UnknownEntity(EntityId),
    #[error("expected a {expected} entity, got {got}")]
    WrongKind { expected: &'static str, got: EntityId },
    #[error("fused representations disagree in length: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which views take part in the fused representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "none")]
    None,
    /// Without the hierarchy view.
    #[serde(rename = "no-hs")]
    NoHs,
    /// Without the co-occurrence view.
    #[serde(rename = "no-co")]
    NoCo,
    /// Local view only.
    #[serde(rename = "no-hc")]
    NoHc,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoHs, Ablation::NoCo, Ablation::NoHc];

    pub fn uses_cooccurrence(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoHs)
    }

    pub fn uses_hierarchy(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoCo)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHs => "no-hs",
            Ablation::NoCo => "no-co",
            Ablation::NoHc => "no-hc",
        }
    }

    /// Length of the fused vector for embedding size `dim` and `hops` hops.
    pub fn fused_len(self, dim: usize, hops: usize) -> usize {
        let per_view = dim * (hops + 1);
        dim + per_view * (self.uses_cooccurrence() as usize + self.uses_hierarchy() as usize)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation `{s}` (expected none, no-hs, no-co or no-hc)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopConfig {
    /// Highest hop index `L`; `L + 1` hop vectors are produced per view.
    pub hops: usize,
    /// Number of triples sampled (with replacement) per hop.
    pub set_size: usize,
    pub seed: u64,
}

impl HopConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.set_size == 0 {
            return Err(ModelError::Config("set_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Cooccurrence,
    Hierarchy,
}

/// Three-layer perceptron `2d -> d -> d -> 1` with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl Mlp {
    fn shapes(dim: usize) -> [Vec<usize>; 6] {
        [
            vec![dim, 2 * dim],
            vec![dim],
            vec![dim, dim],
            vec![dim],
            vec![1, dim],
            vec![1],
        ]
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Straight evaluation without a tape.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let layer = |w: &Tensor, b: &Tensor, x: &[f64], relu: bool| -> Vec<f64> {
            (0..w.shape()[0])
                .map(|r| {
                    let v = crate::numerics::dot(w.row(r), x) + b.data()[r];
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let h1 = layer(&self.w1, &self.b1, x, true);
        let h2 = layer(&self.w2, &self.b2, &h1, true);
        layer(&self.w3, &self.b3, &h2, false)[0]
    }
}

pub const PARAM_NAMES: [&str; 15] = [
    "entity", "freq", "relation", "cooc.w1", "cooc.b1", "cooc.w2", "cooc.b2", "cooc.w3", "cooc.b3", "hier.w1",
    "hier.b1", "hier.w2", "hier.b2", "hier.w3", "hier.b3",
];

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    /// One row per entity in flat row order (see [`crate::corpus::Universe::offsets`]).
    pub entity: Tensor,
    /// One row per co-occurrence bucket.
    pub freq: Tensor,
    /// One row per [`Relation`].
    pub relation: Tensor,
    pub cooc_mlp: Mlp,
    pub hier_mlp: Mlp,
}

impl ModelParams {
    pub fn shapes(entities: usize, buckets: usize, dim: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![entities, dim], vec![buckets, dim], vec![Relation::ALL.len(), dim]];
        out.extend(Mlp::shapes(dim));
        out.extend(Mlp::shapes(dim));
        out
    }

    pub fn zeros(entities: usize, buckets: usize, dim: usize) -> Self {
        let mut t = Self::shapes(entities, buckets, dim)
            .into_iter()
            .map(Tensor::zeros)
            .collect::<Vec<_>>()
            .into_iter();
        let mut next = || t.next().expect("15 tensors");
        Self {
            dim,
            entity: next(),
            freq: next(),
            relation: next(),
            cooc_mlp: Mlp {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                w3: next(),
                b3: next(),
            },
            hier_mlp: Mlp {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                w3: next(),
                b3: next(),
            },
        }
    }

    /// Uniform `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))` for every
    /// matrix (variance `2 / (fan_in + fan_out)`); biases start at zero.
    pub fn xavier(entities: usize, buckets: usize, dim: usize, seed: u64) -> Self {
        let mut p = Self::zeros(entities, buckets, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors_mut() {
            if t.shape().len() != 2 {
                continue;
            }
            let (fan_out, fan_in) = (t.shape()[0], t.shape()[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.entity, &self.freq, &self.relation];
        out.extend(self.cooc_mlp.tensors());
        out.extend(self.hier_mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.entity, &mut self.freq, &mut self.relation];
        out.extend(self.cooc_mlp.tensors_mut());
        out.extend(self.hier_mlp.tensors_mut());
        out
    }

    pub fn entity_count(&self) -> usize {
        self.entity.shape()[0]
    }

    pub fn bucket_count(&self) -> usize {
        self.freq.shape()[0]
    }

    fn mlp(&self, view: View) -> &Mlp {
        match view {
            View::Cooccurrence => &self.cooc_mlp,
            View::Hierarchy => &self.hier_mlp,
        }
    }
}

/// A sampled triple over flat entity rows. `relation` is a bucket index for
/// co-occurrence triples and a [`Relation`] index for hierarchy triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

/// Outgoing triples per head row, in compressed sparse row layout.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripleIndex {
    start: Vec<usize>,
    edges: Vec<(u32, u32)>,
}

impl TripleIndex {
    pub fn from_triples(rows: usize, triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut by_head: Vec<Vec<(u32, u32)>> = vec![Vec::new(); rows];
        for t in triples {
            by_head[t.head as usize].push((t.relation, t.tail));
        }
        let mut start = Vec::with_capacity(rows + 1);
        let mut edges = Vec::new();
        start.push(0);
        for mut list in by_head {
            list.sort_unstable();
            edges.extend(list);
            start.push(edges.len());
        }
        Self { start, edges }
    }

    pub fn outgoing(&self, head: u32) -> &[(u32, u32)] {
        let h = head as usize;
        if h + 1 >= self.start.len() {
            return &[];
        }
        &self.edges[self.start[h]..self.start[h + 1]]
    }

    pub fn degree(&self, head: u32) -> usize {
        self.outgoing(head).len()
    }
}

/// Graph structure re-indexed over flat entity rows for propagation.
#[derive(Debug, Clone)]
pub struct ModelGraphs {
    offsets: [usize; 5],
    entities: usize,
    buckets: usize,
    method_apis: Vec<Vec<u32>>,
    pub cooccurrence: TripleIndex,
    pub hierarchy: TripleIndex,
}

impl ModelGraphs {
    pub fn new(corpus: &Corpus, graphs: &GraphBundle) -> Self {
        let offsets = corpus.universe.offsets();
        let entities = corpus.universe.total();
        let api0 = offsets[EntityKind::Api.slot()] as u32;
        let method_apis = (0..graphs.interaction.method_count() as u32)
            .map(|m| graphs.interaction.apis_of(m).iter().map(|a| a + api0).collect())
            .collect();
        let cooc = graphs.cooccurrence.edges().iter().flat_map(|e| {
            let f = e.bucket.unwrap_or(0);
            [
                Triple {
                    head: e.a + api0,
                    relation: f,
                    tail: e.b + api0,
                },
                Triple {
                    head: e.b + api0,
                    relation: f,
                    tail: e.a + api0,
                },
            ]
        });
        let row = |id: EntityId| (offsets[id.kind.slot()] + id.index as usize) as u32;
        let hier = graphs.hierarchy.triples().iter().map(|t| Triple {
            head: row(t.head),
            relation: t.relation.index() as u32,
            tail: row(t.tail),
        });
        Self {
            offsets,
            entities,
            buckets: graphs.bucketizer.buckets as usize,
            method_apis,
            cooccurrence: TripleIndex::from_triples(entities, cooc),
            hierarchy: TripleIndex::from_triples(entities, hier),
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets
    }

    pub fn row(&self, id: EntityId) -> Result<u32, ModelError> {
        let k = id.kind.slot();
        let end = if k + 1 < 5 { self.offsets[k + 1] } else { self.entities };
        let r = self.offsets[k] + id.index as usize;
        if r < end {
            Ok(r as u32)
        } else {
            Err(ModelError::UnknownEntity(id))
        }
    }

    pub fn api_row(&self, api: u32) -> u32 {
        (self.offsets[EntityKind::Api.slot()] + api as usize) as u32
    }

    pub fn api_count(&self) -> usize {
        self.entities - self.offsets[EntityKind::Api.slot()]
    }

    /// Rows of the APIs called by `method` in the training interaction graph.
    pub fn method_api_rows(&self, method: u32) -> &[u32] {
        self.method_apis.get(method as usize).map_or(&[], Vec::as_slice)
    }

    fn index(&self, view: View) -> &TripleIndex {
        match view {
            View::Cooccurrence => &self.cooccurrence,
            View::Hierarchy => &self.hierarchy,
        }
    }
}

/// Uniform sampling with replacement from all outgoing triples of `seeds`.
/// Returns an empty list when the seeds have no outgoing triples.
pub fn sample_triples<R: Rng>(index: &TripleIndex, seeds: &[u32], set_size: usize, rng: &mut R) -> Vec<Triple> {
    let total: usize = seeds.iter().map(|&s| index.degree(s)).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..set_size)
        .map(|_| {
            let mut r = rng.gen_range(0..total);
            for &s in seeds {
                let out = index.outgoing(s);
                if r < out.len() {
                    let (relation, tail) = out[r];
                    return Triple {
                        head: s,
                        relation,
                        tail,
                    };
                }
                r -= out.len();
            }
            unreachable!("sample index within pool")
        })
        .collect()
}

/// What seeds one side of a (method, API) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideSeeds {
    pub local: LocalSeed,
    pub cooccurrence: Vec<u32>,
    pub hierarchy: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocalSeed {
    /// Mean over these API rows; the zero vector when empty.
    Mean(Vec<u32>),
    /// The entity's own embedding row.
    Own(u32),
}

fn sorted_unique(rows: impl IntoIterator<Item = u32>) -> Vec<u32> {
    rows.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

impl SideSeeds {
    /// Client method side: its called APIs (minus `exclude`) seed the local
    /// and co-occurrence views; the method itself seeds the hierarchy view.
    pub fn method(graphs: &ModelGraphs, method: EntityId, exclude: Option<u32>) -> Result<Self, ModelError> {
        if method.kind != EntityKind::Method {
            return Err(ModelError::WrongKind {
                expected: "method",
                got: method,
            });
        }
        let row = graphs.row(method)?;
        let apis: Vec<u32> = graphs
            .method_api_rows(method.index)
            .iter()
            .copied()
            .filter(|&a| Some(a) != exclude)
            .collect();
        Ok(Self {
            local: LocalSeed::Mean(apis.clone()),
            cooccurrence: apis,
            hierarchy: vec![row],
        })
    }

    /// A query assembled from visible context APIs and, when known, the
    /// method entity anchoring the hierarchy view.
    pub fn query(graphs: &ModelGraphs, method: Option<EntityId>, context: &[EntityId]) -> Result<Self, ModelError> {
        let mut rows = Vec::with_capacity(context.len());
        for &c in context {
            if c.kind != EntityKind::Api {
                return Err(ModelError::WrongKind {
                    expected: "api",
                    got: c,
                });
            }
            rows.push(graphs.row(c)?);
        }
        let rows = sorted_unique(rows);
        let hierarchy = match method {
            Some(m) => vec![graphs.row(m)?],
            None => Vec::new(),
        };
        Ok(Self {
            local: LocalSeed::Mean(rows.clone()),
            cooccurrence: rows,
            hierarchy,
        })
    }

    /// Target API side: its own embedding and itself as the hop-0 seed.
    pub fn api(graphs: &ModelGraphs, api: EntityId) -> Result<Self, ModelError> {
        if api.kind != EntityKind::Api {
            return Err(ModelError::WrongKind {
                expected: "api",
                got: api,
            });
        }
        let row = graphs.row(api)?;
        Ok(Self {
            local: LocalSeed::Own(row),
            cooccurrence: vec![row],
            hierarchy: vec![row],
        })
    }
}

/// Per-hop vectors of one side before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewVector {
    pub local: Vec<f64>,
    pub cooccurrence: Vec<Vec<f64>>,
    pub hierarchy: Vec<Vec<f64>>,
}

impl ViewVector {
    pub fn fuse(&self, ablation: Ablation) -> Vec<f64> {
        let mut out = self.local.clone();
        if ablation.uses_cooccurrence() {
            self.cooccurrence.iter().for_each(|h| out.extend_from_slice(h));
        }
        if ablation.uses_hierarchy() {
            self.hierarchy.iter().for_each(|h| out.extend_from_slice(h));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Slot {
    Entity(u32),
    Freq(u32),
    Relation(u32),
    Mlp(View, u8),
}

/// One forward pass on a fresh tape. Parameter rows become tape leaves on
/// first use so repeated uses share one leaf.
pub struct Forward<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    leaves: HashMap<Slot, Var>,
    zero: Option<Var>,
}

struct SideVars {
    local: Var,
    cooccurrence: Vec<Var>,
    hierarchy: Vec<Var>,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            tape: Tape::new(),
            params,
            leaves: HashMap::new(),
            zero: None,
        }
    }

    fn slot(&mut self, slot: Slot) -> Var {
        if let Some(&v) = self.leaves.get(&slot) {
            return v;
        }
        let p = self.params;
        let t = match slot {
            Slot::Entity(r) => Tensor::vector(p.entity.row(r as usize).to_vec()),
            Slot::Freq(r) => Tensor::vector(p.freq.row(r as usize).to_vec()),
            Slot::Relation(r) => Tensor::vector(p.relation.row(r as usize).to_vec()),
            Slot::Mlp(view, k) => p.mlp(view).tensors()[k as usize].clone(),
        };
        let v = self.tape.leaf(t);
        self.leaves.insert(slot, v);
        v
    }

    pub fn entity(&mut self, row: u32) -> Var {
        self.slot(Slot::Entity(row))
    }

    fn zero(&mut self) -> Var {
        if let Some(z) = self.zero {
            return z;
        }
        let z = self.tape.leaf(Tensor::zeros(vec![self.params.dim]));
        self.zero = Some(z);
        z
    }

    fn mlp(&mut self, view: View, x: Var) -> Result<Var, ModelError> {
        let w: Vec<Var> = (0..6).map(|k| self.slot(Slot::Mlp(view, k))).collect();
        let t = &mut self.tape;
        let h = t.matvec(w[0], x)?;
        let h = t.add(h, w[1])?;
        let h = t.relu(h)?;
        let h = t.matvec(w[2], h)?;
        let h = t.add(h, w[3])?;
        let h = t.relu(h)?;
        let s = t.matvec(w[4], h)?;
        Ok(t.add(s, w[5])?)
    }

    /// Attention input for one triple.
    fn attention_input(&mut self, view: View, tr: Triple) -> Result<Var, ModelError> {
        Ok(match view {
            View::Cooccurrence => {
                let (ei, ej) = (self.entity(tr.head), self.entity(tr.tail));
                let ef = self.slot(Slot::Freq(tr.relation));
                let prod = self.tape.elemwise_mul(ei, ej)?;
                self.tape.concat(&[prod, ef])?
            }
            View::Hierarchy => {
                let eh = self.entity(tr.head);
                let er = self.slot(Slot::Relation(tr.relation));
                self.tape.concat(&[eh, er])?
            }
        })
    }

    /// Attention weights over the distinct triples of `triples` (sorted
    /// order) and their multiplicities. Duplicates share one MLP evaluation;
    /// shifting a score by `ln(count)` makes the softmax over distinct
    /// triples equal the summed softmax mass of their copies.
    fn attention(&mut self, view: View, triples: &[Triple]) -> Result<(Var, Vec<(Triple, usize)>), ModelError> {
        let mut groups: BTreeMap<Triple, usize> = BTreeMap::new();
        for &t in triples {
            *groups.entry(t).or_insert(0) += 1;
        }
        let groups: Vec<(Triple, usize)> = groups.into_iter().collect();
        let mut scores = Vec::with_capacity(groups.len());
        for &(tr, _) in &groups {
            let x = self.attention_input(view, tr)?;
            scores.push(self.mlp(view, x)?);
        }
        let mut s = self.tape.stack(&scores)?;
        if groups.iter().any(|&(_, c)| c > 1) {
            let shift = groups.iter().map(|&(_, c)| (c as f64).ln()).collect();
            let shift = self.tape.leaf(Tensor::vector(shift));
            s = self.tape.add(s, shift)?;
        }
        Ok((self.tape.softmax(s)?, groups))
    }

    /// `Σ_k π_k e_{tail_k}` over a non-empty triple list; the zero vector
    /// for an empty one.
    pub fn attend(&mut self, view: View, triples: &[Triple]) -> Result<Var, ModelError> {
        if triples.is_empty() {
            return Ok(self.zero());
        }
        let (pi, groups) = self.attention(view, triples)?;
        let tails: Vec<Var> = groups.iter().map(|&(t, _)| self.entity(t.tail)).collect();
        Ok(self.tape.weighted_sum(pi, &tails)?)
    }

    fn local(&mut self, seed: &LocalSeed) -> Result<Var, ModelError> {
        Ok(match seed {
            LocalSeed::Own(r) => self.entity(*r),
            LocalSeed::Mean(rows) if rows.is_empty() => self.zero(),
            LocalSeed::Mean(rows) => {
                let vars: Vec<Var> = rows.iter().map(|&r| self.entity(r)).collect();
                self.tape.mean(&vars)?
            }
        })
    }

    /// Hop vectors `e^(0..=L)` of one view from a hop-0 seed set.
    pub fn encode_view<R: Rng>(
        &mut self,
        graphs: &ModelGraphs,
        view: View,
        seeds: &[u32],
        hop: &HopConfig,
        rng: &mut R,
    ) -> Result<Vec<Var>, ModelError> {
        let index = graphs.index(view);
        let mut frontier = sorted_unique(seeds.iter().copied());
        let mut out = Vec::with_capacity(hop.hops + 1);
        for _ in 0..=hop.hops {
            let sample = sample_triples(index, &frontier, hop.set_size, rng);
            out.push(self.attend(view, &sample)?);
            frontier = sorted_unique(sample.iter().map(|t| t.tail));
        }
        Ok(out)
    }

    fn side<R: Rng>(
        &mut self,
        graphs: &ModelGraphs,
        seeds: &SideSeeds,
        hop: &HopConfig,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<SideVars, ModelError> {
        let local = self.local(&seeds.local)?;
        let cooccurrence = if ablation.uses_cooccurrence() {
            self.encode_view(graphs, View::Cooccurrence, &seeds.cooccurrence, hop, rng)?
        } else {
            Vec::new()
        };
        let hierarchy = if ablation.uses_hierarchy() {
            self.encode_view(graphs, View::Hierarchy, &seeds.hierarchy, hop, rng)?
        } else {
            Vec::new()
        };
        Ok(SideVars {
            local,
            cooccurrence,
            hierarchy,
        })
    }

    fn fuse(&mut self, side: &SideVars) -> Result<Var, ModelError> {
        let mut parts = vec![side.local];
        parts.extend(&side.cooccurrence);
        parts.extend(&side.hierarchy);
        Ok(self.tape.concat(&parts)?)
    }

    /// Fused representation of one side as a tape value.
    pub fn representation<R: Rng>(
        &mut self,
        graphs: &ModelGraphs,
        seeds: &SideSeeds,
        hop: &HopConfig,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let side = self.side(graphs, seeds, hop, ablation, rng)?;
        self.fuse(&side)
    }

    fn view_vector<R: Rng>(
        &mut self,
        graphs: &ModelGraphs,
        seeds: &SideSeeds,
        hop: &HopConfig,
        rng: &mut R,
    ) -> Result<ViewVector, ModelError> {
        let side = self.side(graphs, seeds, hop, Ablation::None, rng)?;
        let val = |v: &Var| self.tape.value(*v).data().to_vec();
        Ok(ViewVector {
            local: val(&side.local),
            cooccurrence: side.cooccurrence.iter().map(val).collect(),
            hierarchy: side.hierarchy.iter().map(val).collect(),
        })
    }

    /// Inner product of the two fused vectors.
    pub fn score<R: Rng>(
        &mut self,
        graphs: &ModelGraphs,
        method: &SideSeeds,
        api: &SideSeeds,
        hop: &HopConfig,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let eu = self.representation(graphs, method, hop, ablation, rng)?;
        let ei = self.representation(graphs, api, hop, ablation, rng)?;
        let (lu, li) = (self.tape.value(eu).len(), self.tape.value(ei).len());
        if lu != li {
            return Err(ModelError::Dimension(lu, li));
        }
        Ok(self.tape.dot(eu, ei)?)
    }

    /// Adds the gradient of every parameter leaf into `out`.
    pub fn accumulate(&self, grads: &Gradients, out: &mut GradBuffer) {
        let d = self.params.dim;
        for (&slot, &var) in &self.leaves {
            let Some(g) = grads.get(var) else { continue };
            match slot {
                Slot::Entity(r) => {
                    let row = out.entity.entry(r).or_insert_with(|| vec![0.0; d]);
                    add_into(row, g);
                }
                Slot::Freq(r) => add_into(&mut out.dense[0][r as usize * d..(r as usize + 1) * d], g),
                Slot::Relation(r) => add_into(&mut out.dense[1][r as usize * d..(r as usize + 1) * d], g),
                Slot::Mlp(view, k) => {
                    let base = match view {
                        View::Cooccurrence => 2,
                        View::Hierarchy => 8,
                    };
                    add_into(&mut out.dense[base + k as usize], g);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Gradient accumulator shaped like [`ModelParams`]; entity rows are sparse.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub entity: BTreeMap<u32, Vec<f64>>,
    /// Every tensor after `entity`, in [`PARAM_NAMES`] order.
    pub dense: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            entity: BTreeMap::new(),
            dense: params.tensors()[1..].iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (&r, g) in &other.entity {
            match self.entity.get_mut(&r) {
                Some(row) => add_into(row, g),
                None => {
                    self.entity.insert(r, g.clone());
                }
            }
        }
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            add_into(a, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.entity.values_mut() {
            row.iter_mut().for_each(|v| *v *= c);
        }
        for t in &mut self.dense {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Dense copy of the entity gradient followed by the other tensors.
    pub fn to_dense(&self, params: &ModelParams) -> Vec<Vec<f64>> {
        let d = params.dim;
        let mut entity = vec![0.0; params.entity.len()];
        for (&r, g) in &self.entity {
            entity[r as usize * d..(r as usize + 1) * d].copy_from_slice(g);
        }
        let mut out = vec![entity];
        out.extend(self.dense.iter().cloned());
        out
    }
}

/// Everything besides parameters that determines a model's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hop: HopConfig,
    pub ablation: Ablation,
}

const TAG_API: u64 = 0xa91;
const TAG_QUERY: u64 = 0x9e7;
const TAG_PAIR: u64 = 0x5c0;

/// SplitMix64-style mixing of several words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub config: ModelConfig,
}

impl Model {
    pub fn new(params: ModelParams, config: ModelConfig) -> Result<Self, ModelError> {
        config.hop.validate()?;
        Ok(Self { params, config })
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn fused_len(&self) -> usize {
        self.config.ablation.fused_len(self.params.dim, self.config.hop.hops)
    }

    fn check(&self, graphs: &ModelGraphs) -> Result<(), ModelError> {
        if graphs.entity_count() != self.params.entity_count() || graphs.bucket_count() != self.params.bucket_count() {
            return Err(ModelError::Config(format!(
                "model has {} entities / {} buckets, graphs have {} / {}",
                self.params.entity_count(),
                self.params.bucket_count(),
                graphs.entity_count(),
                graphs.bucket_count()
            )));
        }
        Ok(())
    }

    fn represent(&self, graphs: &ModelGraphs, seeds: &SideSeeds, seed: u64) -> Result<Vec<f64>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Forward::new(&self.params);
        let v = f.representation(graphs, seeds, &self.config.hop, self.config.ablation, &mut rng)?;
        Ok(f.tape.value(v).data().to_vec())
    }

    /// Fused inference representation of an API. Sampling is seeded from
    /// the model seed and the API, so it does not depend on call order.
    pub fn api_representation(&self, graphs: &ModelGraphs, api: EntityId) -> Result<Vec<f64>, ModelError> {
        self.check(graphs)?;
        let seeds = SideSeeds::api(graphs, api)?;
        let row = graphs.row(api)? as u64;
        self.represent(graphs, &seeds, derive_seed(&[self.config.hop.seed, TAG_API, row]))
    }

    /// Fused representation of a query built from visible context APIs and
    /// an optional method entity.
    pub fn query_representation(
        &self,
        graphs: &ModelGraphs,
        method: Option<EntityId>,
        context: &[EntityId],
    ) -> Result<Vec<f64>, ModelError> {
        self.check(graphs)?;
        let seeds = SideSeeds::query(graphs, method, context)?;
        let mut key = vec![self.config.hop.seed, TAG_QUERY];
        key.push(method.map_or(u64::MAX, |m| m.index as u64));
        key.extend(seeds.cooccurrence.iter().map(|&r| r as u64));
        self.represent(graphs, &seeds, derive_seed(&key))
    }

    /// Per-hop view vectors of a method (all views, regardless of ablation).
    pub fn method_views(
        &self,
        graphs: &ModelGraphs,
        method: EntityId,
        exclude: Option<EntityId>,
        rng_seed: u64,
    ) -> Result<ViewVector, ModelError> {
        let ex = exclude.map(|e| graphs.row(e)).transpose()?;
        let seeds = SideSeeds::method(graphs, method, ex)?;
        let mut f = Forward::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        f.view_vector(graphs, &seeds, &self.config.hop, &mut rng)
    }

    /// Predicted affinity `e_u · e_i` of a training method and an API, with
    /// `exclude` removed from the method's seed sets.
    pub fn score(
        &self,
        graphs: &ModelGraphs,
        method: EntityId,
        api: EntityId,
        exclude: Option<EntityId>,
    ) -> Result<f64, ModelError> {
        let seed = derive_seed(&[
            self.config.hop.seed,
            TAG_PAIR,
            graphs.row(method)? as u64,
            graphs.row(api)? as u64,
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.score_with_rng(graphs, method, api, exclude, &mut rng)
    }

    /// [`Model::score`] drawing samples from `rng`. Samples are drawn per
    /// side (method, then API), per active view (co-occurrence, then
    /// hierarchy), per hop, with one [`sample_triples`] call each.
    pub fn score_with_rng<R: Rng>(
        &self,
        graphs: &ModelGraphs,
        method: EntityId,
        api: EntityId,
        exclude: Option<EntityId>,
        rng: &mut R,
    ) -> Result<f64, ModelError> {
        self.check(graphs)?;
        let ex = exclude.map(|e| graphs.row(e)).transpose()?;
        let mseeds = SideSeeds::method(graphs, method, ex)?;
        let aseeds = SideSeeds::api(graphs, api)?;
        let mut f = Forward::new(&self.params);
        let s = f.score(graphs, &mseeds, &aseeds, &self.config.hop, self.config.ablation, rng)?;
        Ok(f.tape.value(s).data()[0])
    }

    /// Binary cross-entropy of `sigmoid(score)` against `label` with
    /// leave-one-out seeding, returning the loss and adding its gradient to
    /// `grads`.
    pub fn loss_and_grad(
        &self,
        graphs: &ModelGraphs,
        method: EntityId,
        api: EntityId,
        label: f64,
        rng_seed: u64,
        grads: &mut GradBuffer,
    ) -> Result<f64, ModelError> {
        let api_row = graphs.row(api)?;
        let mseeds = SideSeeds::method(graphs, method, Some(api_row))?;
        let aseeds = SideSeeds::api(graphs, api)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut f = Forward::new(&self.params);
        let s = f.score(
            graphs,
            &mseeds,
            &aseeds,
            &self.config.hop,
            self.config.ablation,
            &mut rng,
        )?;
        let loss = f.tape.bce_with_logits(s, label)?;
        let value = f.tape.value(loss).data()[0];
        let g = f.tape.backward(loss)?;
        f.accumulate(&g, grads);
        Ok(value)
    }

    /// Per-triple attention weights of one view's network.
    pub fn attention_weights(&self, view: View, triples: &[Triple]) -> Result<Vec<f64>, ModelError> {
        if triples.is_empty() {
            return Ok(Vec::new());
        }
        let mut f = Forward::new(&self.params);
        let (pi, groups) = f.attention(view, triples)?;
        let w = f.tape.value(pi).data();
        let per: HashMap<Triple, f64> = groups.iter().zip(w).map(|(&(t, c), &wg)| (t, wg / c as f64)).collect();
        Ok(triples.iter().map(|t| per[t]).collect())
    }

    /// Output of one view's attentive network over `triples`.
    pub fn attend(&self, view: View, triples: &[Triple]) -> Result<Vec<f64>, ModelError> {
        let mut f = Forward::new(&self.params);
        let v = f.attend(view, triples)?;
        Ok(f.tape.value(v).data().to_vec())
    }

    pub fn attend_cooc(&self, triples: &[Triple]) -> Result<Vec<f64>, ModelError> {
        self.attend(View::Cooccurrence, triples)
    }

    pub fn attend_hier(&self, triples: &[Triple]) -> Result<Vec<f64>, ModelError> {
        self.attend(View::Hierarchy, triples)
    }

    /// Local-view vector: the API's own row, or the mean over a method's
    /// called APIs without `exclude` (zero when nothing is left).
    pub fn encode_local(
        &self,
        graphs: &ModelGraphs,
        entity: EntityId,
        exclude: Option<EntityId>,
    ) -> Result<Vec<f64>, ModelError> {
        let seeds = match entity.kind {
            EntityKind::Api => SideSeeds::api(graphs, entity)?,
            EntityKind::Method => {
                let ex = exclude.map(|e| graphs.row(e)).transpose()?;
                SideSeeds::method(graphs, entity, ex)?
            }
            _ => {
                return Err(ModelError::WrongKind {
                    expected: "method or api",
                    got: entity,
                })
            }
        };
        let mut f = Forward::new(&self.params);
        let v = f.local(&seeds.local)?;
        Ok(f.tape.value(v).data().to_vec())
    }

    /// Hop vectors of one view seeded at `entity` (a method's called APIs
    /// minus `exclude` for the co-occurrence view, the entity itself
    /// otherwise).
    pub fn encode_view<R: Rng>(
        &self,
        graphs: &ModelGraphs,
        view: View,
        entity: EntityId,
        exclude: Option<EntityId>,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let row = graphs.row(entity)?;
        let seeds = match (view, entity.kind) {
            (View::Cooccurrence, EntityKind::Method) => {
                let ex = exclude.map(|e| graphs.row(e)).transpose()?;
                SideSeeds::method(graphs, entity, ex)?.cooccurrence
            }
            _ => vec![row],
        };
        let mut f = Forward::new(&self.params);
        let hops = f.encode_view(graphs, view, &seeds, &self.config.hop, rng)?;
        Ok(hops.iter().map(|v| f.tape.value(*v).data().to_vec()).collect())
    }
}
