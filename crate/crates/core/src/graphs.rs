//! The three heterogeneous graphs built from a corpus: method/API call
//! interactions, windowed API co-occurrence with bucketized edge types, and
//! the belong-to hierarchy.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::binio::{DecodeError, Reader, Writer};
use crate::corpus::{Corpus, EntityId, EntityKind};

const GRAPH_MAGIC: &[u8; 4] = b"MEGG";
const GRAPH_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("co-occurrence graph has no edges")]
    EmptyGraph,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("corrupt graph file: {0}")]
    Decode(String),
}

impl From<DecodeError> for GraphError {
    fn from(e: DecodeError) -> Self {
        GraphError::Decode(e.0)
    }
}

/// Bipartite method/API graph with set semantics: duplicate calls collapse.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallInteractionGraph {
    method_apis: Vec<Vec<u32>>,
    api_methods: Vec<Vec<u32>>,
}

impl CallInteractionGraph {
    pub fn build(corpus: &Corpus) -> Self {
        let mut method_apis = vec![Vec::new(); corpus.method_count()];
        let mut api_methods = vec![Vec::new(); corpus.api_count()];
        for rec in &corpus.methods {
            let mut apis: Vec<u32> = rec.calls.iter().map(|a| a.index).collect();
            apis.sort_unstable();
            apis.dedup();
            for &a in &apis {
                api_methods[a as usize].push(rec.method.index);
            }
            method_apis[rec.method.index as usize] = apis;
        }
        for list in &mut api_methods {
            list.sort_unstable();
        }
        Self {
            method_apis,
            api_methods,
        }
    }

    /// Sorted API indices called by `method`.
    pub fn apis_of(&self, method: u32) -> &[u32] {
        &self.method_apis[method as usize]
    }

    /// Sorted method indices calling `api`.
    pub fn methods_of(&self, api: u32) -> &[u32] {
        &self.api_methods[api as usize]
    }

    pub fn contains(&self, method: u32, api: u32) -> bool {
        self.method_apis
            .get(method as usize)
            .is_some_and(|l| l.binary_search(&api).is_ok())
    }

    pub fn method_count(&self) -> usize {
        self.method_apis.len()
    }

    pub fn api_count(&self) -> usize {
        self.api_methods.len()
    }

    pub fn edge_count(&self) -> usize {
        self.method_apis.iter().map(Vec::len).sum()
    }

    /// All `(method, api)` edges in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.method_apis
            .iter()
            .enumerate()
            .flat_map(|(m, apis)| apis.iter().map(move |&a| (m as u32, a)))
    }

    /// Number of distinct methods calling each API.
    pub fn api_frequency(&self, api: u32) -> usize {
        self.api_methods[api as usize].len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = header(GraphKind::Interaction);
        w.u32(self.method_apis.len() as u32);
        w.u32(self.api_methods.len() as u32);
        w.u64(self.edge_count() as u64);
        for (m, a) in self.edges() {
            w.u32(m);
            w.u32(a);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, GraphKind::Interaction)?;
        let n_methods = r.u32()? as usize;
        let n_apis = r.u32()? as usize;
        let n_edges = r.u64()? as usize;
        if n_edges.saturating_mul(8) > r.remaining() {
            return Err(GraphError::Decode("edge count exceeds payload".into()));
        }
        let mut method_apis = vec![Vec::new(); n_methods];
        let mut api_methods = vec![Vec::new(); n_apis];
        let mut prev = None;
        for _ in 0..n_edges {
            let (m, a) = (r.u32()?, r.u32()?);
            if m as usize >= n_methods || a as usize >= n_apis || prev >= Some((m, a)) {
                return Err(GraphError::Decode(format!("bad interaction edge ({m}, {a})")));
            }
            prev = Some((m, a));
            method_apis[m as usize].push(a);
            api_methods[a as usize].push(m);
        }
        r.finish()?;
        for l in &mut api_methods {
            l.sort_unstable();
        }
        Ok(Self {
            method_apis,
            api_methods,
        })
    }
}

/// One undirected co-occurrence edge, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoEdge {
    pub a: u32,
    pub b: u32,
    pub weight: u32,
    pub bucket: Option<u32>,
}

/// Undirected weighted API/API graph.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoOccurrenceGraph {
    api_count: usize,
    edges: Vec<CoEdge>,
    index: HashMap<(u32, u32), usize>,
}

impl CoOccurrenceGraph {
    /// Counts every ordered position pair `(p, q)` with `0 < q - p <= epsilon`
    /// and distinct APIs, accumulated over all sequences.
    pub fn build(corpus: &Corpus, epsilon: usize) -> Result<Self, GraphError> {
        if epsilon == 0 {
            return Err(GraphError::InvalidParameter("epsilon must be >= 1".into()));
        }
        let mut weights: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for rec in &corpus.methods {
            let calls = &rec.calls;
            for p in 0..calls.len() {
                for q in p + 1..calls.len().min(p + epsilon + 1) {
                    let (x, y) = (calls[p].index, calls[q].index);
                    if x == y {
                        continue;
                    }
                    *weights.entry((x.min(y), x.max(y))).or_insert(0) += 1;
                }
            }
        }
        let edges = weights
            .into_iter()
            .map(|((a, b), weight)| CoEdge {
                a,
                b,
                weight,
                bucket: None,
            })
            .collect();
        Ok(Self::from_edges(corpus.api_count(), edges))
    }

    fn from_edges(api_count: usize, edges: Vec<CoEdge>) -> Self {
        let index = edges.iter().enumerate().map(|(k, e)| ((e.a, e.b), k)).collect();
        Self {
            api_count,
            edges,
            index,
        }
    }

    pub fn edges(&self) -> &[CoEdge] {
        &self.edges
    }

    pub fn api_count(&self) -> usize {
        self.api_count
    }

    fn edge(&self, i: u32, j: u32) -> Option<&CoEdge> {
        self.index.get(&(i.min(j), i.max(j))).map(|&k| &self.edges[k])
    }

    /// Raw co-occurrence count; 0 when the APIs never co-occur.
    pub fn weight(&self, i: u32, j: u32) -> u32 {
        self.edge(i, j).map_or(0, |e| e.weight)
    }

    pub fn bucket(&self, i: u32, j: u32) -> Option<u32> {
        self.edge(i, j).and_then(|e| e.bucket)
    }

    pub fn is_bucketized(&self) -> bool {
        !self.edges.is_empty() && self.edges.iter().all(|e| e.bucket.is_some())
    }

    /// Assigns an equidistant bucket to every edge and returns the bucketizer.
    pub fn bucketize(&mut self, buckets: u32) -> Result<Bucketizer, GraphError> {
        let b = Bucketizer::fit(self, buckets)?;
        for e in &mut self.edges {
            e.bucket = Some(b.bucket(e.weight));
        }
        Ok(b)
    }

    /// Directed adjacency: for each API, `(bucket, neighbour)` pairs in both
    /// directions of every undirected edge. Requires a bucketized graph.
    pub fn directed_neighbors(&self) -> Vec<Vec<(u32, u32)>> {
        let mut out = vec![Vec::new(); self.api_count];
        for e in &self.edges {
            let f = e.bucket.unwrap_or(0);
            out[e.a as usize].push((f, e.b));
            out[e.b as usize].push((f, e.a));
        }
        for l in &mut out {
            l.sort_unstable_by_key(|&(f, n)| (n, f));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = header(GraphKind::CoOccurrence);
        w.u32(self.api_count as u32);
        w.u8(self.is_bucketized() as u8);
        w.u64(self.edges.len() as u64);
        for e in &self.edges {
            w.u32(e.a);
            w.u32(e.b);
            w.u32(e.weight);
            w.u32(e.bucket.unwrap_or(0));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, GraphKind::CoOccurrence)?;
        let api_count = r.u32()? as usize;
        let bucketed = r.u8()? != 0;
        let n = r.u64()? as usize;
        if n.saturating_mul(16) > r.remaining() {
            return Err(GraphError::Decode("edge count exceeds payload".into()));
        }
        let mut edges = Vec::with_capacity(n);
        let mut prev = None;
        for _ in 0..n {
            let (a, b, weight, bucket) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            if a >= b || b as usize >= api_count || weight == 0 || prev >= Some((a, b)) {
                return Err(GraphError::Decode(format!("bad co-occurrence edge ({a}, {b})")));
            }
            prev = Some((a, b));
            edges.push(CoEdge {
                a,
                b,
                weight,
                bucket: bucketed.then_some(bucket),
            });
        }
        r.finish()?;
        Ok(Self::from_edges(api_count, edges))
    }
}

/// Equidistant discretization of co-occurrence counts into `buckets` types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucketizer {
    pub f_min: u32,
    pub f_max: u32,
    pub buckets: u32,
}

impl Bucketizer {
    pub fn fit(graph: &CoOccurrenceGraph, buckets: u32) -> Result<Self, GraphError> {
        if buckets == 0 {
            return Err(GraphError::InvalidParameter("bucket count must be >= 1".into()));
        }
        let f_min = graph
            .edges
            .iter()
            .map(|e| e.weight)
            .min()
            .ok_or(GraphError::EmptyGraph)?;
        let f_max = graph
            .edges
            .iter()
            .map(|e| e.weight)
            .max()
            .ok_or(GraphError::EmptyGraph)?;
        Ok(Self { f_min, f_max, buckets })
    }

    /// `min(T - 1, floor((f - f_min) / w))` with `w = (f_max - f_min + 1) / T`.
    /// Weights outside the fitted range are clamped. `f_max` lands in bucket
    /// `T - 1` whenever `T <= f_max - f_min + 1`.
    pub fn bucket(&self, f: u32) -> u32 {
        let f = f.clamp(self.f_min, self.f_max);
        let width = (self.f_max - self.f_min + 1) as f64 / self.buckets as f64;
        let b = ((f - self.f_min) as f64 / width).floor() as u32;
        b.min(self.buckets - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    BelongToClass,
    BelongToProject,
    BelongToPackage,
}

impl Relation {
    pub const ALL: [Relation; 3] = [
        Relation::BelongToClass,
        Relation::BelongToProject,
        Relation::BelongToPackage,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Allowed `(head kind, tail kind)` pairs for this relation.
    pub fn accepts(self, head: EntityKind, tail: EntityKind) -> bool {
        use EntityKind::*;
        matches!(
            (head, self, tail),
            (Method, Relation::BelongToClass, Class)
                | (Api, Relation::BelongToClass, Class)
                | (Class, Relation::BelongToProject, Project)
                | (Class, Relation::BelongToPackage, Package)
        )
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::BelongToClass => "belong-to-class",
            Relation::BelongToProject => "belong-to-project",
            Relation::BelongToPackage => "belong-to-package",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HierTriple {
    pub head: EntityId,
    pub relation: Relation,
    pub tail: EntityId,
}

/// Directed belong-to triples in first-emission order, without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HierarchyGraph {
    triples: Vec<HierTriple>,
}

impl HierarchyGraph {
    pub fn build(corpus: &Corpus) -> Self {
        let mut seen = HashSet::new();
        let mut triples = Vec::new();
        let mut push = |head, relation, tail| {
            let t = HierTriple { head, relation, tail };
            if seen.insert(t) {
                triples.push(t);
            }
        };
        for rec in &corpus.methods {
            push(rec.method, Relation::BelongToClass, rec.class);
            push(rec.class, Relation::BelongToProject, rec.project);
        }
        for meta in &corpus.api_meta {
            push(meta.api, Relation::BelongToClass, meta.class);
            push(meta.class, Relation::BelongToPackage, meta.package);
        }
        Self { triples }
    }

    pub fn triples(&self) -> &[HierTriple] {
        &self.triples
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = header(GraphKind::Hierarchy);
        w.u64(self.triples.len() as u64);
        for t in &self.triples {
            w.u8(t.head.kind.slot() as u8);
            w.u32(t.head.index);
            w.u8(t.relation.index() as u8);
            w.u8(t.tail.kind.slot() as u8);
            w.u32(t.tail.index);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut r = Reader::new(bytes);
        read_header(&mut r, GraphKind::Hierarchy)?;
        let n = r.u64()? as usize;
        if n.saturating_mul(11) > r.remaining() {
            return Err(GraphError::Decode("triple count exceeds payload".into()));
        }
        let mut triples = Vec::with_capacity(n);
        for _ in 0..n {
            let bad = || GraphError::Decode("bad hierarchy triple".into());
            let hk = EntityKind::from_slot(r.u8()?).ok_or_else(bad)?;
            let hi = r.u32()?;
            let rel = *Relation::ALL.get(r.u8()? as usize).ok_or_else(bad)?;
            let tk = EntityKind::from_slot(r.u8()?).ok_or_else(bad)?;
            let ti = r.u32()?;
            if !rel.accepts(hk, tk) {
                return Err(bad());
            }
            triples.push(HierTriple {
                head: EntityId::new(hk, hi),
                relation: rel,
                tail: EntityId::new(tk, ti),
            });
        }
        r.finish()?;
        Ok(Self { triples })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GraphKind {
    Interaction = 1,
    CoOccurrence = 2,
    Hierarchy = 3,
}

fn header(kind: GraphKind) -> Writer {
    let mut w = Writer::new();
    w.bytes(GRAPH_MAGIC);
    w.u16(GRAPH_VERSION);
    w.u8(kind as u8);
    w
}

fn read_header(r: &mut Reader<'_>, kind: GraphKind) -> Result<(), GraphError> {
    r.expect_magic(GRAPH_MAGIC)?;
    let version = r.u16()?;
    if version != GRAPH_VERSION {
        return Err(GraphError::Decode(format!("unsupported graph version {version}")));
    }
    let got = r.u8()?;
    if got != kind as u8 {
        return Err(GraphError::Decode(format!(
            "graph kind {got} where {} was expected",
            kind as u8
        )));
    }
    Ok(())
}

/// All three graphs plus the bucketizer used for the co-occurrence edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphBundle {
    pub interaction: CallInteractionGraph,
    pub cooccurrence: CoOccurrenceGraph,
    pub hierarchy: HierarchyGraph,
    pub bucketizer: Bucketizer,
    pub epsilon: usize,
}

impl GraphBundle {
    pub fn build(corpus: &Corpus, epsilon: usize, buckets: u32) -> Result<Self, GraphError> {
        let (interaction, (cooc, hierarchy)) = rayon::join(
            || CallInteractionGraph::build(corpus),
            || {
                rayon::join(
                    || CoOccurrenceGraph::build(corpus, epsilon),
                    || HierarchyGraph::build(corpus),
                )
            },
        );
        let mut cooccurrence = cooc?;
        let bucketizer = cooccurrence.bucketize(buckets)?;
        Ok(Self {
            interaction,
            cooccurrence,
            hierarchy,
            bucketizer,
            epsilon,
        })
    }
}
