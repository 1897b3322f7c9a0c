//! Entity universe, method call sequences, and corpus ingestion.
//!
//! A [`Corpus`] interns every project, package, class, method and API name
//! into a dense per-kind index space. Methods carry their API calls in source
//! order. Each API has exactly one owning class and package ([`ApiMeta`]),
//! either given explicitly or derived from its qualified name.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{DecodeError, Reader, Writer};

const CORPUS_MAGIC: &[u8; 4] = b"MEGC";
const CORPUS_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus contains no methods")]
    Empty,
    #[error("api `{0}` has fewer than 3 dot-separated segments and no explicit class/package")]
    UnqualifiedApi(String),
    #[error("line {line}: duplicate method `{name}` in class `{class}` of project `{project}`")]
    DuplicateMethod {
        line: usize,
        project: String,
        class: String,
        name: String,
    },
    #[error("invalid synthetic corpus parameters: {0}")]
    InvalidSynth(String),
    #[error("corrupt corpus file: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<DecodeError> for CorpusError {
    fn from(e: DecodeError) -> Self {
        CorpusError::Decode(e.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Project,
    Package,
    Class,
    Method,
    Api,
}

impl EntityKind {
    pub const ALL: [EntityKind; 5] = [
        EntityKind::Project,
        EntityKind::Package,
        EntityKind::Class,
        EntityKind::Method,
        EntityKind::Api,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn from_slot(slot: u8) -> Option<Self> {
        Self::ALL.get(slot as usize).copied()
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EntityKind::Project => "project",
            EntityKind::Package => "package",
            EntityKind::Class => "class",
            EntityKind::Method => "method",
            EntityKind::Api => "api",
        };
        f.write_str(s)
    }
}

/// Dense per-kind entity handle. Ordering is by kind, then index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: u32,
}

impl EntityId {
    pub fn new(kind: EntityKind, index: u32) -> Self {
        Self { kind, index }
    }

    pub fn api(index: u32) -> Self {
        Self::new(EntityKind::Api, index)
    }

    pub fn method(index: u32) -> Self {
        Self::new(EntityKind::Method, index)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.kind, self.index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Interner {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&idx) = self.lookup.get(name) {
            return idx;
        }
        let idx = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.lookup.insert(name.to_owned(), idx);
        idx
    }

    fn get(&self, name: &str) -> Option<u32> {
        self.lookup.get(name).copied()
    }
}

/// Interned name tables, one per [`EntityKind`].
///
/// Method names are stored qualified as `project/class/method` so that the
/// name to index mapping stays a bijection across classes and projects.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Universe {
    tables: [Interner; 5],
}

impl Universe {
    pub fn intern(&mut self, kind: EntityKind, name: &str) -> EntityId {
        EntityId::new(kind, self.tables[kind.slot()].intern(name))
    }

    pub fn lookup(&self, kind: EntityKind, name: &str) -> Option<EntityId> {
        self.tables[kind.slot()].get(name).map(|i| EntityId::new(kind, i))
    }

    /// Panics if `id` is not part of this universe.
    pub fn name(&self, id: EntityId) -> &str {
        &self.tables[id.kind.slot()].names[id.index as usize]
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        self.tables[kind.slot()].names.len()
    }

    pub fn total(&self) -> usize {
        self.tables.iter().map(|t| t.names.len()).sum()
    }

    pub fn contains(&self, id: EntityId) -> bool {
        (id.index as usize) < self.count(id.kind)
    }

    /// Offset of each kind in the flat entity row space (project rows first,
    /// API rows last).
    pub fn offsets(&self) -> [usize; 5] {
        let mut out = [0; 5];
        let mut acc = 0;
        for kind in EntityKind::ALL {
            out[kind.slot()] = acc;
            acc += self.count(kind);
        }
        out
    }

    pub fn ids(&self, kind: EntityKind) -> impl Iterator<Item = EntityId> {
        (0..self.count(kind) as u32).map(move |i| EntityId::new(kind, i))
    }

    /// SHA-256 over every name table, hex encoded. Used to tie checkpoints
    /// and graph files to a vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for table in &self.tables {
            h.update((table.names.len() as u64).to_le_bytes());
            for name in &table.names {
                h.update((name.len() as u64).to_le_bytes());
                h.update(name.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn qualified_method_name(project: &str, class: &str, method: &str) -> String {
    format!("{project}/{class}/{method}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodRecord {
    pub method: EntityId,
    pub project: EntityId,
    pub package: EntityId,
    pub class: EntityId,
    pub calls: Vec<EntityId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApiMeta {
    pub api: EntityId,
    pub class: EntityId,
    pub package: EntityId,
}

/// One line of `methods.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodLine {
    pub project: String,
    pub package: String,
    pub class: String,
    pub method: String,
    #[serde(default)]
    pub calls: Vec<String>,
}

/// One line of `apis.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiLine {
    pub api: String,
    pub class: String,
    pub package: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub universe: Universe,
    pub methods: Vec<MethodRecord>,
    /// Indexed by API index: `api_meta[i].api.index == i`.
    pub api_meta: Vec<ApiMeta>,
}

/// Splits a qualified API string into `(class, package)`.
///
/// Only dots before the first `(` count as separators, so parameter lists
/// such as `renameTo(java.io.File)` stay attached to the member name.
pub fn derive_api_owner(api: &str) -> Option<(&str, &str)> {
    let head_end = api.find('(').unwrap_or(api.len());
    let head = &api[..head_end];
    if head.split('.').count() < 3 || head.split('.').any(str::is_empty) {
        return None;
    }
    let class_end = head.rfind('.')?;
    let class = &api[..class_end];
    let package_end = class.rfind('.')?;
    Some((class, &class[..package_end]))
}

impl Corpus {
    /// Ingests line-delimited JSON method records and optional API metadata.
    pub fn ingest<M: BufRead, A: BufRead>(methods: M, apis: Option<A>) -> Result<Corpus, CorpusError> {
        let mut method_lines = Vec::new();
        for (n, line) in methods.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MethodLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            method_lines.push((n + 1, rec));
        }
        let mut api_lines = Vec::new();
        if let Some(apis) = apis {
            for (n, line) in apis.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ApiLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
                api_lines.push(rec);
            }
        }
        Self::from_records(method_lines, api_lines)
    }

    /// Builds a corpus from already-parsed records. Each method carries the
    /// source line number used in error messages.
    pub fn from_records(
        method_lines: Vec<(usize, MethodLine)>,
        api_lines: Vec<ApiLine>,
    ) -> Result<Corpus, CorpusError> {
        if method_lines.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut universe = Universe::default();
        let mut methods = Vec::with_capacity(method_lines.len());
        let mut seen_methods = HashSet::new();
        for (line, rec) in method_lines {
            let project = universe.intern(EntityKind::Project, &rec.project);
            let package = universe.intern(EntityKind::Package, &rec.package);
            let class = universe.intern(EntityKind::Class, &rec.class);
            let qualified = qualified_method_name(&rec.project, &rec.class, &rec.method);
            if !seen_methods.insert(qualified.clone()) {
                return Err(CorpusError::DuplicateMethod {
                    line,
                    project: rec.project,
                    class: rec.class,
                    name: rec.method,
                });
            }
            let method = universe.intern(EntityKind::Method, &qualified);
            let calls = rec
                .calls
                .iter()
                .map(|api| universe.intern(EntityKind::Api, api))
                .collect();
            methods.push(MethodRecord {
                method,
                project,
                package,
                class,
                calls,
            });
        }

        // Explicit metadata wins over name derivation; later lines override
        // earlier ones for the same API.
        let mut explicit: HashMap<u32, (String, String)> = HashMap::new();
        for rec in api_lines {
            let api = universe.intern(EntityKind::Api, &rec.api);
            explicit.insert(api.index, (rec.class, rec.package));
        }

        let mut api_meta = Vec::with_capacity(universe.count(EntityKind::Api));
        for api in universe.ids(EntityKind::Api).collect::<Vec<_>>() {
            let (class_name, package_name) = match explicit.get(&api.index) {
                Some((c, p)) => (c.clone(), p.clone()),
                None => {
                    let name = universe.name(api);
                    let (c, p) = derive_api_owner(name).ok_or_else(|| CorpusError::UnqualifiedApi(name.to_owned()))?;
                    (c.to_owned(), p.to_owned())
                }
            };
            let class = universe.intern(EntityKind::Class, &class_name);
            let package = universe.intern(EntityKind::Package, &package_name);
            api_meta.push(ApiMeta { api, class, package });
        }

        Ok(Corpus {
            universe,
            methods,
            api_meta,
        })
    }

    pub fn api_count(&self) -> usize {
        self.universe.count(EntityKind::Api)
    }

    pub fn method_count(&self) -> usize {
        self.universe.count(EntityKind::Method)
    }

    /// The unqualified method name as it appeared in the input.
    pub fn method_local_name(&self, rec: &MethodRecord) -> &str {
        let full = self.universe.name(rec.method);
        let prefix = self.universe.name(rec.project).len() + self.universe.name(rec.class).len() + 2;
        &full[prefix..]
    }

    /// Writes the corpus back out in the interchange format.
    pub fn write_jsonl<W1: Write, W2: Write>(&self, mut methods: W1, mut apis: W2) -> Result<(), CorpusError> {
        for rec in &self.methods {
            let line = MethodLine {
                project: self.universe.name(rec.project).to_owned(),
                package: self.universe.name(rec.package).to_owned(),
                class: self.universe.name(rec.class).to_owned(),
                method: self.method_local_name(rec).to_owned(),
                calls: rec.calls.iter().map(|&a| self.universe.name(a).to_owned()).collect(),
            };
            serde_json::to_writer(&mut methods, &line).map_err(std::io::Error::from)?;
            methods.write_all(b"\n")?;
        }
        for meta in &self.api_meta {
            let line = ApiLine {
                api: self.universe.name(meta.api).to_owned(),
                class: self.universe.name(meta.class).to_owned(),
                package: self.universe.name(meta.package).to_owned(),
            };
            serde_json::to_writer(&mut apis, &line).map_err(std::io::Error::from)?;
            apis.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.u16(CORPUS_VERSION);
        for table in &self.universe.tables {
            w.u32(table.names.len() as u32);
            for name in &table.names {
                w.str(name);
            }
        }
        w.u32(self.methods.len() as u32);
        for m in &self.methods {
            w.u32(m.method.index);
            w.u32(m.project.index);
            w.u32(m.package.index);
            w.u32(m.class.index);
            w.u32(m.calls.len() as u32);
            for c in &m.calls {
                w.u32(c.index);
            }
        }
        w.u32(self.api_meta.len() as u32);
        for meta in &self.api_meta {
            w.u32(meta.api.index);
            w.u32(meta.class.index);
            w.u32(meta.package.index);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus, CorpusError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CORPUS_MAGIC)?;
        let version = r.u16()?;
        if version != CORPUS_VERSION {
            return Err(CorpusError::Decode(format!("unsupported corpus version {version}")));
        }
        let mut universe = Universe::default();
        for kind in EntityKind::ALL {
            let n = r.len(4)?;
            for _ in 0..n {
                let name = r.str()?;
                let before = universe.count(kind);
                universe.intern(kind, &name);
                if universe.count(kind) == before {
                    return Err(CorpusError::Decode(format!("duplicate {kind} name `{name}`")));
                }
            }
        }
        let check = |kind: EntityKind, idx: u32| -> Result<EntityId, CorpusError> {
            let id = EntityId::new(kind, idx);
            if universe.contains(id) {
                Ok(id)
            } else {
                Err(CorpusError::Decode(format!("dangling {kind} index {idx}")))
            }
        };
        let n_methods = r.len(20)?;
        let mut methods = Vec::with_capacity(n_methods);
        for _ in 0..n_methods {
            let method = check(EntityKind::Method, r.u32()?)?;
            let project = check(EntityKind::Project, r.u32()?)?;
            let package = check(EntityKind::Package, r.u32()?)?;
            let class = check(EntityKind::Class, r.u32()?)?;
            let n_calls = r.len(4)?;
            let mut calls = Vec::with_capacity(n_calls);
            for _ in 0..n_calls {
                calls.push(check(EntityKind::Api, r.u32()?)?);
            }
            methods.push(MethodRecord {
                method,
                project,
                package,
                class,
                calls,
            });
        }
        let n_meta = r.len(12)?;
        if n_meta != universe.count(EntityKind::Api) {
            return Err(CorpusError::Decode(format!(
                "{n_meta} api meta records for {} apis",
                universe.count(EntityKind::Api)
            )));
        }
        let mut api_meta = Vec::with_capacity(n_meta);
        for i in 0..n_meta {
            let api = check(EntityKind::Api, r.u32()?)?;
            if api.index as usize != i {
                return Err(CorpusError::Decode("api meta out of order".into()));
            }
            let class = check(EntityKind::Class, r.u32()?)?;
            let package = check(EntityKind::Package, r.u32()?)?;
            api_meta.push(ApiMeta { api, class, package });
        }
        r.finish()?;
        if methods.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(Corpus {
            universe,
            methods,
            api_meta,
        })
    }
}

/// Knobs for [`synth_corpus_with`]. [`synth_corpus`] uses the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub methods: usize,
    pub apis: usize,
    pub planted_pairs: usize,
    pub seed: u64,
    pub methods_per_project: usize,
    pub min_calls: usize,
    pub max_calls: usize,
    pub plant_probability: f64,
    /// Upper bound on the number of methods carrying any one planted pair.
    pub max_pair_uses: Option<usize>,
    /// Fixed start position of the planted pair; uniform when `None`.
    pub pair_start: Option<usize>,
}

impl SynthConfig {
    pub fn new(methods: usize, apis: usize, planted_pairs: usize, seed: u64) -> Self {
        Self {
            methods,
            apis,
            planted_pairs,
            seed,
            methods_per_project: 5,
            min_calls: 5,
            max_calls: 8,
            plant_probability: 0.9,
            max_pair_uses: None,
            pair_start: None,
        }
    }
}

pub fn synth_corpus(n_methods: usize, n_apis: usize, n_planted_pairs: usize, seed: u64) -> Result<Corpus, CorpusError> {
    synth_corpus_with(&SynthConfig::new(n_methods, n_apis, n_planted_pairs, seed))
}

/// Name of the `k`-th API of a synthetic corpus, given the number of
/// planted pairs. Planted partners `2p` and `2p + 1` share a class.
pub fn synth_api_name(k: usize, planted_pairs: usize) -> String {
    if k < 2 * planted_pairs {
        let member = if k.is_multiple_of(2) { "first" } else { "second" };
        format!("synth.planted.Pair{}.{member}()", k / 2)
    } else {
        let n = k - 2 * planted_pairs;
        format!("synth.noise{}.Noise{}.call{n}()", n / 12, n / 3)
    }
}

/// Generates a deterministic corpus with planted adjacent API pairs.
///
/// Each method picks one planted pair and, with `plant_probability`, places
/// it adjacently in its call sequence; every other position is a uniformly
/// drawn noise API. When there are no noise APIs the pair is always planted.
pub fn synth_corpus_with(cfg: &SynthConfig) -> Result<Corpus, CorpusError> {
    if cfg.methods == 0 {
        return Err(CorpusError::InvalidSynth("need at least one method".into()));
    }
    if cfg.apis < 2 * cfg.planted_pairs || cfg.apis == 0 {
        return Err(CorpusError::InvalidSynth(format!(
            "{} apis cannot hold {} planted pairs",
            cfg.apis, cfg.planted_pairs
        )));
    }
    if cfg.min_calls < 2 || cfg.min_calls > cfg.max_calls {
        return Err(CorpusError::InvalidSynth(format!(
            "call length range {}..={} is invalid",
            cfg.min_calls, cfg.max_calls
        )));
    }
    if cfg.methods_per_project == 0 || !(0.0..=1.0).contains(&cfg.plant_probability) {
        return Err(CorpusError::InvalidSynth(
            "methods_per_project must be >= 1 and plant_probability in [0, 1]".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.apis).map(|k| synth_api_name(k, cfg.planted_pairs)).collect();
    let noise: Vec<usize> = (2 * cfg.planted_pairs..cfg.apis).collect();
    let mut uses = vec![0usize; cfg.planted_pairs];

    let mut lines = Vec::with_capacity(cfg.methods);
    for m in 0..cfg.methods {
        let len = rng.gen_range(cfg.min_calls..=cfg.max_calls);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        let plant = noise.is_empty() || rng.gen_bool(cfg.plant_probability);
        let open: Vec<usize> = (0..cfg.planted_pairs)
            .filter(|&p| cfg.max_pair_uses.is_none_or(|cap| uses[p] < cap))
            .collect();
        let pair = if plant { open.choose(&mut rng).copied() } else { None };
        let start = pair.map(|_| match cfg.pair_start {
            Some(s) => s.min(len - 2),
            None => rng.gen_range(0..=len - 2),
        });
        let mut pos = 0;
        while pos < len {
            if let (Some(p), Some(s)) = (pair, start) {
                if pos == s {
                    seq.push(2 * p);
                    seq.push(2 * p + 1);
                    pos += 2;
                    continue;
                }
            }
            let api = if noise.is_empty() {
                // only reachable without a plant slot when len > 2
                2 * pair.unwrap_or(0) + (pos % 2)
            } else {
                noise[rng.gen_range(0..noise.len())]
            };
            seq.push(api);
            pos += 1;
        }
        if let Some(p) = pair {
            uses[p] += 1;
        }
        let project = m / cfg.methods_per_project;
        lines.push((
            m + 1,
            MethodLine {
                project: format!("synth.proj{project}"),
                package: format!("synth.proj{project}.app"),
                class: format!("synth.proj{project}.app.Worker{m}"),
                method: format!("run{m}()"),
                calls: seq.iter().map(|&k| names[k].clone()).collect(),
            },
        ));
    }
    // Every API is part of the universe even if never drawn.
    let api_lines = names
        .iter()
        .map(|name| {
            let (class, package) = derive_api_owner(name).expect("synthetic names are qualified");
            ApiLine {
                api: name.clone(),
                class: class.to_owned(),
                package: package.to_owned(),
            }
        })
        .collect();
    Corpus::from_records(lines, api_lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest_str(methods: &str, apis: Option<&str>) -> Result<Corpus, CorpusError> {
        Corpus::ingest(methods.as_bytes(), apis.map(str::as_bytes))
    }

    #[test]
    fn single_line_interning() {
        let c = ingest_str(
            r#"{"project":"P","package":"pkg","class":"C","method":"m","calls":["java.io.File.exists()"]}"#,
            None,
        )
        .unwrap();
        let u = &c.universe;
        assert_eq!(u.count(EntityKind::Project), 1);
        assert_eq!(u.count(EntityKind::Package), 2);
        assert_eq!(u.count(EntityKind::Class), 2);
        assert_eq!(u.count(EntityKind::Method), 1);
        assert_eq!(u.count(EntityKind::Api), 1);
        assert_eq!(u.name(EntityId::new(EntityKind::Package, 0)), "pkg");
        assert_eq!(u.name(EntityId::new(EntityKind::Package, 1)), "java.io");
        assert_eq!(u.name(EntityId::new(EntityKind::Class, 1)), "java.io.File");
        let meta = c.api_meta[0];
        assert_eq!(u.name(meta.class), "java.io.File");
        assert_eq!(u.name(meta.package), "java.io");
        assert_eq!(c.method_local_name(&c.methods[0]), "m");
    }

    #[test]
    fn empty_calls_accepted() {
        let c = ingest_str(
            r#"{"project":"P","package":"p","class":"C","method":"m","calls":[]}"#,
            None,
        )
        .unwrap();
        assert!(c.methods[0].calls.is_empty());
        assert_eq!(c.api_count(), 0);
    }

    #[test]
    fn shared_api_interned_once() {
        let c = ingest_str(
            "{\"project\":\"P\",\"package\":\"p\",\"class\":\"C\",\"method\":\"a\",\"calls\":[\"x.y.Z.f()\"]}\n\
             {\"project\":\"P\",\"package\":\"p\",\"class\":\"C\",\"method\":\"b\",\"calls\":[\"x.y.Z.f()\",\"x.y.Z.f()\"]}",
            None,
        )
        .unwrap();
        assert_eq!(c.methods[0].calls[0], c.methods[1].calls[0]);
        assert_eq!(c.methods[1].calls, vec![EntityId::api(0); 2]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = ingest_str(
            "{\"project\":\"P\",\"package\":\"p\",\"class\":\"C\",\"method\":\"a\",\"calls\":[]}\n{not json",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(ingest_str("\n\n", None), Err(CorpusError::Empty)));
    }

    #[test]
    fn unqualified_api_rejected_unless_explicit() {
        let line = r#"{"project":"P","package":"p","class":"C","method":"a","calls":["File.exists()"]}"#;
        match ingest_str(line, None) {
            Err(CorpusError::UnqualifiedApi(name)) => assert_eq!(name, "File.exists()"),
            other => panic!("unexpected {other:?}"),
        }
        let c = ingest_str(
            line,
            Some(r#"{"api":"File.exists()","class":"java.io.File","package":"java.io"}"#),
        )
        .unwrap();
        assert_eq!(c.universe.name(c.api_meta[0].class), "java.io.File");
    }

    #[test]
    fn duplicate_method_rejected() {
        let line = r#"{"project":"P","package":"p","class":"C","method":"a","calls":[]}"#;
        let err = ingest_str(&format!("{line}\n{line}"), None).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateMethod { line: 2, .. }));
    }

    #[test]
    fn owner_derivation_ignores_parameter_dots() {
        assert_eq!(
            derive_api_owner("java.io.File.renameTo(java.io.File)"),
            Some(("java.io.File", "java.io"))
        );
        assert_eq!(derive_api_owner("a.b()"), None);
        assert_eq!(derive_api_owner("a..b.c"), None);
    }

    #[test]
    fn binary_roundtrip_and_truncation() {
        let c = synth_corpus(12, 10, 2, 3).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"MEGC");
        assert_eq!(Corpus::from_bytes(&bytes).unwrap(), c);
        for cut in [0, 3, 6, bytes.len() / 2, bytes.len() - 1] {
            assert!(Corpus::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let c = synth_corpus(9, 12, 3, 11).unwrap();
        let (mut m, mut a) = (Vec::new(), Vec::new());
        c.write_jsonl(&mut m, &mut a).unwrap();
        let back = Corpus::ingest(&m[..], Some(&a[..])).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_corpus(50, 30, 5, 1).unwrap().to_bytes();
        let b = synth_corpus(50, 30, 5, 1).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, synth_corpus(50, 30, 5, 2).unwrap().to_bytes());
    }

    #[test]
    fn synth_single_method_contains_both_planted() {
        let c = synth_corpus(1, 2, 1, 7).unwrap();
        assert_eq!(c.methods.len(), 1);
        let calls = &c.methods[0].calls;
        assert!(calls.contains(&EntityId::api(0)) || calls.contains(&EntityId::api(1)));
        let a = c.universe.lookup(EntityKind::Api, &synth_api_name(0, 1)).unwrap();
        let b = c.universe.lookup(EntityKind::Api, &synth_api_name(1, 1)).unwrap();
        assert!(calls.contains(&a) && calls.contains(&b));
    }

    #[test]
    fn synth_planted_pair_adjacency_rate() {
        for seed in 0..5 {
            let c = synth_corpus(200, 20, 1, seed).unwrap();
            let a = c.universe.lookup(EntityKind::Api, &synth_api_name(0, 1)).unwrap();
            let b = c.universe.lookup(EntityKind::Api, &synth_api_name(1, 1)).unwrap();
            let mut containing = 0;
            let mut adjacent = 0;
            for m in &c.methods {
                if !(m.calls.contains(&a) || m.calls.contains(&b)) {
                    continue;
                }
                containing += 1;
                let pos_a: Vec<_> = (0..m.calls.len()).filter(|&p| m.calls[p] == a).collect();
                let pos_b: Vec<_> = (0..m.calls.len()).filter(|&p| m.calls[p] == b).collect();
                if pos_a.iter().any(|&p| pos_b.iter().any(|&q| p.abs_diff(q) <= 1)) {
                    adjacent += 1;
                }
            }
            assert!(containing > 0);
            assert!(adjacent as f64 >= 0.8 * containing as f64, "{adjacent}/{containing}");
        }
    }

    #[test]
    fn synth_partners_share_class() {
        let c = synth_corpus(10, 10, 3, 4).unwrap();
        for p in 0..3 {
            let a = c.universe.lookup(EntityKind::Api, &synth_api_name(2 * p, 3)).unwrap();
            let b = c
                .universe
                .lookup(EntityKind::Api, &synth_api_name(2 * p + 1, 3))
                .unwrap();
            assert_eq!(c.api_meta[a.index as usize].class, c.api_meta[b.index as usize].class);
        }
    }

    #[test]
    fn synth_rejects_bad_parameters() {
        assert!(synth_corpus(0, 10, 1, 0).is_err());
        assert!(synth_corpus(5, 3, 2, 0).is_err());
    }

    #[test]
    fn fingerprint_tracks_names() {
        let a = synth_corpus(5, 6, 1, 0).unwrap();
        let b = synth_corpus(5, 7, 1, 0).unwrap();
        assert_eq!(a.universe.fingerprint(), a.clone().universe.fingerprint());
        assert_ne!(a.universe.fingerprint(), b.universe.fingerprint());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn api_name() -> impl Strategy<Value = String> {
            (0u8..4, 0u8..4, 0u8..6).prop_map(|(p, c, m)| format!("org.p{p}.C{c}.m{m}()"))
        }

        proptest! {
            #[test]
            fn interning_decodes_and_prefixes(
                rows in prop::collection::vec(
                    (0u8..3, 0u8..3, prop::collection::vec(api_name(), 0..6)),
                    1..12,
                )
            ) {
                let lines: Vec<_> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, (p, c, calls))| {
                        (i + 1, MethodLine {
                            project: format!("P{p}"),
                            package: "pk".into(),
                            class: format!("K{c}"),
                            method: format!("m{i}"),
                            calls: calls.clone(),
                        })
                    })
                    .collect();
                let c = Corpus::from_records(lines.clone(), vec![]).unwrap();
                let again = Corpus::from_records(lines, vec![]).unwrap();
                prop_assert_eq!(c.to_bytes(), again.to_bytes());
                for kind in EntityKind::ALL {
                    for id in c.universe.ids(kind) {
                        prop_assert_eq!(c.universe.lookup(kind, c.universe.name(id)), Some(id));
                    }
                }
                for meta in &c.api_meta {
                    let api = c.universe.name(meta.api);
                    let class = c.universe.name(meta.class);
                    let package = c.universe.name(meta.package);
                    prop_assert!(api.starts_with(class));
                    prop_assert!(class.starts_with(package));
                }
            }
        }
    }
}
