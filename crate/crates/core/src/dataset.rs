//! A split corpus with its graphs, as stored in a graphs directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{baseline_rank, BaselineKind};
use crate::corpus::{Corpus, CorpusError};
use crate::evaluation::{ApiTable, EvalError, MetricsReport, RankedList};
use crate::graphs::{Bucketizer, CallInteractionGraph, CoOccurrenceGraph, GraphBundle, GraphError, HierarchyGraph};
use crate::model::{Model, ModelError, ModelGraphs};
use crate::training::{make_split, Checkpoint, EpochLog, EvalSplit, TestCase, TrainConfig, Trainer, TrainingError};

pub const INTERACTION_FILE: &str = "interaction.bin";
pub const COOCCURRENCE_FILE: &str = "cooc.bin";
pub const HIERARCHY_FILE: &str = "hier.bin";
pub const BUCKETIZER_FILE: &str = "bucketizer.json";
pub const CORPUS_FILE: &str = "corpus.bin";
pub const SPLIT_FILE: &str = "split.json";
pub const BUILD_FILE: &str = "build.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl DatasetError {
    pub fn is_numeric(&self) -> bool {
        match self {
            DatasetError::Training(e) => e.is_numeric(),
            DatasetError::Eval(EvalError::Model(ModelError::Numerics(_))) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct BuildInfo {
    epsilon: usize,
    buckets: u32,
}

/// Training view, held-out split and graphs built from the training view.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub corpus: Corpus,
    pub split: EvalSplit,
    pub graphs: GraphBundle,
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>, DatasetError> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), DatasetError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

fn json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T, DatasetError> {
    serde_json::from_slice(&read(dir, name)?).map_err(|e| DatasetError::Format {
        path: dir.join(name).display().to_string(),
        message: e.to_string(),
    })
}

impl PreparedData {
    /// Splits `corpus` and builds all graphs on the training view.
    pub fn prepare(corpus: &Corpus, epsilon: usize, buckets: u32) -> Result<Self, DatasetError> {
        let (split, view) = make_split(corpus)?;
        let graphs = GraphBundle::build(&view, epsilon, buckets)?;
        Ok(Self {
            corpus: view,
            split,
            graphs,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write(dir, INTERACTION_FILE, &self.graphs.interaction.to_bytes())?;
        write(dir, COOCCURRENCE_FILE, &self.graphs.cooccurrence.to_bytes())?;
        write(dir, HIERARCHY_FILE, &self.graphs.hierarchy.to_bytes())?;
        write(dir, BUCKETIZER_FILE, &pretty(&self.graphs.bucketizer))?;
        write(dir, CORPUS_FILE, &self.corpus.to_bytes())?;
        write(dir, SPLIT_FILE, &pretty(&self.split))?;
        let info = BuildInfo {
            epsilon: self.graphs.epsilon,
            buckets: self.graphs.bucketizer.buckets,
        };
        write(dir, BUILD_FILE, &pretty(&info))
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let info: BuildInfo = json(dir, BUILD_FILE)?;
        let bucketizer: Bucketizer = json(dir, BUCKETIZER_FILE)?;
        let split: EvalSplit = json(dir, SPLIT_FILE)?;
        let corpus = Corpus::from_bytes(&read(dir, CORPUS_FILE)?)?;
        let graphs = GraphBundle {
            interaction: CallInteractionGraph::from_bytes(&read(dir, INTERACTION_FILE)?)?,
            cooccurrence: CoOccurrenceGraph::from_bytes(&read(dir, COOCCURRENCE_FILE)?)?,
            hierarchy: HierarchyGraph::from_bytes(&read(dir, HIERARCHY_FILE)?)?,
            bucketizer,
            epsilon: info.epsilon,
        };
        let data = Self { corpus, split, graphs };
        data.check().map_err(|message| DatasetError::Format {
            path: dir.display().to_string(),
            message,
        })?;
        Ok(data)
    }

    fn check(&self) -> Result<(), String> {
        let u = &self.corpus.universe;
        let g = &self.graphs;
        if g.interaction.method_count() != self.corpus.method_count()
            || g.interaction.api_count() != self.corpus.api_count()
            || g.cooccurrence.api_count() != self.corpus.api_count()
        {
            return Err("graph sizes do not match the corpus".into());
        }
        if g.hierarchy
            .triples()
            .iter()
            .any(|t| !u.contains(t.head) || !u.contains(t.tail))
        {
            return Err("hierarchy refers to unknown entities".into());
        }
        let known =
            |c: &TestCase| u.contains(c.method) && c.context.iter().chain(&c.ground_truth).all(|a| u.contains(*a));
        if !self.split.cases.iter().all(known) {
            return Err("split refers to unknown entities".into());
        }
        Ok(())
    }

    pub fn vocab_hash(&self) -> String {
        self.corpus.universe.fingerprint()
    }

    /// Digest of the serialized graphs and bucketizer.
    pub fn graph_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.graphs.interaction.to_bytes());
        h.update(self.graphs.cooccurrence.to_bytes());
        h.update(self.graphs.hierarchy.to_bytes());
        h.update(serde_json::to_vec(&self.graphs.bucketizer).expect("bucketizer serializes"));
        hex::encode(h.finalize())
    }

    pub fn model_graphs(&self) -> ModelGraphs {
        ModelGraphs::new(&self.corpus, &self.graphs)
    }

    /// Trains a model; `on_epoch` sees every epoch's log entry.
    pub fn train(
        &self,
        graphs: &ModelGraphs,
        config: TrainConfig,
        on_epoch: impl FnMut(&EpochLog),
    ) -> Result<(Checkpoint, Vec<EpochLog>), DatasetError> {
        let mut trainer = Trainer::new(graphs, &self.graphs.interaction, self.split.held_out_pairs(), config)?;
        let log = trainer.run(on_epoch)?;
        Ok((trainer.checkpoint(&self.vocab_hash(), &self.graph_hash()), log))
    }

    pub fn rank(
        &self,
        model: &Model,
        graphs: &ModelGraphs,
        cases: &[TestCase],
        k: usize,
    ) -> Result<Vec<RankedList>, DatasetError> {
        let table = ApiTable::build(model, graphs).map_err(EvalError::from)?;
        Ok(table.rank_all(model, graphs, cases, k).map_err(EvalError::from)?)
    }

    /// Report over `cases` (the held-out split unless given).
    pub fn evaluate(
        &self,
        variant: &str,
        model: &Model,
        graphs: &ModelGraphs,
        cases: Option<&[TestCase]>,
        ks: &[usize],
        metadata: serde_json::Value,
    ) -> Result<MetricsReport, DatasetError> {
        let cases = cases.unwrap_or(&self.split.cases);
        let kmax = ks.iter().copied().max().unwrap_or(0);
        let lists = self.rank(model, graphs, cases, kmax)?;
        Ok(MetricsReport::build(
            variant,
            &lists,
            cases,
            ks,
            &self.graphs.interaction,
            metadata,
        )?)
    }

    pub fn evaluate_baseline(&self, kind: BaselineKind, ks: &[usize]) -> Result<MetricsReport, DatasetError> {
        let kmax = ks.iter().copied().max().unwrap_or(0);
        let lists: Vec<RankedList> = self
            .split
            .cases
            .iter()
            .map(|c| baseline_rank(kind, &self.graphs, Some(c.method), &c.context, kmax))
            .collect();
        let meta = serde_json::json!({ "baseline": kind.as_str() });
        Ok(MetricsReport::build(
            kind.as_str(),
            &lists,
            &self.split.cases,
            ks,
            &self.graphs.interaction,
            meta,
        )?)
    }
}
