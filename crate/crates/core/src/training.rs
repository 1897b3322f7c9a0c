//! Train/test protocol, example generation, the training loop and
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{DecodeError, Reader, Writer};
use crate::corpus::{Corpus, EntityId};
use crate::graphs::CallInteractionGraph;
use crate::model::{
    derive_seed, Ablation, GradBuffer, HopConfig, Model, ModelConfig, ModelError, ModelGraphs, ModelParams,
};
use crate::numerics::{AdamConfig, AdamState, NumericsError, Tensor};

/// Number of leading calls that stay visible to the recommender.
pub const CONTEXT_LEN: usize = 4;
/// Examples per parallel work unit; fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 32;

const TAG_EXAMPLES: u64 = 0xe8;
const TAG_STEP: u64 = 0x57;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("no project has a method with at least {} calls and a non-empty remainder", CONTEXT_LEN + 1)]
    NoTestMethods,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainingError {
    /// Whether the failure comes from arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainingError::NonFiniteLoss { .. }
                | TrainingError::Numerics(_)
                | TrainingError::Model(ModelError::Numerics(_))
        )
    }
}

impl From<DecodeError> for TrainingError {
    fn from(e: DecodeError) -> Self {
        TrainingError::Checkpoint(e.0)
    }
}

/// One held-out query: the visible prefix of a method and what follows it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub method: EntityId,
    /// The first four calls, in order (duplicates kept).
    pub context: Vec<EntityId>,
    /// Remaining calls, deduplicated in first-seen order, minus the context.
    pub ground_truth: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalSplit {
    pub cases: Vec<TestCase>,
}

impl EvalSplit {
    /// Ground-truth API indices per test method index.
    pub fn held_out_pairs(&self) -> BTreeMap<u32, BTreeSet<u32>> {
        self.cases
            .iter()
            .map(|c| (c.method.index, c.ground_truth.iter().map(|g| g.index).collect()))
            .collect()
    }
}

fn case_for(method: EntityId, calls: &[EntityId]) -> Option<TestCase> {
    if calls.len() < CONTEXT_LEN + 1 {
        return None;
    }
    let context = calls[..CONTEXT_LEN].to_vec();
    let mut seen: BTreeSet<EntityId> = context.iter().copied().collect();
    let ground_truth: Vec<EntityId> = calls[CONTEXT_LEN..]
        .iter()
        .copied()
        .filter(|c| seen.insert(*c))
        .collect();
    (!ground_truth.is_empty()).then_some(TestCase {
        method,
        context,
        ground_truth,
    })
}

/// Picks one test method per project: the last method in input order with
/// at least five calls and a non-empty ground truth. Returns the split and
/// the training view, in which each test method keeps only its context.
pub fn make_split(corpus: &Corpus) -> Result<(EvalSplit, Corpus), TrainingError> {
    let mut last: BTreeMap<EntityId, usize> = BTreeMap::new();
    for (pos, rec) in corpus.methods.iter().enumerate() {
        if case_for(rec.method, &rec.calls).is_some() {
            last.insert(rec.project, pos);
        }
    }
    if last.is_empty() {
        return Err(TrainingError::NoTestMethods);
    }
    let mut chosen: Vec<usize> = last.into_values().collect();
    chosen.sort_unstable();
    let mut view = corpus.clone();
    let cases = chosen
        .into_iter()
        .map(|pos| {
            let rec = &mut view.methods[pos];
            let case = case_for(rec.method, &rec.calls).expect("qualified above");
            rec.calls.truncate(CONTEXT_LEN);
            case
        })
        .collect();
    Ok((EvalSplit { cases }, view))
}

/// Queries over training methods themselves (prefix as context, the rest as
/// ground truth), for measuring how well the training data is fitted.
pub fn held_in_queries(train_view: &Corpus, exclude: &EvalSplit) -> Vec<TestCase> {
    let skip: BTreeSet<EntityId> = exclude.cases.iter().map(|c| c.method).collect();
    train_view
        .methods
        .iter()
        .filter(|r| !skip.contains(&r.method))
        .filter_map(|r| case_for(r.method, &r.calls))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub method: u32,
    pub api: u32,
    pub label: f64,
}

/// Every training edge as a positive, each followed by `neg_ratio`
/// negatives drawn uniformly from APIs the method neither calls nor has in
/// `excluded`. Methods with no admissible negative get none.
pub fn make_examples<R: Rng>(
    interaction: &CallInteractionGraph,
    neg_ratio: usize,
    excluded: &BTreeMap<u32, BTreeSet<u32>>,
    rng: &mut R,
) -> Vec<TrainExample> {
    let n_apis = interaction.api_count() as u32;
    let empty = BTreeSet::new();
    let mut out = Vec::with_capacity(interaction.edge_count() * (1 + neg_ratio));
    let mut warned = BTreeSet::new();
    for m in 0..interaction.method_count() as u32 {
        let called = interaction.apis_of(m);
        if called.is_empty() {
            continue;
        }
        let banned = excluded.get(&m).unwrap_or(&empty);
        let allowed = |a: u32| called.binary_search(&a).is_err() && !banned.contains(&a);
        let admissible =
            n_apis as usize - called.len() - banned.iter().filter(|&&b| called.binary_search(&b).is_err()).count();
        for &api in called {
            out.push(TrainExample {
                method: m,
                api,
                label: 1.0,
            });
            if admissible == 0 {
                if warned.insert(m) {
                    log::warn!("method {m} calls every candidate API; no negatives drawn");
                }
                continue;
            }
            for _ in 0..neg_ratio {
                let mut pick = None;
                for _ in 0..64 {
                    let a = rng.gen_range(0..n_apis);
                    if allowed(a) {
                        pick = Some(a);
                        break;
                    }
                }
                let a = pick.unwrap_or_else(|| {
                    let pool: Vec<u32> = (0..n_apis).filter(|&a| allowed(a)).collect();
                    pool[rng.gen_range(0..pool.len())]
                });
                out.push(TrainExample {
                    method: m,
                    api: a,
                    label: 0.0,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    Xavier,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub hops: usize,
    pub set_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub neg_ratio: usize,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hops: 1,
            set_size: 16,
            lr: 0.002,
            l2: 1e-5,
            batch: 1024,
            epochs: 40,
            seed: 42,
            ablation: Ablation::None,
            neg_ratio: 1,
            init: Init::Xavier,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.into()));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.set_size == 0 {
            return bad("set_size must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if self.neg_ratio == 0 {
            return bad("neg_ratio must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("lr must be positive and l2 non-negative");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hop: HopConfig {
                hops: self.hops,
                set_size: self.set_size,
                seed: self.seed,
            },
            ablation: self.ablation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Loss and summed gradient of a slice of examples, evaluated in fixed-size
/// chunks in parallel and combined in chunk order.
pub fn batch_gradient(
    model: &Model,
    graphs: &ModelGraphs,
    examples: &[TrainExample],
    seeds: &[u64],
) -> Result<(f64, GradBuffer), ModelError> {
    let parts = examples
        .par_chunks(CHUNK)
        .zip(seeds.par_chunks(CHUNK))
        .map(|(chunk, seeds)| {
            let mut g = GradBuffer::new(&model.params);
            let mut loss = 0.0;
            for (ex, &s) in chunk.iter().zip(seeds) {
                loss += model.loss_and_grad(
                    graphs,
                    EntityId::method(ex.method),
                    EntityId::api(ex.api),
                    ex.label,
                    s,
                    &mut g,
                )?;
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut total = GradBuffer::new(&model.params);
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.merge(&g);
    }
    Ok((loss, total))
}

pub struct Trainer<'g> {
    pub model: Model,
    graphs: &'g ModelGraphs,
    interaction: &'g CallInteractionGraph,
    excluded: BTreeMap<u32, BTreeSet<u32>>,
    config: TrainConfig,
    adam: AdamState,
    epoch: usize,
}

impl<'g> Trainer<'g> {
    /// `excluded` lists, per method, APIs never to be used as negatives
    /// (the held-out ground truth of test methods).
    pub fn new(
        graphs: &'g ModelGraphs,
        interaction: &'g CallInteractionGraph,
        excluded: BTreeMap<u32, BTreeSet<u32>>,
        config: TrainConfig,
    ) -> Result<Self, TrainingError> {
        config.validate()?;
        let (n, t) = (graphs.entity_count(), graphs.bucket_count());
        let params = match config.init {
            Init::Xavier => ModelParams::xavier(n, t, config.dim, config.seed),
            Init::Zeros => ModelParams::zeros(n, t, config.dim),
        };
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                weight_decay: config.l2,
                ..AdamConfig::default()
            },
            &sizes,
        );
        Ok(Self {
            model: Model::new(params, config.model_config())?,
            graphs,
            interaction,
            excluded,
            config,
            adam,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// The shuffled example stream of the next epoch.
    pub fn epoch_examples(&self) -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, TAG_EXAMPLES, self.epoch as u64]));
        let mut ex = make_examples(self.interaction, self.config.neg_ratio, &self.excluded, &mut rng);
        ex.shuffle(&mut rng);
        ex
    }

    /// Mean loss of one batch under the current parameters, without updating.
    pub fn batch_loss(&self, examples: &[TrainExample]) -> Result<f64, ModelError> {
        let seeds = self.step_seeds(0, examples.len());
        let (loss, _) = batch_gradient(&self.model, self.graphs, examples, &seeds)?;
        Ok(loss / examples.len() as f64)
    }

    fn step_seeds(&self, start: usize, n: usize) -> Vec<u64> {
        (start..start + n)
            .map(|k| derive_seed(&[self.config.seed, TAG_STEP, self.epoch as u64, k as u64]))
            .collect()
    }

    /// Runs one epoch: minibatch BCE with one optimizer step per batch.
    /// Returns the mean training loss over the epoch.
    pub fn run_epoch(&mut self) -> Result<f64, TrainingError> {
        let examples = self.epoch_examples();
        let mut total = 0.0;
        for (b, batch) in examples.chunks(self.config.batch).enumerate() {
            let seeds = self.step_seeds(b * self.config.batch, batch.len());
            let (loss, mut grads) = match batch_gradient(&self.model, self.graphs, batch, &seeds) {
                Ok(v) => v,
                Err(ModelError::Numerics(NumericsError::NonFinite(_))) => {
                    return Err(TrainingError::NonFiniteLoss {
                        epoch: self.epoch + 1,
                        batch: b,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: b,
                });
            }
            total += loss;
            grads.scale(1.0 / batch.len() as f64);
            let dense = grads.to_dense(&self.model.params);
            let grad_refs: Vec<&[f64]> = dense.iter().map(Vec::as_slice).collect();
            let mut tensors = self.model.params.tensors_mut();
            let mut bufs: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
            self.adam.step(&mut bufs, &grad_refs).map_err(|e| match e {
                NumericsError::NonFinite(_) => TrainingError::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: b,
                },
                e => e.into(),
            })?;
        }
        self.epoch += 1;
        Ok(if examples.is_empty() {
            0.0
        } else {
            total / examples.len() as f64
        })
    }

    /// Runs the configured number of epochs, reporting each to `on_epoch`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>, TrainingError> {
        let mut log = Vec::with_capacity(self.config.epochs);
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let loss = self.run_epoch()?;
            let entry = EpochLog {
                epoch: self.epoch,
                loss,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            log::info!("epoch {} loss {:.6}", entry.epoch, entry.loss);
            on_epoch(&entry);
            log.push(entry);
        }
        Ok(log)
    }

    pub fn checkpoint(&self, vocab_hash: &str, graph_hash: &str) -> Checkpoint {
        Checkpoint::new(&self.model, &self.config, self.epoch, vocab_hash, graph_hash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub dim: usize,
    pub hops: usize,
    pub set_size: usize,
    pub buckets: usize,
    pub entities: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    pub neg_ratio: usize,
    pub vocab_hash: String,
    pub graph_hash: String,
    pub tensors: Vec<TensorInfo>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MEGM";
const CHECKPOINT_FORMAT: u32 = 1;

/// Model parameters stored as 32-bit floats behind a JSON manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &TrainConfig, epoch: usize, vocab_hash: &str, graph_hash: &str) -> Self {
        let mut params = model.params.clone();
        // stored precision
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let tensors = crate::model::PARAM_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT,
            dim: params.dim,
            hops: config.hops,
            set_size: config.set_size,
            buckets: params.bucket_count(),
            entities: params.entity_count(),
            ablation: config.ablation,
            seed: config.seed,
            epoch,
            epochs: config.epochs,
            lr: config.lr,
            l2: config.l2,
            batch: config.batch,
            neg_ratio: config.neg_ratio,
            vocab_hash: vocab_hash.to_string(),
            graph_hash: graph_hash.to_string(),
            tensors,
        };
        Self { manifest, params }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        Model::new(
            self.params.clone(),
            ModelConfig {
                hop: HopConfig {
                    hops: self.manifest.hops,
                    set_size: self.manifest.set_size,
                    seed: self.manifest.seed,
                },
                ablation: self.manifest.ablation,
            },
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(json.len() as u32);
        w.bytes(&json);
        for (name, t) in crate::model::PARAM_NAMES.iter().zip(self.params.tensors()) {
            w.str(name);
            w.u32(t.len() as u32);
            for &v in t.data() {
                w.f32(v as f32);
            }
        }
        w.finish()
    }

    /// Decodes a checkpoint. When `expect` is given as `(vocab_hash,
    /// graph_hash)`, both must match the manifest.
    pub fn from_bytes(bytes: &[u8], expect: Option<(&str, &str)>) -> Result<Self, TrainingError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let n = r.len(1)?;
        let manifest: Manifest =
            serde_json::from_slice(r.take(n)?).map_err(|e| TrainingError::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(TrainingError::Checkpoint(format!(
                "unsupported format {}",
                manifest.format
            )));
        }
        if let Some((vocab, graph)) = expect {
            if manifest.vocab_hash != vocab {
                return Err(TrainingError::Checkpoint(format!(
                    "vocabulary hash mismatch: checkpoint {}, data {vocab}",
                    manifest.vocab_hash
                )));
            }
            if manifest.graph_hash != graph {
                return Err(TrainingError::Checkpoint(format!(
                    "graph hash mismatch: checkpoint {}, data {graph}",
                    manifest.graph_hash
                )));
            }
        }
        let expected_shapes = ModelParams::shapes(manifest.entities, manifest.buckets, manifest.dim);
        if manifest.tensors.len() != expected_shapes.len() {
            return Err(TrainingError::Checkpoint("wrong tensor count".into()));
        }
        let mut params = ModelParams::zeros(manifest.entities, manifest.buckets, manifest.dim);
        for (k, (info, shape)) in manifest.tensors.iter().zip(&expected_shapes).enumerate() {
            if &info.shape != shape || info.name != crate::model::PARAM_NAMES[k] {
                return Err(TrainingError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {} {:?}",
                    info.name,
                    info.shape,
                    crate::model::PARAM_NAMES[k],
                    shape
                )));
            }
            let name = r.str()?;
            let len = r.len(4)?;
            if name != info.name || len != shape.iter().product::<usize>() {
                return Err(TrainingError::Checkpoint(format!(
                    "section {name} does not match manifest"
                )));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f32()? as f64);
            }
            *params.tensors_mut()[k] = Tensor::new(shape.clone(), data)?;
        }
        r.finish()?;
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainingError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expect: Option<(&str, &str)>) -> Result<Self, TrainingError> {
        Self::from_bytes(&std::fs::read(path)?, expect)
    }
}
