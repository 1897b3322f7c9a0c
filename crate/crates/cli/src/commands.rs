use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mega_core::corpus::{synth_corpus_with, Corpus, EntityKind, SynthConfig};
use mega_core::dataset::{DatasetError, PreparedData, CORPUS_FILE};
use mega_core::evaluation::{ablate_compare, reports_csv, ApiTable, MetricsReport};
use mega_core::model::ModelError;
use mega_core::numerics::NumericsError;
use mega_core::training::{Checkpoint, TrainConfig, TrainingError};

use crate::{Cli, Command, Hyper, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};

/// An error with the exit code it maps to.
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn code(&self) -> u8 {
        self.code
    }

    fn usage(msg: String) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow!(msg),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if f.alternate() {
            write!(f, "{:#}", self.error)
        } else {
            write!(f, "{}", self.error)
        }
    }
}

fn is_numeric(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<NumericsError>().is_some()
            || c.downcast_ref::<TrainingError>().is_some_and(TrainingError::is_numeric)
            || c.downcast_ref::<DatasetError>().is_some_and(DatasetError::is_numeric)
            || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Numerics(_)))
    })
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = if is_numeric(&error) { EXIT_NUMERIC } else { EXIT_DATA };
        Self { code, error }
    }
}

type Result<T> = std::result::Result<T, Failure>;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    match cli.command {
        Command::Ingest { methods, apis, out } => ingest(&methods, apis.as_deref(), &out),
        Command::Synth {
            methods,
            apis,
            pairs,
            seed,
            max_pair_uses,
            pair_start,
            out,
        } => {
            let mut cfg = SynthConfig::new(methods, apis, pairs, seed_override(seed)?);
            cfg.max_pair_uses = max_pair_uses;
            cfg.pair_start = pair_start;
            synth(&cfg, &out)
        }
        Command::BuildGraphs {
            corpus,
            epsilon,
            buckets,
            out,
        } => build_graphs(&corpus, epsilon as usize, buckets, &out),
        Command::Train {
            graphs,
            hyper,
            ablate,
            out,
            log,
        } => {
            let config = TrainConfig {
                ablation: ablate,
                ..train_config(&hyper)?
            };
            train(&graphs, config, &out, log.as_deref())
        }
        Command::Evaluate {
            model,
            graphs,
            k,
            report,
            csv,
        } => evaluate(&model, &graphs, &ks(&k), &report, csv),
        Command::Ablate {
            graphs,
            hyper,
            variants,
            k,
            report,
            csv,
        } => {
            let data = load(&graphs)?;
            let reports = ablate_compare(&data, train_config(&hyper)?, &variants, &ks(&k)).context("ablation run")?;
            write_reports(&reports, true, &report, csv)
        }
        Command::Recommend {
            model,
            graphs,
            context,
            method,
            k,
        } => recommend(&model, &graphs, &context, method.as_deref(), k as usize),
        Command::Baseline {
            kind,
            graphs,
            k,
            report,
            csv,
        } => {
            let data = load(&graphs)?;
            let rep = data.evaluate_baseline(kind, &ks(&k)).context("baseline")?;
            write_reports(&[rep], false, &report, csv)
        }
    }
}

fn seed_override(flag: u64) -> Result<u64> {
    match std::env::var("MEGA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("MEGA_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn train_config(h: &Hyper) -> Result<TrainConfig> {
    Ok(TrainConfig {
        dim: h.dim as usize,
        hops: h.hops,
        set_size: h.set_size as usize,
        lr: h.lr,
        l2: h.l2,
        batch: h.batch as usize,
        epochs: h.epochs,
        seed: seed_override(h.seed)?,
        neg_ratio: h.neg_ratio as usize,
        ..TrainConfig::default()
    })
}

fn ks(k: &[u64]) -> Vec<usize> {
    let mut out: Vec<usize> = k.iter().map(|&v| v as usize).collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn ingest(methods: &Path, apis: Option<&Path>, out: &Path) -> Result<()> {
    let open = |p: &Path| {
        File::open(p)
            .map(BufReader::new)
            .with_context(|| format!("opening {}", p.display()))
    };
    let m = open(methods)?;
    let a = apis.map(open).transpose()?;
    let corpus = Corpus::ingest(m, a).with_context(|| format!("ingesting {}", methods.display()))?;
    create_dir(out)?;
    write_file(&out.join(CORPUS_FILE), &corpus.to_bytes())?;
    println!("{} methods, {} apis", corpus.method_count(), corpus.api_count());
    Ok(())
}

fn synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let corpus = synth_corpus_with(cfg).context("generating synthetic corpus")?;
    create_dir(out)?;
    write_file(&out.join(CORPUS_FILE), &corpus.to_bytes())?;
    let mut methods = BufWriter::new(File::create(out.join("methods.jsonl")).context("methods.jsonl")?);
    let mut apis = BufWriter::new(File::create(out.join("apis.jsonl")).context("apis.jsonl")?);
    corpus.write_jsonl(&mut methods, &mut apis).context("writing jsonl")?;
    methods.flush().context("methods.jsonl")?;
    apis.flush().context("apis.jsonl")?;
    println!("{} methods, {} apis", corpus.method_count(), corpus.api_count());
    Ok(())
}

/// Accepts a corpus directory or the corpus file itself.
fn corpus_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CORPUS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn build_graphs(corpus: &Path, epsilon: usize, buckets: u32, out: &Path) -> Result<()> {
    let path = corpus_path(corpus);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let corpus = Corpus::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let data = PreparedData::prepare(&corpus, epsilon, buckets).context("building graphs")?;
    data.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} test methods, {} interaction edges, {} co-occurrence edges, {} hierarchy triples",
        data.split.cases.len(),
        data.graphs.interaction.edge_count(),
        data.graphs.cooccurrence.edges().len(),
        data.graphs.hierarchy.triples().len()
    );
    Ok(())
}

fn load(dir: &Path) -> Result<PreparedData> {
    Ok(PreparedData::load(dir).with_context(|| format!("loading graphs from {}", dir.display()))?)
}

fn load_checkpoint(path: &Path, data: &PreparedData) -> Result<Checkpoint> {
    let (vocab, graph) = (data.vocab_hash(), data.graph_hash());
    Ok(Checkpoint::load(path, Some((&vocab, &graph))).with_context(|| format!("loading {}", path.display()))?)
}

fn train(graphs: &Path, config: TrainConfig, out: &Path, log: Option<&Path>) -> Result<()> {
    let data = load(graphs)?;
    let mg = data.model_graphs();
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout()),
    };
    let mut io_err = None;
    let result = data.train(&mg, config, |e| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        if let Err(err) = writeln!(sink, "{line}") {
            io_err.get_or_insert(err);
        }
    });
    let (ck, _) = result.context("training")?;
    if let Some(e) = io_err {
        return Err(anyhow::Error::from(e).context("writing training log").into());
    }
    sink.flush().context("writing training log")?;
    ck.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn write_reports(reports: &[MetricsReport], as_list: bool, json: &Path, csv: Option<PathBuf>) -> Result<()> {
    let mut body = if as_list {
        serde_json::to_vec_pretty(reports)
    } else {
        serde_json::to_vec_pretty(&reports[0])
    }
    .context("serializing report")?;
    body.push(b'\n');
    write_file(json, &body)?;
    let csv = csv.unwrap_or_else(|| json.with_extension("csv"));
    write_file(&csv, reports_csv(reports).as_bytes())?;
    for r in reports {
        let cells: Vec<String> = r.overall.at.iter().map(|m| format!("SR@{}={:.4}", m.k, m.sr)).collect();
        println!("{}: {}", r.variant, cells.join(" "));
    }
    Ok(())
}

fn evaluate(model: &Path, graphs: &Path, ks: &[usize], report: &Path, csv: Option<PathBuf>) -> Result<()> {
    let data = load(graphs)?;
    let ck = load_checkpoint(model, &data)?;
    let m = ck.model().context("checkpoint")?;
    let mg = data.model_graphs();
    let meta = serde_json::to_value(&ck.manifest).context("manifest")?;
    let rep = data
        .evaluate(ck.manifest.ablation.as_str(), &m, &mg, None, ks, meta)
        .context("evaluation")?;
    write_reports(&[rep], false, report, csv)
}

fn recommend(model: &Path, graphs: &Path, context: &str, method: Option<&str>, k: usize) -> Result<()> {
    let data = load(graphs)?;
    let ck = load_checkpoint(model, &data)?;
    let m = ck.model().context("checkpoint")?;
    let mg = data.model_graphs();
    let u = &data.corpus.universe;
    let ctx = context
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            u.lookup(EntityKind::Api, name)
                .ok_or_else(|| anyhow!("unknown API `{name}`"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if ctx.is_empty() {
        return Err(Failure::usage("--context needs at least one API".into()));
    }
    let method = method
        .map(|name| {
            u.lookup(EntityKind::Method, name)
                .ok_or_else(|| anyhow!("unknown method `{name}`"))
        })
        .transpose()?;
    let table = ApiTable::build(&m, &mg).context("scoring APIs")?;
    let list = table.rank(&m, &mg, method, &ctx, k).context("ranking")?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(out, "rank\tapi\tscore");
    for (r, (api, score)) in list.items.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{:.6}", r + 1, u.name(*api), score);
    }
    Ok(())
}
