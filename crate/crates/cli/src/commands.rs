//! One function per subcommand. Each reads and writes fixed artifact names
//! under `paths.dir` and returns a one-line JSON summary.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pinfuse::audit::{gradcheck_pipeline, two_pin_batch};
use pinfuse::checkpoint::Checkpoint;
use pinfuse::data::{filter_pins, generate_synthetic_corpus, Corpus, StubScorer};
use pinfuse::evaluation::{embed_corpus, select_eval_pins, EvalReport, Modality, Sources, Task, TaskReport, REPORT_KS};
use pinfuse::graph::{build_neighbor_cache, read_pairs, sample_pairs, write_pairs, NeighborCache, PinBoardGraph, PinId};
use pinfuse::model::{Model, ModelConfig};
use pinfuse::objectives::{LossConfig, MrlConfig};
use pinfuse::provenance::Provenance;
use pinfuse::serving::{EmbeddingStore, StoreMeta};
use pinfuse::trainer::{run_training, RunOutputs, TrainState, TrainingData};
use pinfuse::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{GradcheckModel, RunConfig};

pub const CORPUS: &str = "corpus.jsonl";
pub const HELDOUT: &str = "heldout.jsonl";
pub const GRAPH: &str = "graph.tsv";
pub const HELDOUT_GRAPH: &str = "heldout_graph.tsv";
pub const I2T_KEEP: &str = "i2t_keep.tsv";
pub const LABELS: &str = "labels.tsv";
pub const CACHE: &str = "cache.tsv";
pub const PAIRS: &str = "pairs.tsv";
pub const CHECKPOINT: &str = "model.pckpt";
pub const METRICS: &str = "metrics.jsonl";

/// Storage type of an exported store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Float32,
    Int8,
}

impl Dtype {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float32" | "float" => Some(Self::Float32),
            "int8" => Some(Self::Int8),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Float32 => "float32",
            Self::Int8 => "int8",
        }
    }
}

pub fn store_name(m: Modality, k: usize, dtype: Dtype) -> String {
    match dtype {
        Dtype::Float32 => format!("{}_{k}.pceb", m.as_str()),
        Dtype::Int8 => format!("{}_{k}.int8.pceb", m.as_str()),
    }
}

pub fn report_name(k: usize, dtype: Dtype) -> String {
    format!("eval_{}_{k}.json", dtype.as_str())
}

/// A run's configuration together with the artifact directory.
pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub prov: Provenance,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            prov: Provenance::new(cfg.hash(), cfg.seed),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.paths.dir.join(name)
    }

    fn ensure_dir(&self) -> Result<()> {
        let dir = &self.cfg.paths.dir;
        fs::create_dir_all(dir).map_err(Error::io(dir))
    }
}

fn write_lines(path: &Path, prov: &Provenance, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", prov.header_line()).map_err(Error::io(path))?;
    for line in lines {
        writeln!(w, "{line}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_ids(path: &Path) -> Result<Vec<PinId>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut ids = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let id = line
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad pin id `{line}`", n + 1)))?;
        ids.push(id);
    }
    Ok(ids)
}

/// Synthetic corpus, both graphs, the alignment-filter survivors and the
/// latent labels.
pub fn gen_data(ctx: &Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    ctx.ensure_dir()?;
    let synth = generate_synthetic_corpus(&cfg.corpus_spec(), cfg.seed)?;
    synth.train.write_jsonl(&ctx.path(CORPUS), &ctx.prov)?;
    synth.heldout.write_jsonl(&ctx.path(HELDOUT), &ctx.prov)?;
    synth.train_graph().write_tsv(&ctx.path(GRAPH), &ctx.prov)?;
    synth.heldout_graph().write_tsv(&ctx.path(HELDOUT_GRAPH), &ctx.prov)?;
    let kept = filter_pins(synth.train.pins.clone(), &StubScorer(&synth.topics), cfg.filter.threshold);
    write_lines(&ctx.path(I2T_KEEP), &ctx.prov, kept.iter().map(|p| p.id.to_string()))?;
    write_lines(
        &ctx.path(LABELS),
        &ctx.prov,
        synth
            .labels
            .iter()
            .map(|l| format!("{}\t{}\t{}", l.id, l.topic, l.subtopic)),
    )?;
    Ok(json!({
        "command": "gen-data",
        "train_pins": synth.train.len(),
        "heldout_pins": synth.heldout.len(),
        "i2t_kept": kept.len(),
    }))
}

pub fn build_cache(ctx: &Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let graph = PinBoardGraph::read_tsv(&ctx.path(GRAPH))?;
    let cache = build_neighbor_cache(&graph, cfg.graph.cache_k, &cfg.walk_params(), cfg.seed)?;
    cache.write_tsv(&ctx.path(CACHE), &ctx.prov)?;
    Ok(json!({ "command": "build-cache", "pins": cache.len() }))
}

pub fn sample_pairs_cmd(ctx: &Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let cache = NeighborCache::read_tsv(&ctx.path(CACHE))?;
    let pairs = sample_pairs(&cache, cfg.graph.pairs_per_query, cfg.graph.sample_mode, cfg.seed)?;
    write_pairs(&ctx.path(PAIRS), &pairs, &ctx.prov)?;
    Ok(json!({ "command": "sample-pairs", "pairs": pairs.len() }))
}

/// Trains from scratch, or from `model.pckpt` when `resume` is set.
pub fn train(ctx: &Ctx, resume: bool) -> Result<Value> {
    let cfg = ctx.cfg;
    let tc = cfg.train_config()?;
    let (corpus, _) = Corpus::read_jsonl(&ctx.path(CORPUS))?;
    let pairs = if cfg.loss.p2p { read_pairs(&ctx.path(PAIRS))? } else { Vec::new() };
    let keep = read_ids(&ctx.path(I2T_KEEP))?;
    let data = TrainingData::new(&corpus, &pairs, Some(&keep))?;
    let ck = ctx.path(CHECKPOINT);
    let mut state = if resume {
        let saved = Checkpoint::read(&ck)?;
        if saved.meta.config_hash != ctx.prov.config_hash || saved.meta.seed != cfg.seed {
            return Err(Error::Precondition(format!(
                "{} was written by config {} seed {}, not {} seed {}",
                ck.display(),
                saved.meta.config_hash,
                saved.meta.seed,
                ctx.prov.config_hash,
                cfg.seed
            )));
        }
        saved.restore()?
    } else {
        TrainState::new(Model::new(&cfg.model_config(), cfg.seed)?)
    };
    let start = state.step;
    let metrics = ctx.path(METRICS);
    let out = RunOutputs {
        checkpoint: Some(&ck),
        metrics: Some(&metrics),
        provenance: ctx.prov.clone(),
    };
    let history = run_training(&mut state, &data, &tc, cfg.seed, &out)?;
    let last = history.last();
    Ok(json!({
        "command": "train",
        "from_step": start,
        "step": state.step,
        "loss": last.map(|m| m.loss),
        "t": last.map(|m| m.t),
        "c": last.map(|m| m.c),
    }))
}

/// Float stores of every held-out pin, per modality and exported prefix.
pub fn embed(ctx: &Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let ck_path = ctx.path(CHECKPOINT);
    let ck_id = checkpoint_id(&ck_path)?;
    let model = Checkpoint::read(&ck_path)?.restore()?.model;
    let (heldout, _) = Corpus::read_jsonl(&ctx.path(HELDOUT))?;
    let ids: Vec<PinId> = heldout.pins.iter().map(|p| p.id).collect();
    let prefixes = cfg.export_prefixes()?;
    let mut written = Vec::new();
    for m in Modality::ALL {
        let rows = embed_corpus(&model, &heldout, m)?;
        for &k in &prefixes {
            let store = EmbeddingStore::from_rows(ids.clone(), &model.export_prefix(&rows, k)?)?;
            let name = store_name(m, k, Dtype::Float32);
            store.write(&ctx.path(&name), &store_meta(ctx, m, k, &ck_id))?;
            written.push(name);
        }
    }
    Ok(json!({ "command": "embed", "pins": ids.len(), "stores": written }))
}

fn store_meta(ctx: &Ctx, m: Modality, k: usize, ck_id: &str) -> StoreMeta {
    StoreMeta {
        provenance: ctx.prov.clone(),
        modality: m.as_str().to_string(),
        prefix: k,
        checkpoint: ck_id.to_string(),
    }
}

/// Int8 copies of every float store.
pub fn quantize(ctx: &Ctx) -> Result<Value> {
    let cfg = ctx.cfg;
    let qp = cfg.quant_params()?;
    let ck_id = checkpoint_id(&ctx.path(CHECKPOINT))?;
    let mut written = Vec::new();
    for m in Modality::ALL {
        for k in cfg.export_prefixes()? {
            let src = EmbeddingStore::read(&ctx.path(&store_name(m, k, Dtype::Float32)))?;
            let name = store_name(m, k, Dtype::Int8);
            src.quantized(&qp)?.write(&ctx.path(&name), &store_meta(ctx, m, k, &ck_id))?;
            written.push(name);
        }
    }
    Ok(json!({ "command": "quantize", "scale": qp.s, "zero_point": qp.z, "stores": written }))
}

/// First 16 hex digits of the SHA-256 of the checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Recall report over all tasks for one prefix and storage type.
pub fn eval(ctx: &Ctx, prefix: Option<usize>, dtype: Dtype) -> Result<(Value, EvalReport)> {
    let cfg = ctx.cfg;
    let k = prefix.unwrap_or(cfg.model.d_model);
    let (heldout, _) = Corpus::read_jsonl(&ctx.path(HELDOUT))?;
    let mut stores = Vec::new();
    for m in Modality::ALL {
        stores.push((m, EmbeddingStore::read(&ctx.path(&store_name(m, k, dtype)))?));
    }
    let sources = stores.iter().fold(Sources::default(), |s, (m, st)| s.with(*m, st));
    let mut tasks = Vec::new();
    for task in Task::ALL {
        let sel = select_eval_pins(&heldout, task, cfg.eval.samples, cfg.eval.distractors, cfg.seed)?;
        tasks.push(TaskReport::evaluate(&sel.materialize(&sources)?, &REPORT_KS)?);
    }
    let report = EvalReport {
        config_hash: ctx.prov.config_hash.clone(),
        seed: cfg.seed,
        checkpoint: checkpoint_id(&ctx.path(CHECKPOINT))?,
        prefix: k,
        dtype: dtype.as_str().to_string(),
        tasks,
    };
    let name = report_name(k, dtype);
    report.write(&ctx.path(&name))?;
    let summary: serde_json::Map<String, Value> = report
        .tasks
        .iter()
        .map(|t| {
            let r: Vec<Value> = t.recall.iter().map(|p| json!([p.k, p.recall])).collect();
            (t.task.as_str().to_string(), Value::from(r))
        })
        .collect();
    Ok((json!({ "command": "eval", "report": name, "recall": summary }), report))
}

/// Outcome of the finite-difference audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOutcome {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl AuditOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Audits every parameter on a two-pin batch. The tiny model turns on
/// split scalars and a head for each default prefix.
pub fn gradcheck(ctx: &Ctx) -> Result<(Value, AuditOutcome)> {
    let cfg = ctx.cfg;
    let (mc, loss) = match cfg.gradcheck.model {
        GradcheckModel::Config => (cfg.model_config(), cfg.loss_config()?),
        GradcheckModel::Tiny => {
            let mut mc = ModelConfig::tiny();
            let mrl = MrlConfig {
                use_projection_heads: true,
                ..MrlConfig::default_for(mc.d_model)
            };
            mc.split_scalars = true;
            mc.mrl_heads = mrl.prefixes.iter().map(|p| p.0).collect();
            let loss = LossConfig {
                i2t: cfg.loss.i2t,
                p2p: cfg.loss.p2p,
                mrl: cfg.loss.mrl.then_some(mrl),
            };
            (mc, loss)
        }
    };
    let model = Model::new(&mc, cfg.seed)?;
    let data = two_pin_batch(&mc, cfg.seed)?;
    let r = gradcheck_pipeline(&model, &data, &loss, cfg.gradcheck.devices)?;
    let out = AuditOutcome {
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        tolerance: cfg.gradcheck.tolerance,
    };
    Ok((
        json!({
            "command": "gradcheck",
            "checked": out.checked,
            "max_rel_error": out.max_rel_error,
            "tolerance": out.tolerance,
            "passed": out.passed(),
        }),
        out,
    ))
}
