//! Run configuration: one TOML file plus flat `--set key=value` overrides.
//!
//! Every key lives in [`KEYS`] with a one-line description. Loading starts
//! from [`RunConfig::default`], so a file only names what it changes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pinfuse::data::{LatentTopicSpec, TextSignal};
use pinfuse::graph::{SampleMode, WalkParams};
use pinfuse::model::ModelConfig;
use pinfuse::objectives::{LossConfig, MrlConfig};
use pinfuse::serving::QuantParams;
use pinfuse::trainer::{OptimizerConfig, StepMode, TrainConfig, UpdateRule};
use pinfuse::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub filter: FilterSection,
    pub graph: GraphSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub optim: OptimizerConfig,
    pub quant: QuantSection,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    pub topics: usize,
    pub pins_per_topic: usize,
    pub boards_per_topic: usize,
    pub noise: f64,
    pub cross_board_rate: f64,
    pub mismatch_rate: f64,
    pub heldout_pins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSection {
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSection {
    pub walk_count: usize,
    pub walk_length: usize,
    pub restart: f64,
    pub cache_k: usize,
    pub pairs_per_query: usize,
    pub sample_mode: SampleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub i2t_batch: usize,
    pub p2p_batch: usize,
    pub devices: usize,
    pub save_every: u64,
    pub mode: StepMode,
    pub text_signal: TextSignal,
    pub clip_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub i2t: bool,
    pub p2p: bool,
    pub mrl: bool,
    pub mrl_prefixes: Vec<usize>,
    pub mrl_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSection {
    pub scale: f64,
    pub zero_point: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub samples: usize,
    pub distractors: usize,
    pub prefixes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckModel {
    Tiny,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSection {
    pub model: GradcheckModel,
    pub devices: usize,
    pub tolerance: f64,
}

/// Optimizer defaults for runs: encoder update signs without momentum and
/// plain gradient steps on t and c.
pub fn desk_optimizer() -> OptimizerConfig {
    let mut o = OptimizerConfig::default();
    for g in [&mut o.image, &mut o.text, &mut o.fusion] {
        g.beta1 = 0.0;
    }
    o.loss.rule = UpdateRule::Sgd;
    o.loss.lr_mult = 5e4;
    o
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = LatentTopicSpec::default();
        let walk = WalkParams::default();
        let qp = QuantParams::default();
        Self {
            seed: 7,
            paths: PathsSection { dir: PathBuf::from("run") },
            model: ModelConfig { split_scalars: true, ..ModelConfig::default() },
            corpus: CorpusSection {
                topics: corpus.topics,
                pins_per_topic: corpus.pins_per_topic,
                boards_per_topic: corpus.boards_per_topic,
                noise: corpus.noise,
                cross_board_rate: corpus.cross_board_rate,
                mismatch_rate: corpus.mismatch_rate,
                heldout_pins: corpus.heldout_pins,
            },
            filter: FilterSection { threshold: 0.5 },
            graph: GraphSection {
                walk_count: walk.walk_count,
                walk_length: walk.walk_length,
                restart: walk.restart,
                cache_k: 50,
                pairs_per_query: 5,
                sample_mode: SampleMode::Weighted,
            },
            train: TrainSection {
                steps: 300,
                warmup_steps: 100,
                base_lr: 1e-3,
                i2t_batch: 64,
                p2p_batch: 16,
                devices: 4,
                save_every: 100,
                mode: StepMode::Joint,
                text_signal: TextSignal::Descriptive,
                clip_grad_norm: 0.0,
            },
            loss: LossSection {
                i2t: true,
                p2p: true,
                mrl: true,
                mrl_prefixes: Vec::new(),
                mrl_weights: Vec::new(),
            },
            optim: desk_optimizer(),
            quant: QuantSection {
                scale: qp.s,
                zero_point: qp.z,
            },
            eval: EvalSection {
                samples: 200,
                distractors: 1000,
                prefixes: Vec::new(),
            },
            gradcheck: GradcheckSection {
                model: GradcheckModel::Tiny,
                devices: 2,
                tolerance: 1e-4,
            },
        }
    }
}

/// Every configuration key with its description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; every random stream is derived from it"),
    ("paths.dir", "directory holding all artifacts"),
    ("model.d_model", "embedding and token width d"),
    ("model.heads", "attention heads per layer"),
    ("model.mlp_dim", "hidden width of each feed-forward block"),
    ("model.split_scalars", "separate learnable t and c for the neighbor objective"),
    ("model.mrl_heads", "prefix lengths given a learned k x k projection head; empty disables"),
    ("model.image.d_in", "raw feature width of one image patch"),
    ("model.image.patches", "patches per image"),
    ("model.image.modules", "funnel modules in the image encoder"),
    ("model.image.layers_per_module", "transformer layers per funnel module"),
    ("model.image.funnel_stride", "mean-pool stride between modules; 1 disables"),
    ("model.image.locked_layers", "leading image layers excluded from training"),
    ("model.text.vocab_size", "byte vocabulary size, including pad and begin tokens"),
    ("model.text.max_len", "text length in tokens, including the begin token"),
    ("model.text.layers", "text encoder layers"),
    ("model.text.locked_layers", "leading text layers excluded from training"),
    ("model.fusion.layers", "fusion transformer layers"),
    ("corpus.topics", "latent topics in the synthetic corpus"),
    ("corpus.pins_per_topic", "training pins per topic"),
    ("corpus.boards_per_topic", "boards per topic, one visual subtopic each"),
    ("corpus.noise", "scale of per-pin deviation from the topic pattern"),
    ("corpus.cross_board_rate", "chance a pin also joins a second board"),
    ("corpus.mismatch_rate", "chance a pin's texts describe another topic"),
    ("corpus.heldout_pins", "pins in the held-out evaluation split"),
    ("filter.threshold", "minimum image-text alignment score kept for the image-text objective"),
    ("graph.walk_count", "random walks per query pin"),
    ("graph.walk_length", "pin-to-pin hops per walk"),
    ("graph.restart", "chance of jumping back to the query after each hop"),
    ("graph.cache_k", "most-visited neighbors kept per pin"),
    ("graph.pairs_per_query", "training pairs drawn per query pin"),
    ("graph.sample_mode", "pair sampling: weighted or uniform"),
    ("train.steps", "optimizer steps"),
    ("train.warmup_steps", "linear warmup steps before cosine decay"),
    ("train.base_lr", "peak learning rate"),
    ("train.i2t_batch", "image-text pairs per step"),
    ("train.p2p_batch", "neighbor pairs per step"),
    ("train.devices", "simulated devices the batch is sharded across"),
    ("train.save_every", "checkpoint interval in steps; 0 saves only at the end"),
    ("train.mode", "joint: both objectives each step; alternate: one per step"),
    ("train.text_signal", "descriptive, keyword or alternate-per-step"),
    ("train.clip_grad_norm", "global gradient norm clip; 0 disables"),
    ("loss.i2t", "enable the image-text objective"),
    ("loss.p2p", "enable the neighbor objective"),
    ("loss.mrl", "wrap objectives in the nested-prefix loss"),
    ("loss.mrl_prefixes", "prefix lengths, increasing and ending at d; empty means d/4, d/2, d"),
    ("loss.mrl_weights", "per-prefix weights; empty means 0.1 for each prefix below d and 1.0 at d"),
    ("optim.image.rule", "image encoder update rule: lion or sgd"),
    ("optim.image.lr_mult", "image encoder learning-rate multiplier"),
    ("optim.image.weight_decay", "image encoder decoupled weight decay"),
    ("optim.image.beta1", "image encoder interpolation coefficient for the update sign"),
    ("optim.image.beta2", "image encoder momentum decay"),
    ("optim.text.rule", "text encoder update rule: lion or sgd"),
    ("optim.text.lr_mult", "text encoder learning-rate multiplier"),
    ("optim.text.weight_decay", "text encoder decoupled weight decay"),
    ("optim.text.beta1", "text encoder interpolation coefficient for the update sign"),
    ("optim.text.beta2", "text encoder momentum decay"),
    ("optim.fusion.rule", "fusion and projection-head update rule: lion or sgd"),
    ("optim.fusion.lr_mult", "fusion and projection-head learning-rate multiplier"),
    ("optim.fusion.weight_decay", "fusion and projection-head decoupled weight decay"),
    ("optim.fusion.beta1", "fusion interpolation coefficient for the update sign"),
    ("optim.fusion.beta2", "fusion momentum decay"),
    ("optim.loss.rule", "t and c update rule: lion or sgd"),
    ("optim.loss.lr_mult", "learning-rate multiplier for t and c"),
    ("optim.loss.weight_decay", "decoupled weight decay for t and c"),
    ("optim.loss.beta1", "t and c interpolation coefficient for the update sign"),
    ("optim.loss.beta2", "t and c momentum decay"),
    ("quant.scale", "int8 quantization scale s"),
    ("quant.zero_point", "int8 quantization zero-point z"),
    ("eval.samples", "query/positive pairs per task"),
    ("eval.distractors", "distractor pins per task"),
    ("eval.prefixes", "exported prefix lengths; empty means the loss prefixes"),
    ("gradcheck.model", "tiny: a small audit model; config: the configured model"),
    ("gradcheck.devices", "simulated devices in the audited loss"),
    ("gradcheck.tolerance", "maximum accepted relative gradient error"),
];

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let inner = table
                .entry(head)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = inner {
                set(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

/// A TOML literal, or the raw text as a string when it does not parse.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Default value of every key, keyed by dotted name.
    pub fn flat(&self) -> BTreeMap<String, toml::Value> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", &value, &mut out);
        out
    }

    /// Defaults, then the file at `path`, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let known = Self::default().flat();
        let mut entries: Vec<(String, toml::Value)> = Vec::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))?;
            let mut flat = BTreeMap::new();
            flatten("", &toml::Value::Table(table), &mut flat);
            entries.extend(flat);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            entries.push((k.trim().to_string(), parse_value(v)));
        }
        let mut table = match toml::Value::try_from(Self::default()).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        };
        for (k, v) in entries {
            if !known.contains_key(&k) {
                return Err(config_err(format!("unknown config key `{k}`")));
            }
            set(&mut table, &k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form,
    /// leaving out the artifact directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone()
    }

    pub fn corpus_spec(&self) -> LatentTopicSpec {
        let c = &self.corpus;
        LatentTopicSpec {
            topics: c.topics,
            pins_per_topic: c.pins_per_topic,
            boards_per_topic: c.boards_per_topic,
            noise: c.noise,
            cross_board_rate: c.cross_board_rate,
            mismatch_rate: c.mismatch_rate,
            heldout_pins: c.heldout_pins,
            patches: self.model.image.patches,
            d_in: self.model.image.d_in,
        }
    }

    pub fn walk_params(&self) -> WalkParams {
        WalkParams {
            walk_count: self.graph.walk_count,
            walk_length: self.graph.walk_length,
            restart: self.graph.restart,
        }
    }

    /// Prefix lengths of the nested loss, with their weights.
    pub fn mrl_config(&self) -> Result<MrlConfig> {
        let d = self.model.d_model;
        let mut mrl = MrlConfig::default_for(d);
        if !self.loss.mrl_prefixes.is_empty() {
            let n = self.loss.mrl_prefixes.len();
            let weights = if self.loss.mrl_weights.is_empty() {
                (0..n).map(|i| if i + 1 == n { 1.0 } else { 0.1 }).collect()
            } else {
                self.loss.mrl_weights.clone()
            };
            if weights.len() != n {
                return Err(config_err(format!(
                    "loss.mrl_weights has {} entries for {n} prefixes",
                    weights.len()
                )));
            }
            mrl.prefixes = self.loss.mrl_prefixes.iter().copied().zip(weights).collect();
        } else if !self.loss.mrl_weights.is_empty() {
            if self.loss.mrl_weights.len() != mrl.prefixes.len() {
                return Err(config_err("loss.mrl_weights must match the default three prefixes"));
            }
            for (p, &w) in mrl.prefixes.iter_mut().zip(&self.loss.mrl_weights) {
                p.1 = w;
            }
        }
        mrl.use_projection_heads = !self.model.mrl_heads.is_empty();
        mrl.validate(d)?;
        Ok(mrl)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            i2t: self.loss.i2t,
            p2p: self.loss.p2p,
            mrl: if self.loss.mrl { Some(self.mrl_config()?) } else { None },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            steps: t.steps,
            warmup_steps: t.warmup_steps,
            base_lr: t.base_lr,
            i2t_batch: t.i2t_batch,
            p2p_batch: t.p2p_batch,
            devices: t.devices,
            save_every: t.save_every,
            mode: t.mode,
            text_signal: t.text_signal,
            clip_grad_norm: (t.clip_grad_norm > 0.0).then_some(t.clip_grad_norm),
            loss: self.loss_config()?,
            optimizer: self.optim,
        })
    }

    pub fn quant_params(&self) -> Result<QuantParams> {
        let qp = QuantParams {
            s: self.quant.scale,
            z: self.quant.zero_point,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Exported prefix lengths, ascending.
    pub fn export_prefixes(&self) -> Result<Vec<usize>> {
        let d = self.model.d_model;
        let mut ks = if !self.eval.prefixes.is_empty() {
            self.eval.prefixes.clone()
        } else if self.loss.mrl {
            self.mrl_config()?.prefixes.iter().map(|p| p.0).collect()
        } else {
            vec![d]
        };
        ks.sort_unstable();
        ks.dedup();
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > d) {
            return Err(config_err(format!("eval prefix {k} outside 1..={d}")));
        }
        Ok(ks)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus_spec().validate()?;
        self.walk_params().validate()?;
        if !(0.0..=1.0).contains(&self.filter.threshold) {
            return Err(config_err("filter.threshold must lie in [0, 1]"));
        }
        if self.graph.cache_k == 0 || self.graph.pairs_per_query == 0 {
            return Err(config_err("graph.cache_k and graph.pairs_per_query must be positive"));
        }
        if self.train.clip_grad_norm < 0.0 {
            return Err(config_err("train.clip_grad_norm must be ≥ 0"));
        }
        self.train_config()?.validate()?;
        self.quant_params()?;
        self.export_prefixes()?;
        if self.gradcheck.devices == 0 || !(self.gradcheck.tolerance > 0.0) {
            return Err(config_err("gradcheck.devices and gradcheck.tolerance must be positive"));
        }
        Ok(())
    }
}

/// `key = default  # description` for every key, in registry order.
pub fn key_listing() -> String {
    let flat = RunConfig::default().flat();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (key, doc) in KEYS {
        let value = flat.get(*key).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("  {key:<width$} = {value}\n      {doc}\n"));
    }
    out
}
