//! Recall@K over held-out pins with a shared distractor pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{coalesce_descriptive_text, Corpus};
use crate::error::{Error, Result};
use crate::graph::PinId;
use crate::model::Model;
use crate::rng::rng_for;
use crate::serving::EmbeddingStore;

/// What a stored vector embeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    /// Descriptive text through the text encoder.
    Text,
    /// Image and descriptive text through the fusion aggregator.
    Fused,
    /// Descriptive text through the text-only fusion branch.
    Query,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Image, Modality::Text, Modality::Fused, Modality::Query];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Fused => "fused",
            Modality::Query => "query",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ImageToText,
    TextToImage,
    ImageToImage,
    /// Fused pin to fused neighbor.
    Multimodal,
    /// Text query to fused pin.
    TextToMultimodal,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::ImageToText,
        Task::TextToImage,
        Task::ImageToImage,
        Task::Multimodal,
        Task::TextToMultimodal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ImageToText => "image-to-text",
            Task::TextToImage => "text-to-image",
            Task::ImageToImage => "image-to-image",
            Task::Multimodal => "multimodal",
            Task::TextToMultimodal => "text-to-multimodal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// (query side, candidate side).
    pub fn modalities(self) -> (Modality, Modality) {
        match self {
            Task::ImageToText => (Modality::Image, Modality::Text),
            Task::TextToImage => (Modality::Text, Modality::Image),
            Task::ImageToImage => (Modality::Image, Modality::Image),
            Task::Multimodal => (Modality::Fused, Modality::Fused),
            Task::TextToMultimodal => (Modality::Query, Modality::Fused),
        }
    }

    /// Whether the positive is a board neighbor rather than the pin itself.
    pub fn uses_neighbors(self) -> bool {
        matches!(self, Task::ImageToImage | Task::Multimodal)
    }
}

/// Queries, their aligned positives, and one distractor pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub task: Task,
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EvalSet {
    pub fn new(task: Task, queries: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Precondition("eval set has no queries".into()));
        }
        if queries.len() != positives.len() {
            return Err(Error::Precondition(format!(
                "{} queries but {} positives",
                queries.len(),
                positives.len()
            )));
        }
        let d = queries[0].len();
        if queries.iter().chain(&positives).chain(&negatives).any(|r| r.len() != d) {
            return Err(Error::Precondition("eval rows differ in dimension".into()));
        }
        Ok(Self {
            task,
            queries,
            positives,
            negatives,
        })
    }

    /// Per query, how many negatives score at least as high as the positive.
    pub fn positive_ranks(&self) -> Vec<usize> {
        self.queries
            .iter()
            .zip(&self.positives)
            .map(|(q, p)| {
                let s = dot(q, p);
                self.negatives.iter().filter(|n| dot(q, n) >= s).count()
            })
            .collect()
    }
}

/// Fraction of queries whose positive is beaten or tied by fewer than `k`
/// negatives.
pub fn recall_at_k(set: &EvalSet, k: usize) -> Result<f64> {
    Ok(recall_curve(set, &[k])?[0])
}

pub fn recall_curve(set: &EvalSet, ks: &[usize]) -> Result<Vec<f64>> {
    if ks.contains(&0) {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    if set.queries.is_empty() {
        return Err(Error::Precondition("eval set has no queries".into()));
    }
    let ranks = set.positive_ranks();
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect())
}

/// Expected Recall@K of a model that ranks at random.
pub fn chance_recall(distractors: usize, k: usize) -> f64 {
    (k as f64 / (distractors + 1) as f64).min(1.0)
}

/// Which pins form an eval set, independent of any embeddings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSelection {
    pub task: Task,
    pub query_ids: Vec<PinId>,
    pub positive_ids: Vec<PinId>,
    pub distractor_ids: Vec<PinId>,
}

/// Draws `samples` (query, positive) pins from the held-out corpus and
/// `distractors` further pins that are neither.
pub fn select_eval_pins(heldout: &Corpus, task: Task, samples: usize, distractors: usize, seed: u64) -> Result<EvalSelection> {
    if samples == 0 {
        return Err(Error::Config("eval needs at least one sample".into()));
    }
    let mut rng = rng_for(seed, &format!("eval-{}", task.as_str()));
    let (query_ids, positive_ids): (Vec<PinId>, Vec<PinId>) = if task.uses_neighbors() {
        let graph = heldout.graph();
        let neighbors = |p: PinId| -> Vec<PinId> {
            let set: BTreeSet<PinId> = graph
                .boards_of(p)
                .iter()
                .flat_map(|&b| graph.pins_of(b).iter().copied())
                .filter(|&q| q != p)
                .collect();
            set.into_iter().collect()
        };
        let eligible: Vec<PinId> = heldout.pins.iter().map(|p| p.id).filter(|&p| !neighbors(p).is_empty()).collect();
        if eligible.len() < samples {
            return Err(insufficient(task, samples, eligible.len(), "pins with a board neighbor"));
        }
        eligible
            .choose_multiple(&mut rng, samples)
            .map(|&q| {
                let pos = *neighbors(q).choose(&mut rng).expect("eligible pins have neighbors");
                (q, pos)
            })
            .unzip()
    } else {
        let ids: Vec<PinId> = heldout.pins.iter().map(|p| p.id).collect();
        if ids.len() < samples {
            return Err(insufficient(task, samples, ids.len(), "held-out pins"));
        }
        ids.choose_multiple(&mut rng, samples).map(|&p| (p, p)).unzip()
    };
    let used: BTreeSet<PinId> = query_ids.iter().chain(&positive_ids).copied().collect();
    let pool: Vec<PinId> = heldout.pins.iter().map(|p| p.id).filter(|p| !used.contains(p)).collect();
    if pool.len() < distractors {
        return Err(insufficient(task, distractors, pool.len(), "distractor pins"));
    }
    let mut distractor_ids: Vec<PinId> = pool.choose_multiple(&mut rng, distractors).copied().collect();
    distractor_ids.sort_unstable();
    Ok(EvalSelection {
        task,
        query_ids,
        positive_ids,
        distractor_ids,
    })
}

fn insufficient(task: Task, want: usize, have: usize, what: &str) -> Error {
    Error::Precondition(format!(
        "{} eval needs {want} {what} but the held-out split has {have}",
        task.as_str()
    ))
}

/// Embedding stores by modality.
#[derive(Debug, Default)]
pub struct Sources<'a> {
    pub stores: BTreeMap<Modality, &'a EmbeddingStore>,
}

impl<'a> Sources<'a> {
    pub fn with(mut self, m: Modality, store: &'a EmbeddingStore) -> Self {
        self.stores.insert(m, store);
        self
    }

    fn rows(&self, m: Modality, ids: &[PinId]) -> Result<Vec<Vec<f64>>> {
        let store = self
            .stores
            .get(&m)
            .ok_or_else(|| Error::Precondition(format!("no {} embeddings loaded", m.as_str())))?;
        ids.iter()
            .map(|&id| {
                store
                    .get(id)
                    .ok_or_else(|| Error::Precondition(format!("pin {id} missing from the {} store", m.as_str())))
            })
            .collect()
    }
}

impl EvalSelection {
    pub fn materialize(&self, sources: &Sources<'_>) -> Result<EvalSet> {
        let (qm, cm) = self.task.modalities();
        EvalSet::new(
            self.task,
            sources.rows(qm, &self.query_ids)?,
            sources.rows(cm, &self.positive_ids)?,
            sources.rows(cm, &self.distractor_ids)?,
        )
    }
}

/// Full-width unit embeddings of every corpus pin.
pub fn embed_corpus(model: &Model, corpus: &Corpus, modality: Modality) -> Result<Vec<Vec<f64>>> {
    let grids: Vec<&[f64]> = corpus.pins.iter().map(|p| p.image.as_slice()).collect();
    let texts: Vec<String> = corpus.pins.iter().map(coalesce_descriptive_text).collect();
    match modality {
        Modality::Image => model.embed_images(&grids),
        Modality::Text => model.embed_texts(&texts),
        Modality::Fused => model.embed_fused(&grids, &texts),
        Modality::Query => model.embed_text_queries(&texts),
    }
}

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub queries: usize,
    pub distractors: usize,
    pub recall: Vec<RecallPoint>,
}

impl TaskReport {
    pub fn evaluate(set: &EvalSet, ks: &[usize]) -> Result<Self> {
        let values = recall_curve(set, ks)?;
        Ok(Self {
            task: set.task,
            queries: set.queries.len(),
            distractors: set.negatives.len(),
            recall: ks
                .iter()
                .zip(values)
                .map(|(&k, recall)| RecallPoint { k, recall })
                .collect(),
        })
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|p| p.k == k).map(|p| p.recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint: String,
    pub prefix: usize,
    pub dtype: String,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, json + "\n").map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
