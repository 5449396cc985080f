//! Pin records, text coalescing, alignment filtering, the planted-topic
//! synthetic corpus and deterministic batch streams.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BoardId, PinBoardGraph, PinId};
use crate::provenance::Provenance;
use crate::rng::{rng_for, rng_indexed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinRecord {
    pub id: PinId,
    /// Flat row-major `patches × d_in` feature grid.
    pub image: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nav_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<String>>,
    pub board_ids: Vec<BoardId>,
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().filter(|t| !t.is_empty())
}

/// Title, else description, else caption, else empty.
pub fn coalesce_descriptive_text(pin: &PinRecord) -> String {
    non_empty(&pin.title)
        .or_else(|| non_empty(&pin.description))
        .or_else(|| non_empty(&pin.caption))
        .unwrap_or_default()
        .to_string()
}

/// Navigation query, else annotations joined by spaces, else empty.
pub fn coalesce_keyword_text(pin: &PinRecord) -> String {
    if let Some(q) = non_empty(&pin.nav_query) {
        return q.to_string();
    }
    match &pin.annotations {
        Some(a) if !a.is_empty() => a.join(" "),
        _ => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextSignal {
    Descriptive,
    Keyword,
    AlternatePerStep,
}

impl TextSignal {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "descriptive" => Some(Self::Descriptive),
            "keyword" => Some(Self::Keyword),
            "alternate-per-step" => Some(Self::AlternatePerStep),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Descriptive => "descriptive",
            Self::Keyword => "keyword",
            Self::AlternatePerStep => "alternate-per-step",
        }
    }

    /// Whether `step` uses the keyword text.
    pub fn keyword_at(self, step: u64) -> bool {
        match self {
            Self::Descriptive => false,
            Self::Keyword => true,
            Self::AlternatePerStep => step % 2 == 1,
        }
    }
}

/// Produces a caption for a pin from its image.
pub trait CaptionProvider {
    fn caption(&self, image: &[f64]) -> String;
}

/// Scores how well a text describes an image.
pub trait AlignmentScorer {
    fn score(&self, image: &[f64], text: &str) -> f64;
}

/// Keeps items scoring at least `threshold`, in input order.
pub fn filter_by_alignment<T>(items: Vec<T>, threshold: f64, mut score: impl FnMut(&T) -> f64) -> Vec<T> {
    items.into_iter().filter(|it| score(it) >= threshold).collect()
}

/// Applies `scorer` to each pin's descriptive text. Pins without text are
/// kept unscored.
pub fn filter_pins(pins: Vec<PinRecord>, scorer: &dyn AlignmentScorer, threshold: f64) -> Vec<PinRecord> {
    filter_by_alignment(pins, threshold, |p| {
        let text = coalesce_descriptive_text(p);
        if text.is_empty() {
            f64::INFINITY
        } else {
            scorer.score(&p.image, &text)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTopicSpec {
    pub topics: usize,
    pub pins_per_topic: usize,
    /// Boards per topic; each board is one visual subtopic.
    pub boards_per_topic: usize,
    /// Scale of the per-pin deviation from its topic pattern.
    pub noise: f64,
    /// Chance a pin also joins a second board of its topic.
    pub cross_board_rate: f64,
    /// Chance a pin's texts describe a different topic.
    pub mismatch_rate: f64,
    pub heldout_pins: usize,
    pub patches: usize,
    pub d_in: usize,
}

impl Default for LatentTopicSpec {
    fn default() -> Self {
        Self {
            topics: 4,
            pins_per_topic: 100,
            boards_per_topic: 10,
            noise: 0.8,
            cross_board_rate: 0.2,
            mismatch_rate: 0.05,
            heldout_pins: 1500,
            patches: 16,
            d_in: 16,
        }
    }
}

/// Id offset separating held-out pins and boards from training ones.
pub const HELDOUT_OFFSET: u64 = 1_000_000;

impl LatentTopicSpec {
    pub fn validate(&self) -> Result<()> {
        let dim = self.patches * self.d_in;
        if self.topics == 0 || self.pins_per_topic == 0 || self.boards_per_topic == 0 {
            return Err(Error::Config("corpus topics, pins and boards must be positive".into()));
        }
        if self.topics > dim {
            return Err(Error::Config(format!(
                "{} topics cannot be orthogonal in {dim} image dimensions",
                self.topics
            )));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.cross_board_rate) || !(0.0..=1.0).contains(&self.mismatch_rate) {
            return Err(Error::Config("corpus noise must be ≥ 0 and rates within [0, 1]".into()));
        }
        if self.pins_per_topic as u64 * self.topics as u64 >= HELDOUT_OFFSET || self.heldout_pins as u64 >= HELDOUT_OFFSET {
            return Err(Error::Config("corpus too large for the id layout".into()));
        }
        Ok(())
    }
}

/// The latent structure behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub topic_patterns: Vec<Vec<f64>>,
    /// `[topic][board]` pattern.
    pub sub_patterns: Vec<Vec<Vec<f64>>>,
    pub topic_words: Vec<String>,
    pub sub_words: Vec<Vec<String>>,
    pub noise: f64,
}

fn random_word(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
}

/// Two to four random lowercase letters.
fn noise_word(rng: &mut impl Rng) -> String {
    let len = rng.random_range(2..5);
    random_word(rng, len)
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TopicModel {
    pub fn new(spec: &LatentTopicSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dim = spec.patches * spec.d_in;
        let mut rng = rng_for(seed, "corpus-topics");
        // Gram-Schmidt, then scale to unit RMS per entry
        let mut topic_patterns: Vec<Vec<f64>> = Vec::new();
        while topic_patterns.len() < spec.topics {
            let mut v = gaussian(&mut rng, dim);
            for u in &topic_patterns {
                let proj = dot(&v, u) / dot(u, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= proj * y);
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                let s = (dim as f64).sqrt() / norm;
                topic_patterns.push(v.into_iter().map(|x| x * s).collect());
            }
        }
        let sub_patterns = (0..spec.topics)
            .map(|_| (0..spec.boards_per_topic).map(|_| gaussian(&mut rng, dim)).collect())
            .collect();
        let mut used = std::collections::HashSet::new();
        let mut fresh = |rng: &mut rand_chacha::ChaCha8Rng| loop {
            let w = random_word(rng, 3);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let topic_words = (0..spec.topics).map(|_| fresh(&mut rng)).collect();
        let sub_words = (0..spec.topics)
            .map(|_| (0..spec.boards_per_topic).map(|_| fresh(&mut rng)).collect())
            .collect();
        Ok(Self {
            topic_patterns,
            sub_patterns,
            topic_words,
            sub_words,
            noise: spec.noise,
        })
    }

    /// Topic whose pattern the image projects onto most strongly.
    pub fn image_topic(&self, image: &[f64]) -> usize {
        argmax(self.topic_patterns.iter().map(|t| dot(image, t)))
    }

    /// Board pattern of `topic` closest to the image residual.
    pub fn image_subtopic(&self, image: &[f64], topic: usize) -> usize {
        let resid: Vec<f64> = image
            .iter()
            .zip(&self.topic_patterns[topic])
            .map(|(x, t)| x - t)
            .collect();
        argmax(self.sub_patterns[topic].iter().map(|s| dot(&resid, s)))
    }

    /// One-hot summary of the topic words in a text, or `None` if it names none.
    fn text_topics(&self, text: &str) -> Option<Vec<f64>> {
        let mut v = vec![0.0; self.topic_words.len()];
        for w in text.split_whitespace() {
            if let Some(t) = self.topic_words.iter().position(|tw| tw == w) {
                v[t] += 1.0;
            }
        }
        v.iter().any(|&x| x > 0.0).then_some(v)
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Captions an image with the keywords of its nearest topic and board.
pub struct StubCaptioner<'a>(pub &'a TopicModel);

impl CaptionProvider for StubCaptioner<'_> {
    fn caption(&self, image: &[f64]) -> String {
        let t = self.0.image_topic(image);
        let s = self.0.image_subtopic(image, t);
        format!("{} {}", self.0.topic_words[t], self.0.sub_words[t][s])
    }
}

/// Cosine between the image's topic indicator and the text's topic-word
/// histogram. Texts naming no topic score 0.
pub struct StubScorer<'a>(pub &'a TopicModel);

impl AlignmentScorer for StubScorer<'_> {
    fn score(&self, image: &[f64], text: &str) -> f64 {
        let t = self.0.image_topic(image);
        match self.0.text_topics(text) {
            Some(v) => v[t] / dot(&v, &v).sqrt(),
            None => 0.0,
        }
    }
}

/// Ground-truth latent labels, kept apart from the records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinLabel {
    pub id: PinId,
    pub topic: usize,
    pub subtopic: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Corpus,
    pub heldout: Corpus,
    pub labels: Vec<PinLabel>,
    pub topics: TopicModel,
}

impl SyntheticCorpus {
    pub fn train_graph(&self) -> PinBoardGraph {
        self.train.graph()
    }

    pub fn heldout_graph(&self) -> PinBoardGraph {
        self.heldout.graph()
    }
}

pub fn generate_synthetic_corpus(spec: &LatentTopicSpec, seed: u64) -> Result<SyntheticCorpus> {
    let topics = TopicModel::new(spec, seed)?;
    let mut labels = Vec::new();
    let mut rng = rng_for(seed, "corpus-train");
    let mut train = Vec::with_capacity(spec.topics * spec.pins_per_topic);
    for t in 0..spec.topics {
        for i in 0..spec.pins_per_topic {
            let id = (t * spec.pins_per_topic + i) as PinId;
            let (pin, label) = synth_pin(spec, &topics, &mut rng, id, t, 0);
            train.push(pin);
            labels.push(label);
        }
    }
    let mut rng = rng_for(seed, "corpus-heldout");
    let mut heldout = Vec::with_capacity(spec.heldout_pins);
    for i in 0..spec.heldout_pins {
        let t = i % spec.topics;
        let (pin, label) = synth_pin(spec, &topics, &mut rng, HELDOUT_OFFSET + i as PinId, t, HELDOUT_OFFSET);
        heldout.push(pin);
        labels.push(label);
    }
    Ok(SyntheticCorpus {
        train: Corpus::new(spec.patches, spec.d_in, train)?,
        heldout: Corpus::new(spec.patches, spec.d_in, heldout)?,
        labels,
        topics,
    })
}

fn synth_pin(
    spec: &LatentTopicSpec,
    tm: &TopicModel,
    rng: &mut impl Rng,
    id: PinId,
    topic: usize,
    board_offset: u64,
) -> (PinRecord, PinLabel) {
    let dim = spec.patches * spec.d_in;
    let sub = rng.random_range(0..spec.boards_per_topic);
    let g = gaussian(rng, dim);
    let image: Vec<f64> = (0..dim)
        .map(|k| tm.topic_patterns[topic][k] + spec.noise * (tm.sub_patterns[topic][sub][k] + g[k]))
        .collect();

    let board = |s: usize| board_offset + (topic * spec.boards_per_topic + s) as u64;
    let mut board_ids = vec![board(sub)];
    if spec.boards_per_topic > 1 && rng.random::<f64>() < spec.cross_board_rate {
        let mut other = rng.random_range(0..spec.boards_per_topic - 1);
        if other >= sub {
            other += 1;
        }
        board_ids.push(board(other));
    }
    board_ids.sort_unstable();

    // texts describe (text_topic, text_sub); mismatched pins point elsewhere
    let (tt, ts) = if spec.topics > 1 && rng.random::<f64>() < spec.mismatch_rate {
        let mut o = rng.random_range(0..spec.topics - 1);
        if o >= topic {
            o += 1;
        }
        (o, rng.random_range(0..spec.boards_per_topic))
    } else {
        (topic, sub)
    };
    let tw = &tm.topic_words[tt];
    let sw = &tm.sub_words[tt][ts];
    let title = (rng.random::<f64>() < 0.6).then(|| format!("{tw} {sw} {}", noise_word(rng)));
    let description = (rng.random::<f64>() < 0.5)
        .then(|| format!("{sw} {} {tw} {}", noise_word(rng), noise_word(rng)));
    let caption = (title.is_none() && description.is_none())
        .then(|| StubCaptioner(tm).caption(&image));
    let nav_query = (rng.random::<f64>() < 0.5).then(|| format!("{tw} {sw}"));
    let annotations = (rng.random::<f64>() < 0.7).then(|| vec![sw.clone(), tw.clone(), noise_word(rng)]);
    let pin = PinRecord {
        id,
        image,
        title,
        description,
        caption,
        nav_query,
        annotations,
        board_ids,
    };
    (pin, PinLabel { id, topic, subtopic: sub })
}

/// Records with a fixed grid shape and an id index.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub patches: usize,
    pub d_in: usize,
    pub pins: Vec<PinRecord>,
    index: HashMap<PinId, usize>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    patches: usize,
    d_in: usize,
    count: usize,
    config_hash: String,
    seed: u64,
}

const CORPUS_FORMAT: &str = "pinfuse-corpus";

impl Corpus {
    pub fn new(patches: usize, d_in: usize, pins: Vec<PinRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pins.len());
        for (i, p) in pins.iter().enumerate() {
            if p.image.len() != patches * d_in {
                return Err(Error::Precondition(format!(
                    "pin {} has {} image values, expected {patches}×{d_in}",
                    p.id,
                    p.image.len()
                )));
            }
            if index.insert(p.id, i).is_some() {
                return Err(Error::Precondition(format!("duplicate pin id {}", p.id)));
            }
        }
        Ok(Self { patches, d_in, pins, index })
    }

    pub fn len(&self) -> usize {
        self.pins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pins.is_empty()
    }

    pub fn position(&self, id: PinId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: PinId) -> Option<&PinRecord> {
        self.position(id).map(|i| &self.pins[i])
    }

    pub fn graph(&self) -> PinBoardGraph {
        PinBoardGraph::from_edges(
            self.pins
                .iter()
                .flat_map(|p| p.board_ids.iter().map(move |&b| (p.id, b))),
        )
    }

    pub fn write_jsonl(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let file = fs::File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: 1,
            patches: self.patches,
            d_in: self.d_in,
            count: self.pins.len(),
            config_hash: prov.config_hash.clone(),
            seed: prov.seed,
        };
        let mut out = json_line(&header);
        for p in &self.pins {
            out.push_str(&json_line(p));
        }
        w.write_all(out.as_bytes()).and_then(|_| w.flush()).map_err(Error::io(path))
    }

    pub fn read_jsonl(path: &Path) -> Result<(Self, Provenance)> {
        let file = fs::File::open(path).map_err(Error::io(path))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty corpus file"))?
            .map_err(Error::io(path))?;
        let header: CorpusHeader =
            serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.format != CORPUS_FORMAT || header.version != 1 {
            return Err(Error::format(path, "not a version 1 corpus file"));
        }
        let mut pins = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let pin: PinRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("record {}: {e}", i + 1)))?;
            pins.push(pin);
        }
        if pins.len() != header.count {
            return Err(Error::format(
                path,
                format!("header promises {} records, found {}", header.count, pins.len()),
            ));
        }
        let corpus = Self::new(header.patches, header.d_in, pins).map_err(|e| Error::format(path, e.to_string()))?;
        Ok((corpus, Provenance::new(header.config_hash, header.seed)))
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("records serialize");
    s.push('\n');
    s
}

/// Row indices for step `step` of an endless stream of shuffled epochs over
/// `n` items. Epoch `e` uses a permutation seeded by `(seed, label, e)`, so
/// any step can be reproduced without replaying the ones before it.
pub fn stream_indices(n: usize, batch: usize, seed: u64, label: &str, step: u64) -> Vec<usize> {
    let start = step * batch as u64;
    let mut out = Vec::with_capacity(batch);
    let mut pos = start;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n as u64;
        let offset = (pos % n as u64) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_indexed(seed, label, epoch));
            cached = Some((epoch, perm));
        }
        let perm = &cached.as_ref().expect("just filled").1;
        let take = (batch - out.len()).min(n - offset);
        out.extend_from_slice(&perm[offset..offset + take]);
        pos += take as u64;
    }
    out
}

/// Batch sizes and seeds for the two training streams.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub i2t_items: usize,
    pub p2p_items: usize,
    pub i2t_batch: usize,
    pub p2p_batch: usize,
    pub devices: usize,
    pub seed: u64,
}

impl BatchPlan {
    /// Zero batch size disables a stream.
    pub fn new(
        i2t_items: usize,
        p2p_items: usize,
        i2t_batch: usize,
        p2p_batch: usize,
        devices: usize,
        seed: u64,
    ) -> Result<Self> {
        if devices == 0 {
            return Err(Error::Config("device count must be at least 1".into()));
        }
        for (name, b, n) in [("i2t", i2t_batch, i2t_items), ("p2p", p2p_batch, p2p_items)] {
            if b % devices != 0 {
                return Err(Error::Config(format!(
                    "{name} batch {b} is not divisible by {devices} devices"
                )));
            }
            if b > n {
                return Err(Error::Precondition(format!(
                    "{name} batch of {b} needs at least {b} items but only {n} are available; \
                     lower the batch size or enlarge the corpus"
                )));
            }
        }
        Ok(Self {
            i2t_items,
            p2p_items,
            i2t_batch,
            p2p_batch,
            devices,
            seed,
        })
    }

    /// (image-text rows, neighbor-pair rows) for one step.
    pub fn step(&self, step: u64) -> (Vec<usize>, Vec<usize>) {
        let pick = |n, b, label| {
            if b == 0 {
                Vec::new()
            } else {
                stream_indices(n, b, self.seed, label, step)
            }
        };
        (
            pick(self.i2t_items, self.i2t_batch, "i2t-epoch"),
            pick(self.p2p_items, self.p2p_batch, "p2p-epoch"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank(id: PinId) -> PinRecord {
        PinRecord {
            id,
            image: vec![0.0; 4],
            title: None,
            description: None,
            caption: None,
            nav_query: None,
            annotations: None,
            board_ids: vec![1],
        }
    }

    #[test]
    fn descriptive_coalescing() {
        let mut p = blank(1);
        assert_eq!(coalesce_descriptive_text(&p), "");
        p.caption = Some("cap".into());
        assert_eq!(coalesce_descriptive_text(&p), "cap");
        p.description = Some("long text".into());
        p.title = Some("oak table".into());
        assert_eq!(coalesce_descriptive_text(&p), "oak table");
        p.title = Some(String::new());
        assert_eq!(coalesce_descriptive_text(&p), "long text");
    }

    #[test]
    fn coalescing_over_all_presence_combinations() {
        for mask in 0..8u8 {
            let mut p = blank(1);
            if mask & 1 != 0 {
                p.title = Some("t".into());
            }
            if mask & 2 != 0 {
                p.description = Some("d".into());
            }
            if mask & 4 != 0 {
                p.caption = Some("c".into());
            }
            let want = if mask & 1 != 0 {
                "t"
            } else if mask & 2 != 0 {
                "d"
            } else if mask & 4 != 0 {
                "c"
            } else {
                ""
            };
            assert_eq!(coalesce_descriptive_text(&p), want, "mask {mask}");
            assert_eq!(coalesce_descriptive_text(&p), coalesce_descriptive_text(&p.clone()));
        }
    }

    #[test]
    fn keyword_coalescing() {
        let mut p = blank(1);
        assert_eq!(coalesce_keyword_text(&p), "");
        p.annotations = Some(vec!["oak".into(), "table".into()]);
        assert_eq!(coalesce_keyword_text(&p), "oak table");
        p.nav_query = Some("farmhouse decor".into());
        assert_eq!(coalesce_keyword_text(&p), "farmhouse decor");
    }

    #[test]
    fn filter_examples() {
        let scores = [0.1, 0.4, 0.9];
        let kept = filter_by_alignment(vec![0usize, 1, 2], 0.3, |&i| scores[i]);
        assert_eq!(kept, vec![1, 2]);
        assert_eq!(filter_by_alignment(vec![0usize, 1, 2], f64::NEG_INFINITY, |&i| scores[i]).len(), 3);
        assert!(filter_by_alignment(vec![0usize, 1, 2], 0.95, |&i| scores[i]).is_empty());
    }

    proptest! {
        #[test]
        fn filter_is_monotone_subsequence(scores in proptest::collection::vec(-1.0f64..1.0, 0..40), a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let idx: Vec<usize> = (0..scores.len()).collect();
            let k_lo = filter_by_alignment(idx.clone(), lo, |&i| scores[i]);
            let k_hi = filter_by_alignment(idx, hi, |&i| scores[i]);
            prop_assert!(k_hi.len() <= k_lo.len());
            prop_assert!(k_lo.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(k_hi.iter().all(|i| k_lo.contains(i)));
        }

        #[test]
        fn stream_batches_cover_epochs(n in 1usize..50, b in 1usize..20, seed in 0u64..100) {
            prop_assume!(b <= n);
            // the first `n` positions of the stream are one permutation
            let steps = n.div_ceil(b) as u64;
            let all: Vec<usize> = (0..steps).flat_map(|s| stream_indices(n, b, seed, "x", s)).collect();
            let mut first: Vec<usize> = all[..n].to_vec();
            first.sort();
            prop_assert_eq!(first, (0..n).collect::<Vec<_>>());
        }
    }

    fn small_spec() -> LatentTopicSpec {
        LatentTopicSpec { topics: 2, pins_per_topic: 50, heldout_pins: 20, ..LatentTopicSpec::default() }
    }

    #[test]
    fn zero_noise_images_match_within_topic() {
        let spec = LatentTopicSpec { noise: 0.0, ..small_spec() };
        let c = generate_synthetic_corpus(&spec, 1).unwrap();
        let by_topic = |t: usize| c.labels.iter().filter(move |l| l.topic == t && l.id < HELDOUT_OFFSET);
        for t in 0..2 {
            let first = c.train.get(by_topic(t).next().unwrap().id).unwrap();
            for l in by_topic(t) {
                assert_eq!(c.train.get(l.id).unwrap().image, first.image);
            }
        }
    }

    #[test]
    fn boards_stay_within_topics() {
        let c = generate_synthetic_corpus(&small_spec(), 2).unwrap();
        let g = c.train_graph();
        let topic_of: HashMap<PinId, usize> = c.labels.iter().map(|l| (l.id, l.topic)).collect();
        let mut board_topics: HashMap<BoardId, usize> = HashMap::new();
        for (p, b) in g.edges() {
            let t = *board_topics.entry(b).or_insert(topic_of[&p]);
            assert_eq!(t, topic_of[&p]);
        }
        let clusters: std::collections::BTreeSet<usize> = board_topics.values().copied().collect();
        assert_eq!(clusters.len(), 2);
        assert!(c.heldout_graph().pins().all(|p| p >= HELDOUT_OFFSET));
        assert!(c.heldout_graph().edges().all(|(_, b)| b >= HELDOUT_OFFSET));
    }

    #[test]
    fn topic_patterns_are_separated() {
        let tm = TopicModel::new(&LatentTopicSpec::default(), 3).unwrap();
        for (i, a) in tm.topic_patterns.iter().enumerate() {
            for b in &tm.topic_patterns[i + 1..] {
                let cos = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
                assert!(cos.abs() < 0.5);
            }
        }
    }

    #[test]
    fn default_corpus_is_separable() {
        let c = generate_synthetic_corpus(&LatentTopicSpec::default(), 7).unwrap();
        let topic: HashMap<PinId, usize> = c.labels.iter().map(|l| (l.id, l.topic)).collect();
        let pins = &c.train.pins;
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..pins.len() {
            for j in i + 1..pins.len() {
                let (a, b) = (&pins[i].image, &pins[j].image);
                let cos = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
                if topic[&pins[i].id] == topic[&pins[j].id] {
                    intra += cos;
                    ni += 1;
                } else {
                    inter += cos;
                    nx += 1;
                }
            }
        }
        let gap = intra / ni as f64 - inter / nx as f64;
        assert!(gap >= 0.3, "gap {gap}");
    }

    #[test]
    fn stub_scorer_flags_mismatched_text() {
        let spec = LatentTopicSpec { mismatch_rate: 0.5, ..small_spec() };
        let c = generate_synthetic_corpus(&spec, 4).unwrap();
        let scorer = StubScorer(&c.topics);
        let kept = filter_pins(c.train.pins.clone(), &scorer, 0.5);
        assert!(kept.len() < c.train.len());
        let topic: HashMap<PinId, usize> = c.labels.iter().map(|l| (l.id, l.topic)).collect();
        for p in &kept {
            let text = coalesce_descriptive_text(p);
            let named = c.topics.topic_words.iter().position(|w| text.split_whitespace().any(|x| x == w));
            assert_eq!(named, Some(topic[&p.id]));
        }
        let mut empty = blank(9);
        empty.image = c.train.pins[0].image.clone();
        assert_eq!(filter_pins(vec![empty], &scorer, 0.5).len(), 1);
    }

    #[test]
    fn captions_name_the_image_topic() {
        let c = generate_synthetic_corpus(&small_spec(), 5).unwrap();
        let topic: HashMap<PinId, usize> = c.labels.iter().map(|l| (l.id, l.topic)).collect();
        let cap = StubCaptioner(&c.topics);
        for p in &c.train.pins {
            let words: Vec<String> = cap.caption(&p.image).split(' ').map(str::to_string).collect();
            assert_eq!(words[0], c.topics.topic_words[topic[&p.id]]);
        }
    }

    #[test]
    fn corpus_file_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance::new("cafe", 6);
        let a = generate_synthetic_corpus(&small_spec(), 6).unwrap();
        let b = generate_synthetic_corpus(&small_spec(), 6).unwrap();
        assert_eq!(a, b);
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        a.train.write_jsonl(&pa, &prov).unwrap();
        b.train.write_jsonl(&pb, &prov).unwrap();
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        let (back, p) = Corpus::read_jsonl(&pa).unwrap();
        assert_eq!(back, a.train);
        assert_eq!(p, prov);
        fs::write(&pa, "{\"format\":\"other\"}\n").unwrap();
        assert!(matches!(Corpus::read_jsonl(&pa), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(Corpus::new(2, 2, vec![blank(1), blank(1)]).is_err());
    }

    #[test]
    fn batch_plan_examples() {
        let plan = BatchPlan::new(400, 300, 64, 16, 4, 1).unwrap();
        assert_eq!((plan.i2t_batch / plan.devices, plan.p2p_batch / plan.devices), (16, 4));
        let (i, p) = plan.step(3);
        assert_eq!((i.len(), p.len()), (64, 16));
        assert_eq!(plan.step(3), BatchPlan::new(400, 300, 64, 16, 4, 1).unwrap().step(3));
        assert_ne!(plan.step(3), plan.step(4));
        assert!(matches!(BatchPlan::new(10, 300, 64, 16, 4, 1), Err(Error::Precondition(_))));
        assert!(matches!(BatchPlan::new(400, 300, 62, 16, 4, 1), Err(Error::Config(_))));
    }
}
