//! Pin-board bipartite graph, random-walk visit counting, the top-K
//! neighbor cache and positive-pair sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::Provenance;
use crate::rng::rng_indexed;

pub type PinId = u64;
pub type BoardId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Pin(PinId),
    Board(BoardId),
}

/// Undirected pin-board adjacency with sorted, deduplicated lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PinBoardGraph {
    pins: BTreeMap<PinId, Vec<BoardId>>,
    boards: BTreeMap<BoardId, Vec<PinId>>,
}

impl PinBoardGraph {
    pub fn from_edges(edges: impl IntoIterator<Item = (PinId, BoardId)>) -> Self {
        let mut g = Self::default();
        for (p, b) in edges {
            g.pins.entry(p).or_default().push(b);
            g.boards.entry(b).or_default().push(p);
        }
        for list in g.pins.values_mut().chain(g.boards.values_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        g
    }

    /// Accepts typed endpoints in either order; same-kind edges are rejected.
    pub fn from_node_edges(edges: impl IntoIterator<Item = (Node, Node)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b) in edges {
            match (a, b) {
                (Node::Pin(p), Node::Board(bd)) | (Node::Board(bd), Node::Pin(p)) => out.push((p, bd)),
                _ => {
                    return Err(Error::Precondition(format!(
                        "edge {a:?}-{b:?} does not connect a pin to a board"
                    )))
                }
            }
        }
        Ok(Self::from_edges(out))
    }

    pub fn pin_count(&self) -> usize {
        self.pins.len()
    }

    pub fn board_count(&self) -> usize {
        self.boards.len()
    }

    pub fn edge_count(&self) -> usize {
        self.pins.values().map(Vec::len).sum()
    }

    pub fn pins(&self) -> impl Iterator<Item = PinId> + '_ {
        self.pins.keys().copied()
    }

    pub fn boards_of(&self, pin: PinId) -> &[BoardId] {
        self.pins.get(&pin).map_or(&[], Vec::as_slice)
    }

    pub fn pins_of(&self, board: BoardId) -> &[PinId] {
        self.boards.get(&board).map_or(&[], Vec::as_slice)
    }

    pub fn edges(&self) -> impl Iterator<Item = (PinId, BoardId)> + '_ {
        self.pins
            .iter()
            .flat_map(|(&p, bs)| bs.iter().map(move |&b| (p, b)))
    }

    pub fn write_tsv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut s = prov.header_line();
        s.push('\n');
        for (p, b) in self.edges() {
            let _ = writeln!(s, "{p}\t{b}");
        }
        fs::write(path, s).map_err(Error::io(path))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let rows = read_rows::<2>(path)?;
        Ok(Self::from_edges(rows.into_iter().map(|[p, b]| (p, b))))
    }
}

/// Parses non-comment lines of `N` tab-separated unsigned integers.
fn read_rows<const N: usize>(path: &Path) -> Result<Vec<[u64; N]>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut row = [0u64; N];
        let mut fields = line.split('\t');
        for slot in &mut row {
            *slot = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("line {}: expected {N} integer fields", i + 1)))?;
        }
        if fields.next().is_some() {
            return Err(Error::format(path, format!("line {}: expected {N} fields", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkParams {
    pub walk_count: usize,
    pub walk_length: usize,
    /// Probability of jumping back to the query after reaching a pin.
    pub restart: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            walk_count: 1000,
            walk_length: 10,
            restart: 0.5,
        }
    }
}

impl WalkParams {
    pub fn validate(&self) -> Result<()> {
        if self.walk_count == 0 || self.walk_length == 0 {
            return Err(Error::Config("walk count and length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.restart) {
            return Err(Error::Config(format!("restart probability {} outside [0, 1]", self.restart)));
        }
        Ok(())
    }
}

/// Visit counts of pins reached from `query`. Each step moves to a uniform
/// neighbor, alternating pin→board→pin; after arriving at a pin the walk
/// jumps back to the query with probability `restart`. The query itself is
/// never counted.
pub fn random_walk_counts(
    graph: &PinBoardGraph,
    query: PinId,
    params: &WalkParams,
    seed: u64,
) -> Result<BTreeMap<PinId, u64>> {
    params.validate()?;
    if graph.boards_of(query).is_empty() {
        return Err(Error::Precondition(format!("pin {query} has no neighbors")));
    }
    let mut rng = rng_indexed(seed, "walk", query);
    let mut counts = BTreeMap::new();
    for _ in 0..params.walk_count {
        let mut at = Node::Pin(query);
        for _ in 0..params.walk_length {
            at = match at {
                Node::Pin(p) => Node::Board(*graph.boards_of(p).choose(&mut rng).expect("pins have boards")),
                Node::Board(b) => {
                    let p = *graph.pins_of(b).choose(&mut rng).expect("boards have pins");
                    if p != query {
                        *counts.entry(p).or_insert(0) += 1;
                    }
                    if rng.random::<f64>() < params.restart {
                        Node::Pin(query)
                    } else {
                        Node::Pin(p)
                    }
                }
            };
        }
    }
    Ok(counts)
}

/// Top-K visited neighbors per query pin.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborCache {
    pub entries: BTreeMap<PinId, Vec<(PinId, u64)>>,
}

impl NeighborCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pin: PinId) -> &[(PinId, u64)] {
        self.entries.get(&pin).map_or(&[], Vec::as_slice)
    }

    pub fn write_tsv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut s = prov.header_line();
        s.push('\n');
        for (q, list) in &self.entries {
            for (n, c) in list {
                let _ = writeln!(s, "{q}\t{n}\t{c}");
            }
        }
        fs::write(path, s).map_err(Error::io(path))
    }

    /// Rows keep file order within each query.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut entries: BTreeMap<PinId, Vec<(PinId, u64)>> = BTreeMap::new();
        for [q, n, c] in read_rows::<3>(path)? {
            entries.entry(q).or_default().push((n, c));
        }
        Ok(Self { entries })
    }
}

/// Sorts by descending count, then ascending id, and keeps the first `k`.
pub fn top_k_counts(counts: &BTreeMap<PinId, u64>, k: usize) -> Vec<(PinId, u64)> {
    let mut v: Vec<(PinId, u64)> = counts.iter().map(|(&p, &c)| (p, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

pub fn build_neighbor_cache(
    graph: &PinBoardGraph,
    k: usize,
    params: &WalkParams,
    seed: u64,
) -> Result<NeighborCache> {
    params.validate()?;
    if graph.pin_count() == 0 {
        return Err(Error::Precondition("graph has no pins".into()));
    }
    let mut entries = BTreeMap::new();
    for pin in graph.pins() {
        let counts = random_walk_counts(graph, pin, params, seed)?;
        let top = top_k_counts(&counts, k);
        if !top.is_empty() {
            entries.insert(pin, top);
        }
    }
    Ok(NeighborCache { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Weighted,
    Uniform,
}

impl SampleMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(Self::Weighted),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Weighted => "weighted",
            Self::Uniform => "uniform",
        }
    }
}

/// A (query, positive) training pair with its sampling weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub query: PinId,
    pub positive: PinId,
    pub weight: u64,
}

/// Up to `n` distinct positives per query, drawn without replacement.
pub fn sample_pairs(cache: &NeighborCache, n: usize, mode: SampleMode, seed: u64) -> Result<Vec<Pair>> {
    if n == 0 {
        return Err(Error::Config("pairs per query must be at least 1".into()));
    }
    if cache.is_empty() {
        return Err(Error::Precondition("neighbor cache is empty".into()));
    }
    let mut out = Vec::new();
    for (&query, list) in &cache.entries {
        let mut rng = rng_indexed(seed, "pairs", query);
        let picked: Vec<&(PinId, u64)> = match mode {
            SampleMode::Uniform => list.choose_multiple(&mut rng, n).collect(),
            SampleMode::Weighted => list
                .choose_multiple_weighted(&mut rng, n.min(list.len()), |e| e.1 as f64)
                .map_err(|e| Error::Precondition(format!("weighted sampling for pin {query}: {e}")))?
                .collect(),
        };
        out.extend(picked.into_iter().map(|&(positive, count)| Pair {
            query,
            positive,
            weight: match mode {
                SampleMode::Weighted => count,
                SampleMode::Uniform => 1,
            },
        }));
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[Pair], prov: &Provenance) -> Result<()> {
    let mut s = prov.header_line();
    s.push('\n');
    for p in pairs {
        let _ = writeln!(s, "{}\t{}\t{}", p.query, p.positive, p.weight);
    }
    fs::write(path, s).map_err(Error::io(path))
}

/// Reads a pair list; also the ingestion path for externally sourced pairs.
pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    Ok(read_rows::<3>(path)?
        .into_iter()
        .map(|[query, positive, weight]| Pair { query, positive, weight })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Expected per-walk pin visit counts by propagating the exact state
    /// distribution: odd steps land on boards, even steps on pins.
    fn exact_visits(g: &PinBoardGraph, query: PinId, p: &WalkParams) -> BTreeMap<PinId, f64> {
        let mut pin_dist: BTreeMap<PinId, f64> = BTreeMap::from([(query, 1.0)]);
        let mut board_dist: BTreeMap<BoardId, f64> = BTreeMap::new();
        let mut visits: BTreeMap<PinId, f64> = BTreeMap::new();
        for step in 1..=p.walk_length {
            if step % 2 == 1 {
                board_dist.clear();
                for (&pin, &m) in &pin_dist {
                    let bs = g.boards_of(pin);
                    for &b in bs {
                        *board_dist.entry(b).or_default() += m / bs.len() as f64;
                    }
                }
            } else {
                let mut arrive: BTreeMap<PinId, f64> = BTreeMap::new();
                for (&b, &m) in &board_dist {
                    let ps = g.pins_of(b);
                    for &pin in ps {
                        *arrive.entry(pin).or_default() += m / ps.len() as f64;
                    }
                }
                for (&pin, &m) in &arrive {
                    if pin != query {
                        *visits.entry(pin).or_default() += m;
                    }
                }
                let total: f64 = arrive.values().sum();
                pin_dist = arrive.into_iter().map(|(k, v)| (k, v * (1.0 - p.restart))).collect();
                *pin_dist.entry(query).or_default() += p.restart * total;
            }
        }
        visits
    }

    fn total_variation(counts: &BTreeMap<PinId, u64>, exact: &BTreeMap<PinId, f64>) -> f64 {
        let n: u64 = counts.values().sum();
        let z: f64 = exact.values().sum();
        let keys: std::collections::BTreeSet<_> = counts.keys().chain(exact.keys()).collect();
        keys.into_iter()
            .map(|k| {
                let a = counts.get(k).copied().unwrap_or(0) as f64 / n as f64;
                let b = exact.get(k).copied().unwrap_or(0.0) / z;
                (a - b).abs()
            })
            .sum::<f64>()
            / 2.0
    }

    fn two_board() -> PinBoardGraph {
        // B1 = {A, B}, B2 = {A, C} with A=1, B=2, C=3
        PinBoardGraph::from_edges([(1, 101), (2, 101), (1, 102), (3, 102)])
    }

    #[test]
    fn forced_transition() {
        let g = PinBoardGraph::from_edges([(1, 101), (2, 101)]);
        let c = random_walk_counts(&g, 1, &WalkParams::default(), 0).unwrap();
        assert_eq!(c.keys().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn symmetric_boards_balance() {
        let p = WalkParams { walk_count: 10_000, ..WalkParams::default() };
        let c = random_walk_counts(&two_board(), 1, &p, 11).unwrap();
        let ratio = c[&2] as f64 / c[&3] as f64;
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn single_step_reaches_no_pins() {
        let p = WalkParams { walk_length: 1, ..WalkParams::default() };
        assert!(random_walk_counts(&two_board(), 1, &p, 0).unwrap().is_empty());
    }

    #[test]
    fn isolated_query_is_an_error() {
        let g = two_board();
        assert!(matches!(
            random_walk_counts(&g, 99, &WalkParams::default(), 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn same_kind_edges_are_rejected() {
        assert!(PinBoardGraph::from_node_edges([(Node::Pin(1), Node::Pin(2))]).is_err());
        assert!(PinBoardGraph::from_node_edges([(Node::Board(1), Node::Board(2))]).is_err());
        let g = PinBoardGraph::from_node_edges([(Node::Board(9), Node::Pin(1))]).unwrap();
        assert_eq!(g.boards_of(1), &[9]);
    }

    #[test]
    fn cache_top_one_matches_enumeration() {
        // A shares two boards with B and one with C: B dominates from A
        let g = PinBoardGraph::from_edges([(1, 101), (2, 101), (1, 102), (2, 102), (1, 103), (3, 103)]);
        let cache = build_neighbor_cache(&g, 1, &WalkParams::default(), 3).unwrap();
        let p = WalkParams::default();
        for (&q, list) in &cache.entries {
            let exact = exact_visits(&g, q, &p);
            let best = exact
                .iter()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
                .map(|(&k, _)| k)
                .unwrap();
            assert_eq!(list.len(), 1);
            assert_eq!(list[0].0, best, "query {q}");
        }
    }

    #[test]
    fn large_k_keeps_every_visited_pin() {
        let cache = build_neighbor_cache(&two_board(), 50, &WalkParams::default(), 1).unwrap();
        assert_eq!(cache.get(1).len(), 2);
        assert!(cache.entries.values().flatten().all(|&(_, c)| c > 0));
        for (&q, list) in &cache.entries {
            assert!(list.iter().all(|&(n, _)| n != q));
            assert!(list.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        }
    }

    #[test]
    fn cache_file_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance::new("h", 5);
        let g = two_board();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        build_neighbor_cache(&g, 5, &WalkParams::default(), 5).unwrap().write_tsv(&a, &prov).unwrap();
        build_neighbor_cache(&g, 5, &WalkParams::default(), 5).unwrap().write_tsv(&b, &prov).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = NeighborCache::read_tsv(&a).unwrap();
        assert_eq!(back, build_neighbor_cache(&g, 5, &WalkParams::default(), 5).unwrap());

        let gp = dir.path().join("g.tsv");
        g.write_tsv(&gp, &prov).unwrap();
        assert_eq!(PinBoardGraph::read_tsv(&gp).unwrap(), g);
        fs::write(&gp, "1\tx\n").unwrap();
        assert!(matches!(PinBoardGraph::read_tsv(&gp), Err(Error::Format { .. })));
    }

    fn count_entry() -> NeighborCache {
        NeighborCache { entries: BTreeMap::from([(1, vec![(2, 90), (3, 10)])]) }
    }

    #[test]
    fn weighted_and_uniform_frequencies() {
        let cache = count_entry();
        for (mode, want) in [(SampleMode::Weighted, 0.9), (SampleMode::Uniform, 0.5)] {
            let hits = (0..10_000u64)
                .filter(|&s| sample_pairs(&cache, 1, mode, s).unwrap()[0].positive == 2)
                .count();
            let f = hits as f64 / 10_000.0;
            assert!((f - want).abs() < 0.02, "{mode:?}: {f}");
        }
    }

    #[test]
    fn exact_n_returns_all_and_zero_n_fails() {
        let cache = count_entry();
        for mode in [SampleMode::Weighted, SampleMode::Uniform] {
            let mut got: Vec<_> = sample_pairs(&cache, 2, mode, 0).unwrap().iter().map(|p| p.positive).collect();
            got.sort();
            assert_eq!(got, vec![2, 3]);
        }
        assert!(sample_pairs(&cache, 0, SampleMode::Uniform, 0).is_err());
        assert!(sample_pairs(&NeighborCache::default(), 1, SampleMode::Uniform, 0).is_err());
    }

    #[test]
    fn pair_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let pairs = sample_pairs(&count_entry(), 2, SampleMode::Weighted, 4).unwrap();
        write_pairs(&path, &pairs, &Provenance::new("h", 4)).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    fn arb_graph() -> impl Strategy<Value = PinBoardGraph> {
        proptest::collection::vec((0u64..8, 100u64..106), 4..20).prop_map(PinBoardGraph::from_edges)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn walk_distribution_matches_markov_oracle(g in arb_graph(), seed in 0u64..1000) {
            prop_assume!(g.pin_count() + g.board_count() <= 20);
            let query = g.pins().next().unwrap();
            let p = WalkParams { walk_count: 10_000, ..WalkParams::default() };
            let counts = random_walk_counts(&g, query, &p, seed).unwrap();
            let exact = exact_visits(&g, query, &p);
            if exact.values().sum::<f64>() == 0.0 {
                prop_assert!(counts.is_empty());
            } else {
                let tv = total_variation(&counts, &exact);
                prop_assert!(tv < 0.05, "tv {}", tv);
            }
        }

        #[test]
        fn samples_never_repeat(g in arb_graph(), seed in 0u64..1000, n in 1usize..6) {
            let cache = build_neighbor_cache(&g, 50, &WalkParams { walk_count: 50, ..WalkParams::default() }, seed).unwrap();
            prop_assume!(!cache.is_empty());
            for mode in [SampleMode::Weighted, SampleMode::Uniform] {
                let pairs = sample_pairs(&cache, n, mode, seed).unwrap();
                for (&q, list) in &cache.entries {
                    let mine: Vec<_> = pairs.iter().filter(|p| p.query == q).map(|p| p.positive).collect();
                    prop_assert_eq!(mine.len(), n.min(list.len()));
                    let mut dedup = mine.clone();
                    dedup.sort();
                    dedup.dedup();
                    prop_assert_eq!(dedup.len(), mine.len());
                }
            }
        }
    }
}
