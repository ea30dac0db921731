//! In-context exemplar selection: random, commonsense-anchored, image-anchored
//! and combined retrieval of `k` demonstrations per anchor.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CommonsenseParameter, MemeRecord, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor_io::{ensure_dir, read_f32, read_json, round_f32, write_f32, write_json};

/// Demonstration counts evaluated in the original experiments.
pub const K_GRID: [usize; 5] = [1, 2, 4, 8, 10];
/// Commonsense block sizes evaluated for combined retrieval.
pub const C_GRID: [usize; 3] = [1, 2, 4];
/// Lookup lists hold at most this many exemplars per parameter.
pub const LOOKUP_PER_PARAMETER: usize = 5;
/// Above this many rows the exact scan is still used but a faster backend should be plugged in.
pub const EXACT_SCAN_LIMIT: usize = 10_000;

// ---------------------------------------------------------------------------
// Strategy and result types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Commonsense,
    Image,
    Combined,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::Commonsense => "commonsense",
            Strategy::Image => "image",
            Strategy::Combined => "combined",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "commonsense" => Ok(Strategy::Commonsense),
            "image" => Ok(Strategy::Image),
            "combined" => Ok(Strategy::Combined),
            other => Err(Error::InvalidArgument(format!("unknown retrieval strategy `{other}`"))),
        }
    }
}

/// Which retriever produced a demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Random,
    Commonsense,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub commonsense: ParameterSet,
    pub intervention: String,
    pub source: Source,
}

impl Demonstration {
    fn from_record(r: &MemeRecord, source: Source) -> Self {
        Demonstration {
            id: r.id.clone(),
            commonsense: r.commonsense.clone(),
            intervention: r.intervention.clone(),
            source,
        }
    }
}

/// An anchor with its ordered demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InContextSet {
    pub anchor_id: String,
    pub demonstrations: Vec<Demonstration>,
    pub strategy: Strategy,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
}

impl InContextSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.demonstrations.iter().map(|d| d.id.as_str())
    }

    pub fn count_from(&self, source: Source) -> usize {
        self.demonstrations.iter().filter(|d| d.source == source).count()
    }
}

fn retrieval_error(anchor: &MemeRecord, message: impl Into<String>) -> Error {
    Error::Retrieval {
        anchor: anchor.id.clone(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Candidate pool
// ---------------------------------------------------------------------------

/// Training records demonstrations may be drawn from, indexed by id.
#[derive(Debug, Clone)]
pub struct CandidatePool<'a> {
    records: Vec<&'a MemeRecord>,
    by_id: HashMap<&'a str, usize>,
}

impl<'a> CandidatePool<'a> {
    pub fn new(records: impl IntoIterator<Item = &'a MemeRecord>) -> Self {
        let records: Vec<&MemeRecord> = records.into_iter().collect();
        let by_id = records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        CandidatePool { records, by_id }
    }

    pub fn records(&self) -> &[&'a MemeRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&'a MemeRecord> {
        self.by_id.get(id).map(|&i| self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Embedding index
// ---------------------------------------------------------------------------

/// Nearest-neighbour backend. Results are sorted by non-increasing cosine
/// similarity with ties broken by ascending id.
pub trait VectorSearch {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn search(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Vec<(String, f64)>>;
}

/// Exact cosine index over unit-normalized rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    /// Row-major `[N, dim]`, each row unit length and `f32`-representable.
    vectors: Vec<f64>,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    n: usize,
    d_img: usize,
    metric: String,
    ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn build<'a>(records: impl IntoIterator<Item = &'a MemeRecord>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        let mut dim = None;
        let mut seen = HashSet::new();
        for r in records {
            let d = *dim.get_or_insert(r.image_features.len());
            if r.image_features.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "index features",
                    expected: d,
                    got: r.image_features.len(),
                });
            }
            if !seen.insert(r.id.clone()) {
                return Err(Error::Validation(format!("duplicate id {} in index", r.id)));
            }
            let unit = normalize(&r.image_features)
                .ok_or_else(|| Error::Validation(format!("record {} has a zero-norm feature vector", r.id)))?;
            vectors.extend(unit.into_iter().map(round_f32));
            ids.push(r.id.clone());
        }
        let dim = dim.ok_or_else(|| Error::InvalidArgument("cannot index an empty record set".into()))?;
        if ids.len() > EXACT_SCAN_LIMIT {
            log::warn!(
                "exact cosine scan over {} rows; consider an approximate backend",
                ids.len()
            );
        }
        Ok(EmbeddingIndex { ids, vectors, dim })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_f32(&dir.join("vectors.f32"), self.vectors.iter().copied())?;
        write_json(
            &dir.join("manifest.json"),
            &IndexManifest {
                n: self.ids.len(),
                d_img: self.dim,
                metric: "cosine".into(),
                ids: self.ids.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: IndexManifest = read_json(&dir.join("manifest.json"))?;
        if m.ids.len() != m.n || m.metric != "cosine" {
            return Err(Error::checkpoint(dir, "inconsistent index manifest"));
        }
        let vectors = read_f32(&dir.join("vectors.f32"), m.n * m.d_img)?;
        Ok(EmbeddingIndex {
            ids: m.ids,
            vectors,
            dim: m.d_img,
        })
    }
}

impl VectorSearch for EmbeddingIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn search(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Vec<(String, f64)>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "query features",
                expected: self.dim,
                got: query.len(),
            });
        }
        let q = normalize(query).ok_or_else(|| Error::InvalidArgument("zero-norm query vector".into()))?;
        let mut scored: Vec<(usize, f64)> = (0..self.ids.len())
            .filter(|&i| Some(self.ids[i].as_str()) != exclude)
            .map(|i| (i, dot(self.row(i), &q)))
            .collect();
        scored.sort_by(|a, b| by_similarity(a.1, b.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }
}

fn by_similarity(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

// ---------------------------------------------------------------------------
// Lookup set
// ---------------------------------------------------------------------------

/// Up to five training exemplars per parameter, plus the training frequency of
/// every parameter (used for rarest-first ordering).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupSet {
    pub lists: BTreeMap<CommonsenseParameter, Vec<String>>,
    pub frequency: BTreeMap<CommonsenseParameter, usize>,
}

impl LookupSet {
    pub fn build<'a>(train: impl IntoIterator<Item = &'a MemeRecord>, seed: u64) -> Self {
        let train: Vec<&MemeRecord> = train.into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lists = BTreeMap::new();
        let mut frequency = BTreeMap::new();
        for p in CommonsenseParameter::ALL {
            let mut ids: Vec<&str> = train
                .iter()
                .filter(|r| r.commonsense.contains(&p))
                .map(|r| r.id.as_str())
                .collect();
            frequency.insert(p, ids.len());
            ids.shuffle(&mut rng);
            ids.truncate(LOOKUP_PER_PARAMETER);
            lists.insert(p, ids.into_iter().map(String::from).collect());
        }
        LookupSet { lists, frequency }
    }

    pub fn list(&self, p: CommonsenseParameter) -> &[String] {
        self.lists.get(&p).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Parameters in ascending training frequency, ties in category order.
    pub fn rarest_first(&self, params: &ParameterSet) -> Vec<CommonsenseParameter> {
        let mut order: Vec<CommonsenseParameter> = params.iter().copied().collect();
        order.sort_by_key(|p| (self.frequency.get(p).copied().unwrap_or(0), *p));
        order
    }
}

// ---------------------------------------------------------------------------
// Retrievers
// ---------------------------------------------------------------------------

fn check_k(anchor: &MemeRecord, k: usize, available: usize) -> Result<()> {
    if k == 0 {
        return Err(retrieval_error(anchor, "k must be at least 1"));
    }
    if k > available {
        return Err(retrieval_error(
            anchor,
            format!("k={k} exceeds the {available} available candidates"),
        ));
    }
    Ok(())
}

pub fn retrieve_random(pool: &CandidatePool<'_>, anchor: &MemeRecord, k: usize, seed: u64) -> Result<InContextSet> {
    let candidates: Vec<&MemeRecord> = pool.records().iter().copied().filter(|r| r.id != anchor.id).collect();
    check_k(anchor, k, candidates.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), k);
    Ok(InContextSet {
        anchor_id: anchor.id.clone(),
        demonstrations: picks
            .into_iter()
            .map(|i| Demonstration::from_record(candidates[i], Source::Random))
            .collect(),
        strategy: Strategy::Random,
        k,
        c: None,
    })
}

fn image_ranking(
    index: &impl VectorSearch,
    pool: &CandidatePool<'_>,
    anchor: &MemeRecord,
    limit: usize,
) -> Result<Vec<String>> {
    let hits = index.search(&anchor.image_features, limit, Some(&anchor.id))?;
    if let Some((id, _)) = hits.iter().find(|(id, _)| pool.get(id).is_none()) {
        return Err(retrieval_error(anchor, format!("indexed id {id} is not in the candidate pool")));
    }
    Ok(hits.into_iter().map(|(id, _)| id).collect())
}

pub fn retrieve_image(
    index: &impl VectorSearch,
    pool: &CandidatePool<'_>,
    anchor: &MemeRecord,
    k: usize,
) -> Result<InContextSet> {
    let available = index.len() - usize::from(pool.get(&anchor.id).is_some());
    check_k(anchor, k, available)?;
    let ranked = image_ranking(index, pool, anchor, k)?;
    Ok(InContextSet {
        anchor_id: anchor.id.clone(),
        demonstrations: ranked
            .iter()
            .map(|id| Demonstration::from_record(pool.get(id).expect("checked"), Source::Image))
            .collect(),
        strategy: Strategy::Image,
        k,
        c: None,
    })
}

/// Round-robin over the anchor's parameters in rarest-first order: the first
/// pass takes one exemplar per parameter, later passes fill up to `k`.
pub fn retrieve_commonsense(
    lookup: &LookupSet,
    pool: &CandidatePool<'_>,
    anchor: &MemeRecord,
    k: usize,
    seed: u64,
) -> Result<InContextSet> {
    if anchor.commonsense.is_empty() {
        return Err(retrieval_error(anchor, "anchor has no commonsense parameters"));
    }
    if k == 0 {
        return Err(retrieval_error(anchor, "k must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<&str>> = lookup
        .rarest_first(&anchor.commonsense)
        .into_iter()
        .map(|p| {
            let mut ids: Vec<&str> = lookup
                .list(p)
                .iter()
                .map(String::as_str)
                .filter(|id| *id != anchor.id)
                .collect();
            ids.shuffle(&mut rng);
            ids.reverse();
            ids
        })
        .filter(|q| !q.is_empty())
        .collect();
    if queues.is_empty() {
        return Err(retrieval_error(anchor, "every lookup list for the anchor's parameters is empty"));
    }

    let mut chosen: Vec<&str> = Vec::with_capacity(k);
    while chosen.len() < k {
        let mut progressed = false;
        for queue in queues.iter_mut() {
            if chosen.len() == k {
                break;
            }
            while let Some(id) = queue.pop() {
                if !chosen.contains(&id) {
                    chosen.push(id);
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            return Err(retrieval_error(
                anchor,
                format!("only {} distinct commonsense candidates for k={k}", chosen.len()),
            ));
        }
    }

    let demonstrations = chosen
        .into_iter()
        .map(|id| {
            pool.get(id)
                .map(|r| Demonstration::from_record(r, Source::Commonsense))
                .ok_or_else(|| retrieval_error(anchor, format!("lookup id {id} is not in the candidate pool")))
        })
        .collect::<Result<_>>()?;
    Ok(InContextSet {
        anchor_id: anchor.id.clone(),
        demonstrations,
        strategy: Strategy::Commonsense,
        k,
        c: None,
    })
}

/// `c` commonsense demonstrations followed by `k - c` image-ranked ones,
/// skipping any record already taken.
pub fn retrieve_combined(
    lookup: &LookupSet,
    index: &impl VectorSearch,
    pool: &CandidatePool<'_>,
    anchor: &MemeRecord,
    k: usize,
    c: usize,
    seed: u64,
) -> Result<InContextSet> {
    if c == 0 || c >= k {
        return Err(retrieval_error(anchor, format!("combined retrieval needs 1 <= c < k, got c={c}, k={k}")));
    }
    if !C_GRID.contains(&c) {
        log::warn!("c={c} is outside the evaluated grid {C_GRID:?}");
    }
    let mut demonstrations = retrieve_commonsense(lookup, pool, anchor, c, seed)?.demonstrations;
    let taken: HashSet<String> = demonstrations.iter().map(|d| d.id.clone()).collect();
    let ranked = image_ranking(index, pool, anchor, index.len())?;
    demonstrations.extend(
        ranked
            .iter()
            .filter(|id| !taken.contains(*id))
            .take(k - c)
            .map(|id| Demonstration::from_record(pool.get(id).expect("checked"), Source::Image)),
    );
    if demonstrations.len() < k {
        return Err(retrieval_error(
            anchor,
            format!("only {} distinct candidates for k={k}", demonstrations.len()),
        ));
    }
    Ok(InContextSet {
        anchor_id: anchor.id.clone(),
        demonstrations,
        strategy: Strategy::Combined,
        k,
        c: Some(c),
    })
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub c: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            strategy: Strategy::Image,
            k: 4,
            c: 1,
        }
    }
}

/// Everything the retrievers need, built once over the training split.
pub struct Retriever<'a> {
    pub pool: CandidatePool<'a>,
    pub index: EmbeddingIndex,
    pub lookup: LookupSet,
}

impl<'a> Retriever<'a> {
    pub fn new(train: impl IntoIterator<Item = &'a MemeRecord>, seed: u64) -> Result<Self> {
        let pool = CandidatePool::new(train);
        let index = EmbeddingIndex::build(pool.records().iter().copied())?;
        let lookup = LookupSet::build(pool.records().iter().copied(), seed);
        Ok(Retriever { pool, index, lookup })
    }

    pub fn with_index(pool: CandidatePool<'a>, index: EmbeddingIndex, seed: u64) -> Self {
        let lookup = LookupSet::build(pool.records().iter().copied(), seed);
        Retriever { pool, index, lookup }
    }

    pub fn retrieve(&self, anchor: &MemeRecord, config: &RetrievalConfig, seed: u64) -> Result<InContextSet> {
        match config.strategy {
            Strategy::Random => retrieve_random(&self.pool, anchor, config.k, seed),
            Strategy::Image => retrieve_image(&self.index, &self.pool, anchor, config.k),
            Strategy::Commonsense => retrieve_commonsense(&self.lookup, &self.pool, anchor, config.k, seed),
            Strategy::Combined => {
                retrieve_combined(&self.lookup, &self.index, &self.pool, anchor, config.k, config.c, seed)
            }
        }
    }
}

/// Per-anchor seed so that each anchor's sample is independent of the others.
pub fn anchor_seed(seed: u64, position: usize) -> u64 {
    let mut z = seed ^ (position as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One in-context set per training record, each record acting as its own anchor.
pub fn build_icl_dataset(train: &[&MemeRecord], config: &RetrievalConfig, seed: u64) -> Result<Vec<InContextSet>> {
    let retriever = Retriever::new(train.iter().copied(), seed)?;
    build_icl_sets(&retriever, train, config, seed)
}

/// In-context sets for arbitrary anchors (e.g. held-out records) against a training pool.
pub fn build_icl_sets(
    retriever: &Retriever<'_>,
    anchors: &[&MemeRecord],
    config: &RetrievalConfig,
    seed: u64,
) -> Result<Vec<InContextSet>> {
    if !K_GRID.contains(&config.k) {
        log::warn!("k={} is outside the evaluated grid {K_GRID:?}", config.k);
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, anchor)| retriever.retrieve(anchor, config, anchor_seed(seed, i)))
        .collect()
}

pub fn write_icl_dataset(path: &Path, sets: &[InContextSet]) -> Result<()> {
    let mut out = Vec::new();
    for s in sets {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_icl_dataset(path: &Path) -> Result<Vec<InContextSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        sets.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(sets)
}
