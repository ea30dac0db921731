//! Meme records, the commonsense taxonomy, corpus files and the synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Harmful records carry at most this many commonsense parameters.
pub const MAX_PARAMETERS: usize = 5;

// ---------------------------------------------------------------------------
// Taxonomy
// ---------------------------------------------------------------------------

/// One of the five meta-categories grouping the commonsense parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaCategory {
    SocialNormViolations,
    Credibility,
    EmpathyEthics,
    ContextualInterpretation,
    PredictingConsequences,
}

/// A harm-relevant commonsense category. Declaration order is the canonical
/// category-id order used for every tie-break in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonsenseParameter {
    HateSpeech,
    BodyShaming,
    Misogyny,
    Stereotyping,
    SexualContent,
    Vulgarity,
    Misinformation,
    ChildExploitation,
    PublicDecorumPrivacy,
    CulturalSensitivity,
    ReligiousSensitivity,
    HumorAppropriateness,
    MentalHealthImpact,
    Violence,
    SubstanceAbuse,
}

pub const NUM_PARAMETERS: usize = 15;

impl CommonsenseParameter {
    pub const ALL: [CommonsenseParameter; NUM_PARAMETERS] = [
        Self::HateSpeech,
        Self::BodyShaming,
        Self::Misogyny,
        Self::Stereotyping,
        Self::SexualContent,
        Self::Vulgarity,
        Self::Misinformation,
        Self::ChildExploitation,
        Self::PublicDecorumPrivacy,
        Self::CulturalSensitivity,
        Self::ReligiousSensitivity,
        Self::HumorAppropriateness,
        Self::MentalHealthImpact,
        Self::Violence,
        Self::SubstanceAbuse,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn meta(self) -> MetaCategory {
        use CommonsenseParameter::*;
        match self {
            HateSpeech | BodyShaming | Misogyny | Stereotyping | SexualContent | Vulgarity => {
                MetaCategory::SocialNormViolations
            }
            Misinformation => MetaCategory::Credibility,
            ChildExploitation | PublicDecorumPrivacy | CulturalSensitivity
            | ReligiousSensitivity => MetaCategory::EmpathyEthics,
            HumorAppropriateness => MetaCategory::ContextualInterpretation,
            MentalHealthImpact | Violence | SubstanceAbuse => MetaCategory::PredictingConsequences,
        }
    }

    pub fn as_str(self) -> &'static str {
        use CommonsenseParameter::*;
        match self {
            HateSpeech => "hate_speech",
            BodyShaming => "body_shaming",
            Misogyny => "misogyny",
            Stereotyping => "stereotyping",
            SexualContent => "sexual_content",
            Vulgarity => "vulgarity",
            Misinformation => "misinformation",
            ChildExploitation => "child_exploitation",
            PublicDecorumPrivacy => "public_decorum_privacy",
            CulturalSensitivity => "cultural_sensitivity",
            ReligiousSensitivity => "religious_sensitivity",
            HumorAppropriateness => "humor_appropriateness",
            MentalHealthImpact => "mental_health_impact",
            Violence => "violence",
            SubstanceAbuse => "substance_abuse",
        }
    }

    /// Distinctive word of the synthetic intervention template.
    pub fn keyword(self) -> &'static str {
        self.template().0
    }

    /// Clause the synthetic intervention template uses for this parameter.
    pub fn phrase(self) -> &'static str {
        self.template().1
    }

    fn template(self) -> (&'static str, &'static str) {
        use CommonsenseParameter::*;
        match self {
            HateSpeech => ("hateful", "spreads hateful speech"),
            BodyShaming => ("shaming", "mocks appearance through body shaming"),
            Misogyny => ("misogynistic", "carries misogynistic ideas about women"),
            Stereotyping => ("stereotypes", "reinforces harmful stereotypes"),
            SexualContent => ("sexual", "shows explicit sexual content"),
            Vulgarity => ("vulgar", "uses vulgar language and imagery"),
            Misinformation => ("misleading", "spreads misleading claims"),
            ChildExploitation => ("children", "exploits children"),
            PublicDecorumPrivacy => ("privacy", "violates public decorum and privacy"),
            CulturalSensitivity => ("cultural", "disrespects cultural traditions"),
            ReligiousSensitivity => ("religious", "offends religious beliefs"),
            HumorAppropriateness => ("joke", "makes an inappropriate joke"),
            MentalHealthImpact => ("mental", "may harm mental health"),
            Violence => ("violence", "glorifies violence"),
            SubstanceAbuse => ("drug", "normalizes drug abuse"),
        }
    }
}

impl fmt::Display for CommonsenseParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommonsenseParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown commonsense parameter `{s}`")))
    }
}

pub type ParameterSet = BTreeSet<CommonsenseParameter>;

/// Template intervention for a parameter set: the clauses of every parameter
/// in category order inside a fixed frame.
pub fn template_intervention(params: &ParameterSet) -> String {
    if params.is_empty() {
        return "this meme is harmless and can be shared".to_string();
    }
    let clauses: Vec<&str> = params.iter().map(|p| p.phrase()).collect();
    format!(
        "this meme {} so it should not be shared publicly",
        clauses.join(" and ")
    )
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemeRecord {
    pub id: String,
    pub image_features: Vec<f64>,
    pub overlay_text: Option<String>,
    pub commonsense: ParameterSet,
    pub intervention: String,
    pub split: Split,
}

impl MemeRecord {
    pub fn is_harmful(&self) -> bool {
        !self.commonsense.is_empty()
    }

    fn validate(&self, d_img: usize) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("record with empty id".into()));
        }
        if self.image_features.len() != d_img {
            return Err(Error::Validation(format!(
                "record {}: image_features has length {}, corpus d_img is {d_img}",
                self.id,
                self.image_features.len()
            )));
        }
        if self.image_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "record {}: non-finite image feature",
                self.id
            )));
        }
        if self.commonsense.len() > MAX_PARAMETERS {
            return Err(Error::Validation(format!(
                "record {}: {} commonsense parameters (at most {MAX_PARAMETERS})",
                self.id,
                self.commonsense.len()
            )));
        }
        if self.split == Split::Train && self.intervention.trim().is_empty() {
            return Err(Error::Validation(format!(
                "record {}: train record without intervention",
                self.id
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<CommonsenseParameter, usize>,
    pub total: usize,
    /// Symmetric pair counts indexed by category id; the diagonal holds the marginals.
    pub cooccurrence: Vec<Vec<usize>>,
}

impl CorpusStats {
    pub fn compute<'a>(records: impl IntoIterator<Item = &'a MemeRecord>) -> Self {
        let mut counts: BTreeMap<CommonsenseParameter, usize> =
            CommonsenseParameter::ALL.iter().map(|&p| (p, 0)).collect();
        let mut cooccurrence = vec![vec![0usize; NUM_PARAMETERS]; NUM_PARAMETERS];
        let mut total = 0;
        for r in records {
            total += 1;
            for &a in &r.commonsense {
                *counts.get_mut(&a).expect("all parameters present") += 1;
                for &b in &r.commonsense {
                    cooccurrence[a.index()][b.index()] += 1;
                }
            }
        }
        CorpusStats {
            counts,
            total,
            cooccurrence,
        }
    }

    pub fn count(&self, p: CommonsenseParameter) -> usize {
        self.counts.get(&p).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, a: CommonsenseParameter, b: CommonsenseParameter) -> usize {
        self.cooccurrence[a.index()][b.index()]
    }

    /// Distinct unordered pairs sorted by descending co-occurrence, ties by category order.
    pub fn top_pairs(&self) -> Vec<(CommonsenseParameter, CommonsenseParameter, usize)> {
        let mut pairs = Vec::new();
        for (i, &a) in CommonsenseParameter::ALL.iter().enumerate() {
            for &b in &CommonsenseParameter::ALL[i + 1..] {
                let c = self.pair_count(a, b);
                if c > 0 {
                    pairs.push((a, b, c));
                }
            }
        }
        pairs.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        pairs
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// A validated, immutable set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    records: Vec<MemeRecord>,
    d_img: usize,
    stats: CorpusStats,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Validates every record invariant and the disjointness of the splits.
    pub fn new(records: Vec<MemeRecord>) -> Result<Self> {
        let d_img = records
            .first()
            .map(|r| r.image_features.len())
            .ok_or_else(|| Error::Validation("corpus is empty".into()))?;
        let mut by_id: HashMap<String, usize> = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(d_img)?;
            if let Some(&j) = by_id.get(&r.id) {
                let msg = if records[j].split != r.split {
                    format!("record {} appears in both train and test splits", r.id)
                } else {
                    format!("duplicate record id {}", r.id)
                };
                return Err(Error::Validation(msg));
            }
            by_id.insert(r.id.clone(), i);
        }
        let stats = CorpusStats::compute(&records);
        Ok(Corpus {
            records,
            d_img,
            stats,
            by_id,
        })
    }

    pub fn records(&self) -> &[MemeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_img(&self) -> usize {
        self.d_img
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn get(&self, id: &str) -> Option<&MemeRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> Vec<&MemeRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn train(&self) -> Vec<&MemeRecord> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&MemeRecord> {
        self.split(Split::Test)
    }

    pub fn into_records(self) -> Vec<MemeRecord> {
        self.records
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MemeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Corpus::new(records)
}

pub fn write_corpus<'a>(path: &Path, records: impl IntoIterator<Item = &'a MemeRecord>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Deterministic train/test partition.
///
/// The train side receives `max(1, floor(fraction * n))` records chosen by a
/// seeded shuffle; both sides keep the input order.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = corpus.len();
    let n_train = ((train_fraction * n as f64).floor() as usize).max(1);
    if n_train >= n {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} on {n} records leaves the test split empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let records = corpus
        .records()
        .iter()
        .zip(is_train)
        .map(|(r, train)| MemeRecord {
            split: if train { Split::Train } else { Split::Test },
            ..r.clone()
        })
        .collect();
    Corpus::new(records)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Parameter present in every synthetic cluster (the most frequent one in
/// real data), so that each cluster contributes one co-occurring pair.
pub const SYNTH_HUB: CommonsenseParameter = CommonsenseParameter::HumorAppropriateness;

/// Secondary parameters handed to clusters in order, most frequent first.
const SYNTH_SECONDARY: [CommonsenseParameter; 14] = [
    CommonsenseParameter::Vulgarity,
    CommonsenseParameter::SexualContent,
    CommonsenseParameter::BodyShaming,
    CommonsenseParameter::PublicDecorumPrivacy,
    CommonsenseParameter::CulturalSensitivity,
    CommonsenseParameter::Misogyny,
    CommonsenseParameter::Violence,
    CommonsenseParameter::MentalHealthImpact,
    CommonsenseParameter::Stereotyping,
    CommonsenseParameter::HateSpeech,
    CommonsenseParameter::ReligiousSensitivity,
    CommonsenseParameter::ChildExploitation,
    CommonsenseParameter::SubstanceAbuse,
    CommonsenseParameter::Misinformation,
];

const CENTER_SCALE: f64 = 3.0;
const BASE_SPREAD: f64 = 0.25;

/// Output of [`synth_generate`]: the corpus plus the planted ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Cluster index of every record, aligned with `corpus.records()`.
    pub cluster_of: Vec<usize>,
    pub signatures: Vec<ParameterSet>,
    pub centers: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    pub fn cluster_by_id(&self) -> HashMap<&str, usize> {
        self.corpus
            .records()
            .iter()
            .zip(&self.cluster_of)
            .map(|(r, &c)| (r.id.as_str(), c))
            .collect()
    }
}

/// Generates a clustered corpus with a learnable category-to-intervention mapping.
///
/// Cluster `i` carries the signature `{hub, secondary_i}` (the last of fifteen
/// clusters carries the hub alone). Cluster sizes decrease with `i` while the
/// within-cluster spread grows with `i`, so frequently co-occurring pairs are
/// also visually tighter. All records are assigned to the train split.
pub fn synth_generate(n: usize, d_img: usize, n_clusters: usize, seed: u64) -> Result<SyntheticCorpus> {
    if d_img < 2 {
        return Err(Error::InvalidArgument(format!("d_img must be at least 2, got {d_img}")));
    }
    if n_clusters == 0 || n < n_clusters {
        return Err(Error::InvalidArgument(format!(
            "need n >= n_clusters >= 1, got n={n}, n_clusters={n_clusters}"
        )));
    }
    if n_clusters > SYNTH_SECONDARY.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "at most {} clusters have distinct signatures, got {n_clusters}",
            SYNTH_SECONDARY.len() + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let signatures: Vec<ParameterSet> = (0..n_clusters)
        .map(|i| {
            let mut s = ParameterSet::from([SYNTH_HUB]);
            if let Some(&p) = SYNTH_SECONDARY.get(i) {
                s.insert(p);
            }
            s
        })
        .collect();
    let sizes = cluster_sizes(n, n_clusters);
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| (0..d_img).map(|_| CENTER_SCALE * unit.sample(&mut rng)).collect())
        .collect();

    let mut drafts = Vec::with_capacity(n);
    for (c, &size) in sizes.iter().enumerate() {
        let spread = BASE_SPREAD * (1.0 + 0.5 * c as f64);
        for _ in 0..size {
            let features: Vec<f64> = centers[c]
                .iter()
                .map(|&m| m + spread * unit.sample(&mut rng))
                .collect();
            drafts.push((c, features));
        }
    }
    drafts.shuffle(&mut rng);

    let mut records = Vec::with_capacity(n);
    let mut cluster_of = Vec::with_capacity(n);
    for (i, (c, features)) in drafts.into_iter().enumerate() {
        records.push(MemeRecord {
            id: format!("meme-{i:04}"),
            image_features: features,
            overlay_text: None,
            commonsense: signatures[c].clone(),
            intervention: template_intervention(&signatures[c]),
            split: Split::Train,
        });
        cluster_of.push(c);
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::new(records)?,
        cluster_of,
        signatures,
        centers,
    })
}

/// One record per cluster, the rest allocated proportionally to weights
/// `n_clusters + 1 - i` by largest remainder (ties to the lower index).
fn cluster_sizes(n: usize, n_clusters: usize) -> Vec<usize> {
    let weights: Vec<usize> = (0..n_clusters).map(|i| n_clusters + 1 - i).collect();
    let total_w: usize = weights.iter().sum();
    let rest = n - n_clusters;
    let mut sizes: Vec<usize> = weights.iter().map(|w| 1 + rest * w / total_w).collect();
    let mut remainders: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| ((rest * w) % total_w, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = sizes.iter().sum();
    for &(_, i) in remainders.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    sizes
}
