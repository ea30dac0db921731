//! Geometry of first-generated-token hidden states under a shift set.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::spearman_rho;
use crate::corpus::{CommonsenseParameter, CorpusStats, MemeRecord};
use crate::error::{Error, Result};
use crate::model::{Model, ShiftVectorSet};

/// Records per sampled group.
pub const PROBE_SAMPLE: usize = 5;

/// Hidden state after `layer` at the position that emits the first token of
/// the demonstration-free prompt (anchor parameters included).
pub fn probe_hidden(model: &Model, csv: Option<&ShiftVectorSet>, record: &MemeRecord, layer: usize) -> Result<Vec<f64>> {
    let enc = model.encode_prompt(record, Some(&record.commonsense), &[], None)?;
    model.first_token_hidden(&enc, csv, layer)
}

fn mean_pairwise_distance(model: &Model, csv: Option<&ShiftVectorSet>, records: &[&MemeRecord], layer: usize) -> Result<f64> {
    let hidden = records
        .iter()
        .map(|r| probe_hidden(model, csv, r, layer))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..hidden.len() {
        for j in i + 1..hidden.len() {
            total += hidden[i]
                .iter()
                .zip(&hidden[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Groups records by each parameter they carry, leaving out `skip`.
pub fn group_by_parameter<'a>(
    records: &[&'a MemeRecord],
    skip: &[CommonsenseParameter],
) -> BTreeMap<String, Vec<&'a MemeRecord>> {
    let mut groups: BTreeMap<String, Vec<&MemeRecord>> = BTreeMap::new();
    for r in records {
        for p in r.commonsense.iter().filter(|p| !skip.contains(p)) {
            groups.entry(p.to_string()).or_default().push(r);
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithinBetween {
    pub within: f64,
    pub between: f64,
}

/// Mean pairwise Euclidean distance among up to five records of `target`
/// against the same quantity over up to five records drawn from distinct groups.
pub fn probe_within_between(
    model: &Model,
    csv: Option<&ShiftVectorSet>,
    groups: &BTreeMap<String, Vec<&MemeRecord>>,
    target: &str,
    layer: usize,
    seed: u64,
) -> Result<WithinBetween> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let own = groups
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("no records for category {target}")))?;
    if own.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "category {target} has {} record(s), need at least 2",
            own.len()
        )));
    }
    let mut within: Vec<&MemeRecord> = own.clone();
    within.shuffle(&mut rng);
    within.truncate(PROBE_SAMPLE);

    let mut names: Vec<&String> = groups.keys().collect();
    names.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut mixed = Vec::new();
    for name in names {
        let mut members = groups[name].clone();
        members.shuffle(&mut rng);
        if let Some(r) = members.into_iter().find(|r| !seen.contains(r.id.as_str())) {
            seen.insert(r.id.as_str());
            mixed.push(r);
        }
        if mixed.len() == PROBE_SAMPLE {
            break;
        }
    }
    if mixed.len() < 2 {
        return Err(Error::InvalidArgument("need records from at least two categories".into()));
    }
    Ok(WithinBetween {
        within: mean_pairwise_distance(model, csv, &within, layer)?,
        between: mean_pairwise_distance(model, csv, &mixed, layer)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: CommonsenseParameter,
    pub b: CommonsenseParameter,
    pub count: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceProbe {
    pub pairs: Vec<PairDistance>,
    pub rho: f64,
}

/// Spearman correlation between how often the `top_n_pairs` most frequent
/// category pairs co-occur and the mean pairwise hidden distance among five
/// records carrying both categories.
pub fn probe_cooccurrence_correlation(
    model: &Model,
    csv: Option<&ShiftVectorSet>,
    records: &[&MemeRecord],
    top_n_pairs: usize,
    layer: usize,
    seed: u64,
) -> Result<CooccurrenceProbe> {
    if top_n_pairs < 2 {
        return Err(Error::InvalidArgument("top_n_pairs must be at least 2".into()));
    }
    let stats = CorpusStats::compute(records.iter().copied());
    let top: Vec<_> = stats.top_pairs().into_iter().take(top_n_pairs).collect();
    if top.len() < top_n_pairs || top.iter().any(|&(_, _, c)| c < PROBE_SAMPLE) {
        return Err(Error::InvalidArgument(format!(
            "need {top_n_pairs} co-occurring pairs with at least {PROBE_SAMPLE} records each, found {}",
            top.iter().filter(|&&(_, _, c)| c >= PROBE_SAMPLE).count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(top.len());
    for (a, b, count) in top {
        let mut members: Vec<&MemeRecord> = records
            .iter()
            .copied()
            .filter(|r| r.commonsense.contains(&a) && r.commonsense.contains(&b))
            .collect();
        members.shuffle(&mut rng);
        members.truncate(PROBE_SAMPLE);
        pairs.push(PairDistance {
            a,
            b,
            count,
            distance: mean_pairwise_distance(model, csv, &members, layer)?,
        });
    }
    let counts: Vec<f64> = pairs.iter().map(|p| p.count as f64).collect();
    let distances: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    let rho = spearman_rho(&counts, &distances)?;
    Ok(CooccurrenceProbe { pairs, rho })
}
