//! Multi-label commonsense tagger: a logistic model from record features to
//! the fifteen commonsense parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CommonsenseParameter, MemeRecord, ParameterSet, MAX_PARAMETERS, NUM_PARAMETERS};
use crate::error::{Error, Result};
use crate::tensor_io::{ensure_dir, read_f32, read_json, round_f32, write_f32, write_json};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub threshold: f64,
    /// Width of the hashed bag-of-words overlay-text block; 0 disables text features.
    pub d_text: usize,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            epochs: 200,
            learning_rate: 0.1,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            d_text: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    d_img: usize,
    d_text: usize,
    /// Row-major `[NUM_PARAMETERS, d_in]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    threshold: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPrediction {
    pub scores: [f64; NUM_PARAMETERS],
    pub selected: ParameterSet,
}

impl TaggerModel {
    pub fn zeros(d_img: usize, d_text: usize, threshold: f64, seed: u64) -> Result<Self> {
        check_threshold(threshold)?;
        let d_in = d_img + d_text;
        Ok(TaggerModel {
            d_img,
            d_text,
            weights: vec![0.0; NUM_PARAMETERS * d_in],
            bias: vec![0.0; NUM_PARAMETERS],
            threshold,
            seed,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_img + self.d_text
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        self.threshold = threshold;
        Ok(self)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn features(&self, record: &MemeRecord) -> Result<Vec<f64>> {
        record_features(record, self.d_img, self.d_text)
    }

    fn scores_for(&self, x: &[f64]) -> [f64; NUM_PARAMETERS] {
        let d_in = self.d_in();
        let mut scores = [0.0; NUM_PARAMETERS];
        for (j, s) in scores.iter_mut().enumerate() {
            let row = &self.weights[j * d_in..(j + 1) * d_in];
            let z = self.bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *s = sigmoid(z);
        }
        scores
    }

    /// Mean binary cross-entropy over records and labels.
    pub fn loss(&self, records: &[&MemeRecord]) -> Result<f64> {
        let mut total = 0.0;
        for r in records {
            let scores = self.scores_for(&self.features(r)?);
            for (j, s) in scores.iter().enumerate() {
                let y = label(r, j);
                let p = s.clamp(1e-12, 1.0 - 1e-12);
                total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        Ok(total / (records.len() * NUM_PARAMETERS) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let manifest = TaggerManifest {
            num_labels: NUM_PARAMETERS,
            d_img: self.d_img,
            d_text: self.d_text,
            threshold: self.threshold,
            seed: self.seed,
            layout: "weights [num_labels, d_img + d_text] row-major, then bias [num_labels]".into(),
        };
        write_f32(
            &dir.join("weights.f32"),
            self.weights.iter().chain(&self.bias).copied(),
        )?;
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TaggerManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.num_labels != NUM_PARAMETERS {
            return Err(Error::checkpoint(dir, format!("num_labels {} != {NUM_PARAMETERS}", manifest.num_labels)));
        }
        check_threshold(manifest.threshold)?;
        let d_in = manifest.d_img + manifest.d_text;
        let mut values = read_f32(&dir.join("weights.f32"), NUM_PARAMETERS * (d_in + 1))?;
        let bias = values.split_off(NUM_PARAMETERS * d_in);
        Ok(TaggerModel {
            d_img: manifest.d_img,
            d_text: manifest.d_text,
            weights: values,
            bias,
            threshold: manifest.threshold,
            seed: manifest.seed,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TaggerManifest {
    num_labels: usize,
    d_img: usize,
    d_text: usize,
    threshold: f64,
    seed: u64,
    layout: String,
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("threshold must lie in (0, 1], got {t}")))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn label(r: &MemeRecord, j: usize) -> f64 {
    let p = CommonsenseParameter::ALL[j];
    if r.commonsense.contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Image features followed by a hashed bag of lowercase overlay-text words,
/// each bucket holding its share of the words.
pub fn record_features(record: &MemeRecord, d_img: usize, d_text: usize) -> Result<Vec<f64>> {
    if record.image_features.len() != d_img {
        return Err(Error::DimensionMismatch {
            what: "tagger image features",
            expected: d_img,
            got: record.image_features.len(),
        });
    }
    let mut x = record.image_features.clone();
    if d_text > 0 {
        let mut text = vec![0.0; d_text];
        let words: Vec<String> = record
            .overlay_text
            .as_deref()
            .unwrap_or("")
            .split_whitespace()
            .map(str::to_lowercase)
            .collect();
        for w in &words {
            text[(fnv1a(w.as_bytes()) % d_text as u64) as usize] += 1.0 / words.len() as f64;
        }
        x.extend(text);
    }
    Ok(x)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Largest full-batch step size for which gradient descent on the mean
/// binary cross-entropy is guaranteed not to increase the loss.
///
/// Each label's loss block has curvature at most `mean ||x~||^2 / (4 * 15)`
/// where `x~` is the feature vector with the bias input appended.
pub fn stable_learning_rate(records: &[&MemeRecord], d_text: usize) -> Result<f64> {
    let d_img = records
        .first()
        .map(|r| r.image_features.len())
        .ok_or_else(|| Error::InvalidArgument("no records".into()))?;
    let mut sq = 0.0;
    for r in records {
        let x = record_features(r, d_img, d_text)?;
        sq += 1.0 + x.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(4.0 * NUM_PARAMETERS as f64 / (sq / records.len() as f64))
}

/// Fits the tagger by full-batch gradient descent from zero weights.
pub fn train_tagger(records: &[&MemeRecord], config: &TaggerConfig) -> Result<TaggerModel> {
    train_tagger_with_history(records, config).map(|(m, _)| m)
}

/// As [`train_tagger`], also returning the training loss before each epoch and after the last.
pub fn train_tagger_with_history(
    records: &[&MemeRecord],
    config: &TaggerConfig,
) -> Result<(TaggerModel, Vec<f64>)> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("tagger training set is empty".into()))?;
    if let Some(r) = records.iter().find(|r| r.commonsense.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "tagger training record {} has no commonsense parameters",
            r.id
        )));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("learning_rate must be positive".into()));
    }
    let mut model = TaggerModel::zeros(first.image_features.len(), config.d_text, config.threshold, config.seed)?;
    let d_in = model.d_in();
    let xs: Vec<Vec<f64>> = records.iter().map(|r| model.features(r)).collect::<Result<_>>()?;
    let norm = 1.0 / (records.len() * NUM_PARAMETERS) as f64;

    let mut history = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        history.push(model.loss(records)?);
        let mut gw = vec![0.0; NUM_PARAMETERS * d_in];
        let mut gb = vec![0.0; NUM_PARAMETERS];
        for (r, x) in records.iter().zip(&xs) {
            let scores = model.scores_for(x);
            for j in 0..NUM_PARAMETERS {
                let err = (scores[j] - label(r, j)) * norm;
                gb[j] += err;
                for (g, v) in gw[j * d_in..(j + 1) * d_in].iter_mut().zip(x) {
                    *g += err * v;
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.learning_rate * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= config.learning_rate * g;
        }
    }
    for v in model.weights.iter_mut().chain(model.bias.iter_mut()) {
        *v = round_f32(*v);
    }
    history.push(model.loss(records)?);
    Ok((model, history))
}

/// Scores every parameter and selects those at or above the threshold,
/// keeping at most five: highest score first, ties in category order.
pub fn predict_parameters(model: &TaggerModel, record: &MemeRecord) -> Result<ParameterPrediction> {
    let x = model.features(record)?;
    let scores = model.scores_for(&x);
    let mut ranked: Vec<usize> = (0..NUM_PARAMETERS).filter(|&j| scores[j] >= model.threshold).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let selected = ranked
        .into_iter()
        .take(MAX_PARAMETERS)
        .map(|j| CommonsenseParameter::ALL[j])
        .collect();
    Ok(ParameterPrediction { scores, selected })
}

/// Micro-averaged F1 of the selected sets against the gold parameter sets.
pub fn micro_f1(model: &TaggerModel, records: &[&MemeRecord]) -> Result<f64> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for r in records {
        let pred = predict_parameters(model, r)?.selected;
        tp += pred.intersection(&r.commonsense).count();
        fp += pred.difference(&r.commonsense).count();
        fneg += r.commonsense.difference(&pred).count();
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}
