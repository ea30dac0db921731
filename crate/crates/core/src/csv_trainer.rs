//! Learning shift vectors by distilling a demonstration-conditioned teacher
//! into the demonstration-free, shifted student.
//!
//! Teacher and student are both teacher-forced on the anchor's ground-truth
//! intervention so that their response positions line up. The objective is
//!
//! ```text
//! L = KL(teacher || student) + gamma * NLL(student, ground truth)
//! ```
//!
//! with both terms averaged over response positions. Only the shift vectors
//! and their coefficients receive gradients; the base model stays frozen.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MemeRecord};
use crate::error::{Error, Result};
use crate::model::transformer;
use crate::model::{Demo, Model, ModelConfig, NextTokenDistribution, PromptEncoding, ShiftVectorSet};
use crate::optim::Adam;
use crate::retrieval::InContextSet;
use crate::tensor_io::{ensure_dir, read_f32, read_json, round_f32, write_f32, write_json};

/// Probability floor inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub od: f64,
    pub ivt: f64,
    pub total: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Demonstrations per anchor; informational, the sets themselves decide.
    pub k: usize,
    pub student_prompt: StudentPrompt,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2,
            gamma: 0.5,
            learning_rate: 3e-2,
            seed: 0,
            k: 4,
            student_prompt: StudentPrompt::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Gaussian shift vectors with standard deviation 0.01 and unit coefficients.
pub fn init_csv(config: &ModelConfig, seed: u64) -> ShiftVectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid standard deviation");
    ShiftVectorSet {
        vectors: (0..config.n_layers)
            .map(|_| (0..config.d_model).map(|_| round_f32(normal.sample(&mut rng))).collect())
            .collect(),
        coefficients: vec![1.0; config.n_layers],
    }
}

fn check_normalized(dists: &[NextTokenDistribution], which: &str) -> Result<()> {
    for (i, d) in dists.iter().enumerate() {
        let sum: f64 = d.probabilities.iter().sum();
        if d.probabilities.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "{which} distribution {i} is not normalized (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Mean over positions of `KL(teacher || student)` in nats.
pub fn kl_loss(teacher: &[NextTokenDistribution], student: &[NextTokenDistribution]) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "kl_loss needs equal non-empty lists, got {} teacher and {} student distributions",
            teacher.len(),
            student.len()
        )));
    }
    check_normalized(teacher, "teacher")?;
    check_normalized(student, "student")?;
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if t.probabilities.len() != s.probabilities.len() {
            return Err(Error::DimensionMismatch {
                what: "kl_loss vocabulary",
                expected: t.probabilities.len(),
                got: s.probabilities.len(),
            });
        }
        for (&p, &q) in t.probabilities.iter().zip(&s.probabilities) {
            if p > 0.0 {
                total += p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln());
            }
        }
    }
    // Floor effects can push a near-zero sum a hair below zero.
    Ok((total / teacher.len() as f64).max(0.0))
}

/// Mean negative log-probability of `targets` in nats.
pub fn intervention_loss(student: &[NextTokenDistribution], targets: &[usize]) -> Result<f64> {
    if student.len() != targets.len() || student.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "intervention_loss needs one distribution per target, got {} and {}",
            student.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (d, &t) in student.iter().zip(targets) {
        let p = *d.probabilities.get(t).ok_or_else(|| {
            Error::InvalidArgument(format!("target token {t} outside vocabulary of {}", d.probabilities.len()))
        })?;
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / student.len() as f64)
}

pub fn total_loss(od: f64, ivt: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        od,
        ivt,
        total: od + gamma * ivt,
        gamma,
    }
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - log_z);
    }
    out
}

/// Gradient of the objective with respect to the shift set.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftGradient {
    pub vectors: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
}

/// Which anchor prompts the student is trained on. Both views share the
/// teacher, and their losses are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentPrompt {
    /// Anchor parameters in the prompt, as the teacher sees them.
    WithCommonsense,
    WithoutCommonsense,
    Both,
}

/// One anchor prepared for distillation: the student prompts (no
/// demonstrations) and the cached teacher log-probabilities.
#[derive(Debug, Clone)]
pub struct DistillExample {
    pub anchor_id: String,
    students: Vec<PromptEncoding>,
    teacher_log_probs: Array2<f64>,
}

fn demos_for<'c>(set: &InContextSet, corpus: &'c Corpus) -> Result<Vec<Demo<'c>>> {
    set.demonstrations
        .iter()
        .map(|d| {
            corpus.get(&d.id).map(Demo::from).ok_or_else(|| Error::Retrieval {
                anchor: set.anchor_id.clone(),
                message: format!("demonstration {} not in corpus", d.id),
            })
        })
        .collect()
}

fn anchor_of<'c>(set: &InContextSet, corpus: &'c Corpus) -> Result<&'c MemeRecord> {
    corpus.get(&set.anchor_id).ok_or_else(|| Error::Retrieval {
        anchor: set.anchor_id.clone(),
        message: "anchor not in corpus".into(),
    })
}

impl DistillExample {
    pub fn new(model: &Model, set: &InContextSet, corpus: &Corpus, views: StudentPrompt) -> Result<Self> {
        let anchor = anchor_of(set, corpus)?;
        if anchor.intervention.trim().is_empty() {
            return Err(Error::Validation(format!("anchor {} has no ground-truth intervention", anchor.id)));
        }
        let demos = demos_for(set, corpus)?;
        let teacher = model.encode_prompt(anchor, Some(&anchor.commonsense), &demos, Some(&anchor.intervention))?;
        let params = match views {
            StudentPrompt::WithCommonsense => vec![Some(&anchor.commonsense)],
            StudentPrompt::WithoutCommonsense => vec![None],
            StudentPrompt::Both => vec![Some(&anchor.commonsense), None],
        };
        let students = params
            .into_iter()
            .map(|p| model.encode_prompt(anchor, p, &[], Some(&anchor.intervention)))
            .collect::<Result<Vec<_>>>()?;
        let teacher_log_probs = log_softmax_rows(&model.logits(&teacher, None)?);
        Ok(DistillExample {
            anchor_id: anchor.id.clone(),
            students,
            teacher_log_probs,
        })
    }

    /// Loss of the shifted student, averaged over its prompt views. Each view
    /// matches [`kl_loss`] and [`intervention_loss`] applied to the same distributions.
    pub fn loss(&self, model: &Model, shift: &ShiftVectorSet, gamma: f64) -> Result<LossBreakdown> {
        let mut parts = Vec::with_capacity(self.students.len());
        for student in &self.students {
            let logits = model.logits(student, Some(shift))?;
            parts.push(self.loss_and_dlogits(student, &logits, gamma, 1.0).0);
        }
        Ok(mean_breakdown(&parts, gamma))
    }

    /// `scale` multiplies the logit gradient only.
    fn loss_and_dlogits(&self, student: &PromptEncoding, logits: &Array2<f64>, gamma: f64, scale: f64) -> (LossBreakdown, Array2<f64>) {
        let log_q = log_softmax_rows(logits);
        let targets = student.response();
        let n = targets.len() as f64 / scale;
        let floor = PROB_FLOOR.ln();
        let mut od = 0.0;
        let mut ivt = 0.0;
        let mut grad = Array2::zeros(logits.raw_dim());
        for (r, &target) in targets.iter().enumerate() {
            let lq = log_q.row(r);
            let lp = self.teacher_log_probs.row(r);
            // KL term: -sum_v p_v * max(ln q_v, ln eps) plus the teacher entropy.
            let mut unclamped_mass = 0.0;
            for v in 0..lq.len() {
                let p = lp[v].exp();
                if p == 0.0 {
                    continue;
                }
                od += p * (lp[v].max(floor) - lq[v].max(floor));
                if lq[v] > floor {
                    unclamped_mass += p;
                    grad[[r, v]] -= p / n;
                }
            }
            for v in 0..lq.len() {
                grad[[r, v]] += unclamped_mass * lq[v].exp() / n;
            }
            ivt -= lq[target].max(floor);
            if lq[target] > floor {
                for v in 0..lq.len() {
                    grad[[r, v]] += gamma * lq[v].exp() / n;
                }
                grad[[r, target]] -= gamma / n;
            }
        }
        let m = targets.len() as f64;
        (total_loss((od / m).max(0.0), ivt / m, gamma), grad)
    }

    /// Loss and its gradient with respect to every shift entry and coefficient.
    pub fn loss_and_gradient(&self, model: &Model, shift: &ShiftVectorSet, gamma: f64) -> Result<(LossBreakdown, ShiftGradient)> {
        let views = self.students.len() as f64;
        let mut parts = Vec::with_capacity(self.students.len());
        let mut grad = ShiftGradient {
            vectors: vec![vec![0.0; shift.d_model()]; shift.n_layers()],
            coefficients: vec![0.0; shift.n_layers()],
        };
        for student in &self.students {
            let rows = student.target_positions();
            let trace = model.trace(student, Some(shift), &rows)?;
            let (loss, dlogits) = self.loss_and_dlogits(student, &trace.logits, gamma, 1.0 / views);
            parts.push(loss);
            let back = transformer::backward(model.params(), model.config(), &student.input(), &trace, &dlogits, false);
            for (l, dh) in back.shift.iter().enumerate() {
                let alpha = shift.coefficients[l];
                for ((g, d), c) in grad.vectors[l].iter_mut().zip(dh).zip(&shift.vectors[l]) {
                    *g += alpha * d;
                    grad.coefficients[l] += d * c;
                }
            }
        }
        Ok((mean_breakdown(&parts, gamma), grad))
    }
}

fn flatten(shift: &ShiftVectorSet) -> Vec<f64> {
    shift.vectors.iter().flatten().chain(&shift.coefficients).copied().collect()
}

fn unflatten(flat: &[f64], shift: &mut ShiftVectorSet) {
    let d = shift.d_model();
    for (l, v) in shift.vectors.iter_mut().enumerate() {
        v.copy_from_slice(&flat[l * d..(l + 1) * d]);
    }
    let offset = shift.n_layers() * d;
    shift.coefficients.copy_from_slice(&flat[offset..]);
}

fn mean_breakdown(items: &[LossBreakdown], gamma: f64) -> LossBreakdown {
    let n = items.len() as f64;
    let od = items.iter().map(|b| b.od).sum::<f64>() / n;
    let ivt = items.iter().map(|b| b.ivt).sum::<f64>() / n;
    total_loss(od, ivt, gamma)
}

/// Trains a shift set on `icl_dataset`. Returns the set and the mean loss of
/// every epoch, measured on the fly before each batch update.
pub fn train(
    model: &Model,
    icl_dataset: &[InContextSet],
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(ShiftVectorSet, Vec<LossBreakdown>)> {
    config.validate()?;
    if icl_dataset.is_empty() {
        return Err(Error::InvalidArgument("empty in-context dataset".into()));
    }
    let examples = icl_dataset
        .iter()
        .map(|set| DistillExample::new(model, set, corpus, config.student_prompt))
        .collect::<Result<Vec<_>>>()?;

    let mut shift = init_csv(model.config(), config.seed);
    let mut flat = flatten(&shift);
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_5b1f7);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(examples.len());
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = vec![0.0; flat.len()];
            for &i in batch {
                let (loss, g) = examples[i].loss_and_gradient(model, &shift, config.gamma)?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: b,
                        anchors: batch.iter().map(|&j| examples[j].anchor_id.clone()).collect(),
                    });
                }
                epoch_losses.push(loss);
                let flat_g = g.vectors.iter().flatten().chain(&g.coefficients);
                for (acc, v) in grad.iter_mut().zip(flat_g) {
                    *acc += v / batch.len() as f64;
                }
            }
            adam.step(&mut flat, &grad);
            unflatten(&flat, &mut shift);
        }
        let mean = mean_breakdown(&epoch_losses, config.gamma);
        log::info!(
            "epoch {}: total {:.4} (od {:.4}, ivt {:.4})",
            epoch + 1,
            mean.total,
            mean.od,
            mean.ivt
        );
        history.push(mean);
    }
    for v in shift.vectors.iter_mut().flatten().chain(shift.coefficients.iter_mut()) {
        *v = round_f32(*v);
    }
    Ok((shift, history))
}

/// Agreement between the k-shot teacher and the shifted zero-shot student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRate {
    pub matched: usize,
    pub positions: usize,
    pub rate: f64,
}

/// How the student is compared with the teacher's greedy output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchProtocol {
    /// The student reads the teacher's tokens and its next-token argmax is
    /// compared at every position.
    TeacherForced,
    /// The student decodes on its own; tokens are compared position by
    /// position and positions it never reaches count as misses.
    FreeRunning,
}

/// Scores the student (anchor parameters, no demonstrations, optional shift)
/// against the greedy tokens of the teacher (anchor parameters plus
/// demonstrations), end token included.
pub fn teacher_match_rate(
    model: &Model,
    shift: Option<&ShiftVectorSet>,
    sets: &[InContextSet],
    corpus: &Corpus,
    max_new_tokens: usize,
    protocol: MatchProtocol,
) -> Result<MatchRate> {
    let mut matched = 0;
    let mut positions = 0;
    for set in sets {
        let anchor = anchor_of(set, corpus)?;
        let demos = demos_for(set, corpus)?;
        let teacher = model.encode_prompt(anchor, Some(&anchor.commonsense), &demos, None)?;
        let t = model.generate(&teacher, None, max_new_tokens)?.token_ids;
        let s: Vec<usize> = match protocol {
            MatchProtocol::FreeRunning => {
                let student = model.encode_prompt(anchor, Some(&anchor.commonsense), &[], None)?;
                model.generate(&student, shift, max_new_tokens)?.token_ids
            }
            MatchProtocol::TeacherForced => {
                let text = model.vocab().decode(&t);
                let student = model.encode_prompt(anchor, Some(&anchor.commonsense), &[], Some(&text))?;
                model.forward(&student, shift)?.iter().map(NextTokenDistribution::argmax).collect()
            }
        };
        matched += t.iter().zip(&s).filter(|(a, b)| a == b).count();
        positions += t.len();
    }
    if positions == 0 {
        return Err(Error::InvalidArgument("no anchors to compare".into()));
    }
    Ok(MatchRate {
        matched,
        positions,
        rate: matched as f64 / positions as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CsvManifest {
    n_layers: usize,
    d_model: usize,
    gamma: f64,
    seed: u64,
    epochs: usize,
    reduction: String,
}

/// Writes `manifest.json`, `csv.f32` (layers x d_model) and `alpha.f32`.
pub fn save_csv(dir: &Path, shift: &ShiftVectorSet, config: &TrainConfig) -> Result<()> {
    ensure_dir(dir)?;
    write_f32(&dir.join("csv.f32"), shift.vectors.iter().flatten().copied())?;
    write_f32(&dir.join("alpha.f32"), shift.coefficients.iter().copied())?;
    write_json(
        &dir.join("manifest.json"),
        &CsvManifest {
            n_layers: shift.n_layers(),
            d_model: shift.d_model(),
            gamma: config.gamma,
            seed: config.seed,
            epochs: config.epochs,
            reduction: "mean".into(),
        },
    )
}

/// Loads a shift set. The layer count is checked against a model only when
/// the set is used.
pub fn load_csv(dir: &Path) -> Result<ShiftVectorSet> {
    let manifest: CsvManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.n_layers == 0 || manifest.d_model == 0 {
        return Err(Error::checkpoint(dir, "manifest declares an empty shift set"));
    }
    let flat = read_f32(&dir.join("csv.f32"), manifest.n_layers * manifest.d_model)?;
    let alpha = read_f32(&dir.join("alpha.f32"), manifest.n_layers)?;
    let vectors = flat.chunks(manifest.d_model).map(<[f64]>::to_vec).collect();
    ShiftVectorSet::new(vectors, alpha).map_err(|e| Error::checkpoint(dir, e.to_string()))
}
