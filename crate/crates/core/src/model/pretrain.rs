//! Training of the base model itself.
//!
//! The base model plays the role of an in-context learner: prompts that carry
//! demonstrations are trained towards the anchor's intervention, while bare
//! prompts are trained towards a fixed caption. The model therefore only
//! produces interventions when demonstrations are present, which is the
//! behaviour shift vectors are later asked to reproduce without them.
//!
//! A random run of `<pad>` tokens after `<bos>` keeps prompt length from
//! revealing whether demonstrations are present; without it the model keys
//! its behaviour on absolute position, which a constant shift cannot mimic.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::Vocab;
use super::{Demo, Model, ModelConfig, PromptEncoding};
use crate::corpus::MemeRecord;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::retrieval::{EmbeddingIndex, VectorSearch};
use crate::tensor_io::round_f32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Share of sequences without demonstrations.
    pub zero_shot_rate: f64,
    /// Share of sequences whose anchor parameters are left out of the prompt.
    pub drop_params_rate: f64,
    /// Demonstration counts are drawn uniformly from `1..=max_demos`.
    pub max_demos: usize,
    /// Share of demonstration sets drawn at random instead of by image similarity.
    pub random_demo_rate: f64,
    /// Padding tokens inserted after `<bos>` are drawn uniformly from `0..=max_padding`.
    pub max_padding: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
            zero_shot_rate: 0.15,
            drop_params_rate: 0.25,
            max_demos: 4,
            random_demo_rate: 0.5,
            max_padding: 24,
        }
    }
}

/// What the base model is trained to say when no demonstrations are shown.
pub const CAPTION: &str = "a picture";

/// Vocabulary covering interventions, descriptions and category names.
pub fn build_vocab(records: &[&MemeRecord]) -> Vocab {
    Vocab::build(
        records
            .iter()
            .map(|r| r.intervention.as_str())
            .chain(std::iter::once(CAPTION)),
    )
}

/// Mean next-token negative log-likelihood of the response and its logit gradient.
pub(crate) fn response_nll(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = targets.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss -= row[t] - log_z;
        for (g, &z) in grad.row_mut(r).iter_mut().zip(row.iter()) {
            *g = (z - log_z).exp() / n;
        }
        grad[[r, t]] -= 1.0 / n;
    }
    (loss / n, grad)
}

fn flatten(params: &super::transformer::Params) -> Vec<f64> {
    params.named().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
}

/// Trains a fresh base model on `train`; returns it with the mean loss of every step.
pub fn pretrain(train: &[&MemeRecord], model_config: &ModelConfig, config: &PretrainConfig) -> Result<(Model, Vec<f64>)> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least two records".into()));
    }
    if config.batch_size == 0 || config.max_demos == 0 {
        return Err(Error::InvalidArgument("batch_size and max_demos must be positive".into()));
    }
    let mut model = Model::new(model_config.clone(), build_vocab(train))?;
    let index = EmbeddingIndex::build(train.iter().copied())?;
    let by_id: std::collections::HashMap<&str, &MemeRecord> = train.iter().map(|r| (r.id.as_str(), *r)).collect();
    let max_demos = config.max_demos.min(train.len() - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_params = flatten(model.params()).len();
    let mut adam = Adam::new(n_params, config.learning_rate);
    let mut history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut grads = model.params().zeros_like();
        let mut step_loss = 0.0;
        for _ in 0..config.batch_size {
            let anchor = train[rng.random_range(0..train.len())];
            let zero_shot = rng.random_bool(config.zero_shot_rate);
            let demos: Vec<&MemeRecord> = if zero_shot {
                Vec::new()
            } else {
                let k = rng.random_range(1..=max_demos);
                if rng.random_bool(config.random_demo_rate) {
                    let others: Vec<&MemeRecord> = train.iter().copied().filter(|r| r.id != anchor.id).collect();
                    sample(&mut rng, others.len(), k).into_iter().map(|i| others[i]).collect()
                } else {
                    index
                        .search(&anchor.image_features, k, Some(&anchor.id))?
                        .iter()
                        .map(|(id, _)| by_id[id.as_str()])
                        .collect()
                }
            };
            let with_params = !rng.random_bool(config.drop_params_rate);
            let response = if zero_shot {
                CAPTION.to_string()
            } else {
                anchor.intervention.clone()
            };
            let demo_views: Vec<Demo<'_>> = demos.iter().map(|r| Demo::from(*r)).collect();
            let mut enc = model.encode_prompt(anchor, with_params.then_some(&anchor.commonsense), &demo_views, Some(&response))?;
            enc.pad_after_bos(rng.random_range(0..=config.max_padding));
            step_loss += accumulate(&model, &enc, &mut grads)?;
        }
        let loss = step_loss / config.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: step,
                anchors: Vec::new(),
            });
        }
        history.push(loss);
        let mut flat_grads = flatten(&grads);
        flat_grads.iter_mut().for_each(|g| *g /= config.batch_size as f64);
        let mut flat = flatten(model.params());
        adam.step(&mut flat, &flat_grads);
        let mut offset = 0;
        model.params_mut().for_each_mut(|_, dst| {
            dst.copy_from_slice(&flat[offset..offset + dst.len()]);
            offset += dst.len();
        });
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    model
        .params_mut()
        .for_each_mut(|_, v| v.iter_mut().for_each(|x| *x = round_f32(*x)));
    Ok((model, history))
}

fn accumulate(model: &Model, enc: &PromptEncoding, grads: &mut super::transformer::Params) -> Result<f64> {
    let rows = enc.target_positions();
    let trace = model.trace(enc, None, &rows)?;
    let (loss, dlogits) = response_nll(&trace.logits, enc.response());
    let back = super::transformer::backward(model.params(), model.config(), &enc.input(), &trace, &dlogits, true);
    grads.add_assign(back.params.as_ref().expect("parameter gradients requested"));
    Ok(loss)
}
