//! Small decoder-only transformer with image-prefix conditioning and
//! per-layer residual shift injection.

mod checkpoint;
pub mod pretrain;
pub mod tokenizer;
pub mod transformer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{MemeRecord, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor_io::round_f32;
use tokenizer::{Vocab, BOS_ID, EOS_ID, IMG_ID, INTERVENTION_ID, PARAMS_ID, SEP_ID};
use transformer::{Input, Params, Trace};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub d_img: usize,
    pub img_prefix_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            max_seq: 320,
            d_img: 16,
            img_prefix_len: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.img_prefix_len == 0 {
            return bad("img_prefix_len must be at least 1".into());
        }
        if self.d_ff == 0 || self.d_img == 0 || self.max_seq < 2 {
            return bad("d_ff, d_img must be positive and max_seq at least 2".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shift vectors
// ---------------------------------------------------------------------------

/// One shift vector and one scalar coefficient per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftVectorSet {
    pub vectors: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
}

impl ShiftVectorSet {
    pub fn new(vectors: Vec<Vec<f64>>, coefficients: Vec<f64>) -> Result<Self> {
        if vectors.len() != coefficients.len() || vectors.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} shift vectors but {} coefficients",
                vectors.len(),
                coefficients.len()
            )));
        }
        let d = vectors[0].len();
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidArgument("shift vectors differ in length".into()));
        }
        if vectors.iter().flatten().chain(&coefficients).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite shift entry".into()));
        }
        Ok(ShiftVectorSet { vectors, coefficients })
    }

    pub fn zeros(n_layers: usize, d_model: usize) -> Self {
        ShiftVectorSet {
            vectors: vec![vec![0.0; d_model]; n_layers],
            coefficients: vec![0.0; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.vectors.len()
    }

    pub fn d_model(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Same vectors with every coefficient replaced by `alpha`.
    pub fn with_fixed_alpha(&self, alpha: f64) -> Self {
        ShiftVectorSet {
            vectors: self.vectors.clone(),
            coefficients: vec![alpha; self.coefficients.len()],
        }
    }

    /// `alpha[l] * csv[l]` for every layer.
    pub fn residual(&self) -> Vec<Vec<f64>> {
        self.vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(v, &a)| v.iter().map(|x| a * x).collect())
            .collect()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers() != config.n_layers {
            return Err(Error::DimensionMismatch {
                what: "shift layer count",
                expected: config.n_layers,
                got: self.n_layers(),
            });
        }
        if self.d_model() != config.d_model {
            return Err(Error::DimensionMismatch {
                what: "shift vector width",
                expected: config.d_model,
                got: self.d_model(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prompt layout
// ---------------------------------------------------------------------------

/// A demonstration as seen by the prompt encoder.
#[derive(Debug, Clone, Copy)]
pub struct Demo<'a> {
    pub features: &'a [f64],
    pub commonsense: &'a ParameterSet,
    pub intervention: &'a str,
}

impl<'a> From<&'a MemeRecord> for Demo<'a> {
    fn from(r: &'a MemeRecord) -> Self {
        Demo {
            features: &r.image_features,
            commonsense: &r.commonsense,
            intervention: &r.intervention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSlot {
    pub position: usize,
    pub slot: usize,
    pub image: usize,
}

/// Token layout of one prompt, optionally followed by a teacher-forced response.
///
/// ```text
/// <bos> { <img>*p params: names.. intervention: words.. <sep> }*  <img>*p [params: names..] intervention: | response.. <eos>
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    /// Prompt followed by the response tokens and `<eos>` when teacher forcing.
    pub token_ids: Vec<usize>,
    pub image_slots: Vec<ImageSlot>,
    pub images: Vec<Vec<f64>>,
    /// Index of the first response token, equal to the prompt length.
    pub response_start: usize,
}

impl PromptEncoding {
    pub fn prompt_len(&self) -> usize {
        self.response_start
    }

    pub fn response(&self) -> &[usize] {
        &self.token_ids[self.response_start..]
    }

    pub fn has_response(&self) -> bool {
        self.token_ids.len() > self.response_start
    }

    /// Positions whose outputs predict the response tokens; for a bare prompt,
    /// the last position (the first generated token).
    pub fn target_positions(&self) -> Vec<usize> {
        let n = self.token_ids.len() - self.response_start;
        let start = self.response_start - 1;
        (start..start + n.max(1)).collect()
    }

    /// Inserts `n` `<pad>` tokens right after `<bos>`, moving everything else along.
    pub fn pad_after_bos(&mut self, n: usize) {
        if n == 0 {
            return;
        }
        self.token_ids.splice(1..1, std::iter::repeat_n(tokenizer::PAD_ID, n));
        for slot in &mut self.image_slots {
            slot.position += n;
        }
        self.response_start += n;
    }

    fn input_tokens(&self) -> &[usize] {
        if self.has_response() {
            &self.token_ids[..self.token_ids.len() - 1]
        } else {
            &self.token_ids
        }
    }

    pub(crate) fn input(&self) -> Input<'_> {
        let len = self.input_tokens().len();
        Input {
            tokens: self.input_tokens(),
            image_slots: self
                .image_slots
                .iter()
                .filter(|s| s.position < len)
                .map(|s| (s.position, s.slot, self.images[s.image].as_slice()))
                .collect(),
        }
    }
}

/// A next-token probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    pub probabilities: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        NextTokenDistribution { probabilities: p }
    }

    /// Most probable token, lowest id on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    /// Generated ids, including the terminating `<eos>` when one was produced.
    pub token_ids: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    params: Params,
}

impl Model {
    /// Randomly initialized model (seeded by `config.seed`).
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut params = Params::init(&config, vocab.len());
        params.for_each_mut(|_, v| v.iter_mut().for_each(|x| *x = round_f32(*x)));
        Ok(Model { config, vocab, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, vocab: Vocab, params: Params) -> Self {
        Model { config, vocab, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// FNV-1a digest of every parameter's bit pattern.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, values) in self.params.named() {
            for v in values {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn encode_prompt(
        &self,
        anchor: &MemeRecord,
        commonsense: Option<&ParameterSet>,
        demonstrations: &[Demo<'_>],
        response: Option<&str>,
    ) -> Result<PromptEncoding> {
        self.encode_features(&anchor.image_features, commonsense, demonstrations, response)
    }

    pub fn encode_features(
        &self,
        anchor_features: &[f64],
        commonsense: Option<&ParameterSet>,
        demonstrations: &[Demo<'_>],
        response: Option<&str>,
    ) -> Result<PromptEncoding> {
        let mut enc = PromptEncoding {
            token_ids: vec![BOS_ID],
            image_slots: Vec::new(),
            images: Vec::new(),
            response_start: 0,
        };
        let push_image = |enc: &mut PromptEncoding, features: &[f64]| -> Result<()> {
            if features.len() != self.config.d_img {
                return Err(Error::DimensionMismatch {
                    what: "prompt image features",
                    expected: self.config.d_img,
                    got: features.len(),
                });
            }
            let image = enc.images.len();
            enc.images.push(features.to_vec());
            for slot in 0..self.config.img_prefix_len {
                enc.image_slots.push(ImageSlot {
                    position: enc.token_ids.len(),
                    slot,
                    image,
                });
                enc.token_ids.push(IMG_ID);
            }
            Ok(())
        };
        let push_params = |enc: &mut PromptEncoding, params: &ParameterSet| {
            enc.token_ids.push(PARAMS_ID);
            enc.token_ids.extend(params.iter().map(|p| self.vocab.id(p.as_str())));
        };

        for demo in demonstrations {
            push_image(&mut enc, demo.features)?;
            push_params(&mut enc, demo.commonsense);
            enc.token_ids.push(INTERVENTION_ID);
            enc.token_ids.extend(self.vocab.encode(demo.intervention));
            enc.token_ids.push(SEP_ID);
        }
        push_image(&mut enc, anchor_features)?;
        if let Some(params) = commonsense {
            push_params(&mut enc, params);
        }
        enc.token_ids.push(INTERVENTION_ID);
        enc.response_start = enc.token_ids.len();
        if let Some(text) = response {
            enc.token_ids.extend(self.vocab.encode(text));
            enc.token_ids.push(EOS_ID);
        }
        let required = enc.input_tokens().len();
        if required > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                required,
                max_seq: self.config.max_seq,
            });
        }
        Ok(enc)
    }

    pub(crate) fn trace(&self, enc: &PromptEncoding, shift: Option<&ShiftVectorSet>, rows: &[usize]) -> Result<Trace> {
        let residual = match shift {
            Some(s) => {
                s.check(&self.config)?;
                Some(s.residual())
            }
            None => None,
        };
        if let Some(&bad) = enc.token_ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        Ok(transformer::forward(
            &self.params,
            &self.config,
            &enc.input(),
            residual.as_deref(),
            rows,
        ))
    }

    /// Raw logits at the encoding's target positions.
    pub fn logits(&self, enc: &PromptEncoding, shift: Option<&ShiftVectorSet>) -> Result<Array2<f64>> {
        Ok(self.trace(enc, shift, &enc.target_positions())?.logits)
    }

    /// Next-token distributions at every response position (teacher forced),
    /// or the single next-token distribution of a bare prompt.
    pub fn forward(&self, enc: &PromptEncoding, shift: Option<&ShiftVectorSet>) -> Result<Vec<NextTokenDistribution>> {
        let logits = self.logits(enc, shift)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| NextTokenDistribution::from_logits(row.as_slice().expect("contiguous row")))
            .collect())
    }

    /// Greedy decoding until `<eos>`, `max_new_tokens`, or a full context.
    pub fn generate(&self, enc: &PromptEncoding, shift: Option<&ShiftVectorSet>, max_new_tokens: usize) -> Result<Generation> {
        if max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be positive".into()));
        }
        if enc.has_response() {
            return Err(Error::InvalidArgument("generation prompt already carries a response".into()));
        }
        let mut work = enc.clone();
        let mut generated = Vec::new();
        while generated.len() < max_new_tokens && work.token_ids.len() <= self.config.max_seq {
            let last = work.token_ids.len() - 1;
            let trace = self.trace(&work, shift, &[last])?;
            let next = argmax(trace.logits.row(0).as_slice().expect("contiguous row"));
            generated.push(next);
            if next == EOS_ID || work.token_ids.len() == self.config.max_seq {
                break;
            }
            work.token_ids.push(next);
            // generated tokens become part of the prompt
            work.response_start = work.token_ids.len();
        }
        let text_ids: Vec<usize> = generated.iter().copied().filter(|&t| t != EOS_ID).collect();
        Ok(Generation {
            text: self.vocab.decode(&text_ids),
            token_ids: generated,
        })
    }

    /// Residual stream after block `layer` (1-based, shift applied) at the
    /// position that emits the first generated token.
    pub fn first_token_hidden(&self, enc: &PromptEncoding, shift: Option<&ShiftVectorSet>, layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} outside 1..={}",
                self.config.n_layers
            )));
        }
        let pos = enc.response_start - 1;
        let trace = self.trace(enc, shift, &[pos])?;
        Ok(trace.outputs[layer - 1].row(pos).to_vec())
    }

    /// Mean token embedding of `text` (unknown words included as `<unk>`).
    pub fn mean_token_embedding(&self, text: &str) -> Vec<f64> {
        let ids = self.vocab.encode(text);
        let d = self.config.d_model;
        let mut out = vec![0.0; d];
        for &id in &ids {
            for (o, v) in out.iter_mut().zip(self.params.tok_emb.row(id)) {
                *o += v;
            }
        }
        if !ids.is_empty() {
            out.iter_mut().for_each(|v| *v /= ids.len() as f64);
        }
        out
    }

    /// Final-block hidden state of each word of `text`, read after `<bos>`.
    pub fn contextual_token_embeddings(&self, text: &str) -> Vec<Vec<f64>> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.vocab.encode(text));
        let ids: Vec<usize> = ids.into_iter().take(self.config.max_seq).collect();
        if ids.len() < 2 {
            return Vec::new();
        }
        let input = Input {
            tokens: &ids,
            image_slots: Vec::new(),
        };
        let trace = transformer::forward(&self.params, &self.config, &input, None, &[0]);
        let last = trace.outputs.last().expect("at least one layer");
        (1..ids.len()).map(|p| last.row(p).to_vec()).collect()
    }
}
