//! Intervention generation with shift vectors, k-shot baselines and ablations.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CommonsenseParameter, Corpus, MemeRecord, ParameterSet, NUM_PARAMETERS};
use crate::error::{Error, Result};
use crate::evaluation::EvaluationReport;
use crate::model::{Demo, Model, PromptEncoding, ShiftVectorSet};
use crate::retrieval::{anchor_seed, InContextSet};
use crate::tagger::{predict_parameters, TaggerModel};

/// Where the anchor's commonsense parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommonsenseMode {
    /// Predicted by the tagger.
    Tagger,
    /// The record's own labels.
    Provided,
    /// Left out of the prompt.
    None,
    /// A seeded uniform draw of one to three parameters.
    Random,
}

/// What the anchor prompt is conditioned on besides the meme itself. Shift
/// vectors replace demonstrations, so a request carries at most one of them.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Plain,
    Shift(ShiftVectorSet),
    Demonstrations(InContextSet),
}

impl Conditioning {
    /// Builds the conditioning from two optional parts, rejecting both at once.
    pub fn from_parts(shift: Option<ShiftVectorSet>, demonstrations: Option<InContextSet>) -> Result<Self> {
        match (shift, demonstrations) {
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "shift vectors and demonstrations are mutually exclusive".into(),
            )),
            (Some(s), None) => Ok(Conditioning::Shift(s)),
            (None, Some(d)) => Ok(Conditioning::Demonstrations(d)),
            (None, None) => Ok(Conditioning::Plain),
        }
    }
}

/// Bounds on how many parameters the random mode draws.
pub const RANDOM_COMMONSENSE_RANGE: (usize, usize) = (1, 3);

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest<'a> {
    pub record: &'a MemeRecord,
    pub commonsense_mode: CommonsenseMode,
    pub conditioning: Conditioning,
    pub max_new_tokens: usize,
    /// Seeds the random commonsense mode.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeProfile {
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub wall_seconds: f64,
}

/// Shared, read-only state for inference.
#[derive(Debug, Clone, Copy)]
pub struct InferenceContext<'a> {
    pub model: &'a Model,
    /// Required by [`CommonsenseMode::Tagger`].
    pub tagger: Option<&'a TaggerModel>,
    /// Resolves demonstration ids to records.
    pub corpus: Option<&'a Corpus>,
}

/// A uniform draw of `lo..=hi` distinct parameters.
pub fn random_commonsense(seed: u64, range: (usize, usize)) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(range.0..=range.1.min(NUM_PARAMETERS));
    sample(&mut rng, NUM_PARAMETERS, count)
        .into_iter()
        .map(|i| CommonsenseParameter::from_index(i).expect("index below parameter count"))
        .collect()
}

impl InferenceContext<'_> {
    pub fn resolve_commonsense(&self, record: &MemeRecord, mode: CommonsenseMode, seed: u64) -> Result<Option<ParameterSet>> {
        Ok(match mode {
            CommonsenseMode::Tagger => {
                let tagger = self
                    .tagger
                    .ok_or_else(|| Error::InvalidArgument("tagger mode requires a trained tagger".into()))?;
                Some(predict_parameters(tagger, record)?.selected)
            }
            CommonsenseMode::Provided => Some(record.commonsense.clone()),
            CommonsenseMode::None => None,
            CommonsenseMode::Random => Some(random_commonsense(seed, RANDOM_COMMONSENSE_RANGE)),
        })
    }

    /// The prompt a request would be generated from.
    pub fn encode(&self, request: &InferenceRequest<'_>) -> Result<PromptEncoding> {
        let params = self.resolve_commonsense(request.record, request.commonsense_mode, request.seed)?;
        let demos: Vec<Demo<'_>> = match &request.conditioning {
            Conditioning::Demonstrations(set) => {
                let corpus = self
                    .corpus
                    .ok_or_else(|| Error::InvalidArgument("demonstrations require a corpus".into()))?;
                set.demonstrations
                    .iter()
                    .map(|d| {
                        corpus.get(&d.id).map(Demo::from).ok_or_else(|| Error::Retrieval {
                            anchor: request.record.id.clone(),
                            message: format!("demonstration {} not in corpus", d.id),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            _ => Vec::new(),
        };
        self.model.encode_prompt(request.record, params.as_ref(), &demos, None)
    }

    pub fn generate_intervention(&self, request: &InferenceRequest<'_>) -> Result<(String, RuntimeProfile)> {
        let start = Instant::now();
        let enc = self.encode(request)?;
        let shift = match &request.conditioning {
            Conditioning::Shift(s) => Some(s),
            _ => None,
        };
        let generation = self.model.generate(&enc, shift, request.max_new_tokens)?;
        let profile = RuntimeProfile {
            prompt_tokens: enc.prompt_len(),
            generated_tokens: generation.token_ids.len(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        Ok((generation.text, profile))
    }

    /// Plain model conditioned on `in_context` and the record's own parameters.
    pub fn kshot_generate(&self, record: &MemeRecord, in_context: &InContextSet, max_new_tokens: usize) -> Result<(String, RuntimeProfile)> {
        self.generate_intervention(&InferenceRequest {
            record,
            commonsense_mode: CommonsenseMode::Provided,
            conditioning: Conditioning::Demonstrations(in_context.clone()),
            max_new_tokens,
            seed: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    FixedAlpha1,
    NoCommonsense,
    RandomCommonsense,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::FixedAlpha1,
        AblationMode::NoCommonsense,
        AblationMode::RandomCommonsense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::FixedAlpha1 => "fixed_alpha_1",
            AblationMode::NoCommonsense => "no_commonsense",
            AblationMode::RandomCommonsense => "random_commonsense",
            AblationMode::Full => "full",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Commonsense source for the full and fixed-alpha modes.
    pub commonsense: CommonsenseMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            commonsense: CommonsenseMode::Tagger,
            max_new_tokens: 40,
            seed: 0,
        }
    }
}

/// One generation per test record under `mode`.
pub fn ablation_predictions(
    ctx: &InferenceContext<'_>,
    csv: &ShiftVectorSet,
    test_records: &[&MemeRecord],
    mode: AblationMode,
    config: &AblationConfig,
) -> Result<Vec<(String, String)>> {
    if test_records.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one test record".into()));
    }
    test_records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let request = ablation_request(csv, record, i, mode, config);
            ctx.generate_intervention(&request).map(|(text, _)| (record.id.clone(), text))
        })
        .collect()
}

/// The request `mode` issues for the record at `position` of the test list.
pub fn ablation_request<'r>(
    csv: &ShiftVectorSet,
    record: &'r MemeRecord,
    position: usize,
    mode: AblationMode,
    config: &AblationConfig,
) -> InferenceRequest<'r> {
    let (shift, commonsense) = match mode {
        AblationMode::Full => (csv.clone(), config.commonsense),
        AblationMode::FixedAlpha1 => (csv.with_fixed_alpha(1.0), config.commonsense),
        AblationMode::NoCommonsense => (csv.clone(), CommonsenseMode::None),
        AblationMode::RandomCommonsense => (csv.clone(), CommonsenseMode::Random),
    };
    InferenceRequest {
        record,
        commonsense_mode: commonsense,
        conditioning: Conditioning::Shift(shift),
        max_new_tokens: config.max_new_tokens,
        seed: anchor_seed(config.seed, position),
    }
}

/// Generates under `mode` and scores against each record's intervention
/// with the model's own embeddings.
pub fn run_ablation(
    ctx: &InferenceContext<'_>,
    csv: &ShiftVectorSet,
    test_records: &[&MemeRecord],
    mode: AblationMode,
    config: &AblationConfig,
) -> Result<EvaluationReport> {
    let predictions = ablation_predictions(ctx, csv, test_records, mode, config)?;
    EvaluationReport::build(
        predictions
            .iter()
            .zip(test_records)
            .map(|((id, p), r)| (id.as_str(), p.as_str(), r.intervention.as_str())),
        ctx.model,
        ctx.model,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_generate;
    use crate::model::pretrain::build_vocab;
    use crate::model::ModelConfig;
    use crate::retrieval::{Demonstration, Source, Strategy};

    fn setup() -> (Model, Corpus) {
        let corpus = synth_generate(12, 4, 3, 5).unwrap().corpus;
        let config = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq: 200,
            d_img: 4,
            img_prefix_len: 2,
            seed: 3,
        };
        let model = Model::new(config, build_vocab(&corpus.train())).unwrap();
        (model, corpus)
    }

    fn set_of(anchor: &MemeRecord, demos: &[&MemeRecord]) -> InContextSet {
        InContextSet {
            anchor_id: anchor.id.clone(),
            demonstrations: demos
                .iter()
                .map(|r| Demonstration {
                    id: r.id.clone(),
                    commonsense: r.commonsense.clone(),
                    intervention: r.intervention.clone(),
                    source: Source::Image,
                })
                .collect(),
            strategy: Strategy::Image,
            k: demos.len(),
            c: None,
        }
    }

    #[test]
    fn shift_and_demonstrations_are_exclusive() {
        let (_, corpus) = setup();
        let r = &corpus.records()[0];
        let set = set_of(r, &[&corpus.records()[1]]);
        let csv = ShiftVectorSet::zeros(2, 16);
        assert!(Conditioning::from_parts(Some(csv.clone()), Some(set.clone())).is_err());
        assert_eq!(Conditioning::from_parts(None, None).unwrap(), Conditioning::Plain);
        assert_eq!(Conditioning::from_parts(Some(csv.clone()), None).unwrap(), Conditioning::Shift(csv));
    }

    #[test]
    fn prompt_lengths_by_mode() {
        let (model, corpus) = setup();
        let ctx = InferenceContext {
            model: &model,
            tagger: None,
            corpus: Some(&corpus),
        };
        let r = &corpus.records()[0];
        let req = |mode, conditioning| InferenceRequest {
            record: r,
            commonsense_mode: mode,
            conditioning,
            max_new_tokens: 4,
            seed: 7,
        };
        let csv = ShiftVectorSet::zeros(2, 16);
        let zero_shot = ctx.encode(&req(CommonsenseMode::Provided, Conditioning::Plain)).unwrap();
        let shifted = ctx.encode(&req(CommonsenseMode::Provided, Conditioning::Shift(csv))).unwrap();
        assert_eq!(zero_shot, shifted);
        let none = ctx.encode(&req(CommonsenseMode::None, Conditioning::Plain)).unwrap();
        // only the params segment differs
        assert_eq!(zero_shot.prompt_len() - none.prompt_len(), 1 + r.commonsense.len());
        assert_eq!(zero_shot.token_ids[..3], none.token_ids[..3]);
        assert_eq!(zero_shot.token_ids.last(), none.token_ids.last());
        assert!(ctx.encode(&req(CommonsenseMode::Tagger, Conditioning::Plain)).is_err());

        let others: Vec<&MemeRecord> = corpus.records()[1..].iter().collect();
        let mut last = zero_shot.prompt_len();
        for k in [1, 2, 4] {
            let (_, profile) = ctx.kshot_generate(r, &set_of(r, &others[..k]), 2).unwrap();
            assert!(profile.prompt_tokens > last);
            last = profile.prompt_tokens;
        }
        let (_, empty) = ctx.kshot_generate(r, &set_of(r, &[]), 2).unwrap();
        assert_eq!(empty.prompt_tokens, zero_shot.prompt_len());
    }

    #[test]
    fn random_mode_is_seeded() {
        for seed in 0..50 {
            let s = random_commonsense(seed, RANDOM_COMMONSENSE_RANGE);
            assert!((1..=3).contains(&s.len()));
            assert_eq!(s, random_commonsense(seed, RANDOM_COMMONSENSE_RANGE));
        }
        let (model, corpus) = setup();
        let ctx = InferenceContext {
            model: &model,
            tagger: None,
            corpus: None,
        };
        let req = InferenceRequest {
            record: &corpus.records()[2],
            commonsense_mode: CommonsenseMode::Random,
            conditioning: Conditioning::Plain,
            max_new_tokens: 5,
            seed: 11,
        };
        assert_eq!(ctx.generate_intervention(&req).unwrap().0, ctx.generate_intervention(&req).unwrap().0);
    }

    #[test]
    fn fixed_alpha_matches_full_when_alpha_is_one() {
        let (model, corpus) = setup();
        let ctx = InferenceContext {
            model: &model,
            tagger: None,
            corpus: None,
        };
        let csv = crate::csv_trainer::init_csv(model.config(), 2);
        let test: Vec<&MemeRecord> = corpus.records().iter().take(3).collect();
        let config = AblationConfig {
            commonsense: CommonsenseMode::Provided,
            max_new_tokens: 6,
            seed: 0,
        };
        let full = run_ablation(&ctx, &csv, &test, AblationMode::Full, &config).unwrap();
        let fixed = run_ablation(&ctx, &csv, &test, AblationMode::FixedAlpha1, &config).unwrap();
        assert_eq!(full, fixed);
        assert!("alpha_one".parse::<AblationMode>().is_err());
        assert_eq!("no_commonsense".parse::<AblationMode>().unwrap(), AblationMode::NoCommonsense);
        assert!(run_ablation(&ctx, &csv, &[], AblationMode::Full, &config).is_err());
    }
}
