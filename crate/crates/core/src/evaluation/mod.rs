//! Metrics, significance tests, evaluation reports and hidden-state probes.

mod metrics;
mod probes;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use metrics::{
    bleu4, cosine, lexical_tokens, matchscore_f1, readability, rouge_l, semantic_similarity, syllables, TextEmbedder,
    TokenEmbedder,
};
pub use probes::{
    group_by_parameter, probe_cooccurrence_correlation, probe_hidden, probe_within_between, CooccurrenceProbe,
    PairDistance, WithinBetween, PROBE_SAMPLE,
};
pub use stats::{average_ranks, mann_whitney_u, spearman_rho, MannWhitney, EXACT_LIMIT};

use crate::error::{Error, Result};
use crate::model::Model;

impl TextEmbedder for Model {
    fn embed(&self, text: &str) -> Vec<f64> {
        self.mean_token_embedding(text)
    }
}

impl TokenEmbedder for Model {
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>> {
        self.contextual_token_embeddings(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub readability: f64,
    pub semantic_similarity: f64,
    pub matchscore_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub u_statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub aggregates: RecordScores,
    pub per_record: BTreeMap<String, RecordScores>,
    /// Mann-Whitney test of per-record semantic similarity against a baseline.
    pub significance: Option<Significance>,
}

/// All metrics for one prediction. An empty prediction scores 0 on every
/// metric, readability included.
pub fn score_pair(prediction: &str, reference: &str, text: &dyn TextEmbedder, tokens: &dyn TokenEmbedder) -> RecordScores {
    if lexical_tokens(prediction).is_empty() {
        log::warn!("empty prediction scores 0 on every metric");
        return RecordScores {
            bleu4: 0.0,
            rouge_l: 0.0,
            readability: 0.0,
            semantic_similarity: 0.0,
            matchscore_f1: 0.0,
        };
    }
    RecordScores {
        bleu4: bleu4(prediction, reference),
        rouge_l: rouge_l(prediction, reference),
        readability: readability(prediction).unwrap_or(0.0),
        semantic_similarity: semantic_similarity(prediction, reference, text).unwrap_or(0.0),
        matchscore_f1: matchscore_f1(prediction, reference, tokens),
    }
}

impl EvaluationReport {
    /// Scores `(id, prediction, reference)` triples. Aggregates are summed in
    /// id order, so the report does not depend on input order.
    pub fn build<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
        text: &dyn TextEmbedder,
        tokens: &dyn TokenEmbedder,
    ) -> Result<Self> {
        let mut per_record = BTreeMap::new();
        for (id, prediction, reference) in items {
            let scores = score_pair(prediction, reference, text, tokens);
            if per_record.insert(id.to_string(), scores).is_some() {
                return Err(Error::Validation(format!("duplicate prediction for {id}")));
            }
        }
        if per_record.is_empty() {
            return Err(Error::InvalidArgument("nothing to evaluate".into()));
        }
        let n = per_record.len();
        let mean = |f: fn(&RecordScores) -> f64| per_record.values().map(f).sum::<f64>() / n as f64;
        let aggregates = RecordScores {
            bleu4: mean(|s| s.bleu4),
            rouge_l: mean(|s| s.rouge_l),
            readability: mean(|s| s.readability),
            semantic_similarity: mean(|s| s.semantic_similarity),
            matchscore_f1: mean(|s| s.matchscore_f1),
        };
        Ok(EvaluationReport {
            n,
            aggregates,
            per_record,
            significance: None,
        })
    }

    /// Attaches a two-sided Mann-Whitney test of this report's per-record
    /// semantic similarity against `baseline`'s.
    pub fn compare_with(&mut self, baseline: &EvaluationReport) -> Result<()> {
        let ours: Vec<f64> = self.per_record.values().map(|s| s.semantic_similarity).collect();
        let theirs: Vec<f64> = baseline.per_record.values().map(|s| s.semantic_similarity).collect();
        let test = mann_whitney_u(&ours, &theirs)?;
        self.significance = Some(Significance {
            u_statistic: test.u,
            p_value: test.p_two_sided,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Chars;
    impl TokenEmbedder for Chars {
        fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>> {
            text.split_whitespace().map(|w| vec![w.len() as f64, 1.0]).collect()
        }
    }

    fn letters(text: &str) -> Vec<f64> {
        let mut v = vec![0.0; 26];
        for c in text.chars().filter(char::is_ascii_lowercase) {
            v[(c as u8 - b'a') as usize] += 1.0;
        }
        v
    }

    #[test]
    fn report_is_order_invariant() {
        let items = [
            ("b", "this meme is rude", "this meme is rude and mean"),
            ("a", "share it", "do not share it"),
            ("c", "", "anything"),
        ];
        let fwd = EvaluationReport::build(items.iter().copied(), &letters, &Chars).unwrap();
        let rev = EvaluationReport::build(items.iter().rev().copied(), &letters, &Chars).unwrap();
        assert_eq!(fwd, rev);
        assert_eq!(fwd.n, 3);
        let mean_bleu = fwd.per_record.values().map(|s| s.bleu4).sum::<f64>() / 3.0;
        assert!((fwd.aggregates.bleu4 - mean_bleu).abs() < 1e-12);
        assert_eq!(fwd.per_record["c"].readability, 0.0);
    }

    #[test]
    fn duplicates_and_empty_input_fail() {
        let dup = [("a", "x", "x"), ("a", "y", "y")];
        assert!(EvaluationReport::build(dup.iter().copied(), &letters, &Chars).is_err());
        assert!(EvaluationReport::build(std::iter::empty(), &letters, &Chars).is_err());
    }

    #[test]
    fn significance_against_a_baseline() {
        let good = [("a", "do not share", "do not share"), ("b", "rude meme", "rude meme"), ("c", "x y", "x y")];
        let bad = [("a", "zzz", "do not share"), ("b", "qqq", "rude meme"), ("c", "k", "x y")];
        let mut ours = EvaluationReport::build(good.iter().copied(), &letters, &Chars).unwrap();
        let base = EvaluationReport::build(bad.iter().copied(), &letters, &Chars).unwrap();
        ours.compare_with(&base).unwrap();
        let s = ours.significance.unwrap();
        assert_eq!(s.u_statistic, 9.0);
        assert!((s.p_value - 0.1).abs() < 1e-12);
    }
}
