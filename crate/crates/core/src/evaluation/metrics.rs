//! Pairwise text metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lowercased whitespace tokens with punctuation removed.
pub fn lexical_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Unsmoothed sentence-level BLEU-4 with uniform weights and brevity penalty.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    let cand = lexical_tokens(candidate);
    let refs = lexical_tokens(reference);
    if cand.is_empty() {
        log::warn!("bleu4: empty candidate scores 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&refs, n);
        let total: usize = c.values().sum();
        let clipped: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand = lexical_tokens(candidate);
    let refs = lexical_tokens(reference);
    if cand.is_empty() || refs.is_empty() {
        if cand.is_empty() && refs.is_empty() {
            log::warn!("rouge_l: both texts empty, scoring 0");
        }
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refs) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / refs.len() as f64;
    2.0 * p * r / (p + r)
}

/// Vowel groups (a, e, i, o, u, y) in a word, at least one.
pub fn syllables(word: &str) -> usize {
    let mut groups = 0;
    let mut in_group = false;
    for c in word.chars().map(|c| c.to_ascii_lowercase()) {
        let vowel = matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
        if vowel && !in_group {
            groups += 1;
        }
        in_group = vowel;
    }
    groups.max(1)
}

/// Flesch Reading Ease. Sentences end at `.`, `!` or `?`; a trailing
/// fragment without terminator counts as a sentence.
pub fn readability(text: &str) -> Result<f64> {
    let is_word = |w: &&str| w.chars().any(char::is_alphanumeric);
    let mut words = 0usize;
    let mut sentences = 0usize;
    let mut syllable_count = 0usize;
    for sentence in text.split(['.', '!', '?']) {
        let ws: Vec<&str> = sentence.split_whitespace().filter(is_word).collect();
        if ws.is_empty() {
            continue;
        }
        sentences += 1;
        words += ws.len();
        syllable_count += ws
            .iter()
            .map(|w| syllables(&w.chars().filter(|c| c.is_alphanumeric()).collect::<String>()))
            .sum::<usize>();
    }
    if words == 0 {
        return Err(Error::InvalidArgument("readability of an empty text".into()));
    }
    let words = words as f64;
    Ok(206.835 - 1.015 * (words / sentences as f64) - 84.6 * (syllable_count as f64 / words))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Maps a text to one pooled vector.
pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Maps a text to one vector per token.
pub trait TokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>>;
}

impl<F: Fn(&str) -> Vec<f64>> TextEmbedder for F {
    fn embed(&self, text: &str) -> Vec<f64> {
        self(text)
    }
}

/// Cosine of the pooled embeddings.
pub fn semantic_similarity(candidate: &str, reference: &str, embedder: &dyn TextEmbedder) -> Result<f64> {
    cosine(&embedder.embed(candidate), &embedder.embed(reference))
        .ok_or_else(|| Error::InvalidArgument("zero-norm embedding in semantic_similarity".into()))
}

/// Greedy-matching F1 over token embeddings. Each token's best cosine is
/// floored at zero so the score stays in [0, 1].
pub fn matchscore_f1(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> f64 {
    let cand = embedder.embed_tokens(candidate);
    let refs = embedder.embed_tokens(reference);
    if cand.is_empty() || refs.is_empty() {
        log::warn!("matchscore_f1: empty side scores 0");
        return 0.0;
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter()
            .map(|a| to.iter().map(|b| cosine(a, b).unwrap_or(0.0)).fold(0.0, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&cand, &refs);
    let r = best(&refs, &cand);
    if p + r == 0.0 {
        return 0.0;
    }
    (2.0 * p * r / (p + r)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct OneHot;
    impl TokenEmbedder for OneHot {
        fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>> {
            text.split_whitespace()
                .map(|w| match w {
                    "a" => vec![1.0, 0.0, 0.0],
                    "b" => vec![0.0, 1.0, 0.0],
                    "c" => vec![1.0, 1.0, 0.0],
                    _ => vec![0.0, 0.0, 1.0],
                })
                .collect()
        }
    }

    #[test]
    fn bleu_fixture() {
        let expected = (0.5f64 * (2.0 / 3.0) * 0.75 * 0.8).powf(0.25);
        assert!((bleu4("a b c d e", "a b c d f") - expected).abs() < 1e-12);
        assert!((expected - 0.6687).abs() < 1e-4);
        assert_eq!(bleu4("the cat sat on mats", "the cat sat on mats"), 1.0);
        assert_eq!(bleu4("a b c d", "d c b a"), 0.0);
        assert_eq!(bleu4("", "a b c d"), 0.0);
        // punctuation and case are ignored
        assert_eq!(bleu4("The cat, sat on mats.", "the cat sat on mats"), 1.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let short = bleu4("a b c d", "a b c d e f g h");
        assert!((short - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_fixture() {
        assert!((rouge_l("a c d", "a b c d") - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "x y"), 1.0);
        assert_eq!(rouge_l("x y", "z w"), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
    }

    #[test]
    fn readability_fixture() {
        assert!((readability("The cat sat.").unwrap() - 119.19).abs() < 1e-9);
        let text = "Harmful content spreads quickly online. People share it anyway!";
        let doubled = format!("{text} {text}");
        assert!((readability(text).unwrap() - readability(&doubled).unwrap()).abs() < 1e-9);
        assert!(readability("  ... ").is_err());
        let words = "one two three four five six ";
        let long = words.repeat(5);
        let split = words.trim().split(' ').cycle().take(30).collect::<Vec<_>>().chunks(6).map(|c| c.join(" ")).collect::<Vec<_>>().join(". ");
        assert!(readability(&long).unwrap() < readability(&split).unwrap());
    }

    #[test]
    fn syllable_heuristic() {
        assert_eq!(syllables("the"), 1);
        assert_eq!(syllables("beautiful"), 3);
        assert_eq!(syllables("rhythm"), 1);
        assert_eq!(syllables("xyz"), 1);
    }

    #[test]
    fn cosine_fixture() {
        let stub = |t: &str| if t == "a" { vec![1.0, 0.0] } else { vec![1.0, 1.0] };
        let s = semantic_similarity("a", "b", &stub).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s - 0.70711).abs() < 1e-5);
        assert_eq!(semantic_similarity("b", "a", &stub).unwrap(), s);
        assert!((semantic_similarity("a", "a", &stub).unwrap() - 1.0).abs() < 1e-12);
        let zero = |_: &str| vec![0.0, 0.0];
        assert!(semantic_similarity("a", "b", &zero).is_err());
    }

    #[test]
    fn matchscore_fixtures() {
        assert!((matchscore_f1("a b c", "a b c", &OneHot) - 1.0).abs() < 1e-12);
        assert_eq!(matchscore_f1("a", "b", &OneHot), 0.0);
        // R: a -> 1, b -> cos(b, c); P: a -> 1, c -> max(cos(c, a), cos(c, b))
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = (1.0 + h) / 2.0;
        let r = (1.0 + h) / 2.0;
        assert!((matchscore_f1("a c", "a b", &OneHot) - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert_eq!(matchscore_f1("", "a", &OneHot), 0.0);
    }
}
