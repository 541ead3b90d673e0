//! Opinion corruption: mask the highest-attribution sentence tokens and merge
//! adjacent masks into single spans.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedSample;
use crate::seeding::derive_seed;

pub const DEFAULT_MASK_TOKEN: &str = "<mask>";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    IntegratedGradients,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Piece {
    Literal { tokens: Vec<String> },
    Mask { start: usize, end: usize },
}

/// A sentence with some tokens replaced by mask spans. Only the sentence is
/// kept; the `[SEP]` + aspect suffix is never maskable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedSample {
    pub sample_id: String,
    pub pieces: Vec<Piece>,
    /// Sorted, disjoint `[start, end)` token ranges.
    pub mask_spans: Vec<(usize, usize)>,
    /// Original tokens under each span, in span order.
    pub removed: Vec<Vec<String>>,
    pub k_used: usize,
    pub strategy: MaskStrategy,
    /// Set when every sentence token belongs to the aspect.
    pub no_maskable_tokens: bool,
}

impl CorruptedSample {
    /// Builds the sample from the set of selected positions.
    pub fn from_selection(
        sample_id: &str,
        tokens: &[String],
        selected: &[usize],
        k_used: usize,
        strategy: MaskStrategy,
    ) -> Self {
        let mask_spans = merge_spans(selected);
        let mut pieces = Vec::new();
        let mut removed = Vec::new();
        let mut cursor = 0;
        for &(start, end) in &mask_spans {
            if start > cursor {
                pieces.push(Piece::Literal {
                    tokens: tokens[cursor..start].to_vec(),
                });
            }
            pieces.push(Piece::Mask { start, end });
            removed.push(tokens[start..end].to_vec());
            cursor = end;
        }
        if cursor < tokens.len() {
            pieces.push(Piece::Literal {
                tokens: tokens[cursor..].to_vec(),
            });
        }
        Self {
            sample_id: sample_id.to_string(),
            pieces,
            mask_spans,
            removed,
            k_used,
            strategy,
            no_maskable_tokens: false,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask_spans.iter().map(|(s, e)| e - s).sum()
    }

    /// Space-joined text with one `mask_token` per span.
    pub fn render(&self, mask_token: &str) -> String {
        let mut words: Vec<&str> = Vec::new();
        for p in &self.pieces {
            match p {
                Piece::Literal { tokens } => words.extend(tokens.iter().map(String::as_str)),
                Piece::Mask { .. } => words.push(mask_token),
            }
        }
        words.join(" ")
    }

    /// The original sentence tokens.
    pub fn restore(&self) -> Vec<String> {
        let mut removed = self.removed.iter();
        let mut out = Vec::new();
        for p in &self.pieces {
            match p {
                Piece::Literal { tokens } => out.extend(tokens.iter().cloned()),
                Piece::Mask { .. } => out.extend(removed.next().expect("one removed run per span").iter().cloned()),
            }
        }
        out
    }
}

/// Partitions positions into maximal runs of consecutive indices.
pub fn merge_spans(positions: &[usize]) -> Vec<(usize, usize)> {
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for p in sorted {
        match spans.last_mut() {
            Some((_, end)) if *end == p => *end = p + 1,
            _ => spans.push((p, p + 1)),
        }
    }
    spans
}

/// Number of tokens to mask for a sentence: `floor(len / 3)`, at least 1.
pub fn mask_budget(sentence_len: usize) -> usize {
    (sentence_len / 3).max(1)
}

/// Returns `(thr, k)` where `k = mask_budget(len)` and `thr` is the k-th
/// largest score.
pub fn select_threshold(scores: &[f64], sentence_len: usize) -> (f64, usize) {
    assert!(
        !scores.is_empty() && scores.len() == sentence_len,
        "scores must cover the sentence"
    );
    let k = mask_budget(sentence_len);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted[k - 1], k)
}

/// Masks tokens of `tokens` (the sentence of `encoded`).
///
/// With [`MaskStrategy::IntegratedGradients`], positions scoring at least the
/// k-th largest score among maskable positions are selected, capped at `k` by
/// descending score with earlier positions winning ties. With
/// [`MaskStrategy::Random`], `k` maskable positions are drawn from a stream
/// seeded by `(seed, sample_id)`. Aspect positions are never maskable.
pub fn mask_tokens(
    sample_id: &str,
    tokens: &[String],
    encoded: &EncodedSample,
    scores: &[f64],
    strategy: MaskStrategy,
    seed: u64,
) -> CorruptedSample {
    let n = encoded.sentence_len;
    assert_eq!(tokens.len(), n, "tokens must match the encoded sentence");
    let candidates: Vec<usize> = (0..n).filter(|p| !encoded.is_aspect_position(*p)).collect();
    let k = mask_budget(n);
    if candidates.is_empty() {
        let mut out = CorruptedSample::from_selection(sample_id, tokens, &[], k, strategy);
        out.no_maskable_tokens = true;
        return out;
    }
    let take = k.min(candidates.len());

    let selected: Vec<usize> = match strategy {
        MaskStrategy::IntegratedGradients => {
            assert_eq!(scores.len(), n, "one score per sentence token");
            let cand_scores: Vec<f64> = candidates.iter().map(|&p| scores[p]).collect();
            let mut sorted = cand_scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let thr = sorted[take - 1];
            let mut above: Vec<usize> = candidates.iter().copied().filter(|&p| scores[p] >= thr).collect();
            // stable: equal scores keep ascending position order
            above.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
            above.truncate(take);
            above
        }
        MaskStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["random-mask", sample_id]));
            index::sample(&mut rng, candidates.len(), take)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        }
    };
    CorruptedSample::from_selection(sample_id, tokens, &selected, k, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn enc(n: usize, aspect: Vec<usize>) -> EncodedSample {
        let mut ids: Vec<usize> = (10..10 + n).collect();
        ids.push(crate::corpus::SEP);
        ids.extend(aspect.iter().map(|p| 10 + p));
        EncodedSample {
            ids,
            sentence_len: n,
            aspect_positions: aspect,
        }
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(&[0.0; 12], 12).1, 4);
        assert_eq!(select_threshold(&[0.3, 0.1], 2), (0.3, 1));
        assert_eq!(select_threshold(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.0], 6), (4.0, 2));
    }

    #[test]
    fn merge_is_maximal_runs() {
        assert_eq!(merge_spans(&[11, 2, 5, 6, 7]), vec![(2, 3), (5, 8), (11, 12)]);
        assert!(merge_spans(&[]).is_empty());
    }

    #[test]
    fn worked_example_renders() {
        let tokens = tokenize("Maximum sound isn't nearly as loud as it should be");
        let c = CorruptedSample::from_selection("ex", &tokens, &[2, 4, 5, 6, 10], 3, MaskStrategy::IntegratedGradients);
        assert_eq!(c.render("<mask>"), "maximum sound <mask> 't <mask> as it should <mask>");
        assert_eq!(c.restore(), tokens);
    }

    #[test]
    fn tie_at_cap_prefers_earlier_position() {
        let e = enc(6, vec![0]);
        let scores = [9.0, 0.5, 0.7, 0.7, 0.7, 0.1];
        let c = mask_tokens("t", &words(6), &e, &scores, MaskStrategy::IntegratedGradients, 0);
        assert_eq!(c.mask_spans, vec![(2, 4)]);
        assert_eq!(c.masked_count(), 2);
    }

    #[test]
    fn aspect_only_sentence_has_no_masks() {
        let e = enc(2, vec![0, 1]);
        let c = mask_tokens("t", &words(2), &e, &[0.0, 0.0], MaskStrategy::IntegratedGradients, 0);
        assert!(c.no_maskable_tokens);
        assert!(c.mask_spans.is_empty());
    }

    #[test]
    fn random_strategy_is_deterministic_per_sample() {
        let e = enc(12, vec![3]);
        let a = mask_tokens("s1", &words(12), &e, &[], MaskStrategy::Random, 4);
        let b = mask_tokens("s1", &words(12), &e, &[], MaskStrategy::Random, 4);
        assert_eq!(a, b);
        assert_eq!(a.masked_count(), 4);
        assert!(a.mask_spans.iter().all(|(s, e)| !(*s..*e).contains(&3)));
    }
}
