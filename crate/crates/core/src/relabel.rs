//! Candidate selection by probability fluctuation and confidence-gated final
//! labeling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{argmax, predict, ModelError, ModelParams, NUM_CLASSES};
use crate::corpus::{tokenize, AspectSpan, Polarity, Sample, Vocab};
use crate::generation::GenerationCandidate;

#[derive(Debug, Error)]
pub enum RelabelError {
    #[error("no candidate for {source_id} still contains its aspect")]
    NoViableCandidate { source_id: String },
    #[error("probability threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelConfig {
    pub prob_threshold: f64,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self { prob_threshold: 0.7 }
    }
}

impl RelabelConfig {
    pub fn validate(&self) -> Result<(), RelabelError> {
        if self.prob_threshold > 0.0 && self.prob_threshold < 1.0 {
            Ok(())
        } else {
            Err(RelabelError::InvalidThreshold(self.prob_threshold))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalRule {
    KeptTarget,
    ArgmaxOverride,
}

/// Keeps the target label only when the model agrees with it and is more
/// confident than `threshold`; otherwise takes the model's argmax.
pub fn assign_label(probs: &[f64; NUM_CLASSES], target: Polarity, threshold: f64) -> (Polarity, FinalRule) {
    let top = argmax(probs);
    let max = probs[top.index()];
    if top == target && max > threshold {
        (target, FinalRule::KeptTarget)
    } else {
        (top, FinalRule::ArgmaxOverride)
    }
}

/// Rebuilds a sample from candidate text, locating the source aspect by its
/// first token-level occurrence. `None` if the aspect is gone.
pub fn candidate_sample(source: &Sample, text: &str, id: String) -> Option<Sample> {
    let tokens = tokenize(text);
    let aspect = &source.tokens[source.aspect().start..source.aspect().end];
    let start = tokens.windows(aspect.len()).position(|w| w == aspect)?;
    Some(Sample {
        id,
        tokens,
        aspects: vec![AspectSpan {
            start,
            end: start + aspect.len(),
            surface: source.aspect().surface.clone(),
        }],
        label: source.label,
        aspect_index: 0,
    })
}

/// Index of the largest fluctuation; `None` entries are excluded and ties go
/// to the earliest index.
pub fn argmax_fluctuation(fluctuations: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in fluctuations.iter().enumerate() {
        if let Some(f) = *f {
            if best.is_none_or(|(_, b)| f > b) {
                best = Some((i, f));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedCandidate {
    pub index: usize,
    pub sample: Sample,
    pub probs: [f64; NUM_CLASSES],
    /// `P_candidate(target) - P_source(target)`
    pub fluctuation: f64,
}

pub fn select_candidate(
    params: &ModelParams,
    vocab: &Vocab,
    source: &Sample,
    candidates: &[GenerationCandidate],
    source_probs: &[f64; NUM_CLASSES],
    target: Polarity,
) -> Result<SelectedCandidate, RelabelError> {
    let mut scored: Vec<Option<(Sample, [f64; NUM_CLASSES], f64)>> = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let entry = match candidate_sample(source, &c.text, format!("{}~{}~{i}", source.id, target)) {
            None => None,
            Some(sample) => {
                let probs = predict(params, vocab, &sample)?;
                let shift = probs[target.index()] - source_probs[target.index()];
                Some((sample, probs, shift))
            }
        };
        scored.push(entry);
    }
    let fluct: Vec<Option<f64>> = scored.iter().map(|s| s.as_ref().map(|x| x.2)).collect();
    let index = argmax_fluctuation(&fluct).ok_or_else(|| RelabelError::NoViableCandidate {
        source_id: source.id.clone(),
    })?;
    let (sample, probs, fluctuation) = scored.swap_remove(index).expect("selected entry is viable");
    Ok(SelectedCandidate {
        index,
        sample,
        probs,
        fluctuation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub target: Polarity,
    pub prompt_id: String,
    pub prob_shift: f64,
    pub rule: FinalRule,
    pub backend: String,
    /// Model probabilities for the augmented text.
    pub probs: [f64; NUM_CLASSES],
    pub prob_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub sample: Sample,
    pub provenance: Provenance,
}

/// Selects the best candidate for `target` and labels it.
pub fn relabel(
    params: &ModelParams,
    vocab: &Vocab,
    source: &Sample,
    candidates: &[GenerationCandidate],
    target: Polarity,
    config: &RelabelConfig,
) -> Result<AugmentedSample, RelabelError> {
    config.validate()?;
    let source_probs = predict(params, vocab, source)?;
    let chosen = select_candidate(params, vocab, source, candidates, &source_probs, target)?;
    let (label, rule) = assign_label(&chosen.probs, target, config.prob_threshold);
    let cand = &candidates[chosen.index];
    let mut sample = chosen.sample;
    sample.label = label;
    sample.id = format!("{}~{}", source.id, target);
    Ok(AugmentedSample {
        sample,
        provenance: Provenance {
            source_id: source.id.clone(),
            target,
            prompt_id: cand.prompt_id.clone(),
            prob_shift: chosen.fluctuation,
            rule,
            backend: cand.backend_name.clone(),
            probs: chosen.probs,
            prob_threshold: config.prob_threshold,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_rule_examples() {
        assert_eq!(
            assign_label(&[0.1, 0.1, 0.8], Polarity::Positive, 0.7),
            (Polarity::Positive, FinalRule::KeptTarget)
        );
        assert_eq!(
            assign_label(&[0.1, 0.3, 0.6], Polarity::Positive, 0.7),
            (Polarity::Positive, FinalRule::ArgmaxOverride)
        );
        assert_eq!(
            assign_label(&[0.7, 0.2, 0.1], Polarity::Positive, 0.5),
            (Polarity::Negative, FinalRule::ArgmaxOverride)
        );
    }

    #[test]
    fn fluctuation_argmax() {
        assert_eq!(argmax_fluctuation(&[Some(0.1), Some(0.6), Some(0.3)]), Some(1));
        assert_eq!(argmax_fluctuation(&[Some(-0.2)]), Some(0));
        assert_eq!(argmax_fluctuation(&[Some(0.4), Some(0.4)]), Some(0));
        assert_eq!(argmax_fluctuation(&[None, Some(0.0)]), Some(1));
        assert_eq!(argmax_fluctuation(&[None, None]), None);
    }

    #[test]
    fn candidate_without_aspect_is_rejected() {
        let source = Sample {
            id: "s".into(),
            tokens: tokenize("the battery life was poor"),
            aspects: vec![AspectSpan {
                start: 1,
                end: 3,
                surface: "battery life".into(),
            }],
            label: Polarity::Negative,
            aspect_index: 0,
        };
        let c = candidate_sample(&source, "great battery life overall", "c".into()).unwrap();
        assert_eq!((c.aspect().start, c.aspect().end), (1, 3));
        assert!(candidate_sample(&source, "the battery was great", "c".into()).is_none());
    }

    #[test]
    fn threshold_validation() {
        assert!(RelabelConfig { prob_threshold: 1.0 }.validate().is_err());
        assert!(RelabelConfig { prob_threshold: 0.0 }.validate().is_err());
        assert!(RelabelConfig::default().validate().is_ok());
    }
}
