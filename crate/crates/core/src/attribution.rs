//! Integrated-gradients attribution of sentence tokens toward the gold label.
//!
//! The path runs in embedding space from a baseline in which every
//! non-aspect sentence token is replaced by the PAD embedding. Attributions
//! are a quadrature over the grid `x_j = x0 + (j/S)(x - x0)`, `j = 0..S`:
//!
//! ```text
//! ig_t = (x_t - x0_t) ⊙ Σ_j w_j ∂M(x_j)_y / ∂x_t
//! ```
//!
//! with trapezoid weights (`1/2S` at the endpoints, `1/S` inside) by default,
//! or right-endpoint weights (`1/S` for `j = 1..S`). The per-token score is the
//! L2 norm of `ig_t` over embedding dimensions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{forward, grad_wrt_input, EmbeddedInput, ModelError, ModelParams};
use crate::corpus::{EncodedSample, Polarity, PAD};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("integrated gradients needs at least one interpolation step")]
    ZeroSteps,
    #[error("input and baseline shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Quadrature rule over the interpolation grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgRule {
    /// Error `O(1/S²)`.
    #[default]
    Trapezoid,
    /// Error `O(1/S)`.
    RightRiemann,
}

impl IgRule {
    fn weight(self, j: usize, steps: usize) -> f64 {
        let s = steps as f64;
        match self {
            IgRule::Trapezoid if j == 0 || j == steps => 0.5 / s,
            IgRule::Trapezoid => 1.0 / s,
            IgRule::RightRiemann if j == 0 => 0.0,
            IgRule::RightRiemann => 1.0 / s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgConfig {
    pub steps: usize,
    pub rule: IgRule,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            rule: IgRule::Trapezoid,
        }
    }
}

impl IgConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Non-negative score per sentence token.
    pub token_scores: Vec<f64>,
    /// `(x_t - x0_t) ⊙ path-averaged gradient` per sentence token.
    pub signed_components: Vec<Vec<f64>>,
    /// `|Σ ig - (M(x)_y - M(x0)_y)|`, summing over sentence and aspect vectors.
    pub completeness_gap: f64,
    pub baseline_prob: f64,
    pub input_prob: f64,
    pub target_class: Polarity,
}

/// Replaces every non-aspect sentence vector by the PAD embedding; aspect
/// positions and the aspect suffix are copied unchanged.
pub fn make_baseline(params: &ModelParams, input: &EmbeddedInput, encoded: &EncodedSample) -> EmbeddedInput {
    let pad = params.embedding_row(PAD);
    let sentence = input
        .sentence
        .iter()
        .enumerate()
        .map(|(t, v)| {
            if encoded.is_aspect_position(t) {
                v.clone()
            } else {
                pad.to_vec()
            }
        })
        .collect();
    EmbeddedInput {
        sentence,
        aspect: input.aspect.clone(),
    }
}

fn interpolate(baseline: &[Vec<f64>], input: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    baseline
        .iter()
        .zip(input)
        .map(|(b, x)| b.iter().zip(x).map(|(b, x)| b + alpha * (x - b)).collect())
        .collect()
}

fn same_shape(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(u, v)| u.len() == v.len())
}

pub fn integrated_gradients(
    params: &ModelParams,
    input: &EmbeddedInput,
    baseline: &EmbeddedInput,
    target: Polarity,
    config: &IgConfig,
) -> Result<AttributionResult, AttributionError> {
    if config.steps == 0 {
        return Err(AttributionError::ZeroSteps);
    }
    if !same_shape(&input.sentence, &baseline.sentence) || !same_shape(&input.aspect, &baseline.aspect) {
        return Err(AttributionError::ShapeMismatch);
    }
    let steps = config.steps;
    let zeros = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> { vs.iter().map(|v| vec![0.0; v.len()]).collect() };
    let mut sum_s = zeros(&input.sentence);
    let mut sum_a = zeros(&input.aspect);

    for j in 0..=steps {
        let w = config.rule.weight(j, steps);
        if w == 0.0 {
            continue;
        }
        let alpha = j as f64 / steps as f64;
        let point = EmbeddedInput {
            sentence: interpolate(&baseline.sentence, &input.sentence, alpha),
            aspect: interpolate(&baseline.aspect, &input.aspect, alpha),
        };
        let g = grad_wrt_input(params, &point, target)?;
        for (acc, gv) in sum_s.iter_mut().zip(&g.sentence).chain(sum_a.iter_mut().zip(&g.aspect)) {
            for (a, v) in acc.iter_mut().zip(gv) {
                *a += w * v;
            }
        }
    }

    let signed = |xs: &[Vec<f64>], bs: &[Vec<f64>], sums: &[Vec<f64>]| -> Vec<Vec<f64>> {
        xs.iter()
            .zip(bs)
            .zip(sums)
            .map(|((x, b), s)| x.iter().zip(b).zip(s).map(|((x, b), s)| (x - b) * s).collect())
            .collect()
    };
    let signed_components = signed(&input.sentence, &baseline.sentence, &sum_s);
    let suffix_components = signed(&input.aspect, &baseline.aspect, &sum_a);

    let token_scores = signed_components
        .iter()
        .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
        .collect();
    let total: f64 = signed_components.iter().chain(&suffix_components).flatten().sum();
    let y = target.index();
    let input_prob = forward(params, input)?[y];
    let baseline_prob = forward(params, baseline)?[y];

    Ok(AttributionResult {
        token_scores,
        signed_components,
        completeness_gap: (total - (input_prob - baseline_prob)).abs(),
        baseline_prob,
        input_prob,
        target_class: target,
    })
}

/// Positions sorted by descending score; ties keep the earlier position first.
pub fn rank_tokens(scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}
