//! Accuracy and Macro-F1, plus the seed-averaged original-vs-augmented
//! comparison.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{argmax, predict, train, ModelError, TrainConfig, NUM_CLASSES};
use crate::corpus::{build_vocab, Dataset, Polarity};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot score an empty prediction set")]
    Empty,
    #[error("{preds} predictions for {gold} gold labels")]
    LengthMismatch { preds: usize, gold: usize },
    #[error("test sample {0} also appears in a training corpus")]
    Leakage(String),
    #[error("no seeds given")]
    NoSeeds,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `matrix[gold][pred]`
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub matrix: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[Polarity], gold: &[Polarity]) -> Result<Self, EvalError> {
        if preds.len() != gold.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                gold: gold.len(),
            });
        }
        if preds.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut m = Self::default();
        for (p, g) in preds.iter().zip(gold) {
            m.matrix[g.index()][p.index()] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..NUM_CLASSES).map(|c| self.matrix[c][c]).sum();
        correct as f64 / self.total() as f64
    }

    /// `(precision, recall, f1)` for class `c`; any 0/0 is taken as 0.
    pub fn class_scores(&self, c: usize) -> ClassScores {
        let tp = self.matrix[c][c] as f64;
        let predicted: usize = (0..NUM_CLASSES).map(|g| self.matrix[g][c]).sum();
        let actual: usize = self.matrix[c].iter().sum();
        let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores { precision, recall, f1 }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..NUM_CLASSES).map(|c| self.class_scores(c).f1).sum::<f64>() / NUM_CLASSES as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn macro_f1(preds: &[Polarity], gold: &[Polarity]) -> Result<f64, EvalError> {
    Ok(ConfusionMatrix::from_pairs(preds, gold)?.macro_f1())
}

pub fn accuracy(preds: &[Polarity], gold: &[Polarity]) -> Result<f64, EvalError> {
    Ok(ConfusionMatrix::from_pairs(preds, gold)?.accuracy())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Negative, neutral, positive.
    pub per_class: [ClassScores; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

impl RunMetrics {
    pub fn from_confusion(seed: u64, confusion: ConfusionMatrix) -> Self {
        Self {
            seed,
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            per_class: [0, 1, 2].map(|c| confusion.class_scores(c)),
            confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub corpus: String,
    pub runs: Vec<RunMetrics>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    pub fn from_runs(corpus: &str, runs: Vec<RunMetrics>) -> Self {
        let n = runs.len() as f64;
        Self {
            corpus: corpus.to_string(),
            mean_accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / n,
            mean_macro_f1: runs.iter().map(|r| r.macro_f1).sum::<f64>() / n,
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Trains on `train_set` with `seed` and scores on `test`. Evaluates the
/// final-epoch model; there is no validation split.
pub fn train_and_score(
    train_set: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunMetrics, EvalError> {
    let vocab = build_vocab(train_set, 1);
    let cfg = TrainConfig { seed, ..config.clone() };
    let model = train(train_set, &vocab, &cfg)?;
    let preds = test
        .samples
        .iter()
        .map(|s| predict(&model.params, &vocab, s).map(|p| argmax(&p)))
        .collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<Polarity> = test.samples.iter().map(|s| s.label).collect();
    Ok(RunMetrics::from_confusion(
        seed,
        ConfusionMatrix::from_pairs(&preds, &gold)?,
    ))
}

/// Scores one training corpus over every seed.
pub fn evaluate_corpus(
    name: &str,
    train_set: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<MetricsReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    check_disjoint(train_set, test)?;
    let runs = seeds
        .par_iter()
        .map(|&seed| train_and_score(train_set, test, config, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::from_runs(name, runs))
}

fn check_disjoint(train_set: &Dataset, test: &Dataset) -> Result<(), EvalError> {
    let ids: HashSet<&str> = train_set.samples.iter().map(|s| s.id.as_str()).collect();
    match test.samples.iter().find(|s| ids.contains(s.id.as_str())) {
        Some(s) => Err(EvalError::Leakage(s.id.clone())),
        None => Ok(()),
    }
}

/// Original-vs-augmented comparison over the same seeds.
pub fn run_eval(
    original: &Dataset,
    augmented: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<(MetricsReport, MetricsReport), EvalError> {
    Ok((
        evaluate_corpus("original", original, test, seeds, config)?,
        evaluate_corpus("augmented", augmented, test, seeds, config)?,
    ))
}

/// Plain-text table with one row per report: method, Acc, Macro-F1
/// (percentages, seed means).
pub fn render_table(dataset_name: &str, reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.corpus.len()).chain([6]).max().unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:width$} | {:^17}", "", dataset_name);
    let _ = writeln!(out, "{:width$} | {:>7} | {:>7}", "Method", "Acc", "F1");
    let _ = writeln!(out, "{}", "-".repeat(width + 20));
    for r in reports {
        let _ = writeln!(
            out,
            "{:width$} | {:>7.2} | {:>7.2}",
            r.corpus,
            100.0 * r.mean_accuracy,
            100.0 * r.mean_macro_f1
        );
    }
    out
}
