//! End-to-end augmentation run: train-base → attribute → corrupt → generate →
//! relabel → merge.
//!
//! Every stage writes a JSONL (or checkpoint) artifact under the output
//! directory and reads its inputs back from disk, so a run can resume from
//! the last completed stage. `manifest.json` records the config hash, the
//! completed stages with the SHA-256 of their outputs, and run counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{integrated_gradients, make_baseline, AttributionError, IgConfig};
use crate::classifier::{
    embed, load_checkpoint, save_checkpoint, train, Checkpoint, CheckpointError, ModelError, TrainConfig,
};
use crate::corpus::{
    build_vocab, encode, load_jsonl, load_semeval_xml, record_to_sample, sample_to_record, ClassCounts, CorpusError,
    Dataset, JsonlRecord, Polarity, Sample,
};
use crate::corruption::{mask_tokens, CorruptedSample, MaskStrategy, DEFAULT_MASK_TOKEN};
use crate::eval::{evaluate_corpus, render_table, EvalError, MetricsReport};
use crate::generation::{
    generate_candidates, DiscardReason, GenerationCandidate, GenerationError, GenerationParams, InfillBackend,
    LexiconBackend, RemoteBackend, RemoteConfig, TemplateSet, DEFAULT_MAX_WORDS_PER_MASK,
};
use crate::lexicon::{Lexicon, LexiconError};
use crate::relabel::{relabel, FinalRule, Provenance, RelabelConfig, RelabelError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config file {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Artifact { path: String, line: usize, reason: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Relabel(#[from] RelabelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Problems with the configuration itself, as opposed to runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, PipelineError::Config { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    SemevalXml,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Counterfactual,
    LabelPreserve,
}

impl PromptMode {
    /// Polarities to generate toward for a source with label `gold`.
    pub fn targets(self, gold: Polarity) -> Vec<Polarity> {
        match self {
            PromptMode::Counterfactual => gold.others().to_vec(),
            PromptMode::LabelPreserve => vec![gold],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Lexicon,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub format: DatasetFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub d: usize,
    pub h: usize,
    pub l2: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            d: t.dim,
            h: t.hidden,
            l2: t.l2_penalty,
        }
    }
}

impl ClassifierSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            l2_penalty: self.l2,
            dim: self.d,
            hidden: self.h,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub strategy: MaskStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub mode: PromptMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    pub n_per_template: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            mode: PromptMode::Counterfactual,
            templates: None,
            n_per_template: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub max_words_per_mask: usize,
    /// Delay before the first retry of a failed remote request.
    pub retry_backoff_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Lexicon,
            base_url: None,
            timeout_secs: 30.0,
            max_in_flight: 4,
            lexicon: None,
            max_words_per_mask: DEFAULT_MAX_WORDS_PER_MASK,
            retry_backoff_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub best_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_mask_token")]
    pub mask_token: String,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub ig: IgConfig,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub relabel: RelabelConfig,
    pub output: OutputSection,
}

fn default_workers() -> usize {
    4
}

fn default_mask_token() -> String {
    DEFAULT_MASK_TOKEN.to_string()
}

impl PipelineConfig {
    /// Parses a config file: JSON when the extension is `.json`, TOML
    /// otherwise. Relative paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config {
            path: path.display().to_string(),
            reason: format!("cannot read: {e}"),
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        let mut config = parsed.map_err(|reason| PipelineError::Config {
            path: path.display().to_string(),
            reason,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate().map_err(|reason| PipelineError::Config {
            path: path.display().to_string(),
            reason,
        })?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.train);
        if let Some(p) = self.dataset.test.as_mut() {
            fix(p);
        }
        if let Some(p) = self.prompt.templates.as_mut() {
            fix(p);
        }
        if let Some(p) = self.backend.lexicon.as_mut() {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<(), String> {
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(format!("{what} {} does not exist", p.display()))
            }
        };
        exists(&self.dataset.train, "dataset.train")?;
        if let Some(p) = &self.dataset.test {
            exists(p, "dataset.test")?;
        }
        if let Some(p) = &self.prompt.templates {
            exists(p, "prompt.templates")?;
        }
        if let Some(p) = &self.backend.lexicon {
            exists(p, "backend.lexicon")?;
        }
        if self.backend.kind == BackendKind::Remote && self.backend.base_url.is_none() {
            return Err("backend.kind = \"remote\" requires backend.base_url".into());
        }
        if !(self.backend.timeout_secs > 0.0 && self.backend.timeout_secs.is_finite()) {
            return Err("backend.timeout_secs must be positive".into());
        }
        if self.backend.max_in_flight == 0 {
            return Err("backend.max_in_flight must be >= 1".into());
        }
        if !(1..=DEFAULT_MAX_WORDS_PER_MASK).contains(&self.backend.max_words_per_mask) {
            return Err(format!(
                "backend.max_words_per_mask must be in 1..={DEFAULT_MAX_WORDS_PER_MASK}"
            ));
        }
        if self.prompt.n_per_template == 0 {
            return Err("prompt.n_per_template must be >= 1".into());
        }
        if self.ig.steps == 0 {
            return Err("ig.steps must be >= 1".into());
        }
        if self.workers == 0 {
            return Err("workers must be >= 1".into());
        }
        if self.mask_token.trim().is_empty() {
            return Err("mask_token must be non-empty".into());
        }
        self.relabel.validate().map_err(|e| e.to_string())?;
        self.classifier
            .train_config(self.seed)
            .validate()
            .map_err(|e| e.to_string())
    }

    pub fn train_config(&self) -> TrainConfig {
        self.classifier.train_config(self.seed)
    }

    /// Hash of every setting that affects outputs (the output directory and
    /// worker count excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        c.workers = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, PipelineError> {
    let ds = match format {
        DatasetFormat::Jsonl => load_jsonl(path)?,
        DatasetFormat::SemevalXml => load_semeval_xml(path)?,
    };
    let mut seen = HashSet::new();
    if let Some(s) = ds.samples.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(PipelineError::DuplicateId(s.id.clone()));
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TrainBase,
    Attribute,
    Corrupt,
    Generate,
    Relabel,
    Merge,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainBase,
        Stage::Attribute,
        Stage::Corrupt,
        Stage::Generate,
        Stage::Relabel,
        Stage::Merge,
    ];

    pub fn output_file(self) -> &'static str {
        match self {
            Stage::TrainBase => "base_model.ckpt",
            Stage::Attribute => "attributions.jsonl",
            Stage::Corrupt => "corrupted.jsonl",
            Stage::Generate => "candidates.jsonl",
            Stage::Relabel => "augmented.jsonl",
            Stage::Merge => "merged.jsonl",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

/// One line of `attributions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub completeness_gap: f64,
    pub target_class: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discard {
    pub prompt_id: String,
    pub reason: DiscardReason,
}

/// One line of `candidates.jsonl`: all candidates for a (source, target) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub source_id: String,
    pub target: Polarity,
    pub candidates: Vec<GenerationCandidate>,
    pub discards: Vec<Discard>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
}

/// One line of `augmented.jsonl` and `merged.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub aspect: String,
    pub from: usize,
    pub to: usize,
    pub polarity: Polarity,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl CorpusRecord {
    pub fn new(sample: &Sample, origin: Origin, provenance: Option<Provenance>) -> Self {
        let r = sample_to_record(sample);
        Self {
            id: sample.id.clone(),
            text: r.text,
            aspect: r.aspect,
            from: r.from,
            to: r.to,
            polarity: r.polarity,
            origin,
            provenance,
        }
    }

    pub fn to_sample(&self) -> Result<Sample, CorpusError> {
        let rec = JsonlRecord {
            id: Some(self.id.clone()),
            text: self.text.clone(),
            aspect: self.aspect.clone(),
            from: self.from,
            to: self.to,
            polarity: self.polarity,
        };
        record_to_sample(&rec, self.id.clone())
    }
}

pub fn write_jsonl_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Artifact {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads `merged.jsonl` or `augmented.jsonl` as a dataset.
pub fn load_corpus_records(path: &Path) -> Result<(Dataset, Vec<CorpusRecord>), PipelineError> {
    let records: Vec<CorpusRecord> = read_jsonl_records(path)?;
    let samples = records
        .iter()
        .map(CorpusRecord::to_sample)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((Dataset::new(samples), records))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub sources: usize,
    pub corrupted: usize,
    pub unmaskable: usize,
    pub candidates: usize,
    pub discards: usize,
    pub no_viable: usize,
    pub augmented: usize,
    pub kept_target: usize,
    pub overridden: usize,
    pub merged: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub output: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Completed stages in order.
    pub completed: Vec<StageRecord>,
    pub last_completed: Option<Stage>,
    pub counts: RunCounts,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    fn new(config_hash: String) -> Self {
        Self {
            config_hash,
            completed: Vec::new(),
            last_completed: None,
            counts: RunCounts::default(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, PipelineError> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Artifact {
                path: path.display().to_string(),
                line: e.line(),
                reason: e.to_string(),
            })
    }

    fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(Self::FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed.iter().any(|r| r.stage == stage)
    }

    /// Checks recorded digests against the files in `dir`.
    pub fn verify(&self, dir: &Path) -> Result<bool, PipelineError> {
        for r in &self.completed {
            let path = dir.join(&r.output);
            if !path.exists() || file_digest(&path)? != r.digest {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Ignore any previous manifest and rerun every stage.
    pub force: bool,
    /// Stop once this stage has completed.
    pub stop_after: Option<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub manifest: RunManifest,
    pub output_dir: PathBuf,
    /// Stages actually executed in this invocation (others were resumed).
    pub executed: Vec<Stage>,
}

impl AugmentOutcome {
    pub fn path(&self, stage: Stage) -> PathBuf {
        self.output_dir.join(stage.output_file())
    }
}

pub fn build_backend(config: &PipelineConfig) -> Result<Box<dyn InfillBackend>, PipelineError> {
    Ok(match config.backend.kind {
        BackendKind::Lexicon => Box::new(LexiconBackend::new(load_lexicon(config)?)),
        BackendKind::Remote => {
            let mut rc = RemoteConfig::new(config.backend.base_url.clone().unwrap_or_default());
            rc.timeout = Duration::from_secs_f64(config.backend.timeout_secs);
            rc.max_in_flight = config.backend.max_in_flight;
            rc.backoff = Duration::from_millis(config.backend.retry_backoff_ms);
            Box::new(RemoteBackend::new(rc))
        }
    })
}

fn load_lexicon(config: &PipelineConfig) -> Result<Lexicon, PipelineError> {
    Ok(match &config.backend.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::bundled(),
    })
}

fn load_templates(config: &PipelineConfig) -> Result<TemplateSet, PipelineError> {
    Ok(match &config.prompt.templates {
        Some(p) => TemplateSet::load(p, &config.mask_token)?,
        None => TemplateSet::bundled(),
    })
}

/// Runs (or resumes) the augmentation pipeline with the backend named in the
/// config.
pub fn run_augment(config: &PipelineConfig, options: RunOptions) -> Result<AugmentOutcome, PipelineError> {
    let backend = build_backend(config)?;
    run_augment_with(config, backend.as_ref(), options)
}

pub fn run_augment_with(
    config: &PipelineConfig,
    backend: &dyn InfillBackend,
    options: RunOptions,
) -> Result<AugmentOutcome, PipelineError> {
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let hash = config.hash();

    let previous = if options.force {
        None
    } else {
        match RunManifest::load(&dir)? {
            Some(m) if m.config_hash == hash && m.verify(&dir)? => Some(m),
            _ => None,
        }
    };
    let mut manifest = RunManifest::new(hash);
    if let Some(prev) = &previous {
        manifest.counts = prev.counts.clone();
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .expect("thread pool");
    let ctx = StageContext {
        config,
        dir: &dir,
        backend,
        pool: &pool,
    };

    let mut executed = Vec::new();
    let mut resuming = previous.is_some();
    for stage in Stage::ALL {
        let reuse = resuming && previous.as_ref().is_some_and(|p| p.is_complete(stage));
        if reuse {
            log::info!("stage {stage}: resumed from {}", stage.output_file());
        } else {
            resuming = false;
            log::info!("stage {stage}: running");
            if let Err(e) = ctx.run(stage, &mut manifest.counts) {
                manifest.save(&dir)?;
                return Err(PipelineError::Stage {
                    stage,
                    source: Box::new(e),
                });
            }
            executed.push(stage);
        }
        let output = stage.output_file().to_string();
        let digest = file_digest(&dir.join(&output))?;
        manifest.completed.push(StageRecord { stage, output, digest });
        manifest.last_completed = Some(stage);
        manifest.save(&dir)?;
        if options.stop_after == Some(stage) {
            break;
        }
    }
    Ok(AugmentOutcome {
        manifest,
        output_dir: dir,
        executed,
    })
}

struct StageContext<'a> {
    config: &'a PipelineConfig,
    dir: &'a Path,
    backend: &'a dyn InfillBackend,
    pool: &'a rayon::ThreadPool,
}

impl StageContext<'_> {
    fn path(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.output_file())
    }

    fn train_set(&self) -> Result<Dataset, PipelineError> {
        load_dataset(&self.config.dataset.train, self.config.dataset.format)
    }

    fn checkpoint(&self) -> Result<Checkpoint, PipelineError> {
        Ok(load_checkpoint(&self.path(Stage::TrainBase))?)
    }

    fn run(&self, stage: Stage, counts: &mut RunCounts) -> Result<(), PipelineError> {
        match stage {
            Stage::TrainBase => self.train_base(counts),
            Stage::Attribute => self.attribute(),
            Stage::Corrupt => self.corrupt(counts),
            Stage::Generate => self.generate(counts),
            Stage::Relabel => self.relabel(counts),
            Stage::Merge => self.merge(counts),
        }
    }

    fn train_base(&self, counts: &mut RunCounts) -> Result<(), PipelineError> {
        let data = self.train_set()?;
        let vocab = build_vocab(&data, 1);
        let config = self.config.train_config();
        let outcome = train(&data, &vocab, &config)?;
        log::info!(
            "base model: {} samples, loss {:.4} -> {:.4}",
            data.len(),
            outcome.loss_history[0],
            outcome.final_loss()
        );
        counts.sources = data.len();
        let final_loss = outcome.final_loss();
        save_checkpoint(
            &Checkpoint {
                vocab,
                params: outcome.params,
                config,
                final_loss,
            },
            &self.path(Stage::TrainBase),
        )?;
        Ok(())
    }

    fn attribute(&self) -> Result<(), PipelineError> {
        let data = self.train_set()?;
        let ck = self.checkpoint()?;
        let records = self.pool.install(|| {
            data.samples
                .par_iter()
                .map(|s| attribute_sample(&ck, s, &self.config.ig))
                .collect::<Result<Vec<_>, _>>()
        })?;
        write_jsonl_records(&self.path(Stage::Attribute), &sorted_by_id(records, |r| &r.sample_id))
    }

    fn corrupt(&self, counts: &mut RunCounts) -> Result<(), PipelineError> {
        let data = self.train_set()?;
        let ck = self.checkpoint()?;
        let attrs: Vec<AttributionRecord> = read_jsonl_records(&self.path(Stage::Attribute))?;
        let by_id: HashMap<&str, &AttributionRecord> = attrs.iter().map(|a| (a.sample_id.as_str(), a)).collect();
        let mut out = Vec::with_capacity(data.len());
        for s in &data.samples {
            let scores = &by_id
                .get(s.id.as_str())
                .ok_or_else(|| PipelineError::Artifact {
                    path: self.path(Stage::Attribute).display().to_string(),
                    line: 0,
                    reason: format!("no attribution for sample {}", s.id),
                })?
                .scores;
            let enc = encode(s, &ck.vocab);
            out.push(mask_tokens(
                &s.id,
                &s.tokens,
                &enc,
                scores,
                self.config.mask.strategy,
                self.config.seed,
            ));
        }
        counts.unmaskable = out.iter().filter(|c| c.no_maskable_tokens).count();
        counts.corrupted = out.len() - counts.unmaskable;
        write_jsonl_records(&self.path(Stage::Corrupt), &sorted_by_id(out, |c| &c.sample_id))
    }

    fn generate(&self, counts: &mut RunCounts) -> Result<(), PipelineError> {
        let data = self.train_set()?;
        let labels: HashMap<&str, Polarity> = data.samples.iter().map(|s| (s.id.as_str(), s.label)).collect();
        let corrupted: Vec<CorruptedSample> = read_jsonl_records(&self.path(Stage::Corrupt))?;
        let templates = load_templates(self.config)?;
        let params = GenerationParams {
            mask_token: &self.config.mask_token,
            max_words_per_mask: self.config.backend.max_words_per_mask,
            n_per_template: self.config.prompt.n_per_template,
            seed: self.config.seed,
        };
        let jobs: Vec<(&CorruptedSample, Polarity)> = corrupted
            .iter()
            .filter(|c| !c.mask_spans.is_empty())
            .flat_map(|c| {
                let gold = labels.get(c.sample_id.as_str()).copied();
                gold.into_iter()
                    .flat_map(|g| self.config.prompt.mode.targets(g))
                    .map(move |t| (c, t))
            })
            .collect();
        let groups = self.pool.install(|| {
            jobs.par_iter()
                .map(|(c, target)| {
                    let tpls = templates.for_polarity(*target);
                    let out = generate_candidates(c, *target, &tpls, self.backend, &params)?;
                    Ok(CandidateGroup {
                        source_id: c.sample_id.clone(),
                        target: *target,
                        candidates: out.candidates,
                        discards: out
                            .discards
                            .into_iter()
                            .map(|(prompt_id, reason)| Discard { prompt_id, reason })
                            .collect(),
                    })
                })
                .collect::<Result<Vec<_>, GenerationError>>()
        })?;
        counts.candidates = groups.iter().map(|g| g.candidates.len()).sum();
        counts.discards = groups.iter().map(|g| g.discards.len()).sum();
        write_jsonl_records(&self.path(Stage::Generate), &groups)
    }

    fn relabel(&self, counts: &mut RunCounts) -> Result<(), PipelineError> {
        let data = self.train_set()?;
        let ck = self.checkpoint()?;
        let by_id: HashMap<&str, &Sample> = data.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let groups: Vec<CandidateGroup> = read_jsonl_records(&self.path(Stage::Generate))?;
        let results = self.pool.install(|| {
            groups
                .par_iter()
                .filter(|g| !g.candidates.is_empty())
                .map(|g| {
                    let source = by_id.get(g.source_id.as_str()).ok_or_else(|| PipelineError::Artifact {
                        path: self.path(Stage::Generate).display().to_string(),
                        line: 0,
                        reason: format!("unknown source {}", g.source_id),
                    })?;
                    match relabel(
                        &ck.params,
                        &ck.vocab,
                        source,
                        &g.candidates,
                        g.target,
                        &self.config.relabel,
                    ) {
                        Ok(a) => Ok(Some(a)),
                        Err(RelabelError::NoViableCandidate { .. }) => Ok(None),
                        Err(e) => Err(e.into()),
                    }
                })
                .collect::<Result<Vec<_>, PipelineError>>()
        })?;
        counts.no_viable = results.iter().filter(|r| r.is_none()).count();
        let mut augmented: Vec<_> = results.into_iter().flatten().collect();
        if self.config.output.best_only {
            augmented = keep_best_per_source(augmented);
        }
        counts.augmented = augmented.len();
        counts.kept_target = augmented
            .iter()
            .filter(|a| a.provenance.rule == FinalRule::KeptTarget)
            .count();
        counts.overridden = counts.augmented - counts.kept_target;
        let records: Vec<CorpusRecord> = augmented
            .iter()
            .map(|a| CorpusRecord::new(&a.sample, Origin::Augmented, Some(a.provenance.clone())))
            .collect();
        write_jsonl_records(&self.path(Stage::Relabel), &sorted_by_id(records, |r| &r.id))
    }

    fn merge(&self, counts: &mut RunCounts) -> Result<(), PipelineError> {
        let data = self.train_set()?;
        let augmented: Vec<CorpusRecord> = read_jsonl_records(&self.path(Stage::Relabel))?;
        let mut merged: Vec<CorpusRecord> = data
            .samples
            .iter()
            .map(|s| CorpusRecord::new(s, Origin::Original, None))
            .collect();
        merged.extend(augmented);
        counts.merged = merged.len();
        write_jsonl_records(&self.path(Stage::Merge), &merged)
    }
}

fn sorted_by_id<T, F: Fn(&T) -> &String>(mut items: Vec<T>, key: F) -> Vec<T> {
    items.sort_by(|a, b| key(a).cmp(key(b)));
    items
}

fn keep_best_per_source(augmented: Vec<crate::relabel::AugmentedSample>) -> Vec<crate::relabel::AugmentedSample> {
    let mut best: BTreeMap<String, crate::relabel::AugmentedSample> = BTreeMap::new();
    for a in augmented {
        match best.get(&a.provenance.source_id) {
            Some(b) if b.provenance.prob_shift >= a.provenance.prob_shift => {}
            _ => {
                best.insert(a.provenance.source_id.clone(), a);
            }
        }
    }
    best.into_values().collect()
}

/// Integrated-gradients attribution of one sample toward its gold label.
pub fn attribute_sample(
    checkpoint: &Checkpoint,
    sample: &Sample,
    ig: &IgConfig,
) -> Result<AttributionRecord, PipelineError> {
    let enc = encode(sample, &checkpoint.vocab);
    let x = embed(&checkpoint.params, &enc);
    let baseline = make_baseline(&checkpoint.params, &x, &enc);
    let r = integrated_gradients(&checkpoint.params, &x, &baseline, sample.label, ig)?;
    Ok(AttributionRecord {
        sample_id: sample.id.clone(),
        tokens: sample.tokens.clone(),
        scores: r.token_scores,
        completeness_gap: r.completeness_gap,
        target_class: sample.label,
    })
}

// ---------------------------------------------------------------------------
// Evaluation and ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub original: MetricsReport,
    pub augmented: MetricsReport,
    pub table: String,
}

fn load_test_set(config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let path = config.dataset.test.as_ref().ok_or_else(|| PipelineError::Config {
        path: "<config>".into(),
        reason: "dataset.test is required for evaluation".into(),
    })?;
    load_dataset(path, config.dataset.format)
}

/// Runs (or resumes) augmentation, then compares training on the original
/// corpus against the merged corpus. Writes `eval_report.json` and
/// `eval_table.txt` to the output directory.
pub fn run_evaluation(
    config: &PipelineConfig,
    backend: &dyn InfillBackend,
    seeds: &[u64],
) -> Result<EvalOutcome, PipelineError> {
    let test = load_test_set(config)?;
    let outcome = run_augment_with(config, backend, RunOptions::default())?;
    let original = load_dataset(&config.dataset.train, config.dataset.format)?;
    let (merged, _) = load_corpus_records(&outcome.path(Stage::Merge))?;
    let tc = config.train_config();
    let original = evaluate_corpus("original", &original, &test, seeds, &tc)?;
    let augmented = evaluate_corpus("augmented", &merged, &test, seeds, &tc)?;
    let name = dataset_label(config);
    let table = render_table(&name, &[original.clone(), augmented.clone()]);
    let result = EvalOutcome {
        original,
        augmented,
        table,
    };
    write_report(&config.output.dir, "eval", &result, &result.table)?;
    Ok(result)
}

fn dataset_label(config: &PipelineConfig) -> String {
    config
        .dataset
        .train
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn write_report<T: Serialize>(dir: &Path, stem: &str, report: &T, table: &str) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join(format!("{stem}_report.json"));
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(&json, text).map_err(io_err(&json))?;
    let txt = dir.join(format!("{stem}_table.txt"));
    std::fs::write(&txt, table).map_err(io_err(&txt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: MaskStrategy,
    pub mode: PromptMode,
    pub report: MetricsReport,
    pub augmented: usize,
    pub kept_target: usize,
    /// Augmented samples whose generation target equals the source label.
    pub target_is_gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub original: MetricsReport,
    pub rows: Vec<AblationRow>,
    pub table: String,
}

pub fn ablation_name(strategy: MaskStrategy, mode: PromptMode) -> String {
    let s = match strategy {
        MaskStrategy::IntegratedGradients => "ig",
        MaskStrategy::Random => "random",
    };
    let m = match mode {
        PromptMode::Counterfactual => "counterfactual",
        PromptMode::LabelPreserve => "label_preserve",
    };
    format!("{s}_{m}")
}

/// Runs all four {IG, Random} × {Counterfactual, LabelPreserve} configurations
/// into `<output.dir>/ablation/<name>` and evaluates each merged corpus.
pub fn run_ablation(
    config: &PipelineConfig,
    backend: &dyn InfillBackend,
    seeds: &[u64],
) -> Result<AblationOutcome, PipelineError> {
    let test = load_test_set(config)?;
    let original_train = load_dataset(&config.dataset.train, config.dataset.format)?;
    let gold: HashMap<&str, Polarity> = original_train
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.label))
        .collect();
    let tc = config.train_config();
    let original = evaluate_corpus("Original", &original_train, &test, seeds, &tc)?;

    let mut rows = Vec::new();
    for strategy in [MaskStrategy::IntegratedGradients, MaskStrategy::Random] {
        for mode in [PromptMode::Counterfactual, PromptMode::LabelPreserve] {
            let name = ablation_name(strategy, mode);
            let mut c = config.clone();
            c.mask.strategy = strategy;
            c.prompt.mode = mode;
            c.output.dir = config.output.dir.join("ablation").join(&name);
            let outcome = run_augment_with(&c, backend, RunOptions::default())?;
            let (merged, _) = load_corpus_records(&outcome.path(Stage::Merge))?;
            let (_, aug) = load_corpus_records(&outcome.path(Stage::Relabel))?;
            let target_is_gold = aug
                .iter()
                .filter_map(|r| r.provenance.as_ref())
                .filter(|p| gold.get(p.source_id.as_str()) == Some(&p.target))
                .count();
            let report = evaluate_corpus(&name, &merged, &test, seeds, &tc)?;
            rows.push(AblationRow {
                strategy,
                mode,
                report,
                augmented: aug.len(),
                kept_target: outcome.manifest.counts.kept_target,
                target_is_gold,
            });
        }
    }
    let mut reports = vec![original.clone()];
    reports.extend(rows.iter().map(|r| r.report.clone()));
    let table = render_table(&dataset_label(config), &reports);
    let result = AblationOutcome { original, rows, table };
    write_report(&config.output.dir, "ablation", &result, &result.table)?;
    Ok(result)
}

/// Per-class counts of the configured train (and test, if any) splits.
pub fn dataset_stats(config: &PipelineConfig) -> Result<Vec<(String, ClassCounts, usize)>, PipelineError> {
    let mut out = Vec::new();
    let train = load_dataset(&config.dataset.train, config.dataset.format)?;
    out.push((
        "train".to_string(),
        crate::corpus::stats(&train),
        train.skipped_conflict,
    ));
    if let Some(p) = &config.dataset.test {
        let test = load_dataset(p, config.dataset.format)?;
        out.push(("test".to_string(), crate::corpus::stats(&test), test.skipped_conflict));
    }
    Ok(out)
}

pub fn render_stats(rows: &[(String, ClassCounts, usize)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).chain([5]).max().unwrap_or(5);
    let mut out = format!(
        "{:<w$} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "split", "positive", "neutral", "negative", "total", "conflict"
    );
    for (name, c, skipped) in rows {
        out.push_str(&format!(
            "{:<w$} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            name,
            c.positive,
            c.neutral,
            c.negative,
            c.total(),
            skipped
        ));
    }
    out
}
