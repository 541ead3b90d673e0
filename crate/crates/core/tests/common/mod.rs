#![allow(dead_code)]

use std::path::{Path, PathBuf};

use absa_cda::classifier::{train, ModelParams, TrainConfig};
use absa_cda::corpus::{build_vocab, dump_jsonl, synthetic_split, Dataset, Vocab};
use absa_cda::lexicon::Lexicon;
use absa_cda::pipeline::PipelineConfig;

pub fn synthetic() -> (Dataset, Dataset) {
    synthetic_split(500, 100, 1, &Lexicon::bundled())
}

pub fn small_synthetic(n_train: usize, n_test: usize) -> (Dataset, Dataset) {
    synthetic_split(n_train, n_test, 7, &Lexicon::bundled())
}

pub fn trained(data: &Dataset, seed: u64) -> (Vocab, ModelParams) {
    let vocab = build_vocab(data, 1);
    let out = train(
        data,
        &vocab,
        &TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )
    .expect("training succeeds");
    (vocab, out.params)
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Writes train/test JSONL into `dir` and a config pointing at them.
/// `extra` is appended verbatim to the TOML.
pub fn write_workspace(dir: &Path, train: &Dataset, test: &Dataset, extra: &str) -> PathBuf {
    dump_jsonl(train, &dir.join("train.jsonl")).unwrap();
    dump_jsonl(test, &dir.join("test.jsonl")).unwrap();
    write_config(dir, "config.toml", "out", extra)
}

pub fn write_config(dir: &Path, file: &str, out: &str, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 1\nworkers = 2\n{extra}\n[dataset]\ntrain = \"train.jsonl\"\ntest = \"test.jsonl\"\n\n[output]\ndir = \"{out}\"\n"
    );
    let path = dir.join(file);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn load_config(path: &Path) -> PipelineConfig {
    PipelineConfig::load(path).expect("valid config")
}
