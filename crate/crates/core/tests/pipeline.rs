mod common;

use std::collections::HashMap;

use absa_cda::corpus::Polarity;
use absa_cda::generation::stub::{StubBehavior, StubServer};
use absa_cda::pipeline::{
    load_corpus_records, run_augment, CorpusRecord, Origin, PipelineConfig, PipelineError, RunManifest, RunOptions,
    Stage,
};
use absa_cda::relabel::assign_label;

fn workspace(n: usize, extra: &str) -> (tempfile::TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = common::small_synthetic(n, 30);
    let path = common::write_workspace(dir.path(), &train, &test, extra);
    let config = common::load_config(&path);
    (dir, config)
}

fn records(config: &PipelineConfig, stage: Stage) -> Vec<CorpusRecord> {
    load_corpus_records(&config.output.dir.join(stage.output_file()))
        .unwrap()
        .1
}

#[test]
fn counterfactual_run_yields_at_least_one_sample_per_source() {
    let (_dir, config) = workspace(300, "");
    let out = run_augment(&config, RunOptions::default()).unwrap();
    let c = &out.manifest.counts;
    assert_eq!(c.sources, 300);
    assert!(c.augmented >= 300, "augmented {}", c.augmented);
    assert_eq!(c.discards, 0);
    assert_eq!(c.kept_target + c.overridden, c.augmented);
    assert!(c.augmented <= c.sources * 2 * 2 * config.prompt.n_per_template);
    assert_eq!(out.executed, Stage::ALL.to_vec());
}

#[test]
fn merged_file_holds_each_sample_once_with_origin() {
    let (_dir, config) = workspace(90, "");
    run_augment(&config, RunOptions::default()).unwrap();
    let merged = records(&config, Stage::Merge);
    let augmented = records(&config, Stage::Relabel);
    let originals: Vec<_> = merged.iter().filter(|r| r.origin == Origin::Original).collect();
    let added: Vec<_> = merged.iter().filter(|r| r.origin == Origin::Augmented).collect();
    assert_eq!(originals.len(), 90);
    assert!(originals.iter().all(|r| r.provenance.is_none()));
    assert_eq!(added.len(), augmented.len());
    let mut ids: Vec<&str> = merged.iter().map(|r| r.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), merged.len());
}

#[test]
fn stored_labels_follow_the_label_rule() {
    let (_dir, config) = workspace(90, "");
    run_augment(&config, RunOptions::default()).unwrap();
    for r in records(&config, Stage::Relabel) {
        let p = r.provenance.expect("provenance");
        let (label, rule) = assign_label(&p.probs, p.target, p.prob_threshold);
        assert_eq!(label, r.polarity, "{}", r.id);
        assert_eq!(rule, p.rule);
        assert_eq!(p.backend, "lexicon");
    }
}

#[test]
fn prompt_modes_control_targets() {
    let (_dir, config) = workspace(60, "[prompt]\nmode = \"label_preserve\"\n");
    run_augment(&config, RunOptions::default()).unwrap();
    let train = absa_cda::corpus::load_jsonl(&config.dataset.train).unwrap();
    let gold: HashMap<String, Polarity> = train.samples.iter().map(|s| (s.id.clone(), s.label)).collect();
    let aug = records(&config, Stage::Relabel);
    assert_eq!(aug.len(), 60);
    for r in &aug {
        let p = r.provenance.as_ref().unwrap();
        assert_eq!(gold[&p.source_id], p.target);
    }
}

#[test]
fn best_only_keeps_one_sample_per_source() {
    let (_dir, mut config) = workspace(60, "");
    config.output.best_only = true;
    run_augment(&config, RunOptions::default()).unwrap();
    let aug = records(&config, Stage::Relabel);
    let mut sources: Vec<&str> = aug
        .iter()
        .map(|r| r.provenance.as_ref().unwrap().source_id.as_str())
        .collect();
    sources.sort();
    let n = sources.len();
    sources.dedup();
    assert_eq!(sources.len(), n);
    assert_eq!(n, 60);
}

#[test]
fn rerun_resumes_and_force_recomputes() {
    let (_dir, config) = workspace(60, "");
    let first = run_augment(&config, RunOptions::default()).unwrap();
    let bytes = std::fs::read(first.path(Stage::Relabel)).unwrap();

    let second = run_augment(&config, RunOptions::default()).unwrap();
    assert!(second.executed.is_empty());
    assert_eq!(second.manifest, first.manifest);

    // a tampered artifact invalidates the resume
    std::fs::write(first.path(Stage::Merge), b"{}\n").unwrap();
    let third = run_augment(&config, RunOptions::default()).unwrap();
    assert_eq!(third.executed, Stage::ALL.to_vec());

    let forced = run_augment(
        &config,
        RunOptions {
            force: true,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(forced.executed.len(), 6);
    assert_eq!(std::fs::read(forced.path(Stage::Relabel)).unwrap(), bytes);
}

#[test]
fn partial_run_continues_from_last_stage() {
    let (_dir, config) = workspace(45, "");
    let partial = run_augment(
        &config,
        RunOptions {
            force: false,
            stop_after: Some(Stage::Attribute),
        },
    )
    .unwrap();
    assert_eq!(partial.manifest.last_completed, Some(Stage::Attribute));
    let rest = run_augment(&config, RunOptions::default()).unwrap();
    assert_eq!(
        rest.executed,
        vec![Stage::Corrupt, Stage::Generate, Stage::Relabel, Stage::Merge]
    );
}

#[test]
fn changed_config_invalidates_previous_run() {
    let (_dir, mut config) = workspace(45, "");
    run_augment(&config, RunOptions::default()).unwrap();
    config.relabel.prob_threshold = 0.9;
    let out = run_augment(&config, RunOptions::default()).unwrap();
    assert_eq!(out.executed.len(), 6);
}

#[test]
fn remote_backend_runs_the_pipeline() {
    let stub = StubServer::start(StubBehavior::default()).unwrap();
    let extra = format!(
        "[backend]\nkind = \"remote\"\nbase_url = \"{}\"\nmax_in_flight = 2\nretry_backoff_ms = 1\n",
        stub.base_url()
    );
    let (_dir, config) = workspace(30, &extra);
    let out = run_augment(&config, RunOptions::default()).unwrap();
    assert!(stub.max_concurrent() <= 2);
    assert_eq!(stub.requests(), out.manifest.counts.candidates);
    assert!(records(&config, Stage::Relabel)
        .iter()
        .all(|r| r.text.contains("stub") && r.provenance.as_ref().unwrap().backend == "remote"));
}

#[test]
fn unreachable_backend_leaves_generate_incomplete() {
    let stub = StubServer::start(StubBehavior {
        fail_first: usize::MAX,
        ..StubBehavior::default()
    })
    .unwrap();
    let extra = format!(
        "workers = 1\n[backend]\nkind = \"remote\"\nbase_url = \"{}\"\nretry_backoff_ms = 1\n",
        stub.base_url()
    );
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = common::small_synthetic(30, 5);
    common::write_workspace(dir.path(), &train, &test, "");
    // workers must precede the tables, so write this config by hand
    let text = format!("seed = 1\n{extra}\n[dataset]\ntrain = \"train.jsonl\"\n\n[output]\ndir = \"out\"\n");
    let path = dir.path().join("remote.toml");
    std::fs::write(&path, text).unwrap();
    let config = common::load_config(&path);

    let err = run_augment(&config, RunOptions::default()).unwrap_err();
    assert!(
        matches!(
            err,
            PipelineError::Stage {
                stage: Stage::Generate,
                ..
            }
        ),
        "{err}"
    );
    let manifest = RunManifest::load(&config.output.dir).unwrap().unwrap();
    assert_eq!(manifest.last_completed, Some(Stage::Corrupt));
    assert!(!manifest.is_complete(Stage::Generate));
    assert_eq!(stub.requests(), 3);
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = common::small_synthetic(9, 3);
    common::write_workspace(dir.path(), &train, &test, "");
    let write = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    };
    let base = "[dataset]\ntrain = \"train.jsonl\"\n[output]\ndir = \"out\"\n";

    let missing_train = write(
        "a.toml",
        "seed = 1\n[dataset]\ntrain = \"nope.jsonl\"\n[output]\ndir = \"o\"\n",
    );
    let err = PipelineConfig::load(&missing_train).unwrap_err();
    assert!(err.is_config_error() && err.to_string().contains("nope.jsonl"));

    let no_url = write("b.toml", &format!("seed = 1\n[backend]\nkind = \"remote\"\n{base}"));
    assert!(PipelineConfig::load(&no_url)
        .unwrap_err()
        .to_string()
        .contains("base_url"));

    let bad_enum = write("c.toml", &format!("seed = 1\n[mask]\nstrategy = \"saliency\"\n{base}"));
    assert!(PipelineConfig::load(&bad_enum).unwrap_err().is_config_error());

    let bad_thr = write("d.toml", &format!("seed = 1\n[relabel]\nprob_threshold = 1.5\n{base}"));
    assert!(PipelineConfig::load(&bad_thr).is_err());

    let json = write(
        "e.json",
        r#"{"seed": 4, "dataset": {"train": "train.jsonl", "test": "test.jsonl"}, "output": {"dir": "out"}}"#,
    );
    let c = PipelineConfig::load(&json).unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.dataset.train, dir.path().join("train.jsonl"));
    assert_eq!(c.relabel.prob_threshold, 0.7);
    assert!(matches!(c.prompt.mode, absa_cda::pipeline::PromptMode::Counterfactual));
}
