mod common;

use absa_cda::corpus::{
    dump_jsonl, load_jsonl, load_semeval_xml, stats, synthetic_split, tokenize, CorpusError, Polarity,
};
use absa_cda::lexicon::Lexicon;

#[test]
fn semeval_fixture_matches_hand_count() {
    let ds = load_semeval_xml(&common::fixture("mini_semeval.xml")).unwrap();
    let c = stats(&ds);
    assert_eq!((c.positive, c.neutral, c.negative), (5, 3, 4));
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.skipped_conflict, 2);
}

#[test]
fn multi_aspect_sentences_share_tokens() {
    let ds = load_semeval_xml(&common::fixture("mini_semeval.xml")).unwrap();
    let a = ds.samples.iter().find(|s| s.id == "1#0").unwrap();
    let b = ds.samples.iter().find(|s| s.id == "1#1").unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.aspect().surface, "battery life");
    assert_eq!(b.aspect().surface, "screen");
    assert_eq!(&a.tokens[a.aspect().start..a.aspect().end], ["battery", "life"]);
    assert_eq!(a.label, Polarity::Positive);

    // conflict term dropped, remaining aspect re-indexed
    let s4: Vec<_> = ds.samples.iter().filter(|s| s.id.starts_with("4#")).collect();
    assert_eq!(s4.len(), 1);
    assert_eq!(s4[0].aspect().surface, "speakers");

    let display = ds.samples.iter().find(|s| s.id == "8#0").unwrap();
    assert_eq!(
        display.tokens,
        tokenize("The display isn't nearly as sharp as it should be.")
    );
    assert!(ds.samples.iter().all(|s| !s.id.starts_with("7#")));
}

#[test]
fn jsonl_round_trip() {
    let (train, _) = synthetic_split(60, 0, 5, &Lexicon::bundled());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    dump_jsonl(&train, &path).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back.samples, train.samples);
}

#[test]
fn malformed_jsonl_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"text\":\"good food\",\"aspect\":\"food\",\"from\":5,\"to\":9,\"polarity\":\"positive\"}\n{\"text\":\"oops\"}\n",
    )
    .unwrap();
    match load_jsonl(&path) {
        Err(CorpusError::MalformedLine { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected malformed line error, got {other:?}"),
    }
}

#[test]
fn span_that_does_not_match_text_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"text\":\"good food\",\"aspect\":\"food\",\"from\":0,\"to\":4,\"polarity\":\"positive\"}\n",
    )
    .unwrap();
    assert!(matches!(load_jsonl(&path), Err(CorpusError::UnmappableSpan { .. })));
}
