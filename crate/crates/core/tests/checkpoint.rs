mod common;

use absa_cda::classifier::{load_checkpoint, predict, save_checkpoint, Checkpoint, CheckpointError, TrainConfig};

fn small_checkpoint() -> (Checkpoint, absa_cda::corpus::Dataset) {
    let (train, test) = common::small_synthetic(90, 10);
    let (vocab, params) = common::trained(&train, 3);
    (
        Checkpoint {
            vocab,
            params,
            config: TrainConfig::default(),
            final_loss: 0.25,
        },
        test,
    )
}

#[test]
fn round_trip_preserves_predictions_bitwise() {
    let (ck, test) = small_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.params, ck.params);
    assert_eq!(back.config, ck.config);
    assert_eq!(back.final_loss, 0.25);
    assert_eq!(test.samples.len(), 10);
    for s in &test.samples {
        let a = predict(&ck.params, &ck.vocab, s).unwrap();
        let b = predict(&back.params, &back.vocab, s).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }
}

#[test]
fn corrupted_files_are_rejected_with_distinct_errors() {
    let (ck, _) = small_checkpoint();
    let bytes = ck.to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad_magic),
        Err(CheckpointError::BadMagic)
    ));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bad_version),
        Err(CheckpointError::Version { found: 9, .. })
    ));

    let truncated = &bytes[..bytes.len() - 100];
    assert!(matches!(
        Checkpoint::from_bytes(truncated),
        Err(CheckpointError::Truncated(_))
    ));

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 200;
    flipped[mid] ^= 0x40;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(CheckpointError::Checksum)
    ));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(
        Checkpoint::from_bytes(&trailing),
        Err(CheckpointError::Metadata(_))
    ));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(&dir.path().join("none.ckpt")),
        Err(CheckpointError::Io { .. })
    ));
}

#[test]
fn predictions_are_distributions() {
    let (ck, test) = small_checkpoint();
    for s in &test.samples {
        let p = predict(&ck.params, &ck.vocab, s).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
