mod common;

use common::{small_model, small_splits, small_train};
use dance::harness::checkpoint::{check_config_hash, decode, encode, load_checkpoint, save_checkpoint, Checkpoint, HashCheck};
use dance::harness::metrics::MetricsRecord;
use dance::trainer::{stage1_pretrain, stage2_distribution_learning, SearchModel, StageIo, TrainState};
use dance::Error;

fn stage1_model(seed: u64) -> (SearchModel, TrainState) {
    let data = small_splits(seed);
    let mut model = small_model(seed);
    let mut state = TrainState::new(seed, 0.01);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    stage1_pretrain(&mut model, &data, &small_train(), &mut state, &mut StageIo::new(&mut sink)).unwrap();
    (model, state)
}

fn checkpoint(seed: u64) -> Checkpoint {
    let (model, state) = stage1_model(seed);
    Checkpoint {
        config_hash: 0xfeed,
        stage: 1,
        model,
        state,
        masks: None,
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(3);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&ck, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.model, ck.model);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = encode(&checkpoint(4));
    for len in 0..bytes.len() {
        assert!(
            matches!(decode(&bytes[..len]), Err(Error::Corruption(_))),
            "truncation to {len} bytes accepted"
        );
    }
}

#[test]
fn every_single_byte_flip_is_rejected() {
    let bytes = encode(&checkpoint(5));
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(decode(&bad).is_err(), "flip at byte {i} accepted");
    }
}

#[test]
fn well_formed_but_inconsistent_payload_is_rejected() {
    let mut ck = checkpoint(6);
    ck.model.detached[0].theta = dance::diffcore::Parameter::zeros(&[3]);
    assert!(matches!(decode(&encode(&ck)), Err(Error::Corruption(_))));
}

#[test]
fn config_hash_mismatch_needs_force() {
    let ck = checkpoint(7);
    assert_eq!(check_config_hash(&ck, 0xfeed, false).unwrap(), HashCheck::Match);
    assert!(matches!(check_config_hash(&ck, 1, false), Err(Error::Config(_))));
    assert_eq!(check_config_hash(&ck, 1, true).unwrap(), HashCheck::Forced);
}

/// Runs stage 2, optionally pausing after `pause_at` epochs and resuming
/// from an encoded checkpoint. Returns the final checkpoint bytes and metrics.
fn stage2_run(seed: u64, pause_at: Option<usize>) -> (Vec<u8>, Vec<MetricsRecord>) {
    let data = small_splits(seed);
    let mut cfg = small_train();
    cfg.patience = 1000;
    let (mut model, mut state) = stage1_model(seed);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    if let Some(n) = pause_at {
        let mut hook = |_: &SearchModel, s: &TrainState| Ok(s.epoch < n);
        let mut io = StageIo {
            sink: &mut sink,
            on_epoch: Some(&mut hook),
        };
        let report = stage2_distribution_learning(&mut model, &data, &cfg, &mut state, &mut io).unwrap();
        assert!(report.paused);
        let bytes = encode(&Checkpoint {
            config_hash: 1,
            stage: 2,
            model,
            state,
            masks: None,
        });
        // Drop everything in memory; continue only from the serialized form.
        let ck = decode(&bytes).unwrap();
        model = ck.model;
        state = ck.state;
    }
    stage2_distribution_learning(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    let bytes = encode(&Checkpoint {
        config_hash: 1,
        stage: 2,
        model,
        state,
        masks: None,
    });
    (bytes, sink)
}

#[test]
fn resumed_stage2_matches_uninterrupted_run() {
    let (full, full_metrics) = stage2_run(11, None);
    for pause in [1, 2, 3] {
        let (resumed, metrics) = stage2_run(11, Some(pause));
        assert_eq!(resumed, full, "pause after {pause} epochs diverged");
        assert_eq!(metrics, full_metrics);
    }
}

#[test]
fn identical_seed_gives_identical_metrics() {
    let (a, ma) = stage2_run(21, None);
    let (b, mb) = stage2_run(21, None);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let (c, _) = stage2_run(22, None);
    assert_ne!(a, c);
}
