mod common;

use common::{small_model, small_splits, small_train};
use dance::diffcore::rng::streams;
use dance::diffcore::{LrSchedule, Module, RngStream, Tape};
use dance::evalbench::{evaluate_accuracy, Evaluated};
use dance::harness::metrics::MetricsRecord;
use dance::trainer::{
    epoch_batches, stage1_pretrain, stage2_distribution_learning, stage2_step, stage3_finetune, subnet_accuracy,
    total_loss, write_back, AuxTerms, StageIo, TrainConfig, TrainState,
};

fn values(m: &impl Module) -> Vec<dance::diffcore::Tensor> {
    m.params().iter().map(|p| p.value.clone()).collect()
}

#[test]
fn stage1_with_keep_one_equals_plain_training() {
    let seed = 31;
    let data = small_splits(seed);
    let cfg = TrainConfig {
        keep_start: 1.0,
        keep_end: 1.0,
        patience: 1000,
        ..small_train()
    };
    let mut model = small_model(seed);
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    stage1_pretrain(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();

    // Reference: an ordinary minibatch loop with the same shuffle stream and schedule.
    let mut net = small_model(seed).net;
    let mut opt = dance::diffcore::AdamW {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut shuffle = RngStream::new(seed, streams::SHUFFLE);
    let n = data.train.len();
    let per_epoch = n / cfg.batch_size + usize::from(n % cfg.batch_size >= 2);
    let sched = LrSchedule::one_cycle(cfg.lr_backbone, (cfg.stage1_epochs * per_epoch) as u64);
    let mut step = 0;
    for _ in 0..cfg.stage1_epochs {
        for idx in epoch_batches(n, &cfg, &mut shuffle) {
            let batch = data.train.subset(&idx);
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let x = tape.constant(batch.x.clone());
            let (logits, _) = net.forward_tape(&mut tape, &vars, x, &[None, None]).unwrap();
            let ce = tape.cross_entropy(logits, &batch.y).unwrap();
            let g = tape.backward(ce);
            net.accumulate(&g, &vars);
            opt.step(net.params_mut(), sched.lr(step).unwrap());
            step += 1;
        }
    }
    assert_eq!(model.net, net);
    assert_eq!(state.streams.path_drop.state().word_pos, 0);
}

#[test]
fn zero_learning_rate_freezes_only_its_group() {
    let seed = 32;
    let data = small_splits(seed);
    let base = small_model(seed);
    let cfg = TrainConfig {
        lr_gate: 0.0,
        lr_repr: 0.0,
        lr_backbone: 0.01,
        ..small_train()
    };
    let mut model = base.clone();
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    stage2_distribution_learning(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    assert_eq!(values(&model.gate), values(&base.gate));
    for (a, b) in model.importance.iter().zip(&base.importance) {
        assert_eq!(a.theta.value, b.theta.value);
        assert_eq!(a.fusion_w.value, b.fusion_w.value);
    }
    assert_ne!(values(&model.net), values(&base.net));

    let cfg = TrainConfig {
        lr_backbone: 0.0,
        lr_gate: 0.001,
        lr_repr: 0.001,
        ..small_train()
    };
    let mut model = base.clone();
    let mut state = TrainState::new(seed, cfg.weight_decay);
    stage2_distribution_learning(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    assert_eq!(values(&model.net), values(&base.net));
    assert_ne!(values(&model.gate.layers[0]), values(&base.gate.layers[0]));
    assert_ne!(values(&model.gate.repr), values(&base.gate.repr));
}

#[test]
fn single_sample_per_batch_emits_one_mask_set() {
    let seed = 33;
    let data = small_splits(seed);
    let mut model = small_model(seed);
    let cfg = TrainConfig {
        samples_per_batch: 1,
        fixed_constraint: Some(0.5),
        ..small_train()
    };
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let batch = data.train.subset(&(0..16).collect::<Vec<_>>());
    let out = stage2_step(&mut model, &batch, &cfg, &mut state, [0.01, 0.001, 0.001], 0.5).unwrap();
    assert_eq!(out.masks.len(), 1);
    assert_eq!(out.constraints, vec![0.5]);
    assert!(out.masks[0].iter().all(|m| m.k() == 4));
}

#[test]
fn metrics_are_additive_and_one_per_epoch() {
    let seed = 34;
    let data = small_splits(seed);
    let mut model = small_model(seed);
    let cfg = TrainConfig {
        patience: 1000,
        ..small_train()
    };
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    stage1_pretrain(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    stage2_distribution_learning(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    assert_eq!(sink.len(), cfg.stage1_epochs + cfg.stage2_epochs);
    for r in &sink {
        assert!(r.loss.additivity_error() < 1e-12, "{r:?}");
    }
    let s2: Vec<_> = sink.iter().filter(|r| r.stage == 2).collect();
    assert!(s2.iter().all(|r| r.loss.sparsity >= 0.0 && r.loss.diversity >= 0.0));
    assert_eq!(s2.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn sparsity_weight_ramps_with_progress() {
    let cfg = TrainConfig::default();
    let aux = AuxTerms {
        sparsity: 2.0,
        diversity: 1.0,
        correlation: 0.5,
        stability: 0.25,
    };
    assert_eq!(total_loss(1.0, &aux, &cfg, 0.0).sparsity, 0.0);
    let full = total_loss(1.0, &aux, &cfg, 1.0);
    assert!((full.sparsity - cfg.w_sparsity * 2.0).abs() < 1e-15);
    assert!((full.total - (1.0 + 0.2 + 0.01 + 0.025 + 0.0025)).abs() < 1e-12);
}

#[test]
fn early_stopping_halts_on_plateau() {
    let seed = 35;
    let data = small_splits(seed);
    let mut model = small_model(seed);
    let cfg = TrainConfig {
        stage1_epochs: 50,
        lr_backbone: 0.0,
        patience: 3,
        ..small_train()
    };
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    let report = stage1_pretrain(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    // The first epoch always improves on "nothing seen yet"; then `patience` flat epochs.
    assert!(report.early_stopped);
    assert_eq!(report.epochs_run, 1 + cfg.patience);
}

#[test]
fn subnet_inherits_masked_supernet_accuracy_and_writes_back() {
    let seed = 36;
    let data = small_splits(seed);
    let mut model = small_model(seed);
    let cfg = small_train();
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let mut sink: Vec<MetricsRecord> = Vec::new();
    stage1_pretrain(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    stage2_distribution_learning(&mut model, &data, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    let out = stage3_finetune(&model, &data, &data.val.x, 0.5, seed, &cfg, &mut state, &mut StageIo::new(&mut sink))
        .unwrap();
    let masked = evaluate_accuracy(Evaluated::SuperNet(&model.net, Some(&out.masks)), &data.val).unwrap();
    assert_eq!(out.pre_accuracy, masked);

    let mut net = model.net.clone();
    write_back(&mut net, &out.subnet).unwrap();
    let a = net.forward_masked(&out.masks, &data.test.x).unwrap().logits;
    let b = out.subnet.forward(&data.test.x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-10);
    }
    assert_eq!(
        evaluate_accuracy(Evaluated::SuperNet(&net, Some(&out.masks)), &data.test).unwrap(),
        subnet_accuracy(&out.subnet, &data.test).unwrap()
    );
}
