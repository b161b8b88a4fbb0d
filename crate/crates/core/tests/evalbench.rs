mod common;

use common::{small_model, small_splits, small_train};
use dance::archspace::{count_flops, count_params, retain_count, LayerMask};
use dance::diffcore::RngStream;
use dance::evalbench::{
    ablation_run, baseline_masks, coarse_grid, evaluate_accuracy, fine_grid, predictions_accuracy, random_mask,
    score_based_prune, sweep_constraints, AblationMode, AblationSpec, Artifact, BaselineKind, Evaluated,
    Experiment, Pretrained, SweepSpec,
};
use dance::harness::data::{Dataset, DatasetSpec};
use dance::scoring::{ImportanceState, ScoreWeights};
use dance::trainer::{stage2_distribution_learning, StageIo, TrainState};
use dance::Error;

fn subsets(w: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << w)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..w).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

#[test]
fn score_based_prune_matches_subset_enumeration() {
    let mut rng = RngStream::new(1, 50);
    let weights = ScoreWeights::default();
    for trial in 0..40 {
        let w = 2 + trial % 11;
        let mut st = ImportanceState::new(0, w, 2, &mut rng);
        st.dynamic = (0..w).map(|_| rng.uniform()).collect();
        st.feature = (0..w).map(|_| rng.uniform() / w as f64).collect();
        let score = st.current_score(&weights).values;
        for frac in [0.1, 0.3, 0.5, 0.8, 1.0] {
            let k = retain_count(frac, w);
            let masks = score_based_prune(std::slice::from_ref(&st), &weights, frac).unwrap();
            let best = subsets(w, k)
                .into_iter()
                .max_by(|a, b| {
                    let sa: f64 = a.iter().map(|&i| score[i]).sum();
                    let sb: f64 = b.iter().map(|&i| score[i]).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap();
            assert_eq!(masks[0].retained(), best, "w={w} k={k}");
        }
    }
}

#[test]
fn uniform_scores_keep_lowest_indices() {
    let mut rng = RngStream::new(2, 50);
    let mut st = ImportanceState::new(0, 6, 2, &mut rng);
    st.theta.value = dance::diffcore::Tensor::vector(vec![0.0; 6]);
    let masks = score_based_prune(&[st], &ScoreWeights::default(), 0.5).unwrap();
    assert_eq!(masks[0].retained(), vec![0, 1, 2]);
}

#[test]
fn random_mask_is_uniform_over_subsets() {
    let mut rng = RngStream::new(3, 8);
    let all = subsets(4, 2);
    let mut counts = vec![0usize; all.len()];
    let draws = 100_000;
    for _ in 0..draws {
        let m = random_mask(0, 4, 2, &mut rng).unwrap();
        counts[all.iter().position(|s| *s == m.retained()).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01, "{c}");
    }
    let mut a = RngStream::new(9, 8);
    let mut b = RngStream::new(9, 8);
    assert_eq!(random_mask(0, 10, 3, &mut a).unwrap(), random_mask(0, 10, 3, &mut b).unwrap());
    assert_eq!(random_mask(0, 5, 5, &mut a).unwrap(), LayerMask::ones(0, 5));
    assert!(matches!(random_mask(0, 5, 0, &mut a), Err(Error::Range(_))));
}

#[test]
fn accuracy_matches_confusion_matrix_count() {
    let mut rng = RngStream::new(4, 8);
    let preds: Vec<usize> = (0..1000).map(|_| rng.below(4)).collect();
    let labels: Vec<usize> = (0..1000).map(|_| rng.below(4)).collect();
    let mut confusion = [[0usize; 4]; 4];
    for (&p, &y) in preds.iter().zip(&labels) {
        confusion[y][p] += 1;
    }
    let diag: usize = (0..4).map(|i| confusion[i][i]).sum();
    assert_eq!(predictions_accuracy(&preds, &labels).unwrap(), diag as f64 / 1000.0);
    assert_eq!(predictions_accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(predictions_accuracy(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
    assert!(matches!(predictions_accuracy(&[], &[]), Err(Error::Input(_))));
}

#[test]
fn grids_have_expected_shapes() {
    assert_eq!(coarse_grid(), vec![0.9, 0.8, 0.7, 0.6, 0.5]);
    let fine = fine_grid();
    assert_eq!(fine.len(), 21);
    assert!((fine[0] - 0.10).abs() < 1e-12 && (fine[20] - 0.50).abs() < 1e-12);
    assert!(fine.windows(2).all(|w| (w[1] - w[0] - 0.02).abs() < 1e-12));
}

fn small_artifact(seed: u64) -> Artifact {
    let splits = small_splits(seed);
    let mut model = small_model(seed);
    let cfg = small_train();
    let mut state = TrainState::new(seed, cfg.weight_decay);
    let mut sink = dance::harness::metrics::NullSink;
    stage2_distribution_learning(&mut model, &splits, &cfg, &mut state, &mut StageIo::new(&mut sink)).unwrap();
    Artifact { seed, model, splits }
}

#[test]
fn sweep_records_match_accounting_and_full_constraint_agrees() {
    let arts = [small_artifact(40), small_artifact(41)];
    let spec = SweepSpec {
        constraints: vec![1.0, 0.5, 0.25],
        seeds: vec![40, 41],
        baselines: BaselineKind::ALL.to_vec(),
        finetune: false,
    };
    let res = sweep_constraints(&spec, &arts, &small_train()).unwrap();
    assert_eq!(res.records.len(), 2 * 3 * 3);
    for seed in [40, 41] {
        let at_one: Vec<f64> = res
            .records
            .iter()
            .filter(|r| r.seed == seed && r.constraint == 1.0)
            .map(|r| r.accuracy)
            .collect();
        assert!(at_one.iter().all(|&a| a == at_one[0]));
    }
    for r in &res.records {
        let art = arts.iter().find(|a| a.seed == r.seed).unwrap();
        let mut rng = dance::evalbench::cell_rng(r.seed, r.constraint);
        let masks = baseline_masks(r.baseline, &art.model, &art.splits.val.x, r.constraint, &mut rng).unwrap();
        assert_eq!(r.params, count_params(&art.model.net, Some(&masks)).unwrap());
        assert_eq!(r.flops, count_flops(&art.model.net, Some(&masks)).unwrap());
        assert!((0.0..=1.0).contains(&r.accuracy));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    res.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "baseline,constraint,seed,accuracy,params,flops,wall_ms");
    assert_eq!(text.lines().count(), 1 + res.records.len());
    assert!(text.contains("score_based_pruning,0.5,40,"));
}

#[test]
fn finetuned_sweep_evaluates_subnets() {
    let arts = [small_artifact(42)];
    let spec = SweepSpec {
        constraints: vec![0.5],
        seeds: vec![42],
        baselines: vec![BaselineKind::Dance],
        finetune: true,
    };
    let res = sweep_constraints(&spec, &arts, &small_train()).unwrap();
    assert_eq!(res.records.len(), 1);
    assert!(matches!(
        sweep_constraints(&SweepSpec { constraints: vec![1.5], ..spec }, &arts, &small_train()),
        Err(Error::Range(_))
    ));
}

#[test]
fn ablation_grid_is_five_by_five() {
    let exp = Experiment {
        net: small_model(0).net.config.clone(),
        gate: small_model(0).gate_config.clone(),
        weights: ScoreWeights::default(),
        train: dance::trainer::TrainConfig {
            stage2_epochs: 1,
            ..small_train()
        },
        data: DatasetSpec {
            samples_per_class: 40,
            ..DatasetSpec::default()
        },
    };
    let pre = [Pretrained {
        seed: 0,
        model: small_model(0),
        splits: small_splits(0),
    }];
    let recs = ablation_run(&AblationSpec::default(), &exp, &pre).unwrap();
    assert_eq!(recs.len(), 25);
    for m in AblationMode::ALL {
        let cs: Vec<f64> = recs.iter().filter(|r| r.mode == m).map(|r| r.constraint).collect();
        assert_eq!(cs, coarse_grid());
    }
    let single = AblationMode::Feature.weights(&ScoreWeights::default());
    assert_eq!(single.components(), [0.0, 0.0, 0.25, 0.0]);

    let zero = ScoreWeights {
        static_w: 0.0,
        dynamic_w: 0.0,
        feature_w: 0.0,
        corr_w: 0.0,
        ..ScoreWeights::default()
    };
    assert!(AblationMode::Default.weights(&zero).validate().is_err());
}

#[test]
fn evaluate_rejects_empty_split() {
    let model = small_model(0);
    let empty = Dataset {
        x: dance::diffcore::Tensor::zeros(&[0, 2]),
        y: vec![],
        num_classes: 3,
    };
    assert!(evaluate_accuracy(Evaluated::SuperNet(&model.net, None), &empty).is_err());
}
