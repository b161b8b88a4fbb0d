use dance::diffcore::{softmax, RngStream, Tensor};
use dance::evalbench::predictions_accuracy;
use dance::harness::config::ExperimentConfig;
use dance::harness::data::{
    encode_idx_images, encode_idx_labels, generate_synthetic, load_idx_pair, parse_idx_images, split, Dataset,
    DatasetKind, DatasetSpec,
};
use dance::harness::metrics::{read_metrics, JsonlSink, MetricsRecord, MetricsSink};
use dance::trainer::LossBreakdown;
use dance::Error;

/// Multinomial logistic regression by full-batch gradient descent.
fn logistic_oracle(train: &Dataset, steps: usize, lr: f64) -> impl Fn(&[f64]) -> usize {
    let d = train.input_dim();
    let k = train.num_classes;
    let mut w = vec![0.0; (d + 1) * k];
    let n = train.len() as f64;
    for _ in 0..steps {
        let mut g = vec![0.0; w.len()];
        for (i, &y) in train.y.iter().enumerate() {
            let x = train.x.row(i);
            let logits: Vec<f64> = (0..k)
                .map(|c| w[d * k + c] + (0..d).map(|j| x[j] * w[j * k + c]).sum::<f64>())
                .collect();
            let p = softmax(&logits);
            for c in 0..k {
                let e = p[c] - f64::from(u8::from(c == y));
                for j in 0..d {
                    g[j * k + c] += e * x[j] / n;
                }
                g[d * k + c] += e / n;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * gi;
        }
    }
    move |x: &[f64]| {
        (0..k)
            .map(|c| w[d * k + c] + (0..d).map(|j| x[j] * w[j * k + c]).sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    }
}

#[test]
fn gaussian_task_is_linearly_separable() {
    let spec = DatasetSpec {
        kind: DatasetKind::Gaussians,
        classes: 2,
        samples_per_class: 200,
        input_dim: 4,
        ..DatasetSpec::default()
    };
    let s = generate_synthetic(&spec, 3).unwrap();
    let predict = logistic_oracle(&s.train, 300, 0.5);
    let preds: Vec<usize> = (0..s.test.len()).map(|i| predict(s.test.x.row(i))).collect();
    assert!(predictions_accuracy(&preds, &s.test.y).unwrap() > 0.99);
}

#[test]
fn split_is_disjoint_exhaustive_and_seeded() {
    let n = 97;
    let x = Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
    let all = Dataset::new(x, vec![0; n], 2).unwrap();
    let s = split(&all, [0.7, 0.2, 0.1], &mut RngStream::new(1, 4)).unwrap();
    let mut ids: Vec<usize> = [&s.train, &s.val, &s.test]
        .iter()
        .flat_map(|d| d.x.data().iter().map(|&v| v as usize))
        .collect();
    assert_eq!(s.train.len(), 68);
    assert_eq!(s.val.len(), 19);
    ids.sort_unstable();
    assert_eq!(ids, (0..n).collect::<Vec<_>>());
    let again = split(&all, [0.7, 0.2, 0.1], &mut RngStream::new(1, 4)).unwrap();
    assert_eq!(s, again);
    let other = split(&all, [0.7, 0.2, 0.1], &mut RngStream::new(2, 4)).unwrap();
    assert_ne!(s.train, other.train);
}

#[test]
fn synthetic_generators_are_labelled_and_balanced() {
    for kind in [DatasetKind::Gaussians, DatasetKind::Spirals] {
        let spec = DatasetSpec {
            kind,
            samples_per_class: 50,
            ..DatasetSpec::default()
        };
        let s = generate_synthetic(&spec, 0).unwrap();
        let mut counts = [0usize; 3];
        for d in [&s.train, &s.val, &s.test] {
            assert_eq!(d.input_dim(), 2);
            d.y.iter().for_each(|&c| counts[c] += 1);
        }
        assert_eq!(counts, [50; 3]);
    }
    let bad = DatasetSpec {
        classes: 1,
        ..DatasetSpec::default()
    };
    assert!(matches!(generate_synthetic(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn idx_round_trip_and_flattening() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| (i % 256) as u8).collect();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab");
    std::fs::write(&img, encode_idx_images(28, 28, &pixels)).unwrap();
    std::fs::write(&lab, encode_idx_labels(&[7, 0, 9])).unwrap();
    let ds = load_idx_pair(&img, &lab).unwrap();
    assert_eq!(ds.x.shape(), &[3, 784]);
    assert_eq!(ds.y, vec![7, 0, 9]);
    assert_eq!(ds.num_classes, 10);
    assert_eq!(ds.x.row(1)[0], f64::from(pixels[784]) / 255.0);

    std::fs::write(&lab, encode_idx_labels(&[1, 2])).unwrap();
    assert!(matches!(load_idx_pair(&img, &lab), Err(Error::Format { .. })));

    let mut truncated = encode_idx_images(2, 2, &[1, 2, 3, 4]);
    truncated.pop();
    assert!(matches!(parse_idx_images(&truncated), Err(Error::Format { offset: 16, .. })));
    let mut bad_magic = encode_idx_images(2, 2, &[1, 2, 3, 4]);
    bad_magic[3] = 0x01;
    assert!(matches!(parse_idx_images(&bad_magic), Err(Error::Format { offset: 0, .. })));
}

fn record(epoch: usize, task: f64, sparsity: f64) -> MetricsRecord {
    MetricsRecord {
        run_id: "r".into(),
        stage: 2,
        epoch,
        step: epoch as u64 * 10,
        loss: LossBreakdown {
            task,
            sparsity,
            total: task + sparsity,
            ..LossBreakdown::default()
        },
        val_accuracy: 0.5,
        k: vec![3, 4],
        mean_score: vec![0.5, 0.25],
        wall_ms: 0,
        warning: None,
    }
}

#[test]
fn metrics_lines_parse_independently() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    {
        let mut sink = JsonlSink::create(&path).unwrap();
        for e in 0..4 {
            sink.record(record(e, 1.0 / (e + 1) as f64, 0.1 * e as f64)).unwrap();
        }
    }
    let text = std::fs::read_to_string(&path).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["run_id", "stage", "epoch", "step", "task", "total", "val_accuracy", "k", "mean_score"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), 4);
    assert!(back.iter().all(|r| r.loss.additivity_error() < 1e-12));
    assert_eq!(back[2], record(2, 1.0 / 3.0, 0.2));

    // A torn final line is dropped; a torn middle line is an error.
    std::fs::write(&path, format!("{text}{{\"run_id\":")).unwrap();
    assert_eq!(read_metrics(&path).unwrap().len(), 4);
    let mut lines: Vec<&str> = text.lines().collect();
    lines.insert(1, "not json");
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(read_metrics(&path).is_err());
}

#[test]
fn config_parses_dotted_and_table_keys() {
    let text = r#"
        # comment
        net.layers = 2
        net.width = 16
        gate.tau = 0.5
        train.constraint_grid = [0.3, 0.5]
        [data]
        kind = "gaussians"
        classes = 4
    "#;
    let loaded = ExperimentConfig::parse(text).unwrap();
    let c = loaded.config;
    assert_eq!(c.widths, vec![16, 16]);
    assert_eq!(c.gate.tau, 0.5);
    assert_eq!(c.train.constraint_grid, vec![0.3, 0.5]);
    assert_eq!(c.data.kind, DatasetKind::Gaussians);
    assert_eq!(c.data.classes, 4);
    assert!(loaded.warnings.is_empty());

    let odd = ExperimentConfig::parse("gate.tau = 0.7").unwrap();
    assert_eq!(odd.warnings.len(), 1);
    assert_ne!(ExperimentConfig::default().hash(), odd.config.hash());
}

#[test]
fn config_rejects_unknown_and_invalid_values() {
    assert!(matches!(ExperimentConfig::parse("net.depth = 3"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::parse("gate.tau = \"x\""), Err(Error::Config(_))));
    assert!(ExperimentConfig::parse("gate.tau = 0.0").is_err());
    assert!(ExperimentConfig::parse("run.deploy_constraint = 1.5").is_err());
    assert!(ExperimentConfig::parse("net.widths = [8, 0]").is_err());
    assert!(ExperimentConfig::parse("data.fractions = [0.5, 0.5]").is_err());
}
