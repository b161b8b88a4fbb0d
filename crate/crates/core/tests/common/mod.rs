#![allow(dead_code)]

use dance::diffcore::{RngStream, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, 1000)
}

pub fn randn(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Scalarises `out` with a fixed random contraction so that every output
/// entry contributes (a plain sum would hide softmax gradients).
fn scalarise(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    if shape.iter().product::<usize>() == 1 {
        return tape.sum(out);
    }
    let mut r = RngStream::new(seed, 2000);
    let w = randn(&mut r, &shape, 1.0);
    let wv = tape.constant(w);
    let p = tape.mul(out, wv).unwrap();
    tape.sum(p)
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let s = scalarise(&mut tape, out, seed);
    tape.value(s).data()[0]
}

/// Largest relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over all inputs,
/// comparing reverse-mode gradients with central differences.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let seed = inputs.iter().map(|t| t.len() as u64).sum::<u64>();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let s = scalarise(&mut tape, out, seed);
    let grads = tape.backward(s);

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i], t.shape());
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, &f, seed) - eval(&minus, &f, seed)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Worst relative gradient error per operation over `instances` random
/// small instances each.
pub fn gradient_suite(instances: usize) -> Vec<(&'static str, f64)> {
    use dance::diffcore::{activation, Activation, Module};
    use dance::gate::{
        batch_repr_tape, batch_stats, gate_logits_tape, gumbel_soft_tape, sampling_probs_tape, GateConfig,
        GateParams,
    };
    use dance::scoring::{ImportanceState, ScoreWeights};
    use dance::trainer::{diversity_tape, sparsity_tape};

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => out.push((name, err)),
    };

    for i in 0..instances as u64 {
        let mut r = rng(i);
        let b = 2 + r.below(3);
        let d_in = 1 + r.below(4);
        let d_out = 1 + r.below(4);

        let x = randn(&mut r, &[b, d_in], 1.0);
        let w = randn(&mut r, &[d_in, d_out], 0.7);
        let bias = randn(&mut r, &[d_out], 0.3);
        record(
            "dense_affine",
            grad_check(&[x.clone(), w, bias], |t, v| t.affine(v[0], v[1], v[2]).unwrap()),
        );
        for (name, kind) in [
            ("relu", Activation::Relu),
            ("sigmoid", Activation::Sigmoid),
            ("softmax", Activation::Softmax),
        ] {
            record(name, grad_check(std::slice::from_ref(&x), |t, v| activation(t, v[0], kind).unwrap()));
        }

        let classes = 2 + r.below(3);
        let logits = randn(&mut r, &[b, classes], 1.5);
        let labels: Vec<usize> = (0..b).map(|_| r.below(classes)).collect();
        record(
            "cross_entropy",
            grad_check(std::slice::from_ref(&logits), |t, v| t.cross_entropy(v[0], &labels).unwrap()),
        );
        let target = {
            let raw = randn(&mut r, &[b, classes], 1.0);
            let mut p = raw.clone();
            for row in 0..b {
                let s = dance::diffcore::softmax(raw.row(row));
                p.row_mut(row).copy_from_slice(&s);
            }
            p
        };
        record(
            "soft_cross_entropy",
            grad_check(&[logits], |t, v| t.soft_cross_entropy(v[0], target.clone()).unwrap()),
        );

        // Gate MLP: gradients with respect to all six parameters and the embedding.
        let width = 2 + r.below(5);
        let cfg = GateConfig {
            hidden: 3,
            embed_dim: 3,
            ..GateConfig::default()
        };
        let gp = GateParams::new(d_in, &[width], &cfg, &mut r);
        let mut gate = gp.layers[0].clone();
        // Scale up the output layer so the check is not dominated by tiny values.
        gate.out.weight.value = gate.out.weight.value.map(|v| v * 10.0);
        let feats = randn(&mut r, &[width, dance::archspace::FEATURE_STATS], 1.0);
        let emb = randn(&mut r, &[cfg.embed_dim], 1.0);
        let mut inputs: Vec<Tensor> = gate.params().iter().map(|p| p.value.clone()).collect();
        inputs.push(emb);
        record(
            "gate_logits",
            grad_check(&inputs, |t, v| gate_logits_tape(t, &v[..6], v[6], &feats, width).unwrap()),
        );

        let stats = batch_stats(&x).unwrap();
        let repr_inputs: Vec<Tensor> = gp.repr.params().iter().map(|p| p.value.clone()).collect();
        record(
            "batch_repr",
            grad_check(&repr_inputs, |t, v| batch_repr_tape(t, v, &stats).unwrap()),
        );

        // Relaxed sampling path: logits -> Gumbel-softmax -> importance-weighted softmax.
        let g = randn(&mut r, &[width], 1.0);
        let score = Tensor::vector((0..width).map(|_| 0.2 + r.uniform()).collect());
        let eps: Vec<f64> = (0..width).map(|_| r.gumbel()).collect();
        let tau = 0.5 + r.uniform();
        record(
            "sampling_probs",
            grad_check(&[g.clone(), score], |t, v| {
                let soft = gumbel_soft_tape(t, v[0], Some(&eps), tau).unwrap();
                sampling_probs_tape(t, soft, v[1]).unwrap()
            }),
        );

        // Auxiliary loss terms on a distribution p = softmax(z).
        let c = 0.1 + 0.8 * r.uniform();
        record(
            "sparsity_term",
            grad_check(std::slice::from_ref(&g), |t, v| {
                let s = t.sigmoid(v[0]);
                sparsity_tape(t, s, c)
            }),
        );
        record(
            "diversity_term",
            grad_check(std::slice::from_ref(&g), |t, v| {
                let p = t.softmax(v[0]).unwrap();
                diversity_tape(t, p)
            }),
        );

        // Importance score: gradients reach θ and the fusion weights.
        let mut st = ImportanceState::new(0, width, 4, &mut r);
        st.fusion_w.value = randn(&mut r, &[width, dance::archspace::FEATURE_STATS], 0.5);
        st.dynamic = (0..width).map(|_| r.uniform()).collect();
        let noise = randn(&mut r, &[b, width], 1.0);
        let weights = ScoreWeights::default();
        let st_inputs: Vec<Tensor> = st.params().iter().map(|p| p.value.clone()).collect();
        record(
            "importance_score",
            grad_check(&st_inputs, |t, v| st.score_tape(t, v, &feats, &noise, &weights).unwrap().score),
        );
        let prev = Tensor::vector(st.dynamic.clone());
        record(
            "stability_term",
            grad_check(&st_inputs, |t, v| {
                let s = st.score_tape(t, v, &feats, &noise, &weights).unwrap();
                let p = t.constant(prev.clone());
                let d = t.sub(s.dynamic, p).unwrap();
                let a = t.abs(d);
                t.sum(a)
            }),
        );
    }
    out
}

/// Small spirals problem and model shared by trainer and persistence tests.
pub fn small_splits(seed: u64) -> dance::harness::data::Splits {
    use dance::harness::data::{generate_synthetic, DatasetSpec};
    let spec = DatasetSpec {
        samples_per_class: 40,
        ..DatasetSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

pub fn small_model(seed: u64) -> dance::trainer::SearchModel {
    use dance::archspace::SuperNetConfig;
    use dance::gate::GateConfig;
    use dance::scoring::ScoreWeights;
    let gate = GateConfig {
        hidden: 8,
        embed_dim: 4,
        ..GateConfig::default()
    };
    dance::trainer::SearchModel::new(SuperNetConfig::uniform(2, 3, 2, 8), gate, ScoreWeights::default(), seed)
        .unwrap()
}

pub fn small_train() -> dance::trainer::TrainConfig {
    dance::trainer::TrainConfig {
        stage1_epochs: 3,
        stage2_epochs: 4,
        stage3_epochs: 2,
        batch_size: 16,
        lr_backbone: 0.01,
        ..dance::trainer::TrainConfig::default()
    }
}
