mod common;

use common::{grad_check, gradient_suite, randn, rng};
use dance::archspace::{LayerMask, SuperNet, SuperNetConfig};
use dance::diffcore::{Module, Tape, Var};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_differentiable_op_matches_finite_differences() {
    for (name, worst) in gradient_suite(20) {
        assert!(worst < TOLERANCE, "{name}: relative error {worst:e}");
    }
}

#[test]
fn masked_supernet_forward_gradients() {
    for seed in 0..5 {
        let net = SuperNet::new(SuperNetConfig::uniform(3, 3, 2, 5), seed).unwrap();
        let mut r = rng(100 + seed);
        let x = randn(&mut r, &[4, 3], 1.0);
        let mask = LayerMask::from_indices(0, 5, &[0, 2, 3]).unwrap();
        let labels = [0, 1, 2, 1];
        // Random biases keep pre-activations of all-masked rows off the ReLU kink.
        let inputs: Vec<_> = net.params().iter().map(|p| randn(&mut r, p.shape(), 0.5)).collect();
        let worst = grad_check(&inputs, |t: &mut Tape, v: &[Var]| {
            let xv = t.constant(x.clone());
            let m = t.constant(dance::diffcore::Tensor::vector(mask.as_f64()));
            let (logits, _) = net.forward_tape(t, v, xv, &[Some(m), None]).unwrap();
            t.cross_entropy(logits, &labels).unwrap()
        });
        assert!(worst < TOLERANCE, "seed {seed}: {worst:e}");
    }
}

#[test]
fn elementwise_helpers() {
    let mut r = rng(7);
    for _ in 0..20 {
        let a = randn(&mut r, &[3, 4], 1.0);
        let row = randn(&mut r, &[4], 1.0);
        let pos = a.map(|v| v.abs() + 0.5);
        assert!(grad_check(&[a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]).unwrap()) < TOLERANCE);
        assert!(grad_check(&[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]).unwrap()) < TOLERANCE);
        assert!(grad_check(&[pos], |t, v| t.ln(v[0])) < TOLERANCE);
        assert!(grad_check(std::slice::from_ref(&a), |t, v| t.abs(v[0])) < TOLERANCE);
        assert!(grad_check(std::slice::from_ref(&a), |t, v| t.mean_rows(v[0])) < TOLERANCE);
        assert!(grad_check(std::slice::from_ref(&a), |t, v| t.sum_last(v[0])) < TOLERANCE);
        assert!(grad_check(&[a.clone(), row.clone()], |t, v| t.concat(&[v[0], v[1]])) < TOLERANCE);
        assert!(grad_check(&[a], |t, v| {
            let m = t.mean(v[0]);
            t.scale(m, -2.5)
        }) < TOLERANCE);
    }
}

#[test]
fn straight_through_passes_gradient_to_soft_input() {
    let mut tape = Tape::new();
    let soft = tape.leaf(dance::diffcore::Tensor::vector(vec![0.2, 0.3, 0.5]));
    let st = tape
        .straight_through(dance::diffcore::Tensor::vector(vec![1.0, 0.0, 1.0]), soft)
        .unwrap();
    assert_eq!(tape.value(st).data(), &[1.0, 0.0, 1.0]);
    let w = tape.constant(dance::diffcore::Tensor::vector(vec![1.0, 2.0, 3.0]));
    let p = tape.mul(st, w).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s);
    assert_eq!(g.get(soft).unwrap().data(), &[1.0, 2.0, 3.0]);
}
