use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// A trainable tensor with its gradient accumulator and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Adds the gradient recorded for `var` (if any) into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters in a fixed, declared order.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Binds every parameter on the tape, in declared order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p)).collect()
    }

    /// Adds gradients for vars previously returned by [`Module::bind`].
    fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) {
        for (p, &v) in self.params_mut().into_iter().zip(vars) {
            p.accumulate(grads, v);
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters whose update was skipped because of a non-finite gradient.
    pub skipped: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            skipped: 0,
        }
    }
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            skipped: 0,
        }
    }

    /// One update of every parameter at learning rate `lr`; gradients are zeroed afterwards.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
        for p in params {
            if !p.grad.is_finite() {
                self.skipped += 1;
                p.zero_grad();
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - lr * self.weight_decay;
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = self.beta1 * p.m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.v.data()[i] + (1.0 - self.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let w = &mut p.value.data_mut()[i];
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
    }
}
