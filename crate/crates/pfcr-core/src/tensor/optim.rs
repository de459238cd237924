use super::Scalar;

/// First/second-moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update, in place. `lr = 0` leaves `params` untouched.
pub fn adam_step<S: Scalar>(params: &mut [S], grads: &[S], state: &mut AdamState<S>, lr: f64) {
    assert_eq!(params.len(), grads.len(), "adam_step: gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "adam_step: state length mismatch");
    assert!(lr >= 0.0, "adam_step: negative learning rate");
    state.t += 1;
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let one = S::one();
    let corr1 = S::from_f64(1.0 - state.beta1.powi(state.t as i32));
    let corr2 = S::from_f64(1.0 - state.beta2.powi(state.t as i32));
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(state.epsilon);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / corr1;
        let v_hat = state.v[i] / corr2;
        params[i] = params[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer over an ordered set of parameter tensors, addressed by slot.
#[derive(Debug)]
pub struct Adam<S: Scalar> {
    slots: Vec<AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lens: &[usize]) -> Self {
        Adam { slots: lens.iter().map(|&l| AdamState::new(l)).collect() }
    }

    pub fn step(&mut self, slot: usize, params: &mut [S], grads: &[S], lr: f64) {
        adam_step(params, grads, &mut self.slots[slot], lr);
    }
}

/// Cosine annealing from `lr_base` at step 0 down to 0 at `step == total`.
pub fn cosine_lr(step: usize, total: usize, lr_base: f64) -> f64 {
    assert!(total >= 1, "cosine_lr: total must be >= 1");
    assert!(step <= total, "cosine_lr: step beyond horizon");
    lr_base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0
}
