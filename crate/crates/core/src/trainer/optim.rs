use super::TrainError;
use crate::numkit::Tensor;

/// `base · factor^⌊epoch / every⌋` with 0-based epochs.
pub fn step_lr(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

/// Adam with classic L2 regularization (`g += weight_decay · θ`).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates parameter number `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<(), TrainError> {
        if grad.len() != param.numel() {
            return Err(TrainError::Config(format!(
                "gradient of length {} for parameter of shape {:?}",
                grad.len(),
                param.shape()
            )));
        }
        if self.t == 0 {
            return Err(TrainError::Config("update before begin_step".into()));
        }
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; grad.len()];
            self.v[slot] = vec![0.0; grad.len()];
        }
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        if m.len() != grad.len() {
            return Err(TrainError::Config(format!("optimizer slot {slot} changed size")));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i] + self.weight_decay * *p;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if param.data().iter().any(|x| !x.is_finite()) {
            return Err(TrainError::Diverged { epoch: 0, detail: format!("parameter slot {slot} became non-finite") });
        }
        Ok(())
    }
}

/// One Adam step over a flat parameter list.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::Config(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        state.update(i, p, g.data(), lr)?;
    }
    Ok(())
}
