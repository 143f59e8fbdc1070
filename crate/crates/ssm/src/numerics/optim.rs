//! AdamW with decoupled weight decay and per-group learning rates.

use super::params::{ParamGroup, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning rates per parameter group.
#[derive(Clone, Copy, Debug)]
pub struct GroupRates {
    pub encoder: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Head => self.head,
        }
    }
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64, betas: (f64, f64)) -> Self {
        let first = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let second = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step over every trainable parameter using the
    /// gradients currently accumulated in the store.
    ///
    /// Weight decay is decoupled: applied directly to the weights,
    /// scaled by the group learning rate, never through the gradient.
    pub fn step(&mut self, store: &mut ParamStore, rates: GroupRates) -> Result<()> {
        if rates.encoder <= 0.0 || rates.head <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be positive, got encoder={} head={}",
                rates.encoder, rates.head
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let lr = rates.rate(p.group);
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            // lazy: a parameter that has never received a gradient is
            // left verbatim (no decay), so task-exclusive parameters
            // stay at init when their task's loss weight is zero
            let untouched = p.grad.data().iter().all(|&g| g == 0.0)
                && m.data().iter().all(|&x| x == 0.0)
                && v.data().iter().all(|&x| x == 0.0);
            if untouched {
                continue;
            }
            for j in 0..p.value.len() {
                let g = p.grad.data()[j];
                let w = p.value.data()[j] * (1.0 - lr * self.weight_decay);
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                p.value.data_mut()[j] = w - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
