//! Adam with bias correction over a fixed group of store variables.
//!
//! The search stage runs two of these side by side (network weights at one
//! learning rate, gate logits at another); their moment buffers are disjoint
//! by construction because each state owns slots only for its own group.

use crate::tape::{VarId, VarStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    var: VarId,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, vars: &[VarId], store: &VarStore) -> Self {
        let slots = vars
            .iter()
            .map(|&var| {
                let shape = store.value(var).shape().to_vec();
                Slot {
                    var,
                    m: Tensor::zeros(shape.clone()),
                    v: Tensor::zeros(shape),
                }
            })
            .collect();
        AdamState { cfg, step: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn var_ids(&self) -> Vec<VarId> {
        self.slots.iter().map(|s| s.var).collect()
    }

    /// One Adam update from the gradients currently in the store. Gradients
    /// are left untouched; the caller zeroes them between iterations.
    pub fn step(&mut self, store: &mut VarStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for slot in &mut self.slots {
            if !store.var(slot.var).trainable {
                continue;
            }
            let grad: Vec<f64> = store.grad(slot.var).data().to_vec();
            let value = store.value_mut(slot.var).data_mut();
            for (((val, m), v), g) in value
                .iter_mut()
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
                .zip(grad)
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *val -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut store = VarStore::new();
        let x = store.add("x", Tensor::scalar(1.0), true);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &[x], &store);
        // gradient g = 1
        let mut tape = Tape::new();
        let xn = tape.leaf(&store, x);
        let y = tape.sum(xn);
        tape.backward(y, &mut store);
        adam.step(&mut store);
        assert_eq!(adam.step_count(), 1);
        let moved = 1.0 - store.value(x).item();
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut store = VarStore::new();
        let x = store.add("x", Tensor::scalar(2.5), true);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &[x], &store);
        adam.step(&mut store);
        assert_eq!(store.value(x).item(), 2.5);
    }

    #[test]
    fn quadratic_converges_near_zero() {
        let mut store = VarStore::new();
        let x = store.add("x", Tensor::scalar(1.0), true);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &[x], &store);
        for _ in 0..2000 {
            store.zero_grad();
            let mut tape = Tape::new();
            let xn = tape.leaf(&store, x);
            let sq = tape.scalar_mul(xn, xn);
            let loss = tape.sum(sq);
            tape.backward(loss, &mut store);
            adam.step(&mut store);
        }
        assert!(store.value(x).item().abs() < 1e-2);
    }

    #[test]
    fn step_count_increases_by_one_per_call() {
        let mut store = VarStore::new();
        let x = store.add("x", Tensor::scalar(0.0), true);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &[x], &store);
        for expected in 1..=5 {
            adam.step(&mut store);
            assert_eq!(adam.step_count(), expected);
        }
    }
}
