//! Adam over named variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. Only the variables handed to [`Adam::new`] are
/// ever written.
pub struct Adam {
    slots: Vec<Slot>,
    params: AdamParams,
    t: u32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, params: AdamParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    m: z.clone(),
                    v: z,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slots, params, t: 0 })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.params.lr
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    /// Applies one update from `grads`; variables without a gradient are left
    /// untouched (their moments still decay).
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m * (1.0 / bc1))?;
            let v_hat = (&slot.v * (1.0 / bc2))?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_detached_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let v = Var::from_tensor(&Tensor::from_slice(&[1.0f64, -2.0, 0.5], 3, &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![v.clone()], AdamParams::new(0.1, 0.9, 0.999, 1e-8)).unwrap();
        let loss = (v.as_tensor() * Tensor::from_slice(&[3.0f64, -1.0, 0.0], 3, &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let out = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!((out[0] - 0.9).abs() < 1e-6);
        assert!((out[1] - -1.9).abs() < 1e-6);
        assert_eq!(out[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let v = Var::from_tensor(&Tensor::from_slice(&[5.0f32, -3.0], 2, &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![v.clone()], AdamParams::new(0.05, 0.9, 0.999, 1e-8)).unwrap();
        for _ in 0..1000 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let out = v.as_tensor().to_dtype(DType::F32).unwrap().to_vec1::<f32>().unwrap();
        assert!(out.iter().all(|x| x.abs() < 0.05), "{out:?}");
    }
}
