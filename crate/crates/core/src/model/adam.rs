//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, one vector per learnable tensor in
    /// [`Parameters::param_list`] order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Parameters<T>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params.param_list().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Nothing changes if any gradient is non-finite.
    pub fn update<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.param_list();
        if g.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, gradient has {}",
                self.m.len(),
                g.len()
            )));
        }
        for p in &g {
            if let Some(i) = p.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {}[{i}]", p.name)));
            }
        }
        let mut dst = params.param_list_mut();
        for ((d, gp), m) in dst.iter().zip(&g).zip(&self.m) {
            if d.data.len() != gp.data.len() || m.len() != gp.data.len() {
                return Err(Error::shape(format!("parameter {} changed size", d.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        for (((d, gp), m), v) in dst.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..gp.data.len() {
                let gi = gp.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                d.data[i] = d.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
