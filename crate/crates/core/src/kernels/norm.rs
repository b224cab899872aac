//! Per-channel batch normalization over `(n, t, h, w)`.

use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::tensor::{Real, Tensor5};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Weight of the old running value: `running <- m*running + (1-m)*batch`.
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Tensor5<T>,
    inv_std: Vec<T>,
    train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(DEFAULT_MOMENTUM),
            epsilon: T::lit(DEFAULT_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `x`. In train mode the running statistics are updated in
    /// place from the biased batch variance.
    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BatchNormCache<T>)> {
        let s = x.shape();
        if s.c != self.channels() || self.beta.len() != s.c {
            return Err(Error::shape(format!(
                "batchnorm has {} channels, input {s} has {}",
                self.channels(),
                s.c
            )));
        }
        let count = s.n * s.volume();
        let train = mode.is_train();
        if train && count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batchnorm needs >= 2 values per channel in train mode, input {s} has {count}"
            )));
        }
        let vol = s.volume();
        let mut x_hat = Tensor5::zeros(s);
        let mut inv_std = Vec::with_capacity(s.c);
        let inv_count = T::one() / T::lit(count as f64);
        for c in 0..s.c {
            let (mean, var) = if train {
                let mut sum = T::zero();
                for n in 0..s.n {
                    let start = s.index(n, c, 0, 0, 0);
                    for &v in &x.data()[start..start + vol] {
                        sum = sum + v;
                    }
                }
                let mean = sum * inv_count;
                let mut sq = T::zero();
                for n in 0..s.n {
                    let start = s.index(n, c, 0, 0, 0);
                    for &v in &x.data()[start..start + vol] {
                        sq = sq + (v - mean) * (v - mean);
                    }
                }
                let var = sq * inv_count;
                let m = self.momentum;
                self.running_mean[c] = m * self.running_mean[c] + (T::one() - m) * mean;
                self.running_var[c] = m * self.running_var[c] + (T::one() - m) * var;
                (mean, var)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let is = T::one() / (var + self.epsilon).sqrt();
            inv_std.push(is);
            for n in 0..s.n {
                let start = s.index(n, c, 0, 0, 0);
                let src = &x.data()[start..start + vol];
                let dst = &mut x_hat.data_mut()[start..start + vol];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * is;
                }
            }
        }
        let mut y = x_hat.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let start = s.index(n, c, 0, 0, 0);
                for v in &mut y.data_mut()[start..start + vol] {
                    *v = self.gamma[c] * *v + self.beta[c];
                }
            }
        }
        Ok((y, BatchNormCache { x_hat, inv_std, train }))
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, grad_out: &Tensor5<T>) -> Result<(Tensor5<T>, BatchNormGrads<T>)> {
        let s = grad_out.shape();
        if s != cache.x_hat.shape() {
            return Err(Error::shape(format!(
                "batchnorm grad {s} differs from cached {}",
                cache.x_hat.shape()
            )));
        }
        let vol = s.volume();
        let count = T::lit((s.n * vol) as f64);
        let g = grad_out.data();
        let xh = cache.x_hat.data();
        let mut grad_x = Tensor5::zeros(s);
        let mut grads = BatchNormGrads { gamma: vec![T::zero(); s.c], beta: vec![T::zero(); s.c] };
        for c in 0..s.c {
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for n in 0..s.n {
                let start = s.index(n, c, 0, 0, 0);
                for i in start..start + vol {
                    sum_g = sum_g + g[i];
                    sum_gx = sum_gx + g[i] * xh[i];
                }
            }
            grads.beta[c] = sum_g;
            grads.gamma[c] = sum_gx;
            let scale = self.gamma[c] * cache.inv_std[c];
            for n in 0..s.n {
                let start = s.index(n, c, 0, 0, 0);
                let gx = &mut grad_x.data_mut()[start..start + vol];
                for (k, i) in (start..start + vol).enumerate() {
                    gx[k] = if cache.train {
                        scale * (g[i] - (sum_g + xh[i] * sum_gx) / count)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Ok((grad_x, grads))
    }
}
