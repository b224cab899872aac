//! Convolution followed by optional batch norm, ReLU and dropout.

use crate::error::Result;
use crate::kernels::{self, Activation, BatchNorm, BatchNormCache, Conv3d, DropoutMask, Mode};
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::tensor::{Real, Tensor5};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv3d<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
    pub dropout: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvUnitCache<T> {
    input: Tensor5<T>,
    bn: Option<BatchNormCache<T>>,
    pre_relu: Tensor5<T>,
    post_relu: Tensor5<T>,
    dropout: DropoutMask<T>,
}

impl<T: Real> ConvUnit<T> {
    /// A unit whose convolution carries a bias only when no batch norm
    /// follows it (the norm's shift makes a bias redundant).
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        batchnorm: bool,
        relu: bool,
        dropout: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv3d::init(c_out, c_in, kernel, stride, padding, !batchnorm, seed)?,
            bn: batchnorm.then(|| BatchNorm::new(c_out)),
            relu,
            dropout,
        })
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, ConvUnitCache<T>)> {
        let y = self.conv.forward(x)?;
        let (pre_relu, bn) = match &mut self.bn {
            Some(bn) => {
                let (y, cache) = bn.forward(&y, mode)?;
                (y, Some(cache))
            }
            None => (y, None),
        };
        let post_relu = if self.relu {
            kernels::activate(&pre_relu, Activation::Relu)?
        } else {
            pre_relu.clone()
        };
        let (out, dropout) = kernels::dropout3d(&post_relu, self.dropout.unwrap_or(0.0), mode)?;
        Ok((out, ConvUnitCache { input: x.clone(), bn, pre_relu, post_relu, dropout }))
    }

    /// Returns the input gradient and a unit holding the parameter gradients.
    pub fn backward(&self, cache: &ConvUnitCache<T>, grad_out: &Tensor5<T>) -> Result<(Tensor5<T>, ConvUnit<T>)> {
        let g = kernels::dropout3d_backward(&cache.dropout, grad_out)?;
        let g = if self.relu {
            kernels::activate_backward(&cache.pre_relu, &cache.post_relu, &g, Activation::Relu)?
        } else {
            g
        };
        let mut grads = self.clone();
        let g = match (&self.bn, &cache.bn) {
            (Some(bn), Some(bc)) => {
                let (gx, bg) = bn.backward(bc, &g)?;
                let gbn = grads.bn.as_mut().expect("cloned batch norm");
                gbn.gamma = bg.gamma;
                gbn.beta = bg.beta;
                gx
            }
            _ => g,
        };
        let (gx, cg) = self.conv.backward(&cache.input, &g)?;
        grads.conv.weight = cg.weight;
        grads.conv.bias = cg.bias;
        Ok((gx, grads))
    }
}

impl<T: Real> Parameters<T> for ConvUnit<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.params(&join(prefix, "conv"), out);
        if let Some(bn) = &self.bn {
            bn.params(&join(prefix, "bn"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        if let Some(bn) = &mut self.bn {
            bn.params_mut(&join(prefix, "bn"), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        if let Some(bn) = &self.bn {
            bn.buffers(&join(prefix, "bn"), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        if let Some(bn) = &mut self.bn {
            bn.buffers_mut(&join(prefix, "bn"), out);
        }
    }
}
