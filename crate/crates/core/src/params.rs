//! Named views over learnable tensors and running statistics.
//!
//! Gradients are carried in the same types as the parameters they belong
//! to, so a module and its gradient always enumerate tensors in the same
//! order.

use crate::error::{Error, Result};
use crate::kernels::{BatchNorm, Conv3d};
use crate::tensor::Real;

#[derive(Debug)]
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameters<T: Real> {
    /// Learnable tensors, in a fixed order.
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    /// Non-learnable state such as running statistics.
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<ParamRef<'a, T>>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<ParamMut<'a, T>>) {}

    fn param_list(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn param_list_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn buffer_list(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.buffers("", &mut out);
        out
    }

    fn buffer_list_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.buffers_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.param_list().iter().map(|p| p.data.len()).sum()
    }

    /// Sets every learnable value to zero.
    fn zero_params(&mut self) {
        for p in self.param_list_mut() {
            p.data.fill(T::zero());
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let src = other.param_list();
        let dst = self.param_list_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("parameter sets differ in tensor count"));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.data.len() != s.data.len() {
                return Err(Error::shape(format!("parameter {} differs in size", d.name)));
            }
            for (a, &b) in d.data.iter_mut().zip(s.data) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    fn scale_params(&mut self, k: T) {
        for p in self.param_list_mut() {
            p.data.iter_mut().for_each(|v| *v = *v * k);
        }
    }

    fn all_params_finite(&self) -> bool {
        self.param_list().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> Parameters<T> for Conv3d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            shape: self.weight.shape().dims().to_vec(),
            data: self.weight.data(),
        });
        if let Some(b) = &self.bias {
            out.push(ParamRef { name: join(prefix, "bias"), shape: vec![b.len()], data: b });
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let shape = self.weight.shape().dims().to_vec();
        out.push(ParamMut { name: join(prefix, "weight"), shape, data: self.weight.data_mut() });
        if let Some(b) = &mut self.bias {
            out.push(ParamMut { name: join(prefix, "bias"), shape: vec![b.len()], data: b });
        }
    }
}

impl<T: Real> Parameters<T> for BatchNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let c = self.gamma.len();
        out.push(ParamRef { name: join(prefix, "gamma"), shape: vec![c], data: &self.gamma });
        out.push(ParamRef { name: join(prefix, "beta"), shape: vec![c], data: &self.beta });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let c = self.gamma.len();
        out.push(ParamMut { name: join(prefix, "gamma"), shape: vec![c], data: &mut self.gamma });
        out.push(ParamMut { name: join(prefix, "beta"), shape: vec![c], data: &mut self.beta });
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let c = self.gamma.len();
        out.push(ParamRef { name: join(prefix, "running_mean"), shape: vec![c], data: &self.running_mean });
        out.push(ParamRef { name: join(prefix, "running_var"), shape: vec![c], data: &self.running_var });
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let c = self.gamma.len();
        out.push(ParamMut { name: join(prefix, "running_mean"), shape: vec![c], data: &mut self.running_mean });
        out.push(ParamMut { name: join(prefix, "running_var"), shape: vec![c], data: &mut self.running_var });
    }
}
