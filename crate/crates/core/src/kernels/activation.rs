use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax across the channel axis at every `(n, t, h, w)`.
    SoftmaxChannels,
    Identity,
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Real>(x: &Tensor5<T>, kind: Activation) -> Result<Tensor5<T>> {
    Ok(match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Identity => x.clone(),
        Activation::SoftmaxChannels => softmax_channels(x),
    })
}

fn softmax_channels<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    let s = x.shape();
    let vol = s.volume();
    let mut y = x.clone();
    let d = y.data_mut();
    for n in 0..s.n {
        for p in 0..vol {
            let at = |c: usize| (n * s.c + c) * vol + p;
            let max = (0..s.c).map(|c| d[at(c)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..s.c {
                let e = (d[at(c)] - max).exp();
                d[at(c)] = e;
                sum = sum + e;
            }
            for c in 0..s.c {
                d[at(c)] = d[at(c)] / sum;
            }
        }
    }
    y
}

/// Backward pass given the forward input `x` and output `y`.
pub fn activate_backward<T: Real>(
    x: &Tensor5<T>,
    y: &Tensor5<T>,
    grad_out: &Tensor5<T>,
    kind: Activation,
) -> Result<Tensor5<T>> {
    if x.shape() != grad_out.shape() || y.shape() != grad_out.shape() {
        return Err(Error::shape("activation backward operands differ in shape"));
    }
    match kind {
        Activation::Relu => x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => y.zip_map(grad_out, |v, g| g * v * (T::one() - v)),
        Activation::Tanh => y.zip_map(grad_out, |v, g| g * (T::one() - v * v)),
        Activation::Identity => Ok(grad_out.clone()),
        Activation::SoftmaxChannels => {
            let s = y.shape();
            let vol = s.volume();
            let mut gx = grad_out.clone();
            let (yd, gd) = (y.data(), grad_out.data());
            let out = gx.data_mut();
            for n in 0..s.n {
                for p in 0..vol {
                    let at = |c: usize| (n * s.c + c) * vol + p;
                    let dot = (0..s.c).fold(T::zero(), |acc, c| acc + yd[at(c)] * gd[at(c)]);
                    for c in 0..s.c {
                        out[at(c)] = yd[at(c)] * (gd[at(c)] - dot);
                    }
                }
            }
            Ok(gx)
        }
    }
}
