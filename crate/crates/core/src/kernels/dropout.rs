//! Inverted dropout with counter-based masks.

use crate::error::{Error, Result};
use crate::kernels::Mode;
use crate::rng;
use crate::tensor::{Real, Tensor5};

pub const DEFAULT_RATE: f64 = 0.3;

/// Per-element scale factors: `0` for dropped elements, `1/(1-rate)` for
/// survivors. `None` means the layer was the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T>(Option<Vec<T>>);

impl<T: Real> DropoutMask<T> {
    pub fn scales(&self) -> Option<&[T]> {
        self.0.as_deref()
    }
}

pub fn dropout3d<T: Real>(x: &Tensor5<T>, rate: f64, mode: Mode) -> Result<(Tensor5<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let seed = match mode {
        Mode::Train { seed } if rate > 0.0 => seed,
        _ => return Ok((x.clone(), DropoutMask(None))),
    };
    let keep = T::lit(1.0 / (1.0 - rate));
    let scales: Vec<T> = (0..x.len() as u64)
        .map(|i| if rng::hash_unit(seed, i) < rate { T::zero() } else { keep })
        .collect();
    let y = x.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
    Ok((Tensor5::from_vec(x.shape(), y)?, DropoutMask(Some(scales))))
}

pub fn dropout3d_backward<T: Real>(mask: &DropoutMask<T>, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
    match &mask.0 {
        None => Ok(grad_out.clone()),
        Some(scales) if scales.len() == grad_out.len() => Tensor5::from_vec(
            grad_out.shape(),
            grad_out.data().iter().zip(scales).map(|(&g, &s)| g * s).collect(),
        ),
        Some(scales) => Err(Error::shape(format!(
            "dropout mask has {} elements, gradient has {}",
            scales.len(),
            grad_out.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Shape5};

    #[test]
    fn identity_cases() {
        let x = Tensor5::<f64>::new(Shape5::new(1, 2, 3, 4, 4).unwrap(), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        assert_eq!(dropout3d(&x, 0.0, Mode::train(3)).unwrap().0, x);
        assert_eq!(dropout3d(&x, 0.7, Mode::Eval).unwrap().0, x);
        assert!(dropout3d(&x, 1.0, Mode::Eval).is_err());
    }

    #[test]
    fn inverted_scaling_preserves_mean() {
        let x = Tensor5::<f64>::new(Shape5::new(1, 1, 1, 100, 1000).unwrap(), Fill::Constant(1.0)).unwrap();
        let (y, mask) = dropout3d(&x, 0.5, Mode::train(42)).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let again = dropout3d(&x, 0.5, Mode::train(42)).unwrap().1;
        assert_eq!(mask, again);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
