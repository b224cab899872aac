//! Max pooling without padding.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape5, Tensor5};

#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    /// Flat input index of each output element's maximum.
    pub argmax: Vec<usize>,
    pub input_shape: Shape5,
}

pub fn pool_output_shape(x: Shape5, window: [usize; 3], stride: [usize; 3]) -> Result<Shape5> {
    let d = [x.t, x.h, x.w];
    let mut out = [0; 3];
    for axis in 0..3 {
        if window[axis] == 0 || stride[axis] == 0 || d[axis] < window[axis] {
            return Err(Error::shape(format!(
                "maxpool window {window:?} stride {stride:?} leaves no output for input {x}"
            )));
        }
        out[axis] = (d[axis] - window[axis]) / stride[axis] + 1;
    }
    Ok(x.with_thw(out[0], out[1], out[2]))
}

/// Window maxima. Ties resolve to the first element in `(t, h, w)` scan order.
pub fn maxpool3d<T: Real>(
    x: &Tensor5<T>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor5<T>, PoolIndices)> {
    let xs = x.shape();
    let os = pool_output_shape(xs, window, stride)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(os.len());
    let mut argmax = Vec::with_capacity(os.len());
    for n in 0..os.n {
        for c in 0..os.c {
            for ot in 0..os.t {
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let mut best_i = xs.index(n, c, ot * stride[0], oh * stride[1], ow * stride[2]);
                        let mut best = xd[best_i];
                        for dt in 0..window[0] {
                            for dh in 0..window[1] {
                                for dw in 0..window[2] {
                                    let i = xs.index(
                                        n,
                                        c,
                                        ot * stride[0] + dt,
                                        oh * stride[1] + dh,
                                        ow * stride[2] + dw,
                                    );
                                    if xd[i] > best {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
    }
    Ok((Tensor5::from_vec(os, out)?, PoolIndices { argmax, input_shape: xs }))
}

/// Routes each output gradient to its recorded maximum, accumulating in
/// output order where windows overlap.
pub fn maxpool3d_backward<T: Real>(indices: &PoolIndices, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
    if indices.argmax.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "maxpool grad_out has {} elements but {} indices were recorded",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut grad_x = Tensor5::zeros(indices.input_shape);
    let len = grad_x.len();
    let gx = grad_x.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        if i >= len {
            return Err(Error::Corruption(format!(
                "maxpool index {i} out of range for input of {len} elements"
            )));
        }
        gx[i] = gx[i] + g;
    }
    Ok(grad_x)
}
