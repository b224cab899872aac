//! 3D cross-correlation with zero padding.
//!
//! Inputs are unrolled into tap matrices (one row per kernel tap) so the
//! inner loops run over contiguous output positions. Every output element
//! accumulates its taps in the fixed order `k_t`, `k_h`, `k_w`, `c_in`
//! (innermost), starting from the bias. Work is split across independent
//! output rows only, so results are bit-identical for any number of worker
//! threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Fill, Real, Shape5, Tensor5, PAR_MIN_ELEMS};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d<T> {
    /// `(c_out, c_in, k_t, k_h, k_w)`.
    pub weight: Tensor5<T>,
    pub bias: Option<Vec<T>>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dGrads<T> {
    pub weight: Tensor5<T>,
    pub bias: Option<Vec<T>>,
}

/// Output extent of one convolution axis, or `None` if empty.
pub fn conv_out_extent(d: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = d + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Range of output positions `o` with `0 <= o*stride + k - pad < d`.
#[inline]
fn valid_range(d: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o*stride + k - pad <= d - 1
    let hi = if d + pad > k { (d + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

impl<T: Real> Conv3d<T> {
    /// Kaiming-uniform style init: weights in `±sqrt(1/fan_in)`, zero bias.
    pub fn init(
        c_out: usize,
        c_in: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        with_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let shape = Shape5::new(c_out, c_in, kernel[0], kernel[1], kernel[2])?;
        let bound = (1.0 / (c_in * kernel.iter().product::<usize>()) as f64).sqrt();
        let weight = Tensor5::new(shape, Fill::Uniform { lo: -bound, hi: bound, seed })?;
        Ok(Conv3d {
            weight,
            bias: with_bias.then(|| vec![T::zero(); c_out]),
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s.t, s.h, s.w]
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        if input.c != self.c_in() {
            return Err(Error::shape(format!(
                "conv3d expects {} input channels, got {}",
                self.c_in(),
                input.c
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.c_out() {
                return Err(Error::shape("conv3d bias length differs from c_out"));
            }
        }
        let k = self.kernel();
        let d = [input.t, input.h, input.w];
        let mut out = [0; 3];
        for axis in 0..3 {
            out[axis] = conv_out_extent(d[axis], k[axis], self.stride[axis], self.padding[axis])
                .ok_or_else(|| {
                    Error::shape(format!(
                        "conv3d output extent empty on axis {axis} for input {input}"
                    ))
                })?;
        }
        Ok(Shape5 { n: input.n, c: self.c_out(), t: out[0], h: out[1], w: out[2] })
    }

    /// Weights reordered to `(c_out, K)` with `K` running over
    /// `k_t, k_h, k_w, c_in` (innermost).
    fn weight_rows(&self) -> Vec<T> {
        let ws = self.weight.shape();
        let wd = self.weight.data();
        let mut rows = Vec::with_capacity(ws.len());
        for co in 0..ws.n {
            for kt in 0..ws.t {
                for kh in 0..ws.h {
                    for kw in 0..ws.w {
                        for ci in 0..ws.c {
                            rows.push(wd[ws.index(co, ci, kt, kh, kw)]);
                        }
                    }
                }
            }
        }
        rows
    }

    /// Tap matrix of sample `n`: row `k` holds the input value feeding every
    /// output position through tap `k`, or zero where it falls in padding.
    fn im2col(&self, x: &Tensor5<T>, n: usize, os: Shape5) -> Vec<T> {
        let xs = x.shape();
        let xd = x.data();
        let ws = self.weight.shape();
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let p = os.volume();
        let mut col = vec![T::zero(); ws.len() / ws.n * p];
        let mut k = 0;
        for kt in 0..ws.t {
            let (t_lo, t_hi) = valid_range(xs.t, os.t, kt, st, pt);
            for kh in 0..ws.h {
                let (h_lo, h_hi) = valid_range(xs.h, os.h, kh, sh, ph);
                for kw in 0..ws.w {
                    let (w_lo, w_hi) = valid_range(xs.w, os.w, kw, sw, pw);
                    for ci in 0..xs.c {
                        let row = &mut col[k * p..(k + 1) * p];
                        for ot in t_lo..t_hi {
                            let it = ot * st + kt - pt;
                            for oh in h_lo..h_hi {
                                let ih = oh * sh + kh - ph;
                                let src = &xd[xs.index(n, ci, it, ih, 0)..][..xs.w];
                                let dst = &mut row[(ot * os.h + oh) * os.w..][..os.w];
                                if sw == 1 {
                                    let start = w_lo + kw - pw;
                                    dst[w_lo..w_hi].copy_from_slice(&src[start..start + (w_hi - w_lo)]);
                                } else {
                                    for ow in w_lo..w_hi {
                                        dst[ow] = src[ow * sw + kw - pw];
                                    }
                                }
                            }
                        }
                        k += 1;
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Self::im2col`]: scatters tap rows back onto the input
    /// volume of one sample, rows in `k` order.
    fn col2im(&self, col: &[T], xs: Shape5, os: Shape5, gx: &mut [T]) {
        let ws = self.weight.shape();
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let p = os.volume();
        let vol = xs.volume();
        let mut k = 0;
        for kt in 0..ws.t {
            let (t_lo, t_hi) = valid_range(xs.t, os.t, kt, st, pt);
            for kh in 0..ws.h {
                let (h_lo, h_hi) = valid_range(xs.h, os.h, kh, sh, ph);
                for kw in 0..ws.w {
                    let (w_lo, w_hi) = valid_range(xs.w, os.w, kw, sw, pw);
                    for ci in 0..xs.c {
                        let row = &col[k * p..(k + 1) * p];
                        let plane = &mut gx[ci * vol..(ci + 1) * vol];
                        for ot in t_lo..t_hi {
                            let it = ot * st + kt - pt;
                            for oh in h_lo..h_hi {
                                let ih = oh * sh + kh - ph;
                                let dst = &mut plane[(it * xs.h + ih) * xs.w..][..xs.w];
                                let src = &row[(ot * os.h + oh) * os.w..][..os.w];
                                for ow in w_lo..w_hi {
                                    let iw = ow * sw + kw - pw;
                                    dst[iw] = dst[iw] + src[ow];
                                }
                            }
                        }
                        k += 1;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let xs = x.shape();
        let os = self.output_shape(xs)?;
        let wrows = self.weight_rows();
        let (c_out, p) = (os.c, os.volume());
        let kk = wrows.len() / c_out;
        let mut out = Tensor5::zeros(os);
        let work = |(n, acc): (usize, &mut [T])| {
            let col = self.im2col(x, n, os);
            for (co, row) in acc.chunks_mut(p).enumerate() {
                row.fill(self.bias.as_ref().map_or(T::zero(), |b| b[co]));
            }
            for p0 in (0..p).step_by(TILE) {
                let p1 = (p0 + TILE).min(p);
                for k in 0..kk {
                    let src = &col[k * p + p0..k * p + p1];
                    for co in 0..c_out {
                        axpy(&mut acc[co * p + p0..co * p + p1], wrows[co * kk + k], src);
                    }
                }
            }
        };
        if os.len() >= PAR_MIN_ELEMS {
            out.data_mut().par_chunks_mut(c_out * p).enumerate().for_each(work);
        } else {
            out.data_mut().chunks_mut(c_out * p).enumerate().for_each(work);
        }
        Ok(out)
    }

    /// Gradients with respect to the input, weights and bias.
    pub fn backward(
        &self,
        x: &Tensor5<T>,
        grad_out: &Tensor5<T>,
    ) -> Result<(Tensor5<T>, Conv3dGrads<T>)> {
        let xs = x.shape();
        let os = self.output_shape(xs)?;
        if grad_out.shape() != os {
            return Err(Error::shape(format!(
                "conv3d grad_out shape {} differs from output shape {os}",
                grad_out.shape()
            )));
        }
        let grad_x = self.grad_input(xs, grad_out);
        let grad_w = self.grad_weight(x, grad_out);
        let grad_b = self.bias.as_ref().map(|_| {
            (0..os.c)
                .map(|co| {
                    let mut acc = T::zero();
                    for n in 0..os.n {
                        let start = os.index(n, co, 0, 0, 0);
                        for &g in &grad_out.data()[start..start + os.volume()] {
                            acc = acc + g;
                        }
                    }
                    acc
                })
                .collect()
        });
        Ok((grad_x, Conv3dGrads { weight: grad_w, bias: grad_b }))
    }

    /// Per sample: tap-row gradients summed over `c_out` in order, then
    /// scattered back in tap order.
    fn grad_input(&self, xs: Shape5, grad_out: &Tensor5<T>) -> Tensor5<T> {
        let os = grad_out.shape();
        let gd = grad_out.data();
        let wrows = self.weight_rows();
        let kk = wrows.len() / os.c;
        let p = os.volume();
        let mut grad_x = Tensor5::zeros(xs);
        let work = |(n, gx): (usize, &mut [T])| {
            let g = &gd[os.index(n, 0, 0, 0, 0)..][..os.c * p];
            let mut col = vec![T::zero(); kk * p];
            for p0 in (0..p).step_by(TILE) {
                let p1 = (p0 + TILE).min(p);
                for k in 0..kk {
                    let row = &mut col[k * p + p0..k * p + p1];
                    for co in 0..os.c {
                        axpy(row, wrows[co * kk + k], &g[co * p + p0..co * p + p1]);
                    }
                }
            }
            self.col2im(&col, xs, os, gx);
        };
        let per_sample = xs.c * xs.volume();
        if xs.len().max(os.len()) >= PAR_MIN_ELEMS {
            grad_x.data_mut().par_chunks_mut(per_sample).enumerate().for_each(work);
        } else {
            grad_x.data_mut().chunks_mut(per_sample).enumerate().for_each(work);
        }
        grad_x
    }

    /// Per weight element: blocked dot products over tiles of output
    /// positions, accumulated over samples then tiles in order.
    fn grad_weight(&self, x: &Tensor5<T>, grad_out: &Tensor5<T>) -> Tensor5<T> {
        let os = grad_out.shape();
        let gd = grad_out.data();
        let ws = self.weight.shape();
        let kk = ws.len() / ws.n;
        let p = os.volume();
        let cols = if os.len() >= PAR_MIN_ELEMS {
            (0..os.n).into_par_iter().map(|n| self.im2col(x, n, os)).collect::<Vec<_>>()
        } else {
            (0..os.n).map(|n| self.im2col(x, n, os)).collect()
        };
        let mut rows = vec![T::zero(); ws.len()];
        // Channel groups are independent; the split never changes the
        // per-element order.
        let group = ws.n.div_ceil(rayon::current_num_threads().max(1)).max(1);
        let work = |(gi, gw): (usize, &mut [T])| {
            let co0 = gi * group;
            let cos = gw.len() / kk;
            for (n, col) in cols.iter().enumerate() {
                for p0 in (0..p).step_by(TILE) {
                    let p1 = (p0 + TILE).min(p);
                    for k in 0..kk {
                        let src = &col[k * p + p0..k * p + p1];
                        for c in 0..cos {
                            let g = &gd[os.index(n, co0 + c, 0, 0, 0) + p0..][..p1 - p0];
                            let w = &mut gw[c * kk + k];
                            *w = *w + blocked_dot(g, src);
                        }
                    }
                }
            }
        };
        if os.len() * kk >= PAR_MIN_ELEMS {
            rows.par_chunks_mut(group * kk).enumerate().for_each(work);
        } else {
            rows.chunks_mut(group * kk).enumerate().for_each(work);
        }
        let mut grad_w = Tensor5::zeros(ws);
        let gw = grad_w.data_mut();
        let mut i = 0;
        for co in 0..ws.n {
            for kt in 0..ws.t {
                for kh in 0..ws.h {
                    for kw in 0..ws.w {
                        for ci in 0..ws.c {
                            gw[ws.index(co, ci, kt, kh, kw)] = rows[i];
                            i += 1;
                        }
                    }
                }
            }
        }
        grad_w
    }
}

/// Output positions processed together; small enough that a tile of every
/// output channel stays in L1.
const TILE: usize = 256;

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

const LANES: usize = 8;

/// Dot product with eight interleaved partial sums combined left to right.
#[inline]
fn blocked_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut part = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            part[l] = part[l] + xa[l] * xb[l];
        }
    }
    for (l, (&u, &v)) in ra.iter().zip(rb).enumerate() {
        part[l] = part[l] + u * v;
    }
    part.iter().fold(T::zero(), |s, &v| s + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(n, c, t, h, w).unwrap()
    }

    fn conv_from(weight: Tensor5<f64>, bias: Option<Vec<f64>>, stride: [usize; 3], padding: [usize; 3]) -> Conv3d<f64> {
        Conv3d { weight, bias, stride, padding }
    }

    /// Direct transcription of the definition, one output element at a time.
    fn brute_force(x: &Tensor5<f64>, c: &Conv3d<f64>) -> Tensor5<f64> {
        let xs = x.shape();
        let os = c.output_shape(xs).unwrap();
        let ws = c.weight.shape();
        let mut out = Tensor5::zeros(os);
        for n in 0..os.n {
            for co in 0..os.c {
                for ot in 0..os.t {
                    for oh in 0..os.h {
                        for ow in 0..os.w {
                            let mut acc = c.bias.as_ref().map_or(0.0, |b| b[co]);
                            for kt in 0..ws.t {
                                for kh in 0..ws.h {
                                    for kw in 0..ws.w {
                                        for ci in 0..ws.c {
                                            let it = (ot * c.stride[0] + kt) as isize - c.padding[0] as isize;
                                            let ih = (oh * c.stride[1] + kh) as isize - c.padding[1] as isize;
                                            let iw = (ow * c.stride[2] + kw) as isize - c.padding[2] as isize;
                                            if it < 0 || ih < 0 || iw < 0 || it >= xs.t as isize || ih >= xs.h as isize || iw >= xs.w as isize {
                                                continue;
                                            }
                                            acc += c.weight.at(co, ci, kt, kh, kw)
                                                * x.at(n, ci, it as usize, ih as usize, iw as usize);
                                        }
                                    }
                                }
                            }
                            let i = os.index(n, co, ot, oh, ow);
                            out.data_mut()[i] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor5::<f64>::new(shape(2, 1, 3, 4, 5), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 }).unwrap();
        let c = conv_from(Tensor5::new(shape(1, 1, 1, 1, 1), Fill::Constant(1.0)).unwrap(), Some(vec![0.0]), [1; 3], [0; 3]);
        assert_eq!(c.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor5::<f64>::new(shape(1, 2, 3, 4, 4), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 2 }).unwrap();
        let c = conv_from(Tensor5::zeros(shape(3, 2, 3, 3, 3)), Some(vec![0.25; 3]), [1; 3], [1; 3]);
        let y = c.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn ones_kernel_sums_cube() {
        let x = Tensor5::from_vec(shape(1, 1, 2, 2, 2), (1..=8).map(f64::from).collect()).unwrap();
        let c = conv_from(Tensor5::new(shape(1, 1, 2, 2, 2), Fill::Constant(1.0)).unwrap(), Some(vec![0.0]), [1; 3], [0; 3]);
        let y = c.forward(&x).unwrap();
        assert_eq!(y.shape(), shape(1, 1, 1, 1, 1));
        assert_eq!(y.data(), brute_force(&x, &c).data());
        assert_eq!(y.data(), &[36.0]);
    }

    #[test]
    fn matches_brute_force_with_stride_and_padding() {
        for (seed, stride, pad, k) in [
            (1, [1, 1, 1], [1, 1, 1], [3, 3, 3]),
            (2, [2, 2, 2], [1, 1, 1], [3, 3, 3]),
            (3, [1, 2, 2], [1, 2, 2], [3, 5, 5]),
            (4, [1, 2, 1], [0, 1, 0], [1, 3, 3]),
        ] {
            let x = Tensor5::<f64>::new(shape(2, 2, 5, 7, 6), Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
            let w = Tensor5::new(shape(3, 2, k[0], k[1], k[2]), Fill::Uniform { lo: -1.0, hi: 1.0, seed: seed + 10 }).unwrap();
            let c = conv_from(w, Some(vec![0.1, -0.2, 0.3]), stride, pad);
            let got = c.forward(&x).unwrap();
            let want = brute_force(&x, &c);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_with_ceil() {
        for d in 1..=64 {
            assert_eq!(conv_out_extent(d, 3, 2, 1), Some(d.div_ceil(2)), "d={d}");
        }
    }

    #[test]
    fn shape_errors() {
        let c = conv_from(Tensor5::zeros(shape(1, 2, 3, 3, 3)), None, [1; 3], [0; 3]);
        let wrong_c = Tensor5::<f64>::zeros(shape(1, 1, 4, 4, 4));
        assert!(matches!(c.forward(&wrong_c), Err(Error::Shape(_))));
        let too_small = Tensor5::<f64>::zeros(shape(1, 2, 2, 4, 4));
        assert!(matches!(c.forward(&too_small), Err(Error::Shape(_))));
        let x = Tensor5::<f64>::zeros(shape(1, 2, 4, 4, 4));
        let bad_grad = Tensor5::zeros(shape(1, 1, 1, 1, 1));
        assert!(matches!(c.backward(&x, &bad_grad), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_zero_and_identity() {
        let x = Tensor5::<f64>::new(shape(1, 2, 3, 4, 4), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let c = Conv3d::<f64>::init(3, 2, [3, 3, 3], [1; 3], [1; 3], true, 9).unwrap();
        let g0 = Tensor5::zeros(c.output_shape(x.shape()).unwrap());
        let (gx, gp) = c.backward(&x, &g0).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gp.weight.data().iter().all(|&v| v == 0.0));
        assert!(gp.bias.unwrap().iter().all(|&v| v == 0.0));

        let id = conv_from(Tensor5::new(shape(1, 1, 1, 1, 1), Fill::Constant(1.0)).unwrap(), Some(vec![0.0]), [1; 3], [0; 3]);
        let x1 = Tensor5::<f64>::new(shape(1, 1, 3, 4, 4), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 6 }).unwrap();
        let g = Tensor5::new(x1.shape(), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 7 }).unwrap();
        let (gx, gp) = id.backward(&x1, &g).unwrap();
        assert_eq!(gx, g);
        assert_eq!(gp.bias.unwrap()[0], g.data().iter().sum::<f64>());
    }

    #[test]
    fn bit_identical_across_thread_counts() {
        let x = Tensor5::<f32>::new(shape(2, 4, 8, 16, 16), Fill::Uniform { lo: -1.0, hi: 1.0, seed: 11 }).unwrap();
        let c = Conv3d::<f32>::init(6, 4, [3, 3, 3], [1, 2, 2], [1; 3], true, 3).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                let y = c.forward(&x).unwrap();
                let (gx, gp) = c.backward(&x, &y).unwrap();
                (y, gx, gp)
            })
        };
        assert_eq!(run(1), run(4));
    }
}
