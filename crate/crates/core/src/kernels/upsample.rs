//! Size reconciliation for the top-down pathway: bilinear resampling inside
//! each frame and last-frame-padded nearest duplication along time.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape5, Tensor5};

/// Align-corners sampling taps for one axis: `(lower, upper, fraction)`.
fn axis_taps<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|d| {
            if src == 1 || dst == 1 {
                return (0, 0, T::zero());
            }
            // Exact rational position d*(src-1)/(dst-1).
            let num = d * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let frac = T::lit((num % den) as f64) / T::lit(den as f64);
            (lo, (lo + 1).min(src - 1), frac)
        })
        .collect()
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    // Clamping removes rounding overshoot so the result stays within [a, b].
    let v = a + f * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

pub fn upsample_bilinear_spatial<T: Real>(x: &Tensor5<T>, h_out: usize, w_out: usize) -> Result<Tensor5<T>> {
    if h_out == 0 || w_out == 0 {
        return Err(Error::shape("bilinear target extents must be >= 1"));
    }
    let xs = x.shape();
    if xs.h == h_out && xs.w == w_out {
        return Ok(x.clone());
    }
    let rows = axis_taps::<T>(xs.h, h_out);
    let cols = axis_taps::<T>(xs.w, w_out);
    let os = Shape5 { h: h_out, w: w_out, ..xs };
    let mut out = Vec::with_capacity(os.len());
    for frame in x.data().chunks_exact(xs.frame()) {
        for &(y0, y1, fy) in &rows {
            let (r0, r1) = (&frame[y0 * xs.w..][..xs.w], &frame[y1 * xs.w..][..xs.w]);
            for &(x0, x1, fx) in &cols {
                let top = lerp(r0[x0], r0[x1], fx);
                let bot = lerp(r1[x0], r1[x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    Tensor5::from_vec(os, out)
}

/// Adjoint of [`upsample_bilinear_spatial`].
pub fn upsample_bilinear_spatial_backward<T: Real>(
    grad_out: &Tensor5<T>,
    input_shape: Shape5,
) -> Result<Tensor5<T>> {
    let gs = grad_out.shape();
    if gs.n != input_shape.n || gs.c != input_shape.c || gs.t != input_shape.t {
        return Err(Error::shape(format!(
            "bilinear backward: grad {gs} incompatible with input {input_shape}"
        )));
    }
    if gs == input_shape {
        return Ok(grad_out.clone());
    }
    let rows = axis_taps::<T>(input_shape.h, gs.h);
    let cols = axis_taps::<T>(input_shape.w, gs.w);
    let one = T::one();
    let mut grad_x = Tensor5::zeros(input_shape);
    let iw = input_shape.w;
    for (gframe, xframe) in grad_out
        .data()
        .chunks_exact(gs.frame())
        .zip(grad_x.data_mut().chunks_exact_mut(input_shape.frame()))
    {
        for (oh, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ow, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = gframe[oh * gs.w + ow];
                let top = g * (one - fy);
                let bot = g * fy;
                xframe[y0 * iw + x0] = xframe[y0 * iw + x0] + top * (one - fx);
                xframe[y0 * iw + x1] = xframe[y0 * iw + x1] + top * fx;
                xframe[y1 * iw + x0] = xframe[y1 * iw + x0] + bot * (one - fx);
                xframe[y1 * iw + x1] = xframe[y1 * iw + x1] + bot * fx;
            }
        }
    }
    Ok(grad_x)
}

/// Source frame feeding output frame `j` when upsampling `t_src -> t_out`.
///
/// Equal lengths map straight through. Otherwise the source is padded with
/// copies of its last frame until twice its length covers `t_out`, every
/// frame is duplicated, and the result is cropped to `t_out`.
pub fn temporal_source_frame(j: usize, t_src: usize, t_out: usize) -> usize {
    if t_src == t_out {
        j
    } else {
        (j / 2).min(t_src - 1)
    }
}

pub fn upsample_temporal<T: Real>(x: &Tensor5<T>, t_out: usize) -> Result<Tensor5<T>> {
    let xs = x.shape();
    if t_out < xs.t {
        return Err(Error::shape(format!(
            "temporal upsampling cannot shrink {} frames to {t_out}",
            xs.t
        )));
    }
    if t_out == xs.t {
        return Ok(x.clone());
    }
    let padded_len = xs.t.max(t_out.div_ceil(2));
    let padded = x.pad_time_replicate(padded_len - xs.t);
    let frame = xs.frame();
    let mut data = Vec::with_capacity(xs.n * xs.c * 2 * padded_len * frame);
    for vol in padded.data().chunks_exact(padded_len * frame) {
        for f in vol.chunks_exact(frame) {
            data.extend_from_slice(f);
            data.extend_from_slice(f);
        }
    }
    Tensor5::from_vec(xs.with_t(2 * padded_len), data)?.crop_time(t_out)
}

/// Adjoint of [`upsample_temporal`].
pub fn upsample_temporal_backward<T: Real>(grad_out: &Tensor5<T>, t_src: usize) -> Result<Tensor5<T>> {
    let gs = grad_out.shape();
    if t_src == 0 || gs.t < t_src {
        return Err(Error::shape(format!(
            "temporal backward: {} output frames cannot come from {t_src}",
            gs.t
        )));
    }
    if gs.t == t_src {
        return Ok(grad_out.clone());
    }
    let xs = gs.with_t(t_src);
    let frame = gs.frame();
    let mut grad_x = Tensor5::zeros(xs);
    for (gvol, xvol) in grad_out
        .data()
        .chunks_exact(gs.volume())
        .zip(grad_x.data_mut().chunks_exact_mut(xs.volume()))
    {
        for j in 0..gs.t {
            let s = temporal_source_frame(j, t_src, gs.t);
            for (a, &g) in xvol[s * frame..(s + 1) * frame].iter_mut().zip(&gvol[j * frame..(j + 1) * frame]) {
                *a = *a + g;
            }
        }
    }
    Ok(grad_x)
}

/// Temporal then spatial upsampling to `target`'s `(t, h, w)`.
pub fn upsample_to<T: Real>(x: &Tensor5<T>, target: Shape5) -> Result<Tensor5<T>> {
    let xt = upsample_temporal(x, target.t)?;
    upsample_bilinear_spatial(&xt, target.h, target.w)
}

pub fn upsample_to_backward<T: Real>(grad_out: &Tensor5<T>, input_shape: Shape5) -> Result<Tensor5<T>> {
    let mid = grad_out.shape().with_thw(grad_out.shape().t, input_shape.h, input_shape.w);
    let g = upsample_bilinear_spatial_backward(grad_out, mid)?;
    upsample_temporal_backward(&g, input_shape.t)
}
