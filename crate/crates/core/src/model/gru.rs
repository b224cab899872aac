//! Gated recurrent units over `t x d` row-major sequences, and the output
//! projection.
//!
//! Gate order inside the stacked matrices is update `z`, reset `r`,
//! candidate `h`:
//!
//! ```text
//! z = σ(W_z x + U_z h + b_z)
//! r = σ(W_r x + U_r h + b_r)
//! ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ ĥ
//! ```

use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::rng;
use crate::tensor::Real;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, seed: u64) -> Self {
        let data = (0..(rows * cols) as u64)
            .map(|i| T::lit((2.0 * rng::hash_unit(seed, i) - 1.0) * bound))
            .collect();
        Dense { rows, cols, data }
    }

    /// `out += self[rows] * x` over a row range.
    fn matvec_add(&self, row0: usize, x: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[(row0 + r) * self.cols..(row0 + r + 1) * self.cols];
            let mut acc = *o;
            for (&w, &v) in row.iter().zip(x) {
                acc = acc + w * v;
            }
            *o = acc;
        }
    }

    /// `out += self[rows]^T * g`.
    fn matvec_t_add(&self, row0: usize, g: &[T], out: &mut [T]) {
        for (r, &gr) in g.iter().enumerate() {
            let row = &self.data[(row0 + r) * self.cols..(row0 + r + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + w * gr;
            }
        }
    }

    /// `self[rows] += g x^T`.
    fn outer_add(&mut self, row0: usize, g: &[T], x: &[T]) {
        let cols = self.cols;
        for (r, &gr) in g.iter().enumerate() {
            let row = &mut self.data[(row0 + r) * cols..(row0 + r + 1) * cols];
            for (w, &v) in row.iter_mut().zip(x) {
                *w = *w + gr * v;
            }
        }
    }
}

fn check_seq(len: usize, t: usize, d: usize, what: &str) -> Result<()> {
    if t == 0 || len != t * d {
        return Err(Error::shape(format!("{what}: sequence of {len} values is not {t} x {d}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruDirection<T> {
    /// `3H x D`.
    pub w: Dense<T>,
    /// `3H x H`.
    pub u: Dense<T>,
    pub b: Vec<T>,
}

/// Per-step activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruTrace<T> {
    /// `(t + 1) x H`; row 0 is the zero initial state.
    h: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    cand: Vec<T>,
}

impl<T: Real> GruDirection<T> {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        GruDirection {
            w: Dense::uniform(3 * hidden, input, bound, rng::mix(seed, 0)),
            u: Dense::uniform(3 * hidden, hidden, bound, rng::mix(seed, 1)),
            b: vec![T::zero(); 3 * hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols
    }

    pub fn input(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &[T], t: usize) -> Result<(Vec<T>, GruTrace<T>)> {
        let (d, hd) = (self.input(), self.hidden());
        check_seq(x.len(), t, d, "GRU input")?;
        let mut h = vec![T::zero(); (t + 1) * hd];
        let mut z = vec![T::zero(); t * hd];
        let mut r = vec![T::zero(); t * hd];
        let mut cand = vec![T::zero(); t * hd];
        let mut rh = vec![T::zero(); hd];
        for s in 0..t {
            let xs = &x[s * d..(s + 1) * d];
            let (hist, next) = h.split_at_mut((s + 1) * hd);
            let hp = &hist[s * hd..];
            let zs = &mut z[s * hd..(s + 1) * hd];
            zs.copy_from_slice(&self.b[..hd]);
            self.w.matvec_add(0, xs, zs);
            self.u.matvec_add(0, hp, zs);
            zs.iter_mut().for_each(|v| *v = sigmoid(*v));
            let rs = &mut r[s * hd..(s + 1) * hd];
            rs.copy_from_slice(&self.b[hd..2 * hd]);
            self.w.matvec_add(hd, xs, rs);
            self.u.matvec_add(hd, hp, rs);
            rs.iter_mut().for_each(|v| *v = sigmoid(*v));
            for ((o, &a), &b) in rh.iter_mut().zip(rs.iter()).zip(hp) {
                *o = a * b;
            }
            let cs = &mut cand[s * hd..(s + 1) * hd];
            cs.copy_from_slice(&self.b[2 * hd..]);
            self.w.matvec_add(2 * hd, xs, cs);
            self.u.matvec_add(2 * hd, &rh, cs);
            cs.iter_mut().for_each(|v| *v = v.tanh());
            for k in 0..hd {
                next[k] = (T::one() - zs[k]) * hp[k] + zs[k] * cs[k];
            }
        }
        let out = h[hd..].to_vec();
        Ok((out, GruTrace { h, z, r, cand }))
    }

    /// Input gradient and parameter gradients, by full backpropagation
    /// through time.
    pub fn backward(&self, x: &[T], trace: &GruTrace<T>, grad_out: &[T]) -> Result<(Vec<T>, GruDirection<T>)> {
        let (d, hd) = (self.input(), self.hidden());
        let t = trace.z.len() / hd;
        check_seq(x.len(), t, d, "GRU input")?;
        check_seq(grad_out.len(), t, hd, "GRU output gradient")?;
        let mut grads = GruDirection { w: Dense::zeros(3 * hd, d), u: Dense::zeros(3 * hd, hd), b: vec![T::zero(); 3 * hd] };
        let mut gx = vec![T::zero(); t * d];
        let mut dh_next = vec![T::zero(); hd];
        let (mut da_z, mut da_r, mut da_h) = (vec![T::zero(); hd], vec![T::zero(); hd], vec![T::zero(); hd]);
        let (mut rh, mut drh) = (vec![T::zero(); hd], vec![T::zero(); hd]);
        for s in (0..t).rev() {
            let xs = &x[s * d..(s + 1) * d];
            let hp = &trace.h[s * hd..(s + 1) * hd];
            let zs = &trace.z[s * hd..(s + 1) * hd];
            let rs = &trace.r[s * hd..(s + 1) * hd];
            let cs = &trace.cand[s * hd..(s + 1) * hd];
            let mut dh_prev = vec![T::zero(); hd];
            for k in 0..hd {
                let dh = grad_out[s * hd + k] + dh_next[k];
                let dz = dh * (cs[k] - hp[k]);
                let dc = dh * zs[k];
                dh_prev[k] = dh * (T::one() - zs[k]);
                da_z[k] = dz * zs[k] * (T::one() - zs[k]);
                da_h[k] = dc * (T::one() - cs[k] * cs[k]);
                rh[k] = rs[k] * hp[k];
            }
            drh.fill(T::zero());
            self.u.matvec_t_add(2 * hd, &da_h, &mut drh);
            for k in 0..hd {
                dh_prev[k] = dh_prev[k] + drh[k] * rs[k];
                let dr = drh[k] * hp[k];
                da_r[k] = dr * rs[k] * (T::one() - rs[k]);
            }
            self.u.matvec_t_add(0, &da_z, &mut dh_prev);
            self.u.matvec_t_add(hd, &da_r, &mut dh_prev);

            let gxs = &mut gx[s * d..(s + 1) * d];
            for (row0, da) in [(0, &da_z), (hd, &da_r), (2 * hd, &da_h)] {
                self.w.matvec_t_add(row0, da, gxs);
                grads.w.outer_add(row0, da, xs);
                for (b, &g) in grads.b[row0..row0 + hd].iter_mut().zip(da.iter()) {
                    *b = *b + g;
                }
            }
            grads.u.outer_add(0, &da_z, hp);
            grads.u.outer_add(hd, &da_r, hp);
            grads.u.outer_add(2 * hd, &da_h, &rh);
            dh_next = dh_prev;
        }
        Ok((gx, grads))
    }
}

impl<T: Real> Parameters<T> for GruDirection<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef { name: join(prefix, "w"), shape: vec![self.w.rows, self.w.cols], data: &self.w.data });
        out.push(ParamRef { name: join(prefix, "u"), shape: vec![self.u.rows, self.u.cols], data: &self.u.data });
        out.push(ParamRef { name: join(prefix, "b"), shape: vec![self.b.len()], data: &self.b });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut { name: join(prefix, "w"), shape: vec![self.w.rows, self.w.cols], data: &mut self.w.data });
        out.push(ParamMut { name: join(prefix, "u"), shape: vec![self.u.rows, self.u.cols], data: &mut self.u.data });
        let n = self.b.len();
        out.push(ParamMut { name: join(prefix, "b"), shape: vec![n], data: &mut self.b });
    }
}

/// Forward and reversed-time GRUs with outputs concatenated per step.
#[derive(Clone, Debug, PartialEq)]
pub struct BiGru<T> {
    pub fwd: GruDirection<T>,
    pub bwd: GruDirection<T>,
}

#[derive(Clone, Debug)]
pub struct BiGruTrace<T> {
    fwd: GruTrace<T>,
    bwd: GruTrace<T>,
    reversed: Vec<T>,
}

fn reverse_rows<T: Copy>(x: &[T], width: usize) -> Vec<T> {
    x.chunks(width).rev().flatten().copied().collect()
}

impl<T: Real> BiGru<T> {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Self {
        BiGru { fwd: GruDirection::init(input, hidden, rng::mix(seed, 0)), bwd: GruDirection::init(input, hidden, rng::mix(seed, 1)) }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden()
    }

    /// `t x D` in, `t x 2H` out.
    pub fn forward(&self, x: &[T], t: usize) -> Result<(Vec<T>, BiGruTrace<T>)> {
        let (d, hd) = (self.fwd.input(), self.fwd.hidden());
        check_seq(x.len(), t, d, "BiGRU input")?;
        let (yf, fwd) = self.fwd.forward(x, t)?;
        let reversed = reverse_rows(x, d);
        let (yb, bwd) = self.bwd.forward(&reversed, t)?;
        let mut out = Vec::with_capacity(t * 2 * hd);
        for s in 0..t {
            out.extend_from_slice(&yf[s * hd..(s + 1) * hd]);
            out.extend_from_slice(&yb[(t - 1 - s) * hd..(t - s) * hd]);
        }
        Ok((out, BiGruTrace { fwd, bwd, reversed }))
    }

    pub fn backward(&self, x: &[T], trace: &BiGruTrace<T>, grad_out: &[T]) -> Result<(Vec<T>, BiGru<T>)> {
        let (d, hd) = (self.fwd.input(), self.fwd.hidden());
        let t = x.len() / d.max(1);
        check_seq(grad_out.len(), t, 2 * hd, "BiGRU output gradient")?;
        let mut gf = Vec::with_capacity(t * hd);
        let mut gb = vec![T::zero(); t * hd];
        for s in 0..t {
            let row = &grad_out[s * 2 * hd..(s + 1) * 2 * hd];
            gf.extend_from_slice(&row[..hd]);
            gb[(t - 1 - s) * hd..(t - s) * hd].copy_from_slice(&row[hd..]);
        }
        let (mut gx, fwd) = self.fwd.backward(x, &trace.fwd, &gf)?;
        let (gxr, bwd) = self.bwd.backward(&trace.reversed, &trace.bwd, &gb)?;
        for (a, &b) in gx.iter_mut().zip(reverse_rows(&gxr, d).iter()) {
            *a = *a + b;
        }
        Ok((gx, BiGru { fwd, bwd }))
    }
}

impl<T: Real> Parameters<T> for BiGru<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.fwd.params(&join(prefix, "fwd"), out);
        self.bwd.params(&join(prefix, "bwd"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.fwd.params_mut(&join(prefix, "fwd"), out);
        self.bwd.params_mut(&join(prefix, "bwd"), out);
    }
}

/// Per-step affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Dense<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn init(input: usize, output: usize, seed: u64) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Linear { weight: Dense::uniform(output, input, bound, seed), bias: vec![T::zero(); output] }
    }

    pub fn forward(&self, x: &[T], t: usize) -> Result<Vec<T>> {
        let (d, c) = (self.weight.cols, self.weight.rows);
        check_seq(x.len(), t, d, "linear input")?;
        let mut out = Vec::with_capacity(t * c);
        for s in 0..t {
            let mut row = self.bias.clone();
            self.weight.matvec_add(0, &x[s * d..(s + 1) * d], &mut row);
            out.extend(row);
        }
        Ok(out)
    }

    pub fn backward(&self, x: &[T], grad_out: &[T]) -> Result<(Vec<T>, Linear<T>)> {
        let (d, c) = (self.weight.cols, self.weight.rows);
        let t = x.len() / d.max(1);
        check_seq(grad_out.len(), t, c, "linear output gradient")?;
        let mut grads = Linear { weight: Dense::zeros(c, d), bias: vec![T::zero(); c] };
        let mut gx = vec![T::zero(); t * d];
        for s in 0..t {
            let g = &grad_out[s * c..(s + 1) * c];
            self.weight.matvec_t_add(0, g, &mut gx[s * d..(s + 1) * d]);
            grads.weight.outer_add(0, g, &x[s * d..(s + 1) * d]);
            for (b, &v) in grads.bias.iter_mut().zip(g) {
                *b = *b + v;
            }
        }
        Ok((gx, grads))
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let shape = vec![self.weight.rows, self.weight.cols];
        out.push(ParamRef { name: join(prefix, "weight"), shape, data: &self.weight.data });
        out.push(ParamRef { name: join(prefix, "bias"), shape: vec![self.bias.len()], data: &self.bias });
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let shape = vec![self.weight.rows, self.weight.cols];
        out.push(ParamMut { name: join(prefix, "weight"), shape, data: &mut self.weight.data });
        let n = self.bias.len();
        out.push(ParamMut { name: join(prefix, "bias"), shape: vec![n], data: &mut self.bias });
    }
}

pub mod gradcase {
    //! Finite-difference check of a bidirectional GRU layer.

    use super::*;
    use crate::kernels::gradcheck::{dot, GradCase};

    pub struct BiGruCase {
        pub gru: BiGru<f64>,
        pub x: Vec<f64>,
        pub t: usize,
        pub cotangent: Vec<f64>,
    }

    impl BiGruCase {
        pub fn random(t: usize, input: usize, hidden: usize, seed: u64) -> Self {
            let mut gru = BiGru::init(input, hidden, rng::mix(seed, 0));
            for p in gru.param_list_mut() {
                if p.name.ends_with('b') {
                    for (i, v) in p.data.iter_mut().enumerate() {
                        *v = rng::hash_unit(rng::substream(seed, &p.name), i as u64) - 0.5;
                    }
                }
            }
            let sample = |n: usize, s: u64| (0..n as u64).map(|i| 2.0 * rng::hash_unit(s, i) - 1.0).collect::<Vec<_>>();
            BiGruCase { x: sample(t * input, rng::mix(seed, 1)), cotangent: sample(t * 2 * hidden, rng::mix(seed, 2)), t, gru }
        }

        fn with(&self, p: &[Vec<f64>]) -> BiGru<f64> {
            let mut g = self.gru.clone();
            for (dst, src) in g.param_list_mut().into_iter().zip(&p[1..]) {
                dst.data.copy_from_slice(src);
            }
            g
        }
    }

    impl GradCase for BiGruCase {
        fn name(&self) -> String {
            "bigru".into()
        }

        fn params(&self) -> Vec<(String, Vec<f64>)> {
            let mut out = vec![("input".to_string(), self.x.clone())];
            out.extend(self.gru.param_list().into_iter().map(|p| (p.name, p.data.to_vec())));
            out
        }

        fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
            let (y, _) = self.with(p).forward(&p[0], self.t)?;
            Ok(dot(&y, &self.cotangent))
        }

        fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            let g = self.with(p);
            let (_, trace) = g.forward(&p[0], self.t)?;
            let (gx, grads) = g.backward(&p[0], &trace, &self.cotangent)?;
            let mut out = vec![gx];
            out.extend(grads.param_list().into_iter().map(|p| p.data.to_vec()));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcase::BiGruCase;
    use super::*;
    use crate::kernels::gradcheck::{gradcheck, GradcheckOptions};

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Straight-line scalar recurrence for hidden size 2, input size 2.
    fn scalar_trace(g: &GruDirection<f64>, x: &[f64], t: usize) -> Vec<f64> {
        let w = |r: usize, c: usize| g.w.data[r * 2 + c];
        let u = |r: usize, c: usize| g.u.data[r * 2 + c];
        let (mut h0, mut h1) = (0.0, 0.0);
        let mut out = Vec::new();
        for s in 0..t {
            let (x0, x1) = (x[2 * s], x[2 * s + 1]);
            let z0 = sig(w(0, 0) * x0 + w(0, 1) * x1 + u(0, 0) * h0 + u(0, 1) * h1 + g.b[0]);
            let z1 = sig(w(1, 0) * x0 + w(1, 1) * x1 + u(1, 0) * h0 + u(1, 1) * h1 + g.b[1]);
            let r0 = sig(w(2, 0) * x0 + w(2, 1) * x1 + u(2, 0) * h0 + u(2, 1) * h1 + g.b[2]);
            let r1 = sig(w(3, 0) * x0 + w(3, 1) * x1 + u(3, 0) * h0 + u(3, 1) * h1 + g.b[3]);
            let c0 = (w(4, 0) * x0 + w(4, 1) * x1 + u(4, 0) * r0 * h0 + u(4, 1) * r1 * h1 + g.b[4]).tanh();
            let c1 = (w(5, 0) * x0 + w(5, 1) * x1 + u(5, 0) * r0 * h0 + u(5, 1) * r1 * h1 + g.b[5]).tanh();
            h0 = (1.0 - z0) * h0 + z0 * c0;
            h1 = (1.0 - z1) * h1 + z1 * c1;
            out.extend([h0, h1]);
        }
        out
    }

    #[test]
    fn matches_scalar_trace() {
        let case = BiGruCase::random(3, 2, 2, 17);
        let (y, _) = case.gru.forward(&case.x, 3).unwrap();
        let fwd = scalar_trace(&case.gru.fwd, &case.x, 3);
        let rev: Vec<f64> = case.x.chunks(2).rev().flatten().copied().collect();
        let bwd = scalar_trace(&case.gru.bwd, &rev, 3);
        for s in 0..3 {
            for k in 0..2 {
                assert!((y[s * 4 + k] - fwd[s * 2 + k]).abs() < 1e-12);
                assert!((y[s * 4 + 2 + k] - bwd[(2 - s) * 2 + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_stay_at_rest() {
        let mut g = BiGru::<f64>::init(3, 4, 1);
        g.zero_params();
        let (y, _) = g.forward(&[0.5; 15], 5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sees_same_input() {
        let mut g = BiGru::<f64>::init(3, 2, 4);
        g.bwd = g.fwd.clone();
        let (y, _) = g.forward(&[0.1, -0.2, 0.3], 1).unwrap();
        assert_eq!(y[..2], y[2..]);
    }

    #[test]
    fn shape_errors() {
        let g = BiGru::<f64>::init(3, 2, 4);
        assert!(matches!(g.forward(&[0.0; 7], 2), Err(Error::Shape(_))));
        let lin = Linear::<f64>::init(4, 3, 0);
        assert!(lin.forward(&[0.0; 5], 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let case = BiGruCase::random(5, 3, 4, 2);
        let report = gradcheck(&case, &GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
    }
}
