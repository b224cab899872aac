//! Central finite-difference checks of analytic gradients at 64-bit.
//!
//! A case exposes named flat parameter vectors, a scalar loss (usually the
//! op's output dotted with a fixed random cotangent) and its analytic
//! gradient. Each checked coordinate is perturbed by `±step` and the error
//! is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.

use std::fmt;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, BatchNorm, Conv3d, Mode};
use crate::rng;
use crate::tensor::{Fill, Shape5, Tensor5};

pub trait GradCase {
    fn name(&self) -> String;
    fn params(&self) -> Vec<(String, Vec<f64>)>;
    fn loss(&self, params: &[Vec<f64>]) -> Result<f64>;
    fn gradient(&self, params: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per parameter.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-5, tolerance: 1e-4, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub params: Vec<ParamError>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let verdict = if p.max_rel_err < self.tolerance { "PASS" } else { "FAIL" };
            write!(f, "{} {} max_rel_err={:.3e} {verdict}", self.op, p.name, p.max_rel_err)?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn gradcheck(case: &dyn GradCase, opts: &GradcheckOptions) -> Result<GradReport> {
    let named = case.params();
    let mut values: Vec<Vec<f64>> = named.iter().map(|(_, v)| v.clone()).collect();
    let analytic = case.gradient(&values)?;
    if analytic.len() != values.len() {
        return Err(Error::shape("gradient count differs from parameter count"));
    }
    let mut rng = rng::seeded_rng(opts.seed);
    let mut params = Vec::with_capacity(named.len());
    for (p, (name, _)) in named.iter().enumerate() {
        let len = values[p].len();
        if analytic[p].len() != len {
            return Err(Error::shape(format!("gradient of {name} has the wrong length")));
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = values[p][i];
            values[p][i] = orig + opts.step;
            let up = case.loss(&values)?;
            values[p][i] = orig - opts.step;
            let down = case.loss(&values)?;
            values[p][i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[p][i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {} {name}[{i}]",
                    case.name()
                )));
            }
            worst = worst.max(relative_error(a, numeric));
        }
        params.push(ParamError { name: name.clone(), max_rel_err: worst, checked: coords.len() });
    }
    Ok(GradReport { op: case.name(), params, tolerance: opts.tolerance })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn uniform(shape: Shape5, lo: f64, hi: f64, seed: u64) -> Tensor5<f64> {
    Tensor5::new(shape, Fill::Uniform { lo, hi, seed }).expect("valid test shape")
}

fn tensor_like(shape: Shape5, data: &[f64]) -> Result<Tensor5<f64>> {
    Tensor5::from_vec(shape, data.to_vec())
}

/// `<cotangent, conv3d(x)>` over input, weights and bias.
pub struct ConvCase {
    pub conv: Conv3d<f64>,
    pub x: Tensor5<f64>,
    pub cotangent: Tensor5<f64>,
}

impl ConvCase {
    pub fn random(x_shape: Shape5, c_out: usize, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3], seed: u64) -> Result<Self> {
        let mut conv = Conv3d::init(c_out, x_shape.c, kernel, stride, padding, true, rng::mix(seed, 1))?;
        conv.bias = Some((0..c_out).map(|i| rng::hash_unit(seed, i as u64) - 0.5).collect());
        let x = uniform(x_shape, -1.0, 1.0, rng::mix(seed, 2));
        let cotangent = uniform(conv.output_shape(x_shape)?, -1.0, 1.0, rng::mix(seed, 3));
        Ok(ConvCase { conv, x, cotangent })
    }

    fn with(&self, p: &[Vec<f64>]) -> Result<(Conv3d<f64>, Tensor5<f64>)> {
        let mut conv = self.conv.clone();
        conv.weight = tensor_like(conv.weight.shape(), &p[1])?;
        conv.bias = Some(p[2].clone());
        Ok((conv, tensor_like(self.x.shape(), &p[0])?))
    }
}

impl GradCase for ConvCase {
    fn name(&self) -> String {
        "conv3d".into()
    }

    fn params(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("input".into(), self.x.data().to_vec()),
            ("weight".into(), self.conv.weight.data().to_vec()),
            ("bias".into(), self.conv.bias.clone().unwrap_or_default()),
        ]
    }

    fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
        let (conv, x) = self.with(p)?;
        Ok(dot(conv.forward(&x)?.data(), self.cotangent.data()))
    }

    fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (conv, x) = self.with(p)?;
        let (gx, g) = conv.backward(&x, &self.cotangent)?;
        Ok(vec![gx.into_vec(), g.weight.into_vec(), g.bias.unwrap_or_default()])
    }
}

/// Max pooling on an input whose values are all distinct and well separated.
pub struct PoolCase {
    pub x: Tensor5<f64>,
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub cotangent: Tensor5<f64>,
}

impl PoolCase {
    pub fn random(x_shape: Shape5, window: [usize; 3], stride: [usize; 3], seed: u64) -> Result<Self> {
        // A shuffled ramp with spacing 1e-2 keeps every window tie-free.
        let len = x_shape.len();
        let mut order: Vec<usize> = (0..len).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::seeded_rng(seed));
        let data = order.iter().map(|&k| k as f64 * 1e-2).collect();
        let x = Tensor5::from_vec(x_shape, data)?;
        let out = kernels::pool::pool_output_shape(x_shape, window, stride)?;
        Ok(PoolCase { x, window, stride, cotangent: uniform(out, -1.0, 1.0, rng::mix(seed, 1)) })
    }
}

impl GradCase for PoolCase {
    fn name(&self) -> String {
        "maxpool3d".into()
    }

    fn params(&self) -> Vec<(String, Vec<f64>)> {
        vec![("input".into(), self.x.data().to_vec())]
    }

    fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
        let x = tensor_like(self.x.shape(), &p[0])?;
        let (y, _) = kernels::maxpool3d(&x, self.window, self.stride)?;
        Ok(dot(y.data(), self.cotangent.data()))
    }

    fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = tensor_like(self.x.shape(), &p[0])?;
        let (_, idx) = kernels::maxpool3d(&x, self.window, self.stride)?;
        Ok(vec![kernels::maxpool3d_backward(&idx, &self.cotangent)?.into_vec()])
    }
}

/// Train-mode batch normalization over input, gamma and beta.
pub struct BatchNormCase {
    pub bn: BatchNorm<f64>,
    pub x: Tensor5<f64>,
    pub cotangent: Tensor5<f64>,
}

impl BatchNormCase {
    pub fn random(x_shape: Shape5, seed: u64) -> Self {
        let mut bn = BatchNorm::new(x_shape.c);
        bn.gamma = (0..x_shape.c).map(|i| 0.5 + rng::hash_unit(seed, i as u64)).collect();
        bn.beta = (0..x_shape.c).map(|i| rng::hash_unit(seed, 100 + i as u64) - 0.5).collect();
        BatchNormCase {
            bn,
            x: uniform(x_shape, -2.0, 2.0, rng::mix(seed, 1)),
            cotangent: uniform(x_shape, -1.0, 1.0, rng::mix(seed, 2)),
        }
    }

    fn with(&self, p: &[Vec<f64>]) -> Result<(BatchNorm<f64>, Tensor5<f64>)> {
        let mut bn = self.bn.clone();
        bn.gamma = p[1].clone();
        bn.beta = p[2].clone();
        Ok((bn, tensor_like(self.x.shape(), &p[0])?))
    }
}

impl GradCase for BatchNormCase {
    fn name(&self) -> String {
        "batchnorm3d".into()
    }

    fn params(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("input".into(), self.x.data().to_vec()),
            ("gamma".into(), self.bn.gamma.clone()),
            ("beta".into(), self.bn.beta.clone()),
        ]
    }

    fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
        let (mut bn, x) = self.with(p)?;
        let (y, _) = bn.forward(&x, Mode::train(0))?;
        Ok(dot(y.data(), self.cotangent.data()))
    }

    fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (mut bn, x) = self.with(p)?;
        let (_, cache) = bn.forward(&x, Mode::train(0))?;
        let (gx, g) = bn.backward(&cache, &self.cotangent)?;
        Ok(vec![gx.into_vec(), g.gamma, g.beta])
    }
}

pub struct ActivationCase {
    pub kind: Activation,
    pub x: Tensor5<f64>,
    pub cotangent: Tensor5<f64>,
}

impl ActivationCase {
    /// Inputs keep at least 0.1 away from the ReLU kink.
    pub fn random(kind: Activation, x_shape: Shape5, seed: u64) -> Result<Self> {
        let mut x = uniform(x_shape, -2.0, 2.0, rng::mix(seed, 1));
        for v in x.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.2f64.copysign(*v);
            }
        }
        Ok(ActivationCase { kind, x, cotangent: uniform(x_shape, -1.0, 1.0, rng::mix(seed, 2)) })
    }
}

impl GradCase for ActivationCase {
    fn name(&self) -> String {
        match self.kind {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::SoftmaxChannels => "softmax_channels",
            Activation::Identity => "identity",
        }
        .into()
    }

    fn params(&self) -> Vec<(String, Vec<f64>)> {
        vec![("input".into(), self.x.data().to_vec())]
    }

    fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
        let x = tensor_like(self.x.shape(), &p[0])?;
        Ok(dot(kernels::activate(&x, self.kind)?.data(), self.cotangent.data()))
    }

    fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = tensor_like(self.x.shape(), &p[0])?;
        let y = kernels::activate(&x, self.kind)?;
        Ok(vec![kernels::activate_backward(&x, &y, &self.cotangent, self.kind)?.into_vec()])
    }
}

/// Temporal plus bilinear upsampling to a larger target.
pub struct UpsampleCase {
    pub x: Tensor5<f64>,
    pub target: Shape5,
    pub cotangent: Tensor5<f64>,
}

impl UpsampleCase {
    pub fn random(x_shape: Shape5, target: Shape5, seed: u64) -> Self {
        UpsampleCase {
            x: uniform(x_shape, -1.0, 1.0, rng::mix(seed, 1)),
            target,
            cotangent: uniform(target, -1.0, 1.0, rng::mix(seed, 2)),
        }
    }
}

impl GradCase for UpsampleCase {
    fn name(&self) -> String {
        "upsample".into()
    }

    fn params(&self) -> Vec<(String, Vec<f64>)> {
        vec![("input".into(), self.x.data().to_vec())]
    }

    fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
        let x = tensor_like(self.x.shape(), &p[0])?;
        Ok(dot(kernels::upsample_to(&x, self.target)?.data(), self.cotangent.data()))
    }

    fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let _ = p;
        Ok(vec![kernels::upsample_to_backward(&self.cotangent, self.x.shape())?.into_vec()])
    }
}

/// The standard kernel gradient suite: five seeded shapes per op, odd
/// extents included.
pub fn kernel_suite() -> Result<Vec<Box<dyn GradCase>>> {
    let shapes = [
        Shape5::new(1, 2, 3, 4, 4)?,
        Shape5::new(2, 1, 5, 5, 3)?,
        Shape5::new(1, 3, 4, 7, 5)?,
        Shape5::new(2, 2, 3, 3, 6)?,
        Shape5::new(1, 1, 7, 5, 5)?,
    ];
    let mut cases: Vec<Box<dyn GradCase>> = Vec::new();
    for (i, &s) in shapes.iter().enumerate() {
        let seed = 1000 + i as u64;
        let (kernel, stride, pad) = match i % 3 {
            0 => ([3, 3, 3], [1, 1, 1], [1, 1, 1]),
            1 => ([3, 3, 3], [2, 2, 2], [1, 1, 1]),
            _ => ([3, 5, 5], [1, 2, 2], [1, 2, 2]),
        };
        cases.push(Box::new(ConvCase::random(s, 2, kernel, stride, pad, seed)?));
        cases.push(Box::new(PoolCase::random(s, [1, 2, 2], [1, 1, 1], seed)?));
        cases.push(Box::new(BatchNormCase::random(s, seed)));
        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::SoftmaxChannels] {
            cases.push(Box::new(ActivationCase::random(kind, s, seed)?));
        }
        let target = s.with_thw(2 * s.t - 1, 2 * s.h + 1, 2 * s.w);
        cases.push(Box::new(UpsampleCase::random(s, target, seed)));
    }
    Ok(cases)
}
