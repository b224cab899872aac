//! LipNet-style sentence model: three spatiotemporal convolution blocks with
//! spatial pooling, two bidirectional GRU layers and a per-frame softmax,
//! with optional FPA modules after the input and after blocks 1 and 2.

pub mod adam;
pub mod checkpoint;
pub mod gru;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::ctc::log_softmax_rows;
use crate::error::{Error, Result};
use crate::fpa::{FpaCache, FpaConfig, FpaModule};
use crate::kernels::{self, Mode, PoolIndices};
use crate::layers::{ConvUnit, ConvUnitCache};
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::rng;
use crate::tensor::{Real, Shape5, Tensor5};

pub use adam::{Adam, AdamConfig};
pub use gru::{BiGru, Dense, GruDirection, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FpaPosition {
    Input,
    F1,
    F2,
}

impl FpaPosition {
    pub const ALL: [FpaPosition; 3] = [FpaPosition::Input, FpaPosition::F1, FpaPosition::F2];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FpaPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FpaPosition::Input => "input",
            FpaPosition::F1 => "f1",
            FpaPosition::F2 => "f2",
        })
    }
}

impl FromStr for FpaPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "input" => Ok(FpaPosition::Input),
            "f1" => Ok(FpaPosition::F1),
            "f2" => Ok(FpaPosition::F2),
            other => Err(Error::argument(format!("unknown FPA position {other:?} (expected input, f1 or f2)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipNetConfig {
    /// Channels, frames, height, width of one clip.
    pub input: [usize; 4],
    pub widths: [usize; 3],
    pub kernel: [usize; 3],
    pub block1_stride: [usize; 3],
    pub padding: [usize; 3],
    pub pool: [usize; 3],
    pub hidden: usize,
    pub num_classes: usize,
    pub dropout: Option<f64>,
    /// Indexed by [`FpaPosition::index`].
    pub fpa: [Option<FpaConfig>; 3],
}

impl Default for LipNetConfig {
    fn default() -> Self {
        LipNetConfig {
            input: [1, 24, 32, 32],
            widths: [8, 16, 24],
            kernel: [3, 5, 5],
            block1_stride: [1, 2, 2],
            padding: [1, 2, 2],
            pool: [1, 2, 2],
            hidden: 64,
            num_classes: 28,
            dropout: Some(kernels::dropout::DEFAULT_RATE),
            fpa: [None, None, None],
        }
    }
}

impl LipNetConfig {
    pub fn with_fpa(mut self, position: FpaPosition, config: FpaConfig) -> Self {
        self.fpa[position.index()] = Some(config);
        self
    }

    pub fn block_stride(&self, block: usize) -> [usize; 3] {
        if block == 0 {
            self.block1_stride
        } else {
            [1, 1, 1]
        }
    }

    pub fn input_shape(&self, n: usize) -> Result<Shape5> {
        let [c, t, h, w] = self.input;
        Shape5::new(n, c, t, h, w)
    }

    /// Shapes after the input and after each block, for a batch of `n`.
    pub fn stage_shapes(&self, n: usize) -> Result<Vec<Shape5>> {
        let mut shapes = vec![self.input_shape(n)?];
        for b in 0..3 {
            let s = *shapes.last().expect("non-empty");
            let stride = self.block_stride(b);
            let extent = |d: usize, axis: usize| {
                kernels::conv_out_extent(d, self.kernel[axis], stride[axis], self.padding[axis])
            };
            let conv = [extent(s.t, 0), extent(s.h, 1), extent(s.w, 2)];
            let pooled: Vec<usize> = (0..3)
                .map(|a| match conv[a] {
                    Some(d) if d >= self.pool[a] => Ok((d - self.pool[a]) / self.pool[a] + 1),
                    _ => Err(Error::shape(format!("input {s} does not survive block {}", b + 1))),
                })
                .collect::<Result<_>>()?;
            if pooled[0] != s.t {
                return Err(Error::shape(format!(
                    "block {} changes the frame count from {} to {}",
                    b + 1,
                    s.t,
                    pooled[0]
                )));
            }
            shapes.push(Shape5::new(n, self.widths[b], pooled[0], pooled[1], pooled[2])?);
        }
        Ok(shapes)
    }

    /// Per-frame feature size fed to the first GRU.
    pub fn feature_dim(&self) -> Result<usize> {
        let s = self.stage_shapes(1)?[3];
        Ok(s.c * s.h * s.w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::argument("need at least 2 output classes"));
        }
        if self.hidden == 0 || self.widths.contains(&0) {
            return Err(Error::argument("layer widths must be positive"));
        }
        if let Some(rate) = self.dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::argument(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        for cfg in self.fpa.iter().flatten() {
            cfg.validate()?;
        }
        self.stage_shapes(1).map(|_| ())
    }

    /// Channel count at an FPA position.
    pub fn fpa_channels(&self, position: FpaPosition) -> usize {
        match position {
            FpaPosition::Input => self.input[0],
            FpaPosition::F1 => self.widths[0],
            FpaPosition::F2 => self.widths[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipNet<T> {
    pub config: LipNetConfig,
    pub fpa: [Option<FpaModule<T>>; 3],
    pub blocks: Vec<ConvUnit<T>>,
    pub gru: [BiGru<T>; 2],
    pub head: Linear<T>,
}

#[derive(Clone, Debug)]
struct SampleCache<T> {
    seq0: Vec<T>,
    trace1: gru::BiGruTrace<T>,
    seq1: Vec<T>,
    trace2: gru::BiGruTrace<T>,
    seq2: Vec<T>,
    log_probs: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct LipNetCache<T> {
    fpa: [Option<FpaCache<T>>; 3],
    blocks: Vec<(ConvUnitCache<T>, Tensor5<T>, PoolIndices)>,
    features: Shape5,
    samples: Vec<SampleCache<T>>,
}

impl<T> LipNetCache<T> {
    /// Attention mask produced at a position, if an FPA sits there.
    pub fn mask(&self, position: FpaPosition) -> Option<&Tensor5<T>> {
        self.fpa[position.index()].as_ref().map(FpaCache::mask)
    }
}

/// Per-sample `t x classes` log-probabilities.
pub type LogProbs<T> = Vec<Vec<T>>;

fn flatten_frames<T: Real>(x: &Tensor5<T>, n: usize) -> Vec<T> {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut seq = Vec::with_capacity(s.t * s.c * plane);
    for t in 0..s.t {
        for c in 0..s.c {
            let start = s.index(n, c, t, 0, 0);
            seq.extend_from_slice(&x.data()[start..start + plane]);
        }
    }
    seq
}

fn unflatten_frames<T: Real>(seqs: &[Vec<T>], s: Shape5) -> Result<Tensor5<T>> {
    let plane = s.h * s.w;
    let mut out = Tensor5::zeros(s);
    for (n, seq) in seqs.iter().enumerate() {
        for t in 0..s.t {
            for c in 0..s.c {
                let start = s.index(n, c, t, 0, 0);
                let src = &seq[(t * s.c + c) * plane..(t * s.c + c + 1) * plane];
                out.data_mut()[start..start + plane].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

impl<T: Real> LipNet<T> {
    pub fn build(config: LipNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut fpa: [Option<FpaModule<T>>; 3] = [None, None, None];
        for pos in FpaPosition::ALL {
            if let Some(cfg) = &config.fpa[pos.index()] {
                fpa[pos.index()] = Some(FpaModule::build(
                    cfg.clone(),
                    config.fpa_channels(pos),
                    rng::mix(rng::substream(seed, "fpa"), pos.index() as u64),
                )?);
            }
        }
        let mut c_in = config.input[0];
        let mut blocks = Vec::with_capacity(3);
        for (b, &c_out) in config.widths.iter().enumerate() {
            blocks.push(ConvUnit::init(
                c_in,
                c_out,
                config.kernel,
                config.block_stride(b),
                config.padding,
                true,
                true,
                config.dropout,
                rng::mix(rng::substream(seed, "block"), b as u64),
            )?);
            c_in = c_out;
        }
        let feat = config.feature_dim()?;
        let gru = [
            BiGru::init(feat, config.hidden, rng::mix(rng::substream(seed, "gru"), 0)),
            BiGru::init(2 * config.hidden, config.hidden, rng::mix(rng::substream(seed, "gru"), 1)),
        ];
        let head = Linear::init(2 * config.hidden, config.num_classes, rng::substream(seed, "head"));
        Ok(LipNet { config, fpa, blocks, gru, head })
    }

    fn apply_fpa(
        &mut self,
        pos: FpaPosition,
        x: Tensor5<T>,
        mode: Mode,
        caches: &mut [Option<FpaCache<T>>; 3],
    ) -> Result<Tensor5<T>> {
        match &mut self.fpa[pos.index()] {
            Some(m) => {
                let (y, cache) = m
                    .forward(&x, mode.derive(100 + pos.index() as u64))
                    .map_err(|e| position_error(pos, e))?;
                caches[pos.index()] = Some(cache);
                Ok(y)
            }
            None => Ok(x),
        }
    }

    /// Runs a batch of clips and returns per-sample log-probabilities.
    pub fn forward(&mut self, video: &Tensor5<T>, mode: Mode) -> Result<(LogProbs<T>, LipNetCache<T>)> {
        let vs = video.shape();
        let want = self.config.input_shape(vs.n)?;
        if vs != want {
            return Err(Error::shape(format!("model expects clips of shape {want}, got {vs}")));
        }
        let mut fpa_caches: [Option<FpaCache<T>>; 3] = [None, None, None];
        let mut x = self.apply_fpa(FpaPosition::Input, video.clone(), mode, &mut fpa_caches)?;
        let mut blocks = Vec::with_capacity(3);
        let pool = self.config.pool;
        for b in 0..3 {
            let (y, unit_cache) = self.blocks[b].forward(&x, mode.derive(b as u64))?;
            let (pooled, idx) = kernels::maxpool3d(&y, pool, pool)?;
            blocks.push((unit_cache, y, idx));
            x = match b {
                0 => self.apply_fpa(FpaPosition::F1, pooled, mode, &mut fpa_caches)?,
                1 => self.apply_fpa(FpaPosition::F2, pooled, mode, &mut fpa_caches)?,
                _ => pooled,
            };
        }
        let features = x.shape();
        let t = features.t;
        let (gru, head, classes) = (&self.gru, &self.head, self.config.num_classes);
        let samples = (0..features.n)
            .into_par_iter()
            .map(|n| -> Result<SampleCache<T>> {
                let seq0 = flatten_frames(&x, n);
                let (seq1, trace1) = gru[0].forward(&seq0, t)?;
                let (seq2, trace2) = gru[1].forward(&seq1, t)?;
                let logits = head.forward(&seq2, t)?;
                let log_probs = log_softmax_rows(&logits, classes);
                Ok(SampleCache { seq0, trace1, seq1, trace2, seq2, log_probs })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = samples.iter().map(|s| s.log_probs.clone()).collect();
        Ok((out, LipNetCache { fpa: fpa_caches, blocks, features, samples }))
    }

    /// Backward pass from per-sample gradients with respect to the logits
    /// (the pre-softmax scores). Returns the clip gradient and a model
    /// holding the parameter gradients.
    pub fn backward(&self, cache: &LipNetCache<T>, grad_logits: &[Vec<T>]) -> Result<(Tensor5<T>, LipNet<T>)> {
        if grad_logits.len() != cache.samples.len() {
            return Err(Error::shape(format!(
                "{} logit gradients for a batch of {}",
                grad_logits.len(),
                cache.samples.len()
            )));
        }
        let per_sample = cache
            .samples
            .par_iter()
            .zip(grad_logits.par_iter())
            .map(|(s, g)| -> Result<(Vec<T>, [BiGru<T>; 2], Linear<T>)> {
                let (g2, head) = self.head.backward(&s.seq2, g)?;
                let (g1, gru2) = self.gru[1].backward(&s.seq1, &s.trace2, &g2)?;
                let (g0, gru1) = self.gru[0].backward(&s.seq0, &s.trace1, &g1)?;
                Ok((g0, [gru1, gru2], head))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = self.clone();
        grads.zero_params();
        let mut seq_grads = Vec::with_capacity(per_sample.len());
        for (g0, [g1, g2], head) in per_sample {
            grads.gru[0].accumulate(&g1)?;
            grads.gru[1].accumulate(&g2)?;
            grads.head.accumulate(&head)?;
            seq_grads.push(g0);
        }
        let mut g = unflatten_frames(&seq_grads, cache.features)?;
        for b in (0..3).rev() {
            let pos = match b {
                1 => Some(FpaPosition::F2),
                0 => Some(FpaPosition::F1),
                _ => None,
            };
            if let Some(pos) = pos {
                g = self.fpa_backward(pos, cache, g, &mut grads)?;
            }
            let (unit_cache, _, idx) = &cache.blocks[b];
            let gy = kernels::maxpool3d_backward(idx, &g)?;
            let (gx, unit_grads) = self.blocks[b].backward(unit_cache, &gy)?;
            grads.blocks[b] = unit_grads;
            g = gx;
        }
        let g = self.fpa_backward(FpaPosition::Input, cache, g, &mut grads)?;
        Ok((g, grads))
    }

    fn fpa_backward(
        &self,
        pos: FpaPosition,
        cache: &LipNetCache<T>,
        g: Tensor5<T>,
        grads: &mut LipNet<T>,
    ) -> Result<Tensor5<T>> {
        match (&self.fpa[pos.index()], &cache.fpa[pos.index()]) {
            (Some(m), Some(c)) => {
                let (gx, mg) = m.backward(c, &g)?;
                grads.fpa[pos.index()] = Some(mg);
                Ok(gx)
            }
            (None, None) => Ok(g),
            _ => Err(Error::Corruption(format!("cache and model disagree about the FPA at {pos}"))),
        }
    }
}

fn position_error(pos: FpaPosition, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::shape(format!("FPA at {pos}: {msg}")),
        other => other,
    }
}

impl<T: Real> Parameters<T> for LipNet<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for pos in FpaPosition::ALL {
            if let Some(m) = &self.fpa[pos.index()] {
                m.params(&join(prefix, &format!("fpa.{pos}")), out);
            }
        }
        for (b, unit) in self.blocks.iter().enumerate() {
            unit.params(&join(prefix, &format!("block{}", b + 1)), out);
        }
        for (i, g) in self.gru.iter().enumerate() {
            g.params(&join(prefix, &format!("gru{}", i + 1)), out);
        }
        self.head.params(&join(prefix, "head"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (pos, slot) in FpaPosition::ALL.into_iter().zip(self.fpa.iter_mut()) {
            if let Some(m) = slot {
                m.params_mut(&join(prefix, &format!("fpa.{pos}")), out);
            }
        }
        for (b, unit) in self.blocks.iter_mut().enumerate() {
            unit.params_mut(&join(prefix, &format!("block{}", b + 1)), out);
        }
        for (i, g) in self.gru.iter_mut().enumerate() {
            g.params_mut(&join(prefix, &format!("gru{}", i + 1)), out);
        }
        self.head.params_mut(&join(prefix, "head"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for pos in FpaPosition::ALL {
            if let Some(m) = &self.fpa[pos.index()] {
                m.buffers(&join(prefix, &format!("fpa.{pos}")), out);
            }
        }
        for (b, unit) in self.blocks.iter().enumerate() {
            unit.buffers(&join(prefix, &format!("block{}", b + 1)), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (pos, slot) in FpaPosition::ALL.into_iter().zip(self.fpa.iter_mut()) {
            if let Some(m) = slot {
                m.buffers_mut(&join(prefix, &format!("fpa.{pos}")), out);
            }
        }
        for (b, unit) in self.blocks.iter_mut().enumerate() {
            unit.buffers_mut(&join(prefix, &format!("block{}", b + 1)), out);
        }
    }
}

pub mod gradcase {
    //! Finite-difference check of the whole model under the CTC loss.

    use super::*;
    use crate::ctc::{ctc_loss_grad, LabelSeq};
    use crate::fpa::FpaVariant;
    use crate::kernels::gradcheck::{uniform, GradCase};

    pub struct LipNetCase {
        pub model: LipNet<f64>,
        pub video: Tensor5<f64>,
        pub labels: Vec<LabelSeq>,
        pub mode: Mode,
    }

    /// Small enough for an exhaustive check: 6 frames of 12x12, hidden
    /// size 4, 5 classes, no stride in block 1 so three poolings fit.
    pub fn tiny_config(fpa: &[(FpaPosition, FpaVariant)]) -> LipNetConfig {
        let mut cfg = LipNetConfig {
            input: [1, 6, 12, 12],
            widths: [2, 3, 3],
            kernel: [3, 3, 3],
            block1_stride: [1, 1, 1],
            padding: [1, 1, 1],
            hidden: 4,
            num_classes: 5,
            ..LipNetConfig::default()
        };
        for &(pos, variant) in fpa {
            cfg = cfg.with_fpa(pos, FpaConfig::with_variant(variant));
        }
        cfg
    }

    impl LipNetCase {
        pub fn random(config: LipNetConfig, batch: usize, seed: u64) -> Result<Self> {
            let mut model = LipNet::build(config, rng::mix(seed, 0))?;
            for p in model.param_list_mut() {
                let affine = ["gamma", "beta", "bias", ".b"].iter().any(|s| p.name.ends_with(s));
                if affine {
                    for (i, v) in p.data.iter_mut().enumerate() {
                        *v = rng::hash_unit(rng::substream(seed, &p.name), i as u64) - 0.5
                            + if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
                    }
                }
            }
            let video = uniform(model.config.input_shape(batch)?, 0.0, 1.0, rng::mix(seed, 1));
            let classes = model.config.num_classes;
            let labels = (0..batch as u64)
                .map(|i| {
                    let a = (rng::hash_u64(seed, 10 + i) % (classes as u64 - 1)) as usize;
                    let b = (rng::hash_u64(seed, 20 + i) % (classes as u64 - 1)) as usize;
                    LabelSeq::new(vec![a, b], "")
                })
                .collect::<Result<_>>()?;
            Ok(LipNetCase { model, video, labels, mode: Mode::train(rng::mix(seed, 2)) })
        }

        fn with(&self, p: &[Vec<f64>]) -> Result<(LipNet<f64>, Tensor5<f64>)> {
            let mut m = self.model.clone();
            for (dst, src) in m.param_list_mut().into_iter().zip(&p[1..]) {
                dst.data.copy_from_slice(src);
            }
            Ok((m, Tensor5::from_vec(self.video.shape(), p[0].clone())?))
        }

        fn loss_and_grads(&self, p: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>, LipNet<f64>, LipNetCache<f64>)> {
            let (mut m, x) = self.with(p)?;
            let (log_probs, cache) = m.forward(&x, self.mode)?;
            let classes = m.config.num_classes;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(log_probs.len());
            for (lp, label) in log_probs.iter().zip(&self.labels) {
                let out = ctc_loss_grad(lp, classes, label)?;
                loss += out.loss;
                grads.push(out.grad);
            }
            Ok((loss, grads, m, cache))
        }
    }

    impl GradCase for LipNetCase {
        fn name(&self) -> String {
            "lipnet".into()
        }

        fn params(&self) -> Vec<(String, Vec<f64>)> {
            let mut out = vec![("input".to_string(), self.video.data().to_vec())];
            out.extend(self.model.param_list().into_iter().map(|p| (p.name, p.data.to_vec())));
            out
        }

        fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
            Ok(self.loss_and_grads(p)?.0)
        }

        fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            let (_, g, m, cache) = self.loss_and_grads(p)?;
            let (gx, grads) = m.backward(&cache, &g)?;
            let mut out = vec![gx.into_vec()];
            out.extend(grads.param_list().into_iter().map(|p| p.data.to_vec()));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcase::{tiny_config, LipNetCase};
    use super::*;
    use crate::fpa::FpaVariant;
    use crate::kernels::gradcheck::{gradcheck, GradcheckOptions};
    use crate::tensor::Fill;
    use proptest::prelude::*;

    #[test]
    fn default_stage_shapes() {
        let cfg = LipNetConfig::default();
        let s = cfg.stage_shapes(2).unwrap();
        let thw: Vec<[usize; 3]> = s.iter().map(|s| [s.t, s.h, s.w]).collect();
        assert_eq!(thw, vec![[24, 32, 32], [24, 8, 8], [24, 4, 4], [24, 2, 2]]);
        assert_eq!(cfg.feature_dim().unwrap(), 96);
    }

    #[test]
    fn block_pools_halve_space() {
        let cfg = LipNetConfig { block1_stride: [1, 1, 1], ..LipNetConfig::default() };
        let s = cfg.stage_shapes(1).unwrap();
        assert_eq!((s[1].h, s[1].w), (16, 16));
        assert!(LipNetConfig { input: [1, 24, 8, 8], ..LipNetConfig::default() }.validate().is_err());
        assert!(LipNetConfig { num_classes: 1, ..LipNetConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_block_gives_zero_features() {
        let mut m = LipNet::<f64>::build(tiny_config(&[]), 1).unwrap();
        m.blocks[0].conv.weight.data_mut().fill(0.0);
        let x = Tensor5::new(m.config.input_shape(2).unwrap(), Fill::Uniform { lo: 0.0, hi: 1.0, seed: 1 }).unwrap();
        let (_, cache) = m.forward(&x, Mode::Eval).unwrap();
        assert!(cache.blocks[0].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_distributions_and_time_is_kept() {
        for fpa in [vec![], vec![(FpaPosition::Input, FpaVariant::Spatiotemporal3d), (FpaPosition::F1, FpaVariant::Spatial2d), (FpaPosition::F2, FpaVariant::Spatiotemporal3d)]] {
            let cfg = LipNetConfig { input: [1, 24, 32, 32], hidden: 8, fpa: tiny_config(&fpa).fpa, ..LipNetConfig::default() };
            let mut m = LipNet::<f32>::build(cfg, 3).unwrap();
            let x = Tensor5::new(m.config.input_shape(2).unwrap(), Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
            let (lp, _) = m.forward(&x, Mode::train(1)).unwrap();
            assert_eq!(lp.len(), 2);
            for seq in &lp {
                assert_eq!(seq.len(), 24 * 28);
                for row in seq.chunks(28) {
                    let total: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
                    assert!((total - 1.0).abs() < 1e-6, "{total}");
                }
            }
        }
    }

    #[test]
    fn wrong_clip_shape_rejected() {
        let mut m = LipNet::<f32>::build(tiny_config(&[]), 1).unwrap();
        let x = Tensor5::zeros(Shape5::new(1, 1, 5, 12, 12).unwrap());
        assert!(matches!(m.forward(&x, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = tiny_config(&[(FpaPosition::F1, FpaVariant::Spatial2d), (FpaPosition::F2, FpaVariant::Spatiotemporal3d)]);
        let m = LipNet::<f32>::build(cfg, 0).unwrap();
        let mut names: Vec<String> = m.param_list().into_iter().map(|p| p.name).collect();
        names.extend(m.buffer_list().into_iter().map(|p| p.name));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.contains(&"fpa.f2.down0.conv.weight".to_string()));
        assert!(names.contains(&"gru2.bwd.u".to_string()));
    }

    #[test]
    fn full_model_gradcheck() {
        let cfg = tiny_config(&[(FpaPosition::F2, FpaVariant::Spatiotemporal3d)]);
        let case = LipNetCase::random(cfg, 2, 5).unwrap();
        let opts = GradcheckOptions { tolerance: 1e-3, ..Default::default() };
        let report = gradcheck(&case, &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn time_length_is_preserved(t in 4usize..=32) {
            let cfg = LipNetConfig { input: [1, t, 16, 16], widths: [2, 2, 2], hidden: 3, ..LipNetConfig::default() };
            let mut m = LipNet::<f32>::build(cfg, 0).unwrap();
            let x = Tensor5::zeros(m.config.input_shape(1).unwrap());
            let (lp, _) = m.forward(&x, Mode::Eval).unwrap();
            prop_assert_eq!(lp[0].len(), t * 28);
        }
    }
}
