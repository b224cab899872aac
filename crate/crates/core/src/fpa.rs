//! Feature pyramid attention over `(t, h, w)` feature volumes.
//!
//! The bottom-up pathway applies `levels` stride-2 convolutions (spatial only
//! for the 2D variant, spatial and temporal for the 3D variant). The top-down
//! pathway runs a stride-1 lateral convolution on every level and adds the
//! upsampled coarser result, from the deepest level back to the first. The
//! fused map is upsampled to the input extents and squashed into a mask that
//! multiplies the input element by element. There is no projection of the
//! input before the multiplication and no global pooling branch.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::error::{Error, Result};
use crate::kernels::{self, Activation, Mode};
use crate::layers::{ConvUnit, ConvUnitCache};
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::rng;
use crate::tensor::{Real, Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpaVariant {
    /// Per-frame pyramid; time is never strided or upsampled.
    Spatial2d,
    /// Pyramid over time and space jointly.
    Spatiotemporal3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskActivation {
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpaConfig {
    pub variant: FpaVariant,
    pub levels: usize,
    pub mask_activation: MaskActivation,
    pub use_batchnorm: bool,
    /// Dropout rate after every convolution, if enabled.
    pub dropout: Option<f64>,
}

impl Default for FpaConfig {
    fn default() -> Self {
        FpaConfig {
            variant: FpaVariant::Spatiotemporal3d,
            levels: 3,
            mask_activation: MaskActivation::Sigmoid,
            use_batchnorm: true,
            dropout: Some(kernels::dropout::DEFAULT_RATE),
        }
    }
}

impl FpaConfig {
    pub fn with_variant(variant: FpaVariant) -> Self {
        FpaConfig { variant, ..Default::default() }
    }

    pub fn kernel(&self) -> [usize; 3] {
        match self.variant {
            FpaVariant::Spatial2d => [1, 3, 3],
            FpaVariant::Spatiotemporal3d => [3, 3, 3],
        }
    }

    pub fn down_stride(&self) -> [usize; 3] {
        match self.variant {
            FpaVariant::Spatial2d => [1, 2, 2],
            FpaVariant::Spatiotemporal3d => [2, 2, 2],
        }
    }

    pub fn padding(&self) -> [usize; 3] {
        self.kernel().map(|k| k / 2)
    }

    /// Extents of every pyramid level for an input of shape `x`, level 0
    /// being the input itself.
    pub fn level_shapes(&self, x: Shape5) -> Vec<Shape5> {
        let stride = self.down_stride();
        let mut shapes = vec![x];
        for _ in 0..self.levels {
            let s = *shapes.last().expect("non-empty");
            shapes.push(s.with_thw(
                s.t.div_ceil(stride[0]),
                s.h.div_ceil(stride[1]),
                s.w.div_ceil(stride[2]),
            ));
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::argument("pyramid needs at least one level"));
        }
        if let Some(rate) = self.dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::argument(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FpaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FpaVariant::Spatial2d => "2d",
            FpaVariant::Spatiotemporal3d => "3d",
        })
    }
}

impl FromStr for FpaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(FpaVariant::Spatial2d),
            "3d" => Ok(FpaVariant::Spatiotemporal3d),
            other => Err(Error::argument(format!("unknown FPA variant '{other}' (expected 2d or 3d)"))),
        }
    }
}

impl FromStr for MaskActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(MaskActivation::Sigmoid),
            "identity" => Ok(MaskActivation::Identity),
            other => Err(Error::argument(format!("unknown mask activation '{other}'"))),
        }
    }
}

impl fmt::Display for MaskActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskActivation::Sigmoid => "sigmoid",
            MaskActivation::Identity => "identity",
        })
    }
}

#[derive(Clone, Debug)]
pub struct FpaModule<T> {
    pub config: FpaConfig,
    pub channels: usize,
    /// Stride-2 convolutions, `down[i]` producing level `i + 1`.
    pub down: Vec<ConvUnit<T>>,
    /// Lateral convolutions, `fusion[i]` reading level `i + 1`.
    pub fusion: Vec<ConvUnit<T>>,
    generation: u64,
}

#[derive(Clone, Debug)]
pub struct FpaCache<T> {
    generation: u64,
    levels: Vec<Shape5>,
    input: Tensor5<T>,
    down: Vec<ConvUnitCache<T>>,
    fusion: Vec<ConvUnitCache<T>>,
    pre_mask: Tensor5<T>,
    mask: Tensor5<T>,
}

impl<T> FpaCache<T> {
    pub fn mask(&self) -> &Tensor5<T> {
        &self.mask
    }

    /// Extents of the input and every pyramid level.
    pub fn level_shapes(&self) -> &[Shape5] {
        &self.levels
    }
}

/// Equality ignores the cache generation counter.
impl<T: PartialEq> PartialEq for FpaModule<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.channels == other.channels
            && self.down == other.down
            && self.fusion == other.fusion
    }
}

impl<T: Real> FpaModule<T> {
    pub fn build(config: FpaConfig, channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::argument("FPA needs at least one channel"));
        }
        let (k, p) = (config.kernel(), config.padding());
        let mut down = Vec::with_capacity(config.levels);
        let mut fusion = Vec::with_capacity(config.levels);
        for i in 0..config.levels as u64 {
            down.push(ConvUnit::init(
                channels,
                channels,
                k,
                config.down_stride(),
                p,
                config.use_batchnorm,
                true,
                config.dropout,
                rng::mix(seed, 2 * i),
            )?);
            fusion.push(ConvUnit::init(
                channels,
                channels,
                k,
                [1, 1, 1],
                p,
                config.use_batchnorm,
                false,
                config.dropout,
                rng::mix(seed, 2 * i + 1),
            )?);
        }
        Ok(FpaModule { config, channels, down, fusion, generation: 0 })
    }

    pub fn conv_count(&self) -> usize {
        self.down.len() + self.fusion.len()
    }

    fn mask_activation(&self) -> Activation {
        match self.config.mask_activation {
            MaskActivation::Sigmoid => Activation::Sigmoid,
            MaskActivation::Identity => Activation::Identity,
        }
    }

    pub fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, FpaCache<T>)> {
        let xs = x.shape();
        if xs.c != self.channels {
            return Err(Error::shape(format!(
                "FPA built for {} channels, input {xs} has {}",
                self.channels, xs.c
            )));
        }
        let levels = self.config.level_shapes(xs);
        let deepest = levels[self.config.levels];
        let stride = self.config.down_stride();
        if (stride[0] == 1 || deepest.t == 1) && deepest.h == 1 && deepest.w == 1 {
            warn!("FPA input {xs} collapses to a single position at pyramid level {}", self.config.levels);
        }

        let mut feats = vec![x.clone()];
        let mut down_caches = Vec::with_capacity(self.config.levels);
        for (i, unit) in self.down.iter_mut().enumerate() {
            let (y, cache) = unit
                .forward(&feats[i], mode.derive(2 * i as u64))
                .map_err(|e| level_error(i + 1, e))?;
            feats.push(y);
            down_caches.push(cache);
        }

        let mut fusion_caches: Vec<Option<ConvUnitCache<T>>> = vec![None; self.config.levels];
        let mut fused: Option<Tensor5<T>> = None;
        for i in (0..self.config.levels).rev() {
            let (lateral, cache) = self.fusion[i]
                .forward(&feats[i + 1], mode.derive(2 * i as u64 + 1))
                .map_err(|e| level_error(i + 1, e))?;
            fusion_caches[i] = Some(cache);
            fused = Some(match fused {
                None => lateral,
                Some(coarser) => lateral.add(&kernels::upsample_to(&coarser, feats[i + 1].shape())?)?,
            });
        }
        let top = fused.expect("at least one level");
        let pre_mask = kernels::upsample_to(&top, xs)?;
        let mask = kernels::activate(&pre_mask, self.mask_activation())?;
        let out = x.mul(&mask)?;
        let cache = FpaCache {
            generation: self.generation,
            levels,
            input: x.clone(),
            down: down_caches,
            fusion: fusion_caches.into_iter().map(|c| c.expect("filled")).collect(),
            pre_mask,
            mask,
        };
        Ok((out, cache))
    }

    /// Input gradient plus a module holding the parameter gradients.
    pub fn backward(&self, cache: &FpaCache<T>, grad_out: &Tensor5<T>) -> Result<(Tensor5<T>, FpaModule<T>)> {
        if cache.generation != self.generation
            || cache.down.len() != self.config.levels
            || cache.levels.first() != Some(&grad_out.shape())
        {
            return Err(Error::Corruption(
                "FPA cache does not belong to this module state".into(),
            ));
        }
        let levels = self.config.levels;
        let mut grads = self.clone();

        let mut grad_x = grad_out.mul(&cache.mask)?;
        let grad_mask = grad_out.mul(&cache.input)?;
        let grad_pre = kernels::activate_backward(&cache.pre_mask, &cache.mask, &grad_mask, self.mask_activation())?;

        let mut grad_feats: Vec<Tensor5<T>> = cache.levels.iter().map(|&s| Tensor5::zeros(s)).collect();
        let mut grad_fused = kernels::upsample_to_backward(&grad_pre, cache.levels[1])?;
        for i in 0..levels {
            let (gl, gu) = self.fusion[i].backward(&cache.fusion[i], &grad_fused)?;
            grad_feats[i + 1].add_assign(&gl)?;
            grads.fusion[i] = gu;
            if i + 1 < levels {
                grad_fused = kernels::upsample_to_backward(&grad_fused, cache.levels[i + 2])?;
            }
        }
        for i in (0..levels).rev() {
            let (gprev, gu) = self.down[i].backward(&cache.down[i], &grad_feats[i + 1])?;
            grads.down[i] = gu;
            if i == 0 {
                grad_x.add_assign(&gprev)?;
            } else {
                grad_feats[i].add_assign(&gprev)?;
            }
        }
        Ok((grad_x, grads))
    }
}

fn level_error(level: usize, e: Error) -> Error {
    match e {
        Error::DegenerateBatch(msg) | Error::Shape(msg) => {
            Error::shape(format!("input too small at pyramid level {level}: {msg}"))
        }
        other => other,
    }
}

impl<T: Real> Parameters<T> for FpaModule<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, u) in self.down.iter().enumerate() {
            u.params(&join(prefix, &format!("down{i}")), out);
        }
        for (i, u) in self.fusion.iter().enumerate() {
            u.params(&join(prefix, &format!("fusion{i}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.generation += 1;
        for (i, u) in self.down.iter_mut().enumerate() {
            u.params_mut(&join(prefix, &format!("down{i}")), out);
        }
        for (i, u) in self.fusion.iter_mut().enumerate() {
            u.params_mut(&join(prefix, &format!("fusion{i}")), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, u) in self.down.iter().enumerate() {
            u.buffers(&join(prefix, &format!("down{i}")), out);
        }
        for (i, u) in self.fusion.iter().enumerate() {
            u.buffers(&join(prefix, &format!("fusion{i}")), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.generation += 1;
        for (i, u) in self.down.iter_mut().enumerate() {
            u.buffers_mut(&join(prefix, &format!("down{i}")), out);
        }
        for (i, u) in self.fusion.iter_mut().enumerate() {
            u.buffers_mut(&join(prefix, &format!("fusion{i}")), out);
        }
    }
}

pub mod gradcase {
    //! Finite-difference check of a whole FPA module.

    use super::*;
    use crate::kernels::gradcheck::{dot, uniform, GradCase};

    pub struct FpaCase {
        pub module: FpaModule<f64>,
        pub x: Tensor5<f64>,
        pub cotangent: Tensor5<f64>,
        pub mode: Mode,
    }

    impl FpaCase {
        pub fn random(config: FpaConfig, x_shape: Shape5, seed: u64) -> Result<Self> {
            let mut module = FpaModule::build(config, x_shape.c, rng::mix(seed, 1))?;
            // Non-trivial affine parameters so every path carries gradient.
            for p in module.param_list_mut() {
                if p.name.ends_with("gamma") || p.name.ends_with("beta") || p.name.ends_with("bias") {
                    for (i, v) in p.data.iter_mut().enumerate() {
                        *v = rng::hash_unit(rng::substream(seed, &p.name), i as u64) - 0.5
                            + if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
                    }
                }
            }
            Ok(FpaCase {
                module,
                x: uniform(x_shape, -1.0, 1.0, rng::mix(seed, 2)),
                cotangent: uniform(x_shape, -1.0, 1.0, rng::mix(seed, 3)),
                mode: Mode::train(rng::mix(seed, 4)),
            })
        }

        fn with(&self, p: &[Vec<f64>]) -> Result<(FpaModule<f64>, Tensor5<f64>)> {
            let mut m = self.module.clone();
            for (dst, src) in m.param_list_mut().into_iter().zip(&p[1..]) {
                dst.data.copy_from_slice(src);
            }
            Ok((m, Tensor5::from_vec(self.x.shape(), p[0].clone())?))
        }
    }

    impl GradCase for FpaCase {
        fn name(&self) -> String {
            format!("fpa_{}", self.module.config.variant)
        }

        fn params(&self) -> Vec<(String, Vec<f64>)> {
            let mut out = vec![("input".to_string(), self.x.data().to_vec())];
            out.extend(self.module.param_list().into_iter().map(|p| (p.name, p.data.to_vec())));
            out
        }

        fn loss(&self, p: &[Vec<f64>]) -> Result<f64> {
            let (mut m, x) = self.with(p)?;
            let (y, _) = m.forward(&x, self.mode)?;
            Ok(dot(y.data(), self.cotangent.data()))
        }

        fn gradient(&self, p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            let (mut m, x) = self.with(p)?;
            let (_, cache) = m.forward(&x, self.mode)?;
            let (gx, grads) = m.backward(&cache, &self.cotangent)?;
            let mut out = vec![gx.into_vec()];
            out.extend(grads.param_list().into_iter().map(|p| p.data.to_vec()));
            Ok(out)
        }
    }
}
