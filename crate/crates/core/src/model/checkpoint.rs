//! Checkpoint files: named f32 tensors behind a versioned header.
//!
//! ```text
//! "FPA3D\0"  u32 version  u32 count
//! count x { u16 name_len, name, u8 rank, rank x u32 extent, f32 payload }
//! ```
//!
//! All integers and floats are little-endian. Besides the weights and
//! running statistics, a checkpoint holds the Adam moments (`<name>.m`,
//! `<name>.v`, scalar `adam.step`) and `meta.*` tensors describing the
//! architecture, so a model can be rebuilt from the file alone.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fpa::{FpaConfig, FpaVariant, MaskActivation};
use crate::model::{Adam, AdamConfig, FpaPosition, LipNet, LipNetConfig};
use crate::params::Parameters;

pub const MAGIC: [u8; 6] = *b"FPA3D\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        NamedTensor { name: name.into(), dims, data }
    }

    fn vector(name: impl Into<String>, values: &[f64]) -> Self {
        NamedTensor::new(name, vec![values.len()], values.iter().map(|&v| v as f32).collect())
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Size("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name_len = u16::try_from(t.name.len()).map_err(|_| Error::Size(format!("tensor name {:?} too long", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Size(format!("tensor {} has too many axes", t.name)))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape(format!("tensor {} extents {:?} do not match {} values", t.name, t.dims, t.data.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Size(format!("extent {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!("checkpoint ends inside {what} at byte {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
    }
    let mut cur = Cursor { bytes, at: MAGIC.len() };
    let version = cur.u32("header")?;
    if version != VERSION {
        return Err(Error::Version { found: version, supported: vec![VERSION] });
    }
    let count = cur.u32("header")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2, "tensor name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "tensor rank")?[0] as usize;
        let dims = (0..rank).map(|_| Ok(cur.u32("tensor extents")? as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Size(format!("tensor {name} is too large")))?;
        let data = cur
            .take(len, "tensor payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if cur.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - cur.at)));
    }
    Ok(tensors)
}

fn opt_rate(rate: Option<f64>) -> f64 {
    rate.unwrap_or(-1.0)
}

fn meta_tensors(config: &LipNetConfig) -> Vec<NamedTensor> {
    let us = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut out = vec![
        NamedTensor::vector("meta.input", &us(&config.input)),
        NamedTensor::vector("meta.widths", &us(&config.widths)),
        NamedTensor::vector("meta.kernel", &us(&config.kernel)),
        NamedTensor::vector("meta.block1_stride", &us(&config.block1_stride)),
        NamedTensor::vector("meta.padding", &us(&config.padding)),
        NamedTensor::vector("meta.pool", &us(&config.pool)),
        NamedTensor::vector("meta.hidden", &[config.hidden as f64]),
        NamedTensor::vector("meta.classes", &[config.num_classes as f64]),
        NamedTensor::vector("meta.dropout", &[opt_rate(config.dropout)]),
    ];
    for pos in FpaPosition::ALL {
        if let Some(f) = &config.fpa[pos.index()] {
            let variant = match f.variant {
                FpaVariant::Spatial2d => 2.0,
                FpaVariant::Spatiotemporal3d => 3.0,
            };
            let mask = match f.mask_activation {
                MaskActivation::Sigmoid => 0.0,
                MaskActivation::Identity => 1.0,
            };
            out.push(NamedTensor::vector(
                format!("meta.fpa.{pos}"),
                &[variant, f.levels as f64, mask, f64::from(u8::from(f.use_batchnorm)), opt_rate(f.dropout)],
            ));
        }
    }
    out
}

/// Every tensor needed to rebuild the model and resume optimization.
pub fn model_tensors(model: &LipNet<f32>, opt: Option<&Adam<f32>>) -> Vec<NamedTensor> {
    let mut out = meta_tensors(&model.config);
    let params = model.param_list();
    for p in model.param_list().into_iter().chain(model.buffer_list()) {
        out.push(NamedTensor::new(p.name, p.shape, p.data.to_vec()));
    }
    if let Some(opt) = opt {
        for ((p, m), v) in params.iter().zip(&opt.m).zip(&opt.v) {
            out.push(NamedTensor::new(format!("{}.m", p.name), p.shape.clone(), m.clone()));
            out.push(NamedTensor::new(format!("{}.v", p.name), p.shape.clone(), v.clone()));
        }
        out.push(NamedTensor::new("adam.step", vec![], vec![opt.step as f32]));
    }
    out
}

struct TensorMap(HashMap<String, NamedTensor>);

impl TensorMap {
    fn take(&mut self, name: &str) -> Result<NamedTensor> {
        self.0.remove(name).ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))
    }

    fn ints<const N: usize>(&mut self, name: &str) -> Result<[usize; N]> {
        let t = self.take(name)?;
        let mut out = [0; N];
        if t.data.len() != N {
            return Err(Error::Format(format!("{name} should hold {N} values")));
        }
        for (o, &v) in out.iter_mut().zip(&t.data) {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("{name} holds non-integer {v}")));
            }
            *o = v as usize;
        }
        Ok(out)
    }

    fn floats(&mut self, name: &str, n: usize) -> Result<Vec<f64>> {
        let t = self.take(name)?;
        if t.data.len() != n {
            return Err(Error::Format(format!("{name} should hold {n} values")));
        }
        Ok(t.data.iter().map(|&v| (v as f64 * 1e6).round() / 1e6).collect())
    }
}

fn rate(v: f64) -> Option<f64> {
    (v >= 0.0).then_some(v)
}

fn restore_config(map: &mut TensorMap) -> Result<LipNetConfig> {
    let mut fpa: [Option<FpaConfig>; 3] = [None, None, None];
    for pos in FpaPosition::ALL {
        let name = format!("meta.fpa.{pos}");
        if map.0.contains_key(&name) {
            let f = map.floats(&name, 5)?;
            let variant = match f[0] as u32 {
                2 => FpaVariant::Spatial2d,
                3 => FpaVariant::Spatiotemporal3d,
                other => return Err(Error::Format(format!("{name}: unknown variant code {other}"))),
            };
            let mask_activation = if f[2] == 0.0 { MaskActivation::Sigmoid } else { MaskActivation::Identity };
            fpa[pos.index()] = Some(FpaConfig {
                variant,
                levels: f[1] as usize,
                mask_activation,
                use_batchnorm: f[3] != 0.0,
                dropout: rate(f[4]),
            });
        }
    }
    Ok(LipNetConfig {
        input: map.ints("meta.input")?,
        widths: map.ints("meta.widths")?,
        kernel: map.ints("meta.kernel")?,
        block1_stride: map.ints("meta.block1_stride")?,
        padding: map.ints("meta.padding")?,
        pool: map.ints("meta.pool")?,
        hidden: map.ints::<1>("meta.hidden")?[0],
        num_classes: map.ints::<1>("meta.classes")?[0],
        dropout: rate(map.floats("meta.dropout", 1)?[0]),
        fpa,
    })
}

fn fill(name: &str, shape: &[usize], dst: &mut [f32], map: &mut TensorMap) -> Result<()> {
    let t = map.take(name)?;
    if t.dims != shape {
        return Err(Error::Format(format!("{name} has extents {:?}, model expects {shape:?}", t.dims)));
    }
    dst.copy_from_slice(&t.data);
    Ok(())
}

/// Rebuilds a model, and the optimizer state if present, from decoded
/// tensors. Every tensor must be consumed.
pub fn restore(tensors: Vec<NamedTensor>, adam: AdamConfig) -> Result<(LipNet<f32>, Option<Adam<f32>>)> {
    let mut map = TensorMap(HashMap::with_capacity(tensors.len()));
    for t in tensors {
        let name = t.name.clone();
        if map.0.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
    }
    let config = restore_config(&mut map)?;
    let mut model = LipNet::<f32>::build(config, 0)?;
    for p in model.param_list_mut() {
        fill(&p.name, &p.shape, p.data, &mut map)?;
    }
    for p in model.buffer_list_mut() {
        fill(&p.name, &p.shape, p.data, &mut map)?;
    }
    let opt = if map.0.contains_key("adam.step") {
        let step = map.take("adam.step")?;
        let mut opt = Adam::new(adam, &model);
        opt.step = step.data.first().copied().unwrap_or(0.0) as u64;
        for (i, p) in model.param_list().iter().enumerate() {
            fill(&format!("{}.m", p.name), &p.shape, &mut opt.m[i], &mut map)?;
            fill(&format!("{}.v", p.name), &p.shape, &mut opt.v[i], &mut map)?;
        }
        Some(opt)
    } else {
        None
    };
    if let Some(extra) = map.0.keys().min() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok((model, opt))
}

pub fn save(path: &Path, model: &LipNet<f32>, opt: Option<&Adam<f32>>) -> Result<()> {
    fs::write(path, encode(&model_tensors(model, opt))?)?;
    Ok(())
}

pub fn load(path: &Path, adam: AdamConfig) -> Result<(LipNet<f32>, Option<Adam<f32>>)> {
    restore(decode(&fs::read(path)?)?, adam)
}
