//! Rank-5 dense tensors in `(n, c, t, h, w)` row-major order.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
}

/// Work below this many elements runs on the calling thread.
pub(crate) const PAR_MIN_ELEMS: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape5 { n, c, t, h, w };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("every extent must be >= 1, got {self}")));
        }
        self.checked_len()?;
        Ok(())
    }

    pub fn checked_len(&self) -> Result<usize> {
        self.dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(format!("element count of {self} overflows usize")))
    }

    /// Element count. Only valid for validated shapes.
    pub fn len(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    /// Elements in one `(t, h, w)` volume.
    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn frame(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }

    pub fn with_t(self, t: usize) -> Self {
        Shape5 { t, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape5 { c, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape5 { n, ..self }
    }

    pub fn with_thw(self, t: usize, h: usize, w: usize) -> Self {
        Shape5 { t, h, w, ..self }
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{},{})", self.n, self.c, self.t, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    /// Counter-based uniform samples in `[lo, hi)`.
    Uniform { lo: f64, hi: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn new(shape: Shape5, fill: Fill) -> Result<Self> {
        let len = {
            shape.validate()?;
            shape.len()
        };
        let data = match fill {
            Fill::Zeros => vec![T::zero(); len],
            Fill::Constant(k) => vec![T::lit(k); len],
            Fill::Uniform { lo, hi, seed } => (0..len as u64)
                .map(|i| T::lit(lo + (hi - lo) * rng::hash_unit(seed, i)))
                .collect(),
        };
        Ok(Tensor5 { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        Tensor5 { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, t, h, w)]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        let data = if self.len() >= PAR_MIN_ELEMS {
            self.data.par_iter().map(|&v| f(v)).collect()
        } else {
            self.data.iter().map(|&v| f(v)).collect()
        };
        Tensor5 { shape: self.shape, data }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T + Sync) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "operand shapes differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        let data = if self.len() >= PAR_MIN_ELEMS {
            self.data.par_iter().zip(other.data.par_iter()).map(|(&a, &b)| f(a, b)).collect()
        } else {
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()
        };
        Ok(Tensor5 { shape: self.shape, data })
    }

    /// Pointwise `a + b` or `a * b`. No broadcasting.
    pub fn elementwise(&self, other: &Self, kind: Elementwise) -> Result<Self> {
        match kind {
            Elementwise::Add => self.zip_map(other, |a, b| a + b),
            Elementwise::Mul => self.zip_map(other, |a, b| a * b),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, Elementwise::Add)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, Elementwise::Mul)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "operand shapes differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    /// Appends `extra` copies of the last frame along the time axis.
    pub fn pad_time_replicate(&self, extra: usize) -> Self {
        let s = self.shape;
        let t_out = s.t + extra;
        let frame = s.frame();
        let mut data = Vec::with_capacity(s.n * s.c * t_out * frame);
        for vol in self.data.chunks_exact(s.volume()) {
            data.extend_from_slice(vol);
            let last = &vol[(s.t - 1) * frame..];
            for _ in 0..extra {
                data.extend_from_slice(last);
            }
        }
        Tensor5 { shape: s.with_t(t_out), data }
    }

    /// Keeps frames `[0, t_target)`.
    pub fn crop_time(&self, t_target: usize) -> Result<Self> {
        let s = self.shape;
        if t_target == 0 || t_target > s.t {
            return Err(Error::shape(format!(
                "cannot crop {} frames to {t_target}",
                s.t
            )));
        }
        let keep = t_target * s.frame();
        let mut data = Vec::with_capacity(s.n * s.c * keep);
        for vol in self.data.chunks_exact(s.volume()) {
            data.extend_from_slice(&vol[..keep]);
        }
        Ok(Tensor5 { shape: s.with_t(t_target), data })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::argument("cannot stack an empty batch"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for item in items {
            if item.shape.with_n(1) != first.with_n(1) {
                return Err(Error::shape(format!(
                    "batch items differ: {} vs {}",
                    item.shape, first
                )));
            }
            n += item.shape.n;
            data.extend_from_slice(&item.data);
        }
        Ok(Tensor5 { shape: first.with_n(n), data })
    }

    /// Extracts batch item `index` as an `n = 1` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        if index >= self.shape.n {
            return Err(Error::shape(format!(
                "batch index {index} out of range for {}",
                self.shape
            )));
        }
        let per = self.shape.len() / self.shape.n;
        Ok(Tensor5 {
            shape: self.shape.with_n(1),
            data: self.data[index * per..(index + 1) * per].to_vec(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

const VID5_MAGIC: [u8; 4] = *b"VID5";

/// Writes a tensor as VID5: magic, five u32 LE extents, f32 LE payload.
pub fn write_vid5<T: Real, W: Write>(tensor: &Tensor5<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 4 * tensor.len());
    buf.extend_from_slice(&VID5_MAGIC);
    for d in tensor.shape().dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Size(format!("extent {d} does not fit in u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_vid5<R: Read>(mut input: R) -> Result<Tensor5<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_vid5(&bytes)
}

pub fn decode_vid5(bytes: &[u8]) -> Result<Tensor5<f32>> {
    if bytes.len() < 4 || bytes[..4] != VID5_MAGIC {
        return Err(Error::Format("missing VID5 magic bytes".into()));
    }
    if bytes.len() < 24 {
        return Err(Error::Truncated("VID5 header shorter than 24 bytes".into()));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
    }
    let shape = Shape5 { n: dims[0], c: dims[1], t: dims[2], h: dims[3], w: dims[4] };
    shape.validate().map_err(|e| Error::Format(format!("bad VID5 extents: {e}")))?;
    let payload = &bytes[24..];
    let want = shape
        .len()
        .checked_mul(4)
        .ok_or_else(|| Error::Size("VID5 payload size overflows".into()))?;
    if payload.len() < want {
        return Err(Error::Truncated(format!(
            "VID5 payload has {} bytes, expected {want}",
            payload.len()
        )));
    }
    if payload.len() > want {
        return Err(Error::Format(format!(
            "VID5 payload has {} trailing bytes",
            payload.len() - want
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Tensor5::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(n: usize, c: usize, t: usize, h: usize, w: usize) -> Shape5 {
        Shape5::new(n, c, t, h, w).unwrap()
    }

    /// Frame-valued test tensor: every element of frame `t` equals `t + 1`.
    fn frames(t: usize) -> Tensor5<f64> {
        let s = shape(1, 1, t, 2, 2);
        let data = (0..t).flat_map(|f| std::iter::repeat((f + 1) as f64).take(4)).collect();
        Tensor5::from_vec(s, data).unwrap()
    }

    fn frame_labels(x: &Tensor5<f64>) -> Vec<f64> {
        (0..x.shape().t).map(|t| x.at(0, 0, t, 0, 0)).collect()
    }

    #[test]
    fn create_fills() {
        let z = Tensor5::<f64>::new(shape(1, 1, 1, 1, 1), Fill::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let k = Tensor5::<f64>::new(shape(1, 2, 1, 1, 1), Fill::Constant(3.5)).unwrap();
        assert_eq!(k.data(), &[3.5, 3.5]);
        let u = Fill::Uniform { lo: 0.0, hi: 1.0, seed: 7 };
        let a = Tensor5::<f32>::new(shape(1, 1, 1, 1, 4), u).unwrap();
        let b = Tensor5::<f32>::new(shape(1, 1, 1, 1, 4), u).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(matches!(Shape5::new(1, 0, 1, 1, 1), Err(Error::Shape(_))));
        assert!(matches!(
            Shape5::new(usize::MAX, 2, 1, 1, 1),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let s = shape(1, 1, 1, 1, 2);
        let a = Tensor5::from_vec(s, vec![2.0, 3.0]).unwrap();
        let b = Tensor5::from_vec(s, vec![4.0, 5.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[8.0, 15.0]);
        let ones = Tensor5::new(s, Fill::Constant(1.0)).unwrap();
        assert_eq!(a.mul(&ones).unwrap(), a);
        assert_eq!(a.add(&Tensor5::zeros(s)).unwrap(), a);
        let c = Tensor5::<f64>::zeros(shape(1, 1, 1, 2, 1));
        assert!(matches!(a.add(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn pad_time_examples() {
        assert_eq!(frame_labels(&frames(3).pad_time_replicate(2)), [1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(frames(3).pad_time_replicate(0), frames(3));
        assert_eq!(frame_labels(&frames(1).pad_time_replicate(3)), [1.0; 4]);
    }

    #[test]
    fn crop_time_examples() {
        assert_eq!(frames(5).crop_time(5).unwrap(), frames(5));
        assert_eq!(frame_labels(&frames(4).crop_time(2).unwrap()), [1.0, 2.0]);
        assert!(matches!(frames(1).crop_time(2), Err(Error::Shape(_))));
    }

    #[test]
    fn vid5_roundtrip_is_byte_exact() {
        let x = Tensor5::<f32>::new(
            shape(1, 1, 3, 4, 5),
            Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 },
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_vid5(&x, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], &[0x56, 0x49, 0x44, 0x35]);
        assert_eq!(bytes.len(), 24 + 4 * 60);
        let y = decode_vid5(&bytes).unwrap();
        assert_eq!(x, y);
        let mut again = Vec::new();
        write_vid5(&y, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn vid5_rejects_bad_input() {
        let x = Tensor5::<f32>::zeros(shape(1, 1, 1, 1, 2));
        let mut bytes = Vec::new();
        write_vid5(&x, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vid5(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_vid5(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }

    fn small_tensor() -> impl Strategy<Value = (Tensor5<f64>, Tensor5<f64>, Tensor5<f64>)> {
        (1usize..3, 1usize..3, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(n, c, t, h, w)| {
            let s = Shape5 { n, c, t, h, w };
            let v = || proptest::collection::vec(-1000i32..1000, s.len());
            (v(), v(), v()).prop_map(move |(a, b, c)| {
                let mk = |v: Vec<i32>| {
                    Tensor5::from_vec(s, v.into_iter().map(|x| x as f64 / 8.0).collect()).unwrap()
                };
                (mk(a), mk(b), mk(c))
            })
        })
    }

    proptest! {
        #[test]
        fn add_commutes_and_associates((a, b, c) in small_tensor()) {
            let ab = a.add(&b).unwrap();
            prop_assert_eq!(&ab, &b.add(&a).unwrap());
            // Dyadic values keep every partial sum exact.
            prop_assert_eq!(ab.add(&c).unwrap(), a.add(&b.add(&c).unwrap()).unwrap());
        }

        #[test]
        fn pad_then_crop_is_identity((a, _, _) in small_tensor(), extra in 0usize..5) {
            let t = a.shape().t;
            let before = a.clone();
            let back = a.pad_time_replicate(extra).crop_time(t).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(&before, &a);
        }
    }
}
