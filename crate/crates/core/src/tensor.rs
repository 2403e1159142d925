//! Dense row-major tensors and the `DTNS` binary container.
//!
//! A DTNS file is the 4 magic bytes `DTNS`, a little-endian `u32` rank, one
//! little-endian `u32` per extent, then the payload as little-endian `f32`
//! in row-major order. Model weights, perturbations and depth maps all use it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{config_err, shape_err, Error, Result};

pub const DTNS_MAGIC: &[u8; 4] = b"DTNS";

/// Scalar storage type of a tensor.
///
/// Arithmetic inside the graph is carried out in `f64` and rounded back to the
/// storage type, so the same kernels serve both `f32` (the default) and `f64`
/// (used by gradient checks).
pub trait Element:
    Copy + Default + PartialEq + PartialOrd + fmt::Debug + Send + Sync + 'static
{
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;

    /// Nearest representable value whose magnitude does not exceed `|v|`.
    fn from_f64_toward_zero(v: f64) -> Self;

    /// `c = beta * c + a * b` over raw strided matrices (see `matrixmultiply`).
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f64_toward_zero(v: f64) -> Self {
        let r = v as f32;
        if (r as f64).abs() > v.abs() {
            // same sign, one ulp closer to zero
            f32::from_bits(r.to_bits() - 1)
        } else {
            r
        }
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f64_toward_zero(v: f64) -> Self {
        v
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::default())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} to {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets a rank-3 tensor as `[C, H, W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected [C,H,W], got {:?}", self.shape)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute element, 0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.to_f64().abs()))
    }

    /// Mean absolute element.
    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.to_f64().abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.to_f64()).sum::<f64>() / self.data.len() as f64
    }
}

/// Clamps every element into `[-xi, xi]`.
///
/// The bound is rounded toward zero in the storage type, so the result
/// satisfies `|v| <= xi` exactly when compared in `f64`. Elements already
/// inside the interval are returned unchanged, so the operation is idempotent.
pub fn clip_inf<T: Element>(t: &Tensor<T>, xi: f64) -> Result<Tensor<T>> {
    if !(xi >= 0.0) {
        return Err(config_err!("clip bound must be non-negative, got {xi}"));
    }
    let hi = T::from_f64_toward_zero(xi);
    let lo = T::from_f64_toward_zero(-xi);
    Ok(t.map(|v| {
        if v > hi {
            hi
        } else if v < lo {
            lo
        } else {
            v
        }
    }))
}

impl Tensor<f32> {
    pub fn to_dtns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(DTNS_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_dtns_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let take_u32 = |off: usize| -> std::result::Result<u32, String> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| "truncated header".to_string())
        };
        if bytes.len() < 8 || &bytes[..4] != DTNS_MAGIC {
            return Err("missing DTNS magic".into());
        }
        let rank = take_u32(4)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(take_u32(8 + 4 * i)? as usize);
        }
        let n: usize = shape.iter().product();
        let start = 8 + 4 * rank;
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() != 4 * n {
            return Err(format!(
                "payload holds {} bytes, shape {:?} needs {}",
                payload.len(),
                shape,
                4 * n
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save_dtns(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_dtns_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_dtns(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_dtns_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn clip_examples() {
        let t = Tensor::new(vec![2], vec![0.03f32, -0.01]).unwrap();
        let c = clip_inf(&t, 0.02).unwrap();
        assert_eq!(c.data(), &[0.02f32, -0.01]);

        let z = Tensor::<f32>::zeros(vec![3, 2, 2]);
        assert_eq!(clip_inf(&z, 0.5).unwrap(), z);

        let t = Tensor::new(vec![3], vec![0.3f32, -2.0, 0.0]).unwrap();
        assert!(clip_inf(&t, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_bound_never_rounds_up() {
        // 2e-3 rounds up to the nearest f32
        assert!(2e-3f32 as f64 > 2e-3);
        let t = Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap();
        for xi in [2e-3, 5e-3, 1e-2, 2e-2] {
            assert!(clip_inf(&t, xi).unwrap().max_abs() <= xi);
        }
    }

    #[test]
    fn clip_negative_bound_is_config_error() {
        let t = Tensor::<f32>::zeros(vec![1]);
        assert!(matches!(clip_inf(&t, -1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn dtns_rejects_garbage() {
        assert!(Tensor::from_dtns_bytes(b"NOPE\0\0\0\0").is_err());
        let mut b = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap().to_dtns_bytes();
        b.pop();
        assert!(Tensor::from_dtns_bytes(&b).is_err());
    }

    #[test]
    fn dtns_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -0.5]).unwrap();
        let b = t.to_dtns_bytes();
        assert_eq!(&b[..4], b"DTNS");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-0.5f32).to_le_bytes());
    }

    proptest! {
        #[test]
        fn dtns_roundtrip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32) * 0.37 - 100.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_dtns_bytes(&t.to_dtns_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn clip_is_idempotent_and_bounded(vals in proptest::collection::vec(-1.0f32..1.0, 1..64), xi in 0.0f64..0.5) {
            let t = Tensor::new(vec![vals.len()], vals).unwrap();
            let once = clip_inf(&t, xi).unwrap();
            let twice = clip_inf(&once, xi).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.max_abs() <= xi);
            for (a, b) in t.data().iter().zip(once.data()) {
                if (*a as f64).abs() <= xi { prop_assert_eq!(a, b); }
            }
        }
    }
}
