use crate::error::{Error, Result};
use crate::imaging::normalize_by_std;
use crate::plane::Plane;

use super::Scalar;

/// Channel-major activation volume: `values[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 { channels, height, width, values: vec![T::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim("tensor dimensions must be >= 1"));
        }
        if values.len() != channels * height * width {
            return Err(Error::dim(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                values.len()
            )));
        }
        Ok(Tensor3 { channels, height, width, values })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Tensor3 { channels, height, width, values }
    }

    /// Stack equally sized planes as channels.
    pub fn from_planes(planes: &[&Plane]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::EmptyInput("no planes to stack".into()))?;
        let (h, w) = first.dims();
        let mut values = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.dims() != (h, w) {
                return Err(Error::dim("planes differ in size"));
            }
            values.extend(p.as_slice().iter().map(|&v| T::from_f64(v)));
        }
        Tensor3::from_vec(planes.len(), h, w, values)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Two-channel network input: channel 0 is the fingerprint crop, channel 1
/// the residual crop, each scaled to unit population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTensor<T = f32> {
    tensor: Tensor3<T>,
}

impl<T: Scalar> PairTensor<T> {
    pub const FINGERPRINT: usize = 0;
    pub const RESIDUAL: usize = 1;

    /// Normalizes both planes; they must be square and equally sized.
    pub fn new(fingerprint: &Plane, residual: &Plane) -> Result<Self> {
        Self::from_normalized(&normalize_by_std(fingerprint)?, &normalize_by_std(residual)?)
    }

    /// Stack planes that are already normalized.
    pub fn from_normalized(fingerprint: &Plane, residual: &Plane) -> Result<Self> {
        fingerprint.ensure_same_dims(residual)?;
        if fingerprint.rows() != fingerprint.cols() {
            return Err(Error::dim(format!(
                "pair input must be square, got {}x{}",
                fingerprint.rows(),
                fingerprint.cols()
            )));
        }
        Ok(PairTensor { tensor: Tensor3::from_planes(&[fingerprint, residual])? })
    }

    /// Wrap a raw two-channel tensor without normalizing it.
    pub fn from_tensor(tensor: Tensor3<T>) -> Result<Self> {
        if tensor.channels() != 2 || tensor.height() != tensor.width() {
            return Err(Error::dim(format!("pair tensor must be 2xPxP, got {:?}", tensor.shape())));
        }
        Ok(PairTensor { tensor })
    }

    pub fn side(&self) -> usize {
        self.tensor.height()
    }

    pub fn tensor(&self) -> &Tensor3<T> {
        &self.tensor
    }

    pub fn cast<U: Scalar>(&self) -> PairTensor<U> {
        PairTensor { tensor: self.tensor.cast() }
    }
}
