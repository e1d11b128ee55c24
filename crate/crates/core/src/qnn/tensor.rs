use crate::error::{Error, Result};

/// Symmetric per-tensor int8 tensor. The zero point is always 0, so the real
/// value of element `i` is `scale * data[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f64,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, scale: f64) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} holds {len} elements but data has {}",
                data.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tensor scale must be positive and finite, got {scale}"
            )));
        }
        Ok(Self { shape, data, scale })
    }

    /// Quantizes real values onto the int8 grid of `scale`, rounding half away
    /// from zero and saturating.
    pub fn quantize(shape: Vec<usize>, values: &[f64], scale: f64) -> Result<Self> {
        let data = values.iter().map(|&v| saturate_i8((v / scale).round())).collect();
        Self::new(shape, data, scale)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.data.iter().map(|&q| self.scale * f64::from(q)).collect()
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }
}

pub(crate) fn saturate_i8(x: f64) -> i8 {
    x.clamp(-128.0, 127.0) as i8
}
