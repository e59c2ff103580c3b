use crate::error::{Error, Result};

/// Dense `(batch, channels, length)` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        Self {
            batch,
            channels,
            len,
            data: vec![0.0; batch * channels * len],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * len {
            return Err(Error::shape(
                format!("{batch}x{channels}x{len}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            batch,
            channels,
            len,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.len)
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, l: usize) -> usize {
        (b * self.channels + c) * self.len + l
    }

    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let s = self.idx(b, c, 0);
        &self.data[s..s + self.len]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let s = self.idx(b, c, 0);
        &mut self.data[s..s + self.len]
    }

    /// All channels of one sample.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.channels * self.len;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.channels * self.len;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
