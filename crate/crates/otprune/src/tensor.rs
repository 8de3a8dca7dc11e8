//! Minimal dense NCHW tensor used by inference and training.

/// A dense rank-4 tensor of `f32` in `(batch, channels, height, width)` layout.
///
/// All model activations flow through this type. Linear layers treat the
/// trailing `(c, h, w)` dimensions as a flattened feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Self {
        assert_eq!(data.len(), batch * channels * height * width, "data length mismatch");
        Tensor { batch, channels, height, width, data }
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.channels + c) * self.height + h) * self.width + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Shape as `(c, h, w)`, ignoring the batch dimension.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn features_per_sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Borrow the flattened features of one sample.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.features_per_sample();
        &self.data[n * len..(n + 1) * len]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_nchw() {
        let mut t = Tensor::zeros(2, 3, 4, 5);
        *t.at_mut(1, 2, 3, 4) = 7.0;
        assert_eq!(t.data[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
        assert_eq!(t.sample(1).len(), 3 * 4 * 5);
    }
}
