use crate::error::{Error, Result};

/// Dense `channels x height x width` activation, row-major per channel.
///
/// `stride` is the downsampling factor of this map relative to the input
/// image; region pooling uses it to map image coordinates onto the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Result<Self> {
        Self::from_vec(channels, height, width, stride, vec![0.0; channels * height * width])
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if !stride.is_power_of_two() {
            return Err(Error::config(format!("stride {stride} is not a power of two")));
        }
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "feature map buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, stride: usize, v: f64) -> Result<Self> {
        Self::from_vec(channels, height, width, stride, vec![v; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// A zero map with the same shape and stride.
    pub fn zeros_like(&self) -> Self {
        FeatureMap {
            data: vec![0.0; self.data.len()],
            ..*self
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::config(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if !stride.is_power_of_two() {
            return Err(Error::config(format!("stride {stride} is not a power of two")));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
