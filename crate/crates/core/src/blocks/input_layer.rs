use rand::Rng;

use super::conv::Conv2d;
use super::norm::relu_inplace;
use super::param::{join, Param, Parameterized};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

/// The shared, permanently frozen stride-4 input layer.
///
/// Two stride-2 3x3 convolutions with ReLU, randomly initialised once and
/// never updated: there is no backward pass. Pixel values are expected in
/// `[0, 1]` and are centred on entry.
#[derive(Clone, Debug, PartialEq)]
pub struct InputLayer {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl InputLayer {
    pub const STRIDE: usize = 4;

    pub fn new<R: Rng + ?Sized>(hidden: usize, out_channels: usize, rng: &mut R) -> Self {
        InputLayer {
            conv1: Conv2d::new(3, hidden, 3, 2, rng),
            conv2: Conv2d::new(hidden, out_channels, 3, 2, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<FeatureMap> {
        if image.channels() != 3 {
            return Err(Error::config(format!(
                "input layer expects a 3-channel image, got {} channels",
                image.channels()
            )));
        }
        if image.stride() != 1 {
            return Err(Error::config("input layer expects a full-resolution image"));
        }
        let mut centred = image.clone();
        centred.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let mut x = self.conv1.forward(&centred)?;
        relu_inplace(&mut x);
        let mut x = self.conv2.forward(&x)?;
        relu_inplace(&mut x);
        Ok(x)
    }
}

impl Parameterized for InputLayer {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
    }
}
