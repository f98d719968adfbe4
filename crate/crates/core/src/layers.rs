use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Tensor};

/// Square convolution with bias and "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Vec<f64>) -> Result<Self> {
        let conv = Self { kernel, bias };
        conv.validate()?;
        Ok(conv)
    }

    /// Uniform init in `±1/√(c_in·k·k)`, bias included.
    pub fn init(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let n = c_out * c_in * k * k;
        let kernel = Tensor::from_parts(
            vec![c_out, c_in, k, k],
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        );
        let bias = (0..c_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { kernel, bias }
    }

    pub fn seeded(c_in: usize, c_out: usize, k: usize, seed: u64) -> Self {
        Self::init(c_in, c_out, k, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `k×k` kernel that copies each channel through unchanged.
    pub fn identity(c: usize, k: usize) -> Self {
        let mut kernel = Tensor::zeros(&[c, c, k, k]);
        let centre = k / 2;
        for ch in 0..c {
            kernel.data_mut()[((ch * c + ch) * k + centre) * k + centre] = 1.0;
        }
        Self {
            kernel,
            bias: vec![0.0; c],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        match self.kernel.shape() {
            [co, _, k, k2] if k == k2 && k % 2 == 1 && self.bias.len() == *co => Ok(()),
            s => Err(Error::dim(format!(
                "conv kernel {s:?} with {} biases is not a valid square odd kernel",
                self.bias.len()
            ))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.kernel, Some(&self.bias), self.kernel_size() / 2)
    }
}
