//! Shared fixtures for the criterion benches.

use hved_core::config::RunConfig;
use hved_core::rng::HvedRng;
use hved_core::synth::{generate_phantom, sample_patch, PhantomSample};
use hved_core::train::TrainState;
use hved_core::{Result, Tensor};

/// One convolution shape from the default network.
#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub name: &'static str,
    pub c_in: usize,
    pub c_out: usize,
    pub edge: usize,
    pub stride: usize,
}

/// Encoder convolutions of the default configuration on a 32³ patch.
pub const DEFAULT_CASES: [ConvCase; 4] = [
    ConvCase { name: "l0_8to8_32", c_in: 8, c_out: 8, edge: 32, stride: 1 },
    ConvCase { name: "l0_down_8to16", c_in: 8, c_out: 16, edge: 32, stride: 2 },
    ConvCase { name: "l1_16to16_16", c_in: 16, c_out: 16, edge: 16, stride: 1 },
    ConvCase { name: "l2_32to32_8", c_in: 32, c_out: 32, edge: 8, stride: 1 },
];

impl ConvCase {
    pub fn out_edge(&self) -> usize {
        self.edge.div_ceil(self.stride)
    }

    /// Multiply-adds times two for one forward pass.
    pub fn flops(&self) -> u64 {
        2 * (self.c_in * self.c_out * 27 * self.out_edge().pow(3)) as u64
    }

    /// Input, weight, bias and an upstream gradient for the output.
    pub fn tensors(&self, seed: u64) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let mut rng = HvedRng::seed_from_u64(seed);
        let e = self.edge;
        let o = self.out_edge();
        (
            Tensor::randn(vec![1, self.c_in, e, e, e], &mut rng),
            Tensor::randn(vec![self.c_out, self.c_in, 3, 3, 3], &mut rng),
            Tensor::randn(vec![self.c_out], &mut rng),
            Tensor::randn(vec![1, self.c_out, o, o, o], &mut rng),
        )
    }
}

/// Fresh training state and one cropped patch under `cfg`.
pub fn training_fixture(cfg: &RunConfig) -> Result<(TrainState, PhantomSample)> {
    let state = TrainState::init(cfg)?;
    let sample = generate_phantom(&cfg.phantom, cfg.data_seed)?;
    let (patch, _) = sample_patch(&sample, cfg.network.patch_size, &mut HvedRng::seed_from_u64(cfg.seed))?;
    Ok((state, patch))
}
