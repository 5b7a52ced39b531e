//! Shared fixtures for the benchmarks.

use atbsn_core::{BsnConfig, Dims, Tensor};

/// Deterministic pseudo-random image in `[0, 1)`.
pub fn image(n: usize, c: usize, size: usize) -> Tensor<f32> {
    let mut s: u32 = 0x9e37_79b9;
    Tensor::from_fn(Dims::new(n, c, size, size), |_, _, _, _| {
        s ^= s << 13;
        s ^= s >> 17;
        s ^= s << 5;
        (s >> 8) as f32 / (1u32 << 24) as f32
    })
}

/// The desk-scale trunk used by the experiments.
pub fn desk_config() -> BsnConfig {
    BsnConfig {
        input_channels: 3,
        base_channels: 16,
        pool_levels: 2,
        head_channels: 32,
    }
}
