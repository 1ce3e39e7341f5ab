//! Fixtures shared by the benchmarks.

use shapeprior_core::diffmath::Tensor;
use shapeprior_core::encoder::EncoderConfig;
use shapeprior_core::trainer::TrainConfig;
use shapeprior_core::triplane::TriplaneConfig;

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn tensor(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let x = (i as u64 ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40;
        x as f32 / (1u64 << 23) as f32 - 1.0
    })
}

/// The model sizes of `configs/ablation.cfg`.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        batch: 8,
        lr: 1e-3,
        render_res: 16,
        encoder: EncoderConfig { image_size: 32, patch_size: 8, depth: 4, width: 32, heads: 4 },
        triplane: TriplaneConfig { low_res: 4, res: 16, channels: 16, emb_dim: 32, heads: 4 },
        mlp_hidden: 32,
        max_steps: u64::MAX,
        epochs: 1_000_000,
        checkpoint_every: 0,
        ..Default::default()
    }
}
