#![allow(dead_code)]

pub mod oracles;

use animator_core::attention::AttentionMode;
use animator_core::backbone::DenoiserConfig;
use animator_core::canvas::{CanvasSpec, InstanceImage, InstanceSet, Placement};
use animator_core::codec::PixelVideo;
use animator_core::encoders::EncoderConfig;
use animator_core::model::{ColorizationModel, ConditionInputs, ModelConfig};
use candle_core::DType;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        factor: 4,
        denoiser: DenoiserConfig {
            hidden: 16,
            blocks: 2,
            heads: 2,
            patch: 1,
            attention_mode: mode,
        },
        encoders: EncoderConfig {
            image_dim: 8,
            image_tokens: 2,
            text_dim: 8,
            text_max_tokens: 8,
            heads: 2,
            patch: 4,
        },
        ..ModelConfig::default()
    }
}

/// A model with every parameter drawn at random so no path is zero.
pub fn randomized_model(config: ModelConfig, seed: u64, dtype: DType) -> ColorizationModel {
    let model = ColorizationModel::new(config, seed, dtype).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for name in model.store.names() {
        let n = model.store.values(&name).unwrap().len();
        let v: Vec<f64> = if name.starts_with("control.") {
            (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
        } else if name.ends_with(".gate.g") {
            vec![rng.random_range(0.3..0.9)]
        } else {
            (0..n).map(|_| rng.random_range(-0.4..0.4)).collect()
        };
        model.store.set_values(&name, &v).unwrap();
    }
    model
}

pub fn square_instance(size: usize, color: [f32; 3]) -> InstanceImage {
    let rgb = Array3::from_shape_fn((size, size, 3), |(_, _, c)| color[c]);
    InstanceImage::with_mask(rgb, Array2::from_elem((size, size), true)).unwrap()
}

/// An 8×8, `frames`-frame input with `n` square instances.
pub fn micro_inputs(seed: u64, frames: usize, n: usize) -> ConditionInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sketches = PixelVideo::new(Array4::from_shape_fn((frames, 8, 8, 3), |_| {
        if rng.random_bool(0.3) {
            0.0
        } else {
            1.0
        }
    }))
    .unwrap();
    let mut instances = InstanceSet::new();
    let mut canvas = CanvasSpec::new(8, 8)
        .with_background(Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y + 2 * x + c) % 7) as f32 / 7.0));
    for i in 0..n {
        let color = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let size = rng.random_range(2..5);
        instances.push(format!("inst_{i}"), square_instance(size, color));
        canvas = canvas.place(Placement {
            instance_id: format!("inst_{i}"),
            x: rng.random_range(-1..7),
            y: rng.random_range(-1..7),
            scale: 1.0,
            z_order: i as i32,
        });
    }
    ConditionInputs {
        canvas,
        instances,
        sketches,
        caption: "a red circle and a blue square".into(),
    }
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
