//! Fits the semantic decoder and compares its reconstruction error with
//! the exact pixel codec and with predicting the mean image.
//!
//! cargo run --release --example semantic_decoder -- [steps]

use arflow::numerics::ParamStore;
use arflow::world::{train_semantic_decoder, DecoderTrainConfig, LatentSeq, World, WorldConfig};

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn main() -> arflow::Result<()> {
    let steps = std::env::args().nth(1).map_or(5000, |s| s.parse().expect("step count"));
    let world = World::generate(WorldConfig::default())?;
    let mut store = ParamStore::new();
    let cfg = DecoderTrainConfig {
        steps,
        ..DecoderTrainConfig::default()
    };
    let (dec, curve) = train_semantic_decoder(&mut store, &world, cfg)?;
    println!("decoder loss {:.4} -> {:.4}", curve[0], curve[curve.len() - 1]);

    let n = world.len() as f32;
    let mut mean = vec![0.0f32; world.samples[0].image.data.len()];
    for s in &world.samples {
        mean.iter_mut().zip(&s.image.data).for_each(|(m, v)| *m += v / n);
    }
    let lats: Vec<LatentSeq> = world.samples.iter().map(|s| s.semantic.clone()).collect();
    let decoded = dec.decode_batch(&store, &lats)?;
    let (mut pixel, mut semantic, mut baseline) = (0.0, 0.0, 0.0);
    for (s, d) in world.samples.iter().zip(&decoded) {
        let back = world.decode_pixel(&world.encode_pixel(&s.image))?;
        pixel += mse(&back.data, &s.image.data) / n as f64;
        semantic += mse(&d.data, &s.image.data) / n as f64;
        baseline += mse(&mean, &s.image.data) / n as f64;
    }
    println!("pixel codec {pixel:.2e}, semantic decoder {semantic:.4}, mean image {baseline:.4}");
    Ok(())
}
