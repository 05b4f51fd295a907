//! Scans world seeds and reports how well the understanding model separates
//! attributes on the held-out style of each class.
//!
//! cargo run --release --example featurizer_seed_search -- <lo> <hi> [steps] [batch]

use arflow::evaluator::{alignment_accuracy, Judge};
use arflow::models::Pipeline;
use arflow::trainer::{run_stage, Stage, TrainConfig};
use arflow::world::{ImageGrid, PromptSpec, World, WorldConfig};

fn main() -> arflow::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (lo, hi) = (args.first().copied().unwrap_or(0), args.get(1).copied().unwrap_or(8));
    let steps = args.get(2).copied().unwrap_or(3000) as usize;
    let batch = args.get(3).copied().unwrap_or(64) as usize;
    for seed in lo..hi {
        let world = World::generate(WorldConfig {
            seed,
            ..WorldConfig::default()
        })?;
        let mut cfg = TrainConfig::new(Pipeline::ClipFm, Stage::UnderstandingPretrain);
        cfg.world = world.config;
        cfg.steps = steps;
        cfg.batch = batch;
        let (ckpt, _) = run_stage(&cfg, &world, None)?;
        let judge = Judge::from_models(&ckpt.models)?;
        let (_, held) = world.understanding_split();
        let acc = judge.probe(&world, &held)?;
        let all: Vec<(ImageGrid, PromptSpec)> = world.samples.iter().map(|s| (s.image.clone(), s.spec)).collect();
        let joint = alignment_accuracy(&judge, &world, &all)?;
        let worst = acc.iter().cloned().fold(1.0, f64::min);
        println!("seed {seed}: heldout {acc:?} min {worst:.3} all-four {joint:.3}");
    }
    Ok(())
}
