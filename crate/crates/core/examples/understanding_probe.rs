//! Trains the understanding path and reports held-out attribute accuracy,
//! the ceiling for every alignment score the judge hands out.
//!
//! cargo run --release --example understanding_probe -- [steps]

use arflow::evaluator::{alignment_accuracy, Judge};
use arflow::models::Pipeline;
use arflow::trainer::{run_stage, Stage, TrainConfig};
use arflow::world::{ImageGrid, PromptSpec, World, WorldConfig};

fn main() -> arflow::Result<()> {
    let steps = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("step count"));
    let world = World::generate(WorldConfig::default())?;
    let cfg = TrainConfig {
        steps,
        batch: 64,
        ..TrainConfig::new(Pipeline::ClipFm, Stage::UnderstandingPretrain)
    };
    let (ckpt, curve) = run_stage(&cfg, &world, None)?;
    let first = curve.points[0].loss;
    let last = curve.points.last().expect("non-empty curve").loss;
    println!("loss {first:.3} -> {last:.3} over {steps} steps");
    let judge = Judge::from_models(&ckpt.models)?;
    let (_, held) = world.understanding_split();
    let acc = judge.probe(&world, &held)?;
    println!("held-out accuracy [shape, color, quadrant, size] = {acc:.3?}");
    let renders: Vec<(ImageGrid, PromptSpec)> = world.samples.iter().map(|s| (s.image.clone(), s.spec)).collect();
    println!("all four attributes right on every render: {:.3}", alignment_accuracy(&judge, &world, &renders)?);
    Ok(())
}
