//! Trains generation two ways from one understanding model: with the
//! backbone frozen, and jointly with understanding data mixed in. Reports
//! how each leaves the held-out understanding probe.
//!
//! cargo run --release --example joint_vs_sequential -- [steps] [mix_ratio]

use arflow::evaluator::Judge;
use arflow::models::Pipeline;
use arflow::trainer::{run_stage, Stage, Strategy, TrainConfig};
use arflow::world::{World, WorldConfig};

fn main() -> arflow::Result<()> {
    let steps = std::env::args().nth(1).map_or(1000, |s| s.parse().expect("step count"));
    let ratio = std::env::args().nth(2).map_or(0.5, |s| s.parse().expect("ratio in [0, 1]"));
    let world = World::generate(WorldConfig::default())?;
    let (_, held) = world.understanding_split();
    let und = TrainConfig {
        steps: 2000,
        batch: 64,
        ..TrainConfig::new(Pipeline::ClipFm, Stage::UnderstandingPretrain)
    };
    let (base, _) = run_stage(&und, &world, None)?;
    println!("base: probe {:.3?}", Judge::from_models(&base.models)?.probe(&world, &held)?);
    for strategy in [Strategy::Sequential, Strategy::Joint] {
        let cfg = TrainConfig {
            steps,
            strategy,
            mix_ratio: ratio,
            ..TrainConfig::new(Pipeline::ClipFm, Stage::GenerationPretrain)
        };
        let (ck, curve) = run_stage(&cfg, &world, Some(base.clone()))?;
        let last = curve.points.last().expect("points");
        println!(
            "{strategy:?}: backbone unchanged {}, probe {:.3?}, final losses understanding {:?} generation {:?}",
            ck.backbone_hash() == base.backbone_hash(),
            Judge::from_models(&ck.models)?.probe(&world, &held)?,
            last.understanding,
            last.generation
        );
    }
    Ok(())
}
