//! Trains the semantic flow pipeline and draws several images per prompt,
//! showing seed-dependent variety, and the regression pipeline's lack of it.
//!
//! cargo run --release --example flow_sampling -- [generation_steps] [out_dir]

use std::path::PathBuf;

use arflow::evaluator::{diversity, image_feature};
use arflow::models::Pipeline;
use arflow::sampler::{generate_grid, SamplerConfig};
use arflow::trainer::{run_stage, Stage, TrainConfig};
use arflow::world::{PromptSpec, World, WorldConfig};

fn main() -> arflow::Result<()> {
    let steps = std::env::args().nth(1).map_or(3000, |s| s.parse().expect("step count"));
    let out = PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "flow_sampling_out".into()));
    let world = World::generate(WorldConfig::default())?;
    let und = TrainConfig {
        steps: 2000,
        batch: 64,
        ..TrainConfig::new(Pipeline::ClipFm, Stage::UnderstandingPretrain)
    };
    let (base, _) = run_stage(&und, &world, None)?;
    let specs: Vec<PromptSpec> = [5, 44, 101].iter().map(|&c| PromptSpec::from_class(c, 0)).collect::<arflow::Result<_>>()?;
    let seeds: Vec<u64> = (0..6).collect();
    std::fs::create_dir_all(&out)?;
    for p in [Pipeline::ClipMse, Pipeline::ClipFm] {
        let cfg = TrainConfig {
            steps,
            ..TrainConfig::new(p, Stage::GenerationPretrain)
        };
        let (ck, _) = run_stage(&cfg, &world, Some(base.clone()))?;
        let grid = generate_grid(&specs, &seeds, p, &ck.models, &SamplerConfig::default())?;
        for (spec, chunk) in specs.iter().zip(grid.chunks(seeds.len())) {
            let feats: Vec<Vec<f32>> = chunk.iter().map(|g| image_feature(&world, &g.image)).collect();
            println!("{p} `{}`: diversity over {} seeds {:.4}", spec.text(), seeds.len(), diversity(&feats)?);
            for (seed, g) in seeds.iter().zip(chunk) {
                let name = format!("{p}_c{:03}_seed{seed}.ppm", spec.class_index());
                std::fs::write(out.join(name), g.image.to_ppm())?;
            }
        }
    }
    println!("images written to {}", out.display());
    Ok(())
}
