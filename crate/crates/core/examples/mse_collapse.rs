//! Trains the regression pipeline and shows that its output for a prompt
//! sits at the mean of the class's styles rather than on any one of them.
//!
//! cargo run --release --example mse_collapse -- [understanding_steps] [generation_steps]

use arflow::models::Pipeline;
use arflow::trainer::{run_stage, Stage, TrainConfig};
use arflow::world::{tokenize, PromptSpec, TokenSeq, World, WorldConfig, NUM_CLASSES};

fn main() -> arflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("step count")).collect();
    let world = World::generate(WorldConfig::default())?;
    let und = TrainConfig {
        steps: args.first().copied().unwrap_or(2000),
        batch: 64,
        ..TrainConfig::new(Pipeline::ClipMse, Stage::UnderstandingPretrain)
    };
    let (base, _) = run_stage(&und, &world, None)?;
    let gen = TrainConfig {
        steps: args.get(1).copied().unwrap_or(3000),
        decoder_steps: 1,
        ..TrainConfig::new(Pipeline::ClipMse, Stage::GenerationPretrain)
    };
    let (ck, curve) = run_stage(&gen, &world, Some(base))?;
    println!("regression loss {:.4} -> {:.4}", curve.points[0].loss, curve.points.last().expect("points").loss);

    let m = &ck.models;
    let prompts: Vec<TokenSeq> = (0..NUM_CLASSES).map(|c| PromptSpec::from_class(c, 0).map(|s| tokenize(&s))).collect::<arflow::Result<_>>()?;
    let q = m.conditioner.condition_batch(&m.store, &prompts)?;
    let pred = m.mse_head.as_ref().expect("trained head").predict(&m.store, &q)?;
    let mut closer = 0;
    for c in 0..NUM_CLASSES {
        let p = pred.slice_rows(c * 8, 8)?;
        let to_mean = p.mean_sq_diff(&world.class_centroid(c))?;
        let to_style = (0..world.config.styles)
            .map(|s| p.mean_sq_diff(&world.sample(c, s).semantic.tokens))
            .collect::<arflow::Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if c % 32 == 0 {
            println!("class {c:3}: distance to style mean {to_mean:.3}, to nearest style {to_style:.3}");
        }
        closer += (to_mean < to_style) as usize;
    }
    println!("{closer}/{NUM_CLASSES} classes predicted closer to the style mean");
    Ok(())
}
