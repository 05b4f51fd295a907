//! Pretrains the semantic flow pipeline without the targeted classes'
//! held-out style, tunes on that style alone, and compares alignment on
//! targeted and other classes before and after.
//!
//! cargo run --release --example instruction_tuning -- [generation_steps] [tune_steps]

use arflow::evaluator::{evaluate_pipeline, Judge};
use arflow::models::{Models, Pipeline};
use arflow::sampler::SamplerConfig;
use arflow::trainer::{run_stage, targeted_classes, Stage, TrainConfig, TUNE_GUARDRAIL};
use arflow::world::{PromptSpec, World, WorldConfig, NUM_CLASSES};

fn alignment(models: &Models, judge: &Judge, world: &World, classes: &[usize]) -> arflow::Result<f64> {
    let specs: Vec<PromptSpec> = classes.iter().map(|&c| PromptSpec::from_class(c, 0)).collect::<arflow::Result<_>>()?;
    let seeds: Vec<u64> = (0..4).collect();
    Ok(evaluate_pipeline(models, Pipeline::ClipFm, judge, world, &specs, &seeds, &SamplerConfig::default())?.alignment_acc)
}

fn main() -> arflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("step count")).collect();
    let world = World::generate(WorldConfig::default())?;
    let und = TrainConfig {
        steps: 2000,
        batch: 64,
        ..TrainConfig::new(Pipeline::ClipFm, Stage::UnderstandingPretrain)
    };
    let (base, _) = run_stage(&und, &world, None)?;
    let judge = Judge::from_models(&base.models)?;
    let gen = TrainConfig {
        steps: args.first().copied().unwrap_or(3000),
        ..TrainConfig::new(Pipeline::ClipFm, Stage::GenerationPretrain)
    };
    let (pre, _) = run_stage(&gen, &world, Some(base))?;
    let tune = TrainConfig {
        steps: args.get(1).copied().unwrap_or(300),
        ..TrainConfig::new(Pipeline::ClipFm, Stage::InstructionTune)
    };
    let (post, _) = run_stage(&tune, &world, Some(pre.clone()))?;

    let targeted = targeted_classes();
    let others: Vec<usize> = (0..NUM_CLASSES).filter(|c| !targeted.contains(c)).step_by(7).collect();
    let (t0, t1) = (alignment(&pre.models, &judge, &world, &targeted)?, alignment(&post.models, &judge, &world, &targeted)?);
    let (o0, o1) = (alignment(&pre.models, &judge, &world, &others)?, alignment(&post.models, &judge, &world, &others)?);
    println!("targeted classes: alignment {t0:.3} -> {t1:.3}");
    println!("other classes:    alignment {o0:.3} -> {o1:.3} (allowed drop {TUNE_GUARDRAIL})");
    println!("targeted not worse: {}, guardrail held: {}", t1 >= t0, o0 - o1 <= TUNE_GUARDRAIL);
    Ok(())
}
