//! The design matrix: one understanding run shared by clip_mse, clip_fm and
//! vae_fm, each then trained for the same generation budget and scored at
//! fixed step counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate_pipeline, steps_to_threshold, Judge};
use crate::models::{Models, Pipeline};
use crate::sampler::SamplerConfig;
use crate::trainer::{
    ensure_decoder, pick_classes, run_stage, train_generation_observed, Checkpoint, Curve, Stage, TrainConfig,
};
use crate::world::{PromptSpec, World, WorldConfig};

fn default_understanding_steps() -> usize {
    4000
}
fn default_understanding_batch() -> usize {
    64
}
fn default_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f32 {
    1e-3
}
fn default_decoder_steps() -> usize {
    5000
}
fn default_checkpoints() -> Vec<usize> {
    vec![250, 500, 1000]
}
fn default_prompts() -> usize {
    16
}
fn default_samples() -> usize {
    8
}
fn default_sampler_steps() -> usize {
    50
}
fn default_tau() -> f32 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default = "default_understanding_steps")]
    pub understanding_steps: usize,
    #[serde(default = "default_understanding_batch")]
    pub understanding_batch: usize,
    /// Generation steps per pipeline.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_decoder_steps")]
    pub decoder_steps: usize,
    /// Generation step counts at which each pipeline is scored.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
    #[serde(default = "default_sampler_steps")]
    pub sampler_steps: usize,
    /// Threshold on the loss normalized by its first logged value.
    #[serde(default = "default_tau")]
    pub tau: f32,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::config("checkpoints", "at least one checkpoint is required"));
        }
        if self.checkpoints[0] == 0 || self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("checkpoints", "must be positive and strictly increasing"));
        }
        if *self.checkpoints.last().expect("non-empty") > self.steps {
            return Err(Error::config("checkpoints", format!("exceeds the {} step budget", self.steps)));
        }
        if self.prompts == 0 || self.prompts > crate::world::NUM_CLASSES {
            return Err(Error::config("prompts", format!("{} is not in 1..=128", self.prompts)));
        }
        if self.samples_per_prompt < 2 {
            return Err(Error::config("samples_per_prompt", "must be at least 2"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", format!("{} is outside (0, 1)", self.tau)));
        }
        self.sampler().validate()?;
        self.understanding_config().validate()?;
        Pipeline::ALL.iter().try_for_each(|&p| self.generation_config(p).validate())
    }

    pub fn understanding_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.understanding_steps,
            batch: self.understanding_batch,
            lr: self.lr,
            seed: self.seed,
            world: self.world,
            decoder_steps: self.decoder_steps,
            ..TrainConfig::new(Pipeline::ClipFm, Stage::UnderstandingPretrain)
        }
    }

    pub fn generation_config(&self, pipeline: Pipeline) -> TrainConfig {
        TrainConfig {
            pipeline,
            stage: Stage::GenerationPretrain,
            steps: self.steps,
            batch: self.batch,
            ..self.understanding_config()
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sampler_steps,
            ..SamplerConfig::default()
        }
    }

    /// Evaluation prompts: distinct classes drawn from the matrix seed.
    pub fn prompts(&self) -> Vec<PromptSpec> {
        pick_classes(self.prompts, self.seed)
            .into_iter()
            .map(|c| PromptSpec::from_class(c, 0).expect("class in range"))
            .collect()
    }

    pub fn sample_seeds(&self) -> Vec<u64> {
        (0..self.samples_per_prompt as u64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub pipeline: Pipeline,
    pub step: usize,
    pub alignment_acc: f64,
    pub frechet: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub pipeline: Pipeline,
    pub curve: Curve,
    /// First step where the smoothed normalized loss is at or below `tau`.
    pub steps_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    /// Held-out accuracy of the shared understanding model.
    pub probe: [f64; 4],
    pub rows: Vec<MatrixRow>,
    pub runs: Vec<PipelineRun>,
}

impl MatrixResult {
    pub fn rows_for(&self, p: Pipeline) -> impl Iterator<Item = &MatrixRow> {
        self.rows.iter().filter(move |r| r.pipeline == p)
    }

    pub fn run(&self, p: Pipeline) -> Option<&PipelineRun> {
        self.runs.iter().find(|r| r.pipeline == p)
    }
}

/// Loss divided by its first logged value.
pub fn normalized_losses(curve: &Curve) -> Vec<f32> {
    let l = curve.losses();
    match l.first() {
        Some(&l0) if l0 > 0.0 => l.iter().map(|v| v / l0).collect(),
        _ => l,
    }
}

/// Checkpoints left behind by a matrix run.
#[derive(Clone, Debug)]
pub struct MatrixModels {
    /// Understanding model with the shared decoder, before any generation
    /// training.
    pub base: Checkpoint,
    pub trained: BTreeMap<Pipeline, Checkpoint>,
}

/// Runs the whole matrix on `world`, which must match `cfg.world`.
pub fn run_matrix(cfg: &MatrixConfig, world: &World) -> Result<MatrixResult> {
    Ok(run_matrix_with_models(cfg, world)?.0)
}

/// [`run_matrix`] that also returns every checkpoint it trained.
pub fn run_matrix_with_models(cfg: &MatrixConfig, world: &World) -> Result<(MatrixResult, MatrixModels)> {
    cfg.validate()?;
    if world.config != cfg.world {
        return Err(Error::config("world", "matrix world does not match the configured world"));
    }
    log::info!("understanding pretraining: {} steps", cfg.understanding_steps);
    let (mut base, _) = run_stage(&cfg.understanding_config(), world, None)?;
    // one decoder shared by both semantic pipelines
    ensure_decoder(&cfg.generation_config(Pipeline::ClipFm), world, &mut base)?;
    let judge = Judge::from_models(&base.models)?;
    let (_, held) = world.understanding_split();
    let probe = judge.probe(world, &held)?;
    log::info!("held-out probe {probe:?}");

    let specs = cfg.prompts();
    let seeds = cfg.sample_seeds();
    let sampler = cfg.sampler();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut trained = BTreeMap::new();
    for p in Pipeline::ALL {
        let gcfg = cfg.generation_config(p);
        let mut ckpt: Checkpoint = base.clone();
        let mut score = |step: usize, models: &Models| -> Result<()> {
            let m = evaluate_pipeline(models, p, &judge, world, &specs, &seeds, &sampler)?;
            log::info!("{p} step {step}: {m:?}");
            rows.push(MatrixRow {
                pipeline: p,
                step,
                alignment_acc: m.alignment_acc,
                frechet: m.frechet,
                diversity: m.diversity,
            });
            Ok(())
        };
        let curve = train_generation_observed(&gcfg, world, &mut ckpt, &cfg.checkpoints, &mut score)?;
        let steps_to_threshold = steps_to_threshold(&curve.steps(), &normalized_losses(&curve), cfg.tau)?;
        runs.push(PipelineRun {
            pipeline: p,
            curve,
            steps_to_threshold,
        });
        trained.insert(p, ckpt);
    }
    Ok((MatrixResult { probe, rows, runs }, MatrixModels { base, trained }))
}
