//! Training stages: understanding pretraining, generation pretraining
//! (sequential with a frozen backbone, or joint with mixed batches), and
//! instruction tuning on a targeted split.

mod checkpoint;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::conditioner::{Conditioner, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::models::{Component, Models, Pipeline};
use crate::numerics::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::objectives::{flow_loss_graph, make_flow_sample, FlowSample};
use crate::rng::stream;
use crate::velocity::VelocityConfig;
use crate::world::{tokenize, train_semantic_decoder, DecoderTrainConfig, LatentSpace, TokenSeq, World, WorldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Sequential,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    UnderstandingPretrain,
    GenerationPretrain,
    InstructionTune,
}

fn default_mix_ratio() -> f32 {
    0.5
}
fn default_steps() -> usize {
    2000
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
fn default_log_every() -> usize {
    50
}
fn default_kv_heads() -> usize {
    2
}

/// One training stage. The JSON form mirrors the fields one-to-one; omitted
/// fields take their defaults and unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    #[serde(default)]
    pub strategy: Strategy,
    /// Fraction of understanding samples per batch; joint only.
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f32,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default)]
    pub seed: u64,
    pub stage: Stage,
    #[serde(default)]
    pub world: WorldConfig,
    /// Steps for the semantic decoder, trained once before the first
    /// semantic generation stage.
    #[serde(default = "default_decoder_steps")]
    pub decoder_steps: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_kv_heads")]
    pub kv_heads: usize,
}

impl TrainConfig {
    pub fn new(pipeline: Pipeline, stage: Stage) -> Self {
        Self {
            pipeline,
            strategy: Strategy::Sequential,
            mix_ratio: default_mix_ratio(),
            steps: default_steps(),
            batch: default_batch(),
            lr: default_lr(),
            seed: 0,
            stage,
            world: WorldConfig::default(),
            decoder_steps: default_decoder_steps(),
            log_every: default_log_every(),
            kv_heads: default_kv_heads(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} is not a positive finite rate", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::config("mix_ratio", format!("{} is outside [0, 1]", self.mix_ratio)));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if self.strategy == Strategy::Joint && self.stage != Stage::GenerationPretrain {
            return Err(Error::config("strategy", "joint training applies to the generation_pretrain stage only"));
        }
        if ![16, 32].contains(&self.world.resolution) {
            return Err(Error::config("world.resolution", format!("{} is not 16 or 32", self.world.resolution)));
        }
        if self.world.styles == 0 {
            return Err(Error::config("world.styles", "must be at least 1"));
        }
        self.velocity_config().validate()
    }

    pub fn velocity_config(&self) -> VelocityConfig {
        VelocityConfig {
            kv_heads: self.kv_heads,
            ..VelocityConfig::new(self.pipeline.space(), self.world.resolution)
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One logged point. `loss` is the total; the parts are present when the
/// stage computes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f32,
    pub understanding: Option<f32>,
    pub generation: Option<f32>,
}

/// Loss curve of one stage. The point at step 0 holds the first batch's
/// loss; each later point at step `s` averages steps `s - log_every + 1 ..= s`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn steps(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.step).collect()
    }

    pub fn losses(&self) -> Vec<f32> {
        self.points.iter().map(|p| p.loss).collect()
    }

    /// Mean total loss over points with `lo <= step < hi`.
    pub fn window_mean(&self, lo: usize, hi: usize) -> Option<f32> {
        let v: Vec<f32> = self
            .points
            .iter()
            .filter(|p| p.step >= lo && p.step < hi)
            .map(|p| p.loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f32>() / v.len() as f32)
    }
}

struct Logger {
    every: usize,
    acc: [f64; 3],
    present: [bool; 2],
    n: usize,
    curve: Curve,
}

impl Logger {
    fn new(every: usize) -> Self {
        Self {
            every,
            acc: [0.0; 3],
            present: [false; 2],
            n: 0,
            curve: Curve::default(),
        }
    }

    fn record(&mut self, step: usize, loss: f32, und: Option<f32>, gen: Option<f32>) {
        self.acc[0] += loss as f64;
        self.acc[1] += und.unwrap_or(0.0) as f64;
        self.acc[2] += gen.unwrap_or(0.0) as f64;
        self.present = [und.is_some(), gen.is_some()];
        self.n += 1;
        if step % self.every == 0 {
            let n = self.n as f64;
            let part = |i: usize| self.present[i - 1].then_some((self.acc[i] / n) as f32);
            self.curve.points.push(CurvePoint {
                step,
                loss: (self.acc[0] / n) as f32,
                understanding: part(1),
                generation: part(2),
            });
            self.acc = [0.0; 3];
            self.n = 0;
        }
    }
}

/// Seed stream ids for the data order of each stage.
const STREAM_UNDERSTANDING: u64 = 0x20;
const STREAM_GENERATION: u64 = 0x21;
const STREAM_JOINT: u64 = 0x22;
const STREAM_TUNE: u64 = 0x23;

const SNAPSHOT_EVERY: usize = 250;

/// Number of targeted classes in the instruction-tuning split.
pub const TARGETED_CLASS_STRIDE: usize = 8;
/// Allowed drop in non-targeted alignment after instruction tuning.
pub const TUNE_GUARDRAIL: f64 = 0.02;

/// Classes whose index is `3 mod 8`: one of each shape × color pairing
/// pattern, 16 in all.
pub fn targeted_classes() -> Vec<usize> {
    (0..crate::world::NUM_CLASSES)
        .filter(|c| c % TARGETED_CLASS_STRIDE == 3)
        .collect()
}

/// Samples of the targeted classes in their held-out style. They are kept
/// out of generation pretraining and used alone for instruction tuning.
pub fn tuning_split(world: &World) -> Vec<usize> {
    targeted_classes()
        .into_iter()
        .map(|c| world.index(c, world.heldout_style(c)))
        .collect()
}

/// Every sample outside the tuning split.
pub fn generation_split(world: &World) -> Vec<usize> {
    let tune = tuning_split(world);
    (0..world.len()).filter(|i| !tune.contains(i)).collect()
}

fn check_world(cfg: &TrainConfig, world: &World) -> Result<()> {
    if world.config != cfg.world {
        return Err(Error::config("world", "training world does not match the configured world"));
    }
    Ok(())
}

fn check_base_world(ckpt: &Checkpoint, world: &World) -> Result<()> {
    if ckpt.models.world != world.config {
        return Err(Error::config("world", "checkpoint was trained on a different world"));
    }
    Ok(())
}

/// Keeps a copy of the last state with a finite loss and restores it when
/// training diverges.
struct Guard {
    models: Models,
    optimizer: Adam,
}

impl Guard {
    fn new(ckpt: &Checkpoint) -> Self {
        Self {
            models: ckpt.models.clone(),
            optimizer: ckpt.optimizer.clone(),
        }
    }

    fn maybe_snapshot(&mut self, step: usize, ckpt: &Checkpoint) {
        if step % SNAPSHOT_EVERY == 0 {
            *self = Self::new(ckpt);
        }
    }

    fn restore(self, ckpt: &mut Checkpoint, err: Error) -> Error {
        ckpt.models = self.models;
        ckpt.optimizer = self.optimizer;
        err
    }
}

fn check_finite(step: usize, what: &str, v: f32) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} loss is {v}"),
        })
    }
}

/// Adds the understanding loss for `indices` to the tape: attribute
/// cross-entropy read from the pooled image latent plus the same read from
/// the prompt, both through the one understanding head.
fn understanding_term(g: &mut Graph, models: &Models, world: &World, indices: &[usize]) -> Result<Var> {
    let rows: Vec<Vec<f32>> = indices.iter().map(|&i| world.samples[i].semantic.pooled()).collect();
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    let x = g.constant(Tensor::stack_rows(&refs)?);
    let logits = models.conditioner.understand_graph(g, &models.store, x)?;
    let labels: Vec<[usize; 4]> = indices.iter().map(|&i| world.samples[i].spec.labels()).collect();
    let image = Conditioner::understanding_loss(g, logits, &labels)?;
    let prompts: Vec<TokenSeq> = indices.iter().map(|&i| tokenize(&world.samples[i].spec)).collect();
    let logits = models.conditioner.read_prompt_graph(g, &models.store, &prompts)?;
    let text = Conditioner::understanding_loss(g, logits, &labels)?;
    g.add(image, text)
}

/// Adds the generation loss of `pipeline` for `indices` to the tape.
fn generation_term(
    g: &mut Graph,
    models: &Models,
    world: &World,
    pipeline: Pipeline,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let prompts: Vec<TokenSeq> = indices.iter().map(|&i| tokenize(&world.samples[i].spec)).collect();
    let store = &models.store;
    let q = models.conditioner.condition_graph(g, store, &prompts)?;
    match pipeline {
        Pipeline::ClipMse => {
            let head = models.mse_head.as_ref().ok_or_else(|| Error::MissingStage("mse_head".into()))?;
            let pred = head.forward(g, store, q)?;
            let rows: Vec<&[f32]> = indices.iter().map(|&i| world.samples[i].semantic.tokens.data()).collect();
            let t = Tensor::stack_rows(&rows)?;
            let n = t.len() / crate::world::SEMANTIC_DIM;
            let target = g.constant(t.reshape([n, crate::world::SEMANTIC_DIM])?);
            g.mse(pred, target)
        }
        Pipeline::ClipFm | Pipeline::VaeFm => {
            let net = models.velocity.as_ref().ok_or_else(|| Error::MissingStage("velocity".into()))?;
            let samples: Vec<FlowSample> = indices
                .iter()
                .map(|&i| make_flow_sample(&world.latent(i, pipeline.space()), rng))
                .collect::<Result<_>>()?;
            flow_loss_graph(g, &samples, |g, xt, ts| net.forward(g, store, xt, q, ts))
        }
    }
}

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
}

/// Cross-entropy training of the understanding path on the understanding
/// split. Statistics for input standardization are fixed from the training
/// split the first time this stage runs.
pub fn train_understanding(cfg: &TrainConfig, world: &World, ckpt: &mut Checkpoint) -> Result<Curve> {
    cfg.validate()?;
    check_world(cfg, world)?;
    check_base_world(ckpt, world)?;
    if cfg.stage != Stage::UnderstandingPretrain {
        return Err(Error::config("stage", "train_understanding runs the understanding_pretrain stage"));
    }
    let (train, _) = world.understanding_split();
    ckpt.models.store.set_frozen_prefix(BACKBONE_PREFIX, false);
    if !ckpt.models.is_trained(Component::Understanding) {
        let pooled: Vec<Vec<f32>> = train.iter().map(|&i| world.samples[i].semantic.pooled()).collect();
        let m = &mut ckpt.models;
        m.conditioner.set_understanding_stats(&mut m.store, &pooled)?;
    }
    ckpt.optimizer = Adam::new(cfg.adam());
    let mut rng = stream(cfg.seed, STREAM_UNDERSTANDING);
    let mut log = Logger::new(cfg.log_every);
    let mut guard = Guard::new(ckpt);
    for step in 0..cfg.steps {
        guard.maybe_snapshot(step, ckpt);
        let idx = draw(&train, cfg.batch, &mut rng);
        let mut g = Graph::new();
        let loss = understanding_term(&mut g, &ckpt.models, world, &idx)?;
        let lv = g.value(loss).item()?;
        let res = check_finite(step, "understanding", lv)
            .and_then(|_| g.backward(loss))
            .and_then(|grads| ckpt.optimizer.step(&mut ckpt.models.store, &grads));
        if let Err(e) = res {
            return Err(guard.restore(ckpt, e));
        }
        log.record(step, lv, Some(lv), None);
    }
    ckpt.step += cfg.steps as u64;
    ckpt.models.trained.insert(Component::Understanding);
    ckpt.config = Some(cfg.clone());
    Ok(log.curve)
}

/// Trains the semantic decoder if `pipeline` needs one and it is missing.
pub fn ensure_decoder(cfg: &TrainConfig, world: &World, ckpt: &mut Checkpoint) -> Result<()> {
    if cfg.pipeline.space() != LatentSpace::Semantic || ckpt.models.is_trained(Component::SemanticDecoder) {
        return Ok(());
    }
    let dcfg = DecoderTrainConfig {
        steps: cfg.decoder_steps,
        lr: cfg.lr,
        seed: cfg.seed,
        ..DecoderTrainConfig::default()
    };
    let (dec, _) = train_semantic_decoder(&mut ckpt.models.store, world, dcfg)?;
    ckpt.models.decoder = Some(dec);
    ckpt.models.trained.insert(Component::SemanticDecoder);
    Ok(())
}

fn ensure_head(cfg: &TrainConfig, ckpt: &mut Checkpoint) -> Result<()> {
    match cfg.pipeline {
        Pipeline::ClipMse => ckpt.models.ensure_mse_head(cfg.seed).map(|_| ()),
        Pipeline::ClipFm | Pipeline::VaeFm => ckpt.models.ensure_velocity(cfg.velocity_config(), cfg.seed).map(|_| ()),
    }
}

fn head_component(p: Pipeline) -> Component {
    match p {
        Pipeline::ClipMse => Component::MseHead,
        Pipeline::ClipFm | Pipeline::VaeFm => Component::Velocity,
    }
}

/// Called with the number of completed steps and the current models.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &Models) -> Result<()>;

/// Generation steps over `pool` with the backbone frozen.
fn generation_loop(
    cfg: &TrainConfig,
    world: &World,
    ckpt: &mut Checkpoint,
    pool: &[usize],
    stream_id: u64,
    mut hook: Option<(&[usize], StepHook)>,
) -> Result<Curve> {
    ckpt.models.store.set_frozen_prefix(BACKBONE_PREFIX, true);
    ckpt.optimizer = Adam::new(cfg.adam());
    let mut rng = stream(cfg.seed, stream_id);
    let mut log = Logger::new(cfg.log_every);
    let mut guard = Guard::new(ckpt);
    for step in 0..cfg.steps {
        guard.maybe_snapshot(step, ckpt);
        let idx = draw(pool, cfg.batch, &mut rng);
        let mut g = Graph::new();
        let loss = generation_term(&mut g, &ckpt.models, world, cfg.pipeline, &idx, &mut rng)?;
        let lv = g.value(loss).item()?;
        let res = check_finite(step, "generation", lv)
            .and_then(|_| g.backward(loss))
            .and_then(|grads| ckpt.optimizer.step(&mut ckpt.models.store, &grads));
        if let Err(e) = res {
            return Err(guard.restore(ckpt, e));
        }
        log.record(step, lv, None, Some(lv));
        if let Some((at, f)) = hook.as_mut() {
            if at.contains(&(step + 1)) {
                f(step + 1, &ckpt.models)?;
            }
        }
    }
    ckpt.step += cfg.steps as u64;
    ckpt.config = Some(cfg.clone());
    Ok(log.curve)
}

/// Sequential generation pretraining: the backbone is frozen and only the
/// queries and the generation head learn.
pub fn train_generation(cfg: &TrainConfig, world: &World, ckpt: &mut Checkpoint) -> Result<Curve> {
    train_generation_observed(cfg, world, ckpt, &[], &mut |_, _| Ok(()))
}

/// [`train_generation`] that calls `hook` after each step count listed in
/// `at`. The hook sees the generation head marked as trained.
pub fn train_generation_observed(
    cfg: &TrainConfig,
    world: &World,
    ckpt: &mut Checkpoint,
    at: &[usize],
    hook: StepHook,
) -> Result<Curve> {
    cfg.validate()?;
    check_world(cfg, world)?;
    check_base_world(ckpt, world)?;
    if cfg.stage != Stage::GenerationPretrain || cfg.strategy != Strategy::Sequential {
        return Err(Error::config("strategy", "train_generation runs sequential generation_pretrain"));
    }
    ckpt.models.require(Component::Understanding)?;
    ensure_decoder(cfg, world, ckpt)?;
    ensure_head(cfg, ckpt)?;
    let component = head_component(cfg.pipeline);
    let mut marked = |step: usize, models: &Models| {
        let mut view = models.clone();
        view.trained.insert(component);
        hook(step, &view)
    };
    let observe: Option<(&[usize], StepHook)> = (!at.is_empty()).then_some((at, &mut marked));
    let curve = generation_loop(cfg, world, ckpt, &generation_split(world), STREAM_GENERATION, observe)?;
    ckpt.models.trained.insert(component);
    Ok(curve)
}

/// Joint training: each batch holds `round(r·B)` understanding samples and
/// the rest generation samples; the two losses are summed with unit weight
/// and the backbone learns from both.
pub fn train_joint(cfg: &TrainConfig, world: &World, ckpt: &mut Checkpoint) -> Result<Curve> {
    cfg.validate()?;
    check_world(cfg, world)?;
    check_base_world(ckpt, world)?;
    if cfg.strategy != Strategy::Joint {
        return Err(Error::config("strategy", "train_joint needs strategy = joint"));
    }
    let (und_pool, _) = world.understanding_split();
    let gen_pool = generation_split(world);
    let n_und = (cfg.mix_ratio * cfg.batch as f32).round() as usize;
    let n_gen = cfg.batch - n_und;
    if !ckpt.models.is_trained(Component::Understanding) {
        let pooled: Vec<Vec<f32>> = und_pool.iter().map(|&i| world.samples[i].semantic.pooled()).collect();
        let m = &mut ckpt.models;
        m.conditioner.set_understanding_stats(&mut m.store, &pooled)?;
    }
    if n_gen > 0 {
        ensure_decoder(cfg, world, ckpt)?;
        ensure_head(cfg, ckpt)?;
    }
    ckpt.models.store.set_frozen_prefix(BACKBONE_PREFIX, false);
    ckpt.optimizer = Adam::new(cfg.adam());
    let mut rng = stream(cfg.seed, STREAM_JOINT);
    let mut log = Logger::new(cfg.log_every);
    let mut guard = Guard::new(ckpt);
    for step in 0..cfg.steps {
        guard.maybe_snapshot(step, ckpt);
        let und_idx = draw(&und_pool, n_und, &mut rng);
        let gen_idx = draw(&gen_pool, n_gen, &mut rng);
        let mut g = Graph::new();
        let und = (n_und > 0)
            .then(|| understanding_term(&mut g, &ckpt.models, world, &und_idx))
            .transpose()?;
        let gen = (n_gen > 0)
            .then(|| generation_term(&mut g, &ckpt.models, world, cfg.pipeline, &gen_idx, &mut rng))
            .transpose()?;
        let loss = match (und, gen) {
            (Some(u), Some(v)) => g.add(u, v)?,
            (Some(u), None) => u,
            (None, Some(v)) => v,
            (None, None) => unreachable!("batch is at least 1"),
        };
        let part = |v: Option<Var>| v.map(|v| g.value(v).item()).transpose();
        let (uv, gv) = (part(und)?, part(gen)?);
        let lv = g.value(loss).item()?;
        let res = check_finite(step, "joint", lv)
            .and_then(|_| g.backward(loss))
            .and_then(|grads| ckpt.optimizer.step(&mut ckpt.models.store, &grads));
        if let Err(e) = res {
            return Err(guard.restore(ckpt, e));
        }
        log.record(step, lv, uv, gv);
    }
    ckpt.step += cfg.steps as u64;
    if n_und > 0 {
        ckpt.models.trained.insert(Component::Understanding);
    }
    if n_gen > 0 {
        ckpt.models.trained.insert(head_component(cfg.pipeline));
    }
    ckpt.config = Some(cfg.clone());
    Ok(log.curve)
}

/// Continues generation training on the tuning split alone, backbone frozen.
pub fn instruction_tune(cfg: &TrainConfig, world: &World, ckpt: &mut Checkpoint) -> Result<Curve> {
    cfg.validate()?;
    check_world(cfg, world)?;
    check_base_world(ckpt, world)?;
    if cfg.stage != Stage::InstructionTune {
        return Err(Error::config("stage", "instruction_tune runs the instruction_tune stage"));
    }
    ckpt.models.require_pipeline(cfg.pipeline)?;
    generation_loop(cfg, world, ckpt, &tuning_split(world), STREAM_TUNE, None)
}

/// Runs the stage named by `cfg`, starting from `base` or from fresh
/// models. On divergence `base` is not returned; use the stage functions
/// directly to keep the last finite state.
pub fn run_stage(cfg: &TrainConfig, world: &World, base: Option<Checkpoint>) -> Result<(Checkpoint, Curve)> {
    cfg.validate()?;
    let mut ckpt = match base {
        Some(c) => c,
        None => Checkpoint::fresh(world, cfg.seed)?,
    };
    let curve = run_stage_in_place(cfg, world, &mut ckpt)?;
    Ok((ckpt, curve))
}

/// Dispatches on `cfg.stage` and `cfg.strategy`, mutating `ckpt`. On
/// divergence `ckpt` holds the last finite state.
pub fn run_stage_in_place(cfg: &TrainConfig, world: &World, ckpt: &mut Checkpoint) -> Result<Curve> {
    match (cfg.stage, cfg.strategy) {
        (Stage::UnderstandingPretrain, _) => train_understanding(cfg, world, ckpt),
        (Stage::GenerationPretrain, Strategy::Sequential) => train_generation(cfg, world, ckpt),
        (Stage::GenerationPretrain, Strategy::Joint) => train_joint(cfg, world, ckpt),
        (Stage::InstructionTune, _) => instruction_tune(cfg, world, ckpt),
    }
}

/// Random draw helper shared with the examples: `n` distinct classes.
pub fn pick_classes(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, 0x30);
    let mut all: Vec<usize> = (0..crate::world::NUM_CLASSES).collect();
    for i in 0..n.min(all.len()) {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    all.truncate(n);
    all
}
