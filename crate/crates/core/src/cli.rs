//! The `arflow` command line. Every subcommand writes its artifacts under
//! `--out` together with a `manifest.json` echoing the resolved inputs.
//! Failures print one JSON line on stderr and map to an exit code:
//! 2 for bad flags or config, 3 for a missing checkpoint, 1 otherwise.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::error::Error;
use crate::evaluator::{evaluate_pipeline, steps_to_threshold, CurveData, Judge, RunReport, REPORT_SCHEMA};
use crate::matrix::{normalized_losses, run_matrix, MatrixConfig, MatrixResult};
use crate::models::Pipeline;
use crate::sampler::{generate_batch, Method, SamplerConfig};
use crate::trainer::{config_hash, pick_classes, run_stage_in_place, Checkpoint, Curve, Strategy, TrainConfig};
use crate::world::{tokenize, PromptSpec, World, WorldConfig, DEFAULT_STYLES, DEFAULT_WORLD_SEED};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_CHECKPOINT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "arflow", version, about = "Autoregressive conditioning with flow-matching generation on a shapes world")]
struct Cli {
    /// Repeat for more progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the world and write its blob and JSONL manifest.
    Synth(SynthArgs),
    /// Run one training stage from a JSON config.
    Train(TrainArgs),
    /// Generate one image from a prompt.
    Sample(SampleArgs),
    /// Score a checkpoint and write a run report.
    Eval(EvalArgs),
    /// Train and score all three pipelines from one understanding model.
    Matrix(MatrixArgs),
    /// Held-out attribute accuracy of a checkpoint's understanding model.
    Probe(ProbeArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = DEFAULT_WORLD_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    #[arg(long, default_value_t = DEFAULT_STYLES)]
    styles: usize,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// "<shape> <color> <quadrant> <size>"
    #[arg(long)]
    prompt: String,
    /// Defaults to the pipeline the checkpoint was last trained for.
    #[arg(long)]
    pipeline: Option<Pipeline>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "euler")]
    method: MethodArg,
    /// Image path; the JSON sidecar goes next to it.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Euler,
    Heun,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Euler => Method::Euler,
            MethodArg::Heun => Method::Heun,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Report path.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Checkpoint whose understanding model judges alignment; defaults to `--ckpt`.
    #[arg(long)]
    judge: Option<PathBuf>,
    #[arg(long)]
    pipeline: Option<Pipeline>,
    /// `curve.json` written by `train`.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    tau: f32,
    #[arg(long, default_value_t = 16)]
    prompts: usize,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Selects the evaluation prompts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct MatrixArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(clap::Error),
    MissingCheckpoint(PathBuf),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Run(Error::Config { .. }) => EXIT_CONFIG,
            Failure::MissingCheckpoint(_) => EXIT_MISSING_CHECKPOINT,
            Failure::Run(_) => EXIT_FAILURE,
        }
    }

    /// The single stderr line.
    fn line(&self) -> String {
        let v = match self {
            Failure::Usage(e) => {
                let field = e.get(clap::error::ContextKind::InvalidArg).map(|a| a.to_string());
                let text = e.to_string();
                let message: Vec<&str> = text
                    .lines()
                    .map(str::trim)
                    .take_while(|l| !l.starts_with("Usage:"))
                    .filter(|l| !l.is_empty())
                    .collect();
                json!({"error": "usage", "field": field, "message": message.join(" ").trim_start_matches("error: ")})
            }
            Failure::MissingCheckpoint(p) => {
                json!({"error": "missing_checkpoint", "path": p.display().to_string()})
            }
            Failure::Run(Error::Config { field, reason }) => {
                json!({"error": "config", "field": field, "message": reason})
            }
            Failure::Run(e) => json!({"error": kind(e), "message": e.to_string()}),
        };
        v.to_string()
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Contract(_) => "contract",
        Error::Config { .. } => "config",
        Error::UnsupportedDesign(_) => "unsupported_design",
        Error::MissingStage(_) => "missing_stage",
        Error::Numeric(_) => "numeric",
        Error::Divergence { .. } => "divergence",
        Error::SamplerNan { .. } => "sampler_nan",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => return report(Failure::Usage(e)),
    };
    init_logging(cli.verbose);
    let res = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Matrix(a) => matrix(a),
        Command::Probe(a) => probe(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> i32 {
    eprintln!("{}", f.line());
    f.code()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // a second initialization in the same process keeps the first logger
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

/// Reads a JSON config, naming the offending field on failure.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let field = match unknown_key(&msg) {
            Some(key) if path == "." => key.to_string(),
            _ if path == "." => "config".to_string(),
            _ => path,
        };
        Failure::Run(Error::config(field, msg))
    })
}

fn unknown_key(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(Failure::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, args: &impl Serialize, resolved: serde_json::Value) -> Result<(), Failure> {
    write_manifest_at(&dir.join("manifest.json"), command, args, resolved)
}

/// Manifest for subcommands whose `--out` is a single file.
fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn write_manifest_at(path: &Path, command: &str, args: &impl Serialize, resolved: serde_json::Value) -> Result<(), Failure> {
    write_json(
        path,
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "args": args,
            "resolved": resolved,
        }),
    )
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let cfg = WorldConfig {
        seed: a.seed,
        resolution: a.resolution,
        styles: a.styles,
    };
    if !crate::world::RESOLUTIONS.contains(&cfg.resolution) {
        return Err(Error::config("resolution", format!("{} is not 16 or 32", cfg.resolution)).into());
    }
    if cfg.styles == 0 {
        return Err(Error::config("styles", "must be at least 1").into());
    }
    let world = World::generate(cfg)?;
    world.save(&a.out)?;
    log::info!("wrote {} samples to {}", world.len(), a.out.display());
    write_manifest(&a.out, "synth", a, json!({ "world": cfg, "samples": world.len() }))
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg: TrainConfig = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let world = World::generate(cfg.world)?;
    let mut ckpt = match &a.base {
        Some(p) => load_checkpoint(p)?,
        None => Checkpoint::fresh(&world, cfg.seed)?,
    };
    let base_hash = ckpt.backbone_hash();
    fs::create_dir_all(&a.out)?;
    log::info!("training {:?} for {} steps", cfg.stage, cfg.steps);
    let curve = match run_stage_in_place(&cfg, &world, &mut ckpt) {
        Ok(c) => c,
        Err(e @ Error::Divergence { .. }) => {
            ckpt.save(&a.out.join("last_finite.ckpt"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    ckpt.save(&a.out.join("checkpoint.bin"))?;
    write_json(&a.out.join("curve.json"), &curve)?;
    fs::write(a.out.join("curve.dat"), curve_dat(&curve))?;
    write_manifest(
        &a.out,
        "train",
        a,
        json!({
            "config": cfg,
            "config_hash": config_hash(&cfg),
            "base_backbone_hash": base_hash,
            "backbone_hash": ckpt.backbone_hash(),
            "total_steps": ckpt.step,
        }),
    )
}

fn curve_dat(curve: &Curve) -> String {
    let mut s = String::from("# step loss\n");
    for p in &curve.points {
        writeln!(s, "{} {}", p.step, p.loss).expect("string write");
    }
    s
}

fn resolve_pipeline(given: Option<Pipeline>, ckpt: &Checkpoint) -> Result<Pipeline, Failure> {
    given
        .or_else(|| ckpt.config.as_ref().map(|c| c.pipeline))
        .ok_or_else(|| Error::config("pipeline", "checkpoint names no pipeline; pass --pipeline").into())
}

fn sample(a: &SampleArgs) -> Result<(), Failure> {
    let spec = PromptSpec::parse(&a.prompt)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let pipeline = resolve_pipeline(a.pipeline, &ckpt)?;
    let cfg = SamplerConfig {
        n_steps: a.steps,
        method: a.method.into(),
        seed: a.seed,
    };
    cfg.validate().map_err(|_| Error::config("steps", "must be at least 1"))?;
    let out = generate_batch(&[tokenize(&spec)], &[a.seed], pipeline, &ckpt.models, &cfg)?.remove(0);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, out.image.to_ppm())?;
    let v = out.latent.tokens.data();
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sidecar = json!({
        "prompt": spec.text(),
        "pipeline": pipeline,
        "sampler": cfg,
        "checkpoint_backbone_hash": ckpt.backbone_hash(),
        "resolution": out.image.res,
        "latent": {
            "space": out.latent.space,
            "shape": out.latent.tokens.shape(),
            "mean": mean,
            "std": var.sqrt(),
            "min": v.iter().cloned().fold(f32::INFINITY, f32::min),
            "max": v.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        },
    });
    write_json(&a.out.with_extension("json"), &sidecar)
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let judge_ckpt = match &a.judge {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let pipeline = resolve_pipeline(a.pipeline, &ckpt)?;
    if a.samples < 2 {
        return Err(Error::config("samples", "must be at least 2").into());
    }
    if a.prompts == 0 || a.prompts > crate::world::NUM_CLASSES {
        return Err(Error::config("prompts", format!("{} is not in 1..=128", a.prompts)).into());
    }
    let curve: Curve = match &a.curve {
        Some(p) => read_config(p)?,
        None => Curve::default(),
    };
    let world = World::generate(ckpt.models.world)?;
    let judge = Judge::from_models(&judge_ckpt.as_ref().unwrap_or(&ckpt).models)?;
    let specs: Vec<PromptSpec> = pick_classes(a.prompts, a.seed)
        .into_iter()
        .map(|c| PromptSpec::from_class(c, 0))
        .collect::<crate::Result<_>>()?;
    let seeds: Vec<u64> = (0..a.samples as u64).collect();
    let sampler = SamplerConfig {
        n_steps: a.steps,
        ..SamplerConfig::default()
    };
    let m = evaluate_pipeline(&ckpt.models, pipeline, &judge, &world, &specs, &seeds, &sampler)?;
    let threshold = steps_to_threshold(&curve.steps(), &normalized_losses(&curve), a.tau)?;
    let cfg = ckpt.config.as_ref();
    let report = RunReport {
        schema: REPORT_SCHEMA,
        pipeline,
        strategy: match cfg.map(|c| c.strategy).unwrap_or_default() {
            Strategy::Sequential => "sequential".into(),
            Strategy::Joint => "joint".into(),
        },
        seed: cfg.map(|c| c.seed).unwrap_or_default(),
        frechet: m.frechet,
        alignment_acc: m.alignment_acc,
        diversity: m.diversity,
        steps_to_threshold: threshold,
        curve: CurveData {
            steps: curve.steps(),
            loss: curve.losses(),
        },
    };
    report.validate()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&a.out, &report)?;
    write_manifest_at(
        &sibling_manifest(&a.out),
        "eval",
        a,
        json!({
            "pipeline": pipeline,
            "sampler": sampler,
            "prompts": specs.iter().map(PromptSpec::text).collect::<Vec<_>>(),
            "seeds": seeds,
            "backbone_hash": ckpt.backbone_hash(),
        }),
    )
}

fn probe(a: &ProbeArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let world = World::generate(ckpt.models.world)?;
    let judge = Judge::from_models(&ckpt.models)?;
    let (_, held) = world.understanding_split();
    let acc = judge.probe(&world, &held)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(
        &a.out,
        &json!({
            "shape": acc[0],
            "color": acc[1],
            "quadrant": acc[2],
            "size": acc[3],
            "heldout_samples": held.len(),
            "backbone_hash": ckpt.backbone_hash(),
        }),
    )?;
    write_manifest_at(&sibling_manifest(&a.out), "probe", a, json!({ "world": ckpt.models.world }))
}

fn matrix(a: &MatrixArgs) -> Result<(), Failure> {
    let mut cfg: MatrixConfig = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let world = World::generate(cfg.world)?;
    let result = run_matrix(&cfg, &world)?;
    fs::create_dir_all(&a.out)?;
    write_matrix(&a.out, &result)?;
    write_manifest(&a.out, "matrix", a, json!({ "config": cfg }))
}

/// `matrix.csv`, one `<pipeline>.dat` and `<pipeline>_loss.dat` per
/// pipeline, and the full result as `result.json`.
fn write_matrix(dir: &Path, result: &MatrixResult) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(dir.join("matrix.csv")).map_err(csv_err)?;
    for row in &result.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    for p in Pipeline::ALL {
        let mut s = String::from("# step alignment_acc frechet diversity\n");
        for r in result.rows_for(p) {
            writeln!(s, "{} {} {} {}", r.step, r.alignment_acc, r.frechet, r.diversity).expect("string write");
        }
        fs::write(dir.join(format!("{p}.dat")), s)?;
        if let Some(run) = result.run(p) {
            fs::write(dir.join(format!("{p}_loss.dat")), curve_dat(&run.curve))?;
        }
    }
    write_json(&dir.join("result.json"), result)
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Run(Error::Format(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_config_error() {
        assert_eq!(run(["arflow", "probe", "--ckpt", "x", "--out", "y", "--bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn missing_subcommand_is_a_config_error() {
        assert_eq!(run(["arflow"]), EXIT_CONFIG);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(["arflow", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_key_is_extracted() {
        assert_eq!(unknown_key("unknown field `stpes`, expected one of"), Some("stpes"));
        assert_eq!(unknown_key("invalid type"), None);
    }
}
