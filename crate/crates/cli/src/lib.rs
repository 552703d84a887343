//! Command-line front-end: configuration, stage orchestration and the run manifest.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use splatprep_core::synth::{make_scene, write_dataset, CameraRig, SynthConfig, SynthError};

use crate::artifacts::{list_files, sha256_file, write_json, MANIFEST};
use crate::config::{Inputs, ParamArgs, Params, PipelineConfig};
pub use crate::error::{CliError, FailureKind, Stage};

#[derive(Debug, Parser)]
#[command(name = "splatprep", version, about = "Scene preprocessing for Gaussian-splatting pipelines")]
pub struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Increase log verbosity
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with ground truth
    Synth(SynthArgs),
    /// Remove points outside the trusted-core hull
    Filter(StageArgs),
    /// Cluster cameras and pick representative views
    Cluster(StageArgs),
    /// Fuse per-view mask labels into global segments
    Fuse(StageArgs),
    /// Add points to sparse segments
    Densify(StageArgs),
    /// Compute image, embedding and point-set metrics
    Evaluate(StageArgs),
    /// Run several stages in order and write a manifest
    Pipeline {
        #[command(flatten)]
        args: StageArgs,
        /// Stages to run, comma separated
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<Stage>>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rig {
    Ring,
    Sphere,
    TwoRings,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 24)]
    pub cameras: usize,
    #[arg(long, value_enum, default_value_t = Rig::Ring)]
    pub rig: Rig,
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    #[arg(long, default_value_t = 8)]
    pub segments: usize,
    #[arg(long, default_value_t = 0.05)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 10.0)]
    pub outlier_radius: f64,
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    #[arg(long, default_value_t = 480)]
    pub height: u32,
    /// Views that get image and embedding pairs
    #[arg(long, default_value_t = 4)]
    pub eval_views: usize,
}

#[derive(Debug, Serialize)]
struct HashEntry {
    path: String,
    sha256: String,
}

/// Manifest fields that are identical across reruns with the same inputs.
#[derive(Debug, Serialize)]
struct Deterministic<'a> {
    tool: &'static str,
    version: &'static str,
    scene: &'a str,
    seed: u64,
    stages: &'a [Stage],
    parameters: &'a Params,
    inputs: Vec<HashEntry>,
    artifacts: Vec<HashEntry>,
}

#[derive(Debug, Serialize)]
struct Timing {
    threads: usize,
    stage_seconds: BTreeMap<Stage, f64>,
    total_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    deterministic: Deterministic<'a>,
    timing: Timing,
}

/// What a successful command did, one line per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub lines: Vec<String>,
}

fn data_error(context: impl Into<String>, e: impl Into<anyhow::Error>) -> CliError {
    CliError::Other { context: context.into(), kind: FailureKind::Data, source: e.into() }
}

fn hash_inputs(inputs: &Inputs) -> Result<Vec<HashEntry>, CliError> {
    let mut out = Vec::new();
    for (role, root) in inputs.entries() {
        for rel in list_files(root).map_err(|e| data_error("hashing inputs", e))? {
            let full = if rel.as_os_str().is_empty() { root.to_path_buf() } else { root.join(&rel) };
            let name = if rel.as_os_str().is_empty() {
                role.to_string()
            } else {
                format!("{role}/{}", rel.to_string_lossy().replace('\\', "/"))
            };
            out.push(HashEntry {
                path: name,
                sha256: sha256_file(&full).map_err(|e| data_error("hashing inputs", e))?,
            });
        }
    }
    Ok(out)
}

fn hash_artifacts(dir: &Path) -> Result<Vec<HashEntry>, CliError> {
    list_files(dir)
        .map_err(|e| data_error("hashing artifacts", e))?
        .into_iter()
        .filter(|p| p.as_os_str() != MANIFEST)
        .map(|rel| {
            Ok(HashEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&dir.join(&rel)).map_err(|e| data_error("hashing artifacts", e))?,
            })
        })
        .collect()
}

/// Runs `stages` in order, then writes the manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Outcome, CliError> {
    cfg.check_inputs(&cfg.stages, true)?;
    fs::create_dir_all(&cfg.output).map_err(|e| data_error(format!("creating {}", cfg.output.display()), e))?;
    let inputs = hash_inputs(&cfg.inputs)?;
    let start = Instant::now();
    let mut timing = BTreeMap::new();
    let mut outcome = Outcome::default();
    for &stage in &cfg.stages {
        if stage == Stage::Evaluate && !stages::has_evaluation_inputs(cfg) {
            info!("evaluate skipped: no images, embeddings, or reference given");
            continue;
        }
        let t = Instant::now();
        let line = stages::run_stage(stage, cfg)?;
        timing.insert(stage, t.elapsed().as_secs_f64());
        info!("{stage}: {line}");
        outcome.lines.push(format!("{stage}: {line}"));
    }
    let manifest = Manifest {
        deterministic: Deterministic {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            scene: &cfg.scene,
            seed: cfg.seed,
            stages: &cfg.stages,
            parameters: &cfg.params,
            inputs,
            artifacts: hash_artifacts(&cfg.output)?,
        },
        timing: Timing {
            threads: rayon::current_num_threads(),
            stage_seconds: timing,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    };
    write_json(&manifest, &cfg.output.join(MANIFEST)).map_err(|e| data_error("writing manifest", e))?;
    Ok(outcome)
}

fn run_single(stage: Stage, cfg: &PipelineConfig) -> Result<Outcome, CliError> {
    cfg.check_inputs(&[stage], false)?;
    fs::create_dir_all(&cfg.output).map_err(|e| data_error(format!("creating {}", cfg.output.display()), e))?;
    let line = stages::run_stage(stage, cfg)?;
    Ok(Outcome { lines: vec![format!("{stage}: {line}")] })
}

const SYNTH_CONFIG: &str = "pipeline.toml";

fn run_synth(args: &SynthArgs, seed: u64, output: &Path) -> Result<Outcome, CliError> {
    let config = SynthConfig {
        n_cameras: args.cameras,
        camera_rig: match args.rig {
            Rig::Ring => CameraRig::Ring,
            Rig::Sphere => CameraRig::Sphere,
            Rig::TwoRings => CameraRig::TwoRings,
        },
        n_points: args.points,
        n_segments: args.segments,
        outlier_fraction: args.outlier_fraction,
        outlier_radius_multiplier: args.outlier_radius,
        seed,
        image_size: (args.width, args.height),
    };
    let truth = make_scene(&config).map_err(|e| match e {
        SynthError::TooFewPoints { .. } | SynthError::InvalidConfig(_) => CliError::config("synth", e.to_string()),
        other => data_error("synth", other),
    })?;
    write_dataset(&truth, output, args.eval_views, seed).map_err(|e| data_error("synth", e))?;
    let toml = format!(
        "model = \"sparse\"\nmasks = \"masks\"\nimages = \"images\"\nembeddings = \"embeddings\"\n\
         reference = \"reference.ply\"\noutput = \"out\"\nscene = \"synthetic\"\nseed = {seed}\nforward = \"pos-z\"\n"
    );
    fs::write(output.join(SYNTH_CONFIG), toml)
        .with_context(|| format!("writing {SYNTH_CONFIG}"))
        .map_err(|e| data_error("synth", e))?;
    Ok(Outcome {
        lines: vec![format!(
            "synth: {} views, {} points ({} outliers) in {}",
            truth.scene.views.len(),
            truth.scene.points.len(),
            truth.true_outlier_ids.len(),
            output.display()
        )],
    })
}

/// Builds the effective configuration: file, then global flags, then stage flags.
pub fn resolve_config(cli: &Cli, stage_args: Option<&StageArgs>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.output {
        cfg.output.clone_from(o);
    }
    match stage_args {
        Some(a) => cfg.apply_overrides(&a.inputs, &a.params)?,
        None => cfg.check()?,
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Synth(args) => run_synth(args, cfg.seed, &cfg.output),
        Command::Filter(_) => run_single(Stage::Filter, cfg),
        Command::Cluster(_) => run_single(Stage::Cluster, cfg),
        Command::Fuse(_) => run_single(Stage::Fuse, cfg),
        Command::Densify(_) => run_single(Stage::Densify, cfg),
        Command::Evaluate(_) => run_single(Stage::Evaluate, cfg),
        Command::Pipeline { .. } => run_pipeline(cfg),
    }
}

/// Executes a parsed command line inside a thread pool sized by `--threads`.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let stage_args = match &cli.command {
        Command::Synth(_) => None,
        Command::Filter(a) | Command::Cluster(a) | Command::Fuse(a) | Command::Densify(a) | Command::Evaluate(a) => {
            Some(a)
        }
        Command::Pipeline { args, .. } => Some(args),
    };
    let mut cfg = resolve_config(cli, stage_args)?;
    if let Command::Pipeline { stages: Some(s), .. } = &cli.command {
        cfg.stages.clone_from(s);
        cfg.check()?;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| data_error("starting worker threads", e))?;
    pool.install(|| dispatch(cli, &cfg))
}
