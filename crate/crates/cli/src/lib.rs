//! Subcommands of the `lidar-mos` tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mos_core::eval::{
    evaluate_sequence, BenchmarkReport, ConfigFingerprint, Frame, MosMethod, SequenceResult,
};
use mos_core::heuristic::HeuristicParams;
use mos_core::io::{prediction_path, read_semantic_labels, write_prediction_labels, ClassMap, DatasetSequence};
use mos_core::label::MovingLabel;
use mos_core::learned::{load_model, save_model, train_on_samples, ModelSpec, TrainConfig, TrainingLog};
use mos_core::map::{export_ply, MapBuilder};
use mos_core::pipeline::{
    collect_samples, estimate_normalization, FeatureConfig, OnlinePipeline, PipelineConfig, Segmenter,
    StageTimings, TIMING_WARMUP,
};
use mos_core::projection::{KnnParams, ProjectionConfig};
use mos_core::synth::{make_benchmark_with, BenchmarkOptions, Preset};

/// Environment variable overriding `--dataset-root`.
pub const DATASET_ROOT_ENV: &str = "MOS_DATASET_ROOT";

#[derive(Debug, Parser)]
#[command(name = "lidar-mos", version, about = "Online moving object segmentation for LiDAR scans")]
pub struct RunConfig {
    /// Dataset root holding `sequences/<id>/`.
    #[arg(long, global = true, env = DATASET_ROOT_ENV, default_value = ".")]
    pub dataset_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment scans and write per-point prediction files.
    Infer(InferArgs),
    /// Score prediction files against ground truth.
    Eval(EvalArgs),
    /// Train the learned per-pixel head.
    Train(TrainArgs),
    /// Generate a synthetic benchmark.
    Synth(SynthArgs),
    /// Aggregate a sequence into a map without predicted-moving points.
    CleanMap(CleanMapArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Residual,
    ResidualRg,
    Learned,
}

#[derive(Debug, Clone, Args)]
pub struct ProjectionArgs {
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 2048)]
    pub width: usize,
    /// Degrees above the horizon.
    #[arg(long, default_value_t = 3.0)]
    pub fov_up: f64,
    /// Degrees below the horizon.
    #[arg(long, default_value_t = 25.0)]
    pub fov_down: f64,
}

impl ProjectionArgs {
    pub fn config(&self) -> Result<ProjectionConfig> {
        let cfg = ProjectionConfig {
            height: self.height,
            width: self.width,
            fov_up: self.fov_up.to_radians(),
            fov_down: self.fov_down.to_radians(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// Sequence ids; all sequences under the root when omitted.
    #[arg(long, value_delimiter = ',')]
    pub sequences: Vec<String>,
    #[arg(long, value_enum, default_value_t = Method::ResidualRg)]
    pub method: Method,
    /// Number of residual frames N.
    #[arg(long, default_value_t = 1)]
    pub residual_frames: usize,
    /// Pose noise in units of 0.1 m and 1 degree.
    #[arg(long, default_value_t = 0)]
    pub noise_units: u32,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output root; predictions go to `<out>/sequences/<id>/predictions/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub projection: ProjectionArgs,
    #[arg(long)]
    pub no_knn: bool,
    #[arg(long, default_value_t = 5)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 5)]
    pub knn_window: usize,
    #[arg(long, default_value_t = 1.0)]
    pub knn_cutoff: f64,
    /// Residual threshold of the heuristic methods.
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Root that holds `sequences/<id>/predictions/`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub sequences: Vec<String>,
    /// Text report path; printed to stdout as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Key-value report path.
    #[arg(long)]
    pub kv: Option<PathBuf>,
    #[arg(long, default_value = "predictions")]
    pub method_name: String,
    #[arg(long, default_value_t = 0)]
    pub residual_frames: usize,
    #[arg(long, default_value_t = 0)]
    pub noise_units: u32,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_delimiter = ',', default_value = "00,01")]
    pub train_sequences: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "08")]
    pub val_sequences: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub residual_frames: usize,
    #[arg(long, default_value_t = 0)]
    pub noise_units: u32,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Fraction of static pixels sampled per scan.
    #[arg(long, default_value_t = 0.02)]
    pub sample_rate: f64,
    /// Fraction of moving pixels sampled per scan.
    #[arg(long, default_value_t = 1.0)]
    pub moving_sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub projection: ProjectionArgs,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Per-epoch log; defaults to the model path with a `.log` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "busy-intersection")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames per sequence; preset default when omitted.
    #[arg(long)]
    pub frames: Option<usize>,
    #[command(flatten)]
    pub projection: ProjectionArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CleanMapArgs {
    #[arg(long)]
    pub sequence: String,
    /// Root that holds `sequences/<id>/predictions/`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel edge length in meters.
    #[arg(long)]
    pub voxel: Option<f64>,
    #[arg(long)]
    pub binary: bool,
}

pub fn run(config: RunConfig) -> Result<()> {
    let root = &config.dataset_root;
    match &config.command {
        Command::Infer(a) => {
            let summary = cmd_infer(root, a)?;
            print!("{}", summary.timings.report(TIMING_WARMUP));
        }
        Command::Eval(a) => {
            let outcome = cmd_eval(root, a)?;
            print!("{}", outcome.report.to_text());
            if !outcome.failures.is_empty() {
                for (id, e) in &outcome.failures {
                    eprintln!("sequence {id}: {e}");
                }
                bail!("{} sequence(s) could not be scored", outcome.failures.len());
            }
        }
        Command::Train(a) => {
            let log = cmd_train(root, a)?;
            if let Some(last) = log.epochs.last() {
                println!(
                    "trained {} epochs, final loss {:.5}, validation IoU {}",
                    log.epochs.len(),
                    last.loss,
                    last.validation_iou.map_or("n/a".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Synth(a) => {
            let written = cmd_synth(root, a)?;
            for (id, frames) in written {
                println!("sequence {id}: {frames} frames");
            }
        }
        Command::CleanMap(a) => {
            let (kept, removed) = cmd_clean_map(root, a)?;
            println!("map: {kept} points kept, {removed} removed -> {}", a.out.display());
        }
    }
    Ok(())
}

/// Sequence ids under `<root>/sequences`, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("sequences");
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("no sequences directory at {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    Ok(ids)
}

fn resolve_sequences(root: &Path, requested: &[String]) -> Result<Vec<String>> {
    if requested.is_empty() {
        list_sequences(root)
    } else {
        Ok(requested.to_vec())
    }
}

fn open_sequence(root: &Path, id: &str) -> Result<DatasetSequence> {
    DatasetSequence::open(root, id)
        .with_context(|| format!("cannot open sequence {id} under {}", root.display()))
}

#[derive(Debug)]
pub struct InferSummary {
    /// Prediction files written per sequence.
    pub written: Vec<(String, usize)>,
    pub timings: StageTimings,
}

pub fn pipeline_config(a: &InferArgs) -> Result<PipelineConfig> {
    let heuristic = HeuristicParams {
        threshold: a.threshold,
        ..HeuristicParams::default()
    };
    let segmenter = match a.method {
        Method::Residual => Segmenter::Residual(heuristic),
        Method::ResidualRg => Segmenter::ResidualRg(heuristic),
        Method::Learned => {
            let path = a
                .model
                .as_ref()
                .context("--model is required for the learned method")?;
            let model = load_model(path).with_context(|| format!("cannot load model {}", path.display()))?;
            Segmenter::Learned(Arc::new(model))
        }
    };
    let cfg = PipelineConfig {
        projection: a.projection.config()?,
        residual_frames: a.residual_frames,
        noise_units: a.noise_units,
        seed: a.seed,
        knn: (!a.no_knn).then_some(KnnParams {
            k: a.knn_k,
            window: a.knn_window,
            cutoff: a.knn_cutoff,
        }),
        segmenter,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_infer(root: &Path, a: &InferArgs) -> Result<InferSummary> {
    let cfg = pipeline_config(a)?;
    let class_map = ClassMap::default();
    let mut timings = StageTimings::default();
    let mut written = Vec::new();
    for id in resolve_sequences(root, &a.sequences)? {
        let seq = open_sequence(root, &id)?;
        let mut pipeline = OnlinePipeline::new(cfg.clone())?;
        for i in 0..seq.len() {
            let scan = seq.read_scan(i)?;
            let out = pipeline.process(&scan, &seq.poses[i])?;
            write_prediction_labels(&prediction_path(&a.out, &id, i), &out.labels, &class_map)?;
        }
        info!("sequence {id}: {} scans", seq.len());
        timings.extend(&pipeline.timings);
        written.push((id, seq.len()));
    }
    Ok(InferSummary { written, timings })
}

/// Replays prediction files as a segmentation method.
struct StoredPredictions {
    root: PathBuf,
    class_map: ClassMap,
}

impl MosMethod for StoredPredictions {
    fn predict(&mut self, frame: &Frame<'_>) -> mos_core::Result<Vec<MovingLabel>> {
        let path = prediction_path(&self.root, frame.sequence, frame.index);
        read_semantic_labels(&path, frame.scan.len(), &self.class_map)
    }
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: BenchmarkReport,
    /// Sequences that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
}

pub fn cmd_eval(root: &Path, a: &EvalArgs) -> Result<EvalOutcome> {
    let mut results: Vec<SequenceResult> = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = Vec::new();
    for id in resolve_sequences(root, &a.sequences)? {
        let seq = match DatasetSequence::open(root, &id) {
            Ok(s) => s,
            Err(e) => {
                failures.push((id, e.to_string()));
                continue;
            }
        };
        if !seq.has_labels() {
            warn!("sequence {id} has no ground truth");
            skipped.push(id.clone());
            failures.push((id, "no ground truth".into()));
            continue;
        }
        let mut method = StoredPredictions {
            root: a.predictions.clone(),
            class_map: ClassMap::default(),
        };
        match evaluate_sequence(&mut method, &seq) {
            Ok(r) => results.push(r),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    let report = BenchmarkReport::from_sequences(
        ConfigFingerprint {
            method: a.method_name.clone(),
            residual_frames: a.residual_frames,
            noise_units: a.noise_units,
        },
        results,
        skipped,
    );
    if let Some(p) = &a.report {
        write_text(p, &report.to_text())?;
    }
    if let Some(p) = &a.kv {
        write_text(p, &report.to_key_values())?;
    }
    Ok(EvalOutcome { report, failures })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        momentum: a.momentum,
        class_weights: None,
        sample_rate: a.sample_rate,
        moving_sample_rate: a.moving_sample_rate,
        seed: a.seed,
    }
}

pub fn cmd_train(root: &Path, a: &TrainArgs) -> Result<TrainingLog> {
    let spec = ModelSpec {
        window: a.window,
        residual_channels: a.residual_frames,
        hidden: a.hidden.clone(),
        seed: a.seed,
    };
    spec.validate()?;
    let config = train_config(a);
    config.validate()?;
    let features = FeatureConfig {
        projection: a.projection.config()?,
        residual_frames: a.residual_frames,
        noise_units: a.noise_units,
        seed: a.seed,
    };
    let open_all = |ids: &[String]| -> Result<Vec<DatasetSequence>> {
        ids.iter()
            .map(|id| {
                let s = open_sequence(root, id)?;
                if !s.has_labels() {
                    bail!("sequence {id} has no ground truth labels");
                }
                Ok(s)
            })
            .collect()
    };
    let train_seqs = open_all(&a.train_sequences)?;
    let val_seqs = open_all(&a.val_sequences)?;

    let norm = estimate_normalization(&train_seqs, &features)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x5eed_da7a);
    let data = collect_samples(
        &train_seqs,
        &features,
        &norm,
        a.window,
        config.sample_rate,
        config.moving_sample_rate,
        &mut rng,
    )?;
    let valid = collect_samples(
        &val_seqs,
        &features,
        &norm,
        a.window,
        config.sample_rate,
        config.sample_rate,
        &mut rng,
    )?;
    let (moving, stat) = data.class_counts();
    info!("training on {} samples ({moving} moving, {stat} static)", data.len());
    let (params, log) = train_on_samples(&spec, &config, &norm, &data, Some(&valid))?;
    save_model(&params, &a.model_out)
        .with_context(|| format!("cannot write model {}", a.model_out.display()))?;

    let log_path = a.log.clone().unwrap_or_else(|| a.model_out.with_extension("log"));
    let mut text = format!(
        "class weights: moving {} static {}\nepoch loss validation_iou\n",
        log.class_weights.moving, log.class_weights.static_
    );
    for e in &log.epochs {
        text.push_str(&format!(
            "{} {:.8} {}\n",
            e.epoch,
            e.loss,
            e.validation_iou.map_or("nan".into(), |v| format!("{v:.6}"))
        ));
    }
    write_text(&log_path, &text)?;
    Ok(log)
}

pub fn cmd_synth(root: &Path, a: &SynthArgs) -> Result<Vec<(String, usize)>> {
    let preset: Preset = a.preset.parse()?;
    let options = BenchmarkOptions {
        sensor: a.projection.config()?,
        frames: a.frames,
    };
    let sequences = make_benchmark_with(preset, a.seed, &options)?;
    let mut written = Vec::new();
    for s in &sequences {
        let seq_dir = mos_core::io::sequence_dir(root, &s.id);
        if seq_dir.exists() {
            fs::remove_dir_all(&seq_dir).with_context(|| format!("cannot clear {}", seq_dir.display()))?;
        }
        let on_disk = s.write(root)?;
        written.push((s.id.clone(), on_disk.len()));
    }
    Ok(written)
}

/// Returns the number of points kept and removed.
pub fn cmd_clean_map(root: &Path, a: &CleanMapArgs) -> Result<(usize, usize)> {
    let seq = open_sequence(root, &a.sequence)?;
    let class_map = ClassMap::default();
    let mut builder = MapBuilder::new();
    for i in 0..seq.len() {
        let scan = seq.read_scan(i)?;
        let path = prediction_path(&a.predictions, &a.sequence, i);
        let labels = read_semantic_labels(&path, scan.len(), &class_map)
            .with_context(|| format!("predictions for frame {i}"))?;
        builder.add_scan(&scan, &labels, &seq.poses[i])?;
    }
    let map = builder.finish(a.voxel)?;
    export_ply(&map, &a.out, a.binary)?;
    Ok((map.len(), map.removed))
}
