//! Online moving-object segmentation: project, build residuals against a
//! bounded history of past scans, segment, clean up with kNN, unproject.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::eval::{ConfigFingerprint, Frame, MosMethod, SequenceSource};
use crate::geometry::{perturb_pose, Pose, Scan};
use crate::heuristic::{segment_residual, segment_residual_rg, HeuristicParams};
use crate::label::{LabelGrid, MovingLabel};
use crate::learned::{predict_image, ModelParams};
use crate::projection::{
    knn_clean, labels_to_grid, project_scan, unproject_labels, KnnParams, Projection,
    ProjectionConfig,
};
use crate::residual::{build_stack, fuse, NormAccumulator, NormalizationSpec, ResidualStack};

/// Scans excluded from timing statistics at the start of each run.
pub const TIMING_WARMUP: usize = 10;

#[derive(Debug, Clone)]
pub enum Segmenter {
    Residual(HeuristicParams),
    ResidualRg(HeuristicParams),
    Learned(Arc<ModelParams>),
}

impl Segmenter {
    pub fn id(&self) -> &'static str {
        match self {
            Segmenter::Residual(_) => "residual",
            Segmenter::ResidualRg(_) => "residual-rg",
            Segmenter::Learned(_) => "learned",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub projection: ProjectionConfig,
    pub residual_frames: usize,
    /// Pose noise applied to every relative pose, in units of 0.1 m / 1 deg.
    pub noise_units: u32,
    pub seed: u64,
    pub knn: Option<KnnParams>,
    pub segmenter: Segmenter,
}

impl PipelineConfig {
    pub fn new(segmenter: Segmenter, residual_frames: usize) -> Self {
        Self {
            projection: ProjectionConfig::default(),
            residual_frames,
            noise_units: 0,
            seed: 0,
            knn: Some(KnnParams::default()),
            segmenter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        if let Some(k) = &self.knn {
            k.validate()?;
        }
        match &self.segmenter {
            Segmenter::Residual(p) | Segmenter::ResidualRg(p) => {
                p.validate()?;
                if self.residual_frames == 0 {
                    return Err(Error::Config(
                        "residual thresholding needs at least one residual frame".into(),
                    ));
                }
            }
            Segmenter::Learned(m) => {
                if m.spec.residual_channels != self.residual_frames {
                    return Err(Error::Config(format!(
                        "model expects {} residual frames, pipeline configured for {}",
                        m.spec.residual_channels, self.residual_frames
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> ConfigFingerprint {
        ConfigFingerprint {
            method: self.segmenter.id().to_string(),
            residual_frames: self.residual_frames,
            noise_units: self.noise_units,
        }
    }
}

fn noise_seed(seed: u64, frame: usize) -> u64 {
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Backward-only buffer of the last `n` scans with their absolute poses.
#[derive(Debug, Clone)]
pub struct ResidualHistory {
    pub config: ProjectionConfig,
    pub n: usize,
    pub noise_units: u32,
    pub seed: u64,
    /// Most recent first.
    entries: VecDeque<(Scan, Pose)>,
}

impl ResidualHistory {
    pub fn new(config: ProjectionConfig, n: usize, noise_units: u32, seed: u64) -> Self {
        Self {
            config,
            n,
            noise_units,
            seed,
            entries: VecDeque::with_capacity(n + 1),
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Relative poses `T^{j-1}_j` of the buffered scans with respect to a
    /// current pose, perturbed per pair with noise keyed by the older frame.
    pub fn relative_poses(&self, current: &Pose) -> Vec<Pose> {
        let mut newer = *current;
        self.entries
            .iter()
            .map(|(scan, pose)| {
                let rel = newer.inverse() * *pose;
                newer = *pose;
                perturb_pose(&rel, self.noise_units, noise_seed(self.seed, scan.frame))
            })
            .collect()
    }

    /// Residual stack of the current image against the buffer, zero padded
    /// to `n` channels during warm-up.
    pub fn stack(&self, image: &crate::projection::RangeImage, frame: usize, pose: &Pose) -> Result<ResidualStack> {
        let history: Vec<&Scan> = self.entries.iter().map(|(s, _)| s).collect();
        let relative = self.relative_poses(pose);
        let mut stack = build_stack(&history, &relative, image, frame, &self.config)?;
        stack.pad_to(self.n);
        Ok(stack)
    }

    pub fn push(&mut self, mut scan: Scan, pose: Pose) {
        if self.n == 0 {
            return;
        }
        scan.labels = None;
        self.entries.push_front((scan, pose));
        self.entries.truncate(self.n);
    }
}

/// Per-frame wall-clock durations of each stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub projection: Vec<Duration>,
    pub residual: Vec<Duration>,
    pub segmentation: Vec<Duration>,
    pub knn: Vec<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSummary {
    pub samples: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
}

/// Mean, median and 99th percentile after dropping the first `warmup` samples.
pub fn summarize(samples: &[Duration], warmup: usize) -> Option<TimingSummary> {
    let mut ms: Vec<f64> = samples
        .iter()
        .skip(warmup)
        .map(|d| d.as_secs_f64() * 1e3)
        .collect();
    if ms.is_empty() {
        return None;
    }
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let rank = |q: f64| ms[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
    Some(TimingSummary {
        samples: n,
        mean_ms: ms.iter().sum::<f64>() / n as f64,
        median_ms: if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        },
        p99_ms: rank(0.99),
    })
}

impl StageTimings {
    pub fn extend(&mut self, other: &StageTimings) {
        self.projection.extend(&other.projection);
        self.residual.extend(&other.residual);
        self.segmentation.extend(&other.segmentation);
        self.knn.extend(&other.knn);
    }

    pub fn total(&self) -> Vec<Duration> {
        (0..self.projection.len())
            .map(|i| self.projection[i] + self.residual[i] + self.segmentation[i] + self.knn[i])
            .collect()
    }

    pub fn report(&self, warmup: usize) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>10} {:>10} {:>10}\n",
            "stage", "scans", "mean ms", "median ms", "p99 ms"
        );
        let total = self.total();
        for (name, samples) in [
            ("projection", &self.projection),
            ("residual", &self.residual),
            ("segmentation", &self.segmentation),
            ("knn", &self.knn),
            ("total", &total),
        ] {
            match summarize(samples, warmup) {
                Some(s) => out.push_str(&format!(
                    "{:<14} {:>8} {:>10.3} {:>10.3} {:>10.3}\n",
                    name, s.samples, s.mean_ms, s.median_ms, s.p99_ms
                )),
                None => out.push_str(&format!("{name:<14} {:>8}\n", 0)),
            }
        }
        out
    }
}

/// Intermediate products of one processed frame.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub projection: Projection,
    pub stack: ResidualStack,
    pub grid: LabelGrid,
    pub labels: Vec<MovingLabel>,
}

/// Processes the scans of one sequence in order.
#[derive(Debug, Clone)]
pub struct OnlinePipeline {
    config: PipelineConfig,
    history: ResidualHistory,
    pub timings: StageTimings,
}

impl OnlinePipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let history = ResidualHistory::new(
            config.projection,
            config.residual_frames,
            config.noise_units,
            config.seed,
        );
        Ok(Self {
            config,
            history,
            timings: StageTimings::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Forgets the history; timings are kept.
    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn process(&mut self, scan: &Scan, pose: &Pose) -> Result<FrameOutput> {
        if let Some(i) = scan.first_non_finite() {
            return Err(Error::Validation(format!(
                "frame {}: point {i} is not finite",
                scan.frame
            )));
        }
        let cfg = &self.config.projection;
        let t0 = Instant::now();
        let projection = project_scan(scan, cfg);
        let t1 = Instant::now();
        let stack = self.history.stack(&projection.image, scan.frame, pose)?;
        let t2 = Instant::now();
        let grid = match &self.config.segmenter {
            Segmenter::Residual(p) => {
                let mut g = segment_residual(&stack, p)?;
                for (l, valid) in g.labels.iter_mut().zip(&stack.valid) {
                    if !valid {
                        *l = MovingLabel::Ignore;
                    }
                }
                g
            }
            Segmenter::ResidualRg(p) => segment_residual_rg(&projection.image, &stack, p)?,
            Segmenter::Learned(m) => {
                let fused = fuse(&projection.image, &stack, &m.norm)?;
                predict_image(m, &fused)?
            }
        };
        let t3 = Instant::now();
        let raw = unproject_labels(&grid, &projection.pixels);
        let labels = match &self.config.knn {
            Some(k) => knn_clean(scan, &projection.pixels, &projection.image, &raw, k),
            None => raw,
        };
        let t4 = Instant::now();
        self.timings.projection.push(t1 - t0);
        self.timings.residual.push(t2 - t1);
        self.timings.segmentation.push(t3 - t2);
        self.timings.knn.push(t4 - t3);
        self.history.push(scan.clone(), *pose);
        Ok(FrameOutput {
            projection,
            stack,
            grid,
            labels,
        })
    }
}

impl MosMethod for OnlinePipeline {
    fn begin_sequence(&mut self, _id: &str) {
        self.reset();
    }

    fn predict(&mut self, frame: &Frame<'_>) -> Result<Vec<MovingLabel>> {
        Ok(self.process(frame.scan, frame.pose)?.labels)
    }
}

/// How residual features are generated for training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub projection: ProjectionConfig,
    pub residual_frames: usize,
    pub noise_units: u32,
    pub seed: u64,
}

/// Streams `(projection, stack, ground truth)` for every frame of a sequence
/// through `f`, using the same history logic as the online pipeline.
pub fn for_each_frame<S, F>(seq: &S, features: &FeatureConfig, mut f: F) -> Result<()>
where
    S: SequenceSource + ?Sized,
    F: FnMut(&Projection, &ResidualStack, &[MovingLabel]) -> Result<()>,
{
    let mut history = ResidualHistory::new(
        features.projection,
        features.residual_frames,
        features.noise_units,
        features.seed,
    );
    for i in 0..seq.len() {
        let mut scan = seq.labeled_scan(i)?;
        let truth = scan.labels.take().ok_or_else(|| {
            Error::Precondition(format!("sequence {} frame {i} has no ground truth", seq.id()))
        })?;
        let pose = seq.pose(i);
        let projection = project_scan(&scan, &features.projection);
        let stack = history.stack(&projection.image, scan.frame, &pose)?;
        f(&projection, &stack, &truth)?;
        history.push(scan, pose);
    }
    Ok(())
}

/// Per-channel normalization estimated over every frame of the given sequences.
pub fn estimate_normalization<S: SequenceSource>(
    sequences: &[S],
    features: &FeatureConfig,
) -> Result<NormalizationSpec> {
    let mut acc = NormAccumulator::default();
    for seq in sequences {
        for_each_frame(seq, features, |p, stack, _| acc.add(&p.image, stack))?;
    }
    acc.finish()
}

/// Samples training pixels from labeled sequences without holding whole
/// frames in memory.
pub fn collect_samples<S: SequenceSource>(
    sequences: &[S],
    features: &FeatureConfig,
    norm: &NormalizationSpec,
    window: usize,
    static_rate: f64,
    moving_rate: f64,
    rng: &mut impl rand::Rng,
) -> Result<crate::learned::PixelDataset> {
    let channels = crate::residual::BASE_CHANNELS + features.residual_frames;
    let mut data = crate::learned::PixelDataset::new(window * window * channels);
    for seq in sequences {
        for_each_frame(seq, features, |p, stack, truth| {
            let fused = fuse(&p.image, stack, norm)?;
            let grid = labels_to_grid(&p.image, truth);
            data.add_frame(&fused, &grid, window, static_rate, moving_rate, rng)
        })?;
    }
    Ok(data)
}
