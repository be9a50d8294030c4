//! Windowed per-pixel classifier over the fused range/residual input.
//!
//! Each valid pixel is classified from the `window x window` neighbourhood of
//! all `5 + N` input channels (zero padded vertically, wrapping in azimuth)
//! by a small fully connected network trained with class-weighted binary
//! cross-entropy.

mod mlp;
mod model_io;

pub use mlp::{logistic, ClassWeights, Layer, Mlp};
pub use model_io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::ConfusionCounts;
use crate::label::{LabelGrid, MovingLabel};
use crate::residual::{FusedInput, NormalizationSpec, BASE_CHANNELS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub window: usize,
    pub residual_channels: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(residual_channels: usize) -> Self {
        Self {
            window: 5,
            residual_channels,
            hidden: vec![64, 32],
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        BASE_CHANNELS + self.residual_channels
    }

    pub fn input_len(&self) -> usize {
        self.window * self.window * self.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("need at least one hidden layer, all non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub mlp: Mlp,
    pub norm: NormalizationSpec,
}

impl ModelParams {
    pub fn init(spec: ModelSpec, norm: NormalizationSpec) -> Result<Self> {
        spec.validate()?;
        if norm.channels() != spec.channels() {
            return Err(Error::Config(format!(
                "normalization has {} channels, model expects {}",
                norm.channels(),
                spec.channels()
            )));
        }
        let mlp = Mlp::init(spec.input_len(), &spec.hidden, spec.seed);
        Ok(Self { spec, mlp, norm })
    }
}

/// Probability that the pixel described by `features` is moving.
pub fn forward(params: &ModelParams, features: &[f64]) -> Result<f64> {
    if features.len() != params.spec.input_len() {
        return Err(Error::Precondition(format!(
            "feature vector of length {}, model expects {}",
            features.len(),
            params.spec.input_len()
        )));
    }
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::Precondition("non-finite feature".into()));
    }
    Ok(logistic(params.mlp.logit(features)?))
}

pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[(&[f64], MovingLabel)],
    weights: ClassWeights,
) -> Result<(f64, Mlp)> {
    params.mlp.loss_and_grad(batch, weights)
}

/// Fills `out` with the neighbourhood of pixel `(u, v)`, channel-major.
pub fn extract_window(fused: &FusedInput, u: usize, v: usize, window: usize, out: &mut [f64]) {
    let (h, w) = (fused.height as isize, fused.width as isize);
    let half = (window / 2) as isize;
    let plane = fused.height * fused.width;
    let mut k = 0;
    for ch in 0..fused.channel_count {
        let base = &fused.data[ch * plane..(ch + 1) * plane];
        for dv in -half..=half {
            let vv = v as isize + dv;
            if vv < 0 || vv >= h {
                out[k..k + window].iter_mut().for_each(|o| *o = 0.0);
                k += window;
                continue;
            }
            let row = &base[(vv * w) as usize..((vv + 1) * w) as usize];
            for du in -half..=half {
                out[k] = row[(u as isize + du).rem_euclid(w) as usize];
                k += 1;
            }
        }
    }
}

/// Per-pixel forward over the whole image, thresholded at 0.5.
pub fn predict_image(params: &ModelParams, fused: &FusedInput) -> Result<LabelGrid> {
    if fused.norm != params.norm {
        return Err(Error::Config(
            "input normalization differs from the one the model was trained with".into(),
        ));
    }
    if fused.channel_count != params.spec.channels() {
        return Err(Error::Config(format!(
            "input has {} channels, model expects {}",
            fused.channel_count,
            params.spec.channels()
        )));
    }
    let (h, w) = (fused.height, fused.width);
    let window = params.spec.window;
    let len = params.spec.input_len();
    let mut labels = vec![MovingLabel::Ignore; h * w];
    labels
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(v, row)| {
            let mut feat = vec![0.0; len];
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (u, out) in row.iter_mut().enumerate() {
                if !fused.valid[v * w + u] {
                    continue;
                }
                extract_window(fused, u, v, window, &mut feat);
                let z = params.mlp.logit_fast(&feat, &mut a, &mut b);
                *out = if logistic(z) > 0.5 {
                    MovingLabel::Moving
                } else {
                    MovingLabel::Static
                };
            }
        });
    Ok(LabelGrid {
        height: h,
        width: w,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    /// `None` derives weights from the sampled class frequencies.
    pub class_weights: Option<ClassWeights>,
    /// Fraction of static pixels sampled per scan.
    pub sample_rate: f64,
    /// Fraction of moving pixels sampled per scan.
    pub moving_sample_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 256,
            epochs: 30,
            momentum: 0.0,
            class_weights: None,
            sample_rate: 0.02,
            moving_sample_rate: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if let Some(w) = self.class_weights {
            if !(w.moving > 0.0 && w.static_ > 0.0) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        for rate in [self.sample_rate, self.moving_sample_rate] {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::Config("sampling rates must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Sampled pixel neighbourhoods and their targets, stored in single precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelDataset {
    pub input_len: usize,
    pub features: Vec<f32>,
    pub targets: Vec<MovingLabel>,
}

impl PixelDataset {
    pub fn new(input_len: usize) -> Self {
        Self {
            input_len,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn push(&mut self, features: &[f64], target: MovingLabel) {
        debug_assert_eq!(features.len(), self.input_len);
        self.features.extend(features.iter().map(|&f| f as f32));
        self.targets.push(target);
    }

    /// Samples labeled valid pixels of one frame; ignore pixels are skipped.
    pub fn add_frame(
        &mut self,
        fused: &FusedInput,
        labels: &LabelGrid,
        window: usize,
        static_rate: f64,
        moving_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if labels.height != fused.height || labels.width != fused.width {
            return Err(Error::Precondition("label grid and input differ in shape".into()));
        }
        if window * window * fused.channel_count != self.input_len {
            return Err(Error::Precondition("frame does not match the dataset feature length".into()));
        }
        let mut feat = vec![0.0; self.input_len];
        for v in 0..fused.height {
            for u in 0..fused.width {
                let idx = v * fused.width + u;
                let label = labels.labels[idx];
                let rate = match label {
                    MovingLabel::Moving => moving_rate,
                    MovingLabel::Static => static_rate,
                    MovingLabel::Ignore => continue,
                };
                if !fused.valid[idx] || !rng.gen_bool(rate) {
                    continue;
                }
                extract_window(fused, u, v, window, &mut feat);
                self.push(&feat, label);
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let moving = self.targets.iter().filter(|t| t.is_moving()).count();
        (moving, self.len() - moving)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub class_weights: ClassWeights,
    pub epochs: Vec<EpochRecord>,
}

/// Moving weight = static frequency / moving frequency.
pub fn balanced_weights(data: &PixelDataset) -> ClassWeights {
    let (moving, stat) = data.class_counts();
    if moving == 0 || stat == 0 {
        return ClassWeights::default();
    }
    ClassWeights {
        moving: stat as f64 / moving as f64,
        static_: 1.0,
    }
}

/// Confusion counts of the model over a pixel dataset.
pub fn evaluate_samples(mlp: &Mlp, data: &PixelDataset) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    let mut x = vec![0.0; data.input_len];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..data.len() {
        for (xi, &f) in x.iter_mut().zip(data.sample(i)) {
            *xi = f64::from(f);
        }
        let moving = mlp.logit_fast(&x, &mut a, &mut b) > 0.0;
        counts.add(moving, data.targets[i].is_moving());
    }
    counts
}

/// Mini-batch SGD (optionally with momentum) over sampled pixels. Deterministic given
/// the spec and config seeds.
pub fn train_on_samples(
    spec: &ModelSpec,
    config: &TrainConfig,
    norm: &NormalizationSpec,
    data: &PixelDataset,
    validation: Option<&PixelDataset>,
) -> Result<(ModelParams, TrainingLog)> {
    config.validate()?;
    let mut params = ModelParams::init(spec.clone(), norm.clone())?;
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if data.input_len != spec.input_len() {
        return Err(Error::Precondition(format!(
            "samples have {} features, model expects {}",
            data.input_len,
            spec.input_len()
        )));
    }
    let weights = config.class_weights.unwrap_or_else(|| balanced_weights(data));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = params.mlp.zeros_like();
    let mut xbuf = vec![0.0; config.batch_size * data.input_len];
    let mut log = TrainingLog {
        class_weights: weights,
        epochs: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            for (slot, &i) in chunk.iter().enumerate() {
                let dst = &mut xbuf[slot * data.input_len..(slot + 1) * data.input_len];
                for (d, &s) in dst.iter_mut().zip(data.sample(i)) {
                    *d = f64::from(s);
                }
            }
            let batch: Vec<(&[f64], MovingLabel)> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    (
                        &xbuf[slot * data.input_len..(slot + 1) * data.input_len],
                        data.targets[i],
                    )
                })
                .collect();
            let (loss, grad) = match params.mlp.loss_and_grad(&batch, weights) {
                Ok(v) => v,
                Err(Error::Numeric { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            for ((p, v), g) in params
                .mlp
                .parameters_mut()
                .zip(velocity.parameters_mut())
                .zip(grad.parameters())
            {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
            loss_sum += loss;
            batches += 1;
        }
        if !params.mlp.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: batches,
                loss: f64::NAN,
            });
        }
        let validation_iou = validation
            .filter(|v| !v.is_empty())
            .map(|v| evaluate_samples(&params.mlp, v).iou().value);
        let loss = loss_sum / batches as f64;
        log::debug!("epoch {epoch}: loss {loss:.5}, validation IoU {validation_iou:?}");
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            validation_iou,
        });
    }
    Ok((params, log))
}

/// Samples pixels from labeled fused frames and trains on them.
pub fn train(
    spec: &ModelSpec,
    config: &TrainConfig,
    frames: &[(FusedInput, LabelGrid)],
    validation: &[(FusedInput, LabelGrid)],
) -> Result<(ModelParams, TrainingLog)> {
    let norm = frames
        .first()
        .map(|(f, _)| f.norm.clone())
        .ok_or_else(|| Error::Precondition("training set is empty".into()))?;
    if frames.iter().chain(validation).any(|(f, _)| f.norm != norm) {
        return Err(Error::Config("frames were fused with different normalizations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut data = PixelDataset::new(spec.input_len());
    for (fused, labels) in frames {
        data.add_frame(
            fused,
            labels,
            spec.window,
            config.sample_rate,
            config.moving_sample_rate,
            &mut rng,
        )?;
    }
    let mut valid = PixelDataset::new(spec.input_len());
    for (fused, labels) in validation {
        valid.add_frame(fused, labels, spec.window, config.sample_rate, config.sample_rate, &mut rng)?;
    }
    train_on_samples(spec, config, &norm, &data, Some(&valid))
}
