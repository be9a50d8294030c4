//! Ego-motion compensated residual images and the fused network input.

use crate::error::{Error, Result};
use crate::geometry::{compose_relative, Pose, Scan};
use crate::projection::{project_point, PointProjection, ProjectionConfig, RangeImage};

/// Number of geometry channels ahead of the residuals: x, y, z, range, remission.
pub const BASE_CHANNELS: usize = 5;

/// Residual channels aligned with the current range image.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub height: usize,
    pub width: usize,
    /// `channels[j - 1]` compares the current frame with the j-th previous one.
    pub channels: Vec<Vec<f32>>,
    /// Nearest range of the transformed past scan per pixel, -1 where empty.
    pub past_ranges: Vec<Vec<f32>>,
    /// Validity of the current range image.
    pub valid: Vec<bool>,
    pub current_frame: usize,
    pub source_frames: Vec<Option<usize>>,
}

impl ResidualStack {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Appends all-zero channels with no source until there are `n`.
    pub fn pad_to(&mut self, n: usize) {
        let plane = self.height * self.width;
        while self.channels.len() < n {
            self.channels.push(vec![0.0; plane]);
            self.past_ranges.push(vec![-1.0; plane]);
            self.source_frames.push(None);
        }
    }
}

/// Transforms `past` by `pose` and keeps the nearest range per pixel.
pub fn reproject_ranges(past: &Scan, pose: &Pose, cfg: &ProjectionConfig) -> Vec<f32> {
    let mut best = vec![f64::INFINITY; cfg.pixel_count()];
    for p in &past.points {
        let q = pose.transform_point(p);
        if let PointProjection::Pixel { pixel, range } = project_point(cfg, &q) {
            let idx = pixel.v * cfg.width + pixel.u;
            if range < best[idx] {
                best[idx] = range;
            }
        }
    }
    best.into_iter()
        .map(|r| if r.is_finite() { r as f32 } else { -1.0 })
        .collect()
}

/// `|r - r_past| / r` on pixels valid in both images, 0 elsewhere.
pub fn residual_from_ranges(current: &RangeImage, past_ranges: &[f32]) -> Vec<f32> {
    current
        .range
        .iter()
        .zip(&current.source)
        .zip(past_ranges)
        .map(|((&r, src), &rp)| {
            if src.is_none() || rp <= 0.0 {
                return 0.0;
            }
            debug_assert!(r > 0.0, "valid pixel with non-positive range");
            let (r, rp) = (f64::from(r), f64::from(rp));
            ((r - rp).abs() / r) as f32
        })
        .collect()
}

fn check_config(current: &RangeImage, cfg: &ProjectionConfig) -> Result<()> {
    if current.config != *cfg {
        return Err(Error::Precondition(
            "projection config differs from the current range image".into(),
        ));
    }
    Ok(())
}

/// Residual between the current image and `past` moved into the current
/// frame by `past_to_current`.
pub fn gen_residual(
    current: &RangeImage,
    past: &Scan,
    past_to_current: &Pose,
    cfg: &ProjectionConfig,
) -> Result<Vec<f32>> {
    check_config(current, cfg)?;
    Ok(residual_from_ranges(
        current,
        &reproject_ranges(past, past_to_current, cfg),
    ))
}

/// Builds one residual channel per past scan.
///
/// `history[j - 1]` is the j-th previous scan and `relative[j - 1]` is
/// `T^{j-1}_j`, the transform from history frame `j` into frame `j - 1`
/// (frame 0 being the current scan). Each past scan is moved directly into
/// the current frame with the composed chain.
pub fn build_stack(
    history: &[&Scan],
    relative: &[Pose],
    current: &RangeImage,
    current_frame: usize,
    cfg: &ProjectionConfig,
) -> Result<ResidualStack> {
    check_config(current, cfg)?;
    if relative.len() < history.len() {
        let missing = history[relative.len()];
        return Err(Error::Precondition(format!(
            "no relative pose for frame {} ({} poses for {} past scans)",
            missing.frame,
            relative.len(),
            history.len()
        )));
    }
    let mut channels = Vec::with_capacity(history.len());
    let mut past_ranges = Vec::with_capacity(history.len());
    for (j, past) in history.iter().enumerate() {
        let to_current = compose_relative(relative, j + 1, 0)?;
        let ranges = reproject_ranges(past, &to_current, cfg);
        channels.push(residual_from_ranges(current, &ranges));
        past_ranges.push(ranges);
    }
    Ok(ResidualStack {
        height: cfg.height,
        width: cfg.width,
        channels,
        past_ranges,
        valid: current.source.iter().map(Option::is_some).collect(),
        current_frame,
        source_frames: history.iter().map(|s| Some(s.frame)).collect(),
    })
}

/// Per-channel affine normalization `(value - mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSpec {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormalizationSpec {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.scale.len() {
            return Err(Error::Config("normalization mean/scale length mismatch".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite())
            || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Config("normalization must be finite with positive scales".into()));
        }
        Ok(())
    }

    /// Mean and standard deviation of every channel over valid pixels.
    pub fn estimate<'a>(
        frames: impl IntoIterator<Item = (&'a RangeImage, &'a ResidualStack)>,
    ) -> Result<Self> {
        let mut acc = NormAccumulator::default();
        for (image, stack) in frames {
            acc.add(image, stack)?;
        }
        acc.finish()
    }
}

/// Running per-channel moments for [`NormalizationSpec::estimate`].
#[derive(Debug, Clone, Default)]
pub struct NormAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
}

impl NormAccumulator {
    pub fn add(&mut self, image: &RangeImage, stack: &ResidualStack) -> Result<()> {
        let c = BASE_CHANNELS + stack.len();
        if self.sum.is_empty() {
            self.sum = vec![0.0; c];
            self.sum_sq = vec![0.0; c];
        } else if self.sum.len() != c {
            return Err(Error::Precondition("frames disagree on channel count".into()));
        }
        for idx in 0..image.range.len() {
            if !image.is_valid(idx) {
                continue;
            }
            self.count += 1;
            for (ch, v) in raw_channel_values(image, stack, idx).enumerate() {
                self.sum[ch] += v;
                self.sum_sq[ch] += v * v;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<NormalizationSpec> {
        if self.count == 0 {
            return Err(Error::Precondition("no valid pixels to estimate normalization".into()));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let scale = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let sd = (sq / n - m * m).max(0.0).sqrt();
                if sd > 1e-9 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormalizationSpec { mean, scale })
    }
}

fn raw_channel_values<'a>(
    image: &'a RangeImage,
    stack: &'a ResidualStack,
    idx: usize,
) -> impl Iterator<Item = f64> + 'a {
    [
        image.x[idx],
        image.y[idx],
        image.z[idx],
        image.range[idx],
        image.remission[idx],
    ]
    .into_iter()
    .chain(stack.channels.iter().map(move |c| c[idx]))
    .map(f64::from)
}

/// `h x w x (5 + N)` input, channel-planar, ordered x, y, z, r, e, d1..dN.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    pub height: usize,
    pub width: usize,
    pub channel_count: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
    pub norm: NormalizationSpec,
}

impl FusedInput {
    #[inline]
    pub fn value(&self, channel: usize, idx: usize) -> f64 {
        self.data[channel * self.height * self.width + idx]
    }

    /// Original value of a valid pixel.
    pub fn denormalized(&self, channel: usize, idx: usize) -> f64 {
        self.value(channel, idx) * self.norm.scale[channel] + self.norm.mean[channel]
    }

    pub fn residual_count(&self) -> usize {
        self.channel_count - BASE_CHANNELS
    }
}

/// Concatenates the current image with its residuals and normalizes every
/// channel. Invalid pixels are 0 after normalization.
pub fn fuse(current: &RangeImage, stack: &ResidualStack, norm: &NormalizationSpec) -> Result<FusedInput> {
    let (h, w) = (current.height(), current.width());
    if stack.height != h || stack.width != w || stack.valid.len() != h * w {
        return Err(Error::Precondition(format!(
            "residual stack is {}x{}, range image is {h}x{w}",
            stack.height, stack.width
        )));
    }
    let c = BASE_CHANNELS + stack.len();
    if norm.channels() != c {
        return Err(Error::Precondition(format!(
            "normalization covers {} channels, input has {c}",
            norm.channels()
        )));
    }
    norm.validate()?;
    let plane = h * w;
    let mut data = vec![0.0; c * plane];
    for idx in 0..plane {
        if !current.is_valid(idx) {
            continue;
        }
        for (ch, v) in raw_channel_values(current, stack, idx).enumerate() {
            data[ch * plane + idx] = (v - norm.mean[ch]) / norm.scale[ch];
        }
    }
    Ok(FusedInput {
        height: h,
        width: w,
        channel_count: c,
        data,
        valid: current.source.iter().map(Option::is_some).collect(),
        norm: norm.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_scan, Point};
    use crate::projection::project_scan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cfg() -> ProjectionConfig {
        ProjectionConfig {
            height: 32,
            width: 256,
            fov_up: 10f64.to_radians(),
            fov_down: 15f64.to_radians(),
        }
    }

    fn random_scan(seed: u64, n: usize, frame: usize) -> Scan {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let yaw = rng.gen_range(-PI..PI);
                let pitch = rng.gen_range(-c.fov_down..c.fov_up);
                let r = rng.gen_range(2.0..40.0);
                Point::new(
                    r * pitch.cos() * yaw.cos(),
                    r * pitch.cos() * yaw.sin(),
                    r * pitch.sin(),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        Scan::new(points, frame)
    }

    #[test]
    fn same_scan_identity_pose_is_zero() {
        let scan = random_scan(1, 5000, 0);
        let cur = project_scan(&scan, &cfg()).image;
        let d = gen_residual(&cur, &scan, &Pose::identity(), &cfg()).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_arithmetic() {
        let c = cfg();
        let cur = project_scan(&Scan::new(vec![Point::new(10.0, 0.0, 0.0, 0.0)], 0), &c).image;
        let past = Scan::new(vec![Point::new(12.0, 0.0, 0.0, 0.0)], 1);
        let d = gen_residual(&cur, &past, &Pose::identity(), &c).unwrap();
        let idx = cur.index(c.width / 2, 12);
        assert!(cur.is_valid(idx), "pixel layout changed");
        assert!((d[idx] - 0.2).abs() < 1e-6);
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let scan = random_scan(1, 100, 0);
        let cur = project_scan(&scan, &cfg()).image;
        let other = ProjectionConfig { width: 128, ..cfg() };
        assert!(matches!(
            gen_residual(&cur, &scan, &Pose::identity(), &other),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn invalid_pixels_are_zero_in_every_channel() {
        let c = cfg();
        let cur_scan = random_scan(2, 3000, 5);
        let cur = project_scan(&cur_scan, &c).image;
        let past: Vec<Scan> = (0..3).map(|j| random_scan(10 + j, 3000, 4 - j as usize)).collect();
        let refs: Vec<&Scan> = past.iter().collect();
        let rel = vec![Pose::translation(0.3, 0.1, 0.0); 3];
        let stack = build_stack(&refs, &rel, &cur, 5, &c).unwrap();
        for (ch, ranges) in stack.channels.iter().zip(&stack.past_ranges) {
            for idx in 0..c.pixel_count() {
                if !cur.is_valid(idx) || ranges[idx] <= 0.0 {
                    assert_eq!(ch[idx].to_bits(), 0);
                } else {
                    assert!(ch[idx].is_finite() && ch[idx] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_history_gives_five_channel_input() {
        let c = cfg();
        let cur = project_scan(&random_scan(3, 2000, 0), &c).image;
        let stack = build_stack(&[], &[], &cur, 0, &c).unwrap();
        assert!(stack.is_empty());
        let fused = fuse(&cur, &stack, &NormalizationSpec::identity(5)).unwrap();
        assert_eq!(fused.channel_count, 5);
    }

    #[test]
    fn duplicate_history_gives_zero_channels() {
        let c = cfg();
        let scan = random_scan(4, 4000, 2);
        let cur = project_scan(&scan, &c).image;
        let stack = build_stack(&[&scan, &scan], &[Pose::identity(); 2], &cur, 2, &c).unwrap();
        assert_eq!(stack.len(), 2);
        assert!(stack.channels.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_pose_names_frame() {
        let c = cfg();
        let scans: Vec<Scan> = (0..2).map(|j| random_scan(j, 100, 7 - j as usize)).collect();
        let cur = project_scan(&scans[0], &c).image;
        let err = build_stack(&[&scans[0], &scans[1]], &[Pose::identity()], &cur, 8, &c).unwrap_err();
        assert!(err.to_string().contains("frame 6"), "{err}");
    }

    #[test]
    fn stack_channels_match_single_frame_recomputation() {
        let c = cfg();
        let cur_scan = random_scan(30, 4000, 3);
        let cur = project_scan(&cur_scan, &c).image;
        let past: Vec<Scan> = (0..3).map(|j| random_scan(40 + j, 4000, 2 - j as usize)).collect();
        let refs: Vec<&Scan> = past.iter().collect();
        let rel = vec![
            Pose::yaw(0.05) * Pose::translation(0.5, 0.0, 0.0),
            Pose::translation(0.4, -0.1, 0.0),
            Pose::yaw(-0.02) * Pose::translation(0.6, 0.1, 0.01),
        ];
        let stack = build_stack(&refs, &rel, &cur, 3, &c).unwrap();
        for j in 1..=3 {
            // direct left-to-right matrix product of the chain
            let mut m = nalgebra::Matrix4::identity();
            for r in &rel[..j] {
                m *= r.matrix();
            }
            let pose = Pose::from_matrix(m).unwrap();
            let moved = transform_scan(&past[j - 1], &pose);
            let oracle = gen_residual(&cur, &moved, &Pose::identity(), &c).unwrap();
            let max = stack.channels[j - 1]
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max < 1e-5, "channel {j}: {max}");
        }
    }

    #[test]
    fn identity_norm_is_raw_concatenation() {
        let c = cfg();
        let scan = random_scan(5, 3000, 1);
        let cur = project_scan(&scan, &c).image;
        let past = random_scan(6, 3000, 0);
        let stack = build_stack(&[&past], &[Pose::identity()], &cur, 1, &c).unwrap();
        let fused = fuse(&cur, &stack, &NormalizationSpec::identity(6)).unwrap();
        let plane = c.pixel_count();
        for idx in 0..plane {
            if cur.is_valid(idx) {
                assert_eq!(fused.value(0, idx), f64::from(cur.x[idx]));
                assert_eq!(fused.value(3, idx), f64::from(cur.range[idx]));
                assert_eq!(fused.value(5, idx), f64::from(stack.channels[0][idx]));
            } else {
                assert!((0..6).all(|ch| fused.value(ch, idx) == 0.0));
            }
        }
    }

    #[test]
    fn constant_range_normalizes_to_zero() {
        let c = cfg();
        let points = vec![
            Point::new(7.0, 0.0, 0.0, 0.1),
            Point::new(0.0, 7.0, 0.0, 0.1),
            Point::new(-7.0, 0.0, 0.0, 0.1),
            Point::new(0.0, -7.0, 0.0, 0.1),
        ];
        let cur = project_scan(&Scan::new(points, 0), &c).image;
        assert_eq!(cur.valid_count(), 4);
        let stack = build_stack(&[], &[], &cur, 0, &c).unwrap();
        let mut norm = NormalizationSpec::identity(5);
        norm.mean[3] = f64::from(7.0f32);
        let fused = fuse(&cur, &stack, &norm).unwrap();
        let plane = c.pixel_count();
        assert!(fused.data[3 * plane..4 * plane].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_invertible() {
        let c = cfg();
        let frames: Vec<(RangeImage, ResidualStack)> = (0..3)
            .map(|f| {
                let cur = project_scan(&random_scan(50 + f, 4000, 1), &c).image;
                let past = random_scan(60 + f, 4000, 0);
                let stack = build_stack(&[&past], &[Pose::translation(0.2, 0.0, 0.0)], &cur, 1, &c).unwrap();
                (cur, stack)
            })
            .collect();
        let norm = NormalizationSpec::estimate(frames.iter().map(|(a, b)| (a, b))).unwrap();
        assert!(norm.scale.iter().all(|&s| s > 0.0));
        let (cur, stack) = &frames[1];
        let fused = fuse(cur, stack, &norm).unwrap();
        for idx in 0..c.pixel_count() {
            if !cur.is_valid(idx) {
                continue;
            }
            let raw: Vec<f64> = raw_channel_values(cur, stack, idx).collect();
            for (ch, v) in raw.iter().enumerate() {
                assert!((fused.denormalized(ch, idx) - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_shape_mismatch() {
        let c = cfg();
        let cur = project_scan(&random_scan(7, 100, 0), &c).image;
        let mut stack = build_stack(&[], &[], &cur, 0, &c).unwrap();
        stack.width = 10;
        assert!(matches!(
            fuse(&cur, &stack, &NormalizationSpec::identity(5)),
            Err(Error::Precondition(_))
        ));
        let stack = build_stack(&[], &[], &cur, 0, &c).unwrap();
        assert!(fuse(&cur, &stack, &NormalizationSpec::identity(6)).is_err());
    }
}
