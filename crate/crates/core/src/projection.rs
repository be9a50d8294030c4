//! Spherical projection of scans into range images, label transfer back to
//! points, and kNN cleanup of projection artifacts.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{Point, Scan};
use crate::label::{LabelGrid, MovingLabel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Upward field of view, radians, positive.
    pub fov_up: f64,
    /// Downward field of view, radians, positive.
    pub fov_down: f64,
}

impl Default for ProjectionConfig {
    /// HDL-64E geometry used by KITTI.
    fn default() -> Self {
        Self {
            height: 64,
            width: 2048,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
        }
    }
}

impl ProjectionConfig {
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!(
                "range image must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov().is_finite() && self.fov() > 0.0) {
            return Err(Error::Config("vertical field of view must be positive".into()));
        }
        Ok(())
    }

    /// Continuous image coordinates of a point before flooring.
    #[inline]
    pub fn continuous_coords(&self, x: f64, y: f64, z: f64, range: f64) -> (f64, f64) {
        self.angles_to_coords(y.atan2(x), (z / range).asin())
    }

    fn angles_to_coords(&self, yaw: f64, pitch: f64) -> (f64, f64) {
        let u = 0.5 * (1.0 - yaw / PI) * self.width as f64;
        let v = (1.0 - (pitch + self.fov_down) / self.fov()) * self.height as f64;
        (u, v)
    }

    /// Unit direction through the centre of pixel `(u, v)`; inverse of the
    /// projection mapping.
    pub fn pixel_center_direction(&self, u: usize, v: usize) -> [f64; 3] {
        let uc = u as f64 + 0.5;
        let vc = v as f64 + 0.5;
        let yaw = PI * (1.0 - 2.0 * uc / self.width as f64);
        let pitch = (1.0 - vc / self.height as f64) * self.fov() - self.fov_down;
        [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub u: usize,
    pub v: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointProjection {
    Pixel { pixel: Pixel, range: f64 },
    ZeroRange,
    OutOfFov,
}

/// Projects one point after rounding its coordinates to single precision,
/// the precision of the image buffers.
#[inline]
pub fn project_point(cfg: &ProjectionConfig, p: &Point) -> PointProjection {
    let x = p.x as f32 as f64;
    let y = p.y as f32 as f64;
    let z = p.z as f32 as f64;
    let range = (x * x + y * y + z * z).sqrt();
    if !(range > 0.0) {
        return PointProjection::ZeroRange;
    }
    let pitch = (z / range).asin();
    if pitch > cfg.fov_up || pitch < -cfg.fov_down {
        return PointProjection::OutOfFov;
    }
    let (u, v) = cfg.angles_to_coords(y.atan2(x), pitch);
    let u = (u.floor().max(0.0) as usize).min(cfg.width - 1);
    let v = (v.floor().max(0.0) as usize).min(cfg.height - 1);
    PointProjection::Pixel {
        pixel: Pixel { u, v },
        range,
    }
}

/// Per-pixel channels of a projected scan. Invalid pixels hold range -1 and
/// no source point.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub config: ProjectionConfig,
    pub range: Vec<f32>,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub z: Vec<f32>,
    pub remission: Vec<f32>,
    pub source: Vec<Option<u32>>,
}

impl RangeImage {
    pub fn empty(config: ProjectionConfig) -> Self {
        let n = config.pixel_count();
        Self {
            config,
            range: vec![-1.0; n],
            x: vec![0.0; n],
            y: vec![0.0; n],
            z: vec![0.0; n],
            remission: vec![0.0; n],
            source: vec![None; n],
        }
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.config.width + u
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.source[idx].is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.source.iter().filter(|s| s.is_some()).count()
    }

    /// Stored points of all valid pixels, in pixel order.
    pub fn stored_points(&self) -> Vec<Point> {
        (0..self.range.len())
            .filter(|&i| self.is_valid(i))
            .map(|i| {
                Point::new(
                    f64::from(self.x[i]),
                    f64::from(self.y[i]),
                    f64::from(self.z[i]),
                    f64::from(self.remission[i]),
                )
            })
            .collect()
    }
}

/// Result of projecting a scan.
#[derive(Debug, Clone)]
pub struct Projection {
    pub image: RangeImage,
    /// Pixel of every point, `None` for dropped points.
    pub pixels: Vec<Option<Pixel>>,
    pub zero_range: usize,
    pub out_of_fov: usize,
}

/// Projects `scan` into a range image. On collisions the nearest point wins;
/// ties keep the lower point index.
pub fn project_scan(scan: &Scan, cfg: &ProjectionConfig) -> Projection {
    project_points(&scan.points, cfg)
}

pub fn project_points(points: &[Point], cfg: &ProjectionConfig) -> Projection {
    let mut image = RangeImage::empty(*cfg);
    let mut best = vec![f64::INFINITY; cfg.pixel_count()];
    let mut pixels = Vec::with_capacity(points.len());
    let (mut zero_range, mut out_of_fov) = (0, 0);

    for (i, p) in points.iter().enumerate() {
        match project_point(cfg, p) {
            PointProjection::Pixel { pixel, range } => {
                let idx = image.index(pixel.u, pixel.v);
                if range < best[idx] {
                    best[idx] = range;
                    image.range[idx] = range as f32;
                    image.x[idx] = p.x as f32;
                    image.y[idx] = p.y as f32;
                    image.z[idx] = p.z as f32;
                    image.remission[idx] = p.remission as f32;
                    image.source[idx] = Some(i as u32);
                }
                pixels.push(Some(pixel));
            }
            PointProjection::ZeroRange => {
                zero_range += 1;
                pixels.push(None);
            }
            PointProjection::OutOfFov => {
                out_of_fov += 1;
                pixels.push(None);
            }
        }
    }
    Projection {
        image,
        pixels,
        zero_range,
        out_of_fov,
    }
}

/// Only the per-pixel nearest ranges, without the auxiliary channels.
pub fn project_ranges(points: &[Point], cfg: &ProjectionConfig) -> Vec<f32> {
    let mut best = vec![f64::INFINITY; cfg.pixel_count()];
    for p in points {
        if let PointProjection::Pixel { pixel, range } = project_point(cfg, p) {
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

/// Gives every point the label of its pixel; dropped points get `Ignore`.
pub fn unproject_labels(grid: &LabelGrid, pixels: &[Option<Pixel>]) -> Vec<MovingLabel> {
    pixels
        .iter()
        .map(|p| match p {
            Some(px) => grid.get(px.u, px.v),
            None => MovingLabel::Ignore,
        })
        .collect()
}

/// Pixel labels taken from the source point of each valid pixel.
pub fn labels_to_grid(image: &RangeImage, point_labels: &[MovingLabel]) -> LabelGrid {
    LabelGrid {
        height: image.height(),
        width: image.width(),
        labels: image
            .source
            .iter()
            .map(|s| s.map_or(MovingLabel::Ignore, |i| point_labels[i as usize]))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnParams {
    pub k: usize,
    /// Side of the square pixel neighbourhood; odd.
    pub window: usize,
    /// Maximum absolute range difference for a neighbour to vote, metres.
    pub cutoff: f64,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: 5,
            window: 5,
            cutoff: 1.0,
        }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("knn k must be at least 1".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config("knn window must be odd".into()));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::Config("knn cutoff must be positive".into()));
        }
        Ok(())
    }
}

/// Majority vote over the `k` range-nearest neighbours of each point.
///
/// Candidates are the point itself plus the source points of the pixels in a
/// `window x window` neighbourhood (wrapping in azimuth). A tie keeps the
/// point's raw label; dropped points keep their raw label too.
pub fn knn_clean(
    scan: &Scan,
    pixels: &[Option<Pixel>],
    image: &RangeImage,
    raw_labels: &[MovingLabel],
    params: &KnnParams,
) -> Vec<MovingLabel> {
    let (h, w) = (image.height() as isize, image.width() as isize);
    let half = (params.window / 2) as isize;
    let mut candidates: Vec<(f64, MovingLabel)> = Vec::with_capacity(params.window.pow(2) + 1);
    let pixel_labels: Vec<Option<MovingLabel>> = image
        .source
        .iter()
        .map(|s| s.map(|s| raw_labels[s as usize]))
        .collect();
    let uniform = |px: &Pixel, own: MovingLabel| {
        (-half..=half).all(|dv| {
            let v = px.v as isize + dv;
            v < 0
                || v >= h
                || (-half..=half).all(|du| {
                    let u = (px.u as isize + du).rem_euclid(w);
                    pixel_labels[(v * w + u) as usize].map_or(true, |l| l == own)
                })
        })
    };

    scan.points
        .iter()
        .zip(pixels)
        .enumerate()
        .map(|(i, (p, px))| {
            let Some(px) = px else {
                return raw_labels[i];
            };
            if uniform(px, raw_labels[i]) {
                return raw_labels[i];
            }
            let r = match project_point(&image.config, p) {
                PointProjection::Pixel { range, .. } => range,
                _ => return raw_labels[i],
            };
            candidates.clear();
            candidates.push((0.0, raw_labels[i]));
            for dv in -half..=half {
                let v = px.v as isize + dv;
                if v < 0 || v >= h {
                    continue;
                }
                for du in -half..=half {
                    let u = (px.u as isize + du).rem_euclid(w);
                    let idx = (v * w + u) as usize;
                    let Some(src) = image.source[idx] else { continue };
                    if src as usize == i {
                        continue;
                    }
                    let d = (f64::from(image.range[idx]) - r).abs();
                    if d <= params.cutoff {
                        candidates.push((d, raw_labels[src as usize]));
                    }
                }
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
            majority(&candidates[..params.k.min(candidates.len())], raw_labels[i])
        })
        .collect()
}

fn majority(votes: &[(f64, MovingLabel)], fallback: MovingLabel) -> MovingLabel {
    let mut counts = [0usize; 3];
    for &(_, l) in votes {
        counts[label_slot(l)] += 1;
    }
    let best = *counts.iter().max().unwrap();
    let mut winners = [MovingLabel::Static, MovingLabel::Moving, MovingLabel::Ignore]
        .into_iter()
        .filter(|&l| counts[label_slot(l)] == best);
    match (winners.next(), winners.next()) {
        (Some(l), None) => l,
        _ => fallback,
    }
}

fn label_slot(l: MovingLabel) -> usize {
    match l {
        MovingLabel::Static => 0,
        MovingLabel::Moving => 1,
        MovingLabel::Ignore => 2,
    }
}
