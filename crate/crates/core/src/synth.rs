//! Ray-cast synthetic LiDAR sequences with exact moving-point ground truth.
//!
//! Scenes are built from axis-aligned boxes and planes. Movers are boxes
//! translating at a constant velocity per frame. Every pixel centre of the
//! sensor model is cast as a ray; the nearest hit becomes a point.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point, Pose, Scan};
use crate::io::SequenceData;
use crate::label::MovingLabel;
use crate::projection::ProjectionConfig;

const HIT_EPS: f64 = 1e-9;

/// Ground height relative to the sensor, as on a car-mounted scanner.
pub const GROUND_Z: f64 = -1.73;

/// Movers float this far above the ground so that their segments stay apart
/// from the road surface.
pub const MOVER_CLEARANCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn from_center(center: [f64; 3], size: [f64; 3]) -> Self {
        Self {
            min: [0, 1, 2].map(|k| center[k] - 0.5 * size[k]),
            max: [0, 1, 2].map(|k| center[k] + 0.5 * size[k]),
        }
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            min: [0, 1, 2].map(|k| self.min[k] + d[k]),
            max: [0, 1, 2].map(|k| self.max[k] + d[k]),
        }
    }

    pub fn union(&self, o: &Aabb) -> Self {
        Self {
            min: [0, 1, 2].map(|k| self.min[k].min(o.min[k])),
            max: [0, 1, 2].map(|k| self.max[k].max(o.max[k])),
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k])
    }

    /// Nearest positive hit distance along a ray. From inside the box the
    /// exit point is returned, so a box can serve as a room.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t_near = t_near.max(a);
            t_far = t_far.min(b);
        }
        if t_near > t_far {
            return None;
        }
        if t_near > HIT_EPS {
            Some(t_near)
        } else if t_far > HIT_EPS {
            Some(t_far)
        } else {
            None
        }
    }
}

/// Points `p` with `normal . p = offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let denom: f64 = (0..3).map(|k| self.normal[k] * dir[k]).sum();
        if denom.abs() < 1e-15 {
            return None;
        }
        let along: f64 = (0..3).map(|k| self.normal[k] * origin[k]).sum();
        let t = (self.offset - along) / denom;
        (t > HIT_EPS).then_some(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box(Aabb),
    Plane(Plane),
}

impl Shape {
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        match self {
            Shape::Box(b) => b.intersect(origin, dir),
            Shape::Plane(p) => p.intersect(origin, dir),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticPrimitive {
    pub shape: Shape,
    pub remission: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mover {
    /// Box occupied at frame 0.
    pub start: Aabb,
    /// Displacement per frame in meters.
    pub velocity: [f64; 3],
    pub remission: f64,
}

impl Mover {
    pub fn at_frame(&self, frame: usize) -> Aabb {
        let f = frame as f64;
        self.start.translated(self.velocity.map(|v| v * f))
    }

    /// Volume covered by the box between the first and last frame.
    pub fn swept(&self, frames: usize) -> Aabb {
        self.start.union(&self.at_frame(frames.saturating_sub(1)))
    }

    pub fn speed(&self) -> f64 {
        self.velocity.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub statics: Vec<StaticPrimitive>,
    pub movers: Vec<Mover>,
    /// Sensor pose per frame in the world frame.
    pub trajectory: Vec<Pose>,
    pub sensor: ProjectionConfig,
    pub frames: usize,
    /// Hits farther than this are not returned.
    pub max_range: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(sensor: ProjectionConfig, trajectory: Vec<Pose>) -> Self {
        Self {
            statics: Vec::new(),
            movers: Vec::new(),
            frames: trajectory.len(),
            trajectory,
            sensor,
            max_range: 120.0,
            seed: 0,
        }
    }

    /// Diagonal of the bounding box of all boxes at frame 0.
    pub fn diameter(&self) -> f64 {
        let mut bound: Option<Aabb> = None;
        let mut add = |b: Aabb| bound = Some(bound.map_or(b, |a| a.union(&b)));
        for s in &self.statics {
            if let Shape::Box(b) = s.shape {
                add(b);
            }
        }
        for m in &self.movers {
            add(m.start);
        }
        bound.map_or(0.0, |b| (0..3).map(|k| (b.max[k] - b.min[k]).powi(2)).sum::<f64>().sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if self.trajectory.len() != self.frames {
            return Err(Error::Validation(format!(
                "trajectory has {} poses for {} frames",
                self.trajectory.len(),
                self.frames
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Validation("max range must be positive".into()));
        }
        for s in &self.statics {
            match s.shape {
                Shape::Box(b) if !b.is_valid() => {
                    return Err(Error::Validation(format!("degenerate box {b:?}")))
                }
                Shape::Plane(p) => {
                    let n = p.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (n - 1.0).abs() > 1e-9 || !p.offset.is_finite() {
                        return Err(Error::Validation("plane normal must be unit length".into()));
                    }
                }
                _ => {}
            }
        }
        let diameter = self.diameter();
        for (i, m) in self.movers.iter().enumerate() {
            if !m.start.is_valid() || m.velocity.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("mover {i} is degenerate")));
            }
            if m.speed() >= diameter {
                return Err(Error::Validation(format!(
                    "mover {i} moves {:.3} m per frame in a scene {diameter:.3} m across",
                    m.speed()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveRef {
    Static(usize),
    Mover(usize),
}

/// One returned ray: pixel, hit distance and what was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub u: usize,
    pub v: usize,
    pub distance: f64,
    pub primitive: PrimitiveRef,
}

/// Casts every pixel ray of one frame. Points are ordered row by row.
pub fn render_frame(spec: &SceneSpec, frame: usize) -> (Scan, Vec<Hit>) {
    let cfg = &spec.sensor;
    let pose = spec.trajectory[frame];
    let rot = pose.rotation();
    let t = pose.translation_vector();
    let origin = [t.x, t.y, t.z];
    let movers: Vec<Aabb> = spec.movers.iter().map(|m| m.at_frame(frame)).collect();

    let rows: Vec<Vec<(Point, MovingLabel, Hit)>> = (0..cfg.height)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::new();
            for u in 0..cfg.width {
                let d = cfg.pixel_center_direction(u, v);
                let wd = rot * Vector3::new(d[0], d[1], d[2]);
                let wd = [wd.x, wd.y, wd.z];
                let mut best: Option<(f64, PrimitiveRef, f64)> = None;
                let mut consider = |hit: Option<f64>, prim: PrimitiveRef, rem: f64| {
                    if let Some(dist) = hit {
                        if best.is_none_or(|b| dist < b.0) {
                            best = Some((dist, prim, rem));
                        }
                    }
                };
                for (i, s) in spec.statics.iter().enumerate() {
                    consider(s.shape.intersect(origin, wd), PrimitiveRef::Static(i), s.remission);
                }
                for (i, b) in movers.iter().enumerate() {
                    consider(b.intersect(origin, wd), PrimitiveRef::Mover(i), spec.movers[i].remission);
                }
                let Some((dist, prim, rem)) = best else { continue };
                if dist > spec.max_range {
                    continue;
                }
                let label = match prim {
                    PrimitiveRef::Mover(_) => MovingLabel::Moving,
                    PrimitiveRef::Static(_) => MovingLabel::Static,
                };
                row.push((
                    Point::new(d[0] * dist, d[1] * dist, d[2] * dist, rem),
                    label,
                    Hit { u, v, distance: dist, primitive: prim },
                ));
            }
            row
        })
        .collect();

    let n: usize = rows.iter().map(Vec::len).sum();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut hits = Vec::with_capacity(n);
    for (p, l, h) in rows.into_iter().flatten() {
        points.push(p);
        labels.push(l);
        hits.push(h);
    }
    let scan = Scan {
        points,
        labels: Some(labels),
        frame,
    };
    (scan, hits)
}

/// Sensor-to-camera transform written as the sequence calibration.
pub fn default_calibration() -> Pose {
    let m = [0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27];
    Pose::from_row_major_3x4(&m, 1e-9).expect("calibration is a rigid transform")
}

/// Renders every frame of the scene.
pub fn render_sequence(spec: &SceneSpec, id: &str) -> Result<SequenceData> {
    spec.validate()?;
    let scans = (0..spec.frames).map(|f| render_frame(spec, f).0).collect();
    Ok(SequenceData {
        id: id.to_string(),
        scans,
        poses: spec.trajectory.clone(),
        calibration: default_calibration(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    StaticRoom,
    CrossingBox,
    Approach,
    BusyIntersection,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::StaticRoom,
        Preset::CrossingBox,
        Preset::Approach,
        Preset::BusyIntersection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::StaticRoom => "static-room",
            Preset::CrossingBox => "crossing-box",
            Preset::Approach => "approach",
            Preset::BusyIntersection => "busy-intersection",
        }
    }

    pub fn default_frames(self) -> usize {
        match self {
            Preset::StaticRoom => 20,
            Preset::CrossingBox => 30,
            Preset::Approach => 10,
            Preset::BusyIntersection => 16,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset '{s}' (expected one of: {})",
                    Preset::ALL.map(Preset::name).join(", ")
                ))
            })
    }
}

/// Sequence ids produced for every preset; the last one is the validation split.
pub const BENCHMARK_SEQUENCES: [&str; 3] = ["00", "01", "08"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkOptions {
    pub sensor: ProjectionConfig,
    /// Frames per sequence; `None` uses the preset default.
    pub frames: Option<usize>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            sensor: ProjectionConfig::default(),
            frames: None,
        }
    }
}

/// Car-sized, van-sized, cyclist-sized and pedestrian-sized boxes (length, width, height).
pub const MOVER_SHAPES: [[f64; 3]; 4] = [
    [4.2, 1.8, 1.5],
    [5.0, 2.0, 2.2],
    [1.8, 0.6, 1.7],
    [0.6, 0.6, 1.7],
];

fn ground() -> StaticPrimitive {
    StaticPrimitive {
        shape: Shape::Plane(Plane {
            normal: [0.0, 0.0, 1.0],
            offset: GROUND_Z,
        }),
        remission: 0.25,
    }
}

fn straight_trajectory(frames: usize, start: [f64; 3], step: [f64; 3], yaw_step: f64) -> Vec<Pose> {
    (0..frames)
        .map(|f| {
            let k = f as f64;
            Pose::from_parts(
                Rotation3::from_axis_angle(&Vector3::z_axis(), yaw_step * k),
                Vector3::new(start[0] + step[0] * k, start[1] + step[1] * k, start[2] + step[2] * k),
            )
        })
        .collect()
}

/// Box resting `MOVER_CLEARANCE` above the ground, footprint centred at `(x, y)`
/// with its length along x or y.
fn vehicle(x: f64, y: f64, shape: [f64; 3], along_x: bool) -> Aabb {
    let (sx, sy) = if along_x { (shape[0], shape[1]) } else { (shape[1], shape[0]) };
    let z0 = GROUND_Z + MOVER_CLEARANCE;
    Aabb::new(
        [x - 0.5 * sx, y - 0.5 * sy, z0],
        [x + 0.5 * sx, y + 0.5 * sy, z0 + shape[2]],
    )
}

fn static_room(rng: &mut ChaCha8Rng, sensor: ProjectionConfig, frames: usize) -> SceneSpec {
    let start = [-8.0 + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0];
    let mut spec = SceneSpec::new(sensor, straight_trajectory(frames, start, [0.5, 0.0, 0.0], 0.0));
    spec.statics.push(StaticPrimitive {
        shape: Shape::Box(Aabb::new([-30.0, -15.0, GROUND_Z], [30.0, 15.0, 6.0])),
        remission: 0.4,
    });
    spec
}

fn crossing_box(rng: &mut ChaCha8Rng, sensor: ProjectionConfig, frames: usize) -> SceneSpec {
    let start = [-10.0 + rng.gen_range(-1.0..1.0), 0.0, 0.0];
    let yaw_step = rng.gen_range(-0.3..0.3f64).to_radians();
    let mut spec = SceneSpec::new(sensor, straight_trajectory(frames, start, [0.4, 0.0, 0.0], yaw_step));
    spec.statics.push(ground());
    for (min, max, rem) in [
        ([-40.0, 18.0, GROUND_Z], [40.0, 22.0, 8.0], 0.6),
        ([-40.0, -22.0, GROUND_Z], [40.0, -18.0, 8.0], 0.55),
        ([12.0, 8.0, GROUND_Z], [13.0, 9.0, 3.0], 0.7),
        ([-20.0, -9.0, GROUND_Z], [-19.0, -8.0, 3.0], 0.7),
    ] {
        spec.statics.push(StaticPrimitive {
            shape: Shape::Box(Aabb::new(min, max)),
            remission: rem,
        });
    }
    spec.movers.push(Mover {
        start: vehicle(7.0 + rng.gen_range(-1.0..1.0), -12.0, MOVER_SHAPES[0], true),
        velocity: [0.0, 0.8, 0.0],
        remission: 0.8,
    });
    spec
}

fn approach(rng: &mut ChaCha8Rng, sensor: ProjectionConfig, frames: usize) -> SceneSpec {
    let mut spec = SceneSpec::new(sensor, vec![Pose::identity(); frames]);
    spec.statics.push(ground());
    spec.statics.push(StaticPrimitive {
        shape: Shape::Box(Aabb::new([15.0, -10.0, GROUND_Z], [16.0, 10.0, 6.0])),
        remission: 0.5,
    });
    let y = rng.gen_range(-0.5..0.5);
    spec.movers.push(Mover {
        start: Aabb::new([APPROACH_START, y - 1.0, -1.0], [APPROACH_START + 0.1, y + 1.0, 1.0]),
        velocity: [-APPROACH_SPEED, 0.0, 0.0],
        remission: 0.9,
    });
    spec
}

/// Near face of the approaching panel at frame 0, and its speed toward the sensor.
pub const APPROACH_START: f64 = 14.0;
pub const APPROACH_SPEED: f64 = 1.0;

/// Angular half-width of an axis-aligned footprint as seen from the origin.
fn azimuth_span(b: &Aabb) -> (f64, f64) {
    let corners = [
        (b.min[0], b.min[1]),
        (b.min[0], b.max[1]),
        (b.max[0], b.min[1]),
        (b.max[0], b.max[1]),
    ];
    let center = (0.5 * (b.min[1] + b.max[1])).atan2(0.5 * (b.min[0] + b.max[0]));
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for (x, y) in corners {
        let mut d = y.atan2(x) - center;
        d = (d + PI).rem_euclid(2.0 * PI) - PI;
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (center + lo, center + hi)
}

fn busy_intersection(rng: &mut ChaCha8Rng, sensor: ProjectionConfig, frames: usize) -> SceneSpec {
    let mut spec = SceneSpec::new(sensor, vec![Pose::identity(); frames]);
    spec.statics.push(StaticPrimitive {
        shape: Shape::Box(Aabb::new([-35.0, -35.0, GROUND_Z], [35.0, 35.0, 9.0])),
        remission: 0.35,
    });
    let base = rng.gen_range(0.0..0.5 * PI);
    let travel = (frames.saturating_sub(1)) as f64;
    for (k, shape) in MOVER_SHAPES.iter().enumerate() {
        let pedestrian_like = shape[0] < 2.0;
        // Movers travel tangentially across the sector centred on their heading.
        let heading = base + k as f64 * 0.5 * PI;
        let range = if pedestrian_like { rng.gen_range(9.0..11.0) } else { rng.gen_range(13.0..16.0) };
        let speed = if pedestrian_like { rng.gen_range(0.25..0.35) } else { rng.gen_range(0.6..0.8) };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (tx, ty) = (-heading.sin() * sign, heading.cos() * sign);
        let mid = (range * heading.cos(), range * heading.sin());
        let half = 0.5 * speed * travel;
        let start = (mid.0 - tx * half, mid.1 - ty * half);
        let along_x = tx.abs() >= ty.abs();
        spec.movers.push(Mover {
            start: vehicle(start.0, start.1, *shape, along_x),
            velocity: [tx * speed, ty * speed, 0.0],
            remission: 0.7 + 0.05 * k as f64,
        });

        // Parked twin halfway between this heading and the next.
        let twin_heading = heading + 0.25 * PI;
        let twin_range = if pedestrian_like { rng.gen_range(9.0..11.0) } else { rng.gen_range(13.0..16.0) };
        spec.statics.push(StaticPrimitive {
            shape: Shape::Box(vehicle(
                twin_range * twin_heading.cos(),
                twin_range * twin_heading.sin(),
                *shape,
                rng.gen_bool(0.5),
            )),
            remission: 0.7 + 0.05 * k as f64,
        });
    }
    // Pillars behind the traffic.
    for k in 0..4 {
        let a = base + (k as f64 + rng.gen_range(0.1..0.9)) * 0.5 * PI;
        let r = rng.gen_range(22.0..28.0);
        spec.statics.push(StaticPrimitive {
            shape: Shape::Box(Aabb::from_center([r * a.cos(), r * a.sin(), 1.0], [1.0, 1.0, 2.0 * (1.0 - GROUND_Z)])),
            remission: 0.6,
        });
    }
    spec
}

/// Parked twins of a busy-intersection scene: the static boxes that copy a mover shape.
pub fn parked_twins(spec: &SceneSpec) -> Vec<usize> {
    spec.statics
        .iter()
        .enumerate()
        .filter(|(_, s)| match s.shape {
            Shape::Box(b) => {
                let size = [0, 1, 2].map(|k| b.max[k] - b.min[k]);
                (b.min[2] - (GROUND_Z + MOVER_CLEARANCE)).abs() < 1e-9
                    && MOVER_SHAPES.iter().any(|m| {
                        (m[2] - size[2]).abs() < 1e-9
                            && (((m[0] - size[0]).abs() < 1e-9 && (m[1] - size[1]).abs() < 1e-9)
                                || ((m[1] - size[0]).abs() < 1e-9 && (m[0] - size[1]).abs() < 1e-9))
                    })
            }
            Shape::Plane(_) => false,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Whether the azimuth sector swept by any mover overlaps a parked twin.
pub fn twins_occluded(spec: &SceneSpec) -> bool {
    let overlaps = |a: (f64, f64), b: (f64, f64)| {
        let mid_a = 0.5 * (a.0 + a.1);
        let mid_b = 0.5 * (b.0 + b.1);
        let d = ((mid_a - mid_b + PI).rem_euclid(2.0 * PI) - PI).abs();
        d < 0.5 * (a.1 - a.0) + 0.5 * (b.1 - b.0)
    };
    let twins: Vec<(f64, f64)> = parked_twins(spec)
        .into_iter()
        .filter_map(|i| match spec.statics[i].shape {
            Shape::Box(b) => Some(azimuth_span(&b)),
            Shape::Plane(_) => None,
        })
        .collect();
    spec.movers.iter().any(|m| {
        (0..spec.frames).any(|f| {
            let s = azimuth_span(&m.at_frame(f));
            twins.iter().any(|t| overlaps(s, *t))
        })
    })
}

fn variant_rng(seed: u64, preset: Preset, variant: usize) -> ChaCha8Rng {
    let tag = preset as u64 + 1;
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 32) ^ variant as u64)
}

/// Scene of one benchmark sequence.
pub fn preset_scene(preset: Preset, seed: u64, variant: usize, options: &BenchmarkOptions) -> SceneSpec {
    let mut rng = variant_rng(seed, preset, variant);
    let frames = options.frames.unwrap_or(preset.default_frames());
    let mut spec = match preset {
        Preset::StaticRoom => static_room(&mut rng, options.sensor, frames),
        Preset::CrossingBox => crossing_box(&mut rng, options.sensor, frames),
        Preset::Approach => approach(&mut rng, options.sensor, frames),
        Preset::BusyIntersection => busy_intersection(&mut rng, options.sensor, frames),
    };
    spec.seed = seed;
    spec
}

pub fn make_benchmark_with(preset: Preset, seed: u64, options: &BenchmarkOptions) -> Result<Vec<SequenceData>> {
    BENCHMARK_SEQUENCES
        .iter()
        .enumerate()
        .map(|(i, id)| render_sequence(&preset_scene(preset, seed, i, options), id))
        .collect()
}

/// Training sequences 00 and 01 plus validation sequence 08 of a preset.
pub fn make_benchmark(preset: &str, seed: u64) -> Result<Vec<SequenceData>> {
    make_benchmark_with(preset.parse()?, seed, &BenchmarkOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project_scan, PointProjection, project_point};

    fn small_sensor() -> ProjectionConfig {
        ProjectionConfig {
            height: 32,
            width: 256,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_gives_empty_scans() {
        let spec = SceneSpec::new(small_sensor(), vec![Pose::identity(); 3]);
        let seq = render_sequence(&spec, "00").unwrap();
        assert_eq!(seq.scans.len(), 3);
        assert!(seq.scans.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn plane_ranges_match_closed_form() {
        let mut spec = SceneSpec::new(small_sensor(), vec![Pose::identity()]);
        spec.statics.push(StaticPrimitive {
            shape: Shape::Plane(Plane { normal: [1.0, 0.0, 0.0], offset: 10.0 }),
            remission: 0.5,
        });
        let (scan, hits) = render_frame(&spec, 0);
        assert!(!scan.is_empty());
        let cfg = small_sensor();
        for h in &hits {
            let d = cfg.pixel_center_direction(h.u, h.v);
            // Angle between the ray and the plane normal.
            let expected = 10.0 / d[0];
            assert!((h.distance - expected).abs() < 1e-9, "{} vs {expected}", h.distance);
        }
        // Every forward-facing ray within range hits the plane.
        let forward = (0..cfg.height)
            .flat_map(|v| (0..cfg.width).map(move |u| (u, v)))
            .filter(|&(u, v)| {
                let d = cfg.pixel_center_direction(u, v);
                d[0] > 0.0 && 10.0 / d[0] <= spec.max_range
            })
            .count();
        assert_eq!(hits.len(), forward);
    }

    fn enumerate_nearest(spec: &SceneSpec, frame: usize, u: usize, v: usize) -> Option<(f64, PrimitiveRef)> {
        let pose = spec.trajectory[frame];
        let d = spec.sensor.pixel_center_direction(u, v);
        let wd = pose.rotation() * Vector3::new(d[0], d[1], d[2]);
        let o = pose.translation_vector();
        let (o, wd) = ([o.x, o.y, o.z], [wd.x, wd.y, wd.z]);
        let mut all: Vec<(f64, PrimitiveRef)> = Vec::new();
        for (i, s) in spec.statics.iter().enumerate() {
            if let Some(t) = s.shape.intersect(o, wd) {
                all.push((t, PrimitiveRef::Static(i)));
            }
        }
        for (i, m) in spec.movers.iter().enumerate() {
            if let Some(t) = m.at_frame(frame).intersect(o, wd) {
                all.push((t, PrimitiveRef::Mover(i)));
            }
        }
        all.into_iter()
            .filter(|(t, _)| *t <= spec.max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    #[test]
    fn mover_labels_match_ray_enumeration() {
        let spec = preset_scene(Preset::CrossingBox, 3, 0, &BenchmarkOptions { sensor: small_sensor(), frames: Some(20) });
        for frame in [0, 7, 12, 19] {
            let (scan, hits) = render_frame(&spec, frame);
            let labels = scan.labels.as_ref().unwrap();
            let mut expected_moving = 0;
            for v in 0..spec.sensor.height {
                for u in 0..spec.sensor.width {
                    if let Some((_, PrimitiveRef::Mover(_))) = enumerate_nearest(&spec, frame, u, v) {
                        expected_moving += 1;
                    }
                }
            }
            for (h, l) in hits.iter().zip(labels) {
                let (_, prim) = enumerate_nearest(&spec, frame, h.u, h.v).unwrap();
                assert_eq!(prim, h.primitive);
                assert_eq!(l.is_moving(), matches!(prim, PrimitiveRef::Mover(_)));
            }
            assert_eq!(labels.iter().filter(|l| l.is_moving()).count(), expected_moving);
        }
    }

    #[test]
    fn static_room_has_no_moving_points() {
        let seqs = make_benchmark_with(Preset::StaticRoom, 1, &BenchmarkOptions { sensor: small_sensor(), frames: None }).unwrap();
        assert_eq!(seqs.len(), 3);
        for s in &seqs {
            for scan in &s.scans {
                assert!(scan.labels.as_ref().unwrap().iter().all(|l| *l == MovingLabel::Static));
                // Closed room: every ray returns.
                assert_eq!(scan.len(), small_sensor().pixel_count());
            }
        }
    }

    #[test]
    fn crossing_box_moves_by_velocity() {
        let spec = preset_scene(Preset::CrossingBox, 5, 0, &BenchmarkOptions::default());
        let m = &spec.movers[0];
        let c = |b: Aabb| [0, 1, 2].map(|k| 0.5 * (b.min[k] + b.max[k]));
        let (a, b) = (c(m.at_frame(0)), c(m.at_frame(1)));
        for k in 0..3 {
            assert!((b[k] - a[k] - m.velocity[k]).abs() < 1e-12);
        }
        assert!((m.speed() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn busy_intersection_twins_are_static_and_unoccluded() {
        let opts = BenchmarkOptions { sensor: small_sensor(), frames: None };
        for variant in 0..3 {
            let spec = preset_scene(Preset::BusyIntersection, 9, variant, &opts);
            assert_eq!(spec.movers.len(), 4);
            let twins = parked_twins(&spec);
            assert_eq!(twins.len(), 4);
            assert!(!twins_occluded(&spec));
            for frame in [0, spec.frames - 1] {
                let (scan, hits) = render_frame(&spec, frame);
                let labels = scan.labels.unwrap();
                let mut twin_hits = 0;
                for (h, l) in hits.iter().zip(&labels) {
                    let oracle = enumerate_nearest(&spec, frame, h.u, h.v).unwrap().1;
                    assert_eq!(oracle, h.primitive);
                    if let PrimitiveRef::Static(i) = oracle {
                        if twins.contains(&i) {
                            twin_hits += 1;
                            assert_eq!(*l, MovingLabel::Static);
                        }
                    } else {
                        assert_eq!(*l, MovingLabel::Moving);
                    }
                }
                assert!(twin_hits > 0);
                assert!(labels.iter().any(|l| l.is_moving()));
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let opts = BenchmarkOptions { sensor: small_sensor(), frames: Some(4) };
        let a = make_benchmark_with(Preset::BusyIntersection, 7, &opts).unwrap();
        let b = make_benchmark_with(Preset::BusyIntersection, 7, &opts).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scans, y.scans);
            assert_eq!(x.poses, y.poses);
        }
        let c = make_benchmark_with(Preset::BusyIntersection, 8, &opts).unwrap();
        assert_ne!(a[0].scans, c[0].scans);
    }

    #[test]
    fn rendered_points_project_to_their_pixels() {
        let spec = preset_scene(Preset::CrossingBox, 2, 1, &BenchmarkOptions { sensor: small_sensor(), frames: Some(3) });
        let (scan, hits) = render_frame(&spec, 2);
        for (p, h) in scan.points.iter().zip(&hits) {
            match project_point(&spec.sensor, p) {
                PointProjection::Pixel { pixel, .. } => assert_eq!((pixel.u, pixel.v), (h.u, h.v)),
                other => panic!("{other:?}"),
            }
        }
        let proj = project_scan(&scan, &spec.sensor);
        assert_eq!(proj.image.valid_count(), scan.len());
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(make_benchmark("parking-lot", 0), Err(Error::Config(_))));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = SceneSpec::new(small_sensor(), vec![Pose::identity(); 2]);
        spec.frames = 3;
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::new(small_sensor(), vec![Pose::identity(); 2]);
        spec.statics.push(StaticPrimitive { shape: Shape::Box(Aabb::new([0.0; 3], [1.0; 3])), remission: 0.1 });
        spec.movers.push(Mover { start: Aabb::new([2.0; 3], [3.0; 3]), velocity: [50.0, 0.0, 0.0], remission: 0.1 });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn box_hit_from_inside_is_exit_point() {
        let b = Aabb::new([-1.0, -2.0, -3.0], [1.0, 2.0, 3.0]);
        assert_eq!(b.intersect([0.0; 3], [1.0, 0.0, 0.0]), Some(1.0));
        assert_eq!(b.intersect([-5.0, 0.0, 0.0], [1.0, 0.0, 0.0]), Some(4.0));
        assert_eq!(b.intersect([-5.0, 0.0, 0.0], [-1.0, 0.0, 0.0]), None);
        assert_eq!(b.intersect([-5.0, 5.0, 0.0], [1.0, 0.0, 0.0]), None);
    }
}
