//! Static map aggregation with predicted-moving points removed, and PLY export.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, Pose, Scan};
use crate::label::MovingLabel;

/// Where a map point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub frame: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateMap {
    /// Global-frame points.
    pub points: Vec<Point>,
    pub sources: Vec<Provenance>,
    pub voxel: Option<f64>,
    /// Points dropped because they were predicted moving.
    pub removed: usize,
}

impl AggregateMap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Incremental map accumulation, one scan at a time.
#[derive(Debug, Clone, Default)]
pub struct MapBuilder {
    map: AggregateMap,
}

impl MapBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the non-moving points of `scan` moved into the global frame by
    /// `pose`. Returns how many points were removed.
    pub fn add_scan(&mut self, scan: &Scan, predictions: &[MovingLabel], pose: &Pose) -> Result<usize> {
        if predictions.len() != scan.len() {
            return Err(Error::Precondition(format!(
                "frame {}: {} predictions for {} points",
                scan.frame,
                predictions.len(),
                scan.len()
            )));
        }
        let mut removed = 0;
        for (i, (p, l)) in scan.points.iter().zip(predictions).enumerate() {
            if l.is_moving() {
                removed += 1;
                continue;
            }
            self.map.points.push(pose.transform_point(p));
            self.map.sources.push(Provenance {
                frame: scan.frame,
                index: i,
            });
        }
        self.map.removed += removed;
        Ok(removed)
    }

    pub fn finish(self, voxel: Option<f64>) -> Result<AggregateMap> {
        match voxel {
            Some(res) => voxel_downsample(&self.map, res),
            None => Ok(self.map),
        }
    }
}

/// Aggregates every scan with its predictions and absolute pose.
pub fn build_map(
    scans: &[Scan],
    predictions: &[Vec<MovingLabel>],
    poses: &[Pose],
    voxel: Option<f64>,
) -> Result<AggregateMap> {
    if predictions.len() != scans.len() || poses.len() != scans.len() {
        return Err(Error::Precondition(format!(
            "{} scans, {} prediction sets, {} poses",
            scans.len(),
            predictions.len(),
            poses.len()
        )));
    }
    let mut b = MapBuilder::new();
    for ((scan, pred), pose) in scans.iter().zip(predictions).zip(poses) {
        b.add_scan(scan, pred, pose)?;
    }
    b.finish(voxel)
}

/// Keeps, per occupied voxel, the point nearest the voxel center; ties go to
/// the smallest provenance.
pub fn voxel_downsample(map: &AggregateMap, resolution: f64) -> Result<AggregateMap> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {resolution}")));
    }
    let mut best: HashMap<[i64; 3], (f64, Provenance, usize)> = HashMap::new();
    for (i, (p, src)) in map.points.iter().zip(&map.sources).enumerate() {
        let c = [p.x, p.y, p.z];
        let key = c.map(|v| (v / resolution).floor() as i64);
        let d2: f64 = (0..3)
            .map(|k| {
                let center = (key[k] as f64 + 0.5) * resolution;
                (c[k] - center).powi(2)
            })
            .sum();
        best.entry(key)
            .and_modify(|e| {
                if (d2, *src) < (e.0, e.1) {
                    *e = (d2, *src, i);
                }
            })
            .or_insert((d2, *src, i));
    }
    let mut keep: Vec<(Provenance, usize)> = best.into_values().map(|(_, s, i)| (s, i)).collect();
    keep.sort_unstable();
    Ok(AggregateMap {
        points: keep.iter().map(|&(_, i)| map.points[i]).collect(),
        sources: keep.iter().map(|&(s, _)| s).collect(),
        voxel: Some(resolution),
        removed: map.removed,
    })
}

fn ply_header(n: usize, binary: bool) -> String {
    format!(
        "ply\nformat {} 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nproperty float remission\nend_header\n",
        if binary { "binary_little_endian" } else { "ascii" }
    )
}

pub fn export_ply(map: &AggregateMap, path: &Path, binary: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(ply_header(map.len(), binary).as_bytes()).map_err(io)?;
    for p in &map.points {
        let v = [p.x as f32, p.y as f32, p.z as f32, p.remission as f32];
        if binary {
            for f in v {
                w.write_all(&f.to_le_bytes()).map_err(io)?;
            }
        } else {
            writeln!(w, "{} {} {} {}", v[0], v[1], v[2], v[3]).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads back a file written by [`export_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<Point>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut count = None;
    let mut binary = None;
    let mut line_no = 0;
    loop {
        line.clear();
        line_no += 1;
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, format!("line {line_no}"), "missing end_header"));
        }
        let t = line.trim_end();
        if t == "end_header" {
            break;
        }
        if let Some(f) = t.strip_prefix("format ") {
            binary = Some(match f {
                "ascii 1.0" => false,
                "binary_little_endian 1.0" => true,
                other => {
                    return Err(Error::format(path, format!("line {line_no}"), format!("unsupported format {other}")))
                }
            });
        } else if let Some(n) = t.strip_prefix("element vertex ") {
            count = Some(n.parse::<usize>().map_err(|_| {
                Error::format(path, format!("line {line_no}"), "bad vertex count")
            })?);
        }
    }
    let (Some(n), Some(binary)) = (count, binary) else {
        return Err(Error::format(path, "header", "missing format or vertex count"));
    };
    let mut pts = Vec::with_capacity(n);
    if binary {
        let mut buf = vec![0u8; n * 16];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format(path, "body", format!("expected {n} vertices")))?;
        for c in buf.chunks_exact(16) {
            let f = |k: usize| f64::from(f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()));
            pts.push(Point { x: f(0), y: f(1), z: f(2), remission: f(3) });
        }
    } else {
        for _ in 0..n {
            line.clear();
            line_no += 1;
            r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f32>().map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("line {line_no}"), "bad vertex"))?;
            if v.len() != 4 {
                return Err(Error::format(path, format!("line {line_no}"), "expected 4 values"));
            }
            pts.push(Point { x: v[0], y: v[1], z: v[2], remission: v[3] });
        }
    }
    Ok(pts)
}
