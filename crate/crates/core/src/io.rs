//! KITTI odometry / SemanticKITTI file formats.
//!
//! Layout of a dataset root:
//!
//! ```text
//! <root>/sequences/<seq>/velodyne/%06d.bin   f32 x4 per point, little endian
//! <root>/sequences/<seq>/labels/%06d.label   u32 per point, little endian
//! <root>/sequences/<seq>/poses.txt           12 floats per line, camera frame
//! <root>/sequences/<seq>/calib.txt           `Tr:` row maps LiDAR -> camera
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{camera_to_lidar_frame, lidar_to_camera_frame, Point, Pose, Scan};
use crate::label::MovingLabel;

const POINT_BYTES: usize = 16;

/// Tolerance for rotation blocks parsed from text files before projection onto SO(3).
const TEXT_POSE_TOLERANCE: f64 = 1e-3;

/// The class map shipped with the crate.
pub const DEFAULT_CLASS_MAP: &str = include_str!("../config/class_map.txt");

/// Mapping from raw semantic ids to [`MovingLabel`] plus the codes written
/// into prediction files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub version: u32,
    pub default: MovingLabel,
    pub overrides: HashMap<u16, MovingLabel>,
    pub moving_code: u32,
    pub static_code: u32,
}

impl Default for ClassMap {
    fn default() -> Self {
        ClassMap::parse(DEFAULT_CLASS_MAP, Path::new("<builtin class map>"))
            .expect("builtin class map is valid")
    }
}

fn parse_label_name(s: &str) -> Option<MovingLabel> {
    match s {
        "moving" => Some(MovingLabel::Moving),
        "static" => Some(MovingLabel::Static),
        "ignore" => Some(MovingLabel::Ignore),
        _ => None,
    }
}

impl ClassMap {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut version = None;
        let mut default = None;
        let mut overrides = HashMap::new();
        let mut moving_code = None;
        let mut static_code = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(origin, format!("line {}", lineno + 1), msg);
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected `key = value`"))?;
            match key {
                "version" => version = Some(value.parse().map_err(|_| bad("bad version"))?),
                "default" => {
                    default = Some(parse_label_name(value).ok_or_else(|| bad("unknown class"))?)
                }
                "emit.moving" => moving_code = Some(value.parse().map_err(|_| bad("bad code"))?),
                "emit.static" => static_code = Some(value.parse().map_err(|_| bad("bad code"))?),
                id => {
                    let id: u16 = id.parse().map_err(|_| bad("unknown key"))?;
                    let label = parse_label_name(value).ok_or_else(|| bad("unknown class"))?;
                    overrides.insert(id, label);
                }
            }
        }

        let missing = |what: &str| Error::format(origin, "end of file", format!("missing `{what}`"));
        let map = ClassMap {
            version: version.ok_or_else(|| missing("version"))?,
            default: default.ok_or_else(|| missing("default"))?,
            overrides,
            moving_code: moving_code.ok_or_else(|| missing("emit.moving"))?,
            static_code: static_code.ok_or_else(|| missing("emit.static"))?,
        };
        if map.classify(map.moving_code) != MovingLabel::Moving
            || map.classify(map.static_code) != MovingLabel::Static
        {
            return Err(Error::format(
                origin,
                "emit codes",
                "emitted codes must read back as moving / static",
            ));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Classifies a raw label word; the upper 16 bits (instance id) are ignored.
    pub fn classify(&self, raw: u32) -> MovingLabel {
        let semantic = (raw & 0xFFFF) as u16;
        self.overrides.get(&semantic).copied().unwrap_or(self.default)
    }

    /// Code written for `label`. Ignore is written as static: the writer only
    /// ever emits the two benchmark classes.
    pub fn code(&self, label: MovingLabel) -> u32 {
        match label {
            MovingLabel::Moving => self.moving_code,
            MovingLabel::Static | MovingLabel::Ignore => self.static_code,
        }
    }
}

pub fn read_scan_bin(path: &Path, frame: usize) -> Result<Scan> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let scan = decode_scan(&bytes, path, frame)?;
    if let Some(i) = scan.first_non_finite() {
        return Err(Error::Validation(format!(
            "{}: point {i} has a non-finite coordinate",
            path.display()
        )));
    }
    Ok(scan)
}

fn decode_scan(bytes: &[u8], path: &Path, frame: usize) -> Result<Scan> {
    if bytes.len() % POINT_BYTES != 0 {
        let offset = bytes.len() - bytes.len() % POINT_BYTES;
        return Err(Error::format(
            path,
            format!("byte offset {offset}"),
            format!(
                "truncated point record ({} bytes, not a multiple of {POINT_BYTES})",
                bytes.len()
            ),
        ));
    }
    let points = bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| {
            let f = |i: usize| f64::from(f32::from_le_bytes(c[i..i + 4].try_into().unwrap()));
            Point::new(f(0), f(4), f(8), f(12))
        })
        .collect();
    Ok(Scan::new(points, frame))
}

/// Writes points as little-endian f32 quadruples.
pub fn write_scan_bin(path: &Path, scan: &Scan) -> Result<()> {
    let mut buf = Vec::with_capacity(scan.len() * POINT_BYTES);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.remission] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &buf)
}

pub fn read_raw_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            path,
            format!("byte offset {}", bytes.len() - bytes.len() % 4),
            "label file size is not a multiple of 4",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads a `.label` file holding exactly `point_count` entries.
pub fn read_semantic_labels(
    path: &Path,
    point_count: usize,
    class_map: &ClassMap,
) -> Result<Vec<MovingLabel>> {
    let raw = read_raw_labels(path)?;
    if raw.len() != point_count {
        return Err(Error::format(
            path,
            "file size",
            format!(
                "{} bytes for {point_count} points (expected {})",
                raw.len() * 4,
                point_count * 4
            ),
        ));
    }
    Ok(raw.into_iter().map(|r| class_map.classify(r)).collect())
}

pub fn write_prediction_labels(
    path: &Path,
    labels: &[MovingLabel],
    class_map: &ClassMap,
) -> Result<()> {
    let mut buf = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        buf.extend_from_slice(&class_map.code(l).to_le_bytes());
    }
    write_file(path, &buf)
}

/// Writes raw semantic ids (ground truth) verbatim.
pub fn write_raw_labels(path: &Path, raw: &[u32]) -> Result<()> {
    let buf: Vec<u8> = raw.iter().flat_map(|r| r.to_le_bytes()).collect();
    write_file(path, &buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_twelve(fields: &[&str], path: &Path, location: &str) -> Result<[f64; 12]> {
    if fields.len() != 12 {
        return Err(Error::format(
            path,
            location,
            format!("expected 12 values, found {}", fields.len()),
        ));
    }
    let mut out = [0.0; 12];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::format(path, location, format!("`{f}` is not a finite number")))?;
    }
    Ok(out)
}

/// Reads the `Tr:` row (LiDAR -> camera) from a KITTI `calib.txt`.
pub fn read_calibration(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let values = parse_twelve(&fields, path, &format!("line {}", i + 1))?;
            return Pose::from_row_major_3x4(&values, TEXT_POSE_TOLERANCE).map_err(|e| {
                Error::Calibration {
                    path: path.into(),
                    message: e.to_string(),
                }
            });
        }
    }
    Err(Error::Calibration {
        path: path.into(),
        message: "no `Tr:` row".into(),
    })
}

/// Reads camera-frame poses and the calibration, returning absolute LiDAR-frame poses.
pub fn read_poses(poses_path: &Path, calib_path: &Path) -> Result<Vec<Pose>> {
    let tr = read_calibration(calib_path)?;
    let text = fs::read_to_string(poses_path).map_err(|e| Error::io(poses_path, e))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        let values = parse_twelve(&fields, poses_path, &location)?;
        let cam = Pose::from_row_major_3x4(&values, TEXT_POSE_TOLERANCE)
            .map_err(|e| Error::format(poses_path, &location, e.to_string()))?;
        poses.push(camera_to_lidar_frame(&cam, &tr));
    }
    Ok(poses)
}

fn format_row(values: &[f64; 12]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:.12e}").unwrap();
    }
    s
}

pub fn write_calibration(path: &Path, tr: &Pose) -> Result<()> {
    let text = format!("Tr: {}\n", format_row(&tr.to_row_major_3x4()));
    write_file(path, text.as_bytes())
}

/// Writes LiDAR-frame poses in the camera-frame KITTI convention.
pub fn write_poses(path: &Path, lidar_poses: &[Pose], tr: &Pose) -> Result<()> {
    let mut text = String::new();
    for p in lidar_poses {
        let cam = lidar_to_camera_frame(p, tr);
        text.push_str(&format_row(&cam.to_row_major_3x4()));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn sequence_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sequences").join(id)
}

pub fn scan_path(seq_dir: &Path, frame: usize) -> PathBuf {
    seq_dir.join("velodyne").join(format!("{frame:06}.bin"))
}

pub fn label_path(seq_dir: &Path, frame: usize) -> PathBuf {
    seq_dir.join("labels").join(format!("{frame:06}.label"))
}

pub fn prediction_path(out_root: &Path, id: &str, frame: usize) -> PathBuf {
    sequence_dir(out_root, id)
        .join("predictions")
        .join(format!("{frame:06}.label"))
}

/// Handle on one on-disk sequence. Scans and labels are read lazily.
#[derive(Debug, Clone)]
pub struct DatasetSequence {
    pub id: String,
    pub dir: PathBuf,
    pub scan_files: Vec<PathBuf>,
    /// Absolute poses in the LiDAR frame.
    pub poses: Vec<Pose>,
    pub calibration: Pose,
    pub label_files: Option<Vec<PathBuf>>,
    pub class_map: ClassMap,
}

impl DatasetSequence {
    pub fn open(root: &Path, id: &str) -> Result<Self> {
        Self::open_with_class_map(root, id, ClassMap::default())
    }

    pub fn open_with_class_map(root: &Path, id: &str, class_map: ClassMap) -> Result<Self> {
        let dir = sequence_dir(root, id);
        let velodyne = dir.join("velodyne");
        let mut scan_files: Vec<PathBuf> = fs::read_dir(&velodyne)
            .map_err(|e| Error::io(&velodyne, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        scan_files.sort();
        for (i, f) in scan_files.iter().enumerate() {
            if *f != scan_path(&dir, i) {
                return Err(Error::format(f, "file name", format!("expected frame {i:06}")));
            }
            let len = fs::metadata(f).map_err(|e| Error::io(f, e))?.len();
            if len % POINT_BYTES as u64 != 0 {
                return Err(Error::format(
                    f,
                    format!("byte offset {}", len - len % POINT_BYTES as u64),
                    "size is not a multiple of 16 bytes",
                ));
            }
        }

        let calibration = read_calibration(&dir.join("calib.txt"))?;
        let poses = read_poses(&dir.join("poses.txt"), &dir.join("calib.txt"))?;
        if poses.len() != scan_files.len() {
            return Err(Error::Validation(format!(
                "sequence {id}: {} poses for {} scans",
                poses.len(),
                scan_files.len()
            )));
        }

        let label_files: Vec<PathBuf> = (0..scan_files.len()).map(|i| label_path(&dir, i)).collect();
        let label_files = if !label_files.is_empty() && label_files.iter().all(|p| p.is_file()) {
            Some(label_files)
        } else {
            None
        };

        Ok(DatasetSequence {
            id: id.to_string(),
            dir,
            scan_files,
            poses,
            calibration,
            label_files,
            class_map,
        })
    }

    pub fn len(&self) -> usize {
        self.scan_files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scan_files.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.label_files.is_some()
    }

    pub fn read_scan(&self, frame: usize) -> Result<Scan> {
        let path = self
            .scan_files
            .get(frame)
            .ok_or_else(|| Error::Range(format!("sequence {} has no frame {frame}", self.id)))?;
        read_scan_bin(path, frame)
    }

    /// Reads a scan together with its ground-truth labels when present.
    pub fn read_labeled_scan(&self, frame: usize) -> Result<Scan> {
        let scan = self.read_scan(frame)?;
        match &self.label_files {
            Some(files) => {
                let labels = read_semantic_labels(&files[frame], scan.len(), &self.class_map)?;
                scan.with_labels(labels)
            }
            None => Ok(scan),
        }
    }
}

/// An in-memory sequence, as produced by the simulator.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub id: String,
    pub scans: Vec<Scan>,
    /// Absolute poses in the LiDAR frame.
    pub poses: Vec<Pose>,
    pub calibration: Pose,
}

/// Raw ids written for simulated ground truth.
pub const SIM_STATIC_ID: u32 = 40;
pub const SIM_MOVING_ID: u32 = 252;

impl SequenceData {
    /// Writes scans, ground-truth labels, poses and calibration under `root`.
    pub fn write(&self, root: &Path) -> Result<DatasetSequence> {
        let dir = sequence_dir(root, &self.id);
        for (i, scan) in self.scans.iter().enumerate() {
            write_scan_bin(&scan_path(&dir, i), scan)?;
            if let Some(labels) = &scan.labels {
                let raw: Vec<u32> = labels
                    .iter()
                    .map(|l| match l {
                        MovingLabel::Moving => SIM_MOVING_ID,
                        MovingLabel::Static => SIM_STATIC_ID,
                        MovingLabel::Ignore => 0,
                    })
                    .collect();
                write_raw_labels(&label_path(&dir, i), &raw)?;
            }
        }
        write_calibration(&dir.join("calib.txt"), &self.calibration)?;
        write_poses(&dir.join("poses.txt"), &self.poses, &self.calibration)?;
        DatasetSequence::open(root, &self.id)
    }
}
