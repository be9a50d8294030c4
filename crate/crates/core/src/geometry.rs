//! Rigid-body transforms, pose chains and scan transformation.
//!
//! Poses are stored as row-major 4x4 homogeneous matrices in double
//! precision. A relative pose `T^{j-1}_j` maps points expressed in frame `j`
//! into frame `j - 1`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::MovingLabel;

/// Tolerance for the orthonormality and determinant checks on a rotation block.
pub const POSE_TOLERANCE: f64 = 1e-6;

/// One unit of pose noise: 0.1 m in x, 0.1 m in y, 1 degree in yaw.
pub const NOISE_UNIT_TRANSLATION: f64 = 0.1;
pub const NOISE_UNIT_YAW_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub remission: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64, remission: f64) -> Self {
        Self { x, y, z, remission }
    }

    #[inline]
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.remission.is_finite()
    }
}

/// Rigid transform with an orthonormal, right-handed rotation block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    /// Validates `m` against the pose invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        check_pose(&m, POSE_TOLERANCE)?;
        Ok(Pose(m))
    }

    /// Builds a pose from a 3x4 row-major block `[R | t]`, re-orthonormalizing
    /// the rotation when it deviates from SO(3) by at most `tolerance`.
    ///
    /// Text pose files carry only a handful of significant digits, so their
    /// rotation blocks are orthonormal to roughly 1e-6 and need projecting
    /// back onto SO(3).
    pub fn from_row_major_3x4(values: &[f64; 12], tolerance: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite entries".into()));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = values[r * 4 + c];
            }
        }
        check_pose(&m, tolerance)?;
        let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
        let svd = rot.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let projected = u * vt;
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&projected);
        Pose::from_matrix(m)
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(Rotation3::identity(), Vector3::new(x, y, z))
    }

    /// Rotation about +z by `angle` radians.
    pub fn yaw(angle: f64) -> Self {
        Self::from_parts(
            Rotation3::from_axis_angle(&Vector3::z_axis(), angle),
            Vector3::zeros(),
        )
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Closed-form rigid inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_vector());
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose(m)
    }

    #[inline]
    pub fn transform_point(&self, p: &Point) -> Point {
        let m = &self.0;
        Point {
            x: m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            y: m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            z: m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
            remission: p.remission,
        }
    }

    /// Largest absolute deviation from the pose invariants.
    pub fn invariant_error(&self) -> f64 {
        pose_error(&self.0)
    }

    /// Row-major `[R | t]` block, as written in KITTI pose files.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &'a Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }
}

fn pose_error(m: &Matrix4<f64>) -> f64 {
    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (rot.transpose() * rot - Matrix3::identity()).abs().max();
    let det = (rot.determinant() - 1.0).abs();
    let bottom = (m.row(3) - Vector4::new(0.0, 0.0, 0.0, 1.0).transpose())
        .abs()
        .max();
    ortho.max(det).max(bottom)
}

fn check_pose(m: &Matrix4<f64>, tolerance: f64) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("pose contains non-finite entries".into()));
    }
    if m.row(3) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
        return Err(Error::Validation(format!(
            "pose bottom row must be (0, 0, 0, 1), got {:?}",
            m.row(3)
        )));
    }
    let err = pose_error(m);
    if err >= tolerance {
        return Err(Error::Validation(format!(
            "rotation block is not orthonormal with det +1 (deviation {err:.3e})"
        )));
    }
    Ok(())
}

/// One LiDAR revolution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub points: Vec<Point>,
    pub labels: Option<Vec<MovingLabel>>,
    pub frame: usize,
}

impl Scan {
    pub fn new(points: Vec<Point>, frame: usize) -> Self {
        Self {
            points,
            labels: None,
            frame,
        }
    }

    pub fn with_labels(mut self, labels: Vec<MovingLabel>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Validation(format!(
                "frame {}: {} labels for {} points",
                self.frame,
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the first non-finite point, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.points.iter().position(|p| !p.is_finite())
    }
}

/// Composes the chain `T^l_k = T^l_{l+1} * ... * T^{k-1}_k`.
///
/// `relative[j - 1]` holds `T^{j-1}_j`, so frames are numbered
/// `0..=relative.len()`.
pub fn compose_relative(relative: &[Pose], k: usize, l: usize) -> Result<Pose> {
    if l > k {
        return Err(Error::Range(format!("target frame {l} is after source frame {k}")));
    }
    if k > relative.len() {
        return Err(Error::Range(format!(
            "frame {k} is beyond the chain of {} relative poses",
            relative.len()
        )));
    }
    Ok(relative[l..k]
        .iter()
        .fold(Pose::identity(), |acc, step| acc * *step))
}

/// Maps every point by `pose`; remission and labels carry over unchanged.
pub fn transform_scan(scan: &Scan, pose: &Pose) -> Scan {
    Scan {
        points: scan.points.iter().map(|p| pose.transform_point(p)).collect(),
        labels: scan.labels.clone(),
        frame: scan.frame,
    }
}

/// Conjugates a camera-frame pose into the LiDAR frame: `Tr^-1 * pose * Tr`,
/// where `tr` maps LiDAR coordinates into the camera frame.
pub fn camera_to_lidar_frame(pose_cam: &Pose, tr: &Pose) -> Pose {
    tr.inverse() * *pose_cam * *tr
}

/// Inverse of [`camera_to_lidar_frame`].
pub fn lidar_to_camera_frame(pose_lidar: &Pose, tr: &Pose) -> Pose {
    *tr * *pose_lidar * tr.inverse()
}

/// Adds bounded uniform noise in x, y and yaw.
///
/// Each component is drawn from `[-units * unit, +units * unit]` with the
/// units (0.1 m, 0.1 m, 1 deg). The yaw perturbation is applied on the left
/// of the rotation block; the translation offset is added in the parent frame.
pub fn perturb_pose(pose: &Pose, units: u32, seed: u64) -> Pose {
    if units == 0 {
        return *pose;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = f64::from(units) * NOISE_UNIT_TRANSLATION;
    let yaw_max = (f64::from(units) * NOISE_UNIT_YAW_DEG).to_radians();
    let dx = rng.gen_range(-t_max..=t_max);
    let dy = rng.gen_range(-t_max..=t_max);
    let dyaw = rng.gen_range(-yaw_max..=yaw_max);

    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), dyaw);
    let mut m = *pose.matrix();
    let r = rot.matrix() * pose.rotation();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m[(0, 3)] += dx;
    m[(1, 3)] += dy;
    Pose(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rigid(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Pose {
        Pose::from_parts(
            Rotation3::from_euler_angles(rx, ry, rz),
            Vector3::new(tx, ty, tz),
        )
    }

    fn max_abs_diff(a: &Pose, b: &Pose) -> f64 {
        (a.matrix() - b.matrix()).abs().max()
    }

    #[test]
    fn identity_chain_composes_to_identity() {
        let chain = vec![Pose::identity(); 5];
        assert_eq!(compose_relative(&chain, 5, 0).unwrap(), Pose::identity());
    }

    #[test]
    fn translations_accumulate() {
        let chain = vec![Pose::translation(1.0, 0.0, 0.0); 2];
        let t = compose_relative(&chain, 2, 0).unwrap();
        assert!(max_abs_diff(&t, &Pose::translation(2.0, 0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn yaw_then_translation_matches_matrix_product() {
        let chain = vec![Pose::yaw(FRAC_PI_2), Pose::translation(1.0, 0.0, 0.0)];
        let expected = chain[0].matrix() * chain[1].matrix();
        let got = compose_relative(&chain, 2, 0).unwrap();
        assert!((got.matrix() - expected).abs().max() < 1e-12);
        // The translation step is expressed in the rotated frame.
        let t = got.translation_vector();
        assert!((t - Vector3::new(0.0, 1.0, 0.0)).abs().max() < 1e-12);
    }

    #[test]
    fn compose_same_frame_is_identity() {
        let chain = vec![rigid(0.1, 0.2, 0.3, 1.0, 2.0, 3.0); 3];
        assert_eq!(compose_relative(&chain, 2, 2).unwrap(), Pose::identity());
    }

    #[test]
    fn compose_out_of_bounds() {
        let chain = vec![Pose::identity(); 2];
        assert!(matches!(compose_relative(&chain, 3, 0), Err(Error::Range(_))));
        assert!(matches!(compose_relative(&chain, 1, 2), Err(Error::Range(_))));
    }

    #[test]
    fn transform_scan_identity_is_bitwise() {
        let scan = Scan::new(
            vec![Point::new(1.5, -2.25, 0.125, 0.5), Point::new(0.1, 0.2, 0.3, 0.0)],
            3,
        );
        assert_eq!(transform_scan(&scan, &Pose::identity()), scan);
    }

    #[test]
    fn transform_scan_translation() {
        let scan = Scan::new(vec![Point::new(1.0, 0.0, 0.0, 0.7)], 0)
            .with_labels(vec![MovingLabel::Moving])
            .unwrap();
        let out = transform_scan(&scan, &Pose::translation(0.0, 0.0, 5.0));
        assert_eq!(out.points[0], Point::new(1.0, 0.0, 5.0, 0.7));
        assert_eq!(out.labels, scan.labels);
    }

    #[test]
    fn transform_scan_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = rigid(0.3, -0.7, 2.1, 4.0, -1.0, 0.5);
        let points: Vec<Point> = (0..100)
            .map(|_| {
                Point::new(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let scan = Scan::new(points, 0);
        let out = transform_scan(&scan, &pose);
        for (p, q) in scan.points.iter().zip(&out.points) {
            let h = pose.matrix() * Vector4::new(p.x, p.y, p.z, 1.0);
            assert!((h.x - q.x).abs() < 1e-9);
            assert!((h.y - q.y).abs() < 1e-9);
            assert!((h.z - q.z).abs() < 1e-9);
            assert_eq!(p.remission, q.remission);
        }
    }

    #[test]
    fn camera_conjugation() {
        let tr = Pose::yaw(FRAC_PI_2);
        assert_eq!(camera_to_lidar_frame(&Pose::identity(), &tr), Pose::identity());
        let pose = rigid(0.2, 0.1, -0.4, 3.0, 1.0, -2.0);
        assert!(max_abs_diff(&camera_to_lidar_frame(&pose, &Pose::identity()), &pose) < 1e-15);

        let oracle = tr.matrix().try_inverse().unwrap() * pose.matrix() * tr.matrix();
        let got = camera_to_lidar_frame(&pose, &tr);
        assert!((got.matrix() - oracle).abs().max() < 1e-9);
        let back = lidar_to_camera_frame(&got, &tr);
        assert!(max_abs_diff(&back, &pose) < 1e-12);
    }

    #[test]
    fn invalid_matrix_rejected() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(matches!(Pose::from_matrix(m), Err(Error::Validation(_))));
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.5;
        assert!(Pose::from_matrix(m).is_err());
        // Reflection: orthonormal but det = -1.
        let mut m = Matrix4::identity();
        m[(2, 2)] = -1.0;
        assert!(Pose::from_matrix(m).is_err());
    }

    #[test]
    fn low_precision_rotation_is_projected() {
        let pose = rigid(0.01, -0.02, 1.3, 10.0, 2.0, 0.3);
        let mut rows = pose.to_row_major_3x4();
        for v in rows.iter_mut() {
            *v = format!("{v:.6e}").parse().unwrap();
        }
        let p = Pose::from_row_major_3x4(&rows, 1e-3).unwrap();
        assert!(p.invariant_error() < 1e-12);
        assert!(max_abs_diff(&p, &pose) < 1e-5);
    }

    #[test]
    fn perturb_zero_units_is_identity_op() {
        let pose = rigid(0.1, 0.2, 0.3, 1.0, 2.0, 3.0);
        assert_eq!(perturb_pose(&pose, 0, 99), pose);
    }

    #[test]
    fn perturb_is_bounded_and_deterministic() {
        let pose = rigid(0.0, 0.0, 0.4, 1.0, 2.0, 3.0);
        for seed in 0..50 {
            let p = perturb_pose(&pose, 20, seed);
            let d = p.translation_vector() - pose.translation_vector();
            assert!(d.xy().norm() <= 20.0 * 0.1 * 2f64.sqrt() + 1e-12);
            assert_eq!(d.z, 0.0);
            assert!(p.invariant_error() < 1e-9);
        }
        assert_eq!(perturb_pose(&pose, 1, 42), perturb_pose(&pose, 1, 42));
        assert_ne!(perturb_pose(&pose, 1, 42), perturb_pose(&pose, 1, 43));
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            -3.2..3.2f64,
            -1.5..1.5f64,
            -3.2..3.2f64,
            -20.0..20.0f64,
            -20.0..20.0f64,
            -5.0..5.0f64,
        )
            .prop_map(|(a, b, c, x, y, z)| rigid(a, b, c, x, y, z))
    }

    proptest! {
        #[test]
        fn chain_composition_is_associative(
            chain in prop::collection::vec(arb_pose(), 1..8),
            picks in (0usize..8, 0usize..8, 0usize..8),
        ) {
            let n = chain.len();
            let mut idx = [picks.0 % (n + 1), picks.1 % (n + 1), picks.2 % (n + 1)];
            idx.sort_unstable();
            let (m, l, k) = (idx[0], idx[1], idx[2]);
            let lhs = compose_relative(&chain, l, m).unwrap() * compose_relative(&chain, k, l).unwrap();
            let rhs = compose_relative(&chain, k, m).unwrap();
            prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-9);
        }

        #[test]
        fn transform_round_trip(pose in arb_pose(), coords in prop::collection::vec((-80.0..80.0f64, -80.0..80.0f64, -10.0..10.0f64), 1..50)) {
            let scan = Scan::new(coords.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.3)).collect(), 0);
            let back = transform_scan(&transform_scan(&scan, &pose), &pose.inverse());
            for (a, b) in scan.points.iter().zip(&back.points) {
                prop_assert!((a.x - b.x).abs() < 1e-9);
                prop_assert!((a.y - b.y).abs() < 1e-9);
                prop_assert!((a.z - b.z).abs() < 1e-9);
            }
        }

        #[test]
        fn product_stays_rigid(a in arb_pose(), b in arb_pose()) {
            prop_assert!((a * b).invariant_error() < 1e-6);
            prop_assert!(Pose::from_matrix(*(a * b).matrix()).is_ok());
        }
    }
}
