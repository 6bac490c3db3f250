//! Pinhole cameras, projections and rays.
//!
//! Camera frame: x right, y down, z forward. Pixel `(row, col)` has its
//! centre at `(col + 0.5, row + 0.5)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Points closer than this to the image plane cannot be projected.
pub const EPS_Z: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rigid transform.
    pub extrinsics: Matrix4<f64>,
    pub intrinsics: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

impl CameraPose {
    pub fn new(
        extrinsics: Matrix4<f64>,
        intrinsics: Matrix3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let pose = CameraPose {
            extrinsics,
            intrinsics,
            width,
            height,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Simple pinhole with square pixels and a centred principal point.
    pub fn pinhole(focal: f64, width: usize, height: usize) -> Matrix3<f64> {
        Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Matrix3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let fwd = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("eye coincides with target".into()))?;
        let right = fwd
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("up is parallel to the view direction".into()))?;
        // y points down in the camera frame
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        CameraPose::new(e, intrinsics, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(Error::InvalidPose(format!("rotation is not orthonormal (error {err:e})")));
        }
        if (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose("rotation determinant is not +1".into()));
        }
        let bottom = self.extrinsics.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(Error::InvalidPose("extrinsics bottom row must be 0 0 0 1".into()));
        }
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidPose("focal lengths must be positive".into()));
        }
        if !(k[(0, 2)].is_finite() && k[(1, 2)].is_finite()) || self.extrinsics.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidPose("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates and depth of `p`, or `None` when `p` lies within
    /// [`EPS_Z`] of the camera plane or behind it.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let c = self.to_camera(p);
        if c.z <= EPS_Z {
            return None;
        }
        let h = self.intrinsics * c;
        Some((Vector2::new(h.x / h.z, h.y / h.z), c.z))
    }

    /// Azimuth in `[-π, π)` and elevation in `[-π/2, π/2]` of `p` seen from
    /// the camera. `None` only at the camera centre.
    pub fn equirect_project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c.norm() == 0.0 {
            return None;
        }
        let mut az = c.x.atan2(c.z);
        if az >= PI {
            az -= 2.0 * PI;
        }
        let el = (-c.y).atan2((c.x * c.x + c.z * c.z).sqrt());
        Some((az, el))
    }

    pub fn ray_for_pixel(&self, row: usize, col: usize) -> Result<Ray> {
        if row >= self.height || col >= self.width {
            return Err(Error::arg(
                "ray_for_pixel",
                format!("pixel ({row}, {col}) outside {}x{}", self.width, self.height),
            ));
        }
        let pix = Vector3::new(col as f64 + 0.5, row as f64 + 0.5, 1.0);
        let kinv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::InvalidPose("singular intrinsics".into()))?;
        let dir_cam = kinv * pix;
        let direction = (self.rotation().transpose() * dir_cam).normalize();
        Ok(Ray {
            origin: self.center(),
            direction,
            view: 0,
            row,
            col,
        })
    }

    /// Same camera at a different resolution, intrinsics scaled to match.
    pub fn resized(&self, width: usize, height: usize) -> CameraPose {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.intrinsics;
        for j in 0..3 {
            k[(0, j)] *= sx;
            k[(1, j)] *= sy;
        }
        CameraPose {
            extrinsics: self.extrinsics,
            intrinsics: k,
            width,
            height,
        }
    }
}

/// Inverse of a rigid 4x4 transform.
pub fn rigid_inverse(e: &Matrix4<f64>) -> Matrix4<f64> {
    let r = e.fixed_view::<3, 3>(0, 0).transpose();
    let t = -(r * e.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    out
}

/// Re-expresses every pose in the camera frame of `poses[reference]`.
pub fn relative_poses(poses: &[CameraPose], reference: usize) -> Result<Vec<CameraPose>> {
    if poses.is_empty() {
        return Err(Error::arg("relative_poses", "empty pose list"));
    }
    if reference >= poses.len() {
        return Err(Error::arg(
            "relative_poses",
            format!("reference {reference} out of range for {} poses", poses.len()),
        ));
    }
    let inv = rigid_inverse(&poses[reference].extrinsics);
    Ok(poses
        .iter()
        .enumerate()
        .map(|(i, p)| CameraPose {
            extrinsics: if i == reference {
                Matrix4::identity()
            } else {
                p.extrinsics * inv
            },
            intrinsics: p.intrinsics,
            width: p.width,
            height: p.height,
        })
        .collect())
}

/// 16 extrinsic entries then 9 intrinsic entries, row-major. Intrinsic row 0
/// is divided by the width and row 1 by the height.
pub fn pose_flatten(pose: &CameraPose) -> [f64; 25] {
    let mut out = [0.0; 25];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = pose.extrinsics[(r, c)];
        }
    }
    let scale = [pose.width as f64, pose.height as f64, 1.0];
    for r in 0..3 {
        for c in 0..3 {
            out[16 + r * 3 + c] = pose.intrinsics[(r, c)] / scale[r];
        }
    }
    out
}

/// Inverse of [`pose_flatten`] for a given image size.
pub fn pose_unflatten(v: &[f64; 25], width: usize, height: usize) -> CameraPose {
    let scale = [width as f64, height as f64, 1.0];
    CameraPose {
        extrinsics: Matrix4::from_fn(|r, c| v[r * 4 + c]),
        intrinsics: Matrix3::from_fn(|r, c| v[16 + r * 3 + c] * scale[r]),
        width,
        height,
    }
}

/// Text form: four rows of extrinsics, three rows of intrinsics, `W H`.
pub fn format_pose(pose: &CameraPose) -> String {
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", pose.extrinsics[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:?}", pose.intrinsics[(r, c)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(s, "{} {}", pose.width, pose.height);
    s
}

/// Parses [`format_pose`] output; `path` is only used in error messages.
pub fn parse_pose(text: &str, path: &Path) -> Result<CameraPose> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    if lines.len() != 8 {
        let line = lines.last().map_or(1, |l| l.0);
        return Err(Error::parse(path, line, format!("expected 8 non-empty lines, found {}", lines.len())));
    }
    let floats = |(ln, l): (usize, &str), n: usize| -> Result<Vec<f64>> {
        let v = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, ln, format!("bad number {t:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != n {
            return Err(Error::parse(path, ln, format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    };
    let mut e = Matrix4::zeros();
    for r in 0..4 {
        let v = floats(lines[r], 4)?;
        for c in 0..4 {
            e[(r, c)] = v[c];
        }
    }
    let mut k = Matrix3::zeros();
    for r in 0..3 {
        let v = floats(lines[4 + r], 3)?;
        for c in 0..3 {
            k[(r, c)] = v[c];
        }
    }
    let (ln, l) = lines[7];
    let wh: Vec<usize> = l
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::parse(path, ln, format!("bad size {t:?}"))))
        .collect::<Result<_>>()?;
    if wh.len() != 2 {
        return Err(Error::parse(path, ln, "expected `W H`"));
    }
    CameraPose::new(e, k, wh[0], wh[1]).map_err(|e| Error::parse(path, ln, e.to_string()))
}

pub fn read_pose(path: &Path) -> Result<CameraPose> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose(&text, path)
}

pub fn write_pose(path: &Path, pose: &CameraPose) -> Result<()> {
    std::fs::write(path, format_pose(pose)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(f: f64) -> CameraPose {
        CameraPose::new(Matrix4::identity(), CameraPose::pinhole(f, 64, 64), 64, 64).unwrap()
    }

    #[test]
    fn projection_examples() {
        let c = cam(50.0);
        let (uv, d) = c.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((uv.x, uv.y, d), (32.0, 32.0, 2.0));
        let (uv, d) = c.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((uv.x, uv.y, d), (57.0, 32.0, 2.0));
        assert!(c.project(&Vector3::zeros()).is_none());
        assert!(c.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn equirect_examples() {
        let c = cam(50.0);
        assert_eq!(c.equirect_project(&Vector3::new(0.0, 0.0, 1.0)), Some((0.0, 0.0)));
        let (az, el) = c.equirect_project(&Vector3::new(0.0, -1.0, 0.0)).unwrap();
        assert_eq!((az, el), (0.0, PI / 2.0));
        let (az, el) = c.equirect_project(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert!((az - PI / 4.0).abs() < 1e-15 && el == 0.0);
        assert!(c.equirect_project(&Vector3::zeros()).is_none());
        // directly behind maps into the half-open range
        let (az, _) = c.equirect_project(&Vector3::new(-0.0, 0.0, -1.0)).unwrap();
        assert!((-PI..PI).contains(&az));
    }

    #[test]
    fn principal_ray_and_translated_origin() {
        let c = cam(50.0);
        let r = c.ray_for_pixel(31, 31).unwrap();
        assert!(r.direction.z > 0.999);
        let k = CameraPose::pinhole(50.0, 64, 64);
        let mut e = Matrix4::identity();
        e[(0, 3)] = 1.0;
        e[(1, 3)] = 2.0;
        e[(2, 3)] = 3.0;
        let t = CameraPose::new(e, k, 64, 64).unwrap();
        let r = t.ray_for_pixel(0, 0).unwrap();
        assert_eq!(r.origin, Vector3::new(-1.0, -2.0, -3.0));
        assert!(t.ray_for_pixel(64, 0).is_err());
    }

    #[test]
    fn flatten_normalises_intrinsics() {
        let c = cam(64.0);
        let f = pose_flatten(&c);
        assert_eq!(&f[..16], Matrix4::<f64>::identity().transpose().as_slice());
        assert_eq!(f[16], 1.0);
        assert_eq!(pose_unflatten(&f, 64, 64), c);
    }

    #[test]
    fn pose_text_round_trip() {
        let c = CameraPose::look_at(
            Vector3::new(0.3, -1.0, 2.5),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            CameraPose::pinhole(40.0, 32, 24),
            32,
            24,
        )
        .unwrap();
        let back = parse_pose(&format_pose(&c), Path::new("p.txt")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn pose_parse_reports_line() {
        let text = "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n1 0 0\n0 x 0\n0 0 1\n4 4\n";
        match parse_pose(text, Path::new("p.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
    }
}
