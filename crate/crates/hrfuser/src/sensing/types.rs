use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with rigid sensor→camera extrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Sensor→camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// Sensor→camera translation in meters.
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    /// Camera with identity extrinsics (sensor frame == camera frame).
    pub fn simple(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "camera focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        // rows must be orthonormal within 1e-9
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "camera rotation is not orthonormal (rows {i},{j} dot {dot})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sensor-frame point into the camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Camera-frame point back to the sensor frame.
    pub fn to_sensor(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let q = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        // inverse of an orthonormal rotation is its transpose
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }

    /// Pinhole projection of a camera-frame point; `None` behind the camera.
    pub fn pinhole(&self, p_cam: [f64; 3]) -> Option<(f64, f64, f64)> {
        if p_cam[2] <= 0.0 {
            return None;
        }
        Some((
            self.cx + self.fx * p_cam[0] / p_cam[2],
            self.cy + self.fy * p_cam[1] / p_cam[2],
            p_cam[2],
        ))
    }

    /// Whether a subpixel coordinate lands on the pixel grid.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && (u as usize) < self.width && (v as usize) < self.height
    }
}

/// Points with a fixed-width attribute vector per point (lidar:
/// `[intensity]`, radar: `[rcs, velocity]`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub attributes: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, attributes: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() != attributes.len() {
            return Err(Error::Config(format!(
                "point cloud has {} points but {} attribute rows",
                points.len(),
                attributes.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("point cloud contains non-finite coordinates".into()));
        }
        Ok(PointCloud { points, attributes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Axis-aligned 2D rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Box2D {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn clip(&self, width: f64, height: f64) -> Box2D {
        Box2D {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

/// Oriented 3D box: center and size in meters, yaw about the vertical axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Extents along the box axes (before yaw), all positive.
    pub size: [f64; 3],
    /// Rotation about the frame's vertical (y) axis, radians.
    pub yaw: f64,
    pub class: usize,
}

impl Box3D {
    /// The eight corners in the box's frame, yaw applied.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (sx, sy, sz) = (self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let dx = if i & 1 == 0 { -sx } else { sx };
            let dy = if i & 2 == 0 { -sy } else { sy };
            let dz = if i & 4 == 0 { -sz } else { sz };
            // yaw about y: x-z plane rotation
            corner[0] = self.center[0] + c * dx + s * dz;
            corner[1] = self.center[1] + dy;
            corner[2] = self.center[2] - s * dx + c * dz;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_validation_catches_bad_rotation() {
        let mut cam = CameraModel::simple(100.0, 100.0, 32.0, 32.0, 64, 64);
        cam.validate().unwrap();
        cam.rotation[0][0] = 0.5;
        assert!(cam.validate().is_err());
        let mut cam = CameraModel::simple(0.0, 100.0, 32.0, 32.0, 64, 64);
        cam.rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(cam.validate().is_err());
    }

    #[test]
    fn sensor_camera_roundtrip() {
        let theta: f64 = 0.3;
        let cam = CameraModel {
            rotation: [
                [theta.cos(), 0.0, theta.sin()],
                [0.0, 1.0, 0.0],
                [-theta.sin(), 0.0, theta.cos()],
            ],
            translation: [0.5, -0.2, 1.0],
            ..CameraModel::simple(80.0, 80.0, 32.0, 32.0, 64, 64)
        };
        let p = [1.2, -0.7, 4.0];
        let back = cam.to_sensor(cam.to_camera(p));
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn box_corners_respect_yaw() {
        let b = Box3D {
            center: [0.0, 0.0, 10.0],
            size: [2.0, 2.0, 2.0],
            yaw: std::f64::consts::FRAC_PI_2,
            class: 0,
        };
        let corners = b.corners();
        // with yaw 90°, the x extent comes from the original z extent
        let max_x = corners.iter().map(|c| c[0]).fold(f64::MIN, f64::max);
        assert!((max_x - 1.0).abs() < 1e-12);
        for c in &corners {
            assert!((c[1].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_attribute_rows_rejected() {
        assert!(PointCloud::new(vec![[0.0; 3]], vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN; 3]], vec![vec![]]).is_err());
    }
}
