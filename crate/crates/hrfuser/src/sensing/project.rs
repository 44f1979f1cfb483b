use super::types::{Box2D, Box3D, CameraModel, PointCloud};
use crate::error::Result;

/// One sensor point landed on the image plane.
#[derive(Debug, Clone)]
pub struct ProjectedPoint {
    /// Subpixel image coordinates.
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth Z.
    pub depth: f64,
    /// The point in its original sensor frame (range/height channels read it).
    pub sensor_point: [f64; 3],
    pub attributes: Vec<f64>,
}

impl ProjectedPoint {
    pub fn pixel(&self) -> (usize, usize) {
        // subpixel coordinates floor to their pixel
        (self.u as usize, self.v as usize)
    }
}

/// Transform every point into the camera frame and pinhole-project it;
/// points behind the camera or off the image are discarded.
pub fn project_points(pc: &PointCloud, cam: &CameraModel) -> Result<Vec<ProjectedPoint>> {
    cam.validate()?;
    let mut out = Vec::new();
    for (p, attrs) in pc.points.iter().zip(&pc.attributes) {
        let p_cam = cam.to_camera(*p);
        if let Some((u, v, depth)) = cam.pinhole(p_cam) {
            if cam.contains(u, v) {
                out.push(ProjectedPoint {
                    u,
                    v,
                    depth,
                    sensor_point: *p,
                    attributes: attrs.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Invert the pinhole projection back to a sensor-frame point.
pub fn unproject(u: f64, v: f64, depth: f64, cam: &CameraModel) -> [f64; 3] {
    let x = (u - cam.cx) * depth / cam.fx;
    let y = (v - cam.cy) * depth / cam.fy;
    cam.to_sensor([x, y, depth])
}

/// Rectangle convex hull of the projected box corners: corners in front of
/// the camera are projected, the axis-aligned hull is clipped to the image,
/// and degenerate results are dropped.
pub fn project_box3d_to_2d(b: &Box3D, cam: &CameraModel) -> Option<Box2D> {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut visible = 0;
    for corner in b.corners() {
        let p_cam = cam.to_camera(corner);
        if let Some((u, v, _)) = cam.pinhole(p_cam) {
            visible += 1;
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
    }
    if visible < 2 {
        return None;
    }
    let rect = Box2D::new(lo.0, lo.1, hi.0, hi.1).clip(cam.width as f64, cam.height as f64);
    (rect.is_valid() && rect.area() > 0.0).then_some(rect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn cam() -> CameraModel {
        CameraModel::simple(100.0, 100.0, 320.0, 180.0, 640, 360)
    }

    #[test]
    fn optical_axis_hits_the_principal_point() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 5.0]], vec![vec![1.0]]).unwrap();
        let pts = project_points(&pc, &cam()).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!((pts[0].u, pts[0].v), (320.0, 180.0));
        assert_eq!(pts[0].depth, 5.0);
    }

    #[test]
    fn forced_projection_example() {
        // fx=100, cx=320, cy=180, point (1,2,10) → (330, 200)
        let pc = PointCloud::new(vec![[1.0, 2.0, 10.0]], vec![vec![0.0]]).unwrap();
        let pts = project_points(&pc, &cam()).unwrap();
        assert_eq!((pts[0].u, pts[0].v), (330.0, 200.0));
    }

    #[test]
    fn behind_camera_and_off_image_points_are_dropped() {
        let pc = PointCloud::new(
            vec![[0.0, 0.0, -5.0], [0.0, 0.0, 0.0], [500.0, 0.0, 1.0], [0.0, 0.0, 2.0]],
            vec![vec![]; 4],
        )
        .unwrap();
        let pts = project_points(&pc, &cam()).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn unproject_project_roundtrip() {
        let theta: f64 = -0.2;
        let cam = CameraModel {
            rotation: [
                [theta.cos(), 0.0, theta.sin()],
                [0.0, 1.0, 0.0],
                [-theta.sin(), 0.0, theta.cos()],
            ],
            translation: [0.1, 0.3, -0.5],
            ..cam()
        };
        let mut rng = CounterRng::new(31);
        for _ in 0..50 {
            let u = rng.range(0.0, 639.0);
            let v = rng.range(0.0, 359.0);
            let depth = rng.range(0.5, 40.0);
            let p = unproject(u, v, depth, &cam);
            let pc = PointCloud::new(vec![p], vec![vec![]]).unwrap();
            let pts = project_points(&pc, &cam).unwrap();
            assert_eq!(pts.len(), 1);
            assert!((pts[0].u - u).abs() < 1e-9);
            assert!((pts[0].v - v).abs() < 1e-9);
            assert!((pts[0].depth - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn axis_aligned_cube_projects_symmetrically() {
        let b = Box3D {
            center: [0.0, 0.0, 10.0],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class: 0,
        };
        let rect = project_box3d_to_2d(&b, &cam()).unwrap();
        assert!((rect.x_min + rect.x_max - 2.0 * 320.0).abs() < 1e-9);
        assert!((rect.y_min + rect.y_max - 2.0 * 180.0).abs() < 1e-9);
    }

    #[test]
    fn box_behind_camera_is_none() {
        let b = Box3D {
            center: [0.0, 0.0, -10.0],
            size: [1.0, 1.0, 1.0],
            yaw: 0.3,
            class: 0,
        };
        assert!(project_box3d_to_2d(&b, &cam()).is_none());
    }

    #[test]
    fn hull_matches_per_corner_oracle_and_ignores_corner_order() {
        let mut rng = CounterRng::new(32);
        let camera = cam();
        for _ in 0..100 {
            let b = Box3D {
                center: [rng.range(-8.0, 8.0), rng.range(-4.0, 4.0), rng.range(3.0, 30.0)],
                size: [rng.range(0.5, 4.0), rng.range(0.5, 4.0), rng.range(0.5, 4.0)],
                yaw: rng.range(-3.1, 3.1),
                class: 0,
            };
            let got = project_box3d_to_2d(&b, &camera);
            // oracle: loop over corners individually
            let mut us = Vec::new();
            let mut vs = Vec::new();
            for c in b.corners() {
                if let Some((u, v, _)) = camera.pinhole(camera.to_camera(c)) {
                    us.push(u);
                    vs.push(v);
                }
            }
            if us.len() < 2 {
                assert!(got.is_none());
                continue;
            }
            let lo_u = us.iter().cloned().fold(f64::INFINITY, f64::min).clamp(0.0, 640.0);
            let hi_u = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max).clamp(0.0, 640.0);
            let lo_v = vs.iter().cloned().fold(f64::INFINITY, f64::min).clamp(0.0, 360.0);
            let hi_v = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).clamp(0.0, 360.0);
            if lo_u >= hi_u || lo_v >= hi_v {
                assert!(got.is_none());
                continue;
            }
            let rect = got.expect("oracle says visible");
            assert!((rect.x_min - lo_u).abs() < 1e-9);
            assert!((rect.x_max - hi_u).abs() < 1e-9);
            assert!((rect.y_min - lo_v).abs() < 1e-9);
            assert!((rect.y_max - hi_v).abs() < 1e-9);
        }
    }
}
