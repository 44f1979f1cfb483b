//! Scene file schema: one JSON document holding the camera model, the
//! object layout, per-modality point lists with attributes, and ground
//! truth boxes. Images are not stored; the camera view re-renders
//! deterministically from the object list, and the sensor images re-raster
//! from the point lists.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{Box2D, Box3D, CameraModel, PointCloud};
use crate::error::Result;

/// One cuboid in the scene, with per-modality visibility and appearance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    /// Base grey level of the rendered faces, 0..1.
    pub albedo: f64,
    /// A fogged-out object renders at background intensity but still
    /// returns lidar and radar measurements.
    pub camera_visible: bool,
    pub lidar_visible: bool,
    pub radar_visible: bool,
}

impl SceneObject {
    pub fn box3d(&self) -> Box3D {
        Box3D {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            class: self.class,
        }
    }
}

/// A labelled 2D ground-truth box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabeledBox2D {
    pub rect: Box2D,
    pub class: usize,
}

/// One multi-modal sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub camera: CameraModel,
    pub objects: Vec<SceneObject>,
    /// Lidar returns; attributes `[intensity]`.
    pub lidar: PointCloud,
    /// Radar returns; attributes `[rcs, velocity]`.
    pub radar: PointCloud,
    pub boxes_3d: Vec<Box3D>,
    pub boxes_2d: Vec<LabeledBox2D>,
}

impl Scene {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_roundtrips_through_json() {
        let scene = Scene {
            camera: CameraModel::simple(50.0, 50.0, 56.0, 56.0, 112, 112),
            objects: vec![SceneObject {
                class: 1,
                center: [0.0, 0.5, 8.0],
                size: [2.0, 1.5, 2.0],
                yaw: 0.4,
                albedo: 0.8,
                camera_visible: true,
                lidar_visible: true,
                radar_visible: false,
            }],
            lidar: PointCloud::new(vec![[0.1, 0.2, 7.5]], vec![vec![0.9]]).unwrap(),
            radar: PointCloud::default(),
            boxes_3d: vec![],
            boxes_2d: vec![LabeledBox2D {
                rect: Box2D::new(10.0, 12.0, 40.0, 44.0),
                class: 1,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene_0000.json");
        scene.save(&path).unwrap();
        let back = Scene::load(&path).unwrap();
        assert_eq!(back.objects.len(), 1);
        assert_eq!(back.lidar.points, scene.lidar.points);
        assert_eq!(back.boxes_2d[0].class, 1);
        assert_eq!(back.camera.width, 112);
    }
}
