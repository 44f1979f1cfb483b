//! Sensor projection and rasterization.
//!
//! All sensor frames use camera-style axes: x right, y down, z forward, so
//! "up" is −y and a sensor's height channel is −y in its own frame.
//! Secondary modalities are projected onto the camera image plane with a
//! pinhole model, rasterized into channel images with validity masks,
//! normalized with corpus statistics, and 3D labels are reduced to
//! axis-aligned 2D rectangles.

mod project;
mod raster;
pub mod scene;
mod types;

pub use project::{project_box3d_to_2d, project_points, unproject, ProjectedPoint};
pub use raster::{
    compute_channel_stats, normalize_channels, rasterize_lidar, rasterize_radar_pillars,
    sensor_dropout, ChannelStats, ProjectedSensorImage, RADAR_PILLAR_HEIGHT_M,
};
pub use types::{Box2D, Box3D, CameraModel, PointCloud};
