use super::project::project_points;
use super::types::{CameraModel, PointCloud};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Radar returns are extruded to pillars of this height before projection.
pub const RADAR_PILLAR_HEIGHT_M: f64 = 3.0;

/// One sensor rasterized into the camera image plane: `[C, H, W]` channels
/// plus a per-pixel validity mask. Pixels without a measurement are zero in
/// every channel and unset in the mask.
#[derive(Debug, Clone)]
pub struct ProjectedSensorImage {
    pub data: Tensor,
    pub mask: Vec<bool>,
    pub channel_names: Vec<String>,
}

impl ProjectedSensorImage {
    fn empty(channels: &[&str], height: usize, width: usize) -> Self {
        ProjectedSensorImage {
            data: Tensor::zeros(&[channels.len(), height, width]),
            mask: vec![false; height * width],
            channel_names: channels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn valid_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask and data agree: a pixel is masked iff some channel is nonzero.
    /// (Diagnostic used by tests; zero-valued measurements can only violate
    /// the ⇐ direction, which the rasterizers avoid by writing range > 0.)
    pub fn mask_consistent(&self) -> bool {
        let hw = self.height() * self.width();
        let c = self.channels();
        (0..hw).all(|p| {
            let any = (0..c).any(|ch| self.data.data()[ch * hw + p] != 0.0);
            any == self.mask[p]
        })
    }
}

struct RasterBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    /// Winning sort key per pixel (depth or range); infinity when empty.
    best: Vec<f64>,
}

impl RasterBuffer {
    fn new(channels: usize, height: usize, width: usize) -> Self {
        RasterBuffer {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            best: vec![f64::INFINITY; height * width],
        }
    }

    /// Write `values` at the pixel if `key` beats the current occupant.
    fn write(&mut self, px: usize, py: usize, key: f64, values: &[f64]) {
        debug_assert_eq!(values.len(), self.channels);
        let p = py * self.width + px;
        if key < self.best[p] {
            self.best[p] = key;
            for (ch, &v) in values.iter().enumerate() {
                self.data[ch * self.height * self.width + p] = v;
            }
        }
    }

    fn finish(self, names: &[&str]) -> ProjectedSensorImage {
        let mask = self.best.iter().map(|&b| b.is_finite()).collect();
        ProjectedSensorImage {
            data: Tensor::new(self.data, &[self.channels, self.height, self.width]).unwrap(),
            mask,
            channel_names: names.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Lidar image with channels (range, intensity, height): nearest camera
/// depth wins per pixel. Point attributes are `[intensity]`.
pub fn rasterize_lidar(pc: &PointCloud, cam: &CameraModel) -> Result<ProjectedSensorImage> {
    let names = ["range", "intensity", "height"];
    if pc.is_empty() {
        return Ok(ProjectedSensorImage::empty(&names, cam.height, cam.width));
    }
    let mut buf = RasterBuffer::new(3, cam.height, cam.width);
    for pt in project_points(pc, cam)? {
        let (px, py) = pt.pixel();
        let p = pt.sensor_point;
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let intensity = pt.attributes.first().copied().unwrap_or(0.0);
        let height = -p[1]; // up is −y in the sensor frame
        buf.write(px, py, pt.depth, &[range, intensity, height]);
    }
    Ok(buf.finish(&names))
}

/// Radar image: each return becomes a 3 m pillar rising from the return
/// point; the pillar's pixel column carries (range, rcs, velocity), or
/// (range, velocity) when the sensor publishes no RCS. Nearest range wins
/// on overlap. Point attributes are `[rcs, velocity]`.
pub fn rasterize_radar_pillars(
    pc: &PointCloud,
    cam: &CameraModel,
    with_rcs: bool,
) -> Result<ProjectedSensorImage> {
    cam.validate()?;
    let names: Vec<&str> = if with_rcs {
        vec!["range", "rcs", "velocity"]
    } else {
        vec!["range", "velocity"]
    };
    if pc.is_empty() {
        return Ok(ProjectedSensorImage::empty(&names, cam.height, cam.width));
    }
    let mut buf = RasterBuffer::new(names.len(), cam.height, cam.width);
    for (p, attrs) in pc.points.iter().zip(&pc.attributes) {
        // base-anchored pillar: the return point plus a 3 m rise along −y
        let top = [p[0], p[1] - RADAR_PILLAR_HEIGHT_M, p[2]];
        let base_cam = cam.to_camera(*p);
        let top_cam = cam.to_camera(top);
        let (Some((ub, vb, _)), Some((_, vt, _))) = (cam.pinhole(base_cam), cam.pinhole(top_cam))
        else {
            continue;
        };
        if !(ub >= 0.0 && (ub as usize) < cam.width) {
            continue;
        }
        let px = ub as usize;
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let rcs = attrs.first().copied().unwrap_or(0.0);
        let velocity = attrs.get(1).copied().unwrap_or(0.0);
        let values: Vec<f64> = if with_rcs {
            vec![range, rcs, velocity]
        } else {
            vec![range, velocity]
        };
        let (v_lo, v_hi) = (vt.min(vb), vt.max(vb));
        let y_lo = v_lo.max(0.0) as usize;
        let y_hi = (v_hi.floor() as usize).min(cam.height - 1);
        for py in y_lo..=y_hi {
            buf.write(px, py, range, &values);
        }
    }
    Ok(buf.finish(&names))
}

/// Per-channel normalization statistics gathered over a corpus.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Two-pass mean/std per channel over the valid pixels of every image.
pub fn compute_channel_stats(images: &[&ProjectedSensorImage]) -> Result<ChannelStats> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("channel stats need at least one image".into()))?;
    let c = first.channels();
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for img in images {
        if img.channels() != c {
            return Err(Error::shape("channel_stats", first.data.shape(), img.data.shape()));
        }
        let hw = img.height() * img.width();
        for p in 0..hw {
            if img.mask[p] {
                count += 1;
                for ch in 0..c {
                    sums[ch] += img.data.data()[ch * hw + p];
                }
            }
        }
    }
    if count == 0 {
        return Ok(ChannelStats {
            mean: vec![0.0; c],
            std: vec![0.0; c],
        });
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; c];
    for img in images {
        let hw = img.height() * img.width();
        for p in 0..hw {
            if img.mask[p] {
                for ch in 0..c {
                    let d = img.data.data()[ch * hw + p] - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// `(x - mean) / std` on valid pixels only; masked pixels stay zero. A
/// zero-variance channel is mean-subtracted but not scaled.
pub fn normalize_channels(img: &ProjectedSensorImage, stats: &ChannelStats) -> Result<ProjectedSensorImage> {
    let c = img.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Config(format!(
            "stats cover {} channels, image has {c}",
            stats.mean.len()
        )));
    }
    let hw = img.height() * img.width();
    let mut data = img.data.data().to_vec();
    for ch in 0..c {
        let inv = if stats.std[ch] > 0.0 { 1.0 / stats.std[ch] } else { 1.0 };
        for p in 0..hw {
            if img.mask[p] {
                data[ch * hw + p] = (data[ch * hw + p] - stats.mean[ch]) * inv;
            }
        }
    }
    Ok(ProjectedSensorImage {
        data: Tensor::new(data, img.data.shape())?,
        mask: img.mask.clone(),
        channel_names: img.channel_names.clone(),
    })
}

/// Zero entire secondary modalities with probability `p` each. The primary
/// modality is never passed through here. Returns the per-modality drop
/// decisions.
pub fn sensor_dropout(secondaries: &mut [Tensor], p: f64, rng: &mut CounterRng) -> Vec<bool> {
    assert!((0.0..=1.0).contains(&p), "dropout probability out of range");
    let mut dropped = Vec::with_capacity(secondaries.len());
    for t in secondaries.iter_mut() {
        let drop = rng.chance(p);
        if drop {
            *t = Tensor::zeros(t.shape());
        }
        dropped.push(drop);
    }
    dropped
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::simple(100.0, 100.0, 32.0, 32.0, 64, 64)
    }

    #[test]
    fn nearest_depth_wins_the_pixel() {
        let pc = PointCloud::new(
            vec![[0.0, 0.0, 9.0], [0.0, 0.0, 5.0]],
            vec![vec![0.1], vec![0.9]],
        )
        .unwrap();
        let img = rasterize_lidar(&pc, &cam()).unwrap();
        let hw = 64 * 64;
        let p = 32 * 64 + 32;
        assert_eq!(img.data.data()[p], 5.0); // range of the nearer point
        assert_eq!(img.data.data()[hw + p], 0.9);
        assert_eq!(img.valid_pixels(), 1);
        assert!(img.mask_consistent());
    }

    #[test]
    fn empty_cloud_gives_empty_image() {
        let img = rasterize_lidar(&PointCloud::default(), &cam()).unwrap();
        assert_eq!(img.valid_pixels(), 0);
        assert!(img.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonzero_pixels_equal_distinct_projected_pixels() {
        let mut rng = CounterRng::new(41);
        let points: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(2.0, 30.0)])
            .collect();
        let attrs = vec![vec![1.0]; points.len()];
        let pc = PointCloud::new(points.clone(), attrs).unwrap();
        let img = rasterize_lidar(&pc, &cam()).unwrap();
        let distinct: std::collections::BTreeSet<(usize, usize)> =
            super::super::project::project_points(&pc, &cam())
                .unwrap()
                .iter()
                .map(|p| p.pixel())
                .collect();
        assert_eq!(img.valid_pixels(), distinct.len());
    }

    #[test]
    fn adding_a_farther_point_never_changes_an_occupied_pixel() {
        let near = PointCloud::new(vec![[0.5, 0.5, 4.0]], vec![vec![0.7]]).unwrap();
        let img1 = rasterize_lidar(&near, &cam()).unwrap();
        // the farther point sits on the same ray, so it lands on the same pixel
        let both = PointCloud::new(
            vec![[0.5, 0.5, 4.0], [2.5, 2.5, 20.0]],
            vec![vec![0.7], vec![0.2]],
        )
        .unwrap();
        let img2 = rasterize_lidar(&both, &cam()).unwrap();
        assert_eq!(img1.data.data(), img2.data.data());
    }

    #[test]
    fn pillar_fills_a_column_whose_height_matches_endpoint_projection() {
        let camera = cam();
        for z in [8.0, 10.0, 20.0] {
            let pc = PointCloud::new(vec![[0.0, 1.0, z]], vec![vec![2.0, -1.5]]).unwrap();
            let img = rasterize_radar_pillars(&pc, &camera, true).unwrap();
            // expected span from projecting base and top directly
            let vb = 32.0 + 100.0 * 1.0 / z;
            let vt = 32.0 + 100.0 * (1.0 - RADAR_PILLAR_HEIGHT_M) / z;
            let expect = (vb.floor() - vt.max(0.0).floor()) as usize + 1;
            let col: usize = (0..64).filter(|&y| img.mask[y * 64 + 32]).count();
            assert_eq!(col, expect, "z={z}");
            // height in pixels shrinks with range ≈ fy·3/z
            assert!((col as f64 - 100.0 * RADAR_PILLAR_HEIGHT_M / z).abs() <= 1.5, "z={z} col={col}");
            assert!(img.mask_consistent());
        }
    }

    #[test]
    fn overlapping_pillars_keep_the_nearer_range() {
        let pc = PointCloud::new(
            vec![[0.0, 1.0, 20.0], [0.0, 1.0, 10.0]],
            vec![vec![1.0, 1.0], vec![2.0, -2.0]],
        )
        .unwrap();
        let img = rasterize_radar_pillars(&pc, &cam(), true).unwrap();
        let hw = 64 * 64;
        // the z=10 pillar spans every row the z=20 pillar covers, so all
        // occupied pixels carry the near return's values
        let near_range = (1.0f64 + 100.0).sqrt();
        let mut occupied = 0;
        for y in 0..64 {
            let p = y * 64 + 32;
            if img.mask[p] {
                occupied += 1;
                assert!((img.data.data()[p] - near_range).abs() < 1e-9);
                assert_eq!(img.data.data()[2 * hw + p], -2.0);
            }
        }
        assert!(occupied > 0);
    }

    #[test]
    fn radar_without_rcs_has_two_channels() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 8.0]], vec![vec![3.0, 1.0]]).unwrap();
        let img = rasterize_radar_pillars(&pc, &cam(), false).unwrap();
        assert_eq!(img.channels(), 2);
        assert_eq!(img.channel_names, vec!["range", "velocity"]);
    }

    #[test]
    fn constant_channel_normalizes_to_zero_and_twice_is_standard() {
        let pc = PointCloud::new(
            vec![[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [0.5, 0.3, 7.0]],
            vec![vec![0.5], vec![0.5], vec![0.5]],
        )
        .unwrap();
        let img = rasterize_lidar(&pc, &cam()).unwrap();
        let stats = compute_channel_stats(&[&img]).unwrap();
        let normed = normalize_channels(&img, &stats).unwrap();
        // intensity channel was constant 0.5 → zero after normalization...
        // which makes its variance 0, so a second pass passes it through
        let hw = 64 * 64;
        for p in 0..hw {
            if normed.mask[p] {
                assert!(normed.data.data()[hw + p].abs() < 1e-12);
            } else {
                for ch in 0..3 {
                    assert_eq!(normed.data.data()[ch * hw + p], 0.0);
                }
            }
        }
        // re-computed stats on the normalized image are (0, 1) for the
        // varying channels
        let stats2 = compute_channel_stats(&[&normed]).unwrap();
        assert!(stats2.mean[0].abs() < 1e-9);
        assert!((stats2.std[0] - 1.0).abs() < 1e-9);
        assert!(stats2.mean[2].abs() < 1e-9);
        assert!((stats2.std[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stats_match_a_direct_two_pass_oracle() {
        let mut rng = CounterRng::new(42);
        let mut images = Vec::new();
        for _ in 0..3 {
            let points: Vec<[f64; 3]> = (0..60)
                .map(|_| [rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(2.0, 30.0)])
                .collect();
            let attrs: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.range(0.0, 1.0)]).collect();
            images.push(rasterize_lidar(&PointCloud::new(points, attrs).unwrap(), &cam()).unwrap());
        }
        let refs: Vec<&ProjectedSensorImage> = images.iter().collect();
        let stats = compute_channel_stats(&refs).unwrap();
        // direct oracle over channel 0
        let mut vals = Vec::new();
        for img in &images {
            let hw = img.height() * img.width();
            for p in 0..hw {
                if img.mask[p] {
                    vals.push(img.data.data()[p]);
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[0] - mean).abs() < 1e-9);
        assert!((stats.std[0] - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn dropout_boundaries_and_empirical_rate() {
        let mut rng = CounterRng::new(43);
        let shape = [1usize, 2, 4, 4];
        let mk = || vec![Tensor::full(&shape, 1.0), Tensor::full(&shape, 2.0)];

        let mut zero = mk();
        let d0 = sensor_dropout(&mut zero, 0.0, &mut rng);
        assert!(d0.iter().all(|&d| !d));
        assert!(zero[0].data().iter().all(|&v| v == 1.0));

        let mut one = mk();
        let d1 = sensor_dropout(&mut one, 1.0, &mut rng);
        assert!(d1.iter().all(|&d| d));
        assert!(one.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(one[0].shape(), &shape);

        let mut hits = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let mut batch = vec![Tensor::full(&[1, 1, 1, 1], 1.0)];
            if sensor_dropout(&mut batch, 0.2, &mut rng)[0] {
                hits += 1;
            }
        }
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.2).abs() < 0.02, "rate {rate}");
    }
}
