//! Spherical projection of point clouds onto range images and the exact
//! bookkeeping needed to project per-pixel predictions back to 3D points.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::kitti_io::PointCloud;

/// Channel order of the projected tensor.
pub const CHANNELS: usize = 5;
pub const CH_X: usize = 0;
pub const CH_Y: usize = 1;
pub const CH_Z: usize = 2;
pub const CH_REM: usize = 3;
pub const CH_RANGE: usize = 4;

/// Sensor image geometry. Vertical field of view is `fov_up + fov_down`,
/// both stored in radians with `fov_down` the positive magnitude below the
/// horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorGeometry {
    pub width: usize,
    pub height: usize,
    pub fov_up: f64,
    pub fov_down: f64,
}

impl SensorGeometry {
    pub fn new(width: usize, height: usize, fov_up: f64, fov_down: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image dimensions must be >= 1".into()));
        }
        if fov_up + fov_down <= 0.0 {
            return Err(Error::Shape("vertical field of view must be positive".into()));
        }
        Ok(SensorGeometry {
            width,
            height,
            fov_up,
            fov_down,
        })
    }

    pub fn from_degrees(width: usize, height: usize, fov_up_deg: f64, fov_down_deg: f64) -> Result<Self> {
        SensorGeometry::new(
            width,
            height,
            fov_up_deg.to_radians(),
            fov_down_deg.to_radians(),
        )
    }

    /// Total vertical field of view in radians.
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }
}

/// HDL-64-style default: 64 x 2048 pixels, +3 deg above / 25 deg below horizon.
impl Default for SensorGeometry {
    fn default() -> Self {
        SensorGeometry::from_degrees(2048, 64, 3.0, 25.0).unwrap()
    }
}

/// What to keep when two points land on the same pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollisionRule {
    /// Keep the point with the smaller range (visible surface wins).
    #[default]
    NearestWins,
    /// Keep the first point in scan order.
    FirstWins,
}

/// Where a 3D point landed on the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointProjection {
    pub u: usize,
    pub v: usize,
    pub range: f32,
}

/// Projected scan: `(H, W, 5)` channel tensor `(x, y, z, rem, r)`, validity
/// mask, and bidirectional pixel/point index maps. Immutable once built.
#[derive(Debug, Clone)]
pub struct RangeImage {
    pub geometry: SensorGeometry,
    pub data: Array3<f32>,
    pub valid: Array2<bool>,
    pub pixel_to_point: Array2<Option<usize>>,
    pub point_to_pixel: Vec<Option<PointProjection>>,
    /// Count of zero-range points that could not be projected.
    pub skipped_points: usize,
}

/// Column coordinate before flooring and clamping; strictly decreasing in
/// azimuth.
fn azimuth_to_column(yaw: f64, width: usize) -> f64 {
    0.5 * (1.0 - yaw / std::f64::consts::PI) * width as f64
}

fn pitch_to_row(pitch: f64, geom: &SensorGeometry) -> f64 {
    (1.0 - (pitch + geom.fov_up) / geom.fov()) * geom.height as f64
}

fn clamp_floor(raw: f64, upper: usize) -> usize {
    let idx = raw.floor();
    if idx < 0.0 {
        0
    } else if idx as usize >= upper {
        upper - 1
    } else {
        idx as usize
    }
}

/// Project a single point to pixel coordinates and range.
///
/// `u = floor(1/2 [1 - atan2(y, x) / pi] W)` and
/// `v = floor([1 - (asin(z / r) + fov_up) / fov] H)`, both clamped to the
/// image bounds so that out-of-FOV points still receive a pixel.
pub fn project_point(x: f64, y: f64, z: f64, geom: &SensorGeometry) -> Result<(usize, usize, f64)> {
    let r = (x * x + y * y + z * z).sqrt();
    if r <= 0.0 {
        return Err(Error::DegeneratePoint);
    }
    let yaw = y.atan2(x);
    let pitch = (z / r).clamp(-1.0, 1.0).asin();
    let u = clamp_floor(azimuth_to_column(yaw, geom.width), geom.width);
    let v = clamp_floor(pitch_to_row(pitch, geom), geom.height);
    Ok((u, v, r))
}

/// Project a whole cloud. Zero-range points are skipped (counted, never
/// fatal); pixel collisions are resolved by `rule`.
pub fn build_range_image_with_rule(
    cloud: &PointCloud,
    geom: &SensorGeometry,
    rule: CollisionRule,
) -> RangeImage {
    let (h, w) = (geom.height, geom.width);
    let mut data = Array3::<f32>::zeros((h, w, CHANNELS));
    let mut valid = Array2::<bool>::from_elem((h, w), false);
    let mut pixel_to_point = Array2::<Option<usize>>::from_elem((h, w), None);
    let mut point_to_pixel = Vec::with_capacity(cloud.len());
    let mut skipped = 0usize;

    for (i, p) in cloud.points.iter().enumerate() {
        let (u, v, r) = match project_point(p.x as f64, p.y as f64, p.z as f64, geom) {
            Ok(t) => t,
            Err(_) => {
                skipped += 1;
                point_to_pixel.push(None);
                continue;
            }
        };
        let r = r as f32;
        point_to_pixel.push(Some(PointProjection { u, v, range: r }));

        let replace = match pixel_to_point[(v, u)] {
            None => true,
            Some(_) => match rule {
                CollisionRule::FirstWins => false,
                CollisionRule::NearestWins => r < data[(v, u, CH_RANGE)],
            },
        };
        if replace {
            pixel_to_point[(v, u)] = Some(i);
            valid[(v, u)] = true;
            data[(v, u, CH_X)] = p.x;
            data[(v, u, CH_Y)] = p.y;
            data[(v, u, CH_Z)] = p.z;
            data[(v, u, CH_REM)] = p.rem;
            data[(v, u, CH_RANGE)] = r;
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} zero-range points during projection");
    }

    RangeImage {
        geometry: *geom,
        data,
        valid,
        pixel_to_point,
        point_to_pixel,
        skipped_points: skipped,
    }
}

pub fn build_range_image(cloud: &PointCloud, geom: &SensorGeometry) -> RangeImage {
    build_range_image_with_rule(cloud, geom, CollisionRule::NearestWins)
}

/// Pull per-pixel class labels back to the points through `point_to_pixel`.
/// Unprojectable (zero-range) points receive label 0.
pub fn unproject_labels(labels: ArrayView2<u16>, img: &RangeImage) -> Result<Vec<u16>> {
    let (h, w) = labels.dim();
    if h != img.geometry.height || w != img.geometry.width {
        return Err(Error::Shape(format!(
            "label map {h}x{w} does not match geometry {}x{}",
            img.geometry.height, img.geometry.width
        )));
    }
    Ok(img
        .point_to_pixel
        .iter()
        .map(|proj| proj.map_or(0, |p| labels[(p.v, p.u)]))
        .collect())
}
