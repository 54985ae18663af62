use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with a right-handed look-at frame: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub principal_point: [f64; 2],
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_FOCAL: f64 = 36.0;
/// Novel cameras must stay at least this far above the table plane (degrees).
const MIN_ELEVATION_DEG: f64 = 10.0;
const VIEW_SAMPLE_ATTEMPTS: usize = 10_000;

impl CameraPose {
    /// Camera on the workspace-centered sphere looking at the origin with the
    /// default intrinsics.
    pub fn orbit(position: [f64; 3], up: [f64; 3]) -> Self {
        let half = DEFAULT_IMAGE_SIZE as f64 / 2.0;
        Self {
            position,
            look_at: [0.0; 3],
            up,
            focal: DEFAULT_FOCAL,
            principal_point: [half, half],
            image_size: [DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE],
        }
    }

    pub fn width(&self) -> usize {
        self.image_size[0]
    }

    pub fn height(&self) -> usize {
        self.image_size[1]
    }

    /// Rows are the camera's right, down and forward axes in world coordinates.
    pub fn basis(&self) -> Result<[[f64; 3]; 3]> {
        if !(self.focal > 0.0) || self.image_size.iter().any(|&d| d == 0) {
            return Err(Error::Camera(format!(
                "focal {} / image size {:?} invalid",
                self.focal, self.image_size
            )));
        }
        let fwd = v3(&self.look_at) - v3(&self.position);
        if fwd.norm() < 1e-12 {
            return Err(Error::Camera("position coincides with look_at".into()));
        }
        let fwd = fwd.normalize();
        let right = fwd.cross(&v3(&self.up));
        if right.norm() < 1e-9 {
            return Err(Error::Camera("up vector parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        Ok([arr(&right), arr(&down), arr(&fwd)])
    }

    pub fn validate(&self) -> Result<()> {
        self.basis().map(|_| ())
    }

    /// Unit vector from the look-at point toward the camera.
    pub fn view_direction(&self) -> [f64; 3] {
        arr(&(v3(&self.position) - v3(&self.look_at)).normalize())
    }

    /// Rigidly rotates the camera (position and up) about its look-at point.
    pub fn rotated(&self, rot: &Rotation3<f64>) -> Self {
        let c = v3(&self.look_at);
        Self {
            position: arr(&(c + rot * (v3(&self.position) - c))),
            up: arr(&(rot * v3(&self.up))),
            ..self.clone()
        }
    }
}

/// Projects a world point to continuous image coordinates `(u, v, depth)`
/// where depth is the camera-frame z; callers cull `depth <= 0`.
pub fn project_point(cam: &CameraPose, p: &[f64; 3]) -> Result<(f64, f64, f64)> {
    let b = cam.basis()?;
    let d = [
        p[0] - cam.position[0],
        p[1] - cam.position[1],
        p[2] - cam.position[2],
    ];
    let dot = |r: &[f64; 3]| r[0] * d[0] + r[1] * d[1] + r[2] * d[2];
    let (xc, yc, zc) = (dot(&b[0]), dot(&b[1]), dot(&b[2]));
    Ok((
        cam.focal * xc / zc + cam.principal_point[0],
        cam.focal * yc / zc + cam.principal_point[1],
        zc,
    ))
}

/// Great-circle angle between two cameras' view directions, in degrees.
pub fn angle_between_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    let (da, db) = (v3(&a.view_direction()), v3(&b.view_direction()));
    da.dot(&db).clamp(-1.0, 1.0).acos().to_degrees()
}

/// The two training cameras: top-down and an oblique side view.
pub fn seen_cameras() -> [CameraPose; 2] {
    let elev = 30f64.to_radians();
    [
        CameraPose::orbit([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
        CameraPose::orbit([0.0, -elev.cos(), elev.sin()], [0.0, 0.0, 1.0]),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewCategory {
    Seen,
    NovelSmall,
    NovelMedium,
    NovelLarge,
}

impl ViewCategory {
    pub const ALL: [ViewCategory; 4] = [Self::Seen, Self::NovelSmall, Self::NovelMedium, Self::NovelLarge];

    /// Angular offset band from the nearest seen camera, in degrees.
    pub fn band_deg(self) -> Option<(f64, f64)> {
        match self {
            Self::Seen => None,
            Self::NovelSmall => Some((10.0, 20.0)),
            Self::NovelMedium => Some((25.0, 40.0)),
            Self::NovelLarge => Some((45.0, 60.0)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seen => "seen",
            Self::NovelSmall => "novel_small",
            Self::NovelMedium => "novel_medium",
            Self::NovelLarge => "novel_large",
        }
    }

    /// Column label in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Seen => "Original",
            Self::NovelSmall => "Small",
            Self::NovelMedium => "Medium",
            Self::NovelLarge => "Large",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|&c| c == self).expect("listed") as u64
    }
}

impl fmt::Display for ViewCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "seen" => Ok(Self::Seen),
            "novel_small" => Ok(Self::NovelSmall),
            "novel_medium" => Ok(Self::NovelMedium),
            "novel_large" => Ok(Self::NovelLarge),
            _ => Err(Error::Config(format!("unknown viewpoint category {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSet {
    pub category: ViewCategory,
    pub cameras: Vec<CameraPose>,
}

/// Draws cameras for `category`. Seen returns the two training cameras.
/// Novel camera `i` is the seen camera `i mod 2` rotated about the workspace
/// center by an angle drawn uniformly from the category band, in a uniformly
/// random tangent direction; draws that end closer to the other seen camera
/// or below the minimum elevation are redrawn.
pub fn sample_viewpoints(category: ViewCategory, count: usize, seed: u64) -> Result<ViewpointSet> {
    let seen = seen_cameras();
    let Some((lo, hi)) = category.band_deg() else {
        return Ok(ViewpointSet {
            category,
            cameras: seen.to_vec(),
        });
    };
    let mut rng = crate::seed::rng(seed, "viewpoints", &[category.index()]);
    let mut cameras = Vec::with_capacity(count);
    for i in 0..count {
        let source = &seen[i % seen.len()];
        let dir = v3(&source.view_direction());
        let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = dir.cross(&helper).normalize();
        let e2 = dir.cross(&e1);
        let mut found = None;
        for _ in 0..VIEW_SAMPLE_ATTEMPTS {
            let delta: f64 = rng.gen_range(lo..=hi);
            let psi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let axis = Unit::new_normalize(e1 * psi.cos() + e2 * psi.sin());
            let cam = source.rotated(&Rotation3::from_axis_angle(&axis, delta.to_radians()));
            let elevation = cam.view_direction()[2].asin().to_degrees();
            let to_source = angle_between_deg(&cam, source);
            let nearest_is_source = seen
                .iter()
                .all(|s| std::ptr::eq(s, source) || angle_between_deg(&cam, s) > to_source);
            if elevation >= MIN_ELEVATION_DEG && nearest_is_source && cam.validate().is_ok() {
                found = Some(cam);
                break;
            }
        }
        cameras.push(found.ok_or_else(|| {
            Error::Generation(format!("could not place a {category} camera after {VIEW_SAMPLE_ATTEMPTS} draws"))
        })?);
    }
    Ok(ViewpointSet { category, cameras })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_seen_angle(cam: &CameraPose) -> f64 {
        seen_cameras()
            .iter()
            .map(|s| angle_between_deg(cam, s))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn seen_set_is_two_fixed_cameras() {
        let s = sample_viewpoints(ViewCategory::Seen, 7, 1).unwrap();
        assert_eq!(s.cameras.len(), 2);
        assert_eq!(s.cameras, seen_cameras().to_vec());
        for c in &s.cameras {
            c.validate().unwrap();
            let r: f64 = c.position.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn novel_offsets_stay_inside_their_band() {
        for cat in [ViewCategory::NovelSmall, ViewCategory::NovelMedium, ViewCategory::NovelLarge] {
            let (lo, hi) = cat.band_deg().unwrap();
            let set = sample_viewpoints(cat, 50, 42).unwrap();
            assert_eq!(set.cameras.len(), 50);
            for c in &set.cameras {
                let a = nearest_seen_angle(c);
                assert!(a >= lo - 1e-9 && a <= hi + 1e-9, "{cat}: {a}");
                let r: f64 = c.position.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((r - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_viewpoints(ViewCategory::NovelMedium, 4, 9).unwrap();
        assert_eq!(a, sample_viewpoints(ViewCategory::NovelMedium, 4, 9).unwrap());
        assert_ne!(a, sample_viewpoints(ViewCategory::NovelMedium, 4, 10).unwrap());
    }

    #[test]
    fn degenerate_cameras_are_rejected() {
        let mut c = seen_cameras()[0].clone();
        c.up = [0.0, 0.0, 1.0];
        assert!(matches!(c.validate(), Err(Error::Camera(_))));
        let mut d = seen_cameras()[1].clone();
        d.look_at = d.position;
        assert!(d.validate().is_err());
        let mut e = seen_cameras()[1].clone();
        e.focal = 0.0;
        assert!(e.validate().is_err());
    }

    #[test]
    fn category_names_parse() {
        for c in ViewCategory::ALL {
            assert_eq!(c.as_str().parse::<ViewCategory>().unwrap(), c);
        }
        assert_eq!("novel-large".parse::<ViewCategory>().unwrap(), ViewCategory::NovelLarge);
        assert!("sideways".parse::<ViewCategory>().is_err());
    }

    #[test]
    fn optical_axis_projects_to_principal_point_and_focal_scales_offsets() {
        let cam = seen_cameras()[1].clone();
        let (u, v, z) = project_point(&cam, &[0.0, 0.0, 0.0]).unwrap();
        assert!((u - 16.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12);
        assert!((z - 1.0).abs() < 1e-12);
        let p = [0.1, 0.05, 0.02];
        let (u1, v1, _) = project_point(&cam, &p).unwrap();
        let mut cam2 = cam.clone();
        cam2.focal *= 2.0;
        let (u2, v2, _) = project_point(&cam2, &p).unwrap();
        assert!(((u2 - 16.0) - 2.0 * (u1 - 16.0)).abs() < 1e-12);
        assert!(((v2 - 16.0) - 2.0 * (v1 - 16.0)).abs() < 1e-12);
    }
}
