use super::camera::{project_point, CameraPose};
use super::scene::SceneState;
use crate::error::Result;

const BACKGROUND: [f32; 3] = [0.35, 0.3, 0.25];
const EE_OPEN: [f32; 3] = [0.08, 0.08, 0.08];
const EE_CLOSED: [f32; 3] = [0.6, 0.1, 0.6];
pub(crate) const OBJECT_RADIUS: f64 = 0.025;
pub(crate) const EE_RADIUS: f64 = 0.02;
const NEAR: f64 = 1e-6;

/// RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

struct Disc {
    depth: f64,
    u: f64,
    v: f64,
    radius_px: f64,
    color: [f32; 3],
}

/// Splats goal regions, objects and the end effector as depth-sorted filled
/// discs whose pixel radius shrinks with depth.
pub fn render_image(scene: &SceneState, cam: &CameraPose) -> Result<Image> {
    cam.validate()?;
    let mut discs = Vec::new();
    let mut add = |p: &[f64; 3], radius: f64, color: [f32; 3]| -> Result<()> {
        let (u, v, depth) = project_point(cam, p)?;
        if depth > NEAR {
            discs.push(Disc {
                depth,
                u,
                v,
                radius_px: cam.focal * radius / depth,
                color,
            });
        }
        Ok(())
    };
    for r in &scene.goal_regions {
        add(&r.center, r.radius, r.kind.rgb())?;
    }
    for o in &scene.objects {
        add(&o.pos, OBJECT_RADIUS, o.color.rgb())?;
    }
    let ee_color = if scene.gripper < 0.0 { EE_CLOSED } else { EE_OPEN };
    add(&scene.ee_pos, EE_RADIUS, ee_color)?;
    // far first; stable sort keeps regions < objects < ee on ties
    discs.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let (w, h) = (cam.width(), cam.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        data.extend_from_slice(&BACKGROUND);
    }
    for d in &discs {
        let r2 = d.radius_px * d.radius_px;
        let x0 = (d.u - d.radius_px).floor().max(0.0) as usize;
        let y0 = (d.v - d.radius_px).floor().max(0.0) as usize;
        let x1 = ((d.u + d.radius_px).ceil().max(0.0) as usize).min(w);
        let y1 = ((d.v + d.radius_px).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - d.u, y as f64 + 0.5 - d.v);
                if dx * dx + dy * dy <= r2 {
                    data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&d.color);
                }
            }
        }
    }
    Ok(Image {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use sha2::{Digest, Sha256};

    use super::*;
    use crate::deskworld::{make_tasks, reset, seen_cameras, ObjectColor};

    #[test]
    fn object_on_optical_axis_is_centered_on_principal_point() {
        let mut s = reset(&make_tasks()[0], 1).unwrap();
        // move everything else out of the way
        for (i, o) in s.objects.iter_mut().enumerate() {
            o.pos = [0.4, 0.4 - 0.1 * i as f64, 0.0];
        }
        for r in s.goal_regions.iter_mut() {
            r.center = [-0.4, -0.4, 0.0];
        }
        s.ee_pos = [0.4, -0.4, 0.3];
        s.objects[0].pos = [0.0, 0.0, 0.0];
        let cam = &seen_cameras()[0];
        let img = render_image(&s, cam).unwrap();
        let red = ObjectColor::Red.rgb();
        // pixels around (16, 16) symmetric about the principal point
        for (x, y) in [(15, 15), (16, 15), (15, 16), (16, 16)] {
            assert_eq!(img.pixel(x, y), red);
        }
        let lit: Vec<(usize, usize)> = (0..32)
            .flat_map(|y| (0..32).map(move |x| (x, y)))
            .filter(|&(x, y)| img.pixel(x, y) == red)
            .collect();
        let cx = lit.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / lit.len() as f64;
        let cy = lit.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / lit.len() as f64;
        assert!((cx - 16.0).abs() < 1e-9 && (cy - 16.0).abs() < 1e-9);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let s = reset(&make_tasks()[2], 4).unwrap();
        for cam in seen_cameras() {
            let img = render_image(&s, &cam).unwrap();
            assert_eq!(img.data.len(), 32 * 32 * 3);
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn points_behind_the_camera_are_culled() {
        let mut s = reset(&make_tasks()[0], 1).unwrap();
        let cam = &seen_cameras()[0];
        let before = render_image(&s, cam).unwrap();
        s.ee_pos = [0.0, 0.0, 1.5];
        let after = render_image(&s, cam).unwrap();
        let ee_pixels = after.data.chunks(3).filter(|p| *p == EE_OPEN).count();
        assert_eq!(ee_pixels, 0);
        assert_ne!(before, after);
    }

    #[test]
    fn golden_image_hash_is_stable() {
        let s = reset(&make_tasks()[3], 2024).unwrap();
        let img = render_image(&s, &seen_cameras()[1]).unwrap();
        let digest = hex::encode(Sha256::digest(img.to_bytes()));
        assert_eq!(digest, GOLDEN);
    }

    const GOLDEN: &str = "45ab1734731832f153f67417cdb9c9b10f1e5327a98cff5376cac4209d276a06";
}
