use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deskworld::{project_point, CameraPose, SceneState};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Width of a keypoint token before lifting: 3 shared coordinate slots, a
/// visibility flag and an 8-way attribute one-hot.
pub const RAW_WIDTH: usize = 12;
const VIS_SLOT: usize = 3;
const ATTR_SLOT: usize = 4;
const ATTR_EE: usize = 0;
const ATTR_COLOR: usize = 1; // + ObjectColor::index()
const ATTR_REGION: usize = 5; // + RegionKind::index()
const ATTR_FIDUCIAL: usize = 7;
const MIN_DEPTH: f64 = 1e-3;
const FIDUCIALS: [[f64; 3]; 4] = [
    [-0.4, -0.4, 0.0],
    [0.4, -0.4, 0.0],
    [0.4, 0.4, 0.0],
    [-0.4, 0.4, 0.0],
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoStubConfig {
    /// Number of layers M.
    pub layers: usize,
    /// Token width D_feat.
    pub width: usize,
    /// Tokens per layer N_l; unused slots are zero.
    pub keypoints: usize,
    pub lift_seed: u64,
}

impl Default for GeoStubConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            width: 32,
            keypoints: 16,
            lift_seed: 7,
        }
    }
}

impl GeoStubConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=64).contains(&self.layers) {
            return Err(Error::Config(format!("geo layers must be in 2..=64, got {}", self.layers)));
        }
        if self.width == 0 || self.keypoints == 0 {
            return Err(Error::Config("geo width and keypoints must be positive".into()));
        }
        Ok(())
    }

    /// Blend weight of the world-frame part at 1-based layer `l`.
    pub fn alpha(&self, l: usize) -> f64 {
        (l - 1) as f64 / (self.layers - 1) as f64
    }
}

/// Per-layer tokens for one camera, each layer channels-first `[D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub view_index: usize,
    pub width: usize,
    pub keypoints: usize,
    pub layers: Vec<Vec<f64>>,
}

impl FeaturePyramid {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l` (1-based) as a `[D, N]` tensor; never requires grad.
    pub fn layer_tensor<T: Scalar>(&self, l: usize) -> Result<Tensor<T>> {
        let data = self
            .layers
            .get(l.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("layer {l} outside 1..={}", self.layers.len())))?;
        Tensor::new(&[self.width, self.keypoints], data.iter().map(|&v| T::lit(v)).collect())
    }
}

/// Frozen geometry stub. The lift matrices live only here and are rebuilt
/// from `lift_seed`; nothing trainable ever references them.
#[derive(Clone, Debug)]
pub struct GeoStub {
    cfg: GeoStubConfig,
    /// One `[D, RAW_WIDTH]` row-major matrix per layer.
    lifts: Vec<Vec<f64>>,
}

struct Keypoint {
    pos: [f64; 3],
    attr: usize,
}

impl GeoStub {
    pub fn new(cfg: &GeoStubConfig) -> Result<Self> {
        cfg.validate()?;
        let scale = 1.0 / (RAW_WIDTH as f64).sqrt();
        let lifts = (0..cfg.layers)
            .map(|l| {
                let mut rng = crate::seed::rng(cfg.lift_seed, "geo-lift", &[l as u64]);
                (0..cfg.width * RAW_WIDTH)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            lifts,
        })
    }

    pub fn config(&self) -> &GeoStubConfig {
        &self.cfg
    }

    /// SHA-256 over every lift matrix.
    pub fn lift_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.lifts {
            for v in m {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn keypoints(&self, scene: &SceneState) -> Result<Vec<Keypoint>> {
        let mut kps = vec![Keypoint {
            pos: scene.ee_pos,
            attr: ATTR_EE,
        }];
        let mut objects: Vec<_> = scene.objects.iter().collect();
        objects.sort_by_key(|o| o.id);
        kps.extend(objects.iter().map(|o| Keypoint {
            pos: o.pos,
            attr: ATTR_COLOR + o.color.index(),
        }));
        let mut regions: Vec<_> = scene.goal_regions.iter().collect();
        regions.sort_by_key(|r| r.id);
        kps.extend(regions.iter().map(|r| Keypoint {
            pos: r.center,
            attr: ATTR_REGION + r.kind.index(),
        }));
        kps.extend(FIDUCIALS.iter().map(|&pos| Keypoint {
            pos,
            attr: ATTR_FIDUCIAL,
        }));
        if kps.len() > self.cfg.keypoints {
            return Err(Error::Config(format!(
                "scene has {} keypoints but the stub holds {}",
                kps.len(),
                self.cfg.keypoints
            )));
        }
        Ok(kps)
    }

    /// All M layers for `scene` seen from `cam`.
    pub fn features(&self, scene: &SceneState, cam: &CameraPose, view_index: usize) -> Result<FeaturePyramid> {
        let all: Vec<usize> = (1..=self.cfg.layers).collect();
        self.features_for(scene, cam, view_index, &all)
    }

    /// Only the listed 1-based layers, in the given order.
    pub fn features_for(
        &self,
        scene: &SceneState,
        cam: &CameraPose,
        view_index: usize,
        layers: &[usize],
    ) -> Result<FeaturePyramid> {
        let (d, n) = (self.cfg.width, self.cfg.keypoints);
        let kps = self.keypoints(scene)?;
        let (w, h) = (cam.width() as f64, cam.height() as f64);
        let mut view = Vec::with_capacity(kps.len());
        let mut world = Vec::with_capacity(kps.len());
        for kp in &kps {
            let (u, v, depth) = project_point(cam, &kp.pos)?;
            let mut vv = [0.0; RAW_WIDTH];
            if depth > MIN_DEPTH {
                vv[..4].copy_from_slice(&[u / w, v / h, depth, 1.0]);
            } else {
                // behind the camera: no image location, clamped depth, flag off
                vv[2] = MIN_DEPTH;
            }
            let mut wv = [0.0; RAW_WIDTH];
            wv[..3].copy_from_slice(&kp.pos);
            wv[ATTR_SLOT + kp.attr] = 1.0;
            view.push(vv);
            world.push(wv);
        }
        debug_assert_eq!(VIS_SLOT + 1, ATTR_SLOT);
        let mut out = Vec::with_capacity(layers.len());
        for &l in layers {
            if l == 0 || l > self.cfg.layers {
                return Err(Error::Config(format!("layer {l} outside 1..={}", self.cfg.layers)));
            }
            let a = self.cfg.alpha(l);
            let lift = &self.lifts[l - 1];
            let mut tok = vec![0.0; d * n];
            for (j, (vv, wv)) in view.iter().zip(&world).enumerate() {
                let raw: Vec<f64> = (0..RAW_WIDTH).map(|r| (1.0 - a) * vv[r] + a * wv[r]).collect();
                for c in 0..d {
                    let row = &lift[c * RAW_WIDTH..(c + 1) * RAW_WIDTH];
                    tok[c * n + j] = row.iter().zip(&raw).map(|(x, y)| x * y).sum();
                }
            }
            out.push(tok);
        }
        Ok(FeaturePyramid {
            view_index,
            width: d,
            keypoints: n,
            layers: out,
        })
    }
}
