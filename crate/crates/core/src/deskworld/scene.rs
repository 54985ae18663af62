use serde::{Deserialize, Serialize};

use super::{ACTION_DIM, GRASP_RADIUS, MAX_STEP, PROPRIO_DIM, WORKSPACE_HALF};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ObjectColor {
    pub const ALL: [ObjectColor; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [0.9, 0.1, 0.1],
            Self::Green => [0.1, 0.8, 0.2],
            Self::Blue => [0.15, 0.25, 0.95],
            Self::Yellow => [0.95, 0.85, 0.1],
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Plate,
    Bowl,
}

impl RegionKind {
    pub const ALL: [RegionKind; 2] = [Self::Plate, Self::Bowl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plate => "plate",
            Self::Bowl => "bowl",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Plate => [0.92, 0.92, 0.92],
            Self::Bowl => [0.55, 0.35, 0.2],
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub color: ObjectColor,
    pub pos: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub id: usize,
    pub kind: RegionKind,
    pub center: [f64; 3],
    pub radius: f64,
}

/// Ground-truth world state. Observations are always derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub ee_pos: [f64; 3],
    /// Accumulated axis-angle increments; carried but physically inert.
    pub ee_rot: [f64; 3],
    /// +1 open, −1 closed.
    pub gripper: f64,
    pub objects: Vec<SceneObject>,
    pub goal_regions: Vec<GoalRegion>,
    pub held_object: Option<usize>,
}

impl SceneState {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_by_color(&self, color: ObjectColor) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.color == color)
    }

    pub fn region_by_kind(&self, kind: RegionKind) -> Option<&GoalRegion> {
        self.goal_regions.iter().find(|r| r.kind == kind)
    }

    /// End-effector pose and gripper reading.
    pub fn proprio(&self) -> [f64; PROPRIO_DIM] {
        let [x, y, z] = self.ee_pos;
        let [a, b, c] = self.ee_rot;
        [x, y, z, a, b, c, self.gripper]
    }
}

/// Relative end-effector command.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub d_pos: [f64; 3],
    pub d_rot: [f64; 3],
    pub gripper_cmd: f64,
}

impl Action {
    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let [x, y, z] = self.d_pos;
        let [a, b, c] = self.d_rot;
        [x, y, z, a, b, c, self.gripper_cmd]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != ACTION_DIM {
            return Err(Error::Dimension(format!("action needs {ACTION_DIM} values, got {}", v.len())));
        }
        Ok(Self {
            d_pos: [v[0], v[1], v[2]],
            d_rot: [v[3], v[4], v[5]],
            gripper_cmd: v[6],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Gripper level commanded by a continuous value: non-negative opens.
pub fn gripper_level(cmd: f64) -> f64 {
    if cmd >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Advances the world by one action.
pub fn step(scene: &SceneState, action: &Action) -> Result<SceneState> {
    if !action.is_finite() {
        return Err(Error::Input(format!("non-finite action {action:?}")));
    }
    let mut next = scene.clone();
    for i in 0..3 {
        let moved = scene.ee_pos[i] + action.d_pos[i].clamp(-MAX_STEP, MAX_STEP);
        next.ee_pos[i] = moved.clamp(-WORKSPACE_HALF, WORKSPACE_HALF);
        next.ee_rot[i] = scene.ee_rot[i] + action.d_rot[i];
    }
    let level = gripper_level(action.gripper_cmd);
    next.gripper = level;
    if scene.gripper > 0.0 && level < 0.0 && scene.held_object.is_none() {
        next.held_object = next
            .objects
            .iter()
            .map(|o| (dist(&o.pos, &next.ee_pos), o.id))
            .filter(|(d, _)| *d <= GRASP_RADIUS)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id);
    } else if level > 0.0 {
        next.held_object = None;
    }
    if let Some(id) = next.held_object {
        let ee = next.ee_pos;
        if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
            o.pos = ee;
        }
    }
    Ok(next)
}
