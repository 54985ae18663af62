//! DeskWorld: a synthetic tabletop pick-and-place world with pinhole cameras,
//! a scripted expert and demonstration generation.

mod camera;
mod dataset;
mod render;
mod scene;
mod tasks;

pub use dataset::record_episode;

pub use camera::{
    project_point, sample_viewpoints, seen_cameras, angle_between_deg, CameraPose, ViewCategory,
    ViewpointSet,
};
pub use dataset::{
    generate_dataset, read_dataset, write_dataset, Dataset, DatasetHeader, Episode, EpisodeStep,
};
pub use render::{render_image, Image};
pub use scene::{step, Action, GoalRegion, ObjectColor, RegionKind, SceneObject, SceneState};
pub use tasks::{expert_action, make_tasks, reset, success, Placement, TaskSpec};

/// Per-axis translation limit applied by the dynamics, in meters.
pub const MAX_STEP: f64 = 0.05;
/// An object within this distance of the end effector is grasped on close.
pub const GRASP_RADIUS: f64 = 0.03;
/// Step budget for expert demonstrations and evaluation rollouts.
pub const EPISODE_CAP: usize = 200;
/// Half-extent of the workspace cube centered at the origin.
pub const WORKSPACE_HALF: f64 = 0.5;
/// Minimum pairwise distance between objects and goal centers at reset.
pub const MIN_SEPARATION: f64 = 0.08;
pub const GOAL_RADIUS: f64 = 0.06;
pub const HOME_POS: [f64; 3] = [0.0, 0.0, 0.2];
/// Flattened action width: translation, rotation, gripper.
pub const ACTION_DIM: usize = 7;
pub const PROPRIO_DIM: usize = 7;
