use crate::deskworld::{expert_action, reset, step, success, Action, CameraPose, SceneState, TaskSpec, ACTION_DIM, EPISODE_CAP};
use crate::error::Result;
use crate::policy::{Featurizer, Policy};

/// Anything that maps the current scene (and what the cameras see) to an
/// action chunk.
pub trait Controller {
    fn act(&mut self, scene: &SceneState, cameras: &[CameraPose], task: &TaskSpec) -> Result<Vec<f64>>;
}

/// The scripted expert; reads the true scene and ignores the cameras.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, scene: &SceneState, _cameras: &[CameraPose], task: &TaskSpec) -> Result<Vec<f64>> {
        Ok(expert_action(scene, task)?.to_array().to_vec())
    }
}

pub struct PolicyController<'a> {
    policy: &'a Policy<f32>,
    featurizer: Featurizer,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy<f32>) -> Result<Self> {
        Ok(Self {
            policy,
            featurizer: policy.featurizer()?,
        })
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, scene: &SceneState, cameras: &[CameraPose], task: &TaskSpec) -> Result<Vec<f64>> {
        let id = self.policy.instruction_id(&task.instruction)?;
        let obs = self.featurizer.observe::<f32>(&[scene], cameras, vec![id])?;
        Ok(self.policy.predict(&obs)?.remove(0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub success: bool,
    pub steps: usize,
    /// Scenes visited, starting with the reset state.
    pub trajectory: Vec<SceneState>,
    /// Why a rollout was cut short, when not by success or the step cap.
    pub failure: Option<String>,
}

/// Closed loop from `reset(task, seed)`: observe, act with the first action
/// of the chunk (gripper thresholded at 0), step, until success or `max_steps`.
pub fn rollout(
    controller: &mut dyn Controller,
    task: &TaskSpec,
    cameras: &[CameraPose],
    seed: u64,
    max_steps: usize,
) -> Result<Rollout> {
    let mut scene = reset(task, seed)?;
    let mut trajectory = vec![scene.clone()];
    let mut failure = None;
    let mut steps = 0;
    while !success(&scene, task) && steps < max_steps {
        let chunk = controller.act(&scene, cameras, task)?;
        if chunk.len() < ACTION_DIM || chunk[..ACTION_DIM].iter().any(|v| !v.is_finite()) {
            failure = Some(format!("non-finite or short action at step {steps}: {chunk:?}"));
            break;
        }
        let mut action = Action::from_slice(&chunk[..ACTION_DIM])?;
        action.gripper_cmd = if action.gripper_cmd >= 0.0 { 1.0 } else { -1.0 };
        scene = step(&scene, &action)?;
        trajectory.push(scene.clone());
        steps += 1;
    }
    Ok(Rollout {
        success: success(&scene, task),
        steps,
        trajectory,
        failure,
    })
}

pub const DEFAULT_MAX_STEPS: usize = EPISODE_CAP;
