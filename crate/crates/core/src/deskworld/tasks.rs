use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{dist, Action, GoalRegion, ObjectColor, RegionKind, SceneObject, SceneState};
use super::{GOAL_RADIUS, GRASP_RADIUS, HOME_POS, MAX_STEP, MIN_SEPARATION, WORKSPACE_HALF};
use crate::error::{Error, Result};

/// Distance under which the expert treats a subgoal as reached: close enough
/// to grasp, and close enough that a release lands well inside the region.
const ARRIVAL_TOL: f64 = GRASP_RADIUS;
/// Travel height between pick and place targets.
const HOVER_HEIGHT: f64 = HOME_POS[2];
/// Objects and goal centers are placed in this square on the table plane.
const PLACEMENT_HALF: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// One "move object X into region Y" requirement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub object: ObjectColor,
    pub region: RegionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub instruction: String,
    /// Completed in order by the expert.
    pub placements: Vec<Placement>,
}

const SCENE_OBJECTS: [ObjectColor; 3] = [ObjectColor::Red, ObjectColor::Green, ObjectColor::Blue];

fn place(object: ObjectColor, region: RegionKind) -> Placement {
    Placement { object, region }
}

fn phrase(p: &Placement) -> String {
    let prep = match p.region {
        RegionKind::Plate => "on",
        RegionKind::Bowl => "in",
    };
    format!("the {} block {prep} the {}", p.object.name(), p.region.name())
}

/// The fixed task suite: three single pick-and-place tasks and one
/// two-object sequence.
pub fn make_tasks() -> Vec<TaskSpec> {
    use ObjectColor::*;
    use RegionKind::*;
    let templates = [
        vec![place(Red, Plate)],
        vec![place(Green, Bowl)],
        vec![place(Blue, Plate)],
        vec![place(Red, Plate), place(Green, Bowl)],
    ];
    templates
        .into_iter()
        .enumerate()
        .map(|(id, placements)| {
            let body: Vec<String> = placements.iter().map(phrase).collect();
            TaskSpec {
                id,
                instruction: format!("put {}", body.join(" then ")),
                placements,
            }
        })
        .collect()
}

/// Samples a scene for `task` from `seed`: every object and goal center lies
/// on the table at least [`MIN_SEPARATION`] from every other one.
pub fn reset(task: &TaskSpec, seed: u64) -> Result<SceneState> {
    let mut rng = crate::seed::rng(seed, "reset", &[task.id as u64]);
    let objs = SCENE_OBJECTS;
    let regs = RegionKind::ALL;
    let n = objs.len() + regs.len();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-PLACEMENT_HALF..PLACEMENT_HALF),
                    rng.gen_range(-PLACEMENT_HALF..PLACEMENT_HALF),
                    0.0,
                ]
            })
            .collect();
        let separated = (0..n).all(|i| (i + 1..n).all(|j| dist(&pts[i], &pts[j]) >= MIN_SEPARATION));
        if !separated {
            continue;
        }
        let objects = objs
            .iter()
            .enumerate()
            .map(|(id, &color)| SceneObject { id, color, pos: pts[id] })
            .collect();
        let goal_regions = regs
            .iter()
            .enumerate()
            .map(|(id, &kind)| GoalRegion {
                id,
                kind,
                center: pts[objs.len() + id],
                radius: GOAL_RADIUS,
            })
            .collect();
        return Ok(SceneState {
            ee_pos: HOME_POS,
            ee_rot: [0.0; 3],
            gripper: 1.0,
            objects,
            goal_regions,
            held_object: None,
        });
    }
    Err(Error::Generation(format!(
        "no valid placement for task {} seed {seed} after {PLACEMENT_ATTEMPTS} attempts",
        task.id
    )))
}

fn resolve<'a>(scene: &'a SceneState, p: &Placement) -> Result<(&'a SceneObject, &'a GoalRegion)> {
    let obj = scene
        .object_by_color(p.object)
        .ok_or_else(|| Error::Task(format!("scene has no {} object", p.object.name())))?;
    let region = scene
        .region_by_kind(p.region)
        .ok_or_else(|| Error::Task(format!("scene has no {} region", p.region.name())))?;
    Ok((obj, region))
}

fn satisfied(scene: &SceneState, obj: &SceneObject, region: &GoalRegion) -> bool {
    scene.held_object != Some(obj.id) && dist(&obj.pos, &region.center) <= region.radius
}

/// True iff every designated object rests inside its region and is not held.
pub fn success(scene: &SceneState, task: &TaskSpec) -> bool {
    task.placements.iter().all(|p| match resolve(scene, p) {
        Ok((obj, region)) => satisfied(scene, obj, region),
        Err(_) => false,
    })
}

fn toward(from: &[f64; 3], to: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (to[i] - from[i]).clamp(-MAX_STEP, MAX_STEP))
}

/// Next waypoint toward `target`: above it at hover height until one step
/// can close the horizontal gap, then the target itself. `None` once arrived.
fn waypoint(ee: &[f64; 3], target: &[f64; 3]) -> Option<[f64; 3]> {
    if dist(ee, target) <= ARRIVAL_TOL {
        return None;
    }
    let reachable = (0..2).all(|i| (target[i] - ee[i]).abs() <= MAX_STEP);
    if !reachable {
        Some([target[0], target[1], HOVER_HEIGHT])
    } else {
        Some(*target)
    }
}

fn reachable(p: &[f64; 3]) -> bool {
    p.iter().all(|v| v.abs() <= WORKSPACE_HALF)
}

/// Scripted demonstrator: approach → grasp → transport → release for the
/// first unsatisfied placement, using a unit-gain proportional controller.
/// Both approach and transport travel at hover height and descend only once
/// above the target.
pub fn expert_action(scene: &SceneState, task: &TaskSpec) -> Result<Action> {
    let mut pending = None;
    for p in &task.placements {
        let (obj, region) = resolve(scene, p)?;
        if !satisfied(scene, obj, region) {
            pending = Some((obj, region));
            break;
        }
    }
    let ee = &scene.ee_pos;
    let act = |d_pos: [f64; 3], gripper_cmd: f64| Action {
        d_pos,
        d_rot: [0.0; 3],
        gripper_cmd,
    };
    let Some((obj, region)) = pending else {
        return Ok(act([0.0; 3], 1.0));
    };
    if !reachable(&obj.pos) || !reachable(&region.center) {
        return Err(Error::Task(format!("subgoal for task {} outside the workspace", task.id)));
    }
    Ok(match scene.held_object {
        Some(id) if id == obj.id => match waypoint(ee, &region.center) {
            Some(w) => act(toward(ee, &w), -1.0),
            None => act([0.0; 3], 1.0),
        },
        // holding the wrong object: let go where we are
        Some(_) => act([0.0; 3], 1.0),
        None => match waypoint(ee, &obj.pos) {
            Some(w) => act(toward(ee, &w), 1.0),
            None => act([0.0; 3], -1.0),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deskworld::{step, EPISODE_CAP};

    #[test]
    fn default_suite_has_four_distinct_instructions() {
        let tasks = make_tasks();
        assert_eq!(tasks.len(), 4);
        let mut instr: Vec<_> = tasks.iter().map(|t| t.instruction.clone()).collect();
        instr.sort();
        instr.dedup();
        assert_eq!(instr.len(), 4);
        assert_eq!(make_tasks(), tasks);
        assert!(tasks.iter().any(|t| t.placements.len() == 2));
    }

    #[test]
    fn reset_is_deterministic_with_open_gripper() {
        let t = &make_tasks()[3];
        let a = reset(t, 11).unwrap();
        assert_eq!(a, reset(t, 11).unwrap());
        assert_ne!(a, reset(t, 12).unwrap());
        assert_eq!(a.gripper, 1.0);
        assert_eq!(a.ee_pos, HOME_POS);
    }

    #[test]
    fn reset_keeps_minimum_separation_over_100_seeds() {
        for t in make_tasks() {
            for seed in 0..100 {
                let s = reset(&t, seed).unwrap();
                let mut pts: Vec<[f64; 3]> = s.objects.iter().map(|o| o.pos).collect();
                pts.extend(s.goal_regions.iter().map(|r| r.center));
                for i in 0..pts.len() {
                    assert!(pts[i].iter().all(|v| v.abs() <= WORKSPACE_HALF));
                    for j in i + 1..pts.len() {
                        assert!(dist(&pts[i], &pts[j]) >= MIN_SEPARATION);
                    }
                }
            }
        }
    }

    #[test]
    fn expert_moves_at_max_step_along_dominant_axis_when_far() {
        let t = &make_tasks()[0];
        let mut s = reset(t, 5).unwrap();
        s.objects[0].pos = [0.3, -0.1, 0.0];
        for r in s.goal_regions.iter_mut() {
            r.center = [-0.3, 0.3, 0.0];
        }
        s.ee_pos = [-0.2, 0.0, 0.2];
        let a = expert_action(&s, t).unwrap();
        assert_eq!(a.d_pos, [0.05, -0.05, 0.0]);
        s.ee_pos = [0.24, -0.1, 0.1];
        let near = expert_action(&s, t).unwrap();
        assert!((near.d_pos[0] - 0.05).abs() < 1e-15 && near.d_pos[1] == 0.0);
        assert!((near.d_pos[2] - 0.05).abs() < 1e-15);
        assert_eq!(near.gripper_cmd, 1.0);
    }

    #[test]
    fn expert_descends_once_one_step_from_above_the_target() {
        let t = &make_tasks()[0];
        let mut s = reset(t, 5).unwrap();
        s.objects[0].pos = [0.3, -0.1, 0.0];
        for r in s.goal_regions.iter_mut() {
            r.center = [-0.3, 0.3, 0.0];
        }
        s.ee_pos = [0.3, -0.1, 0.2];
        assert_eq!(expert_action(&s, t).unwrap().d_pos, [0.0, 0.0, -0.05]);
        s.ee_pos = [0.26, -0.1, 0.2];
        let a = expert_action(&s, t).unwrap();
        assert!((a.d_pos[0] - 0.04).abs() < 1e-12 && a.d_pos[2] == -0.05);
        s.ee_pos = [0.249, -0.1, 0.2];
        let a = expert_action(&s, t).unwrap();
        assert!(a.d_pos[0] == 0.05 && a.d_pos[2] == 0.0);
    }

    #[test]
    fn expert_closes_when_on_the_object() {
        let t = &make_tasks()[1];
        let mut s = reset(t, 2).unwrap();
        s.ee_pos = s.object_by_color(ObjectColor::Green).unwrap().pos;
        let a = expert_action(&s, t).unwrap();
        assert_eq!(a.gripper_cmd, -1.0);
        assert_eq!(a.d_pos, [0.0; 3]);
        s.ee_pos[0] += 0.9 * GRASP_RADIUS;
        assert_eq!(expert_action(&s, t).unwrap().gripper_cmd, -1.0);
        s.ee_pos[0] += 0.2 * GRASP_RADIUS;
        assert_eq!(expert_action(&s, t).unwrap().gripper_cmd, 1.0);
    }

    #[test]
    fn success_boundary() {
        let t = &make_tasks()[0];
        let mut s = reset(t, 3).unwrap();
        let c = s.region_by_kind(RegionKind::Plate).unwrap().center;
        s.objects[0].pos = c;
        assert!(success(&s, t));
        s.objects[0].pos = [c[0] + GOAL_RADIUS + 1e-9, c[1], c[2]];
        assert!(!success(&s, t));
        s.objects[0].pos = c;
        s.held_object = Some(0);
        assert!(!success(&s, t));
    }

    #[test]
    fn expert_solves_every_task_for_20_seeds() {
        for t in make_tasks() {
            for seed in 0..20 {
                let mut s = reset(&t, seed).unwrap();
                let mut steps = 0;
                while !success(&s, &t) {
                    assert!(steps < EPISODE_CAP, "task {} seed {seed} timed out", t.id);
                    let a = expert_action(&s, &t).unwrap();
                    assert!(a.d_pos.iter().all(|v| v.abs() <= MAX_STEP));
                    s = step(&s, &a).unwrap();
                    steps += 1;
                }
            }
        }
    }

    #[test]
    fn unknown_object_is_a_task_error() {
        let mut t = make_tasks()[0].clone();
        t.placements[0].object = ObjectColor::Yellow;
        let s = reset(&t, 0).unwrap();
        assert!(matches!(expert_action(&s, &t), Err(Error::Task(_))));
    }
}
