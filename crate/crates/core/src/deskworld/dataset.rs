use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::camera::{seen_cameras, CameraPose};
use super::scene::{step, Action, SceneState};
use super::tasks::{expert_action, reset, success, TaskSpec};
use super::{EPISODE_CAP, PROPRIO_DIM};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const REPLAY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub scene: SceneState,
    pub proprio: [f64; PROPRIO_DIM],
    pub action: Action,
}

/// One scripted demonstration. Stores world states, never images, so any
/// camera can be rendered later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: usize,
    pub instruction: String,
    pub seed: u64,
    pub steps: Vec<EpisodeStep>,
}

fn max_pos_diff(a: &SceneState, b: &SceneState) -> f64 {
    let mut worst: f64 = 0.0;
    let mut cmp = |x: &[f64; 3], y: &[f64; 3]| {
        for i in 0..3 {
            worst = worst.max((x[i] - y[i]).abs());
        }
    };
    cmp(&a.ee_pos, &b.ee_pos);
    cmp(&a.ee_rot, &b.ee_rot);
    for (o, p) in a.objects.iter().zip(&b.objects) {
        cmp(&o.pos, &p.pos);
    }
    if a.gripper != b.gripper || a.held_object != b.held_object || a.objects.len() != b.objects.len() {
        return f64::INFINITY;
    }
    worst
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// World state after the last stored action.
    pub fn final_scene(&self) -> Result<SceneState> {
        let last = self
            .steps
            .last()
            .ok_or_else(|| Error::Generation("empty episode".into()))?;
        step(&last.scene, &last.action)
    }

    /// Replays every action from the first scene, checks each stored scene
    /// within 1e-9, and checks that the episode ends in success.
    pub fn verify(&self, task: &TaskSpec) -> Result<()> {
        let first = self
            .steps
            .first()
            .ok_or_else(|| Error::Generation("empty episode".into()))?;
        let mut scene = first.scene.clone();
        for (i, st) in self.steps.iter().enumerate() {
            let d = max_pos_diff(&scene, &st.scene);
            if d > REPLAY_TOL {
                return Err(Error::Generation(format!("replay diverged at step {i} by {d}")));
            }
            if st.proprio != st.scene.proprio() {
                return Err(Error::Generation(format!("proprio mismatch at step {i}")));
            }
            scene = step(&scene, &st.action)?;
        }
        if !success(&scene, task) {
            return Err(Error::Generation(format!(
                "episode for task {} seed {} does not end in success",
                self.task_id, self.seed
            )));
        }
        Ok(())
    }
}

/// Rolls the expert out from `reset(task, seed)` until success.
pub fn record_episode(task: &TaskSpec, seed: u64) -> Result<Episode> {
    let mut scene = reset(task, seed)?;
    let mut steps = Vec::new();
    while !success(&scene, task) {
        if steps.len() >= EPISODE_CAP {
            return Err(Error::Generation(format!(
                "expert failed task {} (seed {seed}) within {EPISODE_CAP} steps",
                task.id
            )));
        }
        let action = expert_action(&scene, task)?;
        let next = step(&scene, &action)?;
        steps.push(EpisodeStep {
            proprio: scene.proprio(),
            scene,
            action,
        });
        scene = next;
    }
    if steps.is_empty() {
        return Err(Error::Generation(format!("task {} already solved at reset", task.id)));
    }
    Ok(Episode {
        task_id: task.id,
        instruction: task.instruction.clone(),
        seed,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub tasks: Vec<TaskSpec>,
    pub seen_cameras: Vec<CameraPose>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.header.tasks
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec> {
        self.header
            .tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Input(format!("dataset has no task {id}")))
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// JSON-lines image of the dataset with 17-significant-digit floats.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_line(&mut out, &self.header)?;
        for ep in &self.episodes {
            write_line(&mut out, ep)?;
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&head)?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format_version {}",
                header.format_version
            )));
        }
        let mut episodes = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                episodes.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { header, episodes })
    }
}

/// Scripted-expert demonstrations, `episodes_per_task` per task, each from a
/// distinct derived reset seed. Any expert failure aborts the whole run.
pub fn generate_dataset(tasks: &[TaskSpec], episodes_per_task: usize, seed: u64) -> Result<Dataset> {
    if episodes_per_task == 0 {
        return Err(Error::Config("episodes_per_task must be at least 1".into()));
    }
    let mut episodes = Vec::with_capacity(tasks.len() * episodes_per_task);
    for task in tasks {
        for i in 0..episodes_per_task {
            let ep_seed = crate::seed::derive(seed, "episode", &[task.id as u64, i as u64]);
            let ep = record_episode(task, ep_seed)?;
            ep.verify(task)?;
            episodes.push(ep);
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            tasks: tasks.to_vec(),
            seen_cameras: seen_cameras().to_vec(),
            seed,
        },
        episodes,
    })
}

/// Serializer formatter writing every float with 17 significant digits.
struct Sig17;

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

fn write_line<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(&mut *out, Sig17);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(())
}

/// Writes via a sibling temp file and rename, so a failure never leaves a
/// partial dataset behind.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset.to_jsonl()?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path)?;
    Dataset::from_jsonl(io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deskworld::make_tasks;

    #[test]
    fn default_suite_yields_200_successful_episodes() {
        let ds = generate_dataset(&make_tasks(), 50, 0).unwrap();
        assert_eq!(ds.episodes.len(), 200);
        for ep in &ds.episodes {
            ep.verify(ds.task(ep.task_id).unwrap()).unwrap();
            assert!(ep.len() <= EPISODE_CAP);
        }
        let mut seeds: Vec<u64> = ds.episodes.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 200);
    }

    #[test]
    fn serialization_is_deterministic_and_replay_exact() {
        let tasks = make_tasks();
        let a = generate_dataset(&tasks, 3, 17).unwrap();
        let b = generate_dataset(&tasks, 3, 17).unwrap();
        let bytes = a.to_jsonl().unwrap();
        assert_eq!(bytes, b.to_jsonl().unwrap());
        let back = Dataset::from_jsonl(io::Cursor::new(&bytes)).unwrap();
        assert_eq!(back, a);
        for ep in &back.episodes {
            ep.verify(back.task(ep.task_id).unwrap()).unwrap();
        }
        let first = String::from_utf8(bytes).unwrap();
        let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(header["seen_cameras"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn floats_carry_17_significant_digits() {
        let mut out = Vec::new();
        write_line(&mut out, &[0.1f64, -2.5e-7]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap().trim(),
            "[1.0000000000000001e-1,-2.4999999999999999e-7]"
        );
    }

    #[test]
    fn tampered_episode_fails_replay() {
        let tasks = make_tasks();
        let mut ds = generate_dataset(&tasks, 1, 3).unwrap();
        ds.episodes[0].steps[2].scene.ee_pos[0] += 1e-6;
        assert!(ds.episodes[0].verify(&tasks[0]).is_err());
    }

    #[test]
    fn zero_episodes_per_task_is_rejected() {
        assert!(generate_dataset(&make_tasks(), 0, 1).is_err());
    }

    #[test]
    fn write_and_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.jsonl");
        let ds = generate_dataset(&make_tasks(), 2, 5).unwrap();
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }
}
