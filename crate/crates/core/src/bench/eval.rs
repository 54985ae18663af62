use super::report::{rate_ratio, success_rate, AblationReport, AblationRow, CompareReport, CompareRow, EvalReport, TaskResult, REPORT_SCHEMA_VERSION};
use super::rollout::{rollout, Controller, PolicyController, DEFAULT_MAX_STEPS};
use crate::backbones::LayerSelection;
use crate::deskworld::{sample_viewpoints, seen_cameras, CameraPose, Dataset, TaskSpec, ViewCategory};
use crate::error::{Error, Result};
use crate::policy::{BackboneKind, Policy, PolicySpec};
use crate::training::{bc_train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub category: ViewCategory,
    pub rollouts_per_task: usize,
    /// Evaluation seeds; counts are pooled over all of them.
    pub seeds: Vec<u64>,
    pub max_steps: usize,
}

impl EvalSettings {
    pub fn new(category: ViewCategory, rollouts_per_task: usize, seeds: Vec<u64>) -> Self {
        Self {
            category,
            rollouts_per_task,
            seeds,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

/// Reset seed of rollout `r` of `task` under evaluation seed `seed`; a
/// separate stream from the demonstration seeds.
pub fn rollout_seed(seed: u64, task: usize, r: usize) -> u64 {
    crate::seed::derive(seed, "eval-reset", &[task as u64, r as u64])
}

fn same_pose(a: &CameraPose, b: &CameraPose) -> bool {
    let close = |x: &[f64; 3], y: &[f64; 3]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
    close(&a.position, &b.position) && close(&a.look_at, &b.look_at) && close(&a.up, &b.up)
}

/// Cameras for one rollout: the training pair for seen, otherwise a fresh
/// pair from the category band that never coincides with a training pose.
pub fn rollout_cameras(category: ViewCategory, seed: u64, task: usize, r: usize) -> Result<Vec<CameraPose>> {
    let seen = seen_cameras();
    if category == ViewCategory::Seen {
        return Ok(seen.to_vec());
    }
    let cam_seed = crate::seed::derive(seed, "eval-camera", &[task as u64, r as u64]);
    let cams = sample_viewpoints(category, seen.len(), cam_seed)?.cameras;
    if cams.iter().any(|c| seen.iter().any(|s| same_pose(c, s))) {
        return Err(Error::Camera("novel evaluation camera coincides with a training camera".into()));
    }
    Ok(cams)
}

pub fn evaluate(
    controller: &mut dyn Controller,
    model: &str,
    tasks: &[TaskSpec],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if settings.seeds.is_empty() || settings.rollouts_per_task == 0 {
        return Err(Error::Config("evaluation needs at least one seed and one rollout".into()));
    }
    let mut results = Vec::with_capacity(tasks.len());
    let mut total_steps = 0usize;
    let mut episodes = 0usize;
    for task in tasks {
        let mut successes = 0;
        let mut rollouts = 0;
        for &seed in &settings.seeds {
            for r in 0..settings.rollouts_per_task {
                let cams = rollout_cameras(settings.category, seed, task.id, r)?;
                let out = rollout(controller, task, &cams, rollout_seed(seed, task.id, r), settings.max_steps)?;
                successes += usize::from(out.success);
                rollouts += 1;
                total_steps += out.steps;
                episodes += 1;
            }
        }
        results.push(TaskResult {
            id: task.id,
            successes,
            rollouts,
            rate: success_rate(successes, rollouts),
        });
    }
    let average_rate = results.iter().map(|t| t.rate).sum::<f64>() / results.len().max(1) as f64;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: model.to_string(),
        category: settings.category.as_str().to_string(),
        tasks: results,
        average_rate,
        seeds: settings.seeds.clone(),
        mean_episode_length: total_steps as f64 / episodes.max(1) as f64,
    })
}

pub fn model_name(spec: &PolicySpec) -> String {
    let p = &spec.policy;
    match p.backbone {
        BackboneKind::Geo => format!("geo-{}-{}", p.head, p.select),
        BackboneKind::Pixel => format!("pixel-{}", p.head),
    }
}

pub fn evaluate_policy(policy: &Policy<f32>, tasks: &[TaskSpec], settings: &EvalSettings) -> Result<EvalReport> {
    let mut c = PolicyController::new(policy)?;
    evaluate(&mut c, &model_name(&policy.spec), tasks, settings)
}

/// Success rates of both models per category and their ratio.
pub fn compare(
    geo: &Policy<f32>,
    pixel: &Policy<f32>,
    tasks: &[TaskSpec],
    categories: &[ViewCategory],
    rollouts_per_task: usize,
    seeds: &[u64],
) -> Result<CompareReport> {
    let (a, b) = (&geo.spec, &pixel.spec);
    if a.policy.views != b.policy.views || a.vocab != b.vocab || a.policy.chunk != b.policy.chunk {
        return Err(Error::Config(
            "checkpoints disagree on views, instruction vocabulary or chunk length".into(),
        ));
    }
    let mut rows = Vec::with_capacity(categories.len());
    for &category in categories {
        let settings = EvalSettings::new(category, rollouts_per_task, seeds.to_vec());
        let g = evaluate_policy(geo, tasks, &settings)?.average_rate;
        let p = evaluate_policy(pixel, tasks, &settings)?.average_rate;
        rows.push(CompareRow {
            category: category.as_str().to_string(),
            geo_rate: g,
            pixel_rate: p,
            ratio: rate_ratio(g, p),
        });
    }
    Ok(CompareReport {
        schema_version: REPORT_SCHEMA_VERSION,
        geo_model: model_name(a),
        pixel_model: model_name(b),
        rows,
        seeds: seeds.to_vec(),
    })
}

pub const ABLATION_MODES: [LayerSelection; 3] =
    [LayerSelection::All, LayerSelection::Even(4), LayerSelection::Last(4)];

/// Trains one geo policy per layer-selection mode with shared seeds and
/// evaluates each on seen and `novel` views.
pub fn ablate_layers(
    dataset: &Dataset,
    base: &PolicySpec,
    train: &TrainConfig,
    modes: &[LayerSelection],
    novel: ViewCategory,
    rollouts_per_task: usize,
    seeds: &[u64],
    mut on_trained: impl FnMut(LayerSelection, &TrainOutcome) -> Result<()>,
) -> Result<AblationReport> {
    if base.policy.backbone != BackboneKind::Geo {
        return Err(Error::Config("layer ablation needs the geo backbone".into()));
    }
    if modes.is_empty() {
        return Err(Error::Config("no ablation modes given".into()));
    }
    let tasks = dataset.tasks();
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        mode.indices(base.geo.layers)?;
        let mut spec = base.clone();
        spec.policy.select = mode;
        let outcome = bc_train(dataset, spec, train)?;
        on_trained(mode, &outcome)?;
        let seen = evaluate_policy(&outcome.policy, tasks, &EvalSettings::new(ViewCategory::Seen, rollouts_per_task, seeds.to_vec()))?;
        let nov = evaluate_policy(&outcome.policy, tasks, &EvalSettings::new(novel, rollouts_per_task, seeds.to_vec()))?;
        rows.push(AblationRow {
            mode: mode.to_string(),
            label: mode.label(),
            default: mode == LayerSelection::default(),
            seen,
            novel: nov,
        });
    }
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        novel_category: novel.as_str().to_string(),
        rows,
    })
}
