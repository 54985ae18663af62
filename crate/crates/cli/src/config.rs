use std::path::Path;

use geoaware::backbones::GeoStubConfig;
use geoaware::deskworld::{ViewCategory, EPISODE_CAP, GOAL_RADIUS, GRASP_RADIUS, MAX_STEP};
use geoaware::policy::PolicyConfig;
use geoaware::training::TrainConfig;
use geoaware::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "GEOAWARE_SEED";

/// Simulator constants. They are compiled into the world; a config file may
/// restate them but not change them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub max_step: f64,
    pub grasp_radius: f64,
    pub goal_radius: f64,
    pub episode_cap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            max_step: MAX_STEP,
            grasp_radius: GRASP_RADIUS,
            goal_radius: GOAL_RADIUS,
            episode_cap: EPISODE_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub episodes_per_task: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes_per_task: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rollouts_per_task: usize,
    pub views: ViewCategory,
    /// Category used for the novel column of the layer ablation.
    pub ablation_novel_views: ViewCategory,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts_per_task: 10,
            views: ViewCategory::Seen,
            ablation_novel_views: ViewCategory::NovelMedium,
        }
    }
}

/// Every setting of a run under namespaced keys. The global `seed` drives
/// data generation, initialization, batching and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub geo: GeoStubConfig,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            geo: GeoStubConfig::default(),
            sim: SimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Seed default: `GEOAWARE_SEED` when set, else 0.
pub fn env_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults (with the environment seed), overlaid by the file when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut base = Self {
            seed: env_seed()?,
            ..Self::default()
        };
        let Some(path) = path else {
            base.train.seed = base.seed;
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::overlay(base, &text)
    }

    pub fn overlay(mut base: Self, text: &str) -> Result<Self> {
        let file: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        if !file.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        // a written config restates train.seed; it may only echo the global seed
        if let Some(ts) = file.pointer("/train/seed") {
            let seed = file.get("seed").cloned().unwrap_or_else(|| Value::from(base.seed));
            if *ts != seed {
                return Err(Error::Config("set the top-level `seed`; `train.seed` may only repeat it".into()));
            }
        }
        base.train.seed = base.seed;
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, file);
        let mut cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let sim = SimConfig::default();
        if self.sim != sim {
            return Err(Error::Config(format!(
                "simulator constants are fixed at {sim:?}; the config may not change them"
            )));
        }
        if self.train.seed != self.seed {
            return Err(Error::Config("train.seed must equal the global seed".into()));
        }
        if self.data.episodes_per_task == 0 || self.eval.rollouts_per_task == 0 {
            return Err(Error::Config("episodes_per_task and rollouts_per_task must be at least 1".into()));
        }
        self.geo.validate()?;
        self.policy.validate(self.geo.layers)?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trips_losslessly() {
        let mut cfg = RunConfig {
            seed: 7,
            ..RunConfig::default()
        };
        cfg.train.seed = 7;
        cfg.train.lr = 3.3e-4;
        cfg.policy.d_repr = 48;
        cfg.eval.views = ViewCategory::NovelLarge;
        let text = cfg.to_json().unwrap();
        let back = RunConfig::overlay(RunConfig::default(), &text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn defaults_fill_what_the_file_omits() {
        let cfg = RunConfig::overlay(RunConfig::default(), r#"{"seed": 3, "train": {"steps": 10}}"#).unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.policy, PolicyConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_conflicting_train_seed_are_rejected() {
        let bad = [
            r#"{"sede": 1}"#,
            r#"{"train": {"stepz": 1}}"#,
            r#"{"train": {"seed": 1}}"#,
            r#"{"seed": 2, "train": {"seed": 1}}"#,
            "[1]",
        ];
        for text in bad {
            assert!(matches!(RunConfig::overlay(RunConfig::default(), text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn simulator_constants_can_be_restated_but_not_changed() {
        let same = format!(r#"{{"sim": {{"max_step": {MAX_STEP}}}}}"#);
        RunConfig::overlay(RunConfig::default(), &same).unwrap().validate().unwrap();
        let changed = RunConfig::overlay(RunConfig::default(), r#"{"sim": {"episode_cap": 7}}"#).unwrap();
        assert!(matches!(changed.validate(), Err(Error::Config(_))));
    }
}
