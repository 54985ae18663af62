use serde::{Deserialize, Serialize};

use super::batch::{action_chunks, all_indices, make_batch, sample_indices};
use crate::deskworld::{seen_cameras, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, AdamWState, Graph, ParamStore, Tensor};
use crate::policy::{mlp_head, quantize_actions, vq_encode, vqbet_loss, vqvae_loss, HeadKind, Policy, PolicySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Codebook fitting steps before the VQ-BeT head is trained.
    pub vq_pretrain_steps: usize,
    /// Progress callback period in steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            vq_pretrain_steps: 2000,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub phase: Phase,
    pub step: usize,
    pub total: usize,
    /// Mean loss over the last `eval_every` steps.
    pub recent_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Codebook,
    Policy,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy<f32>,
    /// Per-step behavior-cloning (or VQ-BeT head) loss.
    pub losses: Vec<f64>,
    /// Per-step codebook loss; empty for the MLP head.
    pub codebook_losses: Vec<f64>,
}

fn diverged(phase: &str, step: usize, params: &ParamStore<f32>) -> Error {
    let mut norms = params.norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.3e}")).collect();
    Error::Numeric(format!(
        "non-finite loss at step {step} ({phase}); largest parameter norms: {}",
        top.join(", ")
    ))
}

fn report(
    cb: &mut dyn FnMut(Progress),
    cfg: &TrainConfig,
    phase: Phase,
    step: usize,
    total: usize,
    losses: &[f64],
) {
    if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total) {
        let n = cfg.eval_every.min(losses.len());
        let recent = losses[losses.len() - n..].iter().sum::<f64>() / n as f64;
        cb(Progress {
            phase,
            step: step + 1,
            total,
            recent_loss: recent,
        });
    }
}

/// Behavior cloning on `dataset` under the two seen cameras. For the VQ-BeT
/// head the codebook is fitted first and then frozen.
pub fn bc_train(dataset: &Dataset, spec: PolicySpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    bc_train_with(dataset, spec, cfg, &mut |_| {})
}

pub fn bc_train_with(
    dataset: &Dataset,
    spec: PolicySpec,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(Progress),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = all_indices(dataset);
    if pool.is_empty() {
        return Err(Error::Input("training needs a non-empty dataset".into()));
    }
    let mut policy = Policy::<f32>::new(spec, crate::seed::derive(cfg.seed, "init", &[]))?;
    let pcfg = policy.config().clone();
    let cameras = seen_cameras();
    if pcfg.views != cameras.len() {
        return Err(Error::Config(format!(
            "policy expects {} views but there are {} training cameras",
            pcfg.views,
            cameras.len()
        )));
    }
    let featurizer = policy.featurizer()?;
    let (all_actions, all_mask) = action_chunks::<f32>(dataset, &pool, pcfg.chunk)?;
    policy.fit_action_stats(&all_actions, &all_mask)?;
    let mut codebook_losses = Vec::new();

    if pcfg.head == HeadKind::Vqbet {
        let mut vq = policy.params.take_prefixed("vq.");
        let mut state = AdamWState::new(cfg.adamw());
        let mut rng = crate::seed::rng(cfg.seed, "codebook-batch", &[]);
        seed_codes(&mut vq, &policy, dataset, &pool, &mut rng)?;
        for step in 0..cfg.vq_pretrain_steps {
            let idx = sample_indices(&pool, cfg.batch_size, &mut rng);
            let (actions, _) = action_chunks::<f32>(dataset, &idx, pcfg.chunk)?;
            let mut g = Graph::new();
            let a = g.constant(policy.normalize_actions(&actions)?);
            let l = vqvae_loss(&mut g, &vq, "", pcfg.vq.commitment_beta, a)?;
            let v = g.value(l.total).item() as f64;
            if !v.is_finite() {
                return Err(diverged("codebook", step, &vq));
            }
            codebook_losses.push(v);
            g.backward(l.total)?;
            g.accumulate_into(&mut vq)?;
            adamw_step(&mut vq, &mut state)?;
            report(progress, cfg, Phase::Codebook, step, cfg.vq_pretrain_steps, &codebook_losses);
        }
        vq.freeze_all();
        policy.params.merge_prefixed("vq.", &vq)?;
        policy.codebook_trained = true;
    }

    let mut state = AdamWState::new(cfg.adamw());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = crate::seed::rng(cfg.seed, "batch", &[step as u64]);
        let idx = sample_indices(&pool, cfg.batch_size, &mut rng);
        let batch = make_batch::<f32>(dataset, &idx, &featurizer, &policy.spec.vocab, pcfg.chunk, &cameras)?;
        let targets = policy.normalize_actions(&batch.targets)?;
        let mut g = Graph::new();
        let h = policy.hidden(&mut g, &batch.obs)?;
        let loss = match pcfg.head {
            HeadKind::Mlp => {
                let pred = mlp_head(&mut g, &policy.params, h)?;
                let t = g.constant(targets);
                g.weighted_mse(pred, t, Some(&batch.mask))?
            }
            HeadKind::Vqbet => vqbet_loss(&mut g, &policy.params, &pcfg, h, &targets, Some(&batch.mask))?.total,
        };
        let v = g.value(loss).item() as f64;
        if !v.is_finite() {
            return Err(diverged("policy", step, &policy.params));
        }
        losses.push(v);
        g.backward(loss)?;
        g.accumulate_into(&mut policy.params)?;
        adamw_step(&mut policy.params, &mut state)?;
        report(progress, cfg, Phase::Policy, step, cfg.steps, &losses);
    }
    Ok(TrainOutcome {
        policy,
        losses,
        codebook_losses,
    })
}

/// Places the initial codes on encoded expert chunks drawn from the data,
/// so no code starts far from every latent.
fn seed_codes(
    vq: &mut ParamStore<f32>,
    policy: &Policy<f32>,
    dataset: &Dataset,
    pool: &[(usize, usize)],
    rng: &mut impl rand::Rng,
) -> Result<()> {
    let k = vq.get("codes")?.shape()[0];
    let idx = sample_indices(pool, k, rng);
    let (actions, _) = action_chunks::<f32>(dataset, &idx, policy.config().chunk)?;
    let mut g = Graph::new();
    let a = g.constant(policy.normalize_actions(&actions)?);
    let z = vq_encode(&mut g, vq, "", a)?;
    let z = g.value(z).clone();
    let codes = vq.get_mut("codes")?;
    let shape = codes.shape().to_vec();
    *codes = Tensor::new(&shape, z.into_data())?;
    Ok(())
}

/// Fraction of dataset samples whose head argmax equals the quantized expert
/// code, over the seen cameras.
pub fn code_agreement(policy: &Policy<f32>, dataset: &Dataset, max_samples: usize) -> Result<f64> {
    let featurizer = policy.featurizer()?;
    let cameras = seen_cameras();
    let pool = all_indices(dataset);
    let chunk = policy.config().chunk;
    let step = (pool.len() / max_samples.max(1)).max(1);
    let picked: Vec<_> = pool.iter().copied().step_by(step).collect();
    let mut agree = 0;
    for part in picked.chunks(64) {
        let batch = make_batch::<f32>(dataset, part, &featurizer, &policy.spec.vocab, chunk, &cameras)?;
        let expert = quantize_actions(&policy.params, "vq.", &policy.normalize_actions(&batch.targets)?)?;
        let mut g = Graph::new();
        let h = policy.hidden(&mut g, &batch.obs)?;
        let (_, chosen) = crate::policy::vqbet_head(&mut g, &policy.params, h)?;
        agree += chosen.iter().zip(&expert).filter(|(a, b)| a == b).count();
    }
    Ok(agree as f64 / picked.len() as f64)
}
