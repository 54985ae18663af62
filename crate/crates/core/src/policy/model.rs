use serde::{Deserialize, Serialize};

use super::config::{BackboneKind, HeadKind, PolicyConfig};
use super::layers::*;
use super::vq::{init_codebook, init_vqbet_head, vqbet_head};
use crate::backbones::{images_to_tensor, init_pixel_encoder, pixel_features, GeoStub, GeoStubConfig};
use crate::deskworld::{render_image, CameraPose, SceneState, TaskSpec, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Camera-derived inputs for a batch. Geo holds `[view][layer]` tensors of
/// shape `[B, D_feat, N]`; pixel holds one `[B, 3, H, W]` tensor per view.
#[derive(Clone, Debug, PartialEq)]
pub enum Vision<T> {
    Geo(Vec<Vec<Tensor<T>>>),
    Pixel(Vec<Tensor<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T> {
    pub vision: Vision<T>,
    pub instructions: Vec<usize>,
    /// `[B, 7]`.
    pub proprio: Tensor<T>,
}

impl<T: Scalar> Observation<T> {
    pub fn batch(&self) -> usize {
        self.instructions.len()
    }

    /// Every value in a fixed order, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |t: &Tensor<T>| {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        match &self.vision {
            Vision::Geo(views) => views.iter().flatten().for_each(&mut put),
            Vision::Pixel(views) => views.iter().for_each(&mut put),
        }
        put(&self.proprio);
        for &i in &self.instructions {
            out.extend_from_slice(&(i as u64).to_le_bytes());
        }
        out
    }
}

/// Turns scenes into observations under a given camera set.
#[derive(Clone, Debug)]
pub struct Featurizer {
    backbone: BackboneKind,
    views: usize,
    stub: Option<GeoStub>,
    layers: Vec<usize>,
}

impl Featurizer {
    pub fn new(cfg: &PolicyConfig, geo: &GeoStubConfig) -> Result<Self> {
        let (stub, layers) = match cfg.backbone {
            BackboneKind::Geo => (Some(GeoStub::new(geo)?), cfg.select.indices(geo.layers)?),
            BackboneKind::Pixel => (None, Vec::new()),
        };
        Ok(Self {
            backbone: cfg.backbone,
            views: cfg.views,
            stub,
            layers,
        })
    }

    /// 1-based pyramid layers fed to the policy (empty for pixel input).
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn stub(&self) -> Option<&GeoStub> {
        self.stub.as_ref()
    }

    pub fn observe<T: Scalar>(
        &self,
        scenes: &[&SceneState],
        cameras: &[CameraPose],
        instructions: Vec<usize>,
    ) -> Result<Observation<T>> {
        if cameras.len() != self.views {
            return Err(Error::Config(format!(
                "policy expects {} camera views, got {}",
                self.views,
                cameras.len()
            )));
        }
        if scenes.is_empty() || scenes.len() != instructions.len() {
            return Err(Error::Input(format!(
                "{} scenes for {} instructions",
                scenes.len(),
                instructions.len()
            )));
        }
        let b = scenes.len();
        let vision = match self.backbone {
            BackboneKind::Geo => {
                let stub = self.stub.as_ref().expect("geo featurizer has a stub");
                let (d, n) = (stub.config().width, stub.config().keypoints);
                let mut views = Vec::with_capacity(self.views);
                for (v, cam) in cameras.iter().enumerate() {
                    let mut per_layer = vec![Vec::with_capacity(b * d * n); self.layers.len()];
                    for s in scenes {
                        let pyr = stub.features_for(s, cam, v, &self.layers)?;
                        for (dst, src) in per_layer.iter_mut().zip(&pyr.layers) {
                            dst.extend(src.iter().map(|&x| T::lit(x)));
                        }
                    }
                    views.push(
                        per_layer
                            .into_iter()
                            .map(|data| Tensor::new(&[b, d, n], data))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                Vision::Geo(views)
            }
            BackboneKind::Pixel => {
                let mut views = Vec::with_capacity(self.views);
                for cam in cameras {
                    let imgs = scenes
                        .iter()
                        .map(|s| render_image(s, cam))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<_> = imgs.iter().collect();
                    views.push(images_to_tensor(&refs, cam.width(), cam.height())?);
                }
                Vision::Pixel(views)
            }
        };
        let mut proprio = Vec::with_capacity(b * PROPRIO_DIM);
        for s in scenes {
            proprio.extend(s.proprio().iter().map(|&x| T::lit(x)));
        }
        Ok(Observation {
            vision,
            instructions,
            proprio: Tensor::new(&[b, PROPRIO_DIM], proprio)?,
        })
    }
}

pub const ACTION_MEAN: &str = "action.mean";
pub const ACTION_STD: &str = "action.std";

/// Everything needed to rebuild a policy apart from its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub policy: PolicyConfig,
    pub geo: GeoStubConfig,
    pub vocab: Vec<String>,
}

impl PolicySpec {
    /// Spec whose vocabulary is the instructions of `tasks`, in order.
    pub fn for_tasks(policy: PolicyConfig, geo: GeoStubConfig, tasks: &[TaskSpec]) -> Self {
        Self {
            policy,
            geo,
            vocab: tasks.iter().map(|t| t.instruction.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    pub spec: PolicySpec,
    pub params: ParamStore<T>,
    /// Set once the action codebook has been fitted.
    pub codebook_trained: bool,
}

impl<T: Scalar> Policy<T> {
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        let cfg = &spec.policy;
        spec.geo.validate()?;
        cfg.validate(spec.geo.layers)?;
        let mut rng = crate::seed::rng(seed, "policy-init", &[]);
        let mut params = ParamStore::new();
        match cfg.backbone {
            BackboneKind::Geo => {
                let n = cfg.select.count(spec.geo.layers)?;
                init_project_vision(&mut params, cfg, spec.geo.width, n, &mut rng)?;
            }
            BackboneKind::Pixel => {
                init_pixel_encoder(&mut params, "pixel", cfg.d_lang_emb, cfg.d_repr, &mut rng)?;
            }
        }
        let d_act = cfg.d_act();
        params.insert_frozen(ACTION_MEAN, Tensor::zeros(&[d_act]))?;
        params.insert_frozen(ACTION_STD, Tensor::from_fn(&[d_act], |_| T::one()))?;
        init_language(&mut params, cfg, &spec.vocab, &mut rng)?;
        init_proprio(&mut params, cfg, &mut rng)?;
        init_trunk(&mut params, cfg, &mut rng)?;
        match cfg.head {
            HeadKind::Mlp => init_mlp_head(&mut params, cfg, &mut rng)?,
            HeadKind::Vqbet => {
                init_vqbet_head(&mut params, cfg, &mut rng)?;
                init_codebook(&mut params, "vq.", cfg, &mut rng)?;
            }
        }
        Ok(Self {
            spec,
            params,
            codebook_trained: false,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.spec.policy
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        Featurizer::new(&self.spec.policy, &self.spec.geo)
    }

    pub fn instruction_id(&self, instruction: &str) -> Result<usize> {
        self.spec
            .vocab
            .iter()
            .position(|v| v == instruction)
            .ok_or_else(|| Error::Vocabulary(format!("unknown instruction {instruction:?}")))
    }

    /// Sets the frozen per-dimension action statistics from expert chunk
    /// rows `[N, 7·T_c]` with validity mask; dimensions that never vary keep
    /// unit scale.
    pub fn fit_action_stats(&mut self, actions: &Tensor<T>, mask: &[T]) -> Result<()> {
        let d = self.config().d_act();
        if actions.shape().len() != 2 || actions.shape()[1] != d || mask.len() != actions.len() {
            return Err(Error::Dimension(format!(
                "action rows must be [N, {d}] with a matching mask, got {:?}",
                actions.shape()
            )));
        }
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = vec![0.0; d];
        for (row, m) in actions.data().chunks(d).zip(mask.chunks(d)) {
            for j in 0..d {
                let w = m[j].as_f64();
                let v = row[j].as_f64();
                mean[j] += w * v;
                sq[j] += w * v * v;
                count[j] += w;
            }
        }
        let mut std = vec![1.0; d];
        for j in 0..d {
            if count[j] > 0.0 {
                mean[j] /= count[j];
                let var = (sq[j] / count[j] - mean[j] * mean[j]).max(0.0);
                if var.sqrt() > 1e-6 {
                    std[j] = var.sqrt();
                }
            } else {
                mean[j] = 0.0;
            }
        }
        *self.params.get_mut(ACTION_MEAN)? = Tensor::from_fn(&[d], |j| T::lit(mean[j]));
        *self.params.get_mut(ACTION_STD)? = Tensor::from_fn(&[d], |j| T::lit(std[j]));
        Ok(())
    }

    /// `(a − mean) / std` per dimension, for rows `[N, 7·T_c]`.
    pub fn normalize_actions(&self, actions: &Tensor<T>) -> Result<Tensor<T>> {
        let mean = self.params.get(ACTION_MEAN)?.data();
        let std = self.params.get(ACTION_STD)?.data();
        self.map_rows(actions, |j, v| (v - mean[j]) / std[j])
    }

    pub fn denormalize_actions(&self, actions: &Tensor<T>) -> Result<Tensor<T>> {
        let mean = self.params.get(ACTION_MEAN)?.data();
        let std = self.params.get(ACTION_STD)?.data();
        self.map_rows(actions, |j, v| v * std[j] + mean[j])
    }

    fn map_rows(&self, actions: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Result<Tensor<T>> {
        let d = self.config().d_act();
        if actions.shape().last() != Some(&d) {
            return Err(Error::Dimension(format!("action rows must end in {d}, got {:?}", actions.shape())));
        }
        let data = actions.data().iter().enumerate().map(|(i, &v)| f(i % d, v)).collect();
        Tensor::new(actions.shape(), data)
    }

    /// Hash of the frozen instruction table.
    pub fn language_table_hash(&self) -> String {
        self.params.hash_where(|n| n == "lang.table")
    }

    /// Vision tokens, one `[B, D_repr]` per view.
    pub fn vision_tokens(&self, g: &mut Graph<T>, obs: &Observation<T>) -> Result<Vec<Var>> {
        let views = match &obs.vision {
            Vision::Geo(v) => v.len(),
            Vision::Pixel(v) => v.len(),
        };
        if views != self.config().views {
            return Err(Error::Config(format!(
                "observation has {views} views, policy expects {}",
                self.config().views
            )));
        }
        match (&obs.vision, self.config().backbone) {
            (Vision::Geo(views), BackboneKind::Geo) => views
                .iter()
                .map(|layers| {
                    let vars: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
                    project_vision(g, &self.params, &vars)
                })
                .collect(),
            (Vision::Pixel(views), BackboneKind::Pixel) => {
                let lang = language_embedding(g, &self.params, &obs.instructions)?;
                views
                    .iter()
                    .map(|img| {
                        let x = g.constant(img.clone());
                        pixel_features(g, &self.params, "pixel", x, lang)
                    })
                    .collect()
            }
            _ => Err(Error::Config("observation does not match the policy backbone".into())),
        }
    }

    /// `h_action`, `[B, D_hidden]`.
    pub fn hidden(&self, g: &mut Graph<T>, obs: &Observation<T>) -> Result<Var> {
        let mut tokens = self.vision_tokens(g, obs)?;
        tokens.push(encode_language(g, &self.params, &obs.instructions)?);
        let p = g.constant(obs.proprio.clone());
        tokens.push(encode_proprio(g, &self.params, p)?);
        tokens.push(g.param(&self.params, "trunk.action_token")?);
        let seq = g.stack_tokens(&tokens)?;
        trunk_forward(g, &self.params, self.config(), seq)
    }

    /// Head output in standardized action units, `[B, 7·T_c]`.
    pub fn head(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        match self.config().head {
            HeadKind::Mlp => mlp_head(g, &self.params, h),
            HeadKind::Vqbet => {
                if !self.codebook_trained {
                    return Err(Error::State("action codebook has not been trained".into()));
                }
                Ok(vqbet_head(g, &self.params, h)?.0)
            }
        }
    }

    /// Action chunks in world units for every row of `obs`.
    pub fn predict(&self, obs: &Observation<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, obs)?;
        let out = self.head(&mut g, h)?;
        let actions = self.denormalize_actions(g.value(out))?;
        let d = self.config().d_act();
        Ok(actions.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}
