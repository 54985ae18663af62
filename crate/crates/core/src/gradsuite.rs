//! The full finite-difference gradient suite: every graph primitive, then
//! the policy components and whole policies, at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deskworld::{make_tasks, reset, seen_cameras, SceneState};
use crate::error::Result;
use crate::numerics::{grad_check, grad_check_params, probe_loss, Fault, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use crate::policy::{
    init_codebook, init_mlp_head, init_project_vision, init_trunk, init_vqbet_head, mlp_head, project_vision,
    trunk_forward, vqbet_loss, BackboneKind, Policy, PolicyConfig, PolicySpec, VqConfig,
};

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub component: String,
    /// Worst `|g_ad − g_fd| / max(1, |g_fd|)` over all checked entries.
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= SUITE_TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type Primitive = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    vec![
        ("matmul", vec![vec![5, 4], vec![4, 3]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_loss(g, y)
        }),
        ("conv1d", vec![vec![2, 3, 8], vec![4, 3, 3], vec![4]], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 1, 1)?;
            probe_loss(g, y)
        }),
        ("conv1d_strided", vec![vec![2, 3, 8], vec![2, 3, 2], vec![2]], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 2, 0)?;
            probe_loss(g, y)
        }),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            probe_loss(g, y)
        }),
        ("adaptive_avg_pool1d", vec![vec![2, 3, 7]], |g, v| {
            let y = g.adaptive_avg_pool1d(v[0], 3)?;
            probe_loss(g, y)
        }),
        ("relu", vec![vec![3, 4]], |g, v| {
            let y = g.relu(v[0]);
            probe_loss(g, y)
        }),
        ("softmax", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0])?;
            probe_loss(g, y)
        }),
        ("add_sub_mul_scale", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.add(b, v[0])?;
            let d = g.scale(c, -1.7);
            probe_loss(g, d)
        }),
        ("add_trailing", vec![vec![2, 3, 4], vec![3, 4]], |g, v| {
            let y = g.add_trailing(v[0], v[1])?;
            probe_loss(g, y)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            probe_loss(g, y)
        }),
        ("film", vec![vec![2, 3, 2, 2], vec![2, 3], vec![2, 3]], |g, v| {
            let y = g.film(v[0], v[1], v[2])?;
            probe_loss(g, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 5]], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]])?;
            probe_loss(g, y)
        }),
        ("slice_reshape", vec![vec![2, 5, 3]], |g, v| {
            let s = g.slice(v[0], 1, 1, 4)?;
            let y = g.reshape(s, &[6, 3])?;
            probe_loss(g, y)
        }),
        ("gather_rows", vec![vec![5, 3]], |g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            probe_loss(g, y)
        }),
        ("stack_tokens", vec![vec![3, 4], vec![1, 4], vec![3, 4]], |g, v| {
            let y = g.stack_tokens(&[v[0], v[1], v[2]])?;
            probe_loss(g, y)
        }),
        ("causal_attention", vec![vec![2, 4, 12]], |g, v| {
            let y = g.causal_attention(v[0], 2)?;
            probe_loss(g, y)
        }),
        ("weighted_mse", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let w: Vec<f64> = (0..12).map(|i| f64::from(i % 3 != 0)).collect();
            g.weighted_mse(v[0], v[1], Some(&w))
        }),
        ("cross_entropy", vec![vec![3, 5]], |g, v| g.cross_entropy(v[0], &[0, 4, 2])),
    ]
}

/// Reduced widths so the parameter-wise checks stay quick.
fn small_cfg() -> PolicyConfig {
    PolicyConfig {
        d_repr: 8,
        d_conv: 4,
        d_hidden: 8,
        d_lang_emb: 4,
        trunk_heads: 2,
        trunk_mlp_ratio: 2,
        vq: VqConfig {
            codes: 6,
            latent: 3,
            hidden: 5,
            ..VqConfig::default()
        },
        ..PolicyConfig::default()
    }
}

fn check_project_vision(opts: &GradCheckOptions) -> Result<f64> {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    init_project_vision(&mut store, &cfg, 5, 3, &mut rng)?;
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| random(&[2, 5, 6], &mut rng)).collect();
    let by_input = grad_check(
        |g, xs| {
            let z = project_vision(g, &store, xs)?;
            probe_loss(g, z)
        },
        &inputs,
        opts,
    )?;
    let by_param = grad_check_params(
        |g, st| {
            let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let z = project_vision(g, st, &xs)?;
            probe_loss(g, z)
        },
        &store,
        opts,
    )?;
    Ok(by_input.max(by_param))
}

fn check_trunk(opts: &GradCheckOptions) -> Result<f64> {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    init_trunk(&mut store, &cfg, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[2, 5, 8], &mut rng);
    let by_input = grad_check(
        |g, xs| {
            let h = trunk_forward(g, &store, &cfg, xs[0])?;
            probe_loss(g, h)
        },
        &[x.clone()],
        opts,
    )?;
    let by_param = grad_check_params(
        |g, st| {
            let t = g.constant(x.clone());
            let h = trunk_forward(g, st, &cfg, t)?;
            probe_loss(g, h)
        },
        &store,
        opts,
    )?;
    Ok(by_input.max(by_param))
}

fn check_mlp_head(opts: &GradCheckOptions) -> Result<f64> {
    let cfg = PolicyConfig {
        chunk: 3,
        ..small_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    init_mlp_head(&mut store, &cfg, &mut rng)?;
    let h = random(&[2, 8], &mut rng);
    grad_check_params(
        |g, st| {
            let hv = g.constant(h.clone());
            let a = mlp_head(g, st, hv)?;
            probe_loss(g, a)
        },
        &store,
        opts,
    )
}

fn check_vqbet_head(opts: &GradCheckOptions) -> Result<f64> {
    let cfg = PolicyConfig {
        chunk: 2,
        ..small_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    init_vqbet_head(&mut store, &cfg, &mut rng)?;
    init_codebook(&mut store, "vq.", &cfg, &mut rng)?;
    let vq: Vec<String> = store.names().filter(|n| n.starts_with("vq.")).map(str::to_string).collect();
    for name in vq {
        store.freeze(&name)?;
    }
    let h = random(&[3, 8], &mut rng);
    let actions = random(&[3, 14], &mut rng);
    grad_check_params(
        |g, st| {
            let hv = g.constant(h.clone());
            Ok(vqbet_loss(g, st, &cfg, hv, &actions, None)?.total)
        },
        &store,
        opts,
    )
}

fn check_end_to_end(backbone: BackboneKind, opts: &GradCheckOptions) -> Result<f64> {
    let tasks = make_tasks();
    let cfg = PolicyConfig {
        backbone,
        ..small_cfg()
    };
    // relu kinks within one step of zero spoil central differences at
    // h = 1e-4; this init seed keeps every preactivation clear of them
    let p = Policy::<f64>::new(PolicySpec::for_tasks(cfg, Default::default(), &tasks), 39)?;
    let scenes: Vec<SceneState> = (0..2).map(|i| reset(&tasks[i % 4], 100 + i as u64)).collect::<Result<_>>()?;
    let refs: Vec<&SceneState> = scenes.iter().collect();
    let obs = p.featurizer()?.observe::<f64>(&refs, &seen_cameras(), vec![0, 1])?;
    let opts = GradCheckOptions {
        max_entries_per_tensor: Some(24),
        ..*opts
    };
    grad_check_params(
        |g, st| {
            let q = Policy {
                params: st.clone(),
                ..p.clone()
            };
            let h = q.hidden(g, &obs)?;
            let a = mlp_head(g, st, h)?;
            probe_loss(g, a)
        },
        &p.params,
        &opts,
    )
}

/// Runs every check; `fault` corrupts the named backward rule so the suite
/// can be shown to catch it.
pub fn run_gradient_suite(fault: Option<Fault>) -> Result<Vec<SuiteEntry>> {
    let opts = GradCheckOptions {
        fault,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    for (name, shapes, f) in primitives() {
        let mut err: f64 = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            err = err.max(grad_check(f, &inputs, &opts)?);
        }
        out.push(SuiteEntry {
            component: name.to_string(),
            max_rel_err: err,
        });
    }
    let composites: [(&str, Box<dyn Fn(&GradCheckOptions) -> Result<f64>>); 6] = [
        ("project_vision", Box::new(check_project_vision)),
        ("trunk", Box::new(check_trunk)),
        ("mlp_head", Box::new(check_mlp_head)),
        ("vqbet_head", Box::new(check_vqbet_head)),
        ("end_to_end_geo", Box::new(|o| check_end_to_end(BackboneKind::Geo, o))),
        ("end_to_end_pixel", Box::new(|o| check_end_to_end(BackboneKind::Pixel, o))),
    ];
    for (name, check) in composites {
        out.push(SuiteEntry {
            component: name.to_string(),
            max_rel_err: check(&opts)?,
        });
    }
    Ok(out)
}
