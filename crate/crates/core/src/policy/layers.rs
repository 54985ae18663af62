//! Encoders and the causal trunk, written against a shared `ParamStore`.

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::PolicyConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub fn init_project_vision<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &PolicyConfig,
    d_feat: usize,
    n_layers: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = d_feat * 3;
    for l in 0..n_layers {
        store.insert(
            format!("proj.conv{l}.w"),
            nn::uniform_tensor(&[cfg.d_conv, d_feat, 3], fan_in, rng),
        )?;
        store.insert(format!("proj.conv{l}.b"), nn::uniform_tensor(&[cfg.d_conv], fan_in, rng))?;
    }
    nn::init_mlp2(store, "proj.mlp", [n_layers * cfg.d_conv, cfg.d_repr, cfg.d_repr], rng)
}

/// Per selected layer `[B, D_feat, N]`: its own conv1d (k=3, pad 1), relu,
/// average pool to length 1; the pooled vectors are concatenated and mapped
/// by a 2-layer MLP to `[B, D_repr]`.
pub fn project_vision<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, layers: &[Var]) -> Result<Var> {
    let Some(&first) = layers.first() else {
        return Err(Error::Dimension("project_vision needs at least one layer".into()));
    };
    let s0 = g.shape(first).to_vec();
    if s0.len() != 3 {
        return Err(Error::Dimension(format!("pyramid layers must be [B, D, N], got {s0:?}")));
    }
    let mut pooled = Vec::with_capacity(layers.len());
    for (l, &x) in layers.iter().enumerate() {
        if g.shape(x) != s0.as_slice() {
            return Err(Error::Dimension(format!(
                "layer {l} has shape {:?}, expected {s0:?}",
                g.shape(x)
            )));
        }
        let w = g.param(store, &format!("proj.conv{l}.w"))?;
        let b = g.param(store, &format!("proj.conv{l}.b"))?;
        let h = g.conv1d(x, w, b, 1, 1)?;
        let h = g.relu(h);
        let p = g.adaptive_avg_pool1d(h, 1)?;
        let c = g.shape(p)[1];
        pooled.push(g.reshape(p, &[s0[0], c])?);
    }
    let cat = g.concat(&pooled)?;
    nn::mlp2(g, store, "proj.mlp", cat)
}

/// Registers the frozen instruction table and the trainable MLP on top.
/// Each row is drawn from a generator keyed by the instruction text, so an
/// instruction keeps its embedding whatever the vocabulary order.
pub fn init_language<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &PolicyConfig,
    vocab: &[String],
    rng: &mut impl Rng,
) -> Result<()> {
    if vocab.is_empty() {
        return Err(Error::Vocabulary("empty instruction vocabulary".into()));
    }
    let d = cfg.d_lang_emb;
    let mut data = Vec::with_capacity(vocab.len() * d);
    for text in vocab {
        let digest = Sha256::digest(text.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut trng = crate::seed::rng(key, "lang-table", &[]);
        data.extend_from_slice(nn::normal_tensor::<T>(&[d], 1.0, &mut trng).data());
    }
    store.insert_frozen("lang.table", Tensor::new(&[vocab.len(), d], data)?)?;
    nn::init_mlp2(store, "lang.mlp", [d, cfg.d_repr, cfg.d_repr], rng)
}

/// Frozen table rows for the given instruction ids, `[B, D_lang_emb]`.
pub fn language_embedding<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
    let table = g.param(store, "lang.table")?;
    g.gather_rows(table, ids)
}

pub fn encode_language<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
    let e = language_embedding(g, store, ids)?;
    nn::mlp2(g, store, "lang.mlp", e)
}

pub fn init_proprio<T: Scalar>(store: &mut ParamStore<T>, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<()> {
    nn::init_mlp2(
        store,
        "proprio.mlp",
        [crate::deskworld::PROPRIO_DIM, cfg.d_repr, cfg.d_repr],
        rng,
    )
}

pub fn encode_proprio<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, proprio: Var) -> Result<Var> {
    if !g.value(proprio).is_finite() {
        return Err(Error::Numeric("non-finite proprioceptive state".into()));
    }
    nn::mlp2(g, store, "proprio.mlp", proprio)
}

pub fn init_trunk<T: Scalar>(store: &mut ParamStore<T>, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<()> {
    let d = cfg.d_hidden;
    store.insert("trunk.action_token", nn::normal_tensor(&[1, cfg.d_repr], 0.02, rng))?;
    store.insert("trunk.pos", nn::normal_tensor(&[cfg.seq_len(), d], 0.02, rng))?;
    if cfg.d_repr != d {
        nn::init_linear(store, "trunk.adapter", cfg.d_repr, d, rng)?;
    }
    let ones = |n| Tensor::from_fn(&[n], |_| T::one());
    let zeros = |n| Tensor::zeros(&[n]);
    for b in 0..cfg.trunk_layers {
        let p = format!("trunk.block{b}");
        store.insert(format!("{p}.ln1.gamma"), ones(d))?;
        store.insert(format!("{p}.ln1.beta"), zeros(d))?;
        nn::init_linear(store, &format!("{p}.attn.qkv"), d, 3 * d, rng)?;
        nn::init_linear(store, &format!("{p}.attn.out"), d, d, rng)?;
        store.insert(format!("{p}.ln2.gamma"), ones(d))?;
        store.insert(format!("{p}.ln2.beta"), zeros(d))?;
        nn::init_mlp2(store, &format!("{p}.mlp"), [d, cfg.trunk_mlp_ratio * d, d], rng)?;
    }
    store.insert("trunk.ln_f.gamma", ones(d))?;
    store.insert("trunk.ln_f.beta", zeros(d))
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Runs the pre-norm causal blocks over `[B, S, D_repr]` tokens and returns
/// every position, `[B, S, D_hidden]`.
pub fn trunk_sequence<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &PolicyConfig,
    tokens: Var,
) -> Result<Var> {
    if cfg.d_hidden % cfg.trunk_heads != 0 {
        return Err(Error::Config(format!(
            "d_hidden {} is not divisible by {} heads",
            cfg.d_hidden, cfg.trunk_heads
        )));
    }
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] > cfg.seq_len() {
        return Err(Error::Dimension(format!(
            "trunk expects [B, <= {}, D], got {s:?}",
            cfg.seq_len()
        )));
    }
    let mut x = if store.contains("trunk.adapter.w") {
        nn::linear(g, store, "trunk.adapter", tokens)?
    } else {
        tokens
    };
    let pos = g.param(store, "trunk.pos")?;
    let pos = if s[1] < cfg.seq_len() { g.slice(pos, 0, 0, s[1])? } else { pos };
    x = g.add_trailing(x, pos)?;
    for b in 0..cfg.trunk_layers {
        let p = format!("trunk.block{b}");
        let h = layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let qkv = nn::linear(g, store, &format!("{p}.attn.qkv"), h)?;
        let a = g.causal_attention(qkv, cfg.trunk_heads)?;
        let a = nn::linear(g, store, &format!("{p}.attn.out"), a)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, store, &format!("{p}.ln2"), x)?;
        let m = nn::mlp2(g, store, &format!("{p}.mlp"), h)?;
        x = g.add(x, m)?;
    }
    layer_norm(g, store, "trunk.ln_f", x)
}

/// The embedding at the last (action token) position, `[B, D_hidden]`.
pub fn trunk_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &PolicyConfig,
    tokens: Var,
) -> Result<Var> {
    let out = trunk_sequence(g, store, cfg, tokens)?;
    let s = g.shape(out).to_vec();
    let last = g.slice(out, 1, s[1] - 1, s[1])?;
    g.reshape(last, &[s[0], s[2]])
}

pub fn init_mlp_head<T: Scalar>(store: &mut ParamStore<T>, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<()> {
    nn::init_mlp2(store, "head.mlp", [cfg.d_hidden, cfg.d_hidden, cfg.d_act()], rng)
}

/// Direct regression of the action chunk, `[B, 7·T_c]`.
pub fn mlp_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
    nn::mlp2(g, store, "head.mlp", h)
}
