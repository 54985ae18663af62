//! Action codebook (VQ-VAE) and the classification + offset head built on it.
//! Codebook functions take a name prefix so the codebook can be trained in
//! its own store and later merged into the policy under `vq.`.

use rand::Rng;

use super::config::PolicyConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub fn init_codebook<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &PolicyConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let vq = &cfg.vq;
    store.insert(
        format!("{prefix}codes"),
        nn::uniform_tensor(&[vq.codes, vq.latent], vq.latent, rng),
    )?;
    nn::init_mlp2(store, &format!("{prefix}enc"), [cfg.d_act(), vq.hidden, vq.latent], rng)?;
    nn::init_mlp2(store, &format!("{prefix}dec"), [vq.latent, vq.hidden, cfg.d_act()], rng)
}

/// Index of the code closest to `z` in Euclidean distance, with the squared
/// distance. Ties go to the smaller index.
pub fn nearest_code<T: Scalar>(z: &[T], codes: &Tensor<T>) -> (usize, f64) {
    let d = codes.shape()[1];
    let mut best = (0, f64::INFINITY);
    for (k, row) in codes.data().chunks(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(z)
            .map(|(&c, &x)| (x.as_f64() - c.as_f64()).powi(2))
            .sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

pub fn vq_encode<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, actions: Var) -> Result<Var> {
    nn::mlp2(g, store, &format!("{prefix}enc"), actions)
}

pub fn vq_decode<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, z: Var) -> Result<Var> {
    nn::mlp2(g, store, &format!("{prefix}dec"), z)
}

pub struct Quantized {
    pub indices: Vec<usize>,
    /// Selected code rows `[B, d_z]`, differentiable with respect to the codes.
    pub code: Var,
    /// `z_e + stopgrad(code − z_e)`: the code's value with the encoder's gradient.
    pub straight_through: Var,
}

pub fn vq_quantize<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, z_e: Var) -> Result<Quantized> {
    let codes_t = store.get(&format!("{prefix}codes"))?;
    let d = codes_t.shape()[1];
    if g.shape(z_e).last() != Some(&d) {
        return Err(Error::Dimension(format!(
            "latent {:?} does not match code width {d}",
            g.shape(z_e)
        )));
    }
    g.value(z_e).check_finite("vq latent")?;
    let indices: Vec<usize> = g
        .value(z_e)
        .data()
        .chunks(d)
        .map(|z| nearest_code(z, codes_t).0)
        .collect();
    let codes = g.param(store, &format!("{prefix}codes"))?;
    let code = g.gather_rows(codes, &indices)?;
    let diff = g.sub(code, z_e)?;
    let diff = g.detach(diff);
    let straight_through = g.add(z_e, diff)?;
    Ok(Quantized {
        indices,
        code,
        straight_through,
    })
}

pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub indices: Vec<usize>,
}

/// Reconstruction MSE + ‖sg(z_e) − e‖² + β‖z_e − sg(e)‖², squared norms
/// summed over the latent and averaged over the batch.
pub fn vqvae_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    beta: f64,
    actions: Var,
) -> Result<VqLoss> {
    let z_e = vq_encode(g, store, prefix, actions)?;
    let q = vq_quantize(g, store, prefix, z_e)?;
    let recon_out = vq_decode(g, store, prefix, q.straight_through)?;
    let recon = g.mse(recon_out, actions)?;
    let latent = *g.shape(z_e).last().expect("rank 2") as f64;
    let z_sg = g.detach(z_e);
    let cb = g.mse(z_sg, q.code)?;
    let codebook = g.scale(cb, latent);
    let e_sg = g.detach(q.code);
    let cm = g.mse(z_e, e_sg)?;
    let commitment = g.scale(cm, latent);
    let weighted = g.scale(commitment, beta);
    let t = g.add(recon, codebook)?;
    let total = g.add(t, weighted)?;
    Ok(VqLoss {
        total,
        recon,
        codebook,
        commitment,
        indices: q.indices,
    })
}

/// Quantization indices of expert action rows, outside any graph.
pub fn quantize_actions<T: Scalar>(store: &ParamStore<T>, prefix: &str, actions: &Tensor<T>) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let a = g.constant(actions.clone());
    let z = vq_encode(&mut g, store, prefix, a)?;
    Ok(vq_quantize(&mut g, store, prefix, z)?.indices)
}

pub fn init_vqbet_head<T: Scalar>(store: &mut ParamStore<T>, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<()> {
    nn::init_linear(store, "head.cls", cfg.d_hidden, cfg.vq.codes, rng)?;
    nn::init_mlp2(
        store,
        "head.offset",
        [cfg.d_hidden + cfg.vq.latent, cfg.d_hidden, cfg.d_act()],
        rng,
    )
}

fn offset_and_base<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h: Var,
    indices: &[usize],
) -> Result<(Var, Var)> {
    let codes = g.param(store, "vq.codes")?;
    let code = g.gather_rows(codes, indices)?;
    let base = vq_decode(g, store, "vq.", code)?;
    let inp = g.concat(&[h, code])?;
    let offset = nn::mlp2(g, store, "head.offset", inp)?;
    Ok((offset, base))
}

pub struct VqbetLoss {
    pub total: Var,
    pub classification: Var,
    pub offset: Var,
    pub targets: Vec<usize>,
}

/// Cross-entropy against the expert's code plus `λ_off` times the MSE of
/// `decode(code_gt) + offset` against the expert chunk.
pub fn vqbet_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &PolicyConfig,
    h: Var,
    actions: &Tensor<T>,
    mask: Option<&[T]>,
) -> Result<VqbetLoss> {
    let targets = quantize_actions(store, "vq.", actions)?;
    let logits = nn::linear(g, store, "head.cls", h)?;
    let classification = g.cross_entropy(logits, &targets)?;
    let (offset, base) = offset_and_base(g, store, h, &targets)?;
    let pred = g.add(base, offset)?;
    let a = g.constant(actions.clone());
    let mse = g.weighted_mse(pred, a, mask)?;
    let offset_term = g.scale(mse, cfg.vq.offset_weight);
    let total = g.add(classification, offset_term)?;
    Ok(VqbetLoss {
        total,
        classification,
        offset: mse,
        targets,
    })
}

/// `decode(code_k*) + offset` with `k* = argmax logits`, plus the chosen codes.
pub fn vqbet_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<(Var, Vec<usize>)> {
    let logits = nn::linear(g, store, "head.cls", h)?;
    let k = g.shape(logits)[1];
    let chosen: Vec<usize> = g
        .value(logits)
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    let (offset, base) = offset_and_base(g, store, h, &chosen)?;
    Ok((g.add(base, offset)?, chosen))
}
