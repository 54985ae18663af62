use rand::Rng;

use crate::deskworld::Image;
use crate::error::Result;
use crate::nn;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Output channels of the three stride-2 conv layers.
pub const PIXEL_CHANNELS: [usize; 3] = [8, 16, 32];

/// Registers the CNN, FiLM generator and output MLP under `prefix`.
pub fn init_pixel_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_lang_emb: usize,
    d_repr: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut c_in = 3;
    for (i, &c_out) in PIXEL_CHANNELS.iter().enumerate() {
        let fan_in = c_in * 9;
        store.insert(
            format!("{prefix}.conv{i}.w"),
            nn::uniform_tensor(&[c_out, c_in, 3, 3], fan_in, rng),
        )?;
        store.insert(format!("{prefix}.conv{i}.b"), nn::uniform_tensor(&[c_out], fan_in, rng))?;
        c_in = c_out;
    }
    nn::init_linear(store, &format!("{prefix}.film_gamma"), d_lang_emb, c_in, rng)?;
    nn::init_linear(store, &format!("{prefix}.film_beta"), d_lang_emb, c_in, rng)?;
    nn::init_mlp2(store, &format!("{prefix}.head"), [c_in, d_repr, d_repr], rng)
}

/// Stacks HWC images into a `[B, 3, H, W]` tensor, checking every image is
/// `width × height`.
pub fn images_to_tensor<T: Scalar>(images: &[&Image], width: usize, height: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * 3 * width * height);
    for img in images {
        if img.width != width || img.height != height || img.data.len() != width * height * 3 {
            return Err(crate::error::Error::Dimension(format!(
                "expected a {width}x{height}x3 image, got {}x{} with {} values",
                img.width,
                img.height,
                img.data.len()
            )));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).map(|&v| T::lit(f64::from(v))));
        }
    }
    Tensor::new(&[images.len(), 3, height, width], data)
}

/// CNN → FiLM(γ = 1 + Δγ(lang), β(lang)) → global average pool → MLP.
/// `images` is `[B, 3, H, W]`, `lang_emb` is `[B, D_lang_emb]`.
pub fn pixel_features<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    images: Var,
    lang_emb: Var,
) -> Result<Var> {
    let mut h = images;
    for i in 0..PIXEL_CHANNELS.len() {
        let w = g.param(store, &format!("{prefix}.conv{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.conv{i}.b"))?;
        h = g.conv2d(h, w, b, 2, 1)?;
        h = g.relu(h);
    }
    let dg = nn::linear(g, store, &format!("{prefix}.film_gamma"), lang_emb)?;
    let one = g.constant(Tensor::from_fn(g.shape(dg), |_| T::one()));
    let gamma = g.add(one, dg)?;
    let beta = nn::linear(g, store, &format!("{prefix}.film_beta"), lang_emb)?;
    let h = g.film(h, gamma, beta)?;
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
    let pooled = g.adaptive_avg_pool1d(flat, 1)?;
    let pooled = g.reshape(pooled, &[s[0], s[1]])?;
    nn::mlp2(g, store, &format!("{prefix}.head"), pooled)
}
