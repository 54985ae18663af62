//! Small layer helpers shared by the encoders, trunk and heads. Weights are
//! stored `[in, out]` so a linear layer is `x · W + b`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Uniform in `±1/√fan_in`.
pub fn uniform_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(n.sample(rng)))
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), uniform_tensor(&[d_in, d_out], d_in, rng))?;
    store.insert(format!("{name}.b"), uniform_tensor(&[d_out], d_in, rng))
}

/// Two linear layers with a relu between them.
pub fn init_mlp2<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: [usize; 3],
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(store, &format!("{name}.fc1"), dims[0], dims[1], rng)?;
    init_linear(store, &format!("{name}.fc2"), dims[1], dims[2], rng)
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_trailing(y, b)
}

pub fn mlp2<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{name}.fc1"), x)?;
    let h = g.relu(h);
    linear(g, store, &format!("{name}.fc2"), h)
}
