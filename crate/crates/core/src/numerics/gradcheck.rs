//! Central-difference verification of reverse-mode gradients (64-bit).

use crate::error::{Error, Result};
use crate::numerics::{Fault, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub fault: Option<Fault>,
    /// Cap on checked entries per tensor; entries are taken evenly spaced.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            fault: None,
            max_entries_per_tensor: None,
        }
    }
}

fn new_graph(opts: &GradCheckOptions) -> Graph<f64> {
    match opts.fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    }
}

fn checked_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1.0)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Dimension(format!("checked function must be scalar, got {:?}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::Numeric("checked function produced a non-finite value".into()));
    }
    Ok(x)
}

/// Max over input elements of `|g_ad − g_fd| / max(1, |g_fd|)` for a scalar
/// function of free input tensors.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = new_graph(opts);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = new_graph(opts);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in checked_indices(inputs[t].len(), opts.max_entries_per_tensor) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * opts.step);
            worst = worst.max(rel_err(analytic[t][i], fd));
        }
    }
    Ok(worst)
}

/// Same measure as [`grad_check`], taken over every trainable entry of a
/// parameter store that `f` reads through [`Graph::param`].
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = new_graph(opts);
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    g.accumulate_into(&mut with_grads)?;

    let names: Vec<String> = store.trainable_names().map(str::to_string).collect();
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = store.get(&name)?.len();
        let analytic = with_grads.get(&name)?.grad.clone().unwrap_or_else(|| vec![0.0; len]);
        for i in checked_indices(len, opts.max_entries_per_tensor) {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let mut gu = new_graph(opts);
            let ou = f(&mut gu, &work)?;
            let up = scalar_of(&gu, ou)?;
            work.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let mut gd = new_graph(opts);
            let od = f(&mut gd, &work)?;
            let down = scalar_of(&gd, od)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * opts.step);
            worst = worst.max(rel_err(analytic[i], fd));
        }
    }
    Ok(worst)
}

/// `mean((y − c)²)` against a fixed pattern `c`, so every output element
/// reaches the loss with a different weight.
pub fn probe_loss<T: Scalar>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let target = Tensor::from_fn(&shape, |i| T::lit(((i * 7919) % 13) as f64 / 13.0 - 0.5));
    let t = g.constant(target);
    g.mse(y, t)
}
