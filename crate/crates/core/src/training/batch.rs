use rand::Rng;

use crate::deskworld::{CameraPose, Dataset, SceneState, ACTION_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::policy::{Featurizer, Observation};

/// A sampled training batch: observations rendered or featurized on the
/// spot, expert chunks `[B, 7·T_c]`, and a per-element validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub obs: Observation<T>,
    pub targets: Tensor<T>,
    pub mask: Vec<T>,
}

/// Flat list of every `(episode, step)` pair.
pub fn all_indices(dataset: &Dataset) -> Vec<(usize, usize)> {
    dataset
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |s| (e, s)))
        .collect()
}

/// Uniform draws with replacement.
pub fn sample_indices(pool: &[(usize, usize)], batch: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Expert chunks starting at each index, zero-padded past the episode end.
pub fn action_chunks<T: Scalar>(
    dataset: &Dataset,
    indices: &[(usize, usize)],
    chunk: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let width = ACTION_DIM * chunk;
    let mut targets = Vec::with_capacity(indices.len() * width);
    let mut mask = Vec::with_capacity(indices.len() * width);
    for &(e, s) in indices {
        let ep = dataset
            .episodes
            .get(e)
            .ok_or_else(|| Error::Input(format!("episode {e} out of range")))?;
        if s >= ep.len() {
            return Err(Error::Input(format!("step {s} out of range for episode {e} of length {}", ep.len())));
        }
        for k in 0..chunk {
            match ep.steps.get(s + k) {
                Some(st) => {
                    targets.extend(st.action.to_array().iter().map(|&v| T::lit(v)));
                    mask.extend(std::iter::repeat(T::one()).take(ACTION_DIM));
                }
                None => {
                    targets.extend(std::iter::repeat(T::zero()).take(ACTION_DIM));
                    mask.extend(std::iter::repeat(T::zero()).take(ACTION_DIM));
                }
            }
        }
    }
    Ok((Tensor::new(&[indices.len(), width], targets)?, mask))
}

pub fn make_batch<T: Scalar>(
    dataset: &Dataset,
    indices: &[(usize, usize)],
    featurizer: &Featurizer,
    vocab: &[String],
    chunk: usize,
    cameras: &[CameraPose],
) -> Result<Batch<T>> {
    let (targets, mask) = action_chunks(dataset, indices, chunk)?;
    let mut scenes: Vec<&SceneState> = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &(e, s) in indices {
        let ep = &dataset.episodes[e];
        scenes.push(&ep.steps[s].scene);
        let id = vocab
            .iter()
            .position(|v| *v == ep.instruction)
            .ok_or_else(|| Error::Vocabulary(format!("unknown instruction {:?}", ep.instruction)))?;
        ids.push(id);
    }
    Ok(Batch {
        obs: featurizer.observe(&scenes, cameras, ids)?,
        targets,
        mask,
    })
}
