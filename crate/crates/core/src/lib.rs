//! View-robust imitation-learning policies over frozen geometric features.

pub mod backbones;
pub mod bench;
pub mod deskworld;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod nn;
pub mod policy;
pub mod numerics;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
