//! DynaMixer: a vision MLP whose token-mixing matrices are generated from
//! the tokens being mixed, with the autodiff engine, reference oracles,
//! capacity analysis, training loop and CLI it needs.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod mixer;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use config::{Ablation, MixGenKind, ModelConfig, StageConfig};
pub use error::{Error, Result};
pub use mixer::{Model, ModelWeights};
pub use tensor::{Graph, Real, Tensor, Var};
