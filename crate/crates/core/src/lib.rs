// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod graph;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{clip_inf, Element, Tensor};
pub mod depth_net;
pub mod pnm;
pub mod scenegen;
pub mod targets;
pub mod attack;
pub mod eval_metrics;
pub mod defenses;
pub mod config;
pub mod cli;
