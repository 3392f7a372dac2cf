//! Reverse-mode differentiation over small matrix graphs.
//!
//! Build a [`Graph`], evaluate it with [`forward_eval`] against one or more
//! parameter stores plus a feed of named inputs, then call
//! [`Evaluation::backward`] on a scalar node. [`adam_step`] applies the
//! resulting gradients.

mod adam;
mod check;
mod eval;
mod graph;

use std::collections::BTreeMap;

use crate::tensor::Matrix;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use check::finite_diff_check;
pub use eval::{forward_eval, rotary_inv_freq, Evaluation, Gradients, ParamSelect, Wrt};
pub(crate) use eval::{log_softmax_rows, rotate_rows};
pub use graph::{Graph, Node, NodeId, Op, Shape};

/// Named trainable matrices.
pub type Params = BTreeMap<String, Matrix>;

/// Named leaf inputs for one evaluation.
pub type Feed = BTreeMap<String, Matrix>;
