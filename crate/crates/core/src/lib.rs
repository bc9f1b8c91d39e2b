//! Few-shot knowledge distillation by dual-stage network grafting.
//!
//! A student network is cut into the same number of blocks as its teacher.
//! Each student block is wrapped in pointwise channel adaptions and grafted
//! into the frozen teacher on its own ([`graft::graft_block`]), then the
//! trained blocks are connected from the input side one at a time
//! ([`graft::graft_prefix`]). At the end the adaption pairs are folded into
//! the next block's first convolution ([`graft::finalize_student`]), so the
//! finished student has exactly the parameter count of its architecture.
//!
//! Modules:
//! - [`netzoo`]: block-decomposable architectures, parameter and FLOP counting.
//! - [`graft`]: adaption modules, wrapped scions, grafted composites, the fold.
//! - [`fewshot`]: K-shot sampling, augmentation, seeded loaders, data sources.
//! - [`distill`]: normalized-logit losses, the two training stages, evaluation.

pub mod distill;
pub mod fewshot;
pub mod graft;
pub mod netzoo;
pub mod seed;

pub use scion_nn as nn;
pub use scion_nn::{Scalar, Tensor};
