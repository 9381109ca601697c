//! Desk-scale momentum-contrastive representation learning.
//!
//! The crate is layered bottom-up: [`compute`] (tensors and reverse-mode
//! gradients), [`encoder`] (conv backbone plus fc/MLP projection heads),
//! [`contrastive`] (InfoNCE), [`mechanisms`] (MoCo queue + momentum encoder
//! and the end-to-end in-batch variant), [`augment`] and [`data`] (inputs),
//! [`trainer`] (SGD, schedules, checkpoints), [`eval`] (linear probe, τ sweep,
//! ablation grid) and [`bench`] (memory/time cost of the two mechanisms).

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod bench;
pub mod compute;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mechanisms;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
