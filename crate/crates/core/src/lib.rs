//! Dual-expert cooperative source-free domain adaptation.
//!
//! A frozen source classifier with a residual adapter and a frozen
//! embedding classifier with a trainable prompt are adapted to an unlabeled
//! target set through a retrieval, augmentation and interaction schedule.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod experts;
pub mod geometry;
pub mod losses;
pub mod numerics;
pub mod rain;

pub use error::{ExclError, Result};
