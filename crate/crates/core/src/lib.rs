//! Core library for a desk-scale semi-supervised learning laboratory built
//! around ensemble projector heads: models, losses, memory bank, schedules,
//! augmentations, data generation, training loop and calibration metrics.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evalcalib;
pub mod image;
pub mod losses;
pub mod membank;
pub mod model;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{classify, ema_update, init, project_all, EmaState, ModelState, NetworkSpec};
pub use tape::{grad_check, GradTape, Gradients, Var};
pub use tensor::{cross_entropy, l2_normalize, matmul, row_l2_normalize, softmax_t, Tensor};
