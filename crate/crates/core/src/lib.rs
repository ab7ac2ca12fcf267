//! Relevance-guided lightweight control branches for diffusion transformers.
//!
//! * [`tensor`] / [`autograd`]: dense `f64` tensors and a reverse-mode tape.
//! * [`tdsm`]: the two-dimensional shuffle mixer.
//! * [`rglc`]: the lightweight control block built around the mixer.
//! * [`backbone`]: a toy frozen transformer with a control branch and the
//!   skip-layer sweep.
//! * [`relevance`]: relevance scores, ranking and placement planning.
//! * [`costmodel`]: closed-form parameter and FLOP accounting.
//! * [`distance`]: exact, bounded and Monte-Carlo interactive distances.

pub mod autograd;
pub mod backbone;
pub mod costmodel;
pub mod distance;
pub mod error;
pub mod relevance;
pub mod rglc;
pub mod tdsm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
