//! Depth-guided image inpainting lab.
//!
//! A small reverse-mode autodiff engine ([`tensor`]), the layers built on it
//! ([`nn`]), three encoder-decoder inpainting networks ([`models`]) that take
//! an occluded RGB image and optionally its depth map, plus everything needed
//! to train and judge them: occlusion masks, image metrics, Adam training,
//! Grad-CAM inspection and PNG dataset I/O.

pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod gradcam;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
