#![no_std]

extern crate alloc;

pub mod adversary;
pub mod camera;
pub mod depthsup;
pub mod diffmath;
pub mod error;
pub mod evalkit;
pub mod math;
pub mod nn;
pub mod render;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
