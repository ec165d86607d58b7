//! CPU 4D Gaussian splatting with a learned dynamic tone mapper.
//!
//! The crate trains an HDR 4D Gaussian scene from multi-exposure LDR frames
//! (optionally with HDR supervision) and renders HDR or tone-mapped LDR images
//! at any time and viewpoint.

pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod par;
pub mod rasterizer;
pub mod scene;
pub mod tonemap;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageF;
