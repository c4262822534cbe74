//! 2D keypoints and descriptors from grayscale images.

mod image;
mod sift;

pub use image::{decode_pnm, encode_pgm, load_image, save_pgm, Image};
pub use sift::{detect_sift_keypoints, extract_sift_descriptors, sift, ScaleSpace, SiftParams};

/// Descriptor length of the 4x4x8 layout.
pub const SIFT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2D {
    pub u: f64,
    pub v: f64,
    /// Gaussian sigma in input pixels.
    pub scale: f64,
    /// Radians in `[0, 2pi)`.
    pub orientation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor2D {
    pub values: Vec<f64>,
    /// False when the window left the image or had no gradient.
    pub valid: bool,
}
