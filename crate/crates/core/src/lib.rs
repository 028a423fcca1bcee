//! Preprocessing and evaluation machinery for multimodal medical models.
//!
//! The crate is organised around the data path of an evaluation run:
//!
//! * [`volgrid`] turns CT and MR voxel volumes into capped sequences of
//!   896×896 RGB slices.
//! * [`slidegrid`] turns pathology whole-slide pyramids into ordered,
//!   capped patch sets.
//! * [`promptforge`] renders the fixed prompt templates and parses model
//!   replies into typed answers.
//! * [`medmetrics`] holds the scoring functions.
//! * [`evalrunner`] drives a model endpoint over a manifest and emits
//!   reproducible reports.

pub mod config;
pub mod digest;
pub mod evalrunner;
pub mod medmetrics;
pub mod promptforge;
pub mod slidegrid;
pub mod volgrid;

/// Number of vision tokens a single 896×896 image occupies.
pub const TOKENS_PER_IMAGE: usize = 256;

/// Side length, in pixels, of every image handed to the model.
pub const MODEL_IMAGE_SIZE: u32 = 896;

/// Vision tokens consumed by `n_images` model-ready images.
pub fn vision_token_count(n_images: usize) -> usize {
    TOKENS_PER_IMAGE * n_images
}

/// Encodes an 8-bit RGB image as PNG.
pub fn encode_png(img: &image::RgbImage) -> Result<Vec<u8>, String> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(buf.into_inner())
}
