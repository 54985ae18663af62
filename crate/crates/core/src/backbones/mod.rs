//! Visual backbones: a frozen analytic geometry stub that emits per-layer
//! keypoint tokens, and a small trainable CNN with FiLM conditioning.

mod geo;
mod pixel;
mod select;

pub use geo::{FeaturePyramid, GeoStub, GeoStubConfig, RAW_WIDTH};
pub use pixel::{images_to_tensor, init_pixel_encoder, pixel_features, PIXEL_CHANNELS};
pub use select::LayerSelection;

#[cfg(test)]
mod tests;
