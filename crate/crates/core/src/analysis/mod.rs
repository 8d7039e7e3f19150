//! Representation and spectral analyses of the decoder.

pub mod pca;
pub mod spectral;
pub mod layers;
