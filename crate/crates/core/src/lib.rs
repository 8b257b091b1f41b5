//! Reference-based colorization of monochrome medical slices and direct
//! volume rendering of the colorized stack.
//!
//! The pipeline runs in two stages. A grayscale target slice is matched
//! against a colored reference section in deep-feature space
//! ([`featnet`], [`analogy`]), the warped reference colors are cleaned up with
//! a guided edge-preserving filter ([`filters`]), and the resulting stack is
//! assembled into an RGBA volume whose opacity is the voxel lightness and
//! rendered by front-to-back ray casting ([`volren`]). [`retrieval`] picks
//! reference sections by cosine similarity of fully connected descriptors.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Results are bit-identical either way.

pub mod analogy;
pub mod featnet;
pub mod filters;
pub mod imgcore;
pub mod par;
pub mod pipeline;
pub mod retrieval;
pub mod volren;

pub use analogy::{AnalogyParams, NNField};
pub use featnet::{Descriptor, FeatureMap, FeaturePyramid, WeightContainer};
pub use filters::{FilterChoice, FgsParams, GuidedParams, DtParams, WlsParams};
pub use imgcore::{GammaParams, GrayImage, LabImage, RgbImage};
pub use retrieval::DescriptorIndex;
pub use volren::{Camera, RenderParams, Volume};
