//! Semantic-aware video prediction at desk scale.
//!
//! The pipeline decomposes a scene into semantic classes, learns per-class
//! recurrent dynamics of masks and backward flow fields, fuses the
//! per-class predictions with their context, warps past frames into the
//! future, detects dis-occlusions with complementary occupancy and
//! semantic-consistency criteria, and fills the dis-occluded regions with
//! a conditional inpainting network trained adversarially. A synthetic
//! world with analytic ground truth provides the data and the oracle for
//! every quantitative check.

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod inpaint;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod synthworld;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use scene::{
    BoundaryWeightMap, ClassDecomposition, Clip, FlowField, Frame, SemanticMap, SoftSemanticMap,
};
pub use tensor::Tensor;
pub use warp::{DisocclusionMask, WarpedFrame};

