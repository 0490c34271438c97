//! Minimal reverse-mode autodiff and optimization machinery: a flat tape
//! over f64 tensors, grouped conv kernels, partial convolutions, named
//! parameter sets, Adam, and the checkpoint archive.

pub mod kernels;
pub mod params;
pub mod partial;
pub mod tape;

pub use params::{extract_prefixed, load_checkpoint, prefixed_arrays, save_checkpoint};
pub use params::{Adam, GradStore, ParamSet};
pub use tape::{Tape, VarId};
