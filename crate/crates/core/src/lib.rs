//! Electroluminescence image analysis for photovoltaic modules: module
//! detection, perspective rectification, power regression and per-cell loss
//! attribution.

// negated comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
pub mod eval;
pub mod imagecore;
pub mod pipeline;
pub mod power;
pub mod rectify;
pub mod regress;
pub mod synth;

pub use detect::{detect_modules, BoundingBox, DetectionParams};
pub use imagecore::Image16;
