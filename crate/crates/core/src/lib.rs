//! Instance-adaptive prototype segmentation guided by self-supervised pseudo
//! masks, on a small `f64` reverse-mode tensor kernel.

pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ipl;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod smg;

pub use error::{Error, Result};
