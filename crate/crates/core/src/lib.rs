//! Occlusion-aware three-layer volumetric reconstruction of an articulated body.
//!
//! A scene is split along every camera ray into an occlusion layer (camera to
//! the inner sphere), a foreground layer (the articulated body, rendered from a
//! canonical signed-distance field through linear blend skinning) and an
//! unbounded background layer (inverted-sphere coordinates). The layers are
//! volume rendered separately and composited front to back.

pub mod deform;
pub mod error;
pub mod eval;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod optim;
pub mod par;
pub mod raster;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
