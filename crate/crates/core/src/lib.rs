//! Reconstruction of dynamic, flame-like scenes from a few calibrated,
//! synchronized views as time-parameterized 3D Gaussians.

pub mod background;
pub mod camera;
pub mod depthfuse;
pub mod flowfuse;
pub mod raster;
pub mod gaussians;
pub mod splatrender;
pub mod optimize;
pub mod sync;
pub mod metrics;
pub mod synth;
pub mod io;
