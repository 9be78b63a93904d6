//! Standard-library companion to `modnic-core`: image and container file
//! formats, synthetic dataset generation, CSV reporting, and the pipeline
//! plumbing (padding, bpp accounting) shared by the CLI commands.

pub mod bitstream;
pub mod checkpoint;
pub mod csvio;
pub mod gendata;
pub mod pipeline;
pub mod ppm;
pub mod verify;
