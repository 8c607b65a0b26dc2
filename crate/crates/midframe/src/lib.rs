//! Middle-frame video interpolation: coarse-to-fine flow estimation with
//! large-kernel depth-wise decoders, a decoder-only refinement stage, and an
//! analytic parameter/FLOP cost model. Ships as a library with a thin batch
//! CLI on top.

pub mod cli;
pub mod config;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod extractor;
pub mod flow;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod refine;
pub mod tape;
pub mod trainer;
pub mod warping;

pub use cli::cli_main;
