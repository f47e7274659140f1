//! Scene loading, trajectory output and the `shapematch` command line.

pub mod app;
pub mod bundled;
pub mod output;
pub mod scene;
