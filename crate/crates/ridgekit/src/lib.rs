//! File formats, parallel drivers, experiment harnesses and the `ridgekit`
//! command line on top of [`ridgekit_core`].

pub mod cli;
pub mod experiments;
pub mod formats;
pub mod manifest;
pub mod parallel;

pub use ridgekit_core as core;
