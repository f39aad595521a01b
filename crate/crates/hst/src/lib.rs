//! File formats, the training driver and the command-line tool built on
//! `hst-core`.

pub mod camera;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod eval;
pub mod fsio;
pub mod occupancy;
pub mod pipeline;
pub mod plot;
pub mod tracks;
pub mod training;
