//! File formats: manifests, run configs, checkpoints, reports.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod report;
