//! Command-line front end and benchmark harness for the collaboration
//! workspace.

pub mod app;
pub mod bench;
pub mod config;
pub mod report;
pub mod scrub;
