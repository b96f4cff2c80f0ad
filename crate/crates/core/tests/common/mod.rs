//! Checks shared by the per-area suites and the acceptance runner.
#![allow(dead_code)]

pub mod golden;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;
pub mod roi;
