//! Headless runner and HTTP control service for `faasim-core`.

pub mod headless;
pub mod service;
