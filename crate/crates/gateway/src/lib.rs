//! Command line and review API for the curation pipeline.

pub mod api;
pub mod cli;
pub mod clients;
