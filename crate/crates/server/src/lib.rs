//! Service and command line over a vidkg store.

pub mod api;
pub mod cli;
