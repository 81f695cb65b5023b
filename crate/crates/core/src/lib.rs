//! Iterative compilation toolkit: flag-space search over compile/run
//! backends, an append-only optimization repository with UUID-keyed merge,
//! profitability filters, feature-based flag prediction, and a simulator
//! for run-time clone selection in multiversioned programs.

pub mod cbench;
pub mod driver;
pub mod filters;
pub mod model;
pub mod packet;
pub mod predictor;
pub mod repository;
pub mod search;
pub mod unidapt;
