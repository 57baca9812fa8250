//! Evaluation engine for active functional specifications of building
//! services: a small declarative language for rules, functions,
//! characteristics, metrics and time routines, checked against equidistant
//! sensor series.

pub mod timeseries;
pub mod eval;
pub mod ingest;
pub mod lang;
pub mod preprocess;
pub mod report;
pub mod tickets;
pub mod workspace;
