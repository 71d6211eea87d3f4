pub mod grammar;
pub mod numeric;
pub mod config;
pub mod nl_reader;
pub mod ast_reader;
pub mod decoder;
pub mod model;
pub mod inference;
pub mod metrics;
pub mod training;
pub mod corpus;
pub mod synth;
