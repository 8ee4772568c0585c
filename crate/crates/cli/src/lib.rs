//! Command-line front end: corpus handling, pattern tools, benchmarks,
//! training, evaluation and sampling.

pub mod bench;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod mulaw;

pub use cli::{run, Cli};
pub use config::RunConfig;
pub use corpus::{load_corpus, periodic_corpus, Corpus, ImageMeta};
