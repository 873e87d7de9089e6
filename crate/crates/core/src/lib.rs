pub mod cattrain;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod gatenet;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod protohead;
pub mod run;

pub use error::{CtegError, Result};
