pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod oracle;
pub mod prune;
pub mod regularizer;
mod seeding;
pub mod tensor;
pub mod zig;

pub use error::{OtoError, Result};
